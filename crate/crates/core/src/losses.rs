//! Task losses, gate-derived pseudo-labels and uncertainty-weighted objectives.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use semimoe_autograd::{Tensor, Var};

use crate::error::{Error, Result};
use crate::experts::ExpertOutput;
use crate::gating::GateOutput;
use crate::labels::{compute_sdf, extract_boundary, BinaryMask};
use crate::nn::Bound;
use crate::task::Task;

pub const DICE_SMOOTH: f64 = 1.0;

/// Soft Dice loss on the softmax foreground channel, averaged over the batch.
///
/// `logits [B, 2, H, W]`, `target [B, 1, H, W]` with values in {0, 1}.
pub fn dice_loss<'t>(logits: Var<'t>, target: &Tensor, smooth: f64) -> Var<'t> {
    let prob = logits.softmax().narrow(1, 1);
    dice_on_probability(prob, target, smooth)
}

/// Soft Dice between a probability map `[B, 1, H, W]` and a binary target.
pub fn dice_on_probability<'t>(prob: Var<'t>, target: &Tensor, smooth: f64) -> Var<'t> {
    let tape = prob.tape();
    assert_eq!(prob.value().shape(), target.shape(), "dice: prediction/target shape mismatch");
    let q = tape.constant(target.clone());
    let inter = prob.mul(q).sum_per_sample();
    let denom = prob.sum_per_sample().add(q.sum_per_sample()).add_scalar(smooth);
    let ratio = inter.mul_scalar(2.0).add_scalar(smooth).div(denom);
    ratio.neg().add_scalar(1.0).mean()
}

/// Mean squared error between `tanh(raw)` and the target SDF.
pub fn sdf_loss<'t>(raw: Var<'t>, target: &Tensor) -> Var<'t> {
    let tape = raw.tape();
    assert_eq!(raw.value().shape(), target.shape(), "sdf loss: shape mismatch");
    raw.tanh().sub(tape.constant(target.clone())).square().mean()
}

/// Per-task regression/classification targets for a batch. Classification
/// targets are `[B, 1, H, W]` 0/1 maps; the SDF target is `[B, 1, H, W]` in `[-1, 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    pub seg: Option<Tensor>,
    pub sdf: Option<Tensor>,
    pub bnd: Option<Tensor>,
}

impl Targets {
    pub fn get(&self, task: Task) -> Option<&Tensor> {
        match task {
            Task::Seg => self.seg.as_ref(),
            Task::Sdf => self.sdf.as_ref(),
            Task::Bnd => self.bnd.as_ref(),
        }
    }

    fn require(&self, task: Task) -> Result<&Tensor> {
        self.get(task)
            .ok_or_else(|| Error::Data(format!("missing {task} target")))
    }
}

/// Pseudo-labels are plain targets: they hold no graph reference, so nothing
/// computed from them can send gradient back into the gates.
pub type PseudoLabels = Targets;

/// Loss of one prediction against its task target.
pub fn task_loss<'t>(task: Task, prediction: Var<'t>, target: &Tensor, smooth: f64) -> Var<'t> {
    if task.is_classification() {
        dice_loss(prediction, target, smooth)
    } else {
        sdf_loss(prediction, target)
    }
}

/// Named per-task scalar losses, in canonical task order.
#[derive(Clone)]
pub struct TaskLosses<'t> {
    terms: Vec<(Task, Var<'t>)>,
}

impl<'t> TaskLosses<'t> {
    pub fn new(mut terms: Vec<(Task, Var<'t>)>) -> Self {
        terms.sort_by_key(|(t, _)| *t);
        Self { terms }
    }

    pub fn get(&self, task: Task) -> Option<Var<'t>> {
        self.terms.iter().find(|(t, _)| *t == task).map(|(_, v)| *v)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Task, Var<'t>)> {
        self.terms.iter()
    }

    pub fn values(&self) -> BTreeMap<Task, f64> {
        self.terms.iter().map(|(t, v)| (*t, v.item())).collect()
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.terms.iter().map(|(t, _)| *t).collect()
    }
}

/// Labeled-phase losses: every expert prediction and every gate prediction
/// against the ground truth of its task.
pub fn supervised_task_losses<'t>(
    experts: &[(Task, ExpertOutput<'t>)],
    gates: &[GateOutput<'t>],
    labels: &Targets,
    smooth: f64,
) -> Result<TaskLosses<'t>> {
    let mut terms = Vec::with_capacity(experts.len());
    for (task, out) in experts {
        let target = labels.require(*task)?;
        let mut loss = task_loss(*task, out.prediction, target, smooth);
        if let Some(g) = gates.iter().find(|g| g.task == *task) {
            loss = loss.add(task_loss(*task, g.prediction, target, smooth));
        }
        terms.push((*task, loss));
    }
    Ok(TaskLosses::new(terms))
}

/// Foreground where the second logit strictly beats the first (argmax, ties to background).
fn argmax_foreground(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    assert_eq!(s[1], 2, "argmax expects two-channel logits");
    let (b, plane) = (s[0], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(b * plane);
    for n in 0..b {
        let bg = &d[(2 * n) * plane..(2 * n + 1) * plane];
        let fg = &d[(2 * n + 1) * plane..(2 * n + 2) * plane];
        out.extend(bg.iter().zip(fg).map(|(b, f)| if f > b { 1.0 } else { 0.0 }));
    }
    Tensor::new(&[b, 1, s[2], s[3]], out)
}

/// Unlabeled-phase targets from the gate predictions: argmax for the
/// classification tasks, `tanh` for the SDF. Values are copied out of the
/// graph, so gradients stop here.
///
/// With `derive_from_seg`, only the segmentation gate is consulted and the SDF
/// and boundary targets are computed from its argmax mask with the label
/// transforms (single-gate variant).
pub fn make_pseudo_labels(gates: &[GateOutput<'_>], derive_from_seg: bool) -> Result<PseudoLabels> {
    let pred = |task: Task| gates.iter().find(|g| g.task == task).map(|g| g.prediction.value());
    let seg = pred(Task::Seg).map(|v| argmax_foreground(&v));
    if derive_from_seg {
        let seg = seg.ok_or_else(|| Error::Config("single-gate pseudo-labels need a seg gate".into()))?;
        let (sdf, bnd) = transforms_of_masks(&seg)?;
        return Ok(Targets {
            seg: Some(seg),
            sdf: Some(sdf),
            bnd: Some(bnd),
        });
    }
    Ok(Targets {
        seg,
        sdf: pred(Task::Sdf).map(|v| v.map(f64::tanh)),
        bnd: pred(Task::Bnd).map(|v| argmax_foreground(&v)),
    })
}

/// SDF and boundary maps for each `[1, H, W]` mask of a `[B, 1, H, W]` batch.
pub fn transforms_of_masks(masks: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = masks.shape();
    let (b, h, w) = (s[0], s[2], s[3]);
    let mut sdf = Vec::with_capacity(b * h * w);
    let mut bnd = Vec::with_capacity(b * h * w);
    for chunk in masks.data().chunks(h * w) {
        let m = BinaryMask::new(h, w, chunk.iter().map(|&v| u8::from(v > 0.5)).collect())?;
        sdf.extend_from_slice(compute_sdf(&m).data());
        bnd.extend(extract_boundary(&m).mask().data().iter().map(|&v| v as f64));
    }
    Ok((Tensor::new(s, sdf), Tensor::new(s, bnd)))
}

/// Unlabeled-phase losses: expert predictions against the pseudo-labels.
pub fn unsupervised_task_losses<'t>(
    experts: &[(Task, ExpertOutput<'t>)],
    pseudo: &PseudoLabels,
    smooth: f64,
) -> Result<TaskLosses<'t>> {
    let mut terms = Vec::with_capacity(experts.len());
    for (task, out) in experts {
        let target = pseudo.require(*task)?;
        terms.push((*task, task_loss(*task, out.prediction, target, smooth)));
    }
    Ok(TaskLosses::new(terms))
}

pub fn sigma_name(task: Task) -> String {
    format!("sigma.{}", task.name())
}

pub const SIGMA_PREFIX: &str = "sigma.";

/// Current task-uncertainty values, read out of a parameter store.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyParams {
    pub values: BTreeMap<Task, f64>,
}

impl UncertaintyParams {
    pub fn get(&self, task: Task) -> f64 {
        self.values.get(&task).copied().unwrap_or(0.0)
    }
}

/// `Σ_m e^{-σ_m} L_m + γ Σ_m e^{σ_m}` over the tasks present in `losses`.
pub fn adaptive_weighting<'t>(losses: &TaskLosses<'t>, params: &Bound<'t>, gamma: f64) -> Result<Var<'t>> {
    let (weighted, reg) = adaptive_parts(losses, params, gamma)?;
    Ok(weighted.add(reg))
}

/// The two halves of the adaptive objective: `(Σ e^{-σ} L, γ Σ e^{σ})`.
pub fn adaptive_parts<'t>(
    losses: &TaskLosses<'t>,
    params: &Bound<'t>,
    gamma: f64,
) -> Result<(Var<'t>, Var<'t>)> {
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    let mut weighted: Option<Var<'t>> = None;
    let mut reg: Option<Var<'t>> = None;
    for (task, loss) in losses.iter() {
        let sigma = params.get(&sigma_name(*task));
        let term = loss.mul(sigma.neg().exp());
        let r = sigma.exp();
        weighted = Some(weighted.map_or(term, |acc| acc.add(term)));
        reg = Some(reg.map_or(r, |acc| acc.add(r)));
    }
    let weighted = weighted.ok_or_else(|| Error::Config("no task losses to weight".into()))?;
    Ok((weighted, reg.expect("same length as weighted").mul_scalar(gamma)))
}

/// Unweighted `Σ_m L_m`, the linear-sum variant.
pub fn linear_sum<'t>(losses: &TaskLosses<'t>) -> Result<Var<'t>> {
    losses
        .iter()
        .map(|(_, v)| *v)
        .reduce(|a, b| a.add(b))
        .ok_or_else(|| Error::Config("no task losses to sum".into()))
}

/// How the per-task losses of a phase are combined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Weighting {
    Adaptive { gamma: f64 },
    LinearSum,
}

/// Where the unsupervised weight λ applies when losses are adaptively weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaScope {
    /// λ scales the whole unsupervised objective, regularizer included.
    #[default]
    Whole,
    /// λ scales only the weighted task terms; the regularizer enters unscaled.
    TaskTerms,
}

/// Supervised-phase objective.
pub fn supervised_objective<'t>(losses: &TaskLosses<'t>, params: &Bound<'t>, weighting: Weighting) -> Result<Var<'t>> {
    match weighting {
        Weighting::Adaptive { gamma } => adaptive_weighting(losses, params, gamma),
        Weighting::LinearSum => linear_sum(losses),
    }
}

/// Unsupervised-phase objective, including the λ factor.
pub fn unsupervised_objective<'t>(
    losses: &TaskLosses<'t>,
    params: &Bound<'t>,
    weighting: Weighting,
    lambda: f64,
    scope: LambdaScope,
) -> Result<Var<'t>> {
    match weighting {
        Weighting::Adaptive { gamma } => {
            let (weighted, reg) = adaptive_parts(losses, params, gamma)?;
            Ok(match scope {
                LambdaScope::Whole => weighted.add(reg).mul_scalar(lambda),
                LambdaScope::TaskTerms => weighted.mul_scalar(lambda).add(reg),
            })
        }
        Weighting::LinearSum => Ok(linear_sum(losses)?.mul_scalar(lambda)),
    }
}

/// Scalar accounting of the full objective
/// `L_total = W(sup) + λ · W(unsup)` for one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: BTreeMap<Task, f64>,
    pub unsup: BTreeMap<Task, f64>,
    pub sigma: BTreeMap<Task, f64>,
    pub lambda: f64,
    pub gamma: f64,
    /// `Σ e^{-σ} L_sup` (or `Σ L_sup` for the linear sum).
    pub sup_weighted: f64,
    /// `λ Σ e^{-σ} L_unsup` (or `λ Σ L_unsup`).
    pub unsup_weighted: f64,
    /// Every `γ Σ e^{σ}` share in the total, after λ scaling where it applies.
    pub regularizer: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomposes the total from its parts.
    pub fn recomposed(&self) -> f64 {
        self.sup_weighted + self.unsup_weighted + self.regularizer
    }

    pub fn is_finite(&self) -> bool {
        self.sup.values().chain(self.unsup.values()).chain(self.sigma.values()).all(|v| v.is_finite())
            && self.total.is_finite()
    }
}

/// Evaluates the total objective from scalar task losses. An empty `unsup`
/// map means the unlabeled phase did not run and contributes nothing.
pub fn total_loss(
    sup: &BTreeMap<Task, f64>,
    unsup: &BTreeMap<Task, f64>,
    sigma: &UncertaintyParams,
    weighting: Weighting,
    lambda: f64,
    scope: LambdaScope,
) -> LossBreakdown {
    let weighted = |losses: &BTreeMap<Task, f64>| -> f64 {
        losses
            .iter()
            .map(|(t, l)| match weighting {
                Weighting::Adaptive { .. } => (-sigma.get(*t)).exp() * l,
                Weighting::LinearSum => *l,
            })
            .sum()
    };
    let reg_of = |losses: &BTreeMap<Task, f64>| -> f64 {
        match weighting {
            Weighting::Adaptive { gamma } => gamma * losses.keys().map(|t| sigma.get(*t).exp()).sum::<f64>(),
            Weighting::LinearSum => 0.0,
        }
    };
    let sup_weighted = weighted(sup);
    let unsup_weighted = lambda * weighted(unsup);
    let unsup_reg = match scope {
        LambdaScope::Whole => lambda * reg_of(unsup),
        LambdaScope::TaskTerms => reg_of(unsup),
    };
    let regularizer = reg_of(sup) + if unsup.is_empty() { 0.0 } else { unsup_reg };
    let gamma = match weighting {
        Weighting::Adaptive { gamma } => gamma,
        Weighting::LinearSum => 0.0,
    };
    let mut out = LossBreakdown {
        sup: sup.clone(),
        unsup: unsup.clone(),
        sigma: sigma.values.clone(),
        lambda,
        gamma,
        sup_weighted,
        unsup_weighted,
        regularizer,
        total: 0.0,
    };
    out.total = sup_weighted + unsup_weighted + regularizer;
    out
}

/// Warm-up of the unsupervised weight: `λ_max · exp(-5 (1 - min(t / T, 1))²)`.
/// A ramp of zero epochs means λ is at its maximum from the start.
pub fn lambda_schedule(epoch: usize, lambda_max: f64, ramp_epochs: usize) -> f64 {
    if ramp_epochs == 0 {
        return lambda_max;
    }
    let t = (epoch as f64 / ramp_epochs as f64).min(1.0);
    lambda_max * (-5.0 * (1.0 - t) * (1.0 - t)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use semimoe_autograd::check::{central_difference, relative_error};
    use semimoe_autograd::Tape;

    fn sigma_store(values: [f64; 3]) -> ParamStore {
        let mut s = ParamStore::new();
        for (t, v) in Task::ALL.iter().zip(values) {
            s.insert(sigma_name(*t), Tensor::scalar(v));
        }
        s
    }

    /// Logits whose softmax foreground probability is exactly `p` (for p in (0,1)).
    fn logits_for(p: &[f64], shape: [usize; 4]) -> Tensor {
        let (b, plane) = (shape[0], shape[2] * shape[3]);
        let mut out = Vec::new();
        for n in 0..b {
            out.extend(std::iter::repeat_n(0.0, plane));
            out.extend(p[n * plane..(n + 1) * plane].iter().map(|&q| (q / (1.0 - q)).ln()));
        }
        Tensor::new(&[b, 2, shape[2], shape[3]], out)
    }

    #[test]
    fn dice_is_zero_for_perfect_overlap() {
        let tape = Tape::new();
        // probabilities of exactly 0/1 need infinite logits; use a huge margin
        let target = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let logits = Tensor::from_fn(&[1, 2, 2, 2], |i| {
            let (c, k) = (i / 4, i % 4);
            let fg = target.data()[k] == 1.0;
            if (c == 1) == fg {
                50.0
            } else {
                -50.0
            }
        });
        let l = dice_loss(tape.constant(logits), &target, DICE_SMOOTH).item();
        assert!(l.abs() < 1e-12, "{l}");
    }

    #[test]
    fn dice_approaches_one_when_disjoint() {
        let tape = Tape::new();
        let target = Tensor::new(&[1, 1, 8, 8], (0..64).map(|i| (i % 2) as f64).collect());
        let logits = Tensor::from_fn(&[1, 2, 8, 8], |i| {
            let (c, k) = (i / 64, i % 64);
            let fg = k % 2 == 1;
            if (c == 1) == fg {
                -60.0
            } else {
                60.0
            }
        });
        let l = dice_loss(tape.constant(logits.clone()), &target, 1e-9).item();
        assert!((l - 1.0).abs() < 1e-9);
        // background pixels carry probability one, so the denominator is 64 + smooth
        let l = dice_loss(tape.constant(logits), &target, DICE_SMOOTH).item();
        assert!((l - (1.0 - 1.0 / 65.0)).abs() < 1e-12);
    }

    #[test]
    fn dice_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Vec<f64> = (0..32).map(|_| rng.gen_range(0.05..0.95)).collect();
        let q: Vec<f64> = (0..32).map(|_| f64::from(rng.gen_bool(0.4))).collect();
        let tape = Tape::new();
        let target = Tensor::new(&[2, 1, 4, 4], q.clone());
        let got = dice_loss(tape.constant(logits_for(&p, [2, 1, 4, 4])), &target, 0.0).item();
        let mut want = 0.0;
        for n in 0..2 {
            let (pn, qn) = (&p[n * 16..(n + 1) * 16], &q[n * 16..(n + 1) * 16]);
            let dot: f64 = pn.iter().zip(qn).map(|(a, b)| a * b).sum();
            let sp: f64 = pn.iter().sum();
            let sq: f64 = qn.iter().sum();
            want += 1.0 - 2.0 * dot / (sp + sq);
        }
        want /= 2.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn sdf_loss_cases() {
        let tape = Tape::new();
        let target = Tensor::new(&[1, 1, 1, 3], vec![-0.5, 0.0, 0.9]);
        let raw = target.map(f64::atanh);
        assert!(sdf_loss(tape.constant(raw), &target).item().abs() < 1e-15);
        let ones = Tensor::full(&[2, 1, 3, 3], 1.0);
        assert_eq!(sdf_loss(tape.constant(Tensor::zeros(&[2, 1, 3, 3])), &ones).item(), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = Tensor::from_fn(&[1, 1, 2, 3], |_| rng.gen_range(-2.0..2.0));
        let y = Tensor::from_fn(&[1, 1, 2, 3], |_| rng.gen_range(-1.0..1.0));
        let want: f64 = r.data().iter().zip(y.data()).map(|(a, b)| (a.tanh() - b).powi(2)).sum::<f64>() / 6.0;
        assert!((sdf_loss(tape.constant(r), &y).item() - want).abs() < 1e-15);
    }

    #[test]
    fn adaptive_weighting_at_zero_sigma() {
        let store = sigma_store([0.0; 3]);
        let tape = Tape::new();
        let p = store.bind(&tape, |_| true);
        let losses = TaskLosses::new(
            Task::ALL
                .iter()
                .zip([0.3, 1.7, 0.25])
                .map(|(t, v)| (*t, tape.constant(Tensor::scalar(v))))
                .collect(),
        );
        let gamma = 0.4;
        let got = adaptive_weighting(&losses, &p, gamma).unwrap().item();
        assert_eq!(got, 0.3 + 1.7 + 0.25 + 3.0 * gamma);
    }

    #[test]
    fn non_positive_gamma_is_rejected() {
        let store = sigma_store([0.0; 3]);
        let tape = Tape::new();
        let p = store.bind(&tape, |_| true);
        let losses = TaskLosses::new(vec![(Task::Seg, tape.constant(Tensor::scalar(1.0)))]);
        assert!(matches!(adaptive_weighting(&losses, &p, 0.0), Err(Error::Config(_))));
        assert!(adaptive_weighting(&losses, &p, -1.0).is_err());
    }

    #[test]
    fn sigma_gradient_matches_closed_form_and_differences() {
        let sig = [0.3, -0.7, 1.1];
        let ls = [0.9, 0.05, 2.0];
        let gamma = 0.8;
        let store = sigma_store(sig);
        let tape = Tape::new();
        let p = store.bind(&tape, |_| true);
        let losses = TaskLosses::new(
            Task::ALL.iter().zip(ls).map(|(t, v)| (*t, tape.constant(Tensor::scalar(v)))).collect(),
        );
        let loss = adaptive_weighting(&losses, &p, gamma).unwrap();
        let grads = p.gradients(&tape.backward(loss));
        for (i, t) in Task::ALL.iter().enumerate() {
            let g = grads[&sigma_name(*t)].item();
            let closed = -(-sig[i]).exp() * ls[i] + gamma * sig[i].exp();
            assert!((g - closed).abs() < 1e-12);
            let f = |s: &Tensor| {
                let mut v = sig;
                v[i] = s.item();
                (0..3).map(|j| (-v[j]).exp() * ls[j] + gamma * v[j].exp()).sum::<f64>()
            };
            let fd = central_difference(&Tensor::scalar(sig[i]), 0, 1e-5, f);
            assert!(relative_error(g, fd, 1e-12) < 1e-6);
        }
    }

    #[test]
    fn shifting_one_sigma_only_moves_its_terms() {
        let ls = BTreeMap::from([(Task::Seg, 0.5), (Task::Sdf, 0.2), (Task::Bnd, 0.9)]);
        let base = UncertaintyParams {
            values: BTreeMap::from([(Task::Seg, 0.1), (Task::Sdf, 0.2), (Task::Bnd, 0.3)]),
        };
        let mut shifted = base.clone();
        shifted.values.insert(Task::Sdf, 1.2);
        let w = Weighting::Adaptive { gamma: 0.4 };
        let a = total_loss(&ls, &BTreeMap::new(), &base, w, 0.0, LambdaScope::Whole);
        let b = total_loss(&ls, &BTreeMap::new(), &shifted, w, 0.0, LambdaScope::Whole);
        let diff = b.total - a.total;
        let expect = ((-1.2f64).exp() - (-0.2f64).exp()) * 0.2 + 0.4 * (1.2f64.exp() - 0.2f64.exp());
        assert!((diff - expect).abs() < 1e-12);
    }

    #[test]
    fn total_loss_special_cases() {
        let zeros = BTreeMap::from([(Task::Seg, 0.0), (Task::Sdf, 0.0), (Task::Bnd, 0.0)]);
        let sigma = UncertaintyParams {
            values: BTreeMap::from([(Task::Seg, 0.0), (Task::Sdf, 0.0), (Task::Bnd, 0.0)]),
        };
        let (gamma, lambda) = (0.4, 2.5);
        let b = total_loss(&zeros, &zeros, &sigma, Weighting::Adaptive { gamma }, lambda, LambdaScope::Whole);
        assert!((b.total - 3.0 * gamma * (1.0 + lambda)).abs() < 1e-12);

        let sup = BTreeMap::from([(Task::Seg, 0.4), (Task::Sdf, 0.1), (Task::Bnd, 0.7)]);
        let unsup = BTreeMap::from([(Task::Seg, 0.3), (Task::Sdf, 0.05), (Task::Bnd, 0.2)]);
        let only_sup = total_loss(&sup, &unsup, &sigma, Weighting::Adaptive { gamma }, 0.0, LambdaScope::Whole);
        let reference = total_loss(&sup, &BTreeMap::new(), &sigma, Weighting::Adaptive { gamma }, 0.0, LambdaScope::Whole);
        assert_eq!(only_sup.total, reference.total);

        for scope in [LambdaScope::Whole, LambdaScope::TaskTerms] {
            let b = total_loss(&sup, &unsup, &sigma, Weighting::Adaptive { gamma }, 1.3, scope);
            assert!((b.recomposed() - b.total).abs() < 1e-9);
        }
        let lin = total_loss(&sup, &unsup, &sigma, Weighting::LinearSum, 2.0, LambdaScope::Whole);
        assert!((lin.total - (1.2 + 2.0 * 0.55)).abs() < 1e-12);
    }

    #[test]
    fn lambda_schedule_shape() {
        assert!((lambda_schedule(0, 5.0, 10) - 5.0 * (-5.0f64).exp()).abs() < 1e-15);
        assert!((lambda_schedule(0, 5.0, 10) - 0.0337).abs() < 1e-4);
        assert_eq!(lambda_schedule(10, 5.0, 10), 5.0);
        assert_eq!(lambda_schedule(250, 5.0, 10), 5.0);
        assert_eq!(lambda_schedule(3, 5.0, 0), 5.0);
        let values: Vec<f64> = (0..60).map(|e| lambda_schedule(e, 5.0, 24)).collect();
        assert!(values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn argmax_pseudo_labels() {
        let logits = Tensor::new(&[1, 2, 1, 3], vec![0.0, 1.0, 2.0, 1.0, 0.5, 2.0]);
        let m = argmax_foreground(&logits);
        assert_eq!(m.data(), &[1.0, 0.0, 0.0]);
    }
}
