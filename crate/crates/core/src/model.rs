//! The full network: experts, gates and task uncertainties in one parameter store.

use semimoe_autograd::{Tape, Tensor, Var};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::experts::{ExpertBundle, ExpertOutput};
use crate::gating::{GateOutput, GateStack, Mode};
use crate::losses::{sigma_name, UncertaintyParams, SIGMA_PREFIX};
use crate::nn::{Bound, ParamStore};
use crate::seed::derive_seed;
use crate::task::Task;

pub const GATE_PREFIX: &str = "gate.";

pub fn is_gate_param(name: &str) -> bool {
    name.starts_with(GATE_PREFIX)
}

pub fn is_sigma_param(name: &str) -> bool {
    name.starts_with(SIGMA_PREFIX)
}

#[derive(Clone, Debug)]
pub struct SemiMoe {
    pub store: ParamStore,
    pub bundle: ExpertBundle,
    pub gates: GateStack,
}

/// Everything one forward pass produces.
pub struct Forward<'t> {
    pub experts: Vec<(Task, ExpertOutput<'t>)>,
    pub gates: Vec<GateOutput<'t>>,
}

impl<'t> Forward<'t> {
    pub fn expert(&self, task: Task) -> Option<&ExpertOutput<'t>> {
        self.experts.iter().find(|(t, _)| *t == task).map(|(_, o)| o)
    }

    pub fn gate(&self, task: Task) -> Option<&GateOutput<'t>> {
        self.gates.iter().find(|g| g.task == task)
    }
}

/// Detached inference results for a batch.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[B, 2, H, W]` logits of the seg expert.
    pub expert_seg: Tensor,
    /// `[B, 2, H, W]` logits of the seg gate.
    pub gate_seg: Option<Tensor>,
    /// Per gated task, `[B, M]` expert weights.
    pub gate_weights: Vec<(Task, Tensor)>,
}

impl SemiMoe {
    /// Builds and initializes the network described by `cfg`. Initialization
    /// depends on `cfg.seed` and the architecture fields only.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let bundle = ExpertBundle::new(
            &cfg.expert_configs(),
            cfg.shared_encoder,
            &mut store,
            derive_seed(cfg.seed, "init.experts"),
        )?;
        let gates = GateStack::new(
            &cfg.gated_tasks(),
            &bundle.tasks(),
            bundle.feature_channels(),
            &cfg.gate_config(),
            &mut store,
            derive_seed(cfg.seed, "init.gates"),
        )?;
        for t in bundle.tasks() {
            store.insert(sigma_name(t), Tensor::scalar(0.0));
        }
        Ok(Self { store, bundle, gates })
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.bundle.tasks()
    }

    /// Scalar count of expert (encoder, decoder, head) parameters.
    pub fn expert_param_count(&self) -> usize {
        self.store
            .iter()
            .filter(|(n, _)| !is_gate_param(n) && !is_sigma_param(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn gate_param_count(&self) -> usize {
        self.store.count_with_prefix(GATE_PREFIX)
    }

    pub fn uncertainty(&self) -> UncertaintyParams {
        UncertaintyParams {
            values: self
                .tasks()
                .into_iter()
                .map(|t| (t, self.store.get(&sigma_name(t)).map_or(0.0, |s| s.item())))
                .collect(),
        }
    }

    /// Experts then gates on `x [B, 3, H, W]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, mode: &mut Mode<'_>) -> Result<Forward<'t>> {
        let experts = self.bundle.forward_all(p, x)?;
        let gates = self.gates.forward(p, &experts, mode)?;
        Ok(Forward { experts, gates })
    }

    /// Gradient-free inference in chunks of `chunk` images.
    pub fn predict(&self, images: &Tensor, chunk: usize) -> Result<Prediction> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("expected [B, 3, H, W] images, got {s:?}")));
        }
        let (b, plane) = (s[0], s[1] * s[2] * s[3]);
        let mut expert_seg = Vec::new();
        let mut gate_seg = Vec::new();
        let mut weights: Vec<(Task, Vec<f64>)> = self.gates.gates().iter().map(|g| (g.task, Vec::new())).collect();
        let m = self.gates.experts().len();
        let mut start = 0;
        while start < b {
            let n = chunk.max(1).min(b - start);
            let tape = Tape::new();
            let p = self.store.bind_frozen(&tape);
            let x = tape.constant(Tensor::new(
                &[n, s[1], s[2], s[3]],
                images.data()[start * plane..(start + n) * plane].to_vec(),
            ));
            let out = self.forward(&p, x, &mut Mode::Eval)?;
            let seg = out.expert(Task::Seg).ok_or_else(|| Error::Config("model has no seg expert".into()))?;
            expert_seg.extend_from_slice(seg.prediction.value().data());
            if let Some(g) = out.gate(Task::Seg) {
                gate_seg.extend_from_slice(g.prediction.value().data());
            }
            for (task, acc) in &mut weights {
                let g = out.gate(*task).expect("gate list is fixed");
                acc.extend_from_slice(g.weights.value().data());
            }
            start += n;
        }
        let logits_shape = [b, 2, s[2], s[3]];
        Ok(Prediction {
            expert_seg: Tensor::new(&logits_shape, expert_seg),
            gate_seg: (!gate_seg.is_empty()).then(|| Tensor::new(&logits_shape, gate_seg)),
            gate_weights: weights.into_iter().map(|(t, w)| (t, Tensor::new(&[b, m], w))).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Ablation;

    #[test]
    fn gate_overhead_is_small_at_default_sizes() {
        let model = SemiMoe::new(&TrainConfig::default()).unwrap();
        let (g, e) = (model.gate_param_count(), model.expert_param_count());
        assert!(g > 0 && (g as f64) < 0.05 * e as f64, "gates {g} experts {e}");
        assert_eq!(g + e + 3, model.store.count());
    }

    #[test]
    fn ablations_build() {
        for a in Ablation::ALL {
            let cfg = a.apply(&TrainConfig::default());
            let model = SemiMoe::new(&cfg).unwrap();
            assert_eq!(model.tasks(), cfg.expert_tasks());
            assert_eq!(model.gates.gates().len(), cfg.gated_tasks().len());
        }
    }

    #[test]
    fn predict_is_chunk_invariant() {
        let cfg = TrainConfig {
            base_channels: 4,
            depth: 2,
            ..TrainConfig::default()
        };
        let model = SemiMoe::new(&cfg).unwrap();
        let x = Tensor::from_fn(&[3, 3, 16, 16], |i| ((i * 7919) % 97) as f64 / 97.0);
        let a = model.predict(&x, 1).unwrap();
        let b = model.predict(&x, 8).unwrap();
        assert!(a.expert_seg.bit_eq(&b.expert_seg));
        assert!(a.gate_seg.unwrap().bit_eq(&b.gate_seg.unwrap()));
    }
}
