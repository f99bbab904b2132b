//! Multi-gate fusion of expert features.
//!
//! Each task owns a private gate: spatially average-pool the stacked expert
//! features, pass them through `Linear+ReLU`, then `Linear -> Dropout -> Linear`
//! down to one logit per expert, softmax, mix the expert feature maps with
//! the resulting per-sample weights and project with a 1×1 head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use semimoe_autograd::{Tensor, Var};

use crate::error::{Error, Result};
use crate::experts::ExpertOutput;
use crate::nn::{Bound, Conv, Dense, ParamStore};
use crate::seed::derive_seed;
use crate::task::Task;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Hidden width of the reduce layer is `M·C / reduction`.
    pub reduction: usize,
    pub dropout: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            reduction: 4,
            dropout: 0.1,
        }
    }
}

/// Whether dropout is active. Training mode carries the RNG that draws masks.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Clone, Debug)]
pub struct Gate {
    pub task: Task,
    mlp: Dense,
    reduce: Dense,
    expand: Dense,
    head: Conv,
    dropout: f64,
}

/// One gate's result for a batch.
#[derive(Clone, Copy)]
pub struct GateOutput<'t> {
    pub task: Task,
    /// `[B, M]` softmax weights over experts.
    pub weights: Var<'t>,
    /// `[B, C, H, W]` mixed features before the head.
    pub fused: Var<'t>,
    /// `[B, out, H, W]` task prediction.
    pub prediction: Var<'t>,
}

pub fn gate_prefix(task: Task) -> String {
    format!("gate.{}.", task.name())
}

impl Gate {
    fn new(
        store: &mut ParamStore,
        task: Task,
        experts: usize,
        channels: usize,
        cfg: &GateConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let name = format!("gate.{}", task.name());
        let pooled = experts * channels;
        let hidden = (pooled / cfg.reduction.max(1)).max(1);
        Self {
            task,
            mlp: Dense::new(store, &format!("{name}.mlp"), pooled, pooled, rng),
            reduce: Dense::new(store, &format!("{name}.attn_reduce"), pooled, hidden, rng),
            expand: Dense::new(store, &format!("{name}.attn_expand"), hidden, experts, rng),
            head: Conv::new(store, &format!("{name}.head"), channels, task.out_channels(), 1, rng),
            dropout: cfg.dropout,
        }
    }

    /// Softmax weights over experts, `[B, M]`.
    pub fn weights<'t>(&self, p: &Bound<'t>, xg: Var<'t>, mode: &mut Mode<'_>) -> Var<'t> {
        let s = xg.shape();
        let (b, m, c) = (s[0], s[1], s[2]);
        let pooled = xg.reshape(&[b, m * c, s[3], s[4]]).spatial_mean();
        let h = self.mlp.forward(p, pooled).relu();
        let mut a = self.reduce.forward(p, h);
        if let Mode::Train(rng) = mode {
            if self.dropout > 0.0 {
                let keep = 1.0 - self.dropout;
                let shape = a.shape();
                let mask = Tensor::from_fn(&shape, |_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                a = a.mul(a.tape().constant(mask));
            }
        }
        self.expand.forward(p, a).softmax()
    }

    /// Mixes expert features with `weights` and applies the task head.
    /// Returns `(fused pre-head features, prediction)`.
    pub fn fuse<'t>(&self, p: &Bound<'t>, xg: Var<'t>, weights: Var<'t>) -> (Var<'t>, Var<'t>) {
        let fused = xg.weighted_sum_axis1(weights);
        (fused, self.head.forward(p, fused))
    }

    pub fn expand_names(&self) -> (&str, &str) {
        (self.expand.weight_name(), self.expand.bias_name())
    }
}

/// Stacks expert features along a new expert axis in canonical task order:
/// `[B, M, C, H, W]`.
pub fn concat_features<'t>(outputs: &[(Task, ExpertOutput<'t>)]) -> Result<Var<'t>> {
    if outputs.is_empty() {
        return Err(Error::Shape("no expert features to concatenate".into()));
    }
    let mut sorted: Vec<&(Task, ExpertOutput<'t>)> = outputs.iter().collect();
    sorted.sort_by_key(|(t, _)| *t);
    let shape = sorted[0].1.features.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("expert features must be [B, C, H, W], got {shape:?}")));
    }
    for (t, o) in &sorted {
        if o.features.shape() != shape {
            return Err(Error::Shape(format!(
                "{t} features have shape {:?}, expected {shape:?}",
                o.features.shape()
            )));
        }
    }
    let parts: Vec<Var<'t>> = sorted.iter().map(|(_, o)| o.features).collect();
    Ok(Var::concat(&parts).reshape(&[shape[0], parts.len(), shape[1], shape[2], shape[3]]))
}

/// One private gate per gated task.
#[derive(Clone, Debug)]
pub struct GateStack {
    gates: Vec<Gate>,
    experts: Vec<Task>,
}

impl GateStack {
    /// `gated` lists the tasks that get a gate; `experts` the experts being mixed.
    pub fn new(
        gated: &[Task],
        experts: &[Task],
        channels: usize,
        cfg: &GateConfig,
        store: &mut ParamStore,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("gate dropout must be in [0, 1), got {}", cfg.dropout)));
        }
        let experts = crate::task::canonical(experts);
        let gated = crate::task::canonical(gated);
        for t in &gated {
            if !experts.contains(t) {
                return Err(Error::Config(format!("gate for {t} but no {t} expert")));
            }
        }
        let gates = gated
            .iter()
            .map(|&t| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("gate.{}", t.name())));
                Gate::new(store, t, experts.len(), channels, cfg, &mut rng)
            })
            .collect();
        Ok(Self { gates, experts })
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn gate(&self, task: Task) -> Option<&Gate> {
        self.gates.iter().find(|g| g.task == task)
    }

    pub fn experts(&self) -> &[Task] {
        &self.experts
    }

    /// Runs every gate on the stacked expert features.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        outputs: &[(Task, ExpertOutput<'t>)],
        mode: &mut Mode<'_>,
    ) -> Result<Vec<GateOutput<'t>>> {
        let xg = concat_features(outputs)?;
        if xg.shape()[1] != self.experts.len() {
            return Err(Error::Shape(format!(
                "gates expect {} experts, got {}",
                self.experts.len(),
                xg.shape()[1]
            )));
        }
        Ok(self
            .gates
            .iter()
            .map(|gate| {
                let weights = gate.weights(p, xg, mode);
                let (fused, prediction) = gate.fuse(p, xg, weights);
                GateOutput {
                    task: gate.task,
                    weights,
                    fused,
                    prediction,
                }
            })
            .collect())
    }
}
