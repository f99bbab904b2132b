//! Task experts: a U-Net trunk per task followed by a 1×1 task head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use semimoe_autograd::Var;

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, Norm, ParamStore};
use crate::seed::derive_seed;
use crate::task::Task;

pub const IN_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub task: Task,
    pub depth: usize,
    pub base_channels: usize,
    pub feature_channels: usize,
}

impl ExpertConfig {
    pub fn new(task: Task, depth: usize, base_channels: usize) -> Self {
        Self {
            task,
            depth,
            base_channels,
            feature_channels: base_channels,
        }
    }

    pub fn head_out_channels(&self) -> usize {
        self.task.out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("expert depth must be >= 2, got {}", self.depth)));
        }
        if self.base_channels < 4 {
            return Err(Error::Config(format!(
                "base_channels must be >= 4, got {}",
                self.base_channels
            )));
        }
        if self.feature_channels == 0 {
            return Err(Error::Config("feature_channels must be positive".into()));
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this.
    pub fn stride(&self) -> usize {
        1 << (self.depth - 1)
    }
}

#[derive(Clone, Debug)]
struct DoubleConv {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
}

impl DoubleConv {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv::new(store, &format!("{name}.conv1"), c_in, c_out, 3, rng),
            norm1: Norm::new(store, &format!("{name}.norm1"), c_out),
            conv2: Conv::new(store, &format!("{name}.conv2"), c_out, c_out, 3, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), c_out),
        }
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let h = self.norm1.forward(p, self.conv1.forward(p, x)).relu();
        self.norm2.forward(p, self.conv2.forward(p, h)).relu()
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    levels: Vec<DoubleConv>,
}

impl Encoder {
    fn new(store: &mut ParamStore, name: &str, depth: usize, base: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut levels = Vec::with_capacity(depth);
        let mut c_in = IN_CHANNELS;
        for l in 0..depth {
            let c_out = base << l;
            levels.push(DoubleConv::new(store, &format!("{name}.enc{l}"), c_in, c_out, rng));
            c_in = c_out;
        }
        Self { levels }
    }

    /// Skip activations from the shallowest to the deepest level.
    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Vec<Var<'t>> {
        let mut skips = Vec::with_capacity(self.levels.len());
        let mut h = x;
        for (l, block) in self.levels.iter().enumerate() {
            if l > 0 {
                h = h.max_pool2();
            }
            h = block.forward(p, h);
            skips.push(h);
        }
        skips
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    ups: Vec<Conv>,
    blocks: Vec<DoubleConv>,
    projection: Option<Conv>,
}

impl Decoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &ExpertConfig, rng: &mut ChaCha8Rng) -> Self {
        let base = cfg.base_channels;
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        for l in (0..cfg.depth - 1).rev() {
            let (c_deep, c) = (base << (l + 1), base << l);
            ups.push(Conv::new(store, &format!("{name}.up{l}"), c_deep, c, 1, rng));
            blocks.push(DoubleConv::new(store, &format!("{name}.dec{l}"), 2 * c, c, rng));
        }
        let projection = (cfg.feature_channels != base)
            .then(|| Conv::new(store, &format!("{name}.proj"), base, cfg.feature_channels, 1, rng));
        Self {
            ups,
            blocks,
            projection,
        }
    }

    fn forward<'t>(&self, p: &Bound<'t>, skips: &[Var<'t>]) -> Var<'t> {
        let mut h = *skips.last().expect("encoder has levels");
        for (i, (up, block)) in self.ups.iter().zip(&self.blocks).enumerate() {
            let skip = skips[skips.len() - 2 - i];
            let u = up.forward(p, h.upsample2());
            h = block.forward(p, Var::concat(&[skip, u]));
        }
        match &self.projection {
            Some(proj) => proj.forward(p, h),
            None => h,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Expert {
    pub config: ExpertConfig,
    encoder: Option<Encoder>,
    decoder: Decoder,
    head: Conv,
}

/// Trunk features and head prediction of one expert for a batch.
#[derive(Clone, Copy)]
pub struct ExpertOutput<'t> {
    /// `[B, C, H, W]` decoder output before the head.
    pub features: Var<'t>,
    /// `[B, out, H, W]` raw logits (seg, bnd) or raw regression map (sdf).
    pub prediction: Var<'t>,
}

/// The task experts, in canonical task order. Parameters live in a [`ParamStore`]
/// under `expert.<task>.*`, or `encoder.shared.*` when the encoder is shared.
#[derive(Clone, Debug)]
pub struct ExpertBundle {
    experts: Vec<Expert>,
    shared_encoder: Option<Encoder>,
}

pub fn expert_prefix(task: Task) -> String {
    format!("expert.{}.", task.name())
}

pub const SHARED_ENCODER_PREFIX: &str = "encoder.shared.";

impl ExpertBundle {
    /// Registers parameters for one expert per config. Initialization is a pure
    /// function of `seed`.
    pub fn new(
        configs: &[ExpertConfig],
        shared_encoder: bool,
        store: &mut ParamStore,
        seed: u64,
    ) -> Result<Self> {
        if configs.is_empty() {
            return Err(Error::Config("at least one expert is required".into()));
        }
        let mut sorted = configs.to_vec();
        sorted.sort_by_key(|c| c.task);
        for pair in sorted.windows(2) {
            if pair[0].task == pair[1].task {
                return Err(Error::Config(format!("duplicate expert for task {}", pair[0].task)));
            }
        }
        for c in &sorted {
            c.validate()?;
        }
        let first = &sorted[0];
        if sorted.iter().any(|c| c.feature_channels != first.feature_channels) {
            return Err(Error::Config(
                "all experts must emit the same number of feature channels".into(),
            ));
        }
        if shared_encoder
            && sorted
                .iter()
                .any(|c| c.depth != first.depth || c.base_channels != first.base_channels)
        {
            return Err(Error::Config(
                "a shared encoder requires equal depth and base_channels".into(),
            ));
        }
        if sorted.iter().any(|c| c.depth != first.depth) {
            return Err(Error::Config("all experts must have the same depth".into()));
        }

        let shared = shared_encoder.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "encoder.shared"));
            Encoder::new(store, "encoder.shared", first.depth, first.base_channels, &mut rng)
        });
        let experts = sorted
            .into_iter()
            .map(|cfg| {
                let name = format!("expert.{}", cfg.task.name());
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &name));
                let encoder = (!shared_encoder)
                    .then(|| Encoder::new(store, &name, cfg.depth, cfg.base_channels, &mut rng));
                let decoder = Decoder::new(store, &name, &cfg, &mut rng);
                let head = Conv::new(
                    store,
                    &format!("{name}.head"),
                    cfg.feature_channels,
                    cfg.head_out_channels(),
                    1,
                    &mut rng,
                );
                Expert {
                    config: cfg,
                    encoder,
                    decoder,
                    head,
                }
            })
            .collect();
        Ok(Self {
            experts,
            shared_encoder: shared,
        })
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.experts.iter().map(|e| e.config.task).collect()
    }

    pub fn expert(&self, task: Task) -> Option<&Expert> {
        self.experts.iter().find(|e| e.config.task == task)
    }

    pub fn feature_channels(&self) -> usize {
        self.experts[0].config.feature_channels
    }

    pub fn has_shared_encoder(&self) -> bool {
        self.shared_encoder.is_some()
    }

    pub fn head_weight_name(&self, task: Task) -> Option<&str> {
        self.expert(task).map(|e| e.head.weight_name())
    }

    fn check_input(&self, x: &Var<'_>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != IN_CHANNELS {
            return Err(Error::Shape(format!(
                "expected a [B, {IN_CHANNELS}, H, W] batch, got {s:?}"
            )));
        }
        let stride = self.experts[0].config.stride();
        if !s[2].is_multiple_of(stride) || !s[3].is_multiple_of(stride) {
            return Err(Error::Shape(format!(
                "spatial size {}x{} is not divisible by {stride}",
                s[2], s[3]
            )));
        }
        Ok(())
    }

    /// Forward pass of a single expert.
    pub fn forward<'t>(&self, p: &Bound<'t>, task: Task, x: Var<'t>) -> Result<ExpertOutput<'t>> {
        self.check_input(&x)?;
        let expert = self
            .expert(task)
            .ok_or_else(|| Error::Config(format!("no expert for task {task}")))?;
        let skips = match (&expert.encoder, &self.shared_encoder) {
            (Some(enc), _) | (None, Some(enc)) => enc.forward(p, x),
            (None, None) => unreachable!("every expert has an encoder"),
        };
        Ok(Self::finish(expert, p, &skips))
    }

    /// Forward pass of every expert, in canonical task order. A shared encoder runs once.
    pub fn forward_all<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Vec<(Task, ExpertOutput<'t>)>> {
        self.check_input(&x)?;
        let shared = self.shared_encoder.as_ref().map(|enc| enc.forward(p, x));
        Ok(self
            .experts
            .iter()
            .map(|expert| {
                let skips = match (&expert.encoder, &shared) {
                    (Some(enc), _) => enc.forward(p, x),
                    (None, Some(s)) => s.clone(),
                    (None, None) => unreachable!("every expert has an encoder"),
                };
                (expert.config.task, Self::finish(expert, p, &skips))
            })
            .collect())
    }

    fn finish<'t>(expert: &Expert, p: &Bound<'t>, skips: &[Var<'t>]) -> ExpertOutput<'t> {
        let features = expert.decoder.forward(p, skips);
        let prediction = expert.head.forward(p, features);
        ExpertOutput {
            features,
            prediction,
        }
    }
}

/// Builds an expert bundle with its own parameter store.
pub fn build_bundle(configs: &[ExpertConfig], shared_encoder: bool, seed: u64) -> Result<(ExpertBundle, ParamStore)> {
    let mut store = ParamStore::new();
    let bundle = ExpertBundle::new(configs, shared_encoder, &mut store, seed)?;
    Ok((bundle, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use semimoe_autograd::{Tape, Tensor};

    fn configs(depth: usize, base: usize) -> Vec<ExpertConfig> {
        Task::ALL.iter().map(|&t| ExpertConfig::new(t, depth, base)).collect()
    }

    fn image(b: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[b, 3, h, w], |i| (i * 37 % 101) as f64 / 101.0)
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = build_bundle(&configs(3, 8), false, 11).unwrap();
        let (_, b) = build_bundle(&configs(3, 8), false, 11).unwrap();
        assert!(a.bit_eq_prefix(&b, ""));
        let (_, c) = build_bundle(&configs(3, 8), false, 12).unwrap();
        assert!(!a.bit_eq_prefix(&c, ""));
    }

    #[test]
    fn feature_and_prediction_shapes() {
        let (bundle, store) = build_bundle(&configs(3, 8), false, 0).unwrap();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let x = tape.constant(image(2, 32, 32));
        for (task, out) in bundle.forward_all(&p, x).unwrap() {
            assert_eq!(out.features.shape(), vec![2, 8, 32, 32]);
            assert_eq!(out.prediction.shape(), vec![2, task.out_channels(), 32, 32]);
        }
    }

    #[test]
    fn bundle_is_three_independent_experts() {
        let (_, store) = build_bundle(&configs(3, 8), false, 0).unwrap();
        let (_, single) = build_bundle(&[ExpertConfig::new(Task::Seg, 3, 8)], false, 0).unwrap();
        let seg = single.count();
        let total = store.count();
        // sdf head has one output channel instead of two: 8 weights + 1 bias fewer
        assert_eq!(total, 3 * seg - 9);
        for t in Task::ALL {
            assert!(store.count_with_prefix(&expert_prefix(t)) > 0);
        }
    }

    #[test]
    fn shared_encoder_reduces_parameters() {
        let (_, independent) = build_bundle(&configs(3, 8), false, 0).unwrap();
        let (bundle, shared) = build_bundle(&configs(3, 8), true, 0).unwrap();
        assert!(bundle.has_shared_encoder());
        assert!(shared.count() < independent.count());
        assert!(shared.count_with_prefix(SHARED_ENCODER_PREFIX) > 0);
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let (bundle, store) = build_bundle(&configs(3, 8), false, 0).unwrap();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let x = tape.constant(image(1, 30, 32));
        assert!(matches!(bundle.forward(&p, Task::Seg, x), Err(Error::Shape(_))));
    }

    #[test]
    fn mismatched_feature_channels_is_a_config_error() {
        let mut cfgs = configs(3, 8);
        cfgs[1].feature_channels = 6;
        assert!(matches!(build_bundle(&cfgs, false, 0), Err(Error::Config(_))));
    }

    #[test]
    fn shallow_depth_is_rejected() {
        assert!(build_bundle(&configs(1, 8), false, 0).is_err());
        assert!(build_bundle(&configs(3, 2), false, 0).is_err());
    }

    #[test]
    fn zero_head_predicts_zero() {
        let (bundle, mut store) = build_bundle(&configs(2, 4), false, 3).unwrap();
        for t in Task::ALL {
            let w = bundle.head_weight_name(t).unwrap().to_string();
            store.get_mut(&w).unwrap().data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let x = tape.constant(image(1, 8, 8));
        for (_, out) in bundle.forward_all(&p, x).unwrap() {
            assert!(out.prediction.value().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn projection_when_feature_channels_differ() {
        let cfgs: Vec<_> = Task::ALL
            .iter()
            .map(|&t| ExpertConfig {
                feature_channels: 6,
                ..ExpertConfig::new(t, 2, 4)
            })
            .collect();
        let (bundle, store) = build_bundle(&cfgs, false, 0).unwrap();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let out = bundle.forward(&p, Task::Sdf, tape.constant(image(1, 8, 8))).unwrap();
        assert_eq!(out.features.shape(), vec![1, 6, 8, 8]);
    }
}
