//! Named parameter storage and the handful of layers the networks are built from.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use semimoe_autograd::{Gradients, Tape, Tensor, Var};

/// All trainable tensors of a model, keyed by dotted name.
///
/// Names are the identity of a parameter: checkpoints, optimizer buffers and
/// update filters all address parameters by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            self.tensors.insert(name.clone(), value).is_none(),
            "parameter {name} registered twice"
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count over parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn count(&self) -> usize {
        self.count_with_prefix("")
    }

    /// Places every parameter on `tape`. Those accepted by `trainable` become
    /// differentiable leaves; the rest are constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: impl Fn(&str) -> bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let var = if trainable(name) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Every parameter as a constant, for inference.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind(tape, |_| false)
    }

    /// True when every tensor under `prefix` is bit-identical in both stores.
    pub fn bit_eq_prefix(&self, other: &ParamStore, prefix: &str) -> bool {
        let mine: Vec<_> = self.tensors.iter().filter(|(n, _)| n.starts_with(prefix)).collect();
        let theirs: Vec<_> = other.tensors.iter().filter(|(n, _)| n.starts_with(prefix)).collect();
        mine.len() == theirs.len()
            && mine
                .iter()
                .zip(&theirs)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

/// Parameters placed on a tape for one forward pass.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    /// Gradient per trainable parameter name (zeros when none flowed).
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(n, v)| (n.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}

/// Stride-1 convolution with bias. 3×3 kernels use padding 1, 1×1 kernels none.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: String,
    bias: String,
    pad: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        // He-normal for ReLU trunks
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w = Tensor::from_fn(&[c_out, c_in, kernel, kernel], |_| normal.sample(rng));
        store.insert(format!("{name}.weight"), w);
        store.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
            pad: kernel / 2,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.conv2d(p.get(&self.weight), p.get(&self.bias), self.pad)
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }
}

/// Group normalization with a learnable per-channel affine.
#[derive(Clone, Debug)]
pub struct Norm {
    gamma: String,
    beta: String,
    groups: usize,
}

pub const NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        store.insert(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        store.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self {
            gamma: format!("{name}.gamma"),
            beta: format!("{name}.beta"),
            groups: norm_groups(channels),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.group_norm(p.get(&self.gamma), p.get(&self.beta), self.groups, NORM_EPS)
    }
}

/// Groups of four channels where possible, otherwise a single group.
pub fn norm_groups(channels: usize) -> usize {
    if channels.is_multiple_of(4) {
        channels / 4
    } else {
        1
    }
}

/// Fully connected layer with PyTorch-style uniform initialization.
#[derive(Clone, Debug)]
pub struct Dense {
    weight: String,
    bias: String,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::from_fn(&[fan_out, fan_in], |_| rng.gen_range(-bound..bound));
        let b = Tensor::from_fn(&[fan_out], |_| rng.gen_range(-bound..bound));
        store.insert(format!("{name}.weight"), w);
        store.insert(format!("{name}.bias"), b);
        Self {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.linear(p.get(&self.weight), p.get(&self.bias))
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> &str {
        &self.bias
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bind_respects_trainable_filter() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Dense::new(&mut store, "a", 2, 2, &mut rng);
        Dense::new(&mut store, "b", 2, 2, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape, |n| n.starts_with("a."));
        assert!(p.get("a.weight").requires_grad());
        assert!(!p.get("b.weight").requires_grad());
    }

    #[test]
    fn counts_by_prefix() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Conv::new(&mut store, "x.conv", 3, 4, 3, &mut rng);
        Dense::new(&mut store, "y.fc", 5, 2, &mut rng);
        assert_eq!(store.count_with_prefix("x."), 4 * 3 * 9 + 4);
        assert_eq!(store.count_with_prefix("y."), 12);
        assert_eq!(store.count(), 124);
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_names_panic() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(0.0));
        store.insert("p", Tensor::scalar(1.0));
    }
}
