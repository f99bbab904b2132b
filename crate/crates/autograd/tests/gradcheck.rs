use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semimoe_autograd::check::{central_difference, relative_error};
use semimoe_autograd::{Tape, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Checks every input element of `f` against central differences.
fn check<F>(inputs: Vec<Tensor>, f: F)
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&vars);
    let grads = tape.backward(loss);
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[which]);
        for idx in 0..input.len() {
            let numeric = central_difference(input, idx, 1e-6, |probe| {
                let t = Tape::new();
                let vs: Vec<Var<'_>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t.constant(if j == which { probe.clone() } else { x.clone() }))
                    .collect();
                f(&vs).item()
            });
            let a = analytic.data()[idx];
            assert!(
                relative_error(a, numeric, 1e-6) < 1e-5,
                "input {which} element {idx}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn project<'t>(y: Var<'t>) -> Var<'t> {
    let n = y.value().len();
    let w = Tensor::from_fn(y.value().shape(), |i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4 + 0.01 * n as f64);
    y.mul(y.tape().constant(w)).sum()
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[2, 3], &mut rng).map(|v| v + 2.0);
    check(vec![a.clone(), b.clone()], |v| project(v[0].add(v[1]).mul(v[0]).sub(v[1].tanh())));
    check(vec![a.clone(), b.clone()], |v| project(v[0].div(v[1]).exp().square()));
    check(vec![a.clone()], |v| project(v[0].mul_scalar(3.0).add_scalar(0.5).relu()));
    check(vec![a, Tensor::scalar(0.7)], |v| project(v[0].scale(v[1].exp())));
}

#[test]
fn reductions_and_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 3, 2, 2], &mut rng);
    let b = random(&[2, 1, 2, 2], &mut rng);
    check(vec![a.clone()], |v| project(v[0].sum_per_sample()));
    check(vec![a.clone()], |v| project(v[0].spatial_mean()));
    check(vec![a.clone()], |v| project(v[0].softmax()));
    check(vec![a.clone(), b.clone()], |v| project(Var::concat(&[v[0], v[1], v[0]]).narrow(1, 3)));
    check(vec![a.clone()], |v| project(v[0].reshape(&[2, 12]).mean().mul(v[0].sum())));
}

#[test]
fn dense_and_mixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[3, 4], &mut rng);
    let w = random(&[5, 4], &mut rng);
    let b = random(&[5], &mut rng);
    check(vec![x, w, b], |v| project(v[0].linear(v[1], v[2])));

    let xg = random(&[2, 3, 2, 2, 2], &mut rng);
    let logits = random(&[2, 3], &mut rng);
    check(vec![xg, logits], |v| project(v[0].weighted_sum_axis1(v[1].softmax())));
}

#[test]
fn convolution_pooling_upsampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 2, 4, 4], &mut rng);
    let w3 = random(&[3, 2, 3, 3], &mut rng);
    let w1 = random(&[3, 2, 1, 1], &mut rng);
    let b = random(&[3], &mut rng);
    check(vec![x.clone(), w3, b.clone()], |v| project(v[0].conv2d(v[1], v[2], 1)));
    check(vec![x.clone(), w1, b], |v| project(v[0].conv2d(v[1], v[2], 0)));
    check(vec![x.clone()], |v| project(v[0].max_pool2()));
    check(vec![x], |v| project(v[0].upsample2()));
}

#[test]
fn group_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 4, 3, 3], &mut rng);
    let gamma = random(&[4], &mut rng);
    let beta = random(&[4], &mut rng);
    check(vec![x.clone(), gamma.clone(), beta.clone()], |v| project(v[0].group_norm(v[1], v[2], 2, 1e-5)));
    check(vec![x, gamma, beta], |v| project(v[0].group_norm(v[1], v[2], 4, 1e-5)));
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (ci, co, h, w) = (2, 3, 5, 4);
    let x = random(&[1, ci, h, w], &mut rng);
    let k = random(&[co, ci, 3, 3], &mut rng);
    let b = random(&[co], &mut rng);
    let tape = Tape::new();
    let out = tape
        .constant(x.clone())
        .conv2d(tape.constant(k.clone()), tape.constant(b.clone()), 1)
        .value();
    for o in 0..co {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = b.data()[o];
                for c in 0..ci {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += k.data()[((o * ci + c) * 3 + ky) * 3 + kx]
                                * x.data()[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                let got = out.data()[(o * h + y) * w + xx];
                assert!((got - acc).abs() < 1e-12, "({o},{y},{xx}): {got} vs {acc}");
            }
        }
    }
}

#[test]
fn detach_blocks_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]));
    let loss = x.mul(x.detach()).sum();
    let grads = tape.backward(loss);
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn constants_record_no_backward() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(&[2], vec![1.0, 2.0]));
    let y = x.square().sum();
    assert!(!y.requires_grad());
}
