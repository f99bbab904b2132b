//! Elementwise, reduction, shape and dense ops.

use std::rc::Rc;

use crate::gemm;
use crate::tape::Var;
use crate::tensor::{numel, Tensor};

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add");
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape.record(out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub");
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape.record(out, &[self, other], |g, needs| {
            vec![
                Some(g.clone()),
                needs[1].then(|| g.map(|v| -v)),
            ]
        })
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul");
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.record(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                needs[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
            ]
        })
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "div");
        let out = a.zip_map(&b, |x, y| x / y);
        self.tape.record(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |gv, bv| gv / bv)),
                needs[1].then(|| {
                    let mut gb = g.zip_map(&a, |gv, av| -gv * av);
                    for (v, bv) in gb.data_mut().iter_mut().zip(b.data()) {
                        *v /= bv * bv;
                    }
                    gb
                }),
            ]
        })
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x + c);
        self.tape.record(out, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x * c);
        self.tape.record(out, &[self], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn neg(self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    /// Multiplies every element by a single-element variable.
    pub fn scale(self, factor: Var<'t>) -> Var<'t> {
        let (x, s) = (self.value(), factor.value());
        let c = s.item();
        let out = x.map(|v| v * c);
        self.tape.record(out, &[self, factor], move |g, needs| {
            vec![
                needs[0].then(|| g.map(|v| v * c)),
                needs[1].then(|| {
                    let dot: f64 = g.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
                    Tensor::new(s.shape(), vec![dot])
                }),
            ]
        })
    }

    pub fn exp(self) -> Var<'t> {
        let out = self.value().map(f64::exp);
        let y = Rc::new(out.clone());
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&y, |gv, yv| gv * yv))]
        })
    }

    pub fn tanh(self) -> Var<'t> {
        let out = self.value().map(f64::tanh);
        let y = Rc::new(out.clone());
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&y, |gv, yv| gv * (1.0 - yv * yv)))]
        })
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| if v > 0.0 { v } else { 0.0 });
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }))]
        })
    }

    pub fn square(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v * v);
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| 2.0 * gv * xv))]
        })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sums everything but the leading axis: `[B, ...] -> [B]`.
    pub fn sum_per_sample(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let b = shape[0];
        let inner = x.len() / b.max(1);
        let out = Tensor::from_fn(&[b], |i| x.data()[i * inner..(i + 1) * inner].iter().sum());
        self.tape.record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            for (i, chunk) in gx.data_mut().chunks_mut(inner).enumerate() {
                chunk.fill(g.data()[i]);
            }
            vec![Some(gx)]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        assert_eq!(numel(shape), x.len(), "reshape: element count mismatch");
        let old = x.shape().to_vec();
        let out = x.reshape(shape);
        self.tape.record(out, &[self], move |g, _| vec![Some(g.reshape(&old))])
    }

    /// Concatenates along axis 1. All inputs share every other axis.
    pub fn concat(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        assert!(first.len() >= 2, "concat needs at least 2 axes");
        let batch = first[0];
        let tail: Vec<usize> = first[2..].to_vec();
        let inner = numel(&tail);
        let widths: Vec<usize> = values
            .iter()
            .map(|v| {
                assert_eq!(v.shape()[0], batch, "concat: batch mismatch");
                assert_eq!(&v.shape()[2..], tail.as_slice(), "concat: trailing shape mismatch");
                v.shape()[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut shape = first.clone();
        shape[1] = total;
        let mut out = Vec::with_capacity(batch * total * inner);
        for b in 0..batch {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[b * w * inner..(b + 1) * w * inner]);
            }
        }
        let out = Tensor::new(&shape, out);
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        tape.record(out, parts, move |g, needs| {
            let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(widths.len());
            let mut offset = 0;
            for ((&w, shape), need) in widths.iter().zip(&shapes).zip(needs) {
                if *need {
                    let mut gx = Vec::with_capacity(batch * w * inner);
                    for b in 0..batch {
                        let start = (b * total + offset) * inner;
                        gx.extend_from_slice(&g.data()[start..start + w * inner]);
                    }
                    grads.push(Some(Tensor::new(shape, gx)));
                } else {
                    grads.push(None);
                }
                offset += w;
            }
            grads
        })
    }

    /// Slice `[start, start + len)` along axis 1.
    pub fn narrow(self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (batch, width) = (shape[0], shape[1]);
        assert!(start + len <= width, "narrow out of range");
        let inner = numel(&shape[2..]);
        let mut out_shape = shape.clone();
        out_shape[1] = len;
        let mut out = Vec::with_capacity(batch * len * inner);
        for b in 0..batch {
            let s = (b * width + start) * inner;
            out.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        let out = Tensor::new(&out_shape, out);
        self.tape.record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            for b in 0..batch {
                let s = (b * width + start) * inner;
                gx.data_mut()[s..s + len * inner]
                    .copy_from_slice(&g.data()[b * len * inner..(b + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Softmax over axis 1 of a `[B, C, ...]` tensor.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (batch, classes) = (shape[0], shape[1]);
        let inner = numel(&shape[2..]);
        let mut y = vec![0.0; x.len()];
        for b in 0..batch {
            for s in 0..inner {
                let at = |c: usize| (b * classes + c) * inner + s;
                let max = (0..classes)
                    .map(|c| x.data()[at(c)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for c in 0..classes {
                    let e = (x.data()[at(c)] - max).exp();
                    y[at(c)] = e;
                    denom += e;
                }
                for c in 0..classes {
                    y[at(c)] /= denom;
                }
            }
        }
        let out = Tensor::new(&shape, y);
        let y = Rc::new(out.clone());
        self.tape.record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            for b in 0..batch {
                for s in 0..inner {
                    let at = |c: usize| (b * classes + c) * inner + s;
                    let dot: f64 = (0..classes).map(|c| g.data()[at(c)] * y.data()[at(c)]).sum();
                    for c in 0..classes {
                        gx.data_mut()[at(c)] = y.data()[at(c)] * (g.data()[at(c)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Fully connected layer: `x [B, I]`, `weight [O, I]`, `bias [O]` -> `[B, O]`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let (x, w, bvals) = (self.value(), weight.value(), bias.value());
        let (batch, fan_in) = (x.shape()[0], x.shape()[1]);
        let fan_out = w.shape()[0];
        assert_eq!(w.shape(), [fan_out, fan_in], "linear: weight shape");
        assert_eq!(bvals.shape(), [fan_out], "linear: bias shape");
        let mut out = vec![0.0; batch * fan_out];
        for b in 0..batch {
            out[b * fan_out..(b + 1) * fan_out].copy_from_slice(bvals.data());
        }
        // out[B,O] += x[B,I] * w^T[I,O]
        gemm::gemm(
            batch,
            fan_in,
            fan_out,
            x.data(),
            gemm::Layout::RowMajor,
            w.data(),
            gemm::Layout::Transposed,
            &mut out,
            1.0,
        );
        let out = Tensor::new(&[batch, fan_out], out);
        self.tape
            .record(out, &[self, weight, bias], move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; batch * fan_in];
                    gemm::gemm(
                        batch,
                        fan_out,
                        fan_in,
                        g.data(),
                        gemm::Layout::RowMajor,
                        w.data(),
                        gemm::Layout::RowMajor,
                        &mut gx,
                        0.0,
                    );
                    Tensor::new(&[batch, fan_in], gx)
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; fan_out * fan_in];
                    gemm::gemm(
                        fan_out,
                        batch,
                        fan_in,
                        g.data(),
                        gemm::Layout::Transposed,
                        x.data(),
                        gemm::Layout::RowMajor,
                        &mut gw,
                        0.0,
                    );
                    Tensor::new(&[fan_out, fan_in], gw)
                });
                let gb = needs[2].then(|| {
                    Tensor::from_fn(&[fan_out], |o| {
                        (0..batch).map(|b| g.data()[b * fan_out + o]).sum()
                    })
                });
                vec![gx, gw, gb]
            })
    }

    /// Mean over all axes after the first two: `[B, C, ...] -> [B, C]`.
    pub fn spatial_mean(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (batch, channels) = (shape[0], shape[1]);
        let inner = numel(&shape[2..]);
        let scale = 1.0 / inner as f64;
        let out = Tensor::from_fn(&[batch, channels], |i| {
            x.data()[i * inner..(i + 1) * inner].iter().sum::<f64>() * scale
        });
        self.tape.record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            for (i, chunk) in gx.data_mut().chunks_mut(inner).enumerate() {
                chunk.fill(g.data()[i] * scale);
            }
            vec![Some(gx)]
        })
    }

    /// Per-sample mixture over the expert axis:
    /// `x [B, M, ...]`, `weights [B, M]` -> `Σ_i weights[b, i] * x[b, i]`, shape `[B, ...]`.
    pub fn weighted_sum_axis1(self, weights: Var<'t>) -> Var<'t> {
        let (x, w) = (self.value(), weights.value());
        let shape = x.shape().to_vec();
        let (batch, experts) = (shape[0], shape[1]);
        assert_eq!(w.shape(), [batch, experts], "weighted_sum_axis1: weight shape");
        let inner = numel(&shape[2..]);
        let mut out_shape = vec![batch];
        out_shape.extend_from_slice(&shape[2..]);
        let mut out = vec![0.0; batch * inner];
        for b in 0..batch {
            let dst = &mut out[b * inner..(b + 1) * inner];
            for i in 0..experts {
                let wi = w.data()[b * experts + i];
                let src = &x.data()[(b * experts + i) * inner..(b * experts + i + 1) * inner];
                if i == 0 {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = wi * s;
                    }
                } else {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wi * s;
                    }
                }
            }
        }
        let out = Tensor::new(&out_shape, out);
        self.tape.record(out, &[self, weights], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = Tensor::zeros(&shape);
                for b in 0..batch {
                    let gsrc = &g.data()[b * inner..(b + 1) * inner];
                    for i in 0..experts {
                        let wi = w.data()[b * experts + i];
                        let at = (b * experts + i) * inner;
                        for (d, s) in gx.data_mut()[at..at + inner].iter_mut().zip(gsrc) {
                            *d = wi * s;
                        }
                    }
                }
                gx
            });
            let gw = needs[1].then(|| {
                Tensor::from_fn(&[batch, experts], |k| {
                    let b = k / experts;
                    let src = &x.data()[k * inner..(k + 1) * inner];
                    src.iter()
                        .zip(&g.data()[b * inner..(b + 1) * inner])
                        .map(|(a, c)| a * c)
                        .sum()
                })
            });
            vec![gx, gw]
        })
    }
}
