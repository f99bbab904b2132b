//! Spatial ops over `[B, C, H, W]` tensors.

use crate::gemm::{gemm, Layout};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.pad == 0
    }

    /// Valid output-column range for kernel offset `kx`.
    fn x_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.width + self.pad).saturating_sub(kx).min(self.out_w);
        (lo, hi.max(lo))
    }
}

fn im2col(g: &Geometry, x: &[f64], col: &mut [f64]) {
    let (k, cols) = (g.kernel, g.cols());
    for ci in 0..g.channels {
        let plane = &x[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * cols..][..cols];
                let (lo, hi) = g.x_range(kx);
                for oy in 0..g.out_h {
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if hi > lo {
                        let src_start = iy as usize * g.width + lo + kx - g.pad;
                        dst[lo..hi].copy_from_slice(&plane[src_start..src_start + (hi - lo)]);
                    }
                }
            }
        }
    }
}

fn col2im(g: &Geometry, col: &[f64], x: &mut [f64]) {
    let (k, cols) = (g.kernel, g.cols());
    for ci in 0..g.channels {
        let plane = &mut x[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * cols..][..cols];
                let (lo, hi) = g.x_range(kx);
                if hi <= lo {
                    continue;
                }
                for oy in 0..g.out_h {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &row[oy * g.out_w + lo..oy * g.out_w + hi];
                    let dst_start = iy as usize * g.width + lo + kx - g.pad;
                    for (d, s) in plane[dst_start..dst_start + (hi - lo)].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// Stride-1 2-D convolution with a square kernel and symmetric zero padding.
    ///
    /// `self [B, Ci, H, W]`, `weight [Co, Ci, k, k]`, `bias [Co]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, pad: usize) -> Var<'t> {
        let (x, w, bv) = (self.value(), weight.value(), bias.value());
        let xs = x.shape();
        let ws = w.shape();
        assert_eq!(xs.len(), 4, "conv2d: input must be [B, C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d: weight must be [Co, Ci, k, k]");
        assert_eq!(ws[1], xs[1], "conv2d: channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d: kernel must be square");
        let (batch, c_out, kernel) = (xs[0], ws[0], ws[2]);
        assert_eq!(bv.shape(), [c_out], "conv2d: bias shape");
        let geo = Geometry {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel,
            pad,
            out_h: xs[2] + 2 * pad + 1 - kernel,
            out_w: xs[3] + 2 * pad + 1 - kernel,
        };
        let (rows, cols) = (geo.rows(), geo.cols());
        let in_len = geo.channels * geo.height * geo.width;
        let out_shape = [batch, c_out, geo.out_h, geo.out_w];
        let mut out = vec![0.0; batch * c_out * cols];
        let keep_cols = self.requires_grad() || weight.requires_grad();
        let mut saved_cols: Vec<Vec<f64>> = Vec::new();
        let mut col = if geo.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * cols]
        };
        for n in 0..batch {
            let xn = &x.data()[n * in_len..(n + 1) * in_len];
            let on = &mut out[n * c_out * cols..(n + 1) * c_out * cols];
            for (co, chunk) in on.chunks_mut(cols).enumerate() {
                chunk.fill(bv.data()[co]);
            }
            let cn: &[f64] = if geo.is_pointwise() {
                xn
            } else {
                im2col(&geo, xn, &mut col);
                &col
            };
            gemm(c_out, rows, cols, w.data(), Layout::RowMajor, cn, Layout::RowMajor, on, 1.0);
            if keep_cols && !geo.is_pointwise() {
                saved_cols.push(col.clone());
            }
        }
        let out = Tensor::new(&out_shape, out);
        let x_shape = xs.to_vec();
        let w_shape = ws.to_vec();
        self.tape.record(out, &[self, weight, bias], move |g, needs| {
            let col_of = |n: usize| -> &[f64] {
                if geo.is_pointwise() {
                    &x.data()[n * in_len..(n + 1) * in_len]
                } else {
                    &saved_cols[n]
                }
            };
            let gw = needs[1].then(|| {
                let mut gw = vec![0.0; c_out * rows];
                for n in 0..batch {
                    let gn = &g.data()[n * c_out * cols..(n + 1) * c_out * cols];
                    gemm(c_out, cols, rows, gn, Layout::RowMajor, col_of(n), Layout::Transposed, &mut gw, 1.0);
                }
                Tensor::new(&w_shape, gw)
            });
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; batch * in_len];
                let mut gcol = vec![0.0; rows * cols];
                for n in 0..batch {
                    let gn = &g.data()[n * c_out * cols..(n + 1) * c_out * cols];
                    let gxn = &mut gx[n * in_len..(n + 1) * in_len];
                    if geo.is_pointwise() {
                        gemm(rows, c_out, cols, w.data(), Layout::Transposed, gn, Layout::RowMajor, gxn, 0.0);
                    } else {
                        gemm(rows, c_out, cols, w.data(), Layout::Transposed, gn, Layout::RowMajor, &mut gcol, 0.0);
                        col2im(&geo, &gcol, gxn);
                    }
                }
                Tensor::new(&x_shape, gx)
            });
            let gb = needs[2].then(|| {
                Tensor::from_fn(&[c_out], |co| {
                    (0..batch)
                        .map(|n| g.data()[(n * c_out + co) * cols..(n * c_out + co + 1) * cols].iter().sum::<f64>())
                        .sum()
                })
            });
            vec![gx, gw, gb]
        })
    }

    /// 2×2 max pooling with stride 2. Spatial dims must be even.
    pub fn max_pool2(self) -> Var<'t> {
        let x = self.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "max_pool2: input must be [B, C, H, W]");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2: spatial dims must be even");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; planes * oh * ow];
        let mut argmax = vec![0usize; planes * oh * ow];
        for p in 0..planes {
            let plane = &x.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = 2 * oy * w + 2 * ox;
                    for idx in [best + 1, best + w, best + w + 1] {
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    out[o] = plane[best];
                    argmax[o] = p * h * w + best;
                }
            }
        }
        let out = Tensor::new(&[s[0], s[1], oh, ow], out);
        self.tape.record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&s);
            for (o, &src) in argmax.iter().enumerate() {
                gx.data_mut()[src] += g.data()[o];
            }
            vec![Some(gx)]
        })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(self) -> Var<'t> {
        let x = self.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "upsample2: input must be [B, C, H, W]");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for oy in 0..oh {
                let src = &x.data()[p * h * w + (oy / 2) * w..][..w];
                let dst = &mut out[p * oh * ow + oy * ow..][..ow];
                for (ox, d) in dst.iter_mut().enumerate() {
                    *d = src[ox / 2];
                }
            }
        }
        let out = Tensor::new(&[s[0], s[1], oh, ow], out);
        self.tape.record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&s);
            for p in 0..planes {
                for oy in 0..oh {
                    let src = &g.data()[p * oh * ow + oy * ow..][..ow];
                    let dst = &mut gx.data_mut()[p * h * w + (oy / 2) * w..][..w];
                    for (ox, v) in src.iter().enumerate() {
                        dst[ox / 2] += v;
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}
