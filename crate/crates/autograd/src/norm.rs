use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    /// Group normalization over `[B, C, H, W]` with per-channel affine `gamma`, `beta` of shape `[C]`.
    ///
    /// Statistics are computed per sample and group, so the result does not
    /// depend on the other samples in the batch.
    pub fn group_norm(self, gamma: Var<'t>, beta: Var<'t>, groups: usize, eps: f64) -> Var<'t> {
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "group_norm: input must be [B, C, H, W]");
        let (batch, channels) = (s[0], s[1]);
        assert!(groups > 0 && channels % groups == 0, "group_norm: {channels} channels not divisible into {groups} groups");
        assert_eq!(gm.shape(), [channels]);
        assert_eq!(bt.shape(), [channels]);
        let plane = s[2] * s[3];
        let per_group = channels / groups;
        let span = per_group * plane;

        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; batch * groups];
        for bg in 0..batch * groups {
            let seg = &x.data()[bg * span..(bg + 1) * span];
            let mean = seg.iter().sum::<f64>() / span as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / span as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[bg] = istd;
            for (h, v) in xhat[bg * span..(bg + 1) * span].iter_mut().zip(seg) {
                *h = (v - mean) * istd;
            }
        }
        let mut out = vec![0.0; x.len()];
        for b in 0..batch {
            for c in 0..channels {
                let at = (b * channels + c) * plane;
                let (gc, bc) = (gm.data()[c], bt.data()[c]);
                for (o, h) in out[at..at + plane].iter_mut().zip(&xhat[at..at + plane]) {
                    *o = h * gc + bc;
                }
            }
        }
        let out = Tensor::new(&s, out);
        self.tape.record(out, &[self, gamma, beta], move |g, needs| {
            let gd = g.data();
            let (mut ggamma, mut gbeta) = (vec![0.0; channels], vec![0.0; channels]);
            for b in 0..batch {
                for c in 0..channels {
                    let at = (b * channels + c) * plane;
                    for (gv, h) in gd[at..at + plane].iter().zip(&xhat[at..at + plane]) {
                        ggamma[c] += gv * h;
                        gbeta[c] += gv;
                    }
                }
            }
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; gd.len()];
                let n = span as f64;
                for b in 0..batch {
                    for grp in 0..groups {
                        let bg = b * groups + grp;
                        let base = bg * span;
                        // dxhat = g * gamma[c]
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for k in 0..span {
                            let c = grp * per_group + k / plane;
                            let d = gd[base + k] * gm.data()[c];
                            sum_d += d;
                            sum_dh += d * xhat[base + k];
                        }
                        let istd = inv_std[bg];
                        for k in 0..span {
                            let c = grp * per_group + k / plane;
                            let d = gd[base + k] * gm.data()[c];
                            gx[base + k] = istd / n * (n * d - sum_d - xhat[base + k] * sum_dh);
                        }
                    }
                }
                Tensor::new(&s, gx)
            });
            vec![
                gx,
                needs[1].then(|| Tensor::new(&[channels], ggamma)),
                needs[2].then(|| Tensor::new(&[channels], gbeta)),
            ]
        })
    }
}
