//! Normalization ops: softmax, layer norm, and the L2 / cosine machinery used
//! by the contrastive matching head.

use ndarray::{ArrayD, IxDyn};

use super::Var;

impl<'t> Var<'t> {
    /// Softmax over the last axis of `[..., L]`. Rows are shifted by their max
    /// before exponentiation, so the output is finite for any finite input and
    /// every row sums to exactly the normalized total.
    pub fn softmax_lastdim(self) -> Var<'t> {
        let xv = self.value();
        let l = *xv.shape().last().expect("softmax input rank >= 1");
        let mut value = (*xv).clone();
        for row in value.as_slice_mut().unwrap().chunks_mut(l) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let p = std::rc::Rc::new(value.clone());
        self.unary(value, move |g| {
            let mut gx = (*p).clone();
            let gs = g.as_slice().unwrap();
            for (row, grow) in gx
                .as_slice_mut()
                .unwrap()
                .chunks_mut(l)
                .zip(gs.chunks(l))
            {
                let dot: f64 = row.iter().zip(grow).map(|(pi, gi)| pi * gi).sum();
                for (pi, gi) in row.iter_mut().zip(grow) {
                    *pi *= gi - dot;
                }
            }
            gx
        })
    }

    /// Layer normalization over the last axis with learned scale and shift:
    /// `y = gamma * (x - mean) / sqrt(var + eps) + beta`, statistics per row.
    pub fn layernorm_lastdim(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        let xv = self.value();
        let c = *xv.shape().last().expect("layernorm input rank >= 1");
        assert_eq!(gamma.value().len(), c, "gamma length");
        assert_eq!(beta.value().len(), c, "beta length");
        let gv = gamma.value();
        let bv = beta.value();

        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let xs = xv.as_slice().unwrap();
        for (r, (row, out)) in xs.chunks(c).zip(xhat.chunks_mut(c)).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[r] = s;
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let gs = gv.as_slice().unwrap();
        let bs = bv.as_slice().unwrap();
        let mut value = ArrayD::zeros(xv.dim());
        for (out, xh) in value.as_slice_mut().unwrap().chunks_mut(c).zip(xhat.chunks(c)) {
            for ((o, x), (gc, bc)) in out.iter_mut().zip(xh).zip(gs.iter().zip(bs)) {
                *o = gc * x + bc;
            }
        }

        let shape = xv.shape().to_vec();
        self.ternary(gamma, beta, value, move |g| {
            let gsl = g.as_slice().unwrap();
            let gw = gv.as_slice().unwrap();
            let mut gx = vec![0.0; gsl.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for (r, ((grow, xh), gxrow)) in gsl
                .chunks(c)
                .zip(xhat.chunks(c))
                .zip(gx.chunks_mut(c))
                .enumerate()
            {
                let s = inv_std[r];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for i in 0..c {
                    ggamma[i] += grow[i] * xh[i];
                    gbeta[i] += grow[i];
                    let dxh = grow[i] * gw[i];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xh[i];
                }
                let m1 = sum_dxhat / c as f64;
                let m2 = sum_dxhat_xhat / c as f64;
                for i in 0..c {
                    gxrow[i] = s * (grow[i] * gw[i] - m1 - xh[i] * m2);
                }
            }
            (
                ArrayD::from_shape_vec(IxDyn(&shape), gx).unwrap(),
                ArrayD::from_shape_vec(IxDyn(&[c]), ggamma).unwrap(),
                ArrayD::from_shape_vec(IxDyn(&[c]), gbeta).unwrap(),
            )
        })
    }

    /// L2-normalize every fiber along axis 1 of `[N, C, ...]`:
    /// `y = x / sqrt(sum_c x^2 + eps)`. Works for `[N, C]` feature vectors and
    /// `[N, C, h, w]` feature maps alike.
    pub fn l2_normalize_axis1(self, eps: f64) -> Var<'t> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        assert!(shape.len() >= 2, "l2_normalize_axis1 needs rank >= 2");
        let (n, c) = (shape[0], shape[1]);
        let r: usize = shape[2..].iter().product();
        let xs = xv.as_slice().unwrap();
        let mut value = vec![0.0; xs.len()];
        let mut inv_norm = vec![0.0; n * r];
        for b in 0..n {
            for j in 0..r {
                let mut sq = eps;
                for ch in 0..c {
                    let v = xs[(b * c + ch) * r + j];
                    sq += v * v;
                }
                let inv = 1.0 / sq.sqrt();
                inv_norm[b * r + j] = inv;
                for ch in 0..c {
                    let idx = (b * c + ch) * r + j;
                    value[idx] = xs[idx] * inv;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), value).unwrap();
        let xv2 = xv.clone();
        let shape2 = shape.clone();
        self.unary(value, move |g| {
            let xs = xv2.as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut gx = vec![0.0; xs.len()];
            for b in 0..n {
                for j in 0..r {
                    let inv = inv_norm[b * r + j];
                    let mut dot = 0.0;
                    for ch in 0..c {
                        let idx = (b * c + ch) * r + j;
                        dot += gs[idx] * xs[idx];
                    }
                    for ch in 0..c {
                        let idx = (b * c + ch) * r + j;
                        gx[idx] = inv * gs[idx] - xs[idx] * dot * inv * inv * inv;
                    }
                }
            }
            ArrayD::from_shape_vec(IxDyn(&shape2), gx).unwrap()
        })
    }

    /// Cosine/dot response between a feature map and per-sample query vectors:
    /// `[N, C, h, w] x [N, C] -> [N, h, w]`, `out[n,i,j] = sum_c map * query`.
    pub fn channel_dot(self, query: Var<'t>) -> Var<'t> {
        let mv = self.value();
        let qv = query.value();
        let (n, c) = (mv.shape()[0], mv.shape()[1]);
        let (h, w) = (mv.shape()[2], mv.shape()[3]);
        assert_eq!(qv.shape(), &[n, c], "query shape");
        let r = h * w;
        let ms = mv.as_slice().unwrap();
        let qs = qv.as_slice().unwrap();
        let mut value = vec![0.0; n * r];
        for b in 0..n {
            for ch in 0..c {
                let q = qs[b * c + ch];
                let lane = &ms[(b * c + ch) * r..(b * c + ch + 1) * r];
                let out = &mut value[b * r..(b + 1) * r];
                for (o, m) in out.iter_mut().zip(lane) {
                    *o += q * m;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, h, w]), value).unwrap();
        let mv2 = mv.clone();
        let qv2 = qv.clone();
        self.binary(query, value, move |g| {
            let gs = g.as_slice().unwrap();
            let ms = mv2.as_slice().unwrap();
            let qs = qv2.as_slice().unwrap();
            let mut gm = vec![0.0; ms.len()];
            let mut gq = vec![0.0; qs.len()];
            for b in 0..n {
                let grow = &gs[b * r..(b + 1) * r];
                for ch in 0..c {
                    let q = qs[b * c + ch];
                    let lane = &ms[(b * c + ch) * r..(b * c + ch + 1) * r];
                    let glane = &mut gm[(b * c + ch) * r..(b * c + ch + 1) * r];
                    let mut acc = 0.0;
                    for ((gl, gi), m) in glane.iter_mut().zip(grow).zip(lane) {
                        *gl = gi * q;
                        acc += gi * m;
                    }
                    gq[b * c + ch] = acc;
                }
            }
            (
                ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), gm).unwrap(),
                ArrayD::from_shape_vec(IxDyn(&[n, c]), gq).unwrap(),
            )
        })
    }

    /// Extract the channel vector at one spatial site per sample:
    /// `[N, C, h, w]` with `sites[n] = (i, j)` -> `[N, C]`.
    pub fn pick_spatial(self, sites: &[(usize, usize)]) -> Var<'t> {
        let xv = self.value();
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let (h, w) = (xv.shape()[2], xv.shape()[3]);
        assert_eq!(sites.len(), n, "one site per sample");
        for &(i, j) in sites {
            assert!(i < h && j < w, "site ({i}, {j}) outside {h}x{w}");
        }
        let r = h * w;
        let xs = xv.as_slice().unwrap();
        let mut value = vec![0.0; n * c];
        for (b, &(i, j)) in sites.iter().enumerate() {
            for ch in 0..c {
                value[b * c + ch] = xs[(b * c + ch) * r + i * w + j];
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c]), value).unwrap();
        let sites = sites.to_vec();
        self.unary(value, move |g| {
            let gs = g.as_slice().unwrap();
            let mut gx = vec![0.0; n * c * r];
            for (b, &(i, j)) in sites.iter().enumerate() {
                for ch in 0..c {
                    gx[(b * c + ch) * r + i * w + j] = gs[b * c + ch];
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), gx).unwrap()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::fd_check_op;
    use super::super::Tape;
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.leaf(randn(&[4, 7], 1) * 10.0);
        let p = x.softmax_lastdim();
        for row in p.value().as_slice().unwrap().chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let x = randn(&[3, 5], 2);
        let w = randn(&[3, 5], 3);
        let err = fd_check_op(&[x, w], |_, vs| vs[0].softmax_lastdim().mul(vs[1]).sum_all());
        assert!(err < 1e-7, "softmax fd error {err}");
    }

    #[test]
    fn layernorm_backward_matches_fd() {
        let x = randn(&[2, 3, 6], 4);
        let gamma = randn(&[6], 5) + 1.0;
        let beta = randn(&[6], 6);
        let err = fd_check_op(&[x, gamma, beta], |_, vs| {
            let y = vs[0].layernorm_lastdim(vs[1], vs[2], 1e-5);
            y.mul(y).mean_all()
        });
        assert!(err < 1e-6, "layernorm fd error {err}");
    }

    #[test]
    fn l2_normalize_gives_unit_fibers() {
        let tape = Tape::new();
        let x = tape.leaf(randn(&[2, 5, 3, 3], 7) + 0.5);
        let y = x.l2_normalize_axis1(1e-12);
        let yv = y.value();
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let sq: f64 = (0..5).map(|c| yv[[b, c, i, j]].powi(2)).sum();
                    assert!((sq - 1.0).abs() < 1e-9, "fiber norm^2 {sq}");
                }
            }
        }
    }

    #[test]
    fn l2_normalize_backward_matches_fd() {
        let x = randn(&[2, 4, 2, 2], 8) + 0.3;
        let w = randn(&[2, 4, 2, 2], 9);
        let err = fd_check_op(&[x, w], |_, vs| {
            vs[0].l2_normalize_axis1(1e-12).mul(vs[1]).sum_all()
        });
        assert!(err < 1e-7, "l2_normalize fd error {err}");
        let x2 = randn(&[3, 6], 10);
        let w2 = randn(&[3, 6], 11);
        let err = fd_check_op(&[x2, w2], |_, vs| {
            vs[0].l2_normalize_axis1(1e-12).mul(vs[1]).sum_all()
        });
        assert!(err < 1e-7, "l2_normalize rank-2 fd error {err}");
    }

    #[test]
    fn channel_dot_matches_manual_and_fd() {
        let tape = Tape::new();
        let m = tape.leaf(randn(&[1, 3, 2, 2], 12));
        let q = tape.leaf(randn(&[1, 3], 13));
        let out = m.channel_dot(q);
        let (mv, qv, ov) = (m.value(), q.value(), out.value());
        let manual: f64 = (0..3).map(|c| mv[[0, c, 1, 0]] * qv[[0, c]]).sum();
        assert!((ov[[0, 1, 0]] - manual).abs() < 1e-12);

        let err = fd_check_op(&[randn(&[2, 4, 3, 3], 14), randn(&[2, 4], 15)], |_, vs| {
            let s = vs[0].channel_dot(vs[1]);
            s.mul(s).sum_all()
        });
        assert!(err < 1e-8, "channel_dot fd error {err}");
    }

    #[test]
    fn pick_spatial_extracts_and_scatters() {
        let tape = Tape::new();
        let x = tape.leaf(randn(&[2, 3, 4, 4], 16));
        let picked = x.pick_spatial(&[(1, 2), (3, 0)]);
        let (xv, pv) = (x.value(), picked.value());
        for c in 0..3 {
            assert_eq!(pv[[0, c]], xv[[0, c, 1, 2]]);
            assert_eq!(pv[[1, c]], xv[[1, c, 3, 0]]);
        }
        let err = fd_check_op(&[randn(&[2, 3, 4, 4], 17)], |_, vs| {
            let p = vs[0].pick_spatial(&[(1, 2), (3, 0)]);
            p.mul(p).sum_all()
        });
        assert!(err < 1e-8, "pick_spatial fd error {err}");
    }
}
