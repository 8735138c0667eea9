//! Convolutional primitives on `[N, C, H, W]` tensors: 1x1 pointwise
//! convolution (a gemm per sample), depthwise k x k convolution with same
//! padding, 2x2 max pooling, nearest-neighbor upsampling, and batch
//! normalization in both training and inference form.
//!
//! Parallel sections write disjoint output blocks and reduce in index order,
//! so sequential and parallel execution produce identical bits.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

use super::Var;
use crate::exec;

fn nchw(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected [N, C, H, W], got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

impl<'t> Var<'t> {
    /// Pointwise convolution: `[N, C, H, W] x [Co, C] -> [N, Co, H, W]`.
    pub fn conv1x1(self, weight: Var<'t>) -> Var<'t> {
        let xv = self.value();
        let wv = weight.value();
        let (n, c, h, w) = nchw(xv.shape());
        assert_eq!(wv.shape()[1], c, "weight in-channels");
        let co = wv.shape()[0];
        let hw = h * w;

        let w2 = ArrayView2::from_shape((co, c), wv.as_slice().unwrap()).unwrap();
        let mut value = ArrayD::zeros(IxDyn(&[n, co, h, w]));
        {
            let xs = xv.as_slice().unwrap();
            exec::par_chunks_mut(value.as_slice_mut().unwrap(), co * hw, |i, chunk| {
                let xi = ArrayView2::from_shape((c, hw), &xs[i * c * hw..(i + 1) * c * hw]).unwrap();
                let mut out = ArrayViewMut2::from_shape((co, hw), chunk).unwrap();
                general_mat_mul(1.0, &w2, &xi, 0.0, &mut out);
            });
        }

        let xv2 = xv.clone();
        let wv2 = wv.clone();
        self.binary(weight, value, move |g| {
            let gs = g.as_slice().unwrap();
            let xs = xv2.as_slice().unwrap();
            let w2 = ArrayView2::from_shape((co, c), wv2.as_slice().unwrap()).unwrap();

            let mut gx = ArrayD::zeros(IxDyn(&[n, c, h, w]));
            exec::par_chunks_mut(gx.as_slice_mut().unwrap(), c * hw, |i, chunk| {
                let gi = ArrayView2::from_shape((co, hw), &gs[i * co * hw..(i + 1) * co * hw])
                    .unwrap();
                let mut out = ArrayViewMut2::from_shape((c, hw), chunk).unwrap();
                general_mat_mul(1.0, &w2.t(), &gi, 0.0, &mut out);
            });

            let partials = exec::par_map_collect(n, |i| {
                let gi = ArrayView2::from_shape((co, hw), &gs[i * co * hw..(i + 1) * co * hw])
                    .unwrap();
                let xi = ArrayView2::from_shape((c, hw), &xs[i * c * hw..(i + 1) * c * hw]).unwrap();
                let mut gwi = Array2::<f64>::zeros((co, c));
                general_mat_mul(1.0, &gi, &xi.t(), 0.0, &mut gwi);
                gwi
            });
            let mut gw = Array2::<f64>::zeros((co, c));
            for p in partials {
                gw += &p;
            }
            (gx, gw.into_dyn())
        })
    }

    /// Depthwise convolution with odd kernel, stride 1, zero same-padding:
    /// `[N, C, H, W] x [C, k, k] -> [N, C, H, W]`.
    pub fn depthwise_conv(self, weight: Var<'t>) -> Var<'t> {
        let xv = self.value();
        let wv = weight.value();
        let (n, c, h, w) = nchw(xv.shape());
        assert_eq!(wv.shape()[0], c, "weight channels");
        let k = wv.shape()[1];
        assert_eq!(wv.shape()[2], k, "square kernel");
        assert_eq!(k % 2, 1, "odd kernel size");
        let p = k / 2;
        let hw = h * w;

        let mut value = ArrayD::zeros(IxDyn(&[n, c, h, w]));
        {
            let xs = xv.as_slice().unwrap();
            let ws = wv.as_slice().unwrap();
            exec::par_chunks_mut(value.as_slice_mut().unwrap(), hw, |lane, out| {
                let ch = lane % c;
                let xin = &xs[lane * hw..(lane + 1) * hw];
                let ker = &ws[ch * k * k..(ch + 1) * k * k];
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = 0.0;
                        for u in 0..k {
                            let ii = i + u;
                            if ii < p || ii - p >= h {
                                continue;
                            }
                            for v in 0..k {
                                let jj = j + v;
                                if jj < p || jj - p >= w {
                                    continue;
                                }
                                acc += xin[(ii - p) * w + (jj - p)] * ker[u * k + v];
                            }
                        }
                        out[i * w + j] = acc;
                    }
                }
            });
        }

        let xv2 = xv.clone();
        let wv2 = wv.clone();
        self.binary(weight, value, move |g| {
            let gs = g.as_slice().unwrap();
            let xs = xv2.as_slice().unwrap();
            let ws = wv2.as_slice().unwrap();

            // d/dx: correlate the upstream gradient with the flipped kernel.
            let mut gx = ArrayD::zeros(IxDyn(&[n, c, h, w]));
            exec::par_chunks_mut(gx.as_slice_mut().unwrap(), hw, |lane, out| {
                let ch = lane % c;
                let gin = &gs[lane * hw..(lane + 1) * hw];
                let ker = &ws[ch * k * k..(ch + 1) * k * k];
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = 0.0;
                        for u in 0..k {
                            let ii = i + u;
                            if ii < p || ii - p >= h {
                                continue;
                            }
                            for v in 0..k {
                                let jj = j + v;
                                if jj < p || jj - p >= w {
                                    continue;
                                }
                                acc += gin[(ii - p) * w + (jj - p)]
                                    * ker[(k - 1 - u) * k + (k - 1 - v)];
                            }
                        }
                        out[i * w + j] = acc;
                    }
                }
            });

            // d/dw: per-lane partials reduced in index order over the batch.
            let partials = exec::par_map_collect(n * c, |lane| {
                let ch = lane % c;
                let xin = &xs[lane * hw..(lane + 1) * hw];
                let gin = &gs[lane * hw..(lane + 1) * hw];
                let mut gk = vec![0.0; k * k];
                for u in 0..k {
                    for v in 0..k {
                        let mut acc = 0.0;
                        for i in 0..h {
                            let ii = i + u;
                            if ii < p || ii - p >= h {
                                continue;
                            }
                            for j in 0..w {
                                let jj = j + v;
                                if jj < p || jj - p >= w {
                                    continue;
                                }
                                acc += gin[i * w + j] * xin[(ii - p) * w + (jj - p)];
                            }
                        }
                        gk[u * k + v] = acc;
                    }
                }
                (ch, gk)
            });
            let mut gw = vec![0.0; c * k * k];
            for (ch, gk) in partials {
                for (dst, src) in gw[ch * k * k..(ch + 1) * k * k].iter_mut().zip(&gk) {
                    *dst += src;
                }
            }
            (gx, ArrayD::from_shape_vec(IxDyn(&[c, k, k]), gw).unwrap())
        })
    }

    /// Add a per-channel bias: `[N, C, H, W] + [C]`.
    pub fn add_bias_channels(self, bias: Var<'t>) -> Var<'t> {
        let xv = self.value();
        let bv = bias.value();
        let (_, c, h, w) = nchw(xv.shape());
        assert_eq!(bv.len(), c, "bias length");
        let hw = h * w;
        let mut value = (*xv).clone();
        {
            let bs = bv.as_slice().unwrap();
            for (lane, chunk) in value.as_slice_mut().unwrap().chunks_mut(hw).enumerate() {
                let b = bs[lane % c];
                for o in chunk {
                    *o += b;
                }
            }
        }
        self.binary(bias, value, move |g| {
            let mut gb = vec![0.0; c];
            for (lane, chunk) in g.as_slice().unwrap().chunks(hw).enumerate() {
                gb[lane % c] += chunk.iter().sum::<f64>();
            }
            (g.clone(), ArrayD::from_shape_vec(IxDyn(&[c]), gb).unwrap())
        })
    }

    /// 2x2 max pooling with stride 2 on even spatial sizes. Ties resolve to
    /// the first maximal element in row-major window order.
    pub fn maxpool2x2(self) -> Var<'t> {
        let xv = self.value();
        let (n, c, h, w) = nchw(xv.shape());
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2x2 needs even sizes");
        let (ho, wo) = (h / 2, w / 2);
        let xs = xv.as_slice().unwrap();
        let lanes = n * c;
        let mut value = vec![0.0; lanes * ho * wo];
        let mut arg = vec![0u8; lanes * ho * wo];
        for lane in 0..lanes {
            let xin = &xs[lane * h * w..(lane + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut which = 0u8;
                    for (q, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        let v = xin[(2 * i + di) * w + (2 * j + dj)];
                        if v > best {
                            best = v;
                            which = q as u8;
                        }
                    }
                    value[(lane * ho + i) * wo + j] = best;
                    arg[(lane * ho + i) * wo + j] = which;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), value).unwrap();
        self.unary(value, move |g| {
            let gs = g.as_slice().unwrap();
            let mut gx = vec![0.0; lanes * h * w];
            for lane in 0..lanes {
                for i in 0..ho {
                    for j in 0..wo {
                        let q = arg[(lane * ho + i) * wo + j] as usize;
                        let (di, dj) = [(0, 0), (0, 1), (1, 0), (1, 1)][q];
                        gx[lane * h * w + (2 * i + di) * w + (2 * j + dj)] +=
                            gs[(lane * ho + i) * wo + j];
                    }
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), gx).unwrap()
        })
    }

    /// Nearest-neighbor 2x upsampling: `[N, C, h, w] -> [N, C, 2h, 2w]`.
    pub fn upsample_nearest2x(self) -> Var<'t> {
        let xv = self.value();
        let (n, c, h, w) = nchw(xv.shape());
        let (ho, wo) = (2 * h, 2 * w);
        let xs = xv.as_slice().unwrap();
        let lanes = n * c;
        let mut value = vec![0.0; lanes * ho * wo];
        for lane in 0..lanes {
            let xin = &xs[lane * h * w..(lane + 1) * h * w];
            let out = &mut value[lane * ho * wo..(lane + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    out[i * wo + j] = xin[(i / 2) * w + (j / 2)];
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), value).unwrap();
        self.unary(value, move |g| {
            let gs = g.as_slice().unwrap();
            let mut gx = vec![0.0; lanes * h * w];
            for lane in 0..lanes {
                let gout = &gs[lane * ho * wo..(lane + 1) * ho * wo];
                let gin = &mut gx[lane * h * w..(lane + 1) * h * w];
                for i in 0..ho {
                    for j in 0..wo {
                        gin[(i / 2) * w + (j / 2)] += gout[i * wo + j];
                    }
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), gx).unwrap()
        })
    }

    /// Batch normalization over `(N, H, W)` per channel, training form.
    /// Returns the normalized output along with the batch mean and biased
    /// variance per channel so the caller can maintain running statistics.
    pub fn batchnorm_train(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        eps: f64,
    ) -> (Var<'t>, Vec<f64>, Vec<f64>) {
        let xv = self.value();
        let (n, c, h, w) = nchw(xv.shape());
        let gv = gamma.value();
        let bv = beta.value();
        assert_eq!(gv.len(), c, "gamma length");
        assert_eq!(bv.len(), c, "beta length");
        let hw = h * w;
        let m = (n * hw) as f64;
        let xs = xv.as_slice().unwrap();

        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for b in 0..n {
                let lane = &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                acc += lane.iter().sum::<f64>();
            }
            let mu = acc / m;
            let mut sq = 0.0;
            for b in 0..n {
                let lane = &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                sq += lane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = sq / m;
        }

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gs = gv.as_slice().unwrap();
        let bs = bv.as_slice().unwrap();
        let mut xhat = vec![0.0; xs.len()];
        let mut value = vec![0.0; xs.len()];
        for lane in 0..n * c {
            let ch = lane % c;
            let (mu, s) = (mean[ch], inv_std[ch]);
            let xin = &xs[lane * hw..(lane + 1) * hw];
            let xh = &mut xhat[lane * hw..(lane + 1) * hw];
            let out = &mut value[lane * hw..(lane + 1) * hw];
            for i in 0..hw {
                xh[i] = (xin[i] - mu) * s;
                out[i] = gs[ch] * xh[i] + bs[ch];
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), value).unwrap();

        let gv2 = gv.clone();
        let out = self.ternary(gamma, beta, value, move |g| {
            let gsl = g.as_slice().unwrap();
            let gw = gv2.as_slice().unwrap();
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            let mut sum_dxhat = vec![0.0; c];
            let mut sum_dxhat_xhat = vec![0.0; c];
            for lane in 0..n * c {
                let ch = lane % c;
                let gout = &gsl[lane * hw..(lane + 1) * hw];
                let xh = &xhat[lane * hw..(lane + 1) * hw];
                for i in 0..hw {
                    ggamma[ch] += gout[i] * xh[i];
                    gbeta[ch] += gout[i];
                    let dxh = gout[i] * gw[ch];
                    sum_dxhat[ch] += dxh;
                    sum_dxhat_xhat[ch] += dxh * xh[i];
                }
            }
            let mut gx = vec![0.0; gsl.len()];
            for lane in 0..n * c {
                let ch = lane % c;
                let s = inv_std[ch];
                let m1 = sum_dxhat[ch] / m;
                let m2 = sum_dxhat_xhat[ch] / m;
                let gout = &gsl[lane * hw..(lane + 1) * hw];
                let xh = &xhat[lane * hw..(lane + 1) * hw];
                let gin = &mut gx[lane * hw..(lane + 1) * hw];
                for i in 0..hw {
                    gin[i] = s * (gout[i] * gw[ch] - m1 - xh[i] * m2);
                }
            }
            (
                ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), gx).unwrap(),
                ArrayD::from_shape_vec(IxDyn(&[c]), ggamma).unwrap(),
                ArrayD::from_shape_vec(IxDyn(&[c]), gbeta).unwrap(),
            )
        });
        (out, mean, var)
    }

    /// Batch normalization with fixed statistics (inference form).
    pub fn batchnorm_eval(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var<'t> {
        let xv = self.value();
        let (n, c, h, w) = nchw(xv.shape());
        let gv = gamma.value();
        let bv = beta.value();
        assert_eq!(gv.len(), c, "gamma length");
        assert_eq!(bv.len(), c, "beta length");
        assert_eq!(mean.len(), c, "mean length");
        assert_eq!(var.len(), c, "var length");
        let hw = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let xs = xv.as_slice().unwrap();
        let gs = gv.as_slice().unwrap();
        let bs = bv.as_slice().unwrap();
        let mut value = vec![0.0; xs.len()];
        let mut xhat = vec![0.0; xs.len()];
        for lane in 0..n * c {
            let ch = lane % c;
            let (mu, s) = (mean[ch], inv_std[ch]);
            let xin = &xs[lane * hw..(lane + 1) * hw];
            let xh = &mut xhat[lane * hw..(lane + 1) * hw];
            let out = &mut value[lane * hw..(lane + 1) * hw];
            for i in 0..hw {
                xh[i] = (xin[i] - mu) * s;
                out[i] = gs[ch] * xh[i] + bs[ch];
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), value).unwrap();
        let gv2 = gv.clone();
        self.ternary(gamma, beta, value, move |g| {
            let gsl = g.as_slice().unwrap();
            let gw = gv2.as_slice().unwrap();
            let mut gx = vec![0.0; gsl.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for lane in 0..n * c {
                let ch = lane % c;
                let k = gw[ch] * inv_std[ch];
                let gout = &gsl[lane * hw..(lane + 1) * hw];
                let xh = &xhat[lane * hw..(lane + 1) * hw];
                let gin = &mut gx[lane * hw..(lane + 1) * hw];
                for i in 0..hw {
                    gin[i] = gout[i] * k;
                    ggamma[ch] += gout[i] * xh[i];
                    gbeta[ch] += gout[i];
                }
            }
            (
                ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), gx).unwrap(),
                ArrayD::from_shape_vec(IxDyn(&[c]), ggamma).unwrap(),
                ArrayD::from_shape_vec(IxDyn(&[c]), gbeta).unwrap(),
            )
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
    fn conv1x1_matches_manual_sum() {
        let tape = Tape::new();
        let x = tape.leaf(randn(&[1, 3, 2, 2], 1));
        let w = tape.leaf(randn(&[2, 3], 2));
        let y = x.conv1x1(w);
        let (xv, wv, yv) = (x.value(), w.value(), y.value());
        let manual: f64 = (0..3).map(|c| wv[[1, c]] * xv[[0, c, 0, 1]]).sum();
        assert!((yv[[0, 1, 0, 1]] - manual).abs() < 1e-12);
    }

    #[test]
    fn conv1x1_backward_matches_fd() {
        let x = randn(&[2, 3, 4, 4], 3);
        let w = randn(&[5, 3], 4);
        let b = randn(&[5], 5);
        let err = fd_check_op(&[x, w, b], |_, vs| {
            let y = vs[0].conv1x1(vs[1]).add_bias_channels(vs[2]);
            y.mul(y).mean_all()
        });
        assert!(err < 1e-7, "conv1x1 fd error {err}");
    }

    #[test]
    fn depthwise_identity_kernel_is_identity() {
        let tape = Tape::new();
        let x = tape.leaf(randn(&[1, 2, 4, 4], 6));
        let mut kv = ArrayD::zeros(IxDyn(&[2, 3, 3]));
        kv[[0, 1, 1]] = 1.0;
        kv[[1, 1, 1]] = 1.0;
        let k = tape.leaf(kv);
        let y = x.depthwise_conv(k);
        assert_eq!(*y.value(), *x.value());
    }

    #[test]
    fn depthwise_backward_matches_fd() {
        let x = randn(&[2, 2, 5, 5], 7);
        let k = randn(&[2, 3, 3], 8);
        let err = fd_check_op(&[x, k], |_, vs| {
            let y = vs[0].depthwise_conv(vs[1]);
            y.mul(y).mean_all()
        });
        assert!(err < 1e-7, "depthwise fd error {err}");
    }

    #[test]
    fn maxpool_picks_max_and_routes_gradient() {
        let tape = Tape::new();
        let mut xv = ArrayD::zeros(IxDyn(&[1, 1, 2, 2]));
        xv[[0, 0, 0, 0]] = 1.0;
        xv[[0, 0, 0, 1]] = 3.0;
        xv[[0, 0, 1, 0]] = 2.0;
        xv[[0, 0, 1, 1]] = 0.0;
        let x = tape.leaf(xv);
        let y = x.maxpool2x2();
        assert_eq!(y.value()[[0, 0, 0, 0]], 3.0);
        let loss = y.sum_all();
        tape.backward(loss);
        let g = tape.grad(x).unwrap();
        assert_eq!(g[[0, 0, 0, 1]], 1.0);
        assert_eq!(g[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn maxpool_backward_matches_fd() {
        // Keep values well separated so the finite-difference step cannot
        // flip the argmax.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut vals: Vec<f64> = (0..2 * 2 * 4 * 4).map(|i| i as f64 * 0.37).collect();
        vals.shuffle(&mut rng);
        let x = ArrayD::from_shape_vec(IxDyn(&[2, 2, 4, 4]), vals).unwrap();
        let err = fd_check_op(&[x], |_, vs| {
            let y = vs[0].maxpool2x2();
            y.mul(y).sum_all()
        });
        assert!(err < 1e-7, "maxpool fd error {err}");
    }

    #[test]
    fn upsample_backward_matches_fd() {
        let x = randn(&[1, 2, 3, 3], 10);
        let err = fd_check_op(&[x], |_, vs| {
            let y = vs[0].upsample_nearest2x();
            y.mul(y).sum_all()
        });
        assert!(err < 1e-8, "upsample fd error {err}");
    }

    #[test]
    fn upsample_repeats_pixels() {
        let tape = Tape::new();
        let x = tape.leaf(randn(&[1, 1, 2, 2], 11));
        let y = x.upsample_nearest2x();
        let (xv, yv) = (x.value(), y.value());
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(yv[[0, 0, i, j]], xv[[0, 0, i / 2, j / 2]]);
            }
        }
    }

    #[test]
    fn batchnorm_train_normalizes_and_matches_fd() {
        let tape = Tape::new();
        let x = tape.leaf(randn(&[4, 3, 5, 5], 12) * 3.0 + 1.0);
        let gamma = tape.leaf(ArrayD::ones(IxDyn(&[3])));
        let beta = tape.leaf(ArrayD::zeros(IxDyn(&[3])));
        let (y, mean, var) = x.batchnorm_train(gamma, beta, 1e-5);
        let yv = y.value();
        for ch in 0..3 {
            assert!(mean[ch].abs() < 10.0 && var[ch] > 0.0);
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| {
                    let yv = &yv;
                    (0..25).map(move |p| yv[[b, ch, p / 5, p % 5]])
                })
                .collect();
            let mu: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd: f64 =
                (vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!(mu.abs() < 1e-10, "channel mean {mu}");
            assert!((sd - 1.0).abs() < 1e-3, "channel std {sd}");
        }

        let x = randn(&[2, 2, 3, 3], 13);
        let g = randn(&[2], 14) + 1.0;
        let b = randn(&[2], 15);
        let err = fd_check_op(&[x, g, b], |_, vs| {
            let (y, _, _) = vs[0].batchnorm_train(vs[1], vs[2], 1e-5);
            y.mul(y).mean_all()
        });
        assert!(err < 1e-6, "batchnorm train fd error {err}");
    }

    #[test]
    fn batchnorm_eval_backward_matches_fd() {
        let x = randn(&[2, 2, 3, 3], 16);
        let g = randn(&[2], 17) + 1.0;
        let b = randn(&[2], 18);
        let err = fd_check_op(&[x, g, b], |_, vs| {
            let y = vs[0].batchnorm_eval(vs[1], vs[2], &[0.2, -0.1], &[1.5, 0.8], 1e-5);
            y.mul(y).mean_all()
        });
        assert!(err < 1e-7, "batchnorm eval fd error {err}");
    }
}
