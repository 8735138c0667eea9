//! Token-layout ops for windowed attention: patch extraction, window
//! partition/reverse, cyclic shifts, head splitting, patch merging, relative
//! position bias gathering, and attention masking.
//!
//! Spatial token tensors are `[N, H, W, C]`; windowed tensors are
//! `[N * nw, T, C]` with `T = M * M` tokens per window; multi-head tensors are
//! `[N * nw * nh, T, C / nh]` with the head axis innermost in the batch index.

use ndarray::{ArrayD, IxDyn};
use std::rc::Rc;

use super::Var;

fn nhwc(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected [N, H, W, C], got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

/// Forward gather for window partitioning; `inverse` scatters instead.
fn window_shuffle(
    src: &[f64],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    m: usize,
    inverse: bool,
) -> Vec<f64> {
    let (gh, gw) = (h / m, w / m);
    let mut dst = vec![0.0; src.len()];
    for b in 0..n {
        for wi in 0..gh {
            for wj in 0..gw {
                for ti in 0..m {
                    for tj in 0..m {
                        let spatial = ((b * h + wi * m + ti) * w + wj * m + tj) * c;
                        let windowed =
                            (((b * gh + wi) * gw + wj) * (m * m) + ti * m + tj) * c;
                        let (from, to) = if inverse {
                            (windowed, spatial)
                        } else {
                            (spatial, windowed)
                        };
                        dst[to..to + c].copy_from_slice(&src[from..from + c]);
                    }
                }
            }
        }
    }
    dst
}

impl<'t> Var<'t> {
    /// Partition `[N, H, W, C]` into non-overlapping `m x m` windows:
    /// `-> [N * (H/m) * (W/m), m*m, C]`.
    pub fn window_partition(self, m: usize) -> Var<'t> {
        let xv = self.value();
        let (n, h, w, c) = nhwc(xv.shape());
        assert!(h % m == 0 && w % m == 0, "window {m} must divide {h}x{w}");
        let out = window_shuffle(xv.as_slice().unwrap(), n, h, w, c, m, false);
        let nw = (h / m) * (w / m);
        let value = ArrayD::from_shape_vec(IxDyn(&[n * nw, m * m, c]), out).unwrap();
        self.unary(value, move |g| {
            let back = window_shuffle(g.as_slice().unwrap(), n, h, w, c, m, true);
            ArrayD::from_shape_vec(IxDyn(&[n, h, w, c]), back).unwrap()
        })
    }

    /// Inverse of [`Var::window_partition`]: `[N*nw, m*m, C] -> [N, H, W, C]`.
    pub fn window_reverse(self, m: usize, h: usize, w: usize) -> Var<'t> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        assert_eq!(shape.len(), 3, "expected windowed tokens");
        assert_eq!(shape[1], m * m, "tokens per window");
        let c = shape[2];
        let nw = (h / m) * (w / m);
        assert_eq!(shape[0] % nw, 0, "window count must divide batch");
        let n = shape[0] / nw;
        let out = window_shuffle(xv.as_slice().unwrap(), n, h, w, c, m, true);
        let value = ArrayD::from_shape_vec(IxDyn(&[n, h, w, c]), out).unwrap();
        self.unary(value, move |g| {
            let back = window_shuffle(g.as_slice().unwrap(), n, h, w, c, m, false);
            ArrayD::from_shape_vec(IxDyn(&[n * nw, m * m, c]), back).unwrap()
        })
    }

    /// Cyclic shift of `[N, H, W, C]` by `(di, dj)`; positive shifts move
    /// content toward larger indices, wrapping around.
    pub fn roll_tokens(self, di: isize, dj: isize) -> Var<'t> {
        let xv = self.value();
        let (n, h, w, c) = nhwc(xv.shape());
        let rolled = move |src: &[f64], di: isize, dj: isize| -> Vec<f64> {
            let mut dst = vec![0.0; src.len()];
            let (hi, wi) = (h as isize, w as isize);
            for b in 0..n {
                for i in 0..h {
                    let si = (i as isize - di).rem_euclid(hi) as usize;
                    for j in 0..w {
                        let sj = (j as isize - dj).rem_euclid(wi) as usize;
                        let to = ((b * h + i) * w + j) * c;
                        let from = ((b * h + si) * w + sj) * c;
                        dst[to..to + c].copy_from_slice(&src[from..from + c]);
                    }
                }
            }
            dst
        };
        let out = rolled(xv.as_slice().unwrap(), di, dj);
        let value = ArrayD::from_shape_vec(IxDyn(&[n, h, w, c]), out).unwrap();
        self.unary(value, move |g| {
            let back = rolled(g.as_slice().unwrap(), -di, -dj);
            ArrayD::from_shape_vec(IxDyn(&[n, h, w, c]), back).unwrap()
        })
    }

    /// Split `[B, T, C]` into `nh` heads: `-> [B * nh, T, C / nh]`, head axis
    /// innermost in the batch index.
    pub fn split_heads(self, nh: usize) -> Var<'t> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        assert_eq!(shape.len(), 3, "expected [B, T, C]");
        let (bs, t, c) = (shape[0], shape[1], shape[2]);
        assert_eq!(c % nh, 0, "heads must divide channels");
        let dk = c / nh;
        let shuffle = move |src: &[f64], split: bool| -> Vec<f64> {
            let mut dst = vec![0.0; src.len()];
            for b in 0..bs {
                for hh in 0..nh {
                    for tt in 0..t {
                        let full = (b * t + tt) * c + hh * dk;
                        let headed = (((b * nh) + hh) * t + tt) * dk;
                        let (from, to) = if split { (full, headed) } else { (headed, full) };
                        dst[to..to + dk].copy_from_slice(&src[from..from + dk]);
                    }
                }
            }
            dst
        };
        let out = shuffle(xv.as_slice().unwrap(), true);
        let value = ArrayD::from_shape_vec(IxDyn(&[bs * nh, t, dk]), out).unwrap();
        self.unary(value, move |g| {
            let back = shuffle(g.as_slice().unwrap(), false);
            ArrayD::from_shape_vec(IxDyn(&[bs, t, c]), back).unwrap()
        })
    }

    /// Inverse of [`Var::split_heads`]: `[B * nh, T, dk] -> [B, T, nh * dk]`.
    pub fn merge_heads(self, nh: usize) -> Var<'t> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        assert_eq!(shape.len(), 3, "expected [B*nh, T, dk]");
        assert_eq!(shape[0] % nh, 0, "head count must divide batch");
        let (bs, t, dk) = (shape[0] / nh, shape[1], shape[2]);
        let c = nh * dk;
        let shuffle = move |src: &[f64], merge: bool| -> Vec<f64> {
            let mut dst = vec![0.0; src.len()];
            for b in 0..bs {
                for hh in 0..nh {
                    for tt in 0..t {
                        let full = (b * t + tt) * c + hh * dk;
                        let headed = (((b * nh) + hh) * t + tt) * dk;
                        let (from, to) = if merge { (headed, full) } else { (full, headed) };
                        dst[to..to + dk].copy_from_slice(&src[from..from + dk]);
                    }
                }
            }
            dst
        };
        let out = shuffle(xv.as_slice().unwrap(), true);
        let value = ArrayD::from_shape_vec(IxDyn(&[bs, t, c]), out).unwrap();
        self.unary(value, move |g| {
            let back = shuffle(g.as_slice().unwrap(), false);
            ArrayD::from_shape_vec(IxDyn(&[bs * nh, t, dk]), back).unwrap()
        })
    }

    /// Non-overlapping `p x p` patch extraction for patch embedding:
    /// `[N, C, H, W] -> [N, H/p, W/p, C * p * p]` with feature index
    /// `(c * p + u) * p + v`.
    pub fn extract_patches(self, p: usize) -> Var<'t> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        assert_eq!(shape.len(), 4, "expected [N, C, H, W]");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert!(h % p == 0 && w % p == 0, "patch {p} must divide {h}x{w}");
        let (gh, gw) = (h / p, w / p);
        let f = c * p * p;
        let gather = move |src: &[f64], forward: bool| -> Vec<f64> {
            let mut dst = vec![0.0; src.len()];
            for b in 0..n {
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let img = ((b * c + ch) * h + i) * w + j;
                            let tok = ((b * gh + i / p) * gw + j / p) * f
                                + (ch * p + i % p) * p
                                + j % p;
                            if forward {
                                dst[tok] = src[img];
                            } else {
                                dst[img] = src[tok];
                            }
                        }
                    }
                }
            }
            dst
        };
        let out = gather(xv.as_slice().unwrap(), true);
        let value = ArrayD::from_shape_vec(IxDyn(&[n, gh, gw, f]), out).unwrap();
        self.unary(value, move |g| {
            let back = gather(g.as_slice().unwrap(), false);
            ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), back).unwrap()
        })
    }

    /// Swin-style patch merging gather: `[N, H, W, C] -> [N, H/2, W/2, 4C]`
    /// concatenating the `(0,0), (1,0), (0,1), (1,1)` sub-grids.
    pub fn patch_merge_gather(self) -> Var<'t> {
        let xv = self.value();
        let (n, h, w, c) = nhwc(xv.shape());
        assert!(h % 2 == 0 && w % 2 == 0, "patch merging needs even sizes");
        let (ho, wo) = (h / 2, w / 2);
        let offsets = [(0usize, 0usize), (1, 0), (0, 1), (1, 1)];
        let gather = move |src: &[f64], forward: bool| -> Vec<f64> {
            let mut dst = vec![0.0; src.len()];
            for b in 0..n {
                for i in 0..ho {
                    for j in 0..wo {
                        for (q, (di, dj)) in offsets.into_iter().enumerate() {
                            let fine = ((b * h + 2 * i + di) * w + 2 * j + dj) * c;
                            let coarse = ((b * ho + i) * wo + j) * 4 * c + q * c;
                            let (from, to) = if forward { (fine, coarse) } else { (coarse, fine) };
                            dst[to..to + c].copy_from_slice(&src[from..from + c]);
                        }
                    }
                }
            }
            dst
        };
        let out = gather(xv.as_slice().unwrap(), true);
        let value = ArrayD::from_shape_vec(IxDyn(&[n, ho, wo, 4 * c]), out).unwrap();
        self.unary(value, move |g| {
            let back = gather(g.as_slice().unwrap(), false);
            ArrayD::from_shape_vec(IxDyn(&[n, h, w, c]), back).unwrap()
        })
    }

    /// Zero-pad `[N, H, W, C]` on the bottom/right to `[N, H+ph, W+pw, C]`.
    pub fn pad_hw_tokens(self, ph: usize, pw: usize) -> Var<'t> {
        let xv = self.value();
        let (n, h, w, c) = nhwc(xv.shape());
        let (ho, wo) = (h + ph, w + pw);
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0; n * ho * wo * c];
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let from = ((b * h + i) * w + j) * c;
                    let to = ((b * ho + i) * wo + j) * c;
                    out[to..to + c].copy_from_slice(&xs[from..from + c]);
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, ho, wo, c]), out).unwrap();
        self.unary(value, move |g| {
            let gs = g.as_slice().unwrap();
            let mut back = vec![0.0; n * h * w * c];
            for b in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let from = ((b * ho + i) * wo + j) * c;
                        let to = ((b * h + i) * w + j) * c;
                        back[to..to + c].copy_from_slice(&gs[from..from + c]);
                    }
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[n, h, w, c]), back).unwrap()
        })
    }

    /// Crop `[N, H, W, C]` to the top-left `[N, h, w, C]`.
    pub fn crop_hw_tokens(self, h: usize, w: usize) -> Var<'t> {
        let xv = self.value();
        let (n, hi, wi, c) = nhwc(xv.shape());
        assert!(h <= hi && w <= wi, "crop larger than input");
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0; n * h * w * c];
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let from = ((b * hi + i) * wi + j) * c;
                    let to = ((b * h + i) * w + j) * c;
                    out[to..to + c].copy_from_slice(&xs[from..from + c]);
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, h, w, c]), out).unwrap();
        self.unary(value, move |g| {
            let gs = g.as_slice().unwrap();
            let mut back = vec![0.0; n * hi * wi * c];
            for b in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let from = ((b * h + i) * w + j) * c;
                        let to = ((b * hi + i) * wi + j) * c;
                        back[to..to + c].copy_from_slice(&gs[from..from + c]);
                    }
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[n, hi, wi, c]), back).unwrap()
        })
    }

    /// Gather a relative-position-bias table `[L, nh]` through a fixed index
    /// `[T * T]` into `[nh, T, T]`.
    pub fn gather_rpb(self, index: Rc<Vec<usize>>, t: usize) -> Var<'t> {
        let table = self.value();
        let shape = table.shape().to_vec();
        assert_eq!(shape.len(), 2, "expected [L, nh] table");
        let (l, nh) = (shape[0], shape[1]);
        assert_eq!(index.len(), t * t, "index length");
        let ts = table.as_slice().unwrap();
        let mut out = vec![0.0; nh * t * t];
        for (pos, &idx) in index.iter().enumerate() {
            assert!(idx < l, "rpb index {idx} out of range {l}");
            for hh in 0..nh {
                out[hh * t * t + pos] = ts[idx * nh + hh];
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[nh, t, t]), out).unwrap();
        self.unary(value, move |g| {
            let gs = g.as_slice().unwrap();
            let mut gt = vec![0.0; l * nh];
            for (pos, &idx) in index.iter().enumerate() {
                for hh in 0..nh {
                    gt[idx * nh + hh] += gs[hh * t * t + pos];
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[l, nh]), gt).unwrap()
        })
    }

    /// Add a relative position bias `[nh, T, T]` to attention scores
    /// `[B * nh, T, T]`, broadcasting over `B`.
    pub fn add_rpb(self, rpb: Var<'t>) -> Var<'t> {
        let sv = self.value();
        let rv = rpb.value();
        let (nh, t) = (rv.shape()[0], rv.shape()[1]);
        assert_eq!(rv.shape(), &[nh, t, t], "rpb shape");
        assert_eq!(sv.shape()[1..], [t, t], "score token count");
        assert_eq!(sv.shape()[0] % nh, 0, "head count must divide batch");
        let tt = t * t;
        let mut value = (*sv).clone();
        {
            let rs = rv.as_slice().unwrap();
            for (bi, chunk) in value.as_slice_mut().unwrap().chunks_mut(tt).enumerate() {
                let hh = bi % nh;
                for (o, r) in chunk.iter_mut().zip(&rs[hh * tt..(hh + 1) * tt]) {
                    *o += r;
                }
            }
        }
        self.binary(rpb, value, move |g| {
            let gs = g.as_slice().unwrap();
            let mut gr = vec![0.0; nh * tt];
            for (bi, chunk) in gs.chunks(tt).enumerate() {
                let hh = bi % nh;
                for (acc, gi) in gr[hh * tt..(hh + 1) * tt].iter_mut().zip(chunk) {
                    *acc += gi;
                }
            }
            (
                g.clone(),
                ArrayD::from_shape_vec(IxDyn(&[nh, t, t]), gr).unwrap(),
            )
        })
    }

    /// Add a constant shifted-window mask `[nw, T, T]` to attention scores
    /// `[N * nw * nh, T, T]`. The mask is data, not a parameter; gradients
    /// pass through unchanged.
    pub fn add_const_mask(self, mask: Rc<ArrayD<f64>>, nh: usize) -> Var<'t> {
        let sv = self.value();
        let ms = mask.shape().to_vec();
        assert_eq!(ms.len(), 3, "expected [nw, T, T] mask");
        let (nw, t) = (ms[0], ms[1]);
        let tt = t * t;
        assert_eq!(sv.shape()[1..], [t, t], "score token count");
        assert_eq!(sv.shape()[0] % (nw * nh), 0, "mask/head layout mismatch");
        let mut value = (*sv).clone();
        let msl = mask.as_slice().unwrap();
        for (bi, chunk) in value.as_slice_mut().unwrap().chunks_mut(tt).enumerate() {
            let wi = (bi / nh) % nw;
            for (o, m) in chunk.iter_mut().zip(&msl[wi * tt..(wi + 1) * tt]) {
                *o += m;
            }
        }
        self.unary(value, move |g| g.clone())
    }

    /// Permute `[N, H, W, C]` token maps to `[N, C, H, W]` image layout.
    pub fn to_nchw(self) -> Var<'t> {
        let xv = self.value();
        let (n, h, w, c) = nhwc(xv.shape());
        let perm = move |src: &[f64], forward: bool| -> Vec<f64> {
            let mut dst = vec![0.0; src.len()];
            for b in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        for ch in 0..c {
                            let tok = ((b * h + i) * w + j) * c + ch;
                            let img = ((b * c + ch) * h + i) * w + j;
                            if forward {
                                dst[img] = src[tok];
                            } else {
                                dst[tok] = src[img];
                            }
                        }
                    }
                }
            }
            dst
        };
        let out = perm(xv.as_slice().unwrap(), true);
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap();
        self.unary(value, move |g| {
            let back = perm(g.as_slice().unwrap(), false);
            ArrayD::from_shape_vec(IxDyn(&[n, h, w, c]), back).unwrap()
        })
    }

    /// Permute `[N, C, H, W]` image layout to `[N, H, W, C]` token maps.
    pub fn to_nhwc(self) -> Var<'t> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        assert_eq!(shape.len(), 4, "expected [N, C, H, W]");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let perm = move |src: &[f64], forward: bool| -> Vec<f64> {
            let mut dst = vec![0.0; src.len()];
            for b in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        for ch in 0..c {
                            let tok = ((b * h + i) * w + j) * c + ch;
                            let img = ((b * c + ch) * h + i) * w + j;
                            if forward {
                                dst[tok] = src[img];
                            } else {
                                dst[img] = src[tok];
                            }
                        }
                    }
                }
            }
            dst
        };
        let out = perm(xv.as_slice().unwrap(), true);
        let value = ArrayD::from_shape_vec(IxDyn(&[n, h, w, c]), out).unwrap();
        self.unary(value, move |g| {
            let back = perm(g.as_slice().unwrap(), false);
            ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), back).unwrap()
        })
    }

    /// Multiply the last axis of `[..., C]` by a learned diagonal `[C]`.
    pub fn scale_channels(self, diag: Var<'t>) -> Var<'t> {
        let xv = self.value();
        let dv = diag.value();
        let c = dv.len();
        assert_eq!(*xv.shape().last().unwrap(), c, "diagonal length");
        let ds = dv.as_slice().unwrap();
        let mut value = (*xv).clone();
        for row in value.as_slice_mut().unwrap().chunks_mut(c) {
            for (o, d) in row.iter_mut().zip(ds) {
                *o *= d;
            }
        }
        let xv2 = xv.clone();
        let dv2 = dv.clone();
        self.binary(diag, value, move |g| {
            let gs = g.as_slice().unwrap();
            let xs = xv2.as_slice().unwrap();
            let ds = dv2.as_slice().unwrap();
            let mut gx = vec![0.0; xs.len()];
            let mut gd = vec![0.0; c];
            for ((grow, xrow), gxrow) in
                gs.chunks(c).zip(xs.chunks(c)).zip(gx.chunks_mut(c))
            {
                for i in 0..c {
                    gxrow[i] = grow[i] * ds[i];
                    gd[i] += grow[i] * xrow[i];
                }
            }
            (
                ArrayD::from_shape_vec(xv2.dim(), gx).unwrap(),
                ArrayD::from_shape_vec(IxDyn(&[c]), gd).unwrap(),
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
    use std::rc::Rc;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn window_partition_reverse_roundtrip() {
        let tape = Tape::new();
        let x = tape.leaf(randn(&[2, 4, 6, 3], 1));
        let wins = x.window_partition(2);
        assert_eq!(wins.shape(), vec![2 * 2 * 3, 4, 3]);
        let back = wins.window_reverse(2, 4, 6);
        assert_eq!(*back.value(), *x.value());
    }

    #[test]
    fn window_partition_places_tokens() {
        let tape = Tape::new();
        let x = tape.leaf(randn(&[1, 4, 4, 1], 2));
        let wins = x.window_partition(2);
        let (xv, wv) = (x.value(), wins.value());
        // Window 1 covers columns 2-3 of rows 0-1; its token 2 is (1, 2).
        assert_eq!(wv[[1, 2, 0]], xv[[0, 1, 2, 0]]);
    }

    #[test]
    fn roll_shifts_cyclically() {
        let tape = Tape::new();
        let x = tape.leaf(randn(&[1, 3, 3, 2], 3));
        let y = x.roll_tokens(1, -1);
        let (xv, yv) = (x.value(), y.value());
        for i in 0..3 {
            for j in 0..3 {
                for ch in 0..2 {
                    assert_eq!(yv[[0, (i + 1) % 3, (j + 2) % 3, ch]], xv[[0, i, j, ch]]);
                }
            }
        }
        let back = y.roll_tokens(-1, 1);
        assert_eq!(*back.value(), *x.value());
    }

    #[test]
    fn heads_split_merge_roundtrip() {
        let tape = Tape::new();
        let x = tape.leaf(randn(&[3, 4, 6], 4));
        let heads = x.split_heads(2);
        assert_eq!(heads.shape(), vec![6, 4, 3]);
        let back = heads.merge_heads(2);
        assert_eq!(*back.value(), *x.value());
        let (xv, hv) = (x.value(), heads.value());
        // Head 1 of batch 2, token 3 starts at channel 3 of the full tensor.
        assert_eq!(hv[[5, 3, 0]], xv[[2, 3, 3]]);
    }

    #[test]
    fn permutation_ops_backward_match_fd() {
        let err = fd_check_op(&[randn(&[1, 4, 4, 2], 5)], |_, vs| {
            let y = vs[0].window_partition(2).window_reverse(2, 4, 4);
            let z = vs[0].roll_tokens(1, 1);
            y.mul(z).sum_all()
        });
        assert!(err < 1e-8, "window/roll fd error {err}");

        let err = fd_check_op(&[randn(&[2, 3, 4], 6)], |_, vs| {
            let y = vs[0].split_heads(2).merge_heads(2);
            y.mul(y).sum_all()
        });
        assert!(err < 1e-8, "heads fd error {err}");
    }

    #[test]
    fn extract_patches_layout_and_fd() {
        let tape = Tape::new();
        let x = tape.leaf(randn(&[1, 2, 4, 4], 7));
        let tok = x.extract_patches(2);
        assert_eq!(tok.shape(), vec![1, 2, 2, 8]);
        let (xv, tv) = (x.value(), tok.value());
        // Token (1, 0), channel 1, offset (0, 1) -> feature (1*2+0)*2+1 = 5.
        assert_eq!(tv[[0, 1, 0, 5]], xv[[0, 1, 2, 1]]);

        let err = fd_check_op(&[randn(&[1, 2, 4, 4], 8)], |_, vs| {
            let y = vs[0].extract_patches(2);
            y.mul(y).sum_all()
        });
        assert!(err < 1e-8, "extract_patches fd error {err}");
    }

    #[test]
    fn patch_merge_gather_layout_and_fd() {
        let tape = Tape::new();
        let x = tape.leaf(randn(&[1, 4, 4, 3], 9));
        let y = x.patch_merge_gather();
        assert_eq!(y.shape(), vec![1, 2, 2, 12]);
        let (xv, yv) = (x.value(), y.value());
        // Quadrant order (0,0), (1,0), (0,1), (1,1).
        assert_eq!(yv[[0, 1, 0, 0]], xv[[0, 2, 0, 0]]);
        assert_eq!(yv[[0, 1, 0, 3]], xv[[0, 3, 0, 0]]);
        assert_eq!(yv[[0, 1, 0, 6]], xv[[0, 2, 1, 0]]);
        assert_eq!(yv[[0, 1, 0, 9]], xv[[0, 3, 1, 0]]);

        let err = fd_check_op(&[randn(&[1, 4, 4, 2], 10)], |_, vs| {
            let y = vs[0].patch_merge_gather();
            y.mul(y).sum_all()
        });
        assert!(err < 1e-8, "patch_merge fd error {err}");
    }

    #[test]
    fn pad_crop_roundtrip_and_fd() {
        let tape = Tape::new();
        let x = tape.leaf(randn(&[1, 3, 3, 2], 11));
        let padded = x.pad_hw_tokens(1, 2);
        assert_eq!(padded.shape(), vec![1, 4, 5, 2]);
        assert_eq!(padded.value()[[0, 3, 4, 0]], 0.0);
        let back = padded.crop_hw_tokens(3, 3);
        assert_eq!(*back.value(), *x.value());

        let err = fd_check_op(&[randn(&[1, 3, 3, 2], 12)], |_, vs| {
            let y = vs[0].pad_hw_tokens(1, 1).crop_hw_tokens(3, 3);
            y.mul(y).sum_all()
        });
        assert!(err < 1e-8, "pad/crop fd error {err}");
    }

    #[test]
    fn rpb_gather_add_and_fd() {
        let index = Rc::new(vec![0usize, 1, 1, 2]);
        let table = randn(&[3, 2], 13);
        let idx2 = index.clone();
        let err = fd_check_op(&[table.clone(), randn(&[4, 2, 2], 14)], move |_, vs| {
            let rpb = vs[0].gather_rpb(idx2.clone(), 2);
            let scores = vs[1].add_rpb(rpb);
            scores.mul(scores).sum_all()
        });
        assert!(err < 1e-8, "rpb fd error {err}");

        let tape = Tape::new();
        let t = tape.leaf(table);
        let rpb = t.gather_rpb(index, 2);
        let (tv, rv) = (t.value(), rpb.value());
        assert_eq!(rv[[1, 0, 1]], tv[[1, 1]]);
        assert_eq!(rv[[0, 1, 1]], tv[[2, 0]]);
    }

    #[test]
    fn const_mask_adds_per_window_and_passes_gradient() {
        let tape = Tape::new();
        // N=1, nw=2, nh=2 -> batch 4.
        let scores = tape.leaf(ArrayD::zeros(IxDyn(&[4, 2, 2])));
        let mut mask = ArrayD::zeros(IxDyn(&[2, 2, 2]));
        mask[[1, 0, 1]] = -100.0;
        let masked = scores.add_const_mask(Rc::new(mask), 2);
        let mv = masked.value();
        assert_eq!(mv[[0, 0, 1]], 0.0);
        assert_eq!(mv[[2, 0, 1]], -100.0);
        assert_eq!(mv[[3, 0, 1]], -100.0);
        let loss = masked.sum_all();
        tape.backward(loss);
        let g = tape.grad(scores).unwrap();
        assert!(g.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn layout_permutes_roundtrip_and_match_fd() {
        let tape = Tape::new();
        let x = tape.leaf(randn(&[2, 3, 4, 5], 20));
        let img = x.to_nchw();
        assert_eq!(img.shape(), vec![2, 5, 3, 4]);
        let (xv, iv) = (x.value(), img.value());
        assert_eq!(iv[[1, 2, 0, 3]], xv[[1, 0, 3, 2]]);
        let back = img.to_nhwc();
        assert_eq!(*back.value(), *x.value());

        let err = fd_check_op(&[randn(&[1, 2, 3, 3], 21)], |_, vs| {
            let y = vs[0].to_nchw().to_nhwc();
            y.mul(y).sum_all()
        });
        assert!(err < 1e-8, "layout fd error {err}");
    }

    #[test]
    fn scale_channels_backward_matches_fd() {
        let x = randn(&[2, 3, 4], 15);
        let d = randn(&[4], 16) + 1.5;
        let err = fd_check_op(&[x, d], |_, vs| {
            let y = vs[0].scale_channels(vs[1]);
            y.mul(y).mean_all()
        });
        assert!(err < 1e-8, "scale_channels fd error {err}");
    }
}
