//! Matrix products: plain 2-D matmul, batched attention products, and the
//! fully-connected `linear` used on token tensors of any rank.
//!
//! All products route through `ndarray::linalg::general_mat_mul` (gemm).
//! Batched variants parallelize over the batch axis with one output block per
//! task, so the result does not depend on the execution mode.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, Ix2, Ix3, IxDyn};

use super::Var;
use crate::exec;

fn as2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 array")
}

fn mm(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, &a, &b, 0.0, &mut out);
    out
}

/// Batched product over `[B, m, k] x [B, k, n] -> [B, m, n]`, with optional
/// transposition of either operand's trailing two axes.
fn bmm_raw(a: &ArrayD<f64>, b: &ArrayD<f64>, ta: bool, tb: bool) -> ArrayD<f64> {
    let a3 = a.view().into_dimensionality::<Ix3>().expect("rank-3 lhs");
    let b3 = b.view().into_dimensionality::<Ix3>().expect("rank-3 rhs");
    let bs = a3.shape()[0];
    assert_eq!(bs, b3.shape()[0], "batch size mismatch");
    let (m, k) = if ta {
        (a3.shape()[2], a3.shape()[1])
    } else {
        (a3.shape()[1], a3.shape()[2])
    };
    let (kb, n) = if tb {
        (b3.shape()[2], b3.shape()[1])
    } else {
        (b3.shape()[1], b3.shape()[2])
    };
    assert_eq!(k, kb, "inner dimension mismatch");
    let mut out = ArrayD::zeros(IxDyn(&[bs, m, n]));
    exec::par_chunks_mut(out.as_slice_mut().unwrap(), m * n, |i, chunk| {
        let av = a3.index_axis(ndarray::Axis(0), i);
        let bv = b3.index_axis(ndarray::Axis(0), i);
        let av = if ta { av.reversed_axes() } else { av };
        let bv = if tb { bv.reversed_axes() } else { bv };
        let mut c = ndarray::ArrayViewMut2::from_shape((m, n), chunk).unwrap();
        general_mat_mul(1.0, &av, &bv, 0.0, &mut c);
    });
    out
}

impl<'t> Var<'t> {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (av, bv) = (self.value(), other.value());
        let value = mm(as2(&av), as2(&bv)).into_dyn();
        self.binary(other, value, move |g| {
            let g2 = as2(g);
            let ga = mm(g2, as2(&bv).reversed_axes()).into_dyn();
            let gb = mm(as2(&av).reversed_axes(), g2).into_dyn();
            (ga, gb)
        })
    }

    /// Batched `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(self, other: Var<'t>) -> Var<'t> {
        let (av, bv) = (self.value(), other.value());
        let value = bmm_raw(&av, &bv, false, false);
        self.binary(other, value, move |g| {
            let ga = bmm_raw(g, &bv, false, true);
            let gb = bmm_raw(&av, g, true, false);
            (ga, gb)
        })
    }

    /// Batched `[B, m, k] x [B, n, k]^T -> [B, m, n]` (attention scores).
    pub fn bmm_nt(self, other: Var<'t>) -> Var<'t> {
        let (av, bv) = (self.value(), other.value());
        let value = bmm_raw(&av, &bv, false, true);
        self.binary(other, value, move |g| {
            let ga = bmm_raw(g, &bv, false, false);
            let gb = bmm_raw(g, &av, true, false).into_dimensionality::<Ix3>().unwrap()
                .into_dyn();
            (ga, gb)
        })
    }

    /// Fully-connected layer on the last axis: `[..., C] x [C, Co] -> [..., Co]`,
    /// with an optional bias of shape `[Co]`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Var<'t> {
        let xs = self.shape();
        let c = *xs.last().expect("linear input rank >= 1");
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let co = weight.shape()[1];
        let x2 = self.reshape(&[rows, c]);
        let y2 = x2.matmul(weight);
        let y2 = match bias {
            Some(b) => y2.add_bias_lastdim(b),
            None => y2,
        };
        let mut out_shape = xs[..xs.len() - 1].to_vec();
        out_shape.push(co);
        y2.reshape(&out_shape)
    }

    /// Add a `[C]` bias over the last axis of `[..., C]`.
    pub fn add_bias_lastdim(self, bias: Var<'t>) -> Var<'t> {
        let bv = bias.value();
        let c = bv.len();
        let mut value = (*self.value()).clone();
        let bs = bv.as_slice().unwrap();
        for row in value.as_slice_mut().unwrap().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bs) {
                *o += b;
            }
        }
        self.binary(bias, value, move |g| {
            let mut gb = vec![0.0; c];
            for row in g.as_slice().unwrap().chunks(c) {
                for (acc, gi) in gb.iter_mut().zip(row) {
                    *acc += gi;
                }
            }
            (g.clone(), ArrayD::from_shape_vec(IxDyn(&[c]), gb).unwrap())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::fd_check_op;
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn matmul_forward_matches_hand_product() {
        let tape = super::super::Tape::new();
        let a = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1., 2., 3., 4.]).unwrap());
        let b = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![5., 6., 7., 8.]).unwrap());
        let c = a.matmul(b);
        let v = c.value();
        assert_eq!(v.as_slice().unwrap(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_backward_matches_fd() {
        let a = randn(&[3, 4], 10);
        let b = randn(&[4, 2], 11);
        let err = fd_check_op(&[a, b], |_, vs| vs[0].matmul(vs[1]).mul(vs[0].matmul(vs[1])).sum_all());
        assert!(err < 1e-8, "matmul fd error {err}");
    }

    #[test]
    fn bmm_variants_backward_match_fd() {
        let a = randn(&[2, 3, 4], 12);
        let b = randn(&[2, 4, 3], 13);
        let err = fd_check_op(&[a.clone(), b.clone()], |_, vs| vs[0].bmm(vs[1]).sum_all());
        assert!(err < 1e-8, "bmm fd error {err}");
        let b2 = randn(&[2, 5, 4], 14);
        let err = fd_check_op(&[a, b2], |_, vs| {
            let s = vs[0].bmm_nt(vs[1]);
            s.mul(s).sum_all()
        });
        assert!(err < 1e-8, "bmm_nt fd error {err}");
    }

    #[test]
    fn linear_backward_matches_fd() {
        let x = randn(&[2, 3, 4], 15);
        let w = randn(&[4, 5], 16);
        let b = randn(&[5], 17);
        let err = fd_check_op(&[x, w, b], |_, vs| {
            let y = vs[0].linear(vs[1], Some(vs[2]));
            y.mul(y).mean_all()
        });
        assert!(err < 1e-8, "linear fd error {err}");
    }
}
