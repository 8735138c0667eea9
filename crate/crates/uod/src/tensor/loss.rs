//! Training losses: binary cross-entropy on probability maps and categorical
//! cross-entropy on softmax rows with integer targets.

use ndarray::{arr0, ArrayD, IxDyn};
use std::rc::Rc;

use super::Var;

/// Probability floor inside the logs of both losses. Predictions come out of
/// a sigmoid or softmax, so the clamp only ever fires on pathological inputs.
const EPS: f64 = 1e-7;

impl<'t> Var<'t> {
    /// Mean binary cross-entropy between predicted probabilities and a fixed
    /// target of the same shape: `-mean(t*ln(p) + (1-t)*ln(1-p))`, with both
    /// logs floored at `EPS`.
    pub fn bce_mean(self, target: Rc<ArrayD<f64>>) -> Var<'t> {
        let pv = self.value();
        assert_eq!(pv.shape(), target.shape(), "prediction/target shape");
        let k = pv.len() as f64;
        let ps = pv.as_slice().unwrap();
        let ts = target.as_slice().unwrap();
        let mut acc = 0.0;
        for (&p, &t) in ps.iter().zip(ts) {
            debug_assert!((0.0..=1.0).contains(&t), "target {t} outside [0, 1]");
            acc -= t * p.max(EPS).ln() + (1.0 - t) * (1.0 - p).max(EPS).ln();
        }
        let value = arr0(acc / k).into_dyn();
        let pv2 = pv.clone();
        self.unary(value, move |g| {
            let gs = g[[]];
            let ps = pv2.as_slice().unwrap();
            let ts = target.as_slice().unwrap();
            let mut gx = vec![0.0; ps.len()];
            for ((gi, &p), &t) in gx.iter_mut().zip(ps).zip(ts) {
                let mut d = 0.0;
                if p > EPS {
                    d -= t / p;
                }
                if 1.0 - p > EPS {
                    d += (1.0 - t) / (1.0 - p);
                }
                *gi = gs * d / k;
            }
            ArrayD::from_shape_vec(pv2.dim(), gx).unwrap()
        })
    }

    /// Mean negative log-likelihood over probability rows `[B, L]` with one
    /// target class per row: `-(1/B) * sum_b ln(p[b, t_b])`, floored at `EPS`.
    pub fn ce_pick(self, targets: &[usize]) -> Var<'t> {
        let pv = self.value();
        let shape = pv.shape().to_vec();
        assert_eq!(shape.len(), 2, "expected [B, L] probability rows");
        let (b, l) = (shape[0], shape[1]);
        assert_eq!(targets.len(), b, "one target per row");
        for &t in targets {
            assert!(t < l, "target {t} out of range {l}");
        }
        let ps = pv.as_slice().unwrap();
        let mut acc = 0.0;
        for (row, &t) in ps.chunks(l).zip(targets) {
            acc -= row[t].max(EPS).ln();
        }
        let value = arr0(acc / b as f64).into_dyn();
        let pv2 = pv.clone();
        let targets = targets.to_vec();
        self.unary(value, move |g| {
            let gs = g[[]];
            let ps = pv2.as_slice().unwrap();
            let mut gx = vec![0.0; ps.len()];
            for (bi, &t) in targets.iter().enumerate() {
                let p = ps[bi * l + t];
                if p > EPS {
                    gx[bi * l + t] = -gs / (p * b as f64);
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[b, l]), gx).unwrap()
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

    fn rand_probs(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 0.9 + 0.05)
    }

    #[test]
    fn bce_of_perfect_prediction_is_near_zero() {
        let tape = Tape::new();
        let mut t = ArrayD::zeros(IxDyn(&[2, 3]));
        t[[0, 1]] = 1.0;
        t[[1, 2]] = 1.0;
        let mut p = t.clone();
        p.mapv_inplace(|v| v * 0.9999 + (1.0 - v) * 0.0001);
        let x = tape.leaf(p);
        let loss = x.bce_mean(Rc::new(t));
        assert!(loss.scalar() < 1e-3, "loss {}", loss.scalar());
    }

    #[test]
    fn bce_matches_hand_value() {
        let tape = Tape::new();
        let p = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.8, 0.3]).unwrap());
        let t = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 0.0]).unwrap();
        let loss = p.bce_mean(Rc::new(t));
        let expect = -(0.8f64.ln() + 0.7f64.ln()) / 2.0;
        assert!((loss.scalar() - expect).abs() < 1e-12);
    }

    #[test]
    fn bce_backward_matches_fd() {
        let p = rand_probs(&[3, 4], 1);
        let t = rand_probs(&[3, 4], 2);
        let err = fd_check_op(&[p], move |_, vs| vs[0].bce_mean(Rc::new(t.clone())));
        assert!(err < 1e-7, "bce fd error {err}");
    }

    #[test]
    fn ce_pick_matches_hand_value_and_fd() {
        let tape = Tape::new();
        let p = tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap(),
        );
        let loss = p.ce_pick(&[1, 0]);
        let expect = -(0.5f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((loss.scalar() - expect).abs() < 1e-12);

        let rows = rand_probs(&[3, 5], 3);
        let err = fd_check_op(&[rows], |_, vs| vs[0].ce_pick(&[0, 3, 2]));
        assert!(err < 1e-7, "ce_pick fd error {err}");
    }

    #[test]
    fn softmax_ce_gradient_is_p_minus_onehot() {
        // Through softmax, d(loss)/d(logit) should be (p - onehot) / B.
        let tape = Tape::new();
        let logits = tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![0.2, -0.4, 1.1]).unwrap(),
        );
        let p = logits.softmax_lastdim();
        let loss = p.ce_pick(&[2]);
        tape.backward(loss);
        let g = tape.grad(logits).unwrap();
        let pv = p.value();
        for i in 0..3 {
            let expect = pv[[0, i]] - if i == 2 { 1.0 } else { 0.0 };
            assert!((g[[0, i]] - expect).abs() < 1e-12, "logit grad {i}");
        }
    }
}
