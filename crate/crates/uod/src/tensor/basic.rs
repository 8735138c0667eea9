//! Elementwise and structural primitives.

use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn};

use super::{Tape, Var};

impl Tape {
    /// Sum of several same-shape vars (loss accumulation).
    pub fn add_n<'t>(&'t self, vars: &[Var<'t>]) -> Var<'t> {
        assert!(!vars.is_empty());
        let mut value = (*vars[0].value()).clone();
        for v in &vars[1..] {
            value += &*v.value();
        }
        let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
        self.push(
            value,
            Some(Box::new(move |g| {
                ids.iter().map(|&id| (id, g.clone())).collect()
            })),
        )
    }
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let value = &*self.value() + &*other.value();
        self.binary(other, value, |g| (g.clone(), g.clone()))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let value = &*self.value() - &*other.value();
        self.binary(other, value, |g| (g.clone(), -g))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (av, bv) = (self.value(), other.value());
        let value = &*av * &*bv;
        self.binary(other, value, move |g| (g * &*bv, g * &*av))
    }

    pub fn neg(self) -> Var<'t> {
        let value = -&*self.value();
        self.unary(value, |g| -g)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = &*self.value() * c;
        self.unary(value, move |g| g * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = &*self.value() + c;
        self.unary(value, |g| g.clone())
    }

    pub fn sum_all(self) -> Var<'t> {
        let shape = self.shape();
        let value = ndarray::arr0(self.value().sum()).into_dyn();
        self.unary(value, move |g| {
            ArrayD::from_elem(IxDyn(&shape), g[[]])
        })
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let old: Vec<usize> = self.shape();
        let n_old: usize = old.iter().product();
        let n_new: usize = shape.iter().product();
        assert_eq!(n_old, n_new, "reshape element count mismatch");
        let value = self
            .value()
            .to_shape(IxDyn(shape))
            .expect("reshape")
            .into_owned();
        self.unary(value, move |g| {
            g.to_shape(IxDyn(&old)).expect("reshape back").into_owned()
        })
    }

    /// Concatenate along `axis`.
    pub fn concat(self, other: Var<'t>, axis: usize) -> Var<'t> {
        let (av, bv) = (self.value(), other.value());
        let na = av.shape()[axis];
        let value =
            ndarray::concatenate(Axis(axis), &[av.view(), bv.view()]).expect("concat shapes");
        self.binary(other, value, move |g| {
            let ga = g.index_axis_range(Axis(axis), 0..na);
            let nb = g.shape()[axis];
            let gb = g.index_axis_range(Axis(axis), na..nb);
            (ga, gb)
        })
    }

    /// Select one item along the leading axis: `[N, ...] -> [...]`.
    pub fn index_batch(self, n: usize) -> Var<'t> {
        let v = self.value();
        let shape: Vec<usize> = v.shape().to_vec();
        let value = v.index_axis(Axis(0), n).to_owned();
        self.unary(value, move |g| {
            let mut out = ArrayD::zeros(IxDyn(&shape));
            out.index_axis_mut(Axis(0), n).assign(g);
            out
        })
    }

    pub fn relu(self) -> Var<'t> {
        let xv = self.value();
        let value = xv.mapv(|x| x.max(0.0));
        self.unary(value, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&xv, |gi, &x| {
                if x <= 0.0 {
                    *gi = 0.0
                }
            });
            out
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = self.value().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let yv = Rc::new(value.clone());
        self.unary(value, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&yv, |gi, &y| *gi *= y * (1.0 - y));
            out
        })
    }

    /// GELU with the tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C3: f64 = 0.044715;
        let xv = self.value();
        let value = xv.mapv(|x| {
            let t = (K * (x + C3 * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        self.unary(value, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&xv, |gi, &x| {
                let u = K * (x + C3 * x * x * x);
                let t = u.tanh();
                let du = K * (1.0 + 3.0 * C3 * x * x);
                *gi *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
            });
            out
        })
    }
}

trait IndexAxisRange {
    fn index_axis_range(&self, axis: Axis, range: std::ops::Range<usize>) -> ArrayD<f64>;
}

impl IndexAxisRange for ArrayD<f64> {
    fn index_axis_range(&self, axis: Axis, range: std::ops::Range<usize>) -> ArrayD<f64> {
        use ndarray::Slice;
        self.slice_axis(axis, Slice::from(range)).to_owned()
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
    fn elementwise_backward_matches_fd() {
        let a = randn(&[3, 4], 1);
        let b = randn(&[3, 4], 2);
        let err = fd_check_op(&[a.clone(), b.clone()], |_, vs| {
            vs[0].mul(vs[1]).add(vs[0]).sub(vs[1].scale(0.5)).sum_all()
        });
        assert!(err < 1e-8, "elementwise fd error {err}");
    }

    #[test]
    fn activations_backward_matches_fd() {
        let a = randn(&[2, 5], 3);
        for (name, f) in [
            ("relu", 0usize),
            ("sigmoid", 1),
            ("gelu", 2),
        ] {
            let err = fd_check_op(&[a.clone()], |_, vs| {
                let y = match f {
                    0 => vs[0].add_scalar(0.1).relu(), // keep away from the kink
                    1 => vs[0].sigmoid(),
                    _ => vs[0].gelu(),
                };
                y.mul(y).sum_all()
            });
            assert!(err < 1e-7, "{name} fd error {err}");
        }
    }

    #[test]
    fn concat_and_index_backward_matches_fd() {
        let a = randn(&[2, 3], 4);
        let b = randn(&[2, 2], 5);
        let err = fd_check_op(&[a, b], |_, vs| {
            vs[0]
                .concat(vs[1], 1)
                .index_batch(1)
                .mul(vs[0].index_batch(0).concat(vs[1].index_batch(0), 0))
                .sum_all()
        });
        assert!(err < 1e-8, "concat/index fd error {err}");
    }

    #[test]
    fn reshape_roundtrip_preserves_grad() {
        let a = randn(&[2, 6], 6);
        let err = fd_check_op(&[a], |_, vs| {
            let y = vs[0].reshape(&[3, 4]).mul(vs[0].reshape(&[3, 4])).sum_all();
            y
        });
        assert!(err < 1e-8, "reshape fd error {err}");
    }
}
