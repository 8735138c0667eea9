//! Adam optimizer with lazy per-parameter state.
//!
//! Moments and step counters are created the first time a parameter receives
//! a gradient and keyed by parameter name. Parameters that a step's graph
//! never reached (other domains' projections, unused heads) get no gradient,
//! no moment update, and no timestep increment — so a later step that does
//! reach them behaves exactly as if the earlier steps had not happened. This
//! is what makes domain isolation bit-exact rather than merely approximate.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::SharedParam;
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }

    /// Apply one update to every bound parameter that received a gradient.
    /// Call after `tape.backward(loss)`; gradients are consumed.
    pub fn step(&mut self, tape: &Tape, bound: &[(SharedParam, Var<'_>)]) {
        for (param, var) in bound {
            let Some(grad) = tape.take_grad(*var) else { continue };
            let mut p = param.borrow_mut();
            let n = p.value.len();
            let entry = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            entry.t += 1;
            let t = entry.t as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let gs = grad.as_slice().unwrap();
            let ps = p.value.as_slice_mut().unwrap();
            for i in 0..n {
                let g = gs[i];
                entry.m[i] = self.beta1 * entry.m[i] + (1.0 - self.beta1) * g;
                entry.v[i] = self.beta2 * entry.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = entry.m[i] / bc1;
                let vhat = entry.v[i] / bc2;
                ps[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Stored moments keyed by parameter name (for checkpointing).
    pub fn state(&self) -> &HashMap<String, Moments> {
        &self.state
    }

    pub fn load_state(&mut self, state: HashMap<String, Moments>) {
        self.state = state;
    }
}

/// Serializable snapshot of a ChaCha8 RNG: seed plus stream position.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Single gradient-descent helper used by tests that need a plain step.
pub fn sgd_step(tape: &Tape, bound: &[(SharedParam, Var<'_>)], lr: f64) {
    for (param, var) in bound {
        let Some(grad) = tape.take_grad(*var) else { continue };
        let mut p = param.borrow_mut();
        let gs = grad.as_slice().unwrap();
        let ps = p.value.as_slice_mut().unwrap();
        for i in 0..ps.len() {
            ps[i] -= lr * gs[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Ctx, ParamSet, ParamTag};
    use crate::tensor::Tape;
    use ndarray::{arr1, ArrayD};
    use rand::{Rng, SeedableRng};

    fn quadratic_step(adam: &mut Adam, set: &ParamSet, use_b: bool) -> ArrayD<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true);
        let a = ctx.var(&set.by_name("a").unwrap());
        let loss = if use_b {
            let b = ctx.var(&set.by_name("b").unwrap());
            a.mul(a).sum_all().add(b.mul(b).sum_all())
        } else {
            a.mul(a).sum_all()
        };
        tape.backward(loss);
        adam.step(&tape, &ctx.bound());
        set.by_name("a").unwrap().borrow().value.clone()
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut set = ParamSet::new();
        set.param("a", ParamTag::Shared, arr1(&[3.0, -2.0]).into_dyn());
        let mut adam = Adam::new(0.1);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let v = quadratic_step(&mut adam, &set, false);
            let norm = v.iter().map(|x| x * x).sum::<f64>();
            assert!(norm <= last + 1e-12, "norm increased: {norm} > {last}");
            last = norm;
        }
        assert!(last < 0.5, "did not descend: {last}");
    }

    #[test]
    fn unreached_params_are_untouched_and_lazy() {
        // Steps that never touch `b` must not advance its timestep: after two
        // a-only steps, a step touching both must treat `b` as t=1.
        let mut set = ParamSet::new();
        set.param("a", ParamTag::Shared, arr1(&[1.0]).into_dyn());
        set.param("b", ParamTag::Domain(1), arr1(&[4.0]).into_dyn());
        let mut adam = Adam::new(0.01);
        quadratic_step(&mut adam, &set, false);
        quadratic_step(&mut adam, &set, false);
        assert_eq!(
            set.by_name("b").unwrap().borrow().value,
            arr1(&[4.0]).into_dyn(),
            "unused parameter moved"
        );
        assert!(!adam.state().contains_key("b"));
        quadratic_step(&mut adam, &set, true);
        assert_eq!(adam.state()["b"].t, 1);
        assert_eq!(adam.state()["a"].t, 3);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // With bias correction, the first Adam step is lr * g / (|g| + eps).
        let mut set = ParamSet::new();
        set.param("a", ParamTag::Shared, arr1(&[2.0]).into_dyn());
        let mut adam = Adam::new(0.1);
        quadratic_step(&mut adam, &set, false); // grad = 2a = 4
        let got = set.by_name("a").unwrap().borrow().value[[0]];
        let expect = 2.0 - 0.1 * 4.0 / (4.0 + 1e-8);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn rng_state_roundtrip_continues_identically() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..7 {
            let _: f64 = rng.random();
        }
        let state = RngState::capture(&rng);
        let a: Vec<f64> = (0..5).map(|_| rng.random()).collect();
        let mut restored = state.restore();
        let b: Vec<f64> = (0..5).map(|_| restored.random()).collect();
        assert_eq!(a, b);
    }
}
