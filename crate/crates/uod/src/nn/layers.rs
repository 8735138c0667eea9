//! Building-block layers: the domain adaptor convolution (per-domain
//! depthwise spatial filter + shared pointwise mixing), batch normalization
//! with per-domain running statistics and shared affine, the VGG-style double
//! conv, linear/layer-norm wrappers, and the fully domain-specific prediction
//! head.
//!
//! Per-domain parameter groups are initialized equal across domains, so a
//! freshly constructed model is domain-flag-invariant until training moves
//! the groups apart.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use super::init;
use super::{Ctx, ParamSet, ParamTag, SharedParam};
use crate::domain::DomainId;
use crate::tensor::Var;

/// Convolution as a domain adaptor: a per-domain `k x k` depthwise spatial
/// filter followed by a shared `1 x 1` pointwise mix and shared bias.
pub struct AdaptorConv {
    pub spatial: Vec<SharedParam>,
    pub pointwise: SharedParam,
    pub bias: SharedParam,
}

impl AdaptorConv {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        num_domains: usize,
    ) -> Self {
        let bank = init::he_fan_in(rng, &[in_ch, k, k], k * k);
        let spatial = (0..num_domains)
            .map(|d| set.param(format!("{name}.spatial.d{d}"), ParamTag::Domain(d), bank.clone()))
            .collect();
        let pointwise = set.param(
            format!("{name}.pointwise"),
            ParamTag::Shared,
            init::he_fan_in(rng, &[out_ch, in_ch], in_ch),
        );
        let bias = set.param(format!("{name}.bias"), ParamTag::Shared, init::zeros(&[out_ch]));
        AdaptorConv { spatial, pointwise, bias }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, d: DomainId) -> Var<'t> {
        assert!(d < self.spatial.len(), "unregistered domain {d}");
        x.depthwise_conv(ctx.var(&self.spatial[d]))
            .conv1x1(ctx.var(&self.pointwise))
            .add_bias_channels(ctx.var(&self.bias))
    }
}

/// Batch normalization with shared affine parameters and per-domain running
/// statistics. Training batches update only the current domain's statistics.
pub struct BatchNorm2d {
    pub gamma: SharedParam,
    pub beta: SharedParam,
    pub running: Vec<(SharedParam, SharedParam)>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(set: &mut ParamSet, name: &str, ch: usize, num_domains: usize) -> Self {
        let gamma = set.param(format!("{name}.gamma"), ParamTag::Shared, init::ones(&[ch]));
        let beta = set.param(format!("{name}.beta"), ParamTag::Shared, init::zeros(&[ch]));
        let running = (0..num_domains)
            .map(|d| {
                let mean = set.buffer(
                    format!("{name}.running_mean.d{d}"),
                    ParamTag::Domain(d),
                    init::zeros(&[ch]),
                );
                let var = set.buffer(
                    format!("{name}.running_var.d{d}"),
                    ParamTag::Domain(d),
                    init::ones(&[ch]),
                );
                (mean, var)
            })
            .collect();
        BatchNorm2d { gamma, beta, running, momentum: 0.1, eps: 1e-5 }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, d: DomainId) -> Var<'t> {
        assert!(d < self.running.len(), "unregistered domain {d}");
        let gamma = ctx.var(&self.gamma);
        let beta = ctx.var(&self.beta);
        if ctx.train {
            let (y, mean, var) = x.batchnorm_train(gamma, beta, self.eps);
            let (rm, rv) = &self.running[d];
            let mut rm = rm.borrow_mut();
            let mut rv = rv.borrow_mut();
            for (r, b) in rm.value.iter_mut().zip(&mean) {
                *r = (1.0 - self.momentum) * *r + self.momentum * b;
            }
            for (r, b) in rv.value.iter_mut().zip(&var) {
                *r = (1.0 - self.momentum) * *r + self.momentum * b;
            }
            y
        } else {
            let (rm, rv) = &self.running[d];
            let mean: Vec<f64> = rm.borrow().value.iter().cloned().collect();
            let var: Vec<f64> = rv.borrow().value.iter().cloned().collect();
            x.batchnorm_eval(gamma, beta, &mean, &var, self.eps)
        }
    }
}

/// Two rounds of adaptor conv + batch norm + ReLU at a fixed spatial size.
pub struct DoubleConv {
    conv1: AdaptorConv,
    bn1: BatchNorm2d,
    conv2: AdaptorConv,
    bn2: BatchNorm2d,
}

impl DoubleConv {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        num_domains: usize,
    ) -> Self {
        DoubleConv {
            conv1: AdaptorConv::new(set, rng, &format!("{name}.conv1"), in_ch, out_ch, 3, num_domains),
            bn1: BatchNorm2d::new(set, &format!("{name}.bn1"), out_ch, num_domains),
            conv2: AdaptorConv::new(set, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, num_domains),
            bn2: BatchNorm2d::new(set, &format!("{name}.bn2"), out_ch, num_domains),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, d: DomainId) -> Var<'t> {
        let x = self.bn1.forward(ctx, self.conv1.forward(ctx, x, d), d).relu();
        self.bn2.forward(ctx, self.conv2.forward(ctx, x, d), d).relu()
    }
}

/// Fully-connected layer on the last axis.
pub struct Linear {
    pub weight: SharedParam,
    pub bias: Option<SharedParam>,
}

impl Linear {
    /// Transformer-style initialization (truncated normal 0.02, zero bias).
    pub fn new(
        set: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        Self::with_tag(set, rng, name, in_dim, out_dim, bias, ParamTag::Shared)
    }

    pub fn with_tag(
        set: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        tag: ParamTag,
    ) -> Self {
        let weight = set.param(
            format!("{name}.weight"),
            tag,
            init::trunc_normal(rng, &[in_dim, out_dim], 0.02),
        );
        let bias = bias.then(|| set.param(format!("{name}.bias"), tag, init::zeros(&[out_dim])));
        Linear { weight, bias }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        x.linear(ctx.var(&self.weight), self.bias.as_ref().map(|b| ctx.var(b)))
    }
}

/// Layer normalization over the last axis with learned scale/shift.
pub struct LayerNorm {
    pub gamma: SharedParam,
    pub beta: SharedParam,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(set: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: set.param(format!("{name}.gamma"), ParamTag::Shared, init::ones(&[dim])),
            beta: set.param(format!("{name}.beta"), ParamTag::Shared, init::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        x.layernorm_lastdim(ctx.var(&self.gamma), ctx.var(&self.beta), self.eps)
    }
}

/// Final dense prediction head: a fully domain-specific 1x1 projection to the
/// domain's landmark count, squashed to `[0, 1]` with a sigmoid.
pub struct FinalHead {
    pub weights: Vec<(SharedParam, SharedParam)>,
}

impl FinalHead {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        landmarks_per_domain: &[usize],
    ) -> Self {
        // Domains with the same landmark count share one initial draw, so
        // per-domain groups start equal wherever shapes allow.
        let mut draws: std::collections::HashMap<usize, ndarray::ArrayD<f64>> =
            std::collections::HashMap::new();
        let weights = landmarks_per_domain
            .iter()
            .enumerate()
            .map(|(d, &n)| {
                let base = draws
                    .entry(n)
                    .or_insert_with(|| init::he_fan_in(rng, &[n, in_ch], in_ch))
                    .clone();
                let w = set.param(format!("{name}.weight.d{d}"), ParamTag::Domain(d), base);
                let b = set.param(format!("{name}.bias.d{d}"), ParamTag::Domain(d), init::zeros(&[n]));
                (w, b)
            })
            .collect();
        FinalHead { weights }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, d: DomainId) -> Var<'t> {
        assert!(d < self.weights.len(), "unregistered domain {d}");
        let (w, b) = &self.weights[d];
        x.conv1x1(ctx.var(w)).add_bias_channels(ctx.var(b)).sigmoid()
    }
}

/// Running-statistics handle used by tests to inspect buffer state.
pub type RunningStats = Rc<RefCell<super::Param>>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Ctx;
    use crate::tensor::Tape;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn adaptor_is_domain_invariant_at_init() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = AdaptorConv::new(&mut set, &mut rng, "c", 3, 5, 3, 2);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true);
        let x = tape.leaf(randn(&[2, 3, 6, 6], 2));
        let y0 = conv.forward(&ctx, x, 0);
        let y1 = conv.forward(&ctx, x, 1);
        assert_eq!(*y0.value(), *y1.value());
        assert_eq!(y0.shape(), vec![2, 5, 6, 6]);
    }

    #[test]
    fn adaptor_unused_domain_gets_no_gradient() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = AdaptorConv::new(&mut set, &mut rng, "c", 2, 2, 3, 2);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true);
        let x = tape.leaf(randn(&[1, 2, 4, 4], 4));
        let y = conv.forward(&ctx, x, 0);
        tape.backward(y.mul(y).sum_all());
        let bound = ctx.bound();
        // Domain 1's spatial bank was never bound into the graph.
        assert!(bound.iter().all(|(p, _)| p.borrow().name != "c.spatial.d1"));
        let d0 = bound.iter().find(|(p, _)| p.borrow().name == "c.spatial.d0").unwrap();
        assert!(tape.grad(d0.1).is_some());
    }

    #[test]
    fn batchnorm_updates_only_current_domain_stats() {
        let mut set = ParamSet::new();
        let bn = BatchNorm2d::new(&mut set, "bn", 3, 2);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true);
        let x = tape.leaf(randn(&[4, 3, 5, 5], 5) * 2.0 + 1.0);
        let _ = bn.forward(&ctx, x, 0);
        let (m0, v0) = &bn.running[0];
        let (m1, v1) = &bn.running[1];
        assert!(m0.borrow().value.iter().any(|&v| v != 0.0));
        assert!(v0.borrow().value.iter().any(|&v| v != 1.0));
        assert!(m1.borrow().value.iter().all(|&v| v == 0.0));
        assert!(v1.borrow().value.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut set = ParamSet::new();
        let bn = BatchNorm2d::new(&mut set, "bn", 2, 1);
        // With mean 0, var 1, gamma 1, beta 0 the eval path is the identity
        // up to the epsilon in the denominator.
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, false);
        let x = tape.leaf(randn(&[1, 2, 3, 3], 6));
        let y = bn.forward(&ctx, x, 0);
        let (xv, yv) = (x.value(), y.value());
        for (a, b) in xv.iter().zip(yv.iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn final_head_shapes_and_range() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let head = FinalHead::new(&mut set, &mut rng, "head", 8, &[19, 6]);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true);
        let x = tape.leaf(randn(&[2, 8, 4, 4], 8) * 5.0);
        let y0 = head.forward(&ctx, x, 0);
        let y1 = head.forward(&ctx, x, 1);
        assert_eq!(y0.shape(), vec![2, 19, 4, 4]);
        assert_eq!(y1.shape(), vec![2, 6, 4, 4]);
        assert!(y0.value().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn double_conv_preserves_spatial_size() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dc = DoubleConv::new(&mut set, &mut rng, "dc", 1, 4, 2);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true);
        let x = tape.leaf(randn(&[2, 1, 8, 8], 10));
        let y = dc.forward(&ctx, x, 1);
        assert_eq!(y.shape(), vec![2, 4, 8, 8]);
        assert!(y.value().iter().all(|v| v.is_finite()));
    }
}
