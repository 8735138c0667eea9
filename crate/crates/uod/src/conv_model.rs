//! Domain-adaptive convolutional U-Net.
//!
//! The encoder is a VGG-style stack of double convolutions with 2x max-pool
//! between levels; the decoder mirrors it with nearest-neighbor upsampling
//! and skip connections. Every convolution is a domain adaptor (per-domain
//! depthwise spatial filter + shared pointwise mix), and batch-norm running
//! statistics are kept per domain, so the parameter partition into shared and
//! domain-specific groups is exact.
//!
//! [`Stage1Net::embed`] yields the multi-scale feature pyramid used by the
//! contrastive matcher: decoder features at strides 1/2/4/8 plus the encoder
//! bottleneck at stride 16, finest first. [`Stage1Net::decode`] additionally
//! applies the fully domain-specific prediction head, producing one sigmoid
//! heatmap channel per landmark of the requested domain.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::DomainId;
use crate::nn::layers::{DoubleConv, FinalHead};
use crate::nn::{Ctx, ParamSet};
use crate::tensor::Var;

/// Architecture of the convolutional U-Net.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvNetConfig {
    /// Input image channels (grayscale inputs are replicated by the caller).
    pub in_channels: usize,
    /// Channel width per encoder level, finest first; the pyramid has
    /// `channels.len()` scales at strides `1, 2, 4, ...`.
    pub channels: Vec<usize>,
    /// Landmark count per registered domain (head output channels).
    pub landmarks: Vec<usize>,
}

impl ConvNetConfig {
    /// Small configuration for tests and the synthetic desk pipeline.
    pub fn desk(landmarks: Vec<usize>) -> Self {
        ConvNetConfig { in_channels: 1, channels: vec![16, 32, 64, 128, 256], landmarks }
    }

    pub fn num_domains(&self) -> usize {
        self.landmarks.len()
    }

    /// Stride of each pyramid scale, finest first.
    pub fn strides(&self) -> Vec<usize> {
        (0..self.channels.len()).map(|i| 1 << i).collect()
    }

    /// Smallest input side length the pooling schedule supports.
    pub fn min_input(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

/// Siamese Stage I network: shared-weight encoder/decoder applied to both the
/// full image and the augmented patch.
pub struct Stage1Net {
    enc: Vec<DoubleConv>,
    dec: Vec<DoubleConv>,
    head: FinalHead,
    pub config: ConvNetConfig,
}

impl Stage1Net {
    pub fn new(set: &mut ParamSet, rng: &mut impl Rng, config: ConvNetConfig) -> Self {
        assert!(config.channels.len() >= 2, "need at least two scales");
        let nd = config.num_domains();
        let ch = &config.channels;
        let mut enc = Vec::new();
        for (i, &c) in ch.iter().enumerate() {
            let cin = if i == 0 { config.in_channels } else { ch[i - 1] };
            enc.push(DoubleConv::new(set, rng, &format!("enc{i}"), cin, c, nd));
        }
        // Decoder level i refines stride 2^i from the level below plus the
        // encoder skip at the same stride.
        let mut dec = Vec::new();
        for i in 0..ch.len() - 1 {
            let cin = ch[i] + ch[i + 1];
            dec.push(DoubleConv::new(set, rng, &format!("dec{i}"), cin, ch[i], nd));
        }
        let head = FinalHead::new(set, rng, "head", ch[0], &config.landmarks);
        Stage1Net { enc, dec, head, config }
    }

    /// Encoder features per level, finest first (strides `1, 2, 4, ...`).
    fn encode<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, d: DomainId) -> Vec<Var<'t>> {
        let mut feats = Vec::with_capacity(self.enc.len());
        let mut t = x;
        for (i, level) in self.enc.iter().enumerate() {
            if i > 0 {
                t = t.maxpool2x2();
            }
            t = level.forward(ctx, t, d);
            feats.push(t);
        }
        feats
    }

    /// Multi-scale embedding pyramid, finest first: decoder features at
    /// strides `1 .. 2^(S-2)` plus the raw encoder bottleneck at `2^(S-1)`.
    pub fn embed<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, d: DomainId) -> Vec<Var<'t>> {
        let enc = self.encode(ctx, x, d);
        let bottleneck = *enc.last().unwrap();
        let mut up = bottleneck;
        let mut scales = vec![bottleneck];
        for i in (0..self.dec.len()).rev() {
            let merged = up.upsample_nearest2x().concat(enc[i], 1);
            up = self.dec[i].forward(ctx, merged, d);
            scales.push(up);
        }
        scales.reverse();
        scales
    }

    /// Full decode to the domain's landmark heatmaps in `[0, 1]`.
    pub fn decode<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, d: DomainId) -> Var<'t> {
        let finest = self.embed(ctx, x, d)[0];
        self.head.forward(ctx, finest, d)
    }

    /// Pyramid strides, finest first.
    pub fn strides(&self) -> Vec<usize> {
        self.config.strides()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Ctx;
    use crate::tensor::Tape;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ConvNetConfig {
        ConvNetConfig { in_channels: 1, channels: vec![4, 8, 16], landmarks: vec![3, 5] }
    }

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn pyramid_shapes_follow_stride_schedule() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Stage1Net::new(&mut set, &mut rng, tiny_config());
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true);
        let x = tape.leaf(randn(&[2, 1, 16, 16], 2));
        let scales = net.embed(&ctx, x, 0);
        assert_eq!(scales.len(), 3);
        assert_eq!(scales[0].shape(), vec![2, 4, 16, 16]);
        assert_eq!(scales[1].shape(), vec![2, 8, 8, 8]);
        assert_eq!(scales[2].shape(), vec![2, 16, 4, 4]);
        // Half-size (siamese patch) input walks the same schedule.
        let p = tape.leaf(randn(&[2, 1, 8, 8], 3));
        let pscales = net.embed(&ctx, p, 0);
        assert_eq!(pscales[0].shape(), vec![2, 4, 8, 8]);
        assert_eq!(pscales[2].shape(), vec![2, 16, 2, 2]);
    }

    #[test]
    fn zero_image_embeds_finite() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Stage1Net::new(&mut set, &mut rng, tiny_config());
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, false);
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[1, 1, 16, 16])));
        for s in net.embed(&ctx, x, 1) {
            assert!(s.value().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn outputs_domain_invariant_at_init() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Stage1Net::new(&mut set, &mut rng, tiny_config());
        let tape = Tape::new();
        // Eval mode: batch-norm running stats also start equal across domains.
        let ctx = Ctx::new(&tape, false);
        let x = tape.leaf(randn(&[1, 1, 16, 16], 6));
        let a = net.embed(&ctx, x, 0);
        let b = net.embed(&ctx, x, 1);
        for (s0, s1) in a.iter().zip(&b) {
            assert_eq!(*s0.value(), *s1.value());
        }
    }

    #[test]
    fn decode_emits_domain_landmark_channels_in_unit_range() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Stage1Net::new(&mut set, &mut rng, tiny_config());
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true);
        let x = tape.leaf(randn(&[1, 1, 16, 16], 8));
        let y0 = net.decode(&ctx, x, 0);
        let y1 = net.decode(&ctx, x, 1);
        assert_eq!(y0.shape(), vec![1, 3, 16, 16]);
        assert_eq!(y1.shape(), vec![1, 5, 16, 16]);
        assert!(y0.value().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn domain_zero_loss_reaches_no_domain_one_parameter() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Stage1Net::new(&mut set, &mut rng, tiny_config());
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true);
        let x = tape.leaf(randn(&[1, 1, 16, 16], 10));
        let y = net.decode(&ctx, x, 0);
        tape.backward(y.mul(y).sum_all());
        for (p, v) in ctx.bound() {
            let p = p.borrow();
            assert!(!p.name.contains(".d1"), "domain-1 param {} was bound", p.name);
            assert!(tape.grad(v).is_some(), "{} missing gradient", p.name);
        }
    }

    #[test]
    fn construction_is_deterministic_under_seed() {
        let build = || {
            let mut set = ParamSet::new();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let _net = Stage1Net::new(&mut set, &mut rng, tiny_config());
            set.snapshot()
        };
        let (a, b) = (build(), build());
        assert_eq!(a.len(), b.len());
        for (name, v) in &a {
            assert_eq!(v, &b[name], "{name} differs between identically seeded builds");
        }
    }
}
