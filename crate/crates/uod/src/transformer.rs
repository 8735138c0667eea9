//! Domain-adaptive transformer (DATR): a Swin-style shifted-window encoder
//! built from domain-adaptive blocks, feeding a convolutional U-Net decoder
//! and a fully domain-specific heatmap head.
//!
//! The encoder partitions the image into patches, then runs stages of block
//! pairs (regular + shifted window) with patch merging between stages except
//! the last, emitting per-stage feature maps at strides `patch * 2^s`. The
//! decoder upsamples with skip connections back to patch stride, continues
//! without skips to full resolution, and projects to one sigmoid channel per
//! landmark of the requested domain.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::DomainId;
use crate::nn::attention::{BlockVariant, PatchEmbed, PatchMerge, TransformerBlock};
use crate::nn::layers::{DoubleConv, FinalHead};
use crate::nn::{Ctx, ParamSet};
use crate::tensor::Var;

/// Architecture of the DATR encoder + decoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatrConfig {
    pub in_channels: usize,
    /// Patch side length of the initial embedding (stride of stage 0).
    pub patch: usize,
    /// Embedding dim per stage; must double stage to stage (patch merging).
    pub dims: Vec<usize>,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    /// Which domain-adaptive pieces each block carries.
    pub variant: BlockVariant,
    /// Landmark count per registered domain.
    pub landmarks: Vec<usize>,
    /// Decoder channels for the skip-merge levels, finest first
    /// (one per stage below the bottleneck).
    pub merge_channels: Vec<usize>,
    /// Decoder channels for the no-skip levels from patch stride up to full
    /// resolution; `2^len == patch`.
    pub extra_channels: Vec<usize>,
}

impl DatrConfig {
    /// Small configuration for tests and the synthetic desk pipeline.
    pub fn desk(landmarks: Vec<usize>, variant: BlockVariant) -> Self {
        DatrConfig {
            in_channels: 1,
            patch: 4,
            dims: vec![32, 64, 128, 256],
            heads: 4,
            window: 8,
            mlp_ratio: 4,
            variant,
            landmarks,
            merge_channels: vec![32, 64, 128],
            extra_channels: vec![16, 8],
        }
    }

    pub fn num_domains(&self) -> usize {
        self.landmarks.len()
    }

    pub fn validate(&self) {
        assert!(!self.dims.is_empty(), "need at least one stage");
        assert_eq!(self.merge_channels.len(), self.dims.len() - 1, "one merge level per skip");
        assert!(self.dims.iter().all(|d| d % self.heads == 0), "heads must divide dims");
        for w in self.dims.windows(2) {
            assert_eq!(w[1], 2 * w[0], "dims must double with patch merging");
        }
        assert_eq!(1 << self.extra_channels.len(), self.patch, "extras must reach stride 1");
    }
}

/// The transformer encoder: patch embedding, stages of (regular, shifted)
/// block pairs, patch merging between stages.
pub struct DatrEncoder {
    embed: PatchEmbed,
    stages: Vec<[TransformerBlock; 2]>,
    merges: Vec<PatchMerge>,
}

impl DatrEncoder {
    pub fn new(set: &mut ParamSet, rng: &mut impl Rng, config: &DatrConfig) -> Self {
        let embed = PatchEmbed::new(set, rng, "embed", config.in_channels, config.patch, config.dims[0]);
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for (s, &dim) in config.dims.iter().enumerate() {
            let mut block = |shifted: bool, tag: &str| {
                TransformerBlock::new(
                    set,
                    rng,
                    &format!("stage{s}.{tag}"),
                    dim,
                    config.heads,
                    config.window,
                    config.mlp_ratio,
                    shifted,
                    config.variant,
                    config.num_domains(),
                )
            };
            stages.push([block(false, "reg"), block(true, "shift")]);
            if s + 1 < config.dims.len() {
                merges.push(PatchMerge::new(set, rng, &format!("merge{s}"), dim));
            }
        }
        DatrEncoder { embed, stages, merges }
    }

    /// Per-stage feature maps in `[N, C, h, w]` (finest first) plus every
    /// block's window-attention probabilities.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        x: Var<'t>,
        d: DomainId,
    ) -> (Vec<Var<'t>>, Vec<Var<'t>>) {
        let mut tokens = self.embed.forward(ctx, x);
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut probs = Vec::with_capacity(2 * self.stages.len());
        for (s, pair) in self.stages.iter().enumerate() {
            for block in pair {
                let (t, p) = block.forward(ctx, tokens, d);
                tokens = t;
                probs.push(p);
            }
            feats.push(tokens.to_nchw());
            if s < self.merges.len() {
                tokens = self.merges[s].forward(ctx, tokens);
            }
        }
        (feats, probs)
    }
}

/// Full Stage II network: DATR encoder, skip-connected conv decoder, per-
/// domain heatmap head.
pub struct Stage2Net {
    pub encoder: DatrEncoder,
    dec_merge: Vec<DoubleConv>,
    dec_extra: Vec<DoubleConv>,
    head: FinalHead,
    pub config: DatrConfig,
}

impl Stage2Net {
    pub fn new(set: &mut ParamSet, rng: &mut impl Rng, config: DatrConfig) -> Self {
        config.validate();
        let nd = config.num_domains();
        let encoder = DatrEncoder::new(set, rng, &config);
        let mut dec_merge = Vec::new();
        for i in 0..config.dims.len() - 1 {
            // Upsampled deeper decoder level (or bottleneck) + stage skip.
            let above = if i + 1 < config.merge_channels.len() {
                config.merge_channels[i + 1]
            } else {
                config.dims[config.dims.len() - 1]
            };
            let cin = above + config.dims[i];
            dec_merge.push(DoubleConv::new(
                set,
                rng,
                &format!("dec{i}"),
                cin,
                config.merge_channels[i],
                nd,
            ));
        }
        let mut dec_extra = Vec::new();
        let mut prev = *config.merge_channels.first().unwrap_or(&config.dims[0]);
        for (i, &c) in config.extra_channels.iter().enumerate() {
            dec_extra.push(DoubleConv::new(set, rng, &format!("up{i}"), prev, c, nd));
            prev = c;
        }
        let head = FinalHead::new(set, rng, "head", prev, &config.landmarks);
        Stage2Net { encoder, dec_merge, dec_extra, head, config }
    }

    /// Predict the domain's landmark heatmaps in `[0, 1]` for `[N, C, H, W]`
    /// input; also returns every block's attention probabilities.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        x: Var<'t>,
        d: DomainId,
    ) -> (Var<'t>, Vec<Var<'t>>) {
        let (feats, probs) = self.encoder.forward(ctx, x, d);
        let mut t = *feats.last().unwrap();
        for i in (0..self.dec_merge.len()).rev() {
            let merged = t.upsample_nearest2x().concat(feats[i], 1);
            t = self.dec_merge[i].forward(ctx, merged, d);
        }
        for level in &self.dec_extra {
            t = level.forward(ctx, t.upsample_nearest2x(), d);
        }
        (self.head.forward(ctx, t, d), probs)
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

    fn tiny_config(variant: BlockVariant) -> DatrConfig {
        DatrConfig {
            in_channels: 1,
            patch: 2,
            dims: vec![4, 8],
            heads: 2,
            window: 2,
            mlp_ratio: 2,
            variant,
            landmarks: vec![3, 5],
            merge_channels: vec![4],
            extra_channels: vec![4],
        }
    }

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn forward_shapes_for_all_variants() {
        for variant in [BlockVariant::Base, BlockVariant::D, BlockVariant::Q, BlockVariant::Full] {
            let mut set = ParamSet::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let net = Stage2Net::new(&mut set, &mut rng, tiny_config(variant));
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, true);
            let x = tape.leaf(randn(&[2, 1, 8, 8], 2));
            let (y, probs) = net.forward(&ctx, x, 1);
            assert_eq!(y.shape(), vec![2, 5, 8, 8], "{variant:?}");
            assert_eq!(probs.len(), 4, "two stages of two blocks");
            assert!(y.value().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn attention_probabilities_are_row_stochastic() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Stage2Net::new(&mut set, &mut rng, tiny_config(BlockVariant::Full));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true);
        let x = tape.leaf(randn(&[1, 1, 8, 8], 4));
        let (_, probs) = net.forward(&ctx, x, 0);
        for p in probs {
            let v = p.value();
            let t = *v.shape().last().unwrap();
            for row in v.as_slice().unwrap().chunks(t) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row sums to {s}");
            }
        }
    }

    #[test]
    fn outputs_domain_invariant_at_init() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Full variant: per-domain queries and diagonals all start equal.
        let config = DatrConfig { landmarks: vec![4, 4], ..tiny_config(BlockVariant::Full) };
        let net = Stage2Net::new(&mut set, &mut rng, config);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, false);
        let x = tape.leaf(randn(&[1, 1, 8, 8], 6));
        let (y0, _) = net.forward(&ctx, x, 0);
        let (y1, _) = net.forward(&ctx, x, 1);
        assert_eq!(*y0.value(), *y1.value());
    }

    #[test]
    fn domain_zero_loss_touches_no_domain_one_parameter() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Stage2Net::new(&mut set, &mut rng, tiny_config(BlockVariant::Full));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true);
        let x = tape.leaf(randn(&[1, 1, 8, 8], 8));
        let (y, _) = net.forward(&ctx, x, 0);
        tape.backward(y.mul(y).sum_all());
        for (p, v) in ctx.bound() {
            let p = p.borrow();
            assert!(!p.name.contains(".d1"), "domain-1 param {} was bound", p.name);
            assert!(tape.grad(v).is_some(), "{} missing gradient", p.name);
        }
    }

    #[test]
    fn variant_changes_parameter_count_as_documented() {
        let count = |variant| {
            let mut set = ParamSet::new();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let _ = Stage2Net::new(&mut set, &mut rng, tiny_config(variant));
            set.num_scalars()
        };
        let base = count(BlockVariant::Base);
        let d = count(BlockVariant::D);
        let q = count(BlockVariant::Q);
        let full = count(BlockVariant::Full);
        assert!(d > base, "diagonals add parameters");
        assert!(q > base, "extra per-domain queries add parameters");
        assert_eq!(full - q, d - base, "full = q + diagonals");
    }
}
