//! Stage I: self-supervised contrastive matching.
//!
//! A siamese convolutional U-Net embeds a full image and an augmented
//! half-size patch of it. For a target point `P` inside the crop, the patch
//! feature at the mapped location `P_p` is the query; its cosine similarity
//! against every image-feature location, softmax-normalized per scale, forms
//! the [`ProbabilityMaps`]. Training minimizes cross-entropy between each
//! scale's map and the one-hot cell `⌊P / stride⌋` on the image grid, summed
//! over scales.
//!
//! Inference crops a patch around each annotated landmark of the one-shot
//! image, matches it into every unlabeled image, fuses scales by multiplying
//! bilinearly-upsampled maps, and takes the argmax as the pseudo landmark;
//! the fused peak value is its confidence.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn, s};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv_model::{ConvNetConfig, Stage1Net};
use crate::data::resize_with_landmarks;
use crate::domain::{DomainId, DomainRegistry, DomainSpec, ImageRecord};
use crate::error::{Result, UodError};
use crate::nn::adam::Adam;
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::{Ctx, ParamSet};
use crate::tensor::{Tape, Var};

const NORM_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Patch sampling & augmentation
// ---------------------------------------------------------------------------

/// Ranges for the random patch augmentation: affine (rotation, isotropic
/// scale, translation) plus intensity gamma jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub rotation_deg: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Translation bound as a fraction of the patch side.
    pub translate_frac: f64,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            rotation_deg: 10.0,
            scale_lo: 0.9,
            scale_hi: 1.1,
            translate_frac: 0.05,
            gamma_lo: 0.8,
            gamma_hi: 1.25,
        }
    }
}

impl AugmentRanges {
    /// Ranges that collapse to the identity transform.
    pub fn identity() -> Self {
        AugmentRanges {
            rotation_deg: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
            translate_frac: 0.0,
            gamma_lo: 1.0,
            gamma_hi: 1.0,
        }
    }
}

/// One sampled augmentation: `A(p) = c + t + s·R_θ·(p − c)` around the patch
/// center `c`, followed by `v ↦ v^γ` on intensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation: f64, // radians
    pub scale: f64,
    pub translation: (f64, f64), // (rows, cols) px
    pub gamma: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams { rotation: 0.0, scale: 1.0, translation: (0.0, 0.0), gamma: 1.0 }
    }

    fn sample(rng: &mut ChaCha8Rng, ranges: &AugmentRanges, patch: (usize, usize)) -> Self {
        let uni = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let rot_max = ranges.rotation_deg.to_radians();
        let t_max = (
            ranges.translate_frac * patch.0 as f64,
            ranges.translate_frac * patch.1 as f64,
        );
        AugmentParams {
            rotation: uni(rng, -rot_max, rot_max),
            scale: uni(rng, ranges.scale_lo, ranges.scale_hi),
            translation: (uni(rng, -t_max.0, t_max.0), uni(rng, -t_max.1, t_max.1)),
            gamma: uni(rng, ranges.gamma_lo, ranges.gamma_hi),
        }
    }

    /// Map a point from raw-patch coordinates through the affine.
    pub fn map_point(&self, p: (f64, f64), patch: (usize, usize)) -> (f64, f64) {
        let c = ((patch.0 as f64 - 1.0) / 2.0, (patch.1 as f64 - 1.0) / 2.0);
        let (di, dj) = (p.0 - c.0, p.1 - c.1);
        let (sin, cos) = self.rotation.sin_cos();
        (
            c.0 + self.translation.0 + self.scale * (cos * di - sin * dj),
            c.1 + self.translation.1 + self.scale * (cos * dj + sin * di),
        )
    }

    /// Warp a `(C, h, w)` patch: each output pixel samples the input at the
    /// inverse-mapped location (bilinear, edge clamp), then gamma is applied.
    /// The identity parameters reproduce the input bit-exactly.
    pub fn apply(&self, patch: &Array3<f64>) -> Array3<f64> {
        let (ch, h, w) = patch.dim();
        let c = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sin, cos) = self.rotation.sin_cos();
        let inv_s = 1.0 / self.scale;
        let mut out = Array3::zeros((ch, h, w));
        for k in 0..ch {
            for oi in 0..h {
                for oj in 0..w {
                    // Inverse affine: p = c + R_{-θ}·((o − c − t)/s).
                    let di = (oi as f64 - c.0 - self.translation.0) * inv_s;
                    let dj = (oj as f64 - c.1 - self.translation.1) * inv_s;
                    let si = (c.0 + cos * di + sin * dj).clamp(0.0, (h - 1) as f64);
                    let sj = (c.1 + cos * dj - sin * di).clamp(0.0, (w - 1) as f64);
                    let (i0, j0) = (si.floor() as usize, sj.floor() as usize);
                    let (i1, j1) = ((i0 + 1).min(h - 1), (j0 + 1).min(w - 1));
                    let (fi, fj) = (si - i0 as f64, sj - j0 as f64);
                    let top = patch[(k, i0, j0)] + (patch[(k, i0, j1)] - patch[(k, i0, j0)]) * fj;
                    let bot = patch[(k, i1, j0)] + (patch[(k, i1, j1)] - patch[(k, i1, j0)]) * fj;
                    let v: f64 = top + (bot - top) * fi;
                    out[(k, oi, oj)] = if self.gamma == 1.0 { v } else { v.max(0.0).powf(self.gamma) };
                }
            }
        }
        out
    }
}

/// A half-size crop with its target point before and after augmentation.
#[derive(Debug, Clone)]
pub struct PatchSample {
    /// Augmented `(C, H/2, W/2)` patch.
    pub patch: Array3<f64>,
    /// Target point `P` in full-image pixels; always inside the crop window.
    pub source_point: (f64, f64),
    /// `P_p = A(P − crop_origin)`; always inside the augmented patch.
    pub mapped_point: (f64, f64),
    pub crop_origin: (usize, usize),
    pub augment: AugmentParams,
}

/// Draw a training patch: `P` uniform over the image, crop origin uniform
/// among the half-size windows containing `P`, then a random augmentation.
/// Draws are rejected until `P_p` lands inside the patch (the identity
/// augmentation with a centered crop always does, so the loop terminates).
pub fn sample_patch(
    image: &ImageRecord,
    rng: &mut ChaCha8Rng,
    ranges: &AugmentRanges,
) -> Result<PatchSample> {
    let (h, w) = image.size();
    if h < 2 || w < 2 {
        return Err(UodError::shape(format!("image {h}x{w} too small to crop")));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(UodError::shape(format!(
            "Stage I image sides must be even, got {h}x{w}"
        )));
    }
    let (ph, pw) = (h / 2, w / 2);
    let p = (
        rng.random::<f64>() * (h - 1) as f64,
        rng.random::<f64>() * (w - 1) as f64,
    );
    let origin_range = |coord: f64, side: usize, full: usize| -> (usize, usize) {
        let lo = (coord - (side as f64 - 1.0)).ceil().max(0.0) as usize;
        let hi = (coord.floor() as usize).min(full - side);
        (lo.min(hi), hi)
    };
    let (ilo, ihi) = origin_range(p.0, ph, h);
    let (jlo, jhi) = origin_range(p.1, pw, w);
    for attempt in 0..64 {
        let origin = (
            rng.random_range(ilo..=ihi),
            rng.random_range(jlo..=jhi),
        );
        let augment = if attempt == 63 {
            AugmentParams::identity()
        } else {
            AugmentParams::sample(rng, ranges, (ph, pw))
        };
        let in_patch = (p.0 - origin.0 as f64, p.1 - origin.1 as f64);
        let mapped = augment.map_point(in_patch, (ph, pw));
        if mapped.0 >= 0.0
            && mapped.0 <= (ph - 1) as f64
            && mapped.1 >= 0.0
            && mapped.1 <= (pw - 1) as f64
        {
            let crop = image
                .pixels
                .slice(s![.., origin.0..origin.0 + ph, origin.1..origin.1 + pw])
                .to_owned();
            return Ok(PatchSample {
                patch: augment.apply(&crop),
                source_point: p,
                mapped_point: mapped,
                crop_origin: origin,
                augment,
            });
        }
    }
    unreachable!("identity augmentation with a containing crop always lands inside");
}

// ---------------------------------------------------------------------------
// Similarity maps & matching loss
// ---------------------------------------------------------------------------

/// Per-scale probability maps over the full-image feature grid. Every scale
/// is non-negative and sums to 1 (softmax output), stored as `[1, h·w]` rows.
pub struct ProbabilityMaps<'t> {
    maps: Vec<Var<'t>>,
    dims: Vec<(usize, usize)>,
    strides: Vec<usize>,
}

impl<'t> ProbabilityMaps<'t> {
    /// Assemble from raw `[1, h·w]` rows. Intended for fixtures; the rows are
    /// shape-checked but not re-normalized.
    pub fn from_raw(
        maps: Vec<Var<'t>>,
        dims: Vec<(usize, usize)>,
        strides: Vec<usize>,
    ) -> Result<Self> {
        if maps.len() != dims.len() || maps.len() != strides.len() || maps.is_empty() {
            return Err(UodError::shape("maps, dims, and strides must align"));
        }
        for (m, &(h, w)) in maps.iter().zip(&dims) {
            if m.shape() != [1, h * w] {
                return Err(UodError::shape(format!(
                    "map shape {:?} does not match grid {h}x{w}",
                    m.shape()
                )));
            }
        }
        Ok(ProbabilityMaps { maps, dims, strides })
    }

    pub fn num_scales(&self) -> usize {
        self.maps.len()
    }

    pub fn stride(&self, s: usize) -> usize {
        self.strides[s]
    }

    pub fn dim(&self, s: usize) -> (usize, usize) {
        self.dims[s]
    }

    pub fn map_var(&self, s: usize) -> Var<'t> {
        self.maps[s]
    }

    /// Detach scale `s` to a plain `(h, w)` array.
    pub fn map_array(&self, s: usize) -> Array2<f64> {
        let (h, w) = self.dims[s];
        let v = self.maps[s].value();
        Array2::from_shape_vec((h, w), v.as_slice().unwrap().to_vec()).unwrap()
    }
}

/// Softmaxed cosine rows for one scale: queries picked from the patch grid
/// at `sites`, matched against every image-feature location. Returns
/// `[B, h·w]` rows summing to 1.
fn scale_probability_rows<'t>(
    img_feat: Var<'t>,
    patch_feat: Var<'t>,
    sites: &[(usize, usize)],
) -> Var<'t> {
    let (h, w) = (img_feat.shape()[2], img_feat.shape()[3]);
    let b = img_feat.shape()[0];
    let queries = patch_feat.pick_spatial(sites).l2_normalize_axis1(NORM_EPS);
    let cosine = img_feat.l2_normalize_axis1(NORM_EPS).channel_dot(queries);
    cosine.reshape(&[b, h * w]).softmax_lastdim()
}

/// Grid cell of a pixel point at a given stride.
fn grid_site(p: (f64, f64), stride: usize, grid: (usize, usize)) -> Result<(usize, usize)> {
    if p.0 < 0.0 || p.1 < 0.0 {
        return Err(UodError::shape(format!("point ({}, {}) negative", p.0, p.1)));
    }
    let site = ((p.0 / stride as f64) as usize, (p.1 / stride as f64) as usize);
    if site.0 >= grid.0 || site.1 >= grid.1 {
        return Err(UodError::shape(format!(
            "query location {:?} outside {}x{} feature grid",
            site, grid.0, grid.1
        )));
    }
    Ok(site)
}

/// Temperature-free matching distribution of one query against one image.
/// `img_feats`/`patch_feats` are same-encoder pyramids (finest first) and
/// `p_p` is the query point in augmented-patch pixels.
pub fn similarity_maps<'t>(
    img_feats: &[Var<'t>],
    patch_feats: &[Var<'t>],
    strides: &[usize],
    p_p: (f64, f64),
) -> Result<ProbabilityMaps<'t>> {
    if img_feats.len() != patch_feats.len() || img_feats.len() != strides.len() {
        return Err(UodError::shape("feature pyramids must have equal depth"));
    }
    let mut maps = Vec::new();
    let mut dims = Vec::new();
    for ((&img, &patch), &stride) in img_feats.iter().zip(patch_feats).zip(strides) {
        let pgrid = (patch.shape()[2], patch.shape()[3]);
        let site = grid_site(p_p, stride, pgrid)?;
        maps.push(scale_probability_rows(img, patch, &[site]));
        dims.push((img.shape()[2], img.shape()[3]));
    }
    Ok(ProbabilityMaps { maps, dims, strides: strides.to_vec() })
}

/// Cross-entropy between every scale's map and the one-hot cell
/// `⌊P / stride⌋` on the image grid, summed over scales.
pub fn matching_loss<'t>(
    maps: &ProbabilityMaps<'t>,
    p: (f64, f64),
    image_size: (usize, usize),
) -> Result<Var<'t>> {
    if p.0 < 0.0 || p.1 < 0.0 || p.0 > (image_size.0 - 1) as f64 || p.1 > (image_size.1 - 1) as f64
    {
        return Err(UodError::shape(format!(
            "target point ({}, {}) outside {}x{} image",
            p.0, p.1, image_size.0, image_size.1
        )));
    }
    let mut total: Option<Var<'t>> = None;
    for s in 0..maps.num_scales() {
        let grid = maps.dim(s);
        let site = grid_site(p, maps.stride(s), grid)?;
        let map = maps.map_var(s);
        let peak = map.value().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(peak > 0.0) {
            return Err(UodError::numeric(format!(
                "degenerate probability map at scale {s}: max value {peak}"
            )));
        }
        let ce = map.ce_pick(&[site.0 * grid.1 + site.1]);
        total = Some(match total {
            None => ce,
            Some(t) => t.add(ce),
        });
    }
    Ok(total.expect("ProbabilityMaps is never empty"))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Config {
    pub image_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Encoder channel schedule of the universal conv model.
    pub channels: Vec<usize>,
    pub augment: AugmentRanges,
}

impl Default for Stage1Config {
    /// Full-scale defaults: 384×384 inputs, batch 8, lr 1e-5.
    fn default() -> Self {
        Stage1Config {
            image_size: 384,
            batch_size: 8,
            epochs: 1000,
            lr: 1e-5,
            seed: 0,
            channels: vec![16, 32, 64, 128, 256],
            augment: AugmentRanges::default(),
        }
    }
}

impl Stage1Config {
    /// Desk-scale configuration: 64×64 synthetic images, short schedule, and
    /// a learning rate rescaled for the far smaller step budget.
    pub fn desk(seed: u64) -> Self {
        Stage1Config {
            image_size: 64,
            batch_size: 8,
            epochs: 30,
            lr: 3e-4,
            seed,
            channels: vec![16, 32, 64, 128, 256],
            augment: AugmentRanges::default(),
        }
    }
}

pub struct Stage1Artifacts {
    pub params: ParamSet,
    pub net: Stage1Net,
    /// Mean matching loss per epoch.
    pub loss_curve: Vec<f64>,
}

pub(crate) fn stack_batch(images: &[&Array3<f64>]) -> ArrayD<f64> {
    let (c, h, w) = images[0].dim();
    let mut out = ArrayD::zeros(IxDyn(&[images.len(), c, h, w]));
    for (b, img) in images.iter().enumerate() {
        out.slice_mut(s![b, .., .., ..]).assign(img);
    }
    out
}

/// Train the siamese universal conv model on mixed multi-domain data with
/// domain-homogeneous batches in round-robin domain order. Deterministic for
/// a fixed config; aborts with a diagnostic on non-finite loss.
pub fn train_stage1(
    config: &Stage1Config,
    registry: &DomainRegistry,
    train: &[Vec<ImageRecord>],
) -> Result<Stage1Artifacts> {
    if registry.is_empty() || train.len() != registry.len() {
        return Err(UodError::config("one training set per registered domain required"));
    }
    if train.iter().any(|t| t.is_empty()) {
        return Err(UodError::data("a domain has no training images"));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(UodError::config("batch size and epochs must be positive"));
    }
    let size = config.image_size;
    let mut resized: Vec<Vec<ImageRecord>> = Vec::new();
    for records in train {
        resized.push(
            records
                .iter()
                .map(|r| resize_with_landmarks(r, (size, size)))
                .collect::<Result<_>>()?,
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let landmarks: Vec<usize> = registry.iter().map(|spec| spec.num_landmarks).collect();
    let net_config = ConvNetConfig {
        in_channels: 1,
        channels: config.channels.clone(),
        landmarks,
    };
    if size < net_config.min_input() {
        return Err(UodError::config(format!(
            "image size {size} below the pyramid minimum {}",
            net_config.min_input()
        )));
    }
    let mut params = ParamSet::new();
    let net = Stage1Net::new(&mut params, &mut rng, net_config);
    let strides = net.strides();
    let mut adam = Adam::new(config.lr);
    let mut loss_curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        // Shuffle each domain, then interleave domain-homogeneous batches.
        let mut queues: Vec<Vec<usize>> = resized
            .iter()
            .map(|records| {
                let mut order: Vec<usize> = (0..records.len()).collect();
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.random_range(0..=i));
                }
                order
            })
            .collect();
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        loop {
            let mut any = false;
            for (d, queue) in queues.iter_mut().enumerate() {
                if queue.is_empty() {
                    continue;
                }
                any = true;
                let take = queue.len().min(config.batch_size);
                let batch: Vec<usize> = queue.drain(..take).collect();
                let records = &resized[d];

                let mut patches = Vec::with_capacity(batch.len());
                for &bi in &batch {
                    patches.push(sample_patch(&records[bi], &mut rng, &config.augment)?);
                }
                let images: Vec<&Array3<f64>> =
                    batch.iter().map(|&bi| &records[bi].pixels).collect();
                let patch_arrays: Vec<&Array3<f64>> =
                    patches.iter().map(|p| &p.patch).collect();

                let tape = Tape::new();
                let ctx = Ctx::new(&tape, true);
                let x = tape.leaf(stack_batch(&images));
                let xp = tape.leaf(stack_batch(&patch_arrays));
                let img_feats = net.embed(&ctx, x, d);
                let patch_feats = net.embed(&ctx, xp, d);

                let mut total: Option<Var> = None;
                for ((img, patch), &stride) in
                    img_feats.iter().zip(&patch_feats).zip(&strides)
                {
                    let pgrid = (patch.shape()[2], patch.shape()[3]);
                    let igrid = (img.shape()[2], img.shape()[3]);
                    let mut sites = Vec::with_capacity(patches.len());
                    let mut targets = Vec::with_capacity(patches.len());
                    for ps in &patches {
                        sites.push(grid_site(ps.mapped_point, stride, pgrid)?);
                        let t = grid_site(ps.source_point, stride, igrid)?;
                        targets.push(t.0 * igrid.1 + t.1);
                    }
                    let rows = scale_probability_rows(*img, *patch, &sites);
                    let ce = rows.ce_pick(&targets);
                    total = Some(match total {
                        None => ce,
                        Some(acc) => acc.add(ce),
                    });
                }
                let loss = total.expect("pyramid is non-empty");
                let loss_value = loss.scalar();
                if !loss_value.is_finite() {
                    return Err(UodError::numeric(format!(
                        "matching loss diverged at epoch {epoch} step {steps}: {loss_value}"
                    )));
                }
                tape.backward(loss);
                adam.step(&tape, &ctx.bound());
                epoch_loss += loss_value;
                steps += 1;
            }
            if !any {
                break;
            }
        }
        loss_curve.push(epoch_loss / steps as f64);
    }
    Ok(Stage1Artifacts { params, net, loss_curve })
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// A trained matcher loaded from a checkpoint, ready for pseudo-labeling.
pub struct Stage1Model {
    pub params: ParamSet,
    pub net: Stage1Net,
    pub config: Stage1Config,
    pub domains: Vec<DomainSpec>,
    pub loss_curve: Vec<f64>,
}

/// Write a trained Stage I model (atomic: temp file then rename).
pub fn save_stage1(
    path: &Path,
    artifacts: &Stage1Artifacts,
    config: &Stage1Config,
    domains: &[DomainSpec],
) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "stage1-model",
        "config": serde_json::to_value(config)
            .map_err(|e| UodError::checkpoint(format!("config encode: {e}")))?,
        "arch": serde_json::to_value(&artifacts.net.config)
            .map_err(|e| UodError::checkpoint(format!("arch encode: {e}")))?,
        "domains": serde_json::to_value(domains)
            .map_err(|e| UodError::checkpoint(format!("domains encode: {e}")))?,
        "loss_curve": artifacts.loss_curve,
    });
    let tmp = path.with_extension("ckpt.tmp");
    save_checkpoint(&tmp, &artifacts.params, None, meta)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a model written by [`save_stage1`].
pub fn load_stage1(path: &Path) -> Result<Stage1Model> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.meta["kind"] != "stage1-model" {
        return Err(UodError::checkpoint(format!(
            "expected a stage1-model checkpoint, found kind {}",
            ckpt.meta["kind"]
        )));
    }
    let config: Stage1Config = serde_json::from_value(ckpt.meta["config"].clone())
        .map_err(|e| UodError::checkpoint(format!("config decode: {e}")))?;
    let arch: ConvNetConfig = serde_json::from_value(ckpt.meta["arch"].clone())
        .map_err(|e| UodError::checkpoint(format!("arch decode: {e}")))?;
    let domains: Vec<DomainSpec> = serde_json::from_value(ckpt.meta["domains"].clone())
        .map_err(|e| UodError::checkpoint(format!("domains decode: {e}")))?;
    let loss_curve: Vec<f64> = serde_json::from_value(ckpt.meta["loss_curve"].clone())
        .map_err(|e| UodError::checkpoint(format!("loss curve decode: {e}")))?;
    let mut params = ParamSet::new();
    let net = Stage1Net::new(&mut params, &mut ChaCha8Rng::seed_from_u64(0), arch);
    ckpt.load_into(&params)?;
    Ok(Stage1Model { params, net, config, domains, loss_curve })
}

// ---------------------------------------------------------------------------
// Pseudo-label inference
// ---------------------------------------------------------------------------

/// Multiply per-scale maps after bilinear upsampling to `out_size`. Peaks
/// that agree across scales reinforce; the fused argmax is the consensus.
pub fn fuse_probability_maps(
    maps: &[Array2<f64>],
    out_size: (usize, usize),
) -> Result<Array2<f64>> {
    if maps.is_empty() {
        return Err(UodError::shape("no maps to fuse"));
    }
    let mut fused = Array2::<f64>::ones(out_size);
    for map in maps {
        let (h, w) = map.dim();
        let up = if (h, w) == out_size {
            map.clone()
        } else {
            let as3 = Array3::from_shape_vec((1, h, w), map.iter().cloned().collect())
                .expect("map is contiguous");
            let resized = crate::data::resize_image(&as3, out_size)?;
            resized.index_axis_move(Axis(0), 0)
        };
        fused *= &up;
    }
    Ok(fused)
}

fn argmax2(map: &Array2<f64>) -> (usize, usize, f64) {
    let mut best = (0, 0, f64::NEG_INFINITY);
    for ((i, j), &v) in map.indexed_iter() {
        if v > best.2 {
            best = (i, j, v);
        }
    }
    best
}

/// One pseudo landmark: estimated coordinates plus the fused peak value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub coord: (f64, f64),
    pub confidence: f64,
}

/// Pseudo labels for every unlabeled training image of one domain, plus the
/// provenance needed to reproduce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelStore {
    pub domain_id: DomainId,
    pub domain_name: String,
    pub oneshot_id: String,
    pub checkpoint_hash: String,
    /// Landmarks whose one-shot crop had to be clamped at the image border
    /// (the patch is then centered as close to the landmark as possible).
    pub clamped_landmarks: Vec<usize>,
    /// image_id → per-landmark estimates, in landmark order.
    pub entries: BTreeMap<String, Vec<PseudoLabel>>,
}

#[derive(Serialize, Deserialize)]
struct StoreManifest {
    domain_id: DomainId,
    domain_name: String,
    oneshot_id: String,
    checkpoint_hash: String,
    clamped_landmarks: Vec<usize>,
    num_landmarks: usize,
    num_images: usize,
}

impl PseudoLabelStore {
    /// Persist as `labels/<image_id>.csv` (rows `landmark_index,i,j,confidence`)
    /// plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let labels = dir.join("labels");
        fs::create_dir_all(&labels)?;
        let num_landmarks = self.entries.values().next().map_or(0, |v| v.len());
        for (image_id, marks) in &self.entries {
            let mut text = String::new();
            for (idx, m) in marks.iter().enumerate() {
                text.push_str(&format!(
                    "{idx},{},{},{}\n",
                    m.coord.0, m.coord.1, m.confidence
                ));
            }
            fs::write(labels.join(format!("{image_id}.csv")), text)?;
        }
        let manifest = StoreManifest {
            domain_id: self.domain_id,
            domain_name: self.domain_name.clone(),
            oneshot_id: self.oneshot_id.clone(),
            checkpoint_hash: self.checkpoint_hash.clone(),
            clamped_landmarks: self.clamped_landmarks.clone(),
            num_landmarks,
            num_images: self.entries.len(),
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| UodError::data(format!("cannot serialize store manifest: {e}")))?;
        fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| {
            UodError::data(format!(
                "label store manifest missing at {}: {e}",
                manifest_path.display()
            ))
        })?;
        let manifest: StoreManifest = serde_json::from_str(&text)
            .map_err(|e| UodError::data(format!("malformed {}: {e}", manifest_path.display())))?;
        let labels = dir.join("labels");
        let mut entries = BTreeMap::new();
        for entry in fs::read_dir(&labels)
            .map_err(|e| UodError::data(format!("label dir missing at {}: {e}", labels.display())))?
        {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("csv") {
                continue;
            }
            let image_id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| UodError::data(format!("bad label file name {}", path.display())))?
                .to_string();
            let text = fs::read_to_string(&path)?;
            let marks = parse_pseudo_csv(&text, &path, manifest.num_landmarks)?;
            entries.insert(image_id, marks);
        }
        if entries.len() != manifest.num_images {
            return Err(UodError::data(format!(
                "label store at {} holds {} images, manifest says {}",
                dir.display(),
                entries.len(),
                manifest.num_images
            )));
        }
        Ok(PseudoLabelStore {
            domain_id: manifest.domain_id,
            domain_name: manifest.domain_name,
            oneshot_id: manifest.oneshot_id,
            checkpoint_hash: manifest.checkpoint_hash,
            clamped_landmarks: manifest.clamped_landmarks,
            entries,
        })
    }
}

fn parse_pseudo_csv(text: &str, path: &Path, expected: usize) -> Result<Vec<PseudoLabel>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| {
            UodError::data(format!("{} line {}: {}", path.display(), line_no + 1, what))
        };
        if fields.len() != 4 {
            return Err(bad("expected 4 fields `landmark_index,i,j,confidence`"));
        }
        let idx: usize = fields[0].trim().parse().map_err(|_| bad("bad landmark index"))?;
        if idx != out.len() {
            return Err(bad("landmark indices must run 0,1,2,... in order"));
        }
        let i: f64 = fields[1].trim().parse().map_err(|_| bad("bad row coordinate"))?;
        let j: f64 = fields[2].trim().parse().map_err(|_| bad("bad col coordinate"))?;
        let c: f64 = fields[3].trim().parse().map_err(|_| bad("bad confidence"))?;
        out.push(PseudoLabel { coord: (i, j), confidence: c });
    }
    if out.len() != expected {
        return Err(UodError::data(format!(
            "{}: has {} label rows, expected {}",
            path.display(),
            out.len(),
            expected
        )));
    }
    Ok(out)
}

/// Options for [`infer_pseudo_labels`].
#[derive(Debug, Clone)]
pub struct LabelOptions {
    /// Number of augmented copies of each one-shot patch to average over;
    /// 0 uses the raw patch (default).
    pub augment_average: usize,
    pub augment: AugmentRanges,
    pub checkpoint_hash: String,
    pub seed: u64,
}

impl Default for LabelOptions {
    fn default() -> Self {
        LabelOptions {
            augment_average: 0,
            augment: AugmentRanges::default(),
            checkpoint_hash: String::new(),
            seed: 0,
        }
    }
}

/// Detached per-scale feature pyramid of one input (eval mode, batch 1).
fn embed_arrays(net: &Stage1Net, pixels: &Array3<f64>, d: DomainId) -> Vec<ArrayD<f64>> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, false);
    let (c, h, w) = pixels.dim();
    let x = tape.leaf(
        ArrayD::from_shape_vec(IxDyn(&[1, c, h, w]), pixels.iter().cloned().collect()).unwrap(),
    );
    net.embed(&ctx, x, d)
        .into_iter()
        .map(|v| (*v.value()).clone())
        .collect()
}

fn l2_normalized_fibers(feat: &ArrayD<f64>) -> ArrayD<f64> {
    let (c, h, w) = (feat.shape()[1], feat.shape()[2], feat.shape()[3]);
    let mut out = feat.clone();
    let s = out.as_slice_mut().unwrap();
    let r = h * w;
    for j in 0..r {
        let mut sq = NORM_EPS;
        for ch in 0..c {
            sq += s[ch * r + j] * s[ch * r + j];
        }
        let inv = 1.0 / sq.sqrt();
        for ch in 0..c {
            s[ch * r + j] *= inv;
        }
    }
    out
}

fn query_at(feat: &ArrayD<f64>, site: (usize, usize)) -> Array1<f64> {
    let (c, w) = (feat.shape()[1], feat.shape()[3]);
    let r = feat.shape()[2] * w;
    let s = feat.as_slice().unwrap();
    let mut q = Array1::zeros(c);
    let mut sq = NORM_EPS;
    for ch in 0..c {
        let v = s[ch * r + site.0 * w + site.1];
        q[ch] = v;
        sq += v * v;
    }
    let inv = 1.0 / sq.sqrt();
    q.mapv_inplace(|v| v * inv);
    q
}

fn softmax_cosine_map(norm_feat: &ArrayD<f64>, query: &Array1<f64>) -> Array2<f64> {
    let (c, h, w) = (norm_feat.shape()[1], norm_feat.shape()[2], norm_feat.shape()[3]);
    let s = norm_feat.as_slice().unwrap();
    let r = h * w;
    let mut cos = vec![0.0f64; r];
    for ch in 0..c {
        let q = query[ch];
        for (o, &f) in cos.iter_mut().zip(&s[ch * r..(ch + 1) * r]) {
            *o += q * f;
        }
    }
    let m = cos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in cos.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in cos.iter_mut() {
        *v /= z;
    }
    Array2::from_shape_vec((h, w), cos).unwrap()
}

/// Match every annotated landmark of the one-shot image into each unlabeled
/// image and emit pseudo labels with fused-peak confidences.
pub fn infer_pseudo_labels(
    net: &Stage1Net,
    registry: &DomainRegistry,
    oneshot: &ImageRecord,
    unlabeled: &[ImageRecord],
    opts: &LabelOptions,
) -> Result<PseudoLabelStore> {
    let d = oneshot.domain_id;
    let spec = registry.spec(d)?;
    let landmarks = oneshot
        .landmarks
        .as_ref()
        .ok_or_else(|| UodError::validation("one-shot image carries no landmarks"))?;
    if landmarks.len() != spec.num_landmarks {
        return Err(UodError::validation(format!(
            "one-shot has {} landmarks, domain {:?} needs {}",
            landmarks.len(),
            spec.name,
            spec.num_landmarks
        )));
    }
    let (h, w) = oneshot.size();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(UodError::shape("one-shot image sides must be even"));
    }
    let (ph, pw) = (h / 2, w / 2);
    let strides = net.strides();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    // Build per-landmark query banks: for each landmark, one normalized query
    // vector per scale per augmented copy (one copy when raw).
    let mut clamped = Vec::new();
    let mut queries: Vec<Vec<Vec<Array1<f64>>>> = Vec::new(); // [landmark][copy][scale]
    for (idx, &(pi, pj)) in landmarks.coords.iter().enumerate() {
        let ideal = (pi - (ph as f64 - 1.0) / 2.0, pj - (pw as f64 - 1.0) / 2.0);
        let oi = (ideal.0.round() as i64).clamp(0, (h - ph) as i64) as usize;
        let oj = (ideal.1.round() as i64).clamp(0, (w - pw) as i64) as usize;
        if (ideal.0.round() as i64) != oi as i64 || (ideal.1.round() as i64) != oj as i64 {
            clamped.push(idx);
        }
        let crop = oneshot
            .pixels
            .slice(s![.., oi..oi + ph, oj..oj + pw])
            .to_owned();
        let in_patch = (pi - oi as f64, pj - oj as f64);
        let copies = opts.augment_average.max(1);
        let mut per_copy = Vec::with_capacity(copies);
        for copy in 0..copies {
            let augment = if opts.augment_average == 0 || copy == 0 {
                // The raw patch is always the first copy.
                AugmentParams::identity()
            } else {
                AugmentParams::sample(&mut rng, &opts.augment, (ph, pw))
            };
            let mapped = augment.map_point(in_patch, (ph, pw));
            if mapped.0 < 0.0
                || mapped.1 < 0.0
                || mapped.0 > (ph - 1) as f64
                || mapped.1 > (pw - 1) as f64
            {
                continue; // this augmented copy pushed the landmark out
            }
            let feats = embed_arrays(net, &augment.apply(&crop), d);
            let mut per_scale = Vec::with_capacity(feats.len());
            for (feat, &stride) in feats.iter().zip(&strides) {
                let grid = (feat.shape()[2], feat.shape()[3]);
                let site = grid_site(mapped, stride, grid)?;
                per_scale.push(query_at(feat, site));
            }
            per_copy.push(per_scale);
        }
        if per_copy.is_empty() {
            return Err(UodError::numeric(format!(
                "every augmented copy of landmark {idx} left the patch; \
                 lower the augmentation ranges"
            )));
        }
        queries.push(per_copy);
    }

    let mut entries = BTreeMap::new();
    for image in unlabeled {
        if image.domain_id != d {
            return Err(UodError::domain(format!(
                "image {:?} belongs to domain {}, one-shot to {}",
                image.image_id, image.domain_id, d
            )));
        }
        if image.size() != (h, w) {
            return Err(UodError::shape(format!(
                "image {:?} size {:?} differs from one-shot {:?}",
                image.image_id,
                image.size(),
                (h, w)
            )));
        }
        let feats = embed_arrays(net, &image.pixels, d);
        let normed: Vec<ArrayD<f64>> = feats.iter().map(l2_normalized_fibers).collect();
        let mut marks = Vec::with_capacity(queries.len());
        for per_copy in &queries {
            // Average the fused map over augmented copies (a single copy when
            // the raw patch is used).
            let mut fused_sum: Option<Array2<f64>> = None;
            for per_scale in per_copy {
                let maps: Vec<Array2<f64>> = normed
                    .iter()
                    .zip(per_scale)
                    .map(|(feat, q)| softmax_cosine_map(feat, q))
                    .collect();
                let fused = fuse_probability_maps(&maps, (h, w))?;
                fused_sum = Some(match fused_sum {
                    None => fused,
                    Some(mut acc) => {
                        acc += &fused;
                        acc
                    }
                });
            }
            let mut fused = fused_sum.expect("at least one copy per landmark");
            fused /= per_copy.len() as f64;
            let (bi, bj, peak) = argmax2(&fused);
            marks.push(PseudoLabel {
                coord: (bi as f64 * strides[0] as f64, bj as f64 * strides[0] as f64),
                confidence: peak,
            });
        }
        entries.insert(image.image_id.clone(), marks);
    }
    Ok(PseudoLabelStore {
        domain_id: d,
        domain_name: spec.name.clone(),
        oneshot_id: oneshot.image_id.clone(),
        checkpoint_hash: opts.checkpoint_hash.clone(),
        clamped_landmarks: clamped,
        entries,
    })
}
