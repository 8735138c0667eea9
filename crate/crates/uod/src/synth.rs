//! Deterministic synthetic multi-domain generator.
//!
//! Two recipe families stand in for real anatomical datasets at desk scale:
//!
//! * **Skull-like** — a bright elliptical ring with radial spokes on a dark
//!   background; landmarks sit at the spoke/ring junctions.
//! * **Hand-like** — a fan of elongated lobes rising from a palm blob, drawn
//!   with inverted contrast (dark structures on a bright background);
//!   landmarks sit at the lobe tips.
//!
//! Every image is parameterized by a handful of shape values sampled from a
//! per-image RNG derived from `(recipe.seed, image_index)`, and the landmark
//! coordinates are closed-form functions of those values. Pixel noise is
//! drawn after the shape parameters, so the landmark ground truth is exact by
//! construction and independent of the noise level. Generation is
//! reproducible bit for bit and parallelizable per image.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{write_dataset, BitDepth, Splits};
use crate::domain::{CalibrationRule, DomainSpec, ImageRecord, LandmarkSet, PixelSpacing};
use crate::error::{Result, UodError};
use crate::exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    SkullLike,
    HandLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDomainRecipe {
    /// Layout directory name and domain name.
    pub name: String,
    pub kind: SynthKind,
    pub num_landmarks: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    /// Standard deviation of additive Gaussian pixel noise (intensities are
    /// clipped back to `[0, 1]`).
    pub noise_level: f64,
    /// Number of images; split 80/20 into train/test.
    pub count: usize,
    pub seed: u64,
}

// Shape-parameter ranges. Margin validation below is derived from the same
// constants, so loosening a range automatically tightens the size check.
const SKULL_CENTER_JITTER: f64 = 0.05; // fraction of size
const SKULL_RY: f64 = 0.36;
const SKULL_RX: f64 = 0.30;
const SKULL_R_SPREAD: f64 = 0.10; // radii scaled by U(1-s, 1+s)
const SKULL_ROT_JITTER: f64 = 0.04; // radians

const HAND_CY: f64 = 0.62;
const HAND_CENTER_JITTER: f64 = 0.03;
const HAND_LOBE_LEN: f64 = 0.34;
const HAND_LOBE_MIN: f64 = 0.85;
const HAND_LOBE_MAX: f64 = 1.05;
const HAND_FAN_HALF_ANGLE: f64 = std::f64::consts::FRAC_PI_3; // 60 degrees
const HAND_ANGLE_JITTER: f64 = 0.03; // radians
const HAND_PALM_R: f64 = 0.16;

const EDGE_MARGIN_PX: f64 = 2.0;

impl SynthDomainRecipe {
    /// Reject recipes whose worst-case shape extent cannot keep every
    /// landmark at least [`EDGE_MARGIN_PX`] inside the image.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(UodError::config("recipe name must be non-empty"));
        }
        if self.num_landmarks < 2 {
            return Err(UodError::config("recipe needs at least 2 landmarks"));
        }
        if self.count < 2 {
            return Err(UodError::config("recipe needs at least 2 images (train + test)"));
        }
        if !(0.0..=0.5).contains(&self.noise_level) {
            return Err(UodError::config("noise_level must lie in [0, 0.5]"));
        }
        let s = self.image_size as f64;
        let slack = match self.kind {
            SynthKind::SkullLike => {
                // Worst extent from the image center along rows:
                // center jitter + largest vertical radius.
                let worst = SKULL_CENTER_JITTER * s + SKULL_RY * (1.0 + SKULL_R_SPREAD) * s;
                s / 2.0 - worst
            }
            SynthKind::HandLike => {
                let reach = HAND_LOBE_LEN * HAND_LOBE_MAX * s;
                let lateral = HAND_CENTER_JITTER * s
                    + reach * (HAND_FAN_HALF_ANGLE + HAND_ANGLE_JITTER).sin();
                let top = (HAND_CY - HAND_CENTER_JITTER) * s - reach;
                let bottom = s - ((HAND_CY + HAND_CENTER_JITTER) + HAND_PALM_R) * s;
                (s / 2.0 - lateral).min(top).min(bottom)
            }
        };
        if slack < EDGE_MARGIN_PX {
            return Err(UodError::config(format!(
                "size {} too small for shape margins of recipe {:?} (needs {:.1}px more)",
                self.image_size,
                self.name,
                EDGE_MARGIN_PX - slack
            )));
        }
        Ok(())
    }

    /// Pixel spacing recorded in the layout. The hand-like domain exercises
    /// per-image calibration from its two outermost lobe tips; the skull-like
    /// domain uses a fixed scanner resolution.
    pub fn spacing(&self) -> PixelSpacing {
        match self.kind {
            SynthKind::SkullLike => PixelSpacing::MmPerPx(0.5),
            SynthKind::HandLike => PixelSpacing::Calibrated(CalibrationRule {
                p_index: 0,
                q_index: self.num_landmarks - 1,
                distance_mm: 19.0,
            }),
        }
    }
}

/// Standard two-domain desk configuration: a 12-landmark skull-like domain
/// and an 8-landmark hand-like domain with decorrelated seeds.
pub fn desk_recipes(seed: u64, size: usize, count: usize) -> Vec<SynthDomainRecipe> {
    vec![
        SynthDomainRecipe {
            name: "skull".into(),
            kind: SynthKind::SkullLike,
            num_landmarks: 12,
            image_size: size,
            noise_level: 0.04,
            count,
            seed,
        },
        SynthDomainRecipe {
            name: "hand".into(),
            kind: SynthKind::HandLike,
            num_landmarks: 8,
            image_size: size,
            noise_level: 0.04,
            count,
            seed: seed.wrapping_add(0x9E37_79B9),
        },
    ]
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index as u64)))
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

struct SkullParams {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    rot: f64,
    gain: f64,
}

struct HandParams {
    cy: f64,
    cx: f64,
    gain: f64,
    /// (angle from vertical, length in px) per lobe, fan order.
    lobes: Vec<(f64, f64)>,
}

fn skull_params(rng: &mut ChaCha8Rng, size: f64) -> SkullParams {
    let j = SKULL_CENTER_JITTER * size;
    SkullParams {
        cy: size / 2.0 + uniform(rng, -j, j),
        cx: size / 2.0 + uniform(rng, -j, j),
        ry: SKULL_RY * size * uniform(rng, 1.0 - SKULL_R_SPREAD, 1.0 + SKULL_R_SPREAD),
        rx: SKULL_RX * size * uniform(rng, 1.0 - SKULL_R_SPREAD, 1.0 + SKULL_R_SPREAD),
        rot: uniform(rng, -SKULL_ROT_JITTER, SKULL_ROT_JITTER),
        gain: uniform(rng, 0.9, 1.0),
    }
}

fn hand_params(rng: &mut ChaCha8Rng, size: f64, n: usize) -> HandParams {
    let j = HAND_CENTER_JITTER * size;
    let cy = HAND_CY * size + uniform(rng, -j, j);
    let cx = size / 2.0 + uniform(rng, -j, j);
    let gain = uniform(rng, 0.9, 1.0);
    let lobes = (0..n)
        .map(|k| {
            let base = -HAND_FAN_HALF_ANGLE
                + 2.0 * HAND_FAN_HALF_ANGLE * k as f64 / (n - 1) as f64;
            let phi = base + uniform(rng, -HAND_ANGLE_JITTER, HAND_ANGLE_JITTER);
            let len = HAND_LOBE_LEN * size * uniform(rng, HAND_LOBE_MIN, HAND_LOBE_MAX);
            (phi, len)
        })
        .collect();
    HandParams { cy, cx, gain, lobes }
}

fn skull_landmarks(p: &SkullParams, n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|k| {
            let theta = p.rot + std::f64::consts::TAU * k as f64 / n as f64;
            (p.cy + p.ry * theta.sin(), p.cx + p.rx * theta.cos())
        })
        .collect()
}

fn hand_landmarks(p: &HandParams) -> Vec<(f64, f64)> {
    p.lobes
        .iter()
        .map(|&(phi, len)| (p.cy - len * phi.cos(), p.cx + len * phi.sin()))
        .collect()
}

fn render_skull(p: &SkullParams, n: usize, size: usize) -> Array3<f64> {
    let spokes: Vec<f64> = (0..n)
        .map(|k| p.rot + std::f64::consts::TAU * k as f64 / n as f64)
        .collect();
    Array3::from_shape_fn((1, size, size), |(_, i, j)| {
        let u = (i as f64 - p.cy) / p.ry;
        let v = (j as f64 - p.cx) / p.rx;
        let q = (u * u + v * v).sqrt();
        let mut val = 0.08; // background
        val += p.gain * 0.75 * (-(q - 1.0).powi(2) / (2.0 * 0.06_f64.powi(2))).exp();
        val += p.gain * 0.18 * (-q * q / 1.8).exp();
        if (0.25..=1.02).contains(&q) {
            let alpha = u.atan2(v);
            for &theta in &spokes {
                // Perpendicular distance to the spoke ray in normalized coords.
                let d = q * (alpha - theta).sin();
                val += p.gain * 0.5 * (-d * d / (2.0 * 0.035_f64.powi(2))).exp()
                    * if (alpha - theta).cos() > 0.0 { 1.0 } else { 0.0 };
            }
        }
        val
    })
}

fn render_hand(p: &HandParams, size: usize) -> Array3<f64> {
    let w = 0.028 * size as f64; // lobe half-width scale
    let palm_r = HAND_PALM_R * size as f64;
    Array3::from_shape_fn((1, size, size), |(_, i, j)| {
        let (y, x) = (i as f64, j as f64);
        let mut dip: f64 = 0.0;
        let pr2 = (y - p.cy).powi(2) + (x - p.cx).powi(2);
        dip += 0.45 * (-pr2 / (2.0 * palm_r * palm_r)).exp();
        for &(phi, len) in &p.lobes {
            // Capsule from 0.25·len to len along the lobe direction.
            let (dy, dx) = (-phi.cos(), phi.sin());
            let (sy, sx) = (p.cy + 0.25 * len * dy, p.cx + 0.25 * len * dx);
            let (ey, ex) = (p.cy + len * dy, p.cx + len * dx);
            let (vy, vx) = (ey - sy, ex - sx);
            let seg2 = vy * vy + vx * vx;
            let t = (((y - sy) * vy + (x - sx) * vx) / seg2).clamp(0.0, 1.0);
            let (py, px) = (sy + t * vy, sx + t * vx);
            let d2 = (y - py).powi(2) + (x - px).powi(2);
            dip += 0.5 * (-d2 / (2.0 * w * w)).exp();
        }
        0.88 - p.gain * dip.min(1.2) // inverted contrast: dark structures
    })
}

/// Generate one image of a recipe. Deterministic in `(recipe, index)`.
pub fn synth_image(recipe: &SynthDomainRecipe, index: usize) -> Result<ImageRecord> {
    recipe.validate()?;
    let mut rng = image_rng(recipe.seed, index);
    let size = recipe.image_size;
    let (mut pixels, coords) = match recipe.kind {
        SynthKind::SkullLike => {
            let p = skull_params(&mut rng, size as f64);
            (
                render_skull(&p, recipe.num_landmarks, size),
                skull_landmarks(&p, recipe.num_landmarks),
            )
        }
        SynthKind::HandLike => {
            let p = hand_params(&mut rng, size as f64, recipe.num_landmarks);
            (render_hand(&p, size), hand_landmarks(&p))
        }
    };
    if recipe.noise_level > 0.0 {
        for v in pixels.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += recipe.noise_level * n;
        }
    }
    pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(ImageRecord {
        image_id: format!("img_{index:04}"),
        pixels,
        domain_id: 0,
        landmarks: Some(LandmarkSet::new(0, coords)),
    })
}

/// 80/20 train/test split over `img_0000..img_{count-1}`; the one-shot image
/// is the first training image.
pub fn synth_splits(count: usize) -> Splits {
    let n_test = (count / 5).max(1);
    let n_train = count - n_test;
    let id = |i: usize| format!("img_{i:04}");
    Splits {
        train: (0..n_train).map(id).collect(),
        test: (n_train..count).map(id).collect(),
        oneshot_id: id(0),
    }
}

/// Generate and write one [`crate::data::DatasetLayout`] per recipe under
/// `out_root/<name>`. Bit-identical output for identical inputs.
pub fn synth_generate(recipes: &[SynthDomainRecipe], out_root: &Path) -> Result<Vec<PathBuf>> {
    for (a, recipe) in recipes.iter().enumerate() {
        recipe.validate()?;
        if recipes[..a].iter().any(|r| r.name == recipe.name) {
            return Err(UodError::config(format!(
                "duplicate recipe name {:?}",
                recipe.name
            )));
        }
    }
    let mut roots = Vec::new();
    for recipe in recipes {
        let records: Vec<Result<ImageRecord>> =
            exec::par_map_collect(recipe.count, |i| synth_image(recipe, i));
        let records: Vec<ImageRecord> = records.into_iter().collect::<Result<_>>()?;
        let spec = DomainSpec::new(
            recipe.name.clone(),
            recipe.num_landmarks,
            (recipe.image_size, recipe.image_size),
            1,
            recipe.spacing(),
        );
        let root = out_root.join(&recipe.name);
        write_dataset(&root, &spec, &records, &synth_splits(recipe.count), BitDepth::Eight)?;
        roots.push(root);
    }
    Ok(roots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_domains;
    use crate::domain::validate_record;
    use std::fs;

    fn small(kind: SynthKind, noise: f64) -> SynthDomainRecipe {
        SynthDomainRecipe {
            name: match kind {
                SynthKind::SkullLike => "skull".into(),
                SynthKind::HandLike => "hand".into(),
            },
            kind,
            num_landmarks: match kind {
                SynthKind::SkullLike => 12,
                SynthKind::HandLike => 8,
            },
            image_size: 64,
            noise_level: noise,
            count: 6,
            seed: 7,
        }
    }

    fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    files.push((rel, fs::read(&path).unwrap()));
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn generation_is_bit_identical_across_runs() {
        let recipes = vec![small(SynthKind::SkullLike, 0.05)];
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        synth_generate(&recipes, d1.path()).unwrap();
        synth_generate(&recipes, d2.path()).unwrap();
        let a = dir_bytes(d1.path());
        let b = dir_bytes(d2.path());
        assert!(!a.is_empty());
        assert_eq!(a, b, "same recipe and seed must produce identical bytes");
    }

    #[test]
    fn noise_moves_pixels_but_never_landmarks() {
        for kind in [SynthKind::SkullLike, SynthKind::HandLike] {
            let clean = synth_image(&small(kind, 0.0), 3).unwrap();
            let noisy = synth_image(&small(kind, 0.2), 3).unwrap();
            assert_eq!(
                clean.landmarks.as_ref().unwrap().coords,
                noisy.landmarks.as_ref().unwrap().coords,
                "landmarks are analytic functions of shape parameters only"
            );
            assert_ne!(clean.pixels, noisy.pixels);
        }
    }

    #[test]
    fn landmarks_sit_on_structure_with_expected_contrast() {
        // Skull-like: bright junctions on dark background. Hand-like: dark
        // lobe tips on bright background (inverted contrast).
        let skull = synth_image(&small(SynthKind::SkullLike, 0.0), 0).unwrap();
        for &(i, j) in &skull.landmarks.as_ref().unwrap().coords {
            let v = skull.pixels[(0, i.round() as usize, j.round() as usize)];
            assert!(v > 0.5, "skull landmark at ({i:.1},{j:.1}) has intensity {v:.2}");
        }
        let hand = synth_image(&small(SynthKind::HandLike, 0.0), 0).unwrap();
        for &(i, j) in &hand.landmarks.as_ref().unwrap().coords {
            let v = hand.pixels[(0, i.round() as usize, j.round() as usize)];
            assert!(v < 0.6, "hand landmark at ({i:.1},{j:.1}) has intensity {v:.2}");
        }
    }

    #[test]
    fn landmarks_stay_inside_the_margin() {
        for kind in [SynthKind::SkullLike, SynthKind::HandLike] {
            let recipe = small(kind, 0.0);
            for idx in 0..20 {
                let rec = synth_image(&recipe, idx).unwrap();
                for &(i, j) in &rec.landmarks.as_ref().unwrap().coords {
                    let hi = recipe.image_size as f64 - EDGE_MARGIN_PX;
                    assert!(
                        i >= EDGE_MARGIN_PX && i <= hi && j >= EDGE_MARGIN_PX && j <= hi,
                        "{kind:?} image {idx}: landmark ({i:.2},{j:.2}) breaches the margin"
                    );
                }
            }
        }
    }

    #[test]
    fn too_small_a_size_is_rejected() {
        let mut r = small(SynthKind::SkullLike, 0.0);
        r.image_size = 8;
        let err = r.validate().unwrap_err().to_string();
        assert!(err.contains("too small for shape margins"), "{err}");
        let mut r = small(SynthKind::HandLike, 0.0);
        r.image_size = 8;
        assert!(r.validate().is_err());
    }

    #[test]
    fn generated_layouts_load_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let roots = synth_generate(&desk_recipes(7, 64, 6), dir.path()).unwrap();
        assert_eq!(roots.len(), 2);
        let (registry, per_domain, splits) = load_domains(&roots).unwrap();
        assert_eq!(registry.len(), 2);
        assert_eq!(registry.spec(0).unwrap().num_landmarks, 12);
        assert_eq!(registry.spec(1).unwrap().num_landmarks, 8);
        for (d, records) in per_domain.iter().enumerate() {
            assert_eq!(records.len(), 6);
            for rec in records {
                let v = validate_record(rec, &registry).unwrap();
                assert!(v.is_empty(), "domain {d} image {}: {v:?}", rec.image_id);
            }
        }
        assert_eq!(splits[0].train.len(), 5);
        assert_eq!(splits[0].test.len(), 1);
        assert_eq!(splits[0].oneshot_id, "img_0000");
        // The two layouts share no files.
        assert_ne!(roots[0], roots[1]);
    }

    #[test]
    fn domains_are_visually_distinct() {
        // Mean intensity separates the polarity of the two families.
        let skull = synth_image(&small(SynthKind::SkullLike, 0.0), 1).unwrap();
        let hand = synth_image(&small(SynthKind::HandLike, 0.0), 1).unwrap();
        let mean = |r: &ImageRecord| r.pixels.iter().sum::<f64>() / r.pixels.len() as f64;
        assert!(mean(&skull) < 0.45, "skull-like is mostly dark");
        assert!(mean(&hand) > 0.55, "hand-like is mostly bright");
    }

    #[test]
    fn duplicate_recipe_names_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut recipes = vec![small(SynthKind::SkullLike, 0.0), small(SynthKind::SkullLike, 0.0)];
        recipes[1].seed = 9;
        let err = synth_generate(&recipes, dir.path()).unwrap_err().to_string();
        assert!(err.contains("duplicate recipe name"), "{err}");
    }
}
