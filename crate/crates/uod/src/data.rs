//! Dataset ingestion, the normative on-disk layout, and resizing with exact
//! coordinate mapping.
//!
//! ## On-disk layout
//!
//! One directory per domain:
//!
//! ```text
//! <root>/domain.json          {"name", "num_landmarks", "pixel_spacing"}
//! <root>/images/<id>.png      8- or 16-bit grayscale PNG
//! <root>/landmarks/<id>.csv   rows `index,i,j` (no header)
//! <root>/splits.json          {"train": [...], "test": [...], "oneshot_id": "..."}
//! ```
//!
//! Coordinates are zero-indexed `(row, col)` pixels with sub-pixel decimals
//! allowed. Landmark files are optional per image (an unannotated image simply
//! has none), but when present the row count must equal the domain's landmark
//! count. All images of one layout must share a single size; variable-size
//! source datasets are expected to be converted (resized) before being stored
//! in this layout.
//!
//! Intensities are normalized to `[0, 1]` at ingestion: 8-bit values divide by
//! 255, 16-bit by 65535. Writing quantizes back to the selected bit depth, so
//! `load ∘ write` is the identity for records whose values already lie on the
//! quantization grid.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::domain::{DomainRegistry, DomainSpec, ImageRecord, LandmarkSet, PixelSpacing};
use crate::error::{Result, UodError};
use crate::exec;

/// Serialized form of `domain.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDescriptor {
    pub name: String,
    pub num_landmarks: usize,
    pub pixel_spacing: PixelSpacing,
}

/// Serialized form of `splits.json`. `oneshot_id` designates the single
/// annotated training image used to seed pseudo labeling; it must be a member
/// of `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub oneshot_id: String,
}

impl Splits {
    /// All image ids, train first, order preserved.
    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(self.test.iter())
    }

    pub fn is_train(&self, id: &str) -> bool {
        self.train.iter().any(|t| t == id)
    }

    pub fn is_test(&self, id: &str) -> bool {
        self.test.iter().any(|t| t == id)
    }

    fn check(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(UodError::data("splits.json: train split is empty"));
        }
        let mut seen = HashSet::new();
        for id in self.all_ids() {
            if !seen.insert(id.as_str()) {
                return Err(UodError::data(format!(
                    "splits.json: image id {id:?} appears more than once across splits"
                )));
            }
        }
        if !self.is_train(&self.oneshot_id) {
            return Err(UodError::data(format!(
                "splits.json: oneshot_id {:?} is not in the train split",
                self.oneshot_id
            )));
        }
        Ok(())
    }
}

/// Path arithmetic for one dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetLayout { root: root.into() }
    }

    pub fn descriptor_path(&self) -> PathBuf {
        self.root.join("domain.json")
    }

    pub fn splits_path(&self) -> PathBuf {
        self.root.join("splits.json")
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn landmarks_dir(&self) -> PathBuf {
        self.root.join("landmarks")
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.images_dir().join(format!("{id}.png"))
    }

    pub fn landmark_path(&self, id: &str) -> PathBuf {
        self.landmarks_dir().join(format!("{id}.csv"))
    }
}

/// Bit depth used when writing images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

// ---------------------------------------------------------------------------
// PNG + CSV primitives
// ---------------------------------------------------------------------------

/// Read a grayscale PNG into a `(1, H, W)` array with values in `[0, 1]`.
pub fn read_grayscale_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| UodError::data(format!("unreadable image {}: {e}", path.display())))?;
    let (arr, h, w): (Vec<f64>, usize, usize) = match img {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            (buf.into_raw().iter().map(|&v| v as f64 / 255.0).collect(), h, w)
        }
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            (buf.into_raw().iter().map(|&v| v as f64 / 65535.0).collect(), h, w)
        }
        other => {
            return Err(UodError::data(format!(
                "image {} is {:?}; expected 8- or 16-bit grayscale",
                path.display(),
                other.color()
            )));
        }
    };
    Array3::from_shape_vec((1, h, w), arr)
        .map_err(|e| UodError::data(format!("image {}: {e}", path.display())))
}

/// Write channel 0 of a `(C, H, W)` array as a grayscale PNG, quantizing
/// values (assumed in `[0, 1]`) to the requested bit depth.
pub fn write_grayscale_png(path: &Path, pixels: &Array3<f64>, depth: BitDepth) -> Result<()> {
    let (_, h, w) = pixels.dim();
    let plane = pixels.index_axis(ndarray::Axis(0), 0);
    let err = |e: image::ImageError| {
        UodError::data(format!("cannot write image {}: {e}", path.display()))
    };
    match depth {
        BitDepth::Eight => {
            let bytes: Vec<u8> = plane
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            let buf = image::GrayImage::from_vec(w as u32, h as u32, bytes)
                .ok_or_else(|| UodError::shape("pixel buffer does not match image size"))?;
            buf.save(path).map_err(err)
        }
        BitDepth::Sixteen => {
            let words: Vec<u16> = plane
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
                .collect();
            let buf =
                image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_vec(w as u32, h as u32, words)
                    .ok_or_else(|| UodError::shape("pixel buffer does not match image size"))?;
            image::DynamicImage::ImageLuma16(buf).save(path).map_err(err)
        }
    }
}

/// Format landmark coordinates as `index,i,j` rows. `f64` values print in
/// shortest round-trip form, so `parse(format(x)) == x` bit-exactly.
pub fn format_landmarks_csv(coords: &[(f64, f64)]) -> String {
    let mut out = String::new();
    for (idx, &(i, j)) in coords.iter().enumerate() {
        out.push_str(&format!("{idx},{i},{j}\n"));
    }
    out
}

/// Parse `index,i,j` rows. Indices must run 0..n in order; `expected` (when
/// given) pins the row count. Errors name `path`.
pub fn parse_landmarks_csv(
    text: &str,
    path: &Path,
    expected: Option<usize>,
) -> Result<Vec<(f64, f64)>> {
    let mut coords = Vec::new();
    let bad = |line_no: usize, what: &str| {
        UodError::data(format!("{} line {}: {}", path.display(), line_no + 1, what))
    };
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(bad(line_no, "expected 3 fields `index,i,j`"));
        }
        let idx: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| bad(line_no, "landmark index is not an integer"))?;
        if idx != coords.len() {
            return Err(bad(line_no, "landmark indices must run 0,1,2,... in order"));
        }
        let i: f64 = fields[1]
            .trim()
            .parse()
            .map_err(|_| bad(line_no, "row coordinate is not a number"))?;
        let j: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| bad(line_no, "col coordinate is not a number"))?;
        coords.push((i, j));
    }
    if let Some(n) = expected {
        if coords.len() != n {
            return Err(UodError::data(format!(
                "{}: has {} landmark rows, expected {}",
                path.display(),
                coords.len(),
                n
            )));
        }
    }
    Ok(coords)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| UodError::data(format!("{what} missing or unreadable at {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| UodError::data(format!("malformed {what} at {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| UodError::data(format!("cannot serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset load / write
// ---------------------------------------------------------------------------

/// Load one dataset directory. Returns the domain spec (with `domain_id` 0;
/// multi-domain callers re-stamp ids via [`load_domains`]), all records in
/// train-then-test order, and the split manifest.
pub fn load_dataset(root: &Path) -> Result<(DomainSpec, Vec<ImageRecord>, Splits)> {
    let layout = DatasetLayout::new(root);
    let desc: DomainDescriptor = read_json(&layout.descriptor_path(), "domain descriptor")?;
    if desc.num_landmarks == 0 {
        return Err(UodError::data(format!(
            "{}: num_landmarks must be >= 1",
            layout.descriptor_path().display()
        )));
    }
    let splits: Splits = read_json(&layout.splits_path(), "split manifest")?;
    splits.check()?;

    let mut records = Vec::new();
    let mut size: Option<(usize, usize)> = None;
    for id in splits.all_ids() {
        let img_path = layout.image_path(id);
        if !img_path.is_file() {
            return Err(UodError::data(format!(
                "split references image id {id:?} but {} does not exist",
                img_path.display()
            )));
        }
        let pixels = read_grayscale_png(&img_path)?;
        let this = (pixels.dim().1, pixels.dim().2);
        match size {
            None => size = Some(this),
            Some(s) if s != this => {
                return Err(UodError::data(format!(
                    "image {} has size {:?}, but this layout already established {:?}; \
                     all images of one layout must share a size",
                    img_path.display(),
                    this,
                    s
                )));
            }
            _ => {}
        }
        let lm_path = layout.landmark_path(id);
        let landmarks = if lm_path.is_file() {
            let text = fs::read_to_string(&lm_path)?;
            let coords = parse_landmarks_csv(&text, &lm_path, Some(desc.num_landmarks))?;
            Some(LandmarkSet::new(0, coords))
        } else {
            None
        };
        records.push(ImageRecord {
            image_id: id.clone(),
            pixels,
            domain_id: 0,
            landmarks,
        });
    }
    let native = size.expect("train split is non-empty, so at least one image loaded");
    let spec = DomainSpec::new(desc.name, desc.num_landmarks, native, 1, desc.pixel_spacing);
    Ok((spec, records, splits))
}

/// Write a dataset directory from in-memory records. Every record id must be
/// mentioned by the splits and vice versa. Landmarks are written for records
/// that carry them.
pub fn write_dataset(
    root: &Path,
    spec: &DomainSpec,
    records: &[ImageRecord],
    splits: &Splits,
    depth: BitDepth,
) -> Result<()> {
    splits.check()?;
    let ids: HashSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    if ids.len() != records.len() {
        return Err(UodError::data("duplicate image ids among records"));
    }
    for id in splits.all_ids() {
        if !ids.contains(id.as_str()) {
            return Err(UodError::data(format!(
                "splits reference image id {id:?} but no such record was given"
            )));
        }
    }
    if splits.all_ids().count() != records.len() {
        return Err(UodError::data(
            "every record must be assigned to exactly one split",
        ));
    }

    let layout = DatasetLayout::new(root);
    fs::create_dir_all(layout.images_dir())?;
    fs::create_dir_all(layout.landmarks_dir())?;
    write_json(
        &layout.descriptor_path(),
        &DomainDescriptor {
            name: spec.name.clone(),
            num_landmarks: spec.num_landmarks,
            pixel_spacing: spec.spacing.clone(),
        },
    )?;
    write_json(&layout.splits_path(), splits)?;
    for rec in records {
        write_grayscale_png(&layout.image_path(&rec.image_id), &rec.pixels, depth)?;
        if let Some(lm) = &rec.landmarks {
            if lm.len() != spec.num_landmarks {
                return Err(UodError::data(format!(
                    "record {:?} carries {} landmarks, expected {}",
                    rec.image_id,
                    lm.len(),
                    spec.num_landmarks
                )));
            }
            fs::write(
                layout.landmark_path(&rec.image_id),
                format_landmarks_csv(&lm.coords),
            )?;
        }
    }
    Ok(())
}

/// Load several dataset roots into one sealed registry. Domain ids are dense
/// in root order; every returned record and landmark set is stamped with its
/// registry id.
pub fn load_domains(
    roots: &[PathBuf],
) -> Result<(DomainRegistry, Vec<Vec<ImageRecord>>, Vec<Splits>)> {
    if roots.is_empty() {
        return Err(UodError::data("no dataset roots given"));
    }
    let mut registry = DomainRegistry::new();
    let mut all_records = Vec::new();
    let mut all_splits = Vec::new();
    for root in roots {
        let (spec, mut records, splits) = load_dataset(root)?;
        let id = registry.register_domain(spec)?;
        for rec in &mut records {
            rec.domain_id = id;
            if let Some(lm) = &mut rec.landmarks {
                lm.domain_id = id;
            }
        }
        all_records.push(records);
        all_splits.push(splits);
    }
    registry.seal();
    Ok((registry, all_records, all_splits))
}

// ---------------------------------------------------------------------------
// Resizing
// ---------------------------------------------------------------------------

/// Per-axis coordinate scale factors for a resize `from -> to`:
/// `(to_h / from_h, to_w / from_w)`.
pub fn coord_scale(from: (usize, usize), to: (usize, usize)) -> (f64, f64) {
    (
        to.0 as f64 / from.0 as f64,
        to.1 as f64 / from.1 as f64,
    )
}

/// Bilinearly resample a `(C, H, W)` array to `(C, h, w)`. Output pixel
/// centers map to input coordinates under the half-pixel convention; edge
/// samples clamp. Resizing to the same size reproduces the input bit-exactly.
pub fn resize_image(pixels: &Array3<f64>, size: (usize, usize)) -> Result<Array3<f64>> {
    let (c, h1, w1) = pixels.dim();
    let (h2, w2) = size;
    if h2 == 0 || w2 == 0 {
        return Err(UodError::shape("resize target must be positive"));
    }
    if (h1, w1) == (h2, w2) {
        return Ok(pixels.clone());
    }
    let src = pixels
        .as_slice()
        .expect("ImageRecord pixels are standard layout");
    let mut out = vec![0.0f64; c * h2 * w2];
    let sy = h1 as f64 / h2 as f64;
    let sx = w1 as f64 / w2 as f64;
    // Column sample positions are shared by every output row.
    let cols: Vec<(usize, usize, f64)> = (0..w2)
        .map(|jo| {
            let x = ((jo as f64 + 0.5) * sx - 0.5).clamp(0.0, (w1 - 1) as f64);
            let j0 = x.floor() as usize;
            let j1 = (j0 + 1).min(w1 - 1);
            (j0, j1, x - j0 as f64)
        })
        .collect();
    exec::par_chunks_mut(&mut out, w2, |row_idx, row| {
        let ch = row_idx / h2;
        let io = row_idx % h2;
        let y = ((io as f64 + 0.5) * sy - 0.5).clamp(0.0, (h1 - 1) as f64);
        let i0 = y.floor() as usize;
        let i1 = (i0 + 1).min(h1 - 1);
        let fy = y - i0 as f64;
        let base0 = ch * h1 * w1 + i0 * w1;
        let base1 = ch * h1 * w1 + i1 * w1;
        for (jo, &(j0, j1, fx)) in cols.iter().enumerate() {
            let a = src[base0 + j0];
            let b = src[base0 + j1];
            let c_ = src[base1 + j0];
            let d = src[base1 + j1];
            let top = a + (b - a) * fx;
            let bot = c_ + (d - c_) * fx;
            row[jo] = top + (bot - top) * fy;
        }
    });
    Ok(Array3::from_shape_vec((c, h2, w2), out).expect("constructed to size"))
}

/// Resize a record's pixels and scale its landmark coordinates analytically
/// by `(h_new / H, w_new / W)`. The coordinate map is linear and invertible,
/// so mapping down and back up is exact arithmetic, independent of the image
/// resampling.
pub fn resize_with_landmarks(rec: &ImageRecord, size: (usize, usize)) -> Result<ImageRecord> {
    let from = rec.size();
    let pixels = resize_image(&rec.pixels, size)?;
    let (si, sj) = coord_scale(from, size);
    let landmarks = rec.landmarks.as_ref().map(|lm| {
        LandmarkSet::new(
            lm.domain_id,
            lm.coords.iter().map(|&(i, j)| (i * si, j * sj)).collect(),
        )
    });
    Ok(ImageRecord {
        image_id: rec.image_id.clone(),
        pixels,
        domain_id: rec.domain_id,
        landmarks,
    })
}
