//! Evaluation metrics: mean radial error (MRE) and successful detection
//! rates (SDR), with optional physical calibration and strict unit
//! discipline — pixel-unit errors can never be compared against millimeter
//! thresholds.

use serde::{Deserialize, Serialize};

use crate::domain::LandmarkSet;
use crate::error::{Result, UodError};

/// Unit a measured error is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Px,
    Mm,
}

impl std::fmt::Display for Unit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Unit::Px => "px",
            Unit::Mm => "mm",
        })
    }
}

/// Conversion from pixel distances to the reporting unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    /// Reported units per pixel.
    pub factor: f64,
    pub unit: Unit,
}

impl Spacing {
    /// Report raw pixel distances.
    pub fn pixels() -> Self {
        Spacing { factor: 1.0, unit: Unit::Px }
    }

    /// Fixed physical resolution in millimeters per pixel.
    pub fn mm_per_px(factor: f64) -> Result<Self> {
        if factor <= 0.0 || !factor.is_finite() {
            return Err(UodError::validation(format!("spacing must be positive, got {factor}")));
        }
        Ok(Spacing { factor, unit: Unit::Mm })
    }
}

/// Detection thresholds, strictly increasing, in a fixed unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub values: Vec<f64>,
    pub unit: Unit,
}

impl Thresholds {
    pub fn new(values: Vec<f64>, unit: Unit) -> Result<Self> {
        if values.is_empty() {
            return Err(UodError::validation("threshold list is empty"));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(UodError::validation(format!(
                "thresholds must be strictly increasing, got {values:?}"
            )));
        }
        Ok(Thresholds { values, unit })
    }
}

/// Per-landmark radial (Euclidean) errors in pixels.
pub fn radial_errors(pred: &LandmarkSet, gt: &LandmarkSet) -> Result<Vec<f64>> {
    if pred.coords.len() != gt.coords.len() {
        return Err(UodError::validation(format!(
            "landmark count mismatch: {} predictions vs {} ground truth",
            pred.coords.len(),
            gt.coords.len()
        )));
    }
    Ok(pred
        .coords
        .iter()
        .zip(&gt.coords)
        .map(|(&(pi, pj), &(gi, gj))| (pi - gi).hypot(pj - gj))
        .collect())
}

/// Mean radial error in the spacing's unit.
pub fn mre(pred: &LandmarkSet, gt: &LandmarkSet, spacing: &Spacing) -> Result<f64> {
    let errs = radial_errors(pred, gt)?;
    if errs.is_empty() {
        return Err(UodError::validation("cannot average zero landmarks"));
    }
    Ok(errs.iter().sum::<f64>() * spacing.factor / errs.len() as f64)
}

/// Successful detection rate, in percent, at each threshold: the fraction of
/// landmarks with radial error `<= t` (inclusive, as the formula's delta
/// function is written). Thresholds and spacing must agree on the unit.
pub fn sdr(
    pred: &LandmarkSet,
    gt: &LandmarkSet,
    thresholds: &Thresholds,
    spacing: &Spacing,
) -> Result<Vec<f64>> {
    if thresholds.unit != spacing.unit {
        return Err(UodError::validation(format!(
            "unit mismatch: thresholds in {} but errors in {}",
            thresholds.unit, spacing.unit
        )));
    }
    let errs = radial_errors(pred, gt)?;
    if errs.is_empty() {
        return Err(UodError::validation("cannot rate zero landmarks"));
    }
    Ok(thresholds
        .values
        .iter()
        .map(|&t| {
            let hits = errs.iter().filter(|&&e| e * spacing.factor <= t).count();
            100.0 * hits as f64 / errs.len() as f64
        })
        .collect())
}

/// Per-image calibration from the two wrist endpoints, which are 50 mm apart
/// in physical space: `spacing = 50 / ||p - q||`.
pub fn wrist_calibration(p: (f64, f64), q: (f64, f64)) -> Result<Spacing> {
    let dist = (p.0 - q.0).hypot(p.1 - q.1);
    if dist == 0.0 {
        return Err(UodError::validation("coincident calibration endpoints"));
    }
    Spacing::mm_per_px(50.0 / dist)
}

/// Accumulates per-landmark errors across the images of one domain.
///
/// Landmarks the decoder flagged (all-zero heatmap channel) are counted in
/// `failed` and in every SDR denominator as never detected, but excluded from
/// the MRE average so one degenerate channel cannot hide behind an infinity.
#[derive(Debug, Clone)]
pub struct ErrorAccumulator {
    per_landmark: Vec<Vec<f64>>,
    unit: Unit,
    failed: usize,
    images: usize,
}

impl ErrorAccumulator {
    pub fn new(num_landmarks: usize, unit: Unit) -> Self {
        ErrorAccumulator {
            per_landmark: vec![Vec::new(); num_landmarks],
            unit,
            failed: 0,
            images: 0,
        }
    }

    /// Record one image's predictions (`None` = flagged landmark).
    pub fn add(
        &mut self,
        pred: &[Option<(f64, f64)>],
        gt: &LandmarkSet,
        spacing: &Spacing,
    ) -> Result<()> {
        if spacing.unit != self.unit {
            return Err(UodError::validation(format!(
                "unit mismatch: accumulator in {} but spacing yields {}",
                self.unit, spacing.unit
            )));
        }
        if pred.len() != gt.coords.len() || pred.len() != self.per_landmark.len() {
            return Err(UodError::validation(format!(
                "landmark count mismatch: {} predictions vs {} ground truth vs {} tracked",
                pred.len(),
                gt.coords.len(),
                self.per_landmark.len()
            )));
        }
        for (n, (p, &(gi, gj))) in pred.iter().zip(&gt.coords).enumerate() {
            match p {
                Some((pi, pj)) => {
                    self.per_landmark[n].push((pi - gi).hypot(pj - gj) * spacing.factor)
                }
                None => self.failed += 1,
            }
        }
        self.images += 1;
        Ok(())
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn failed(&self) -> usize {
        self.failed
    }

    /// Mean radial error over all recorded (image, landmark) pairs.
    pub fn mre(&self) -> f64 {
        let (sum, n) = self
            .per_landmark
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, n), &e| (s + e, n + 1));
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }

    /// Mean radial error per landmark index.
    pub fn per_landmark_mre(&self) -> Vec<f64> {
        self.per_landmark
            .iter()
            .map(|errs| {
                if errs.is_empty() {
                    f64::NAN
                } else {
                    errs.iter().sum::<f64>() / errs.len() as f64
                }
            })
            .collect()
    }

    /// SDR (percent) at each threshold; flagged landmarks count as misses.
    pub fn sdr(&self, thresholds: &Thresholds) -> Result<Vec<f64>> {
        if thresholds.unit != self.unit {
            return Err(UodError::validation(format!(
                "unit mismatch: thresholds in {} but errors in {}",
                thresholds.unit, self.unit
            )));
        }
        let total = self.per_landmark.iter().map(Vec::len).sum::<usize>() + self.failed;
        if total == 0 {
            return Err(UodError::validation("no recorded landmarks"));
        }
        Ok(thresholds
            .values
            .iter()
            .map(|&t| {
                let hits =
                    self.per_landmark.iter().flatten().filter(|&&e| e <= t).count();
                100.0 * hits as f64 / total as f64
            })
            .collect())
    }

    /// Summarize into a serializable per-domain report.
    pub fn report(&self, domain: String, thresholds: &Thresholds) -> Result<DomainReport> {
        Ok(DomainReport {
            domain,
            num_images: self.images,
            num_landmarks: self.per_landmark.len(),
            failed: self.failed,
            mre: self.mre(),
            per_landmark_mre: self.per_landmark_mre(),
            sdr: self.sdr(thresholds)?,
            unit: self.unit,
        })
    }
}

/// Evaluation summary for one domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: String,
    pub num_images: usize,
    pub num_landmarks: usize,
    /// Landmarks the decoder flagged as undetectable.
    pub failed: usize,
    pub mre: f64,
    pub per_landmark_mre: Vec<f64>,
    pub sdr: Vec<f64>,
    pub unit: Unit,
}

/// Full evaluation report across domains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Thresholds,
    pub domains: Vec<DomainReport>,
}

impl EvalReport {
    /// Render as a fixed-width human-readable table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let ts = &self.thresholds.values;
        out.push_str(&format!("{:<12} {:>7} {:>6} {:>10}", "domain", "images", "fail", "MRE"));
        for t in ts {
            out.push_str(&format!(" {:>9}", format!("SDR@{t}")));
        }
        out.push('\n');
        for d in &self.domains {
            out.push_str(&format!(
                "{:<12} {:>7} {:>6} {:>7.3} {}",
                d.domain, d.num_images, d.failed, d.mre, d.unit
            ));
            for s in &d.sdr {
                out.push_str(&format!(" {:>8.2}%", s));
            }
            out.push('\n');
        }
        out
    }
}
