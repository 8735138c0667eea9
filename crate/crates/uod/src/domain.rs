//! Domain registry and shared vocabulary types.
//!
//! A *domain* is one anatomical dataset family: it owns a landmark count, a
//! native image geometry, and a pixel-spacing rule used when metrics are
//! reported in millimetres. Every model in the crate dispatches its
//! domain-specific parameter groups on the dense ids handed out here.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UodError};
use ndarray::Array3;

pub type DomainId = usize;

/// How pixel distances of a domain convert to physical millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PixelSpacing {
    /// Fixed scanner resolution, identical for every image of the domain.
    MmPerPx(f64),
    /// Per-image calibration from two designated landmarks with a known
    /// physical separation (e.g. the two endpoints of the wrist).
    Calibrated(CalibrationRule),
}

/// Calibration rule: landmarks `p_index` and `q_index` are `distance_mm`
/// apart in physical space; spacing follows as `distance_mm / ||p - q||`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRule {
    pub p_index: usize,
    pub q_index: usize,
    pub distance_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Dense index assigned by the registry at registration time.
    pub domain_id: DomainId,
    pub name: String,
    pub num_landmarks: usize,
    /// (height, width) in native pixels.
    pub native_size: (usize, usize),
    pub channels: usize,
    pub spacing: PixelSpacing,
}

impl DomainSpec {
    pub fn new(
        name: impl Into<String>,
        num_landmarks: usize,
        native_size: (usize, usize),
        channels: usize,
        spacing: PixelSpacing,
    ) -> Self {
        DomainSpec {
            domain_id: 0,
            name: name.into(),
            num_landmarks,
            native_size,
            channels,
            spacing,
        }
    }

    fn check(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(UodError::domain("domain name must be non-empty"));
        }
        if self.num_landmarks == 0 {
            return Err(UodError::domain("num_landmarks must be >= 1"));
        }
        if self.native_size.0 == 0 || self.native_size.1 == 0 {
            return Err(UodError::domain("native_size must be positive"));
        }
        if self.channels == 0 {
            return Err(UodError::domain("channels must be positive"));
        }
        if let PixelSpacing::MmPerPx(s) = self.spacing {
            if !(s.is_finite() && s > 0.0) {
                return Err(UodError::domain("mm-per-px spacing must be positive"));
            }
        }
        if let PixelSpacing::Calibrated(r) = &self.spacing {
            if r.p_index == r.q_index {
                return Err(UodError::domain("calibration endpoints must differ"));
            }
            if r.p_index >= self.num_landmarks || r.q_index >= self.num_landmarks {
                return Err(UodError::domain("calibration endpoint index out of range"));
            }
        }
        Ok(())
    }
}

/// Registry of all domains a model serves. Ids are dense (0, 1, 2, ...) and
/// iteration order is registration order. After [`DomainRegistry::seal`] the
/// registry rejects further registration and is safe to share read-only.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DomainRegistry {
    specs: Vec<DomainSpec>,
    sealed: bool,
}

impl DomainRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuild a sealed registry from a spec list (e.g. restored from a
    /// model checkpoint). Ids are reassigned by position, so the slice
    /// order must match the order used at training time.
    pub fn from_specs(specs: &[DomainSpec]) -> Result<Self> {
        let mut registry = Self::new();
        for spec in specs {
            registry.register_domain(spec.clone())?;
        }
        registry.seal();
        Ok(registry)
    }

    pub fn register_domain(&mut self, mut spec: DomainSpec) -> Result<DomainId> {
        if self.sealed {
            return Err(UodError::domain("registry is sealed"));
        }
        spec.check()?;
        if self.specs.iter().any(|s| s.name == spec.name) {
            return Err(UodError::domain(format!(
                "domain name {:?} already registered",
                spec.name
            )));
        }
        let id = self.specs.len();
        spec.domain_id = id;
        self.specs.push(spec);
        Ok(id)
    }

    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn spec(&self, d: DomainId) -> Result<&DomainSpec> {
        self.specs
            .get(d)
            .ok_or_else(|| UodError::domain(format!("unknown domain id {d}")))
    }

    pub fn id_by_name(&self, name: &str) -> Option<DomainId> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &DomainSpec> {
        self.specs.iter()
    }

    /// Landmark count of domain `d`.
    pub fn num_landmarks(&self, d: DomainId) -> Result<usize> {
        Ok(self.spec(d)?.num_landmarks)
    }
}

/// Ordered landmark coordinates of one image, as real-valued zero-indexed
/// (row, col) pixels. Sub-pixel positions are permitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub domain_id: DomainId,
    pub coords: Vec<(f64, f64)>,
}

impl LandmarkSet {
    pub fn new(domain_id: DomainId, coords: Vec<(f64, f64)>) -> Self {
        LandmarkSet { domain_id, coords }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.coords
            .iter()
            .all(|&(i, j)| i.is_finite() && j.is_finite())
    }
}

/// One image with metadata. Pixels are stored channel-first `(C, H, W)` with
/// intensities normalized to `[0, 1]` at ingestion regardless of source bit
/// depth.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub image_id: String,
    pub pixels: Array3<f64>,
    pub domain_id: DomainId,
    pub landmarks: Option<LandmarkSet>,
}

impl ImageRecord {
    /// (height, width) of the stored pixel array.
    pub fn size(&self) -> (usize, usize) {
        let s = self.pixels.shape();
        (s[1], s[2])
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }
}

/// One invariant violation found by [`validate_record`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Pixel array shape disagrees with the registry spec.
    Shape { expected: (usize, usize, usize), got: (usize, usize, usize) },
    /// Landmark count differs from the domain's `num_landmarks`.
    LandmarkCount { expected: usize, got: usize },
    /// A pixel value lies outside `[0, 1]`.
    PixelRange { value: f64 },
    /// A landmark coordinate is not finite.
    CoordNotFinite { index: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Shape { expected, got } => {
                write!(f, "shape mismatch: expected {expected:?}, got {got:?}")
            }
            Violation::LandmarkCount { expected, got } => {
                write!(f, "landmark count mismatch: expected {expected}, got {got}")
            }
            Violation::PixelRange { value } => {
                write!(f, "pixel range violation: value {value} outside [0, 1]")
            }
            Violation::CoordNotFinite { index } => {
                write!(f, "landmark {index} has a non-finite coordinate")
            }
        }
    }
}

/// Check one record against the registry. Returns every violation found; a
/// well-formed record yields an empty list. Pure: identical inputs produce
/// identical violation lists.
pub fn validate_record(rec: &ImageRecord, registry: &DomainRegistry) -> Result<Vec<Violation>> {
    let spec = registry.spec(rec.domain_id)?;
    let mut out = Vec::new();
    let got = rec.pixels.dim();
    let expected = (spec.channels, spec.native_size.0, spec.native_size.1);
    if (got.0, got.1, got.2) != expected {
        out.push(Violation::Shape {
            expected,
            got: (got.0, got.1, got.2),
        });
    }
    if let Some(v) = rec
        .pixels
        .iter()
        .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
    {
        out.push(Violation::PixelRange { value: *v });
    }
    if let Some(lm) = &rec.landmarks {
        if lm.len() != spec.num_landmarks {
            out.push(Violation::LandmarkCount {
                expected: spec.num_landmarks,
                got: lm.len(),
            });
        }
        for (i, &(a, b)) in lm.coords.iter().enumerate() {
            if !(a.is_finite() && b.is_finite()) {
                out.push(Violation::CoordNotFinite { index: i });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn spec(name: &str) -> DomainSpec {
        DomainSpec::new(name, 4, (8, 8), 1, PixelSpacing::MmPerPx(1.0))
    }

    fn record(d: DomainId, n_landmarks: usize) -> ImageRecord {
        ImageRecord {
            image_id: "img".into(),
            pixels: Array3::zeros((1, 8, 8)),
            domain_id: d,
            landmarks: Some(LandmarkSet::new(
                d,
                (0..n_landmarks).map(|i| (i as f64, i as f64)).collect(),
            )),
        }
    }

    #[test]
    fn registration_assigns_dense_ids() {
        let mut reg = DomainRegistry::new();
        assert_eq!(reg.register_domain(spec("head")).unwrap(), 0);
        assert_eq!(reg.register_domain(spec("hand")).unwrap(), 1);
        assert_eq!(reg.spec(1).unwrap().name, "hand");
    }

    #[test]
    fn duplicate_name_is_rejected() {
        let mut reg = DomainRegistry::new();
        reg.register_domain(spec("head")).unwrap();
        assert!(reg.register_domain(spec("head")).is_err());
    }

    #[test]
    fn sealed_registry_rejects_registration() {
        let mut reg = DomainRegistry::new();
        reg.register_domain(spec("head")).unwrap();
        reg.seal();
        assert!(reg.register_domain(spec("hand")).is_err());
    }

    #[test]
    fn from_specs_rebuilds_a_sealed_registry_with_positional_ids() {
        let mut reg = DomainRegistry::new();
        reg.register_domain(spec("head")).unwrap();
        reg.register_domain(spec("hand")).unwrap();
        reg.seal();
        let specs: Vec<DomainSpec> = reg.iter().cloned().collect();

        let rebuilt = DomainRegistry::from_specs(&specs).unwrap();
        assert!(rebuilt.is_sealed());
        assert_eq!(rebuilt.len(), 2);
        assert_eq!(rebuilt.spec(0).unwrap().name, "head");
        assert_eq!(rebuilt.spec(1).unwrap().name, "hand");
        assert_eq!(rebuilt.id_by_name("hand"), Some(1));

        // A stale id embedded in the spec is overwritten by position.
        let mut swapped = vec![specs[1].clone(), specs[0].clone()];
        swapped[0].domain_id = 7;
        let rebuilt = DomainRegistry::from_specs(&swapped).unwrap();
        assert_eq!(rebuilt.spec(0).unwrap().name, "hand");
        assert_eq!(rebuilt.spec(0).unwrap().domain_id, 0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut reg = DomainRegistry::new();
        let mut s = spec("x");
        s.num_landmarks = 0;
        assert!(reg.register_domain(s).is_err());
        let mut s = spec("y");
        s.native_size = (0, 4);
        assert!(reg.register_domain(s).is_err());
        let s = DomainSpec::new(
            "z",
            4,
            (8, 8),
            1,
            PixelSpacing::Calibrated(CalibrationRule {
                p_index: 2,
                q_index: 2,
                distance_mm: 50.0,
            }),
        );
        assert!(reg.register_domain(s).is_err());
    }

    #[test]
    fn validate_flags_each_violation() {
        let mut reg = DomainRegistry::new();
        reg.register_domain(spec("head")).unwrap();

        // well-formed
        assert!(validate_record(&record(0, 4), &reg).unwrap().is_empty());

        // one landmark short
        let v = validate_record(&record(0, 3), &reg).unwrap();
        assert!(matches!(v[0], Violation::LandmarkCount { expected: 4, got: 3 }));

        // out-of-range pixel
        let mut r = record(0, 4);
        r.pixels[[0, 3, 3]] = 1.5;
        let v = validate_record(&r, &reg).unwrap();
        assert!(v.iter().any(|v| matches!(v, Violation::PixelRange { .. })));

        // unknown domain is an error, not a violation
        assert!(validate_record(&record(7, 4), &reg).is_err());
    }

    #[test]
    fn validate_is_pure() {
        let mut reg = DomainRegistry::new();
        reg.register_domain(spec("head")).unwrap();
        let mut r = record(0, 3);
        r.pixels[[0, 0, 0]] = -0.5;
        let a = validate_record(&r, &reg).unwrap();
        let b = validate_record(&r, &reg).unwrap();
        assert_eq!(a, b);
    }
}
