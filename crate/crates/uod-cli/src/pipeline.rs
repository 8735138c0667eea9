//! Orchestration helpers shared by the commands: split handling, registry
//! compatibility checks, native-frame pseudo-labeling, and per-image metric
//! spacing.

use clap::ValueEnum;
use uod::conv_model::Stage1Net;
use uod::data::{coord_scale, resize_with_landmarks, Splits};
use uod::domain::{DomainRegistry, DomainSpec, ImageRecord, LandmarkSet, PixelSpacing};
use uod::error::{Result, UodError};
use uod::metrics::{Spacing, Unit};
use uod::stage1::{infer_pseudo_labels, LabelOptions, PseudoLabelStore};

/// Which split of a dataset a command reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

/// Reporting unit flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UnitArg {
    Px,
    Mm,
}

impl From<UnitArg> for Unit {
    fn from(u: UnitArg) -> Unit {
        match u {
            UnitArg::Px => Unit::Px,
            UnitArg::Mm => Unit::Mm,
        }
    }
}

/// Per-domain record subsets of one split, order preserved.
pub fn split_records(
    records: &[Vec<ImageRecord>],
    splits: &[Splits],
    which: SplitArg,
) -> Vec<Vec<ImageRecord>> {
    records
        .iter()
        .zip(splits)
        .map(|(recs, sp)| {
            recs.iter()
                .filter(|r| match which {
                    SplitArg::Train => sp.is_train(&r.image_id),
                    SplitArg::Test => sp.is_test(&r.image_id),
                })
                .cloned()
                .collect()
        })
        .collect()
}

/// Verify the datasets handed to a command line up with the domains a
/// checkpoint was trained on: same count, and per position the same name
/// and landmark count.
pub fn check_domains_match(expected: &[DomainSpec], registry: &DomainRegistry) -> Result<()> {
    let found: Vec<&DomainSpec> = registry.iter().collect();
    let describe = |specs: &[&DomainSpec]| -> String {
        specs
            .iter()
            .map(|s| format!("{}({})", s.name, s.num_landmarks))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let expected_refs: Vec<&DomainSpec> = expected.iter().collect();
    let ok = expected.len() == found.len()
        && expected
            .iter()
            .zip(&found)
            .all(|(e, f)| e.name == f.name && e.num_landmarks == f.num_landmarks);
    if !ok {
        return Err(UodError::domain(format!(
            "checkpoint domains [{}] do not match the given datasets [{}]; \
             pass the same dataset directories in the same order as at training time",
            describe(&expected_refs),
            describe(&found)
        )));
    }
    Ok(())
}

/// Resolve the one-shot record of a domain: the override id if given, the
/// split's recorded one-shot otherwise. The one-shot must be a training
/// image; test ids are refused so evaluation images can never leak
/// annotations into training.
pub fn resolve_oneshot<'r>(
    spec: &DomainSpec,
    records: &'r [ImageRecord],
    splits: &Splits,
    override_id: Option<&str>,
) -> Result<&'r ImageRecord> {
    let id = override_id.unwrap_or(&splits.oneshot_id);
    if splits.is_test(id) {
        return Err(UodError::validation(format!(
            "one-shot {id:?} of domain {:?} is in the test split; \
             the one-shot must be a training image",
            spec.name
        )));
    }
    if !splits.is_train(id) {
        return Err(UodError::validation(format!(
            "one-shot {id:?} is not an image id of domain {:?}",
            spec.name
        )));
    }
    records
        .iter()
        .find(|r| r.image_id == id)
        .ok_or_else(|| {
            UodError::data(format!(
                "one-shot {id:?} of domain {:?} is missing from the loaded records",
                spec.name
            ))
        })
}

/// Pseudo-label `records` (native resolution) from the one-shot: resize
/// everything to the stage I working size, match, and map the estimates
/// back into each image's native pixel frame.
pub fn label_records(
    net: &Stage1Net,
    registry: &DomainRegistry,
    oneshot: &ImageRecord,
    records: &[ImageRecord],
    image_size: usize,
    opts: &LabelOptions,
) -> Result<PseudoLabelStore> {
    let work = (image_size, image_size);
    let oneshot_work = resize_with_landmarks(oneshot, work)?;
    let unlabeled: Vec<ImageRecord> = records
        .iter()
        .map(|r| resize_with_landmarks(r, work))
        .collect::<Result<_>>()?;
    let mut store = infer_pseudo_labels(net, registry, &oneshot_work, &unlabeled, opts)?;
    for rec in records {
        let scale = coord_scale(work, rec.size());
        if let Some(marks) = store.entries.get_mut(&rec.image_id) {
            for mark in marks {
                mark.coord = (mark.coord.0 * scale.0, mark.coord.1 * scale.1);
            }
        }
    }
    Ok(store)
}

/// Pixel-to-report-unit spacing for one image. Millimetre reporting uses the
/// domain's spacing rule; calibrated domains derive a per-image factor from
/// the two designated ground-truth landmarks.
pub fn spacing_for(spec: &DomainSpec, gt: &LandmarkSet, unit: Unit) -> Result<Spacing> {
    match unit {
        Unit::Px => Ok(Spacing::pixels()),
        Unit::Mm => match &spec.spacing {
            PixelSpacing::MmPerPx(f) => Spacing::mm_per_px(*f),
            PixelSpacing::Calibrated(rule) => {
                let get = |k: usize| {
                    gt.coords.get(k).copied().ok_or_else(|| {
                        UodError::validation(format!(
                            "calibration landmark {k} outside the {} ground-truth landmarks",
                            gt.coords.len()
                        ))
                    })
                };
                let p = get(rule.p_index)?;
                let q = get(rule.q_index)?;
                let dist = (p.0 - q.0).hypot(p.1 - q.1);
                if dist == 0.0 {
                    return Err(UodError::validation(
                        "coincident calibration landmarks; cannot derive spacing",
                    ));
                }
                Spacing::mm_per_px(rule.distance_mm / dist)
            }
        },
    }
}
