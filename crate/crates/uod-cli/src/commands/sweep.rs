//! `uod sweep` — quantify how sensitive the pipeline is to the choice of
//! one-shot image. For each candidate one-shot id of the swept domain, the
//! contrastive stage is trained and the domain pseudo-labeled twice: once
//! "single" (the swept domain alone) and once "universal" (all domains
//! mixed). The report compares per-candidate MRE and the across-candidate
//! spread (max − min) of the two modes; a robust mode has a small spread.
//!
//! Stage I training is the expensive step and is shared across candidates:
//! per (seed, mode) the model is trained once and every candidate only
//! re-labels. With `--with-stage2` each (seed, mode, candidate) additionally
//! trains the detector on its pseudo labels and reports test MRE instead of
//! pseudo-label MRE.

use std::fmt;
use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;
use uod::data::load_domains;
use uod::domain::{DomainRegistry, DomainSpec, ImageRecord};
use uod::error::{Result, UodError};
use uod::metrics::{ErrorAccumulator, Spacing, Unit};
use uod::stage1::{train_stage1, LabelOptions, PseudoLabelStore, Stage1Config};
use uod::stage2::{predict, train_stage2, Stage2Config, Stage2Model};

use crate::config::apply_config_file;
use crate::manifest::{prepare_out_dir, RunManifest};
use crate::pipeline::{label_records, resolve_oneshot, split_records, SplitArg};

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Dataset directories, one per domain (at least two).
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Output directory for sweep.csv, summary.json, manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Candidate one-shot image ids within the swept domain (at least two).
    #[arg(long, value_delimiter = ',', required = true)]
    pub candidates: Vec<String>,
    /// Domain whose one-shot choice is swept (default: the first domain).
    #[arg(long)]
    pub swept_domain: Option<String>,
    /// Stage I training seeds; spreads are averaged across them.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    pub seeds: Vec<u64>,
    /// JSON config file for the stage I configuration (desk preset base).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Encoder channel schedule override, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    /// Also train stage II per run and report test MRE instead of
    /// pseudo-label MRE.
    #[arg(long)]
    pub with_stage2: bool,
    /// Stage II epochs when --with-stage2 is given (desk preset otherwise).
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Single,
    Universal,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Single => "single",
            Mode::Universal => "universal",
        })
    }
}

/// One (seed, mode, candidate) measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub mode: Mode,
    pub candidate: String,
    pub mre_px: f64,
}

/// Across-candidate spreads of one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSpreads {
    pub seed: u64,
    pub single_spread: f64,
    pub universal_spread: f64,
}

/// Full sweep report (also written as `summary.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub swept_domain: String,
    /// Unit of every MRE and spread in this summary.
    pub unit: String,
    pub with_stage2: bool,
    pub seeds: Vec<u64>,
    pub candidates: Vec<String>,
    pub rows: Vec<SweepRow>,
    pub per_seed: Vec<SeedSpreads>,
    pub mean_single_spread: f64,
    pub mean_universal_spread: f64,
}

fn effective_stage1(args: &SweepArgs, seed: u64) -> Result<Stage1Config> {
    let mut config = apply_config_file(Stage1Config::desk(seed), args.config.as_deref())?;
    config.seed = seed;
    if let Some(v) = args.image_size {
        config.image_size = v;
    }
    if let Some(v) = args.batch {
        config.batch_size = v;
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.lr {
        config.lr = v;
    }
    if let Some(v) = &args.channels {
        config.channels = v.clone();
    }
    Ok(config)
}

/// Mean radial error of a pseudo-label store against ground truth, in
/// native pixels over all labeled records.
fn store_mre(
    spec: &DomainSpec,
    records: &[ImageRecord],
    store: &PseudoLabelStore,
) -> Result<f64> {
    let mut acc = ErrorAccumulator::new(spec.num_landmarks, Unit::Px);
    for rec in records {
        let gt = rec.landmarks.as_ref().ok_or_else(|| {
            UodError::data(format!(
                "image {:?} has no ground-truth landmarks; the sweep needs fully \
                 annotated synthetic data to score pseudo labels",
                rec.image_id
            ))
        })?;
        let marks = store.entries.get(&rec.image_id).ok_or_else(|| {
            UodError::data(format!("no pseudo labels for image {:?}", rec.image_id))
        })?;
        let preds: Vec<Option<(f64, f64)>> = marks.iter().map(|m| Some(m.coord)).collect();
        acc.add(&preds, gt, &Spacing::pixels())?;
    }
    Ok(acc.mre())
}

/// Test MRE (native px) of a stage II model trained on the given stores.
#[allow(clippy::too_many_arguments)]
fn stage2_mre(
    args: &SweepArgs,
    seed: u64,
    registry: &DomainRegistry,
    train: &[Vec<ImageRecord>],
    stores: &[PseudoLabelStore],
    swept: usize,
    test: &[ImageRecord],
) -> Result<f64> {
    let mut config = Stage2Config::desk(seed);
    if let Some(e) = args.stage2_epochs {
        config.epochs = e;
    }
    let artifacts = train_stage2(&config, registry, train, stores)?;
    let model = Stage2Model::from_best(&artifacts.state)?;
    let spec = registry.spec(swept)?;
    let mut acc = ErrorAccumulator::new(spec.num_landmarks, Unit::Px);
    for rec in test {
        let gt = rec.landmarks.as_ref().ok_or_else(|| {
            UodError::data(format!("test image {:?} has no landmarks", rec.image_id))
        })?;
        let pred = predict(&model, &rec.pixels, swept)?;
        acc.add(&pred.landmarks, gt, &Spacing::pixels())?;
    }
    Ok(acc.mre())
}

fn spread(rows: &[SweepRow], seed: u64, mode: Mode) -> f64 {
    let values: Vec<f64> = rows
        .iter()
        .filter(|r| r.seed == seed && r.mode == mode)
        .map(|r| r.mre_px)
        .collect();
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    max - min
}

pub fn run(args: &SweepArgs) -> Result<SweepSummary> {
    let mut manifest = RunManifest::start("sweep");
    if args.candidates.len() < 2 {
        return Err(UodError::config(
            "a spread needs at least 2 one-shot candidates (--candidates)",
        ));
    }
    for (a, c) in args.candidates.iter().enumerate() {
        if args.candidates[..a].contains(c) {
            return Err(UodError::config(format!("duplicate candidate {c:?}")));
        }
    }
    if args.seeds.is_empty() {
        return Err(UodError::config("--seeds must name at least one seed"));
    }

    let (registry, records, splits) = load_domains(&args.data)?;
    if registry.len() < 2 {
        return Err(UodError::config(
            "the single-vs-universal comparison needs at least 2 domains",
        ));
    }
    let swept = match &args.swept_domain {
        Some(name) => registry.id_by_name(name).ok_or_else(|| {
            UodError::config(format!("--swept-domain {name:?} is not a loaded domain"))
        })?,
        None => 0,
    };
    let swept_spec = registry.spec(swept)?.clone();
    prepare_out_dir(&args.out, args.force)?;

    let train = split_records(&records, &splits, SplitArg::Train);
    let test = split_records(&records, &splits, SplitArg::Test);

    // Validate every candidate up front so a typo fails before training.
    for c in &args.candidates {
        resolve_oneshot(&swept_spec, &train[swept], &splits[swept], Some(c))?;
    }

    // Single-domain view of the swept domain: id re-stamped to 0.
    let single_registry = DomainRegistry::from_specs(&[swept_spec.clone()])?;
    let restamp = |records: &[ImageRecord]| -> Vec<ImageRecord> {
        records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.domain_id = 0;
                if let Some(lm) = &mut r.landmarks {
                    lm.domain_id = 0;
                }
                r
            })
            .collect()
    };
    let single_train = vec![restamp(&train[swept])];
    let single_test = restamp(&test[swept]);

    let opts = LabelOptions::default();
    let mut rows: Vec<SweepRow> = Vec::new();
    for &seed in &args.seeds {
        let config = effective_stage1(args, seed)?;
        for mode in [Mode::Single, Mode::Universal] {
            let (mode_registry, mode_train, mode_swept, mode_test) = match mode {
                Mode::Single => (&single_registry, &single_train, 0usize, &single_test),
                Mode::Universal => (&registry, &train, swept, &test[swept]),
            };
            let artifacts = train_stage1(&config, mode_registry, mode_train)?;

            // Non-swept domains keep their recorded one-shots; their stores
            // are shared by every candidate of this (seed, mode).
            let mut other_stores: Vec<Option<PseudoLabelStore>> =
                (0..mode_registry.len()).map(|_| None).collect();
            if args.with_stage2 {
                for spec in mode_registry.iter() {
                    let d = spec.domain_id;
                    if d == mode_swept {
                        continue;
                    }
                    let oneshot =
                        resolve_oneshot(spec, &mode_train[d], &splits[d], None)?;
                    other_stores[d] = Some(label_records(
                        &artifacts.net,
                        mode_registry,
                        oneshot,
                        &mode_train[d],
                        config.image_size,
                        &opts,
                    )?);
                }
            }

            for candidate in &args.candidates {
                let spec = mode_registry.spec(mode_swept)?;
                let oneshot = resolve_oneshot(
                    spec,
                    &mode_train[mode_swept],
                    &splits[swept],
                    Some(candidate),
                )?;
                let store = label_records(
                    &artifacts.net,
                    mode_registry,
                    oneshot,
                    &mode_train[mode_swept],
                    config.image_size,
                    &opts,
                )?;
                let mre_px = if args.with_stage2 {
                    let stores: Vec<PseudoLabelStore> = (0..mode_registry.len())
                        .map(|d| {
                            if d == mode_swept {
                                store.clone()
                            } else {
                                other_stores[d].clone().expect("labeled above")
                            }
                        })
                        .collect();
                    stage2_mre(args, seed, mode_registry, mode_train, &stores, mode_swept, mode_test)?
                } else {
                    store_mre(spec, &mode_train[mode_swept], &store)?
                };
                println!("seed={seed} mode={mode} candidate={candidate} mre={mre_px:.4}px");
                rows.push(SweepRow {
                    seed,
                    mode,
                    candidate: candidate.clone(),
                    mre_px,
                });
            }
        }
    }

    let per_seed: Vec<SeedSpreads> = args
        .seeds
        .iter()
        .map(|&seed| SeedSpreads {
            seed,
            single_spread: spread(&rows, seed, Mode::Single),
            universal_spread: spread(&rows, seed, Mode::Universal),
        })
        .collect();
    let mean = |pick: fn(&SeedSpreads) -> f64| {
        per_seed.iter().map(pick).sum::<f64>() / per_seed.len() as f64
    };
    let mean_single_spread = mean(|s| s.single_spread);
    let mean_universal_spread = mean(|s| s.universal_spread);
    let summary = SweepSummary {
        swept_domain: swept_spec.name.clone(),
        unit: "px".into(),
        with_stage2: args.with_stage2,
        seeds: args.seeds.clone(),
        candidates: args.candidates.clone(),
        rows,
        per_seed,
        mean_single_spread,
        mean_universal_spread,
    };
    println!(
        "spread (max−min MRE over candidates): single {:.4}px, universal {:.4}px (mean over {} seeds)",
        summary.mean_single_spread,
        summary.mean_universal_spread,
        summary.seeds.len()
    );

    let mut csv = String::from("seed,mode,candidate,mre_px\n");
    for row in &summary.rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.seed, row.mode, row.candidate, row.mre_px
        ));
    }
    let csv_path = args.out.join("sweep.csv");
    fs::write(&csv_path, csv)?;
    let json_path = args.out.join("summary.json");
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| UodError::config(format!("summary encode: {e}")))?;
    fs::write(&json_path, text + "\n")?;

    for root in &args.data {
        manifest.input_dir(root);
    }
    manifest.output_file(&csv_path)?;
    manifest.output_file(&json_path)?;
    manifest.config(&json!({
        "stage1": effective_stage1(args, args.seeds[0])?,
        "swept_domain": summary.swept_domain,
        "candidates": args.candidates,
        "seeds": args.seeds,
        "with_stage2": args.with_stage2,
        "stage2_epochs": args.stage2_epochs,
    }))?;
    manifest.seeds = args.seeds.clone();
    manifest.write(&args.out)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, mode: Mode, candidate: &str, mre: f64) -> SweepRow {
        SweepRow { seed, mode, candidate: candidate.into(), mre_px: mre }
    }

    #[test]
    fn spread_is_max_minus_min_within_one_seed_and_mode() {
        let rows = vec![
            row(0, Mode::Single, "a", 3.0),
            row(0, Mode::Single, "b", 1.0),
            row(0, Mode::Single, "c", 2.0),
            row(0, Mode::Universal, "a", 1.2),
            row(0, Mode::Universal, "b", 1.0),
            row(1, Mode::Single, "a", 100.0),
        ];
        assert_eq!(spread(&rows, 0, Mode::Single), 2.0);
        assert!((spread(&rows, 0, Mode::Universal) - 0.2).abs() < 1e-12);
        assert_eq!(spread(&rows, 1, Mode::Single), 0.0);
    }

    #[test]
    fn modes_serialize_snake_case_for_csv_and_json() {
        assert_eq!(Mode::Single.to_string(), "single");
        assert_eq!(Mode::Universal.to_string(), "universal");
        assert_eq!(serde_json::to_string(&Mode::Universal).unwrap(), "\"universal\"");
    }
}
