//! `uod eval` — run a trained detector over a dataset split and report MRE
//! and SDR per domain, as a table on stdout and optionally as
//! `report.json`/`report.csv` in an output directory.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde_json::json;
use uod::data::load_domains;
use uod::error::{Result, UodError};
use uod::metrics::{ErrorAccumulator, EvalReport, Thresholds, Unit};
use uod::stage2::{predict, Stage2Model};

use crate::manifest::{prepare_out_dir, RunManifest};
use crate::pipeline::{check_domains_match, spacing_for, split_records, SplitArg, UnitArg};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Retained model checkpoint (best.ckpt).
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directories, in the order the model was trained on.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Report directory (report.json, report.csv, manifest.json); the table
    /// always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Which split to evaluate.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// SDR thresholds, comma-separated, in the reporting unit.
    #[arg(long, value_delimiter = ',', default_values_t = [2.0, 2.5, 3.0, 4.0])]
    pub thresholds: Vec<f64>,
    /// Reporting unit; millimetres use each domain's pixel-spacing rule.
    #[arg(long, value_enum, default_value_t = UnitArg::Mm)]
    pub unit: UnitArg,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

/// Render a report as CSV, one row per domain.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("domain,images,failed,mre,unit");
    for t in &report.thresholds.values {
        out.push_str(&format!(",sdr@{t}"));
    }
    out.push('\n');
    for d in &report.domains {
        out.push_str(&format!(
            "{},{},{},{},{}",
            d.domain, d.num_images, d.failed, d.mre, d.unit
        ));
        for s in &d.sdr {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
    }
    out
}

pub fn run(args: &EvalArgs) -> Result<EvalReport> {
    let mut manifest = RunManifest::start("eval");
    let model = Stage2Model::load(&args.model)?;
    let (registry, records, splits) = load_domains(&args.data)?;
    check_domains_match(&model.domains, &registry)?;

    let unit: Unit = args.unit.into();
    let thresholds = Thresholds::new(args.thresholds.clone(), unit)?;
    let subset = split_records(&records, &splits, args.split);

    let mut domains = Vec::with_capacity(registry.len());
    for spec in registry.iter() {
        let d = spec.domain_id;
        if subset[d].is_empty() {
            return Err(UodError::data(format!(
                "domain {:?} has no images in the requested split",
                spec.name
            )));
        }
        let mut acc = ErrorAccumulator::new(spec.num_landmarks, unit);
        for rec in &subset[d] {
            let gt = rec.landmarks.as_ref().ok_or_else(|| {
                UodError::data(format!(
                    "image {:?} of domain {:?} has no ground-truth landmarks",
                    rec.image_id, spec.name
                ))
            })?;
            let pred = predict(&model, &rec.pixels, d)?;
            let spacing = spacing_for(spec, gt, unit)?;
            acc.add(&pred.landmarks, gt, &spacing)?;
        }
        domains.push(acc.report(spec.name.clone(), &thresholds)?);
    }
    let report = EvalReport { thresholds, domains };
    print!("{}", report.table());

    if let Some(out) = &args.out {
        prepare_out_dir(out, args.force)?;
        let json_path = out.join("report.json");
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| UodError::config(format!("report encode: {e}")))?;
        fs::write(&json_path, text + "\n")?;
        let csv_path = out.join("report.csv");
        fs::write(&csv_path, report_csv(&report))?;

        manifest.input_file(&args.model)?;
        for root in &args.data {
            manifest.input_dir(root);
        }
        manifest.output_file(&json_path)?;
        manifest.output_file(&csv_path)?;
        manifest.config(&json!({
            "split": format!("{:?}", args.split).to_lowercase(),
            "thresholds": args.thresholds,
            "unit": unit,
        }))?;
        manifest.write(out)?;
    }
    Ok(report)
}
