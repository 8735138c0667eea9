//! `uod label` — pseudo-label the training split of each domain by matching
//! one-shot annotations through a trained stage I model. Writes one label
//! store per domain under the output directory.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use serde_json::json;
use uod::data::load_domains;
use uod::error::{Result, UodError};
use uod::stage1::{load_stage1, LabelOptions};

use crate::config::parse_assignment;
use crate::manifest::{prepare_out_dir, sha256_file, RunManifest};
use crate::pipeline::{
    check_domains_match, label_records, resolve_oneshot, split_records, SplitArg,
};

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// Stage I model checkpoint (stage1.ckpt).
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directories, in the order the model was trained on.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Output directory; receives one store subdirectory per domain.
    #[arg(long)]
    pub out: PathBuf,
    /// Override a domain's one-shot image: NAME=IMAGE_ID (repeatable).
    #[arg(long = "oneshot", value_name = "NAME=ID")]
    pub oneshot: Vec<String>,
    /// Augmented copies of each one-shot patch to average (0 = raw patch).
    #[arg(long, default_value_t = 0)]
    pub augment_average: usize,
    /// Seed for the augmentation sampler.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

pub fn run(args: &LabelArgs) -> Result<()> {
    let mut manifest = RunManifest::start("label");
    let mut overrides = BTreeMap::new();
    for raw in &args.oneshot {
        let (name, id) = parse_assignment(raw)?;
        overrides.insert(name, id);
    }

    let model = load_stage1(&args.model)?;
    let checkpoint_hash = sha256_file(&args.model)?;
    let (registry, records, splits) = load_domains(&args.data)?;
    check_domains_match(&model.domains, &registry)?;
    for name in overrides.keys() {
        if registry.id_by_name(name).is_none() {
            return Err(UodError::config(format!(
                "--oneshot names unknown domain {name:?}"
            )));
        }
    }
    prepare_out_dir(&args.out, args.force)?;

    let train = split_records(&records, &splits, SplitArg::Train);
    let opts = LabelOptions {
        augment_average: args.augment_average,
        checkpoint_hash,
        seed: args.seed,
        ..LabelOptions::default()
    };
    let mut store_dirs = Vec::new();
    for spec in registry.iter() {
        let d = spec.domain_id;
        let oneshot = resolve_oneshot(
            spec,
            &train[d],
            &splits[d],
            overrides.get(&spec.name).map(String::as_str),
        )?;
        let store = label_records(
            &model.net,
            &registry,
            oneshot,
            &train[d],
            model.config.image_size,
            &opts,
        )?;
        let dir = args.out.join(&spec.name);
        store.save(&dir)?;
        println!(
            "{}: labeled {} images from one-shot {:?} ({} border-clamped landmarks)",
            spec.name,
            store.entries.len(),
            store.oneshot_id,
            store.clamped_landmarks.len()
        );
        manifest.output_dir(&dir);
        store_dirs.push(dir);
    }

    manifest.input_file(&args.model)?;
    for root in &args.data {
        manifest.input_dir(root);
    }
    manifest.config(&json!({
        "image_size": model.config.image_size,
        "augment_average": args.augment_average,
        "seed": args.seed,
        "oneshot_overrides": overrides,
    }))?;
    manifest.seeds = vec![args.seed];
    manifest.write(&args.out)?;
    Ok(())
}
