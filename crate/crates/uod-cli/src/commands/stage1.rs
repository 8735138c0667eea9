//! `uod stage1` — train the self-supervised contrastive matching model on
//! the training splits of one or more dataset directories.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use uod::data::load_domains;
use uod::error::Result;
use uod::stage1::{save_stage1, train_stage1, Stage1Config};

use crate::config::apply_config_file;
use crate::manifest::{prepare_out_dir, RunManifest};
use crate::pipeline::{split_records, SplitArg};

#[derive(Debug, Args)]
pub struct Stage1Args {
    /// Dataset directories, one per domain; order fixes the domain ids.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Output directory for stage1.ckpt, loss.csv, and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file applied over the preset defaults (flags win last).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from desk-scale defaults (64 px, short schedule) instead of
    /// the full-scale defaults (384 px, 1000 epochs).
    #[arg(long)]
    pub desk: bool,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Encoder channel schedule, comma-separated (e.g. 16,32,64,128,256).
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

/// Effective config: preset defaults, then the config file, then flags.
pub fn effective_config(args: &Stage1Args) -> Result<Stage1Config> {
    let seed = args.seed.unwrap_or(0);
    let base = if args.desk {
        Stage1Config::desk(seed)
    } else {
        Stage1Config { seed, ..Stage1Config::default() }
    };
    let mut config = apply_config_file(base, args.config.as_deref())?;
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
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = &args.channels {
        config.channels = v.clone();
    }
    Ok(config)
}

/// One-line echo of the hyperparameters a run will use.
pub fn echo_line(config: &Stage1Config) -> String {
    format!(
        "stage1: img_size={} lr={} batch={} epochs={} seed={}",
        config.image_size, config.lr, config.batch_size, config.epochs, config.seed
    )
}

pub fn run(args: &Stage1Args) -> Result<()> {
    let mut manifest = RunManifest::start("stage1");
    let config = effective_config(args)?;
    println!("{}", echo_line(&config));
    prepare_out_dir(&args.out, args.force)?;

    let (registry, records, splits) = load_domains(&args.data)?;
    let train = split_records(&records, &splits, SplitArg::Train);
    let artifacts = train_stage1(&config, &registry, &train)?;

    let specs: Vec<_> = registry.iter().cloned().collect();
    let ckpt = args.out.join("stage1.ckpt");
    save_stage1(&ckpt, &artifacts, &config, &specs)?;

    let mut csv = String::from("epoch,loss\n");
    for (e, loss) in artifacts.loss_curve.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", e + 1, loss));
    }
    let loss_csv = args.out.join("loss.csv");
    fs::write(&loss_csv, csv)?;

    println!(
        "trained {} epochs on {} domains; final loss {:.6}",
        artifacts.loss_curve.len(),
        registry.len(),
        artifacts.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    for root in &args.data {
        manifest.input_dir(root);
    }
    manifest.output_file(&ckpt)?;
    manifest.output_file(&loss_csv)?;
    manifest.config(&config)?;
    manifest.seeds = vec![config.seed];
    manifest.write(&args.out)?;
    println!("model: {}", ckpt.display());
    Ok(())
}
