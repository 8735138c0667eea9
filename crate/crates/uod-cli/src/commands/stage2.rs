//! `uod stage2` — train the supervised heatmap detector on the pseudo
//! labels, retaining the best-validation model. `--resume` continues a
//! previous run bit-identically from its saved optimizer and RNG state.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use uod::data::load_domains;
use uod::domain::DomainRegistry;
use uod::error::{Result, UodError};
use uod::nn::attention::BlockVariant;
use uod::stage1::PseudoLabelStore;
use uod::stage2::{EpochLog, Stage2Config, TrainState};

use crate::config::apply_config_file;
use crate::manifest::{prepare_out_dir, RunManifest};
use crate::pipeline::{check_domains_match, split_records, SplitArg};

/// Block variant flag (which domain-adaptive pieces the blocks carry).
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    /// Shared blocks only.
    Base,
    /// Per-domain diagonal scalings.
    D,
    /// Per-domain query projections.
    Q,
    /// Both adaptations.
    Full,
}

impl From<VariantArg> for BlockVariant {
    fn from(v: VariantArg) -> BlockVariant {
        match v {
            VariantArg::Base => BlockVariant::Base,
            VariantArg::D => BlockVariant::D,
            VariantArg::Q => BlockVariant::Q,
            VariantArg::Full => BlockVariant::Full,
        }
    }
}

#[derive(Debug, Args)]
pub struct Stage2Args {
    /// Dataset directories, one per domain; order fixes the domain ids.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Pseudo-label root holding one store directory per domain name.
    #[arg(long)]
    pub labels: PathBuf,
    /// Output directory for state.ckpt, best.ckpt, log.csv, manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file applied over the preset defaults (flags win last).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from desk-scale defaults (64 px, short schedule) instead of
    /// the full-scale defaults (576 px, 300 epochs).
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
    /// Target heatmap truncation radius, in working-size pixels.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Target heatmap exponential weighting base.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue the run saved in OUT (state.ckpt); config flags other than
    /// --epochs are refused so the resumed run cannot silently diverge from
    /// its recorded configuration.
    #[arg(long)]
    pub resume: bool,
    /// Write into a non-empty output directory (implied by --resume).
    #[arg(long)]
    pub force: bool,
}

/// Effective config: preset defaults, then the config file, then flags.
pub fn effective_config(args: &Stage2Args) -> Result<Stage2Config> {
    let seed = args.seed.unwrap_or(0);
    let base = if args.desk {
        Stage2Config::desk(seed)
    } else {
        Stage2Config { seed, ..Stage2Config::default() }
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
    if let Some(v) = args.sigma {
        config.sigma = v;
    }
    if let Some(v) = args.alpha {
        config.alpha = v;
    }
    if let Some(v) = args.variant {
        config.variant = v.into();
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    Ok(config)
}

/// One-line echo of the hyperparameters a run will use.
pub fn echo_line(config: &Stage2Config) -> String {
    format!(
        "stage2: img_size={} lr={} batch={} epochs={} variant={:?} sigma={} alpha={} seed={}",
        config.image_size,
        config.lr,
        config.batch_size,
        config.epochs,
        config.variant,
        config.sigma,
        config.alpha,
        config.seed
    )
}

/// Load one pseudo-label store per registered domain from `labels`, keyed
/// by domain name, and re-stamp each with its registry id.
pub fn load_stores(labels: &Path, registry: &DomainRegistry) -> Result<Vec<PseudoLabelStore>> {
    let mut stores = Vec::with_capacity(registry.len());
    for spec in registry.iter() {
        let dir = labels.join(&spec.name);
        let mut store = PseudoLabelStore::load(&dir)?;
        if store.domain_name != spec.name {
            return Err(UodError::domain(format!(
                "store {} was written for domain {:?}, expected {:?}",
                dir.display(),
                store.domain_name,
                spec.name
            )));
        }
        store.domain_id = spec.domain_id;
        stores.push(store);
    }
    Ok(stores)
}

fn append_log(path: &Path, logs: &[EpochLog], header: &str) -> Result<()> {
    let mut text = String::new();
    if !path.exists() {
        text.push_str(header);
        text.push('\n');
    }
    for log in logs {
        text.push_str(&log.csv_row());
        text.push('\n');
    }
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(text.as_bytes())?;
    Ok(())
}

pub fn run(args: &Stage2Args) -> Result<()> {
    let mut manifest = RunManifest::start("stage2");
    let (registry, records, splits) = load_domains(&args.data)?;
    let train = split_records(&records, &splits, SplitArg::Train);
    let stores = load_stores(&args.labels, &registry)?;

    let (state, logs) = if args.resume {
        let fixed_config = args.image_size.is_some()
            || args.batch.is_some()
            || args.lr.is_some()
            || args.sigma.is_some()
            || args.alpha.is_some()
            || args.variant.is_some()
            || args.seed.is_some()
            || args.config.is_some()
            || args.desk;
        if fixed_config {
            return Err(UodError::config(
                "--resume continues the saved configuration; only --epochs may change",
            ));
        }
        let mut state = TrainState::load(&args.out)?;
        check_domains_match(&state.domains, &registry)?;
        let until = args.epochs.unwrap_or(state.config.epochs);
        println!(
            "resuming at epoch {} of {} (best val loss so far: {})",
            state.epoch,
            until,
            state
                .best
                .as_ref()
                .map(|b| format!("{:.6} at epoch {}", b.val_loss, b.epoch))
                .unwrap_or_else(|| "none".into())
        );
        let logs = state.run_epochs(&train, &stores, until)?;
        (state, logs)
    } else {
        let config = effective_config(args)?;
        println!("{}", echo_line(&config));
        prepare_out_dir(&args.out, args.force)?;
        let mut state = TrainState::init(&config, &registry)?;
        let logs = state.run_epochs(&train, &stores, config.epochs)?;
        (state, logs)
    };

    state.save(&args.out)?;
    let specs: Vec<_> = registry.iter().cloned().collect();
    let log_csv = args.out.join("log.csv");
    append_log(&log_csv, &logs, &EpochLog::csv_header(&specs))?;

    if let Some(last) = logs.last() {
        println!(
            "epoch {}: train loss {:.6}, val loss {:.6}",
            last.epoch, last.train_loss, last.val_loss
        );
    }
    if let Some(best) = &state.best {
        println!("best model: epoch {} (val loss {:.6})", best.epoch, best.val_loss);
    }

    for root in &args.data {
        manifest.input_dir(root);
    }
    manifest.input_dir(&args.labels);
    manifest.output_file(&args.out.join("state.ckpt"))?;
    manifest.output_file(&args.out.join("best.ckpt"))?;
    manifest.output_file(&log_csv)?;
    manifest.config(&state.config)?;
    manifest.seeds = vec![state.config.seed];
    manifest.write(&args.out)?;
    println!("model: {}", args.out.join("best.ckpt").display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[derive(Parser)]
    struct Wrap {
        #[command(flatten)]
        args: Stage2Args,
    }

    fn parse(argv: &[&str]) -> Stage2Args {
        Wrap::try_parse_from(std::iter::once("x").chain(argv.iter().copied()))
            .unwrap()
            .args
    }

    #[test]
    fn default_echo_shows_full_scale_hyperparameters() {
        let args = parse(&["--data", "a", "--labels", "l", "--out", "o"]);
        let line = echo_line(&effective_config(&args).unwrap());
        assert!(line.contains("img_size=576 lr=0.0001 batch=8"), "{line}");
        assert!(line.contains("epochs=300"), "{line}");
        assert!(line.contains("sigma=3 alpha=10"), "{line}");
    }

    #[test]
    fn variant_flag_maps_to_block_variants() {
        let args = parse(&[
            "--data", "a", "--labels", "l", "--out", "o", "--variant", "base",
        ]);
        assert_eq!(effective_config(&args).unwrap().variant, BlockVariant::Base);
        let args = parse(&[
            "--data", "a", "--labels", "l", "--out", "o", "--variant", "q",
        ]);
        assert_eq!(effective_config(&args).unwrap().variant, BlockVariant::Q);
    }

    #[test]
    fn log_append_writes_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let row = EpochLog {
            epoch: 1,
            train_loss: 0.5,
            val_loss: 0.25,
            val_mre_px: vec![2.0],
        };
        append_log(&path, std::slice::from_ref(&row), "epoch,a,b,c").unwrap();
        let row2 = EpochLog { epoch: 2, ..row };
        append_log(&path, &[row2], "epoch,a,b,c").unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3, "{text}");
        assert!(lines[0].starts_with("epoch,"), "{text}");
        assert!(lines[1].starts_with("1,"), "{text}");
        assert!(lines[2].starts_with("2,"), "{text}");
    }
}
