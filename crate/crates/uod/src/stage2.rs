//! Stage II supervised training: fit the domain-adaptive transformer to
//! pseudo-label heatmaps with binary cross-entropy on mixed multi-domain
//! data, retain the model with minimum validation loss, and run inference
//! with coordinates mapped back to native resolution.
//!
//! Validation uses the last tenth of each domain's training list, scored
//! against the same pseudo labels that supervise training (real labels exist
//! only for the one-shot images). Checkpoints come in two flavors: a
//! resumable optimizer state (`state.ckpt`) that continues bit-identically,
//! and the retained best model (`best.ckpt`) consumed by inference.

use std::path::Path;
use std::rc::Rc;

use ndarray::{s, Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{coord_scale, resize_image};
use crate::domain::{DomainId, DomainRegistry, DomainSpec, ImageRecord, LandmarkSet};
use crate::error::{Result, UodError};
use crate::heatmap::{decode_landmarks, encode_heatmaps, HeatmapStack};
use crate::metrics::{ErrorAccumulator, Spacing, Unit};
use crate::nn::adam::{Adam, RngState};
use crate::nn::attention::BlockVariant;
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, EntryRole};
use crate::nn::{Ctx, ParamSet, ParamTag};
use crate::stage1::{stack_batch, PseudoLabelStore};
use crate::tensor::Tape;
use crate::transformer::{DatrConfig, Stage2Net};

/// Fraction of each map's peak used when decoding predictions to points.
const DECODE_RATIO: f64 = 0.5;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Config {
    pub image_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Gaussian truncation radius of the target heatmaps, at working size.
    pub sigma: f64,
    /// Exponential weighting base of the target heatmaps.
    pub alpha: f64,
    /// Which domain-adaptive pieces the transformer blocks carry.
    pub variant: BlockVariant,
    pub seed: u64,
    /// Architecture template. `landmarks`, `in_channels`, and `variant` are
    /// stamped from the registry and the `variant` field at init time.
    pub arch: DatrConfig,
}

impl Default for Stage2Config {
    /// Full-scale defaults: 576×576 inputs, batch 8, 300 epochs, lr 1e-4.
    fn default() -> Self {
        Stage2Config {
            image_size: 576,
            batch_size: 8,
            epochs: 300,
            lr: 1e-4,
            sigma: 3.0,
            alpha: 10.0,
            variant: BlockVariant::Full,
            seed: 0,
            arch: DatrConfig::desk(Vec::new(), BlockVariant::Full),
        }
    }
}

impl Stage2Config {
    /// Desk-scale configuration: 64×64 synthetic images, short schedule, and
    /// a learning rate rescaled for the far smaller step budget.
    pub fn desk(seed: u64) -> Self {
        Stage2Config {
            image_size: 64,
            batch_size: 8,
            epochs: 40,
            lr: 1e-3,
            seed,
            ..Stage2Config::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(UodError::config("image size, batch size, and epochs must be positive"));
        }
        if self.lr <= 0.0 || self.sigma <= 0.0 || self.alpha <= 0.0 {
            return Err(UodError::config("lr, sigma, and alpha must be positive"));
        }
        let coarsest = self.arch.patch << (self.arch.dims.len() - 1);
        if self.image_size % coarsest != 0 {
            return Err(UodError::config(format!(
                "image size {} must be a multiple of the coarsest stride {coarsest}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// The architecture template stamped with this config's variant and the
    /// registry's domain layout.
    fn stamped_arch(&self, registry: &DomainRegistry) -> DatrConfig {
        let mut arch = self.arch.clone();
        arch.variant = self.variant;
        arch.landmarks = registry.iter().map(|spec| spec.num_landmarks).collect();
        arch.in_channels = registry.iter().map(|spec| spec.channels).next().unwrap_or(1);
        arch
    }
}

// ---------------------------------------------------------------------------
// BCE loss on heatmap stacks
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy between two heatmap stacks:
/// `-mean(t·ln p + (1−t)·ln(1−p))` with `p` clamped to `[ε, 1−ε]`, ε = 1e−7.
pub fn bce_loss(pred: &HeatmapStack, target: &HeatmapStack) -> Result<f64> {
    const EPS: f64 = 1e-7;
    if pred.maps.dim() != target.maps.dim() {
        return Err(UodError::shape(format!(
            "prediction stack {:?} and target stack {:?} differ",
            pred.maps.dim(),
            target.maps.dim()
        )));
    }
    let mut acc = 0.0;
    for (&p, &t) in pred.maps.iter().zip(target.maps.iter()) {
        if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&t) {
            return Err(UodError::validation(format!(
                "heatmap values outside [0, 1]: prediction {p}, target {t}"
            )));
        }
        acc -= t * p.max(EPS).ln() + (1.0 - t) * (1.0 - p).max(EPS).ln();
    }
    Ok(acc / pred.maps.len() as f64)
}

/// Error unless every value of a forward pass lies in `[0, 1]` (sigmoid
/// contract; also trips on NaN).
fn check_unit_range(values: &ArrayD<f64>, what: &str) -> Result<()> {
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(UodError::numeric(format!("{what} emitted value {v} outside [0, 1]")));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training data preparation
// ---------------------------------------------------------------------------

/// One training image resized to working size with its pseudo-label
/// coordinates in both frames.
struct Prepared {
    pixels: Array3<f64>,
    /// Pseudo-label coordinates at working size (heatmap targets).
    work_coords: Vec<(f64, f64)>,
    /// Pseudo-label coordinates at native size (validation reference).
    native_coords: Vec<(f64, f64)>,
    native_size: (usize, usize),
}

struct PreparedDomain {
    fit: Vec<Prepared>,
    val: Vec<Prepared>,
}

fn prepare_domain(
    spec: &DomainSpec,
    records: &[ImageRecord],
    pseudo: &PseudoLabelStore,
    size: usize,
) -> Result<PreparedDomain> {
    if records.len() < 2 {
        return Err(UodError::data(format!(
            "domain {:?} needs at least 2 training images to split off validation",
            spec.name
        )));
    }
    let mut all = Vec::with_capacity(records.len());
    for rec in records {
        let labels = pseudo.entries.get(&rec.image_id).ok_or_else(|| {
            UodError::data(format!(
                "no pseudo labels for training image {:?} of domain {:?}",
                rec.image_id, spec.name
            ))
        })?;
        if labels.len() != spec.num_landmarks {
            return Err(UodError::validation(format!(
                "image {:?} has {} pseudo labels, domain {:?} needs {}",
                rec.image_id,
                labels.len(),
                spec.name,
                spec.num_landmarks
            )));
        }
        let native = rec.size();
        let scale = coord_scale(native, (size, size));
        all.push(Prepared {
            pixels: resize_image(&rec.pixels, (size, size))?,
            work_coords: labels.iter().map(|l| (l.coord.0 * scale.0, l.coord.1 * scale.1)).collect(),
            native_coords: labels.iter().map(|l| l.coord).collect(),
            native_size: native,
        });
    }
    // The last tenth (rounded up) of each domain's list validates; training
    // never sees those images.
    let val_count = records.len().div_ceil(10);
    let fit = all.drain(..all.len() - val_count).collect();
    Ok(PreparedDomain { fit, val: all })
}

/// Encode a batch of per-image landmark targets as stacked heatmaps.
fn encode_batch_targets(
    items: &[&Prepared],
    d: DomainId,
    size: usize,
    sigma: f64,
    alpha: f64,
) -> Result<ArrayD<f64>> {
    let n = items[0].work_coords.len();
    let mut out = ArrayD::zeros(IxDyn(&[items.len(), n, size, size]));
    for (b, item) in items.iter().enumerate() {
        let set = LandmarkSet::new(d, item.work_coords.clone());
        let stack = encode_heatmaps(&set, (size, size), sigma, alpha)?;
        out.slice_mut(s![b, .., .., ..]).assign(&stack.maps);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Train state and the epoch loop
// ---------------------------------------------------------------------------

/// Parameter and buffer values captured at the best validation epoch.
#[derive(Debug, Clone)]
pub struct BestModel {
    pub epoch: usize,
    pub val_loss: f64,
    params: Vec<(String, ParamTag, ArrayD<f64>)>,
    buffers: Vec<(String, ParamTag, ArrayD<f64>)>,
}

impl BestModel {
    fn capture(set: &ParamSet, epoch: usize, val_loss: f64) -> Self {
        let grab = |shared: &[crate::nn::SharedParam]| {
            shared
                .iter()
                .map(|p| {
                    let p = p.borrow();
                    (p.name.clone(), p.tag, p.value.clone())
                })
                .collect()
        };
        BestModel { epoch, val_loss, params: grab(set.params()), buffers: grab(set.buffers()) }
    }

    /// Rebuild a plain parameter set holding the captured values.
    fn to_param_set(&self) -> ParamSet {
        let mut set = ParamSet::new();
        for (name, tag, value) in &self.params {
            set.param(name.clone(), *tag, value.clone());
        }
        for (name, tag, value) in &self.buffers {
            set.buffer(name.clone(), *tag, value.clone());
        }
        set
    }
}

/// Everything needed to continue training on the identical trajectory.
pub struct TrainState {
    pub params: ParamSet,
    pub net: Stage2Net,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    /// Epochs completed so far.
    pub epoch: usize,
    pub best: Option<BestModel>,
    pub config: Stage2Config,
    pub domains: Vec<DomainSpec>,
}

/// One row of the training progress log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Per-domain validation MRE in native pixels against pseudo labels.
    pub val_mre_px: Vec<f64>,
}

impl EpochLog {
    pub fn csv_header(domains: &[DomainSpec]) -> String {
        let mut head = String::from("epoch,train_loss,val_loss");
        for spec in domains {
            head.push_str(&format!(",val_mre_px_{}", spec.name));
        }
        head
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!("{},{},{}", self.epoch, self.train_loss, self.val_loss);
        for mre in &self.val_mre_px {
            row.push_str(&format!(",{mre}"));
        }
        row
    }
}

impl TrainState {
    /// Fresh training state for a sealed registry.
    pub fn init(config: &Stage2Config, registry: &DomainRegistry) -> Result<TrainState> {
        config.validate()?;
        if registry.is_empty() {
            return Err(UodError::config("registry has no domains"));
        }
        let arch = config.stamped_arch(registry);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let net = Stage2Net::new(&mut params, &mut rng, arch);
        Ok(TrainState {
            params,
            net,
            adam: Adam::new(config.lr),
            rng,
            epoch: 0,
            best: None,
            config: config.clone(),
            domains: registry.iter().cloned().collect(),
        })
    }

    /// Run training from the current epoch up to `until`, returning one log
    /// row per epoch run. Deterministic for a fixed state; aborts with a
    /// diagnostic on non-finite loss.
    pub fn run_epochs(
        &mut self,
        train: &[Vec<ImageRecord>],
        pseudo: &[PseudoLabelStore],
        until: usize,
    ) -> Result<Vec<EpochLog>> {
        if train.len() != self.domains.len() || pseudo.len() != self.domains.len() {
            return Err(UodError::config(
                "need one training set and one pseudo-label store per domain",
            ));
        }
        for (d, store) in pseudo.iter().enumerate() {
            if store.domain_id != d {
                return Err(UodError::domain(format!(
                    "pseudo-label store {d} tagged for domain {}",
                    store.domain_id
                )));
            }
        }
        let size = self.config.image_size;
        let mut prepared = Vec::with_capacity(self.domains.len());
        for (d, spec) in self.domains.iter().enumerate() {
            prepared.push(prepare_domain(spec, &train[d], &pseudo[d], size)?);
        }

        let mut log = Vec::new();
        while self.epoch < until {
            let train_loss = self.train_epoch(&prepared)?;
            let (val_loss, val_mre_px) = self.validate(&prepared)?;
            self.epoch += 1;
            if self.best.as_ref().is_none_or(|b| val_loss < b.val_loss) {
                self.best = Some(BestModel::capture(&self.params, self.epoch, val_loss));
            }
            log.push(EpochLog { epoch: self.epoch, train_loss, val_loss, val_mre_px });
        }
        Ok(log)
    }

    /// One pass over every domain's fit split with domain-homogeneous batches
    /// in round-robin domain order; returns the mean step loss.
    fn train_epoch(&mut self, prepared: &[PreparedDomain]) -> Result<f64> {
        let size = self.config.image_size;
        let mut queues: Vec<Vec<usize>> = prepared
            .iter()
            .map(|dom| {
                let mut order: Vec<usize> = (0..dom.fit.len()).collect();
                for i in (1..order.len()).rev() {
                    order.swap(i, rand::Rng::random_range(&mut self.rng, 0..=i));
                }
                order
            })
            .collect();
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        loop {
            let mut any = false;
            for d in 0..queues.len() {
                if queues[d].is_empty() {
                    continue;
                }
                any = true;
                let take = queues[d].len().min(self.config.batch_size);
                let batch: Vec<usize> = queues[d].drain(..take).collect();
                let items: Vec<&Prepared> = batch.iter().map(|&i| &prepared[d].fit[i]).collect();

                let images: Vec<&Array3<f64>> = items.iter().map(|p| &p.pixels).collect();
                let targets = encode_batch_targets(
                    &items,
                    d,
                    size,
                    self.config.sigma,
                    self.config.alpha,
                )?;

                let tape = Tape::new();
                let ctx = Ctx::new(&tape, true);
                let x = tape.leaf(stack_batch(&images));
                let (pred, _probs) = self.net.forward(&ctx, x, d);
                check_unit_range(&pred.value(), "stage2 forward")?;
                let loss = pred.bce_mean(Rc::new(targets));
                let loss_value = loss.scalar();
                if !loss_value.is_finite() {
                    return Err(UodError::numeric(format!(
                        "BCE diverged at epoch {} step {steps}: {loss_value}",
                        self.epoch
                    )));
                }
                tape.backward(loss);
                self.adam.step(&tape, &ctx.bound());
                epoch_loss += loss_value;
                steps += 1;
            }
            if !any {
                break;
            }
        }
        Ok(epoch_loss / steps as f64)
    }

    /// Mean BCE over every domain's validation split plus per-domain MRE in
    /// native pixels, both against pseudo labels, in eval mode.
    fn validate(&self, prepared: &[PreparedDomain]) -> Result<(f64, Vec<f64>)> {
        let size = self.config.image_size;
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        let mut mre = Vec::with_capacity(prepared.len());
        for (d, dom) in prepared.iter().enumerate() {
            let mut acc = ErrorAccumulator::new(self.domains[d].num_landmarks, Unit::Px);
            for chunk in dom.val.chunks(self.config.batch_size) {
                let items: Vec<&Prepared> = chunk.iter().collect();
                let images: Vec<&Array3<f64>> = items.iter().map(|p| &p.pixels).collect();
                let targets = encode_batch_targets(
                    &items,
                    d,
                    size,
                    self.config.sigma,
                    self.config.alpha,
                )?;

                let tape = Tape::new();
                let ctx = Ctx::new(&tape, false);
                let x = tape.leaf(stack_batch(&images));
                let (pred, _probs) = self.net.forward(&ctx, x, d);
                let values = pred.value();
                check_unit_range(&values, "stage2 validation forward")?;
                let loss = pred.bce_mean(Rc::new(targets)).scalar();
                if !loss.is_finite() {
                    return Err(UodError::numeric(format!(
                        "validation BCE diverged at epoch {}: {loss}",
                        self.epoch
                    )));
                }
                loss_sum += loss * items.len() as f64;
                loss_count += items.len();

                for (b, item) in items.iter().enumerate() {
                    let maps = values.slice(s![b, .., .., ..]).to_owned();
                    let decoded = decode_landmarks(&maps, DECODE_RATIO)?;
                    let scale = coord_scale((size, size), item.native_size);
                    let native: Vec<Option<(f64, f64)>> = decoded
                        .iter()
                        .map(|p| p.map(|(i, j)| (i * scale.0, j * scale.1)))
                        .collect();
                    let gt = LandmarkSet::new(d, item.native_coords.clone());
                    acc.add(&native, &gt, &Spacing::pixels())?;
                }
            }
            mre.push(acc.mre());
        }
        Ok((loss_sum / loss_count as f64, mre))
    }

    // -- persistence ---------------------------------------------------------

    /// Write `state.ckpt` (resumable live state) and, when a best model
    /// exists, `best.ckpt` (retained model) into `dir`. Writes are atomic:
    /// temp file then rename.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let rng_state = RngState::capture(&self.rng);
        let meta = json!({
            "kind": "stage2-state",
            "config": serde_json::to_value(&self.config)
                .map_err(|e| UodError::checkpoint(format!("config encode: {e}")))?,
            "arch": serde_json::to_value(&self.net.config)
                .map_err(|e| UodError::checkpoint(format!("arch encode: {e}")))?,
            "domains": serde_json::to_value(&self.domains)
                .map_err(|e| UodError::checkpoint(format!("domains encode: {e}")))?,
            "epoch": self.epoch,
            "rng_seed": rng_state.seed.to_vec(),
            "rng_word_hi": (rng_state.word_pos >> 64) as u64,
            "rng_word_lo": rng_state.word_pos as u64,
            "best_epoch": self.best.as_ref().map(|b| b.epoch),
            "best_val_loss": self.best.as_ref().map(|b| b.val_loss),
        });
        let tmp = dir.join("state.ckpt.tmp");
        save_checkpoint(&tmp, &self.params, Some(&self.adam), meta)?;
        std::fs::rename(&tmp, dir.join("state.ckpt"))?;

        if let Some(best) = &self.best {
            let set = best.to_param_set();
            let meta = json!({
                "kind": "stage2-model",
                "config": serde_json::to_value(&self.config)
                    .map_err(|e| UodError::checkpoint(format!("config encode: {e}")))?,
                "arch": serde_json::to_value(&self.net.config)
                    .map_err(|e| UodError::checkpoint(format!("arch encode: {e}")))?,
                "domains": serde_json::to_value(&self.domains)
                    .map_err(|e| UodError::checkpoint(format!("domains encode: {e}")))?,
                "epoch": best.epoch,
                "val_loss": best.val_loss,
            });
            let tmp = dir.join("best.ckpt.tmp");
            save_checkpoint(&tmp, &set, None, meta)?;
            std::fs::rename(&tmp, dir.join("best.ckpt"))?;
        }
        Ok(())
    }

    /// Restore a state saved by [`TrainState::save`] for bit-identical
    /// continuation.
    pub fn load(dir: &Path) -> Result<TrainState> {
        let ckpt = load_checkpoint(dir.join("state.ckpt"))?;
        if ckpt.meta["kind"] != "stage2-state" {
            return Err(UodError::checkpoint(format!(
                "expected a stage2-state checkpoint, found kind {}",
                ckpt.meta["kind"]
            )));
        }
        let config: Stage2Config = serde_json::from_value(ckpt.meta["config"].clone())
            .map_err(|e| UodError::checkpoint(format!("config decode: {e}")))?;
        let arch: DatrConfig = serde_json::from_value(ckpt.meta["arch"].clone())
            .map_err(|e| UodError::checkpoint(format!("arch decode: {e}")))?;
        let domains: Vec<DomainSpec> = serde_json::from_value(ckpt.meta["domains"].clone())
            .map_err(|e| UodError::checkpoint(format!("domains decode: {e}")))?;
        let epoch = ckpt.meta["epoch"]
            .as_u64()
            .ok_or_else(|| UodError::checkpoint("missing epoch"))? as usize;

        let seed_vec: Vec<u8> = serde_json::from_value(ckpt.meta["rng_seed"].clone())
            .map_err(|e| UodError::checkpoint(format!("rng decode: {e}")))?;
        let seed: [u8; 32] = seed_vec
            .try_into()
            .map_err(|_| UodError::checkpoint("rng seed must hold 32 bytes"))?;
        let hi = ckpt.meta["rng_word_hi"]
            .as_u64()
            .ok_or_else(|| UodError::checkpoint("missing rng position"))?;
        let lo = ckpt.meta["rng_word_lo"]
            .as_u64()
            .ok_or_else(|| UodError::checkpoint("missing rng position"))?;
        let rng = RngState { seed, word_pos: ((hi as u128) << 64) | lo as u128 }.restore();

        // Rebuild the graph (initializer values are overwritten by the load).
        let mut params = ParamSet::new();
        let net = Stage2Net::new(&mut params, &mut ChaCha8Rng::seed_from_u64(0), arch);
        ckpt.load_into(&params)?;
        let mut adam = Adam::new(config.lr);
        adam.load_state(ckpt.adam_state());

        let best = match (ckpt.meta["best_epoch"].as_u64(), ckpt.meta["best_val_loss"].as_f64()) {
            (Some(best_epoch), Some(val_loss)) => {
                let best_ckpt = load_checkpoint(dir.join("best.ckpt"))?;
                Some(best_from_checkpoint(&best_ckpt, best_epoch as usize, val_loss))
            }
            _ => None,
        };

        Ok(TrainState { params, net, adam, rng, epoch, best, config, domains })
    }
}

fn best_from_checkpoint(ckpt: &Checkpoint, epoch: usize, val_loss: f64) -> BestModel {
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    for entry in &ckpt.entries {
        let value = ckpt
            .array(&entry.name, entry.role)
            .expect("entry enumerated from this checkpoint");
        match entry.role {
            EntryRole::Param => params.push((entry.name.clone(), entry.tag, value)),
            EntryRole::Buffer => buffers.push((entry.name.clone(), entry.tag, value)),
            EntryRole::OptM | EntryRole::OptV => {}
        }
    }
    BestModel { epoch, val_loss, params, buffers }
}

/// Artifacts of a completed training run.
pub struct Stage2Artifacts {
    pub state: TrainState,
    pub log: Vec<EpochLog>,
}

/// Train the Stage II model from scratch: fresh state, `config.epochs`
/// epochs, best-validation model retained inside the returned state.
pub fn train_stage2(
    config: &Stage2Config,
    registry: &DomainRegistry,
    train: &[Vec<ImageRecord>],
    pseudo: &[PseudoLabelStore],
) -> Result<Stage2Artifacts> {
    let mut state = TrainState::init(config, registry)?;
    let log = state.run_epochs(train, pseudo, config.epochs)?;
    Ok(Stage2Artifacts { state, log })
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// A trained model ready for inference.
pub struct Stage2Model {
    pub params: ParamSet,
    pub net: Stage2Net,
    pub config: Stage2Config,
    pub domains: Vec<DomainSpec>,
}

impl Stage2Model {
    /// The retained best model of a training state (the live parameters are
    /// not consulted).
    pub fn from_best(state: &TrainState) -> Result<Stage2Model> {
        let best = state
            .best
            .as_ref()
            .ok_or_else(|| UodError::checkpoint("training state holds no best model yet"))?;
        let arch = state.net.config.clone();
        let mut params = ParamSet::new();
        let net = Stage2Net::new(&mut params, &mut ChaCha8Rng::seed_from_u64(0), arch);
        for (name, _tag, value) in best.params.iter().chain(&best.buffers) {
            params.load_value(name, value.clone())?;
        }
        Ok(Stage2Model {
            params,
            net,
            config: state.config.clone(),
            domains: state.domains.clone(),
        })
    }

    /// Load a retained model checkpoint (`best.ckpt`).
    pub fn load(path: &Path) -> Result<Stage2Model> {
        let ckpt = load_checkpoint(path)?;
        if ckpt.meta["kind"] != "stage2-model" {
            return Err(UodError::checkpoint(format!(
                "expected a stage2-model checkpoint, found kind {}",
                ckpt.meta["kind"]
            )));
        }
        let config: Stage2Config = serde_json::from_value(ckpt.meta["config"].clone())
            .map_err(|e| UodError::checkpoint(format!("config decode: {e}")))?;
        let arch: DatrConfig = serde_json::from_value(ckpt.meta["arch"].clone())
            .map_err(|e| UodError::checkpoint(format!("arch decode: {e}")))?;
        let domains: Vec<DomainSpec> = serde_json::from_value(ckpt.meta["domains"].clone())
            .map_err(|e| UodError::checkpoint(format!("domains decode: {e}")))?;
        let mut params = ParamSet::new();
        let net = Stage2Net::new(&mut params, &mut ChaCha8Rng::seed_from_u64(0), arch);
        ckpt.load_into(&params)?;
        Ok(Stage2Model { params, net, config, domains })
    }

    /// Write this model as a retained-model checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "kind": "stage2-model",
            "config": serde_json::to_value(&self.config)
                .map_err(|e| UodError::checkpoint(format!("config encode: {e}")))?,
            "arch": serde_json::to_value(&self.net.config)
                .map_err(|e| UodError::checkpoint(format!("arch encode: {e}")))?,
            "domains": serde_json::to_value(&self.domains)
                .map_err(|e| UodError::checkpoint(format!("domains encode: {e}")))?,
        });
        let tmp = path.with_extension("ckpt.tmp");
        save_checkpoint(&tmp, &self.params, None, meta)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Landmarks detected in one image, in native pixels; a flagged landmark
/// (all-zero heatmap channel) carries no coordinate.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub domain_id: DomainId,
    pub landmarks: Vec<Option<(f64, f64)>>,
    /// Working-size response maps behind the detections.
    pub heatmaps: HeatmapStack,
}

/// Run the model on one native-resolution image: resize to working size,
/// forward, decode, and map coordinates back to native pixels.
pub fn predict(model: &Stage2Model, pixels: &Array3<f64>, d: DomainId) -> Result<Prediction> {
    if d >= model.domains.len() {
        return Err(UodError::domain(format!(
            "domain {d} not in checkpoint registry ({} domains)",
            model.domains.len()
        )));
    }
    if pixels.dim().0 != model.net.config.in_channels {
        return Err(UodError::shape(format!(
            "image has {} channels, model expects {}",
            pixels.dim().0,
            model.net.config.in_channels
        )));
    }
    let size = model.config.image_size;
    let native = (pixels.dim().1, pixels.dim().2);
    let resized = resize_image(pixels, (size, size))?;

    let tape = Tape::new();
    let ctx = Ctx::new(&tape, false);
    let x = tape.leaf(stack_batch(&[&resized]));
    let (pred, _probs) = model.net.forward(&ctx, x, d);
    let values = pred.value();
    check_unit_range(&values, "stage2 inference forward")?;

    let maps: Array3<f64> = values
        .slice(s![0, .., .., ..])
        .to_owned()
        .into_dimensionality()
        .expect("heatmap stack is 3-d");
    let decoded = decode_landmarks(&maps, DECODE_RATIO)?;
    let scale = coord_scale((size, size), native);
    let landmarks = decoded
        .iter()
        .map(|p| p.map(|(i, j)| (i * scale.0, j * scale.1)))
        .collect();
    Ok(Prediction {
        domain_id: d,
        landmarks,
        heatmaps: HeatmapStack {
            maps,
            domain_id: d,
            sigma: model.config.sigma,
            alpha: model.config.alpha,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::PixelSpacing;
    use std::collections::BTreeMap;
    use crate::stage1::PseudoLabel;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn tiny_arch() -> DatrConfig {
        DatrConfig {
            in_channels: 1,
            patch: 2,
            dims: vec![4, 8],
            heads: 2,
            window: 2,
            mlp_ratio: 2,
            variant: BlockVariant::Full,
            landmarks: Vec::new(),
            merge_channels: vec![4],
            extra_channels: vec![4],
        }
    }

    fn tiny_config(seed: u64) -> Stage2Config {
        Stage2Config {
            image_size: 16,
            batch_size: 2,
            epochs: 2,
            lr: 1e-3,
            sigma: 2.0,
            alpha: 10.0,
            variant: BlockVariant::Full,
            seed,
            arch: tiny_arch(),
        }
    }

    /// Two-domain registry (2 and 3 landmarks) and blob images with pseudo
    /// labels at deterministic positions.
    fn tiny_setup(
        per_domain: usize,
    ) -> (DomainRegistry, Vec<Vec<ImageRecord>>, Vec<PseudoLabelStore>) {
        let mut reg = DomainRegistry::new();
        reg.register_domain(DomainSpec::new("alpha", 2, (16, 16), 1, PixelSpacing::MmPerPx(1.0)))
            .unwrap();
        reg.register_domain(DomainSpec::new("beta", 3, (16, 16), 1, PixelSpacing::MmPerPx(0.5)))
            .unwrap();
        reg.seal();
        let mut train = Vec::new();
        let mut pseudo = Vec::new();
        for (d, spec) in reg.iter().enumerate() {
            let mut records = Vec::new();
            let mut entries = BTreeMap::new();
            for k in 0..per_domain {
                let id = format!("img_{d}_{k}");
                let center = (4.0 + k as f64, 5.0 + (k % 3) as f64);
                let mut pixels = Array3::zeros((1, 16, 16));
                for i in 0..16 {
                    for j in 0..16 {
                        let r2 = (i as f64 - center.0).powi(2) + (j as f64 - center.1).powi(2);
                        pixels[[0, i, j]] = (-r2 / 8.0).exp();
                    }
                }
                let coords: Vec<(f64, f64)> = (0..spec.num_landmarks)
                    .map(|n| (center.0 + n as f64, center.1 + 2.0 * n as f64))
                    .collect();
                entries.insert(
                    id.clone(),
                    coords
                        .iter()
                        .map(|&coord| PseudoLabel { coord, confidence: 0.9 })
                        .collect(),
                );
                records.push(ImageRecord {
                    image_id: id,
                    pixels,
                    domain_id: d,
                    landmarks: Some(LandmarkSet::new(d, coords)),
                });
            }
            train.push(records);
            pseudo.push(PseudoLabelStore {
                domain_id: d,
                domain_name: spec.name.clone(),
                oneshot_id: format!("img_{d}_0"),
                checkpoint_hash: "test".into(),
                clamped_landmarks: Vec::new(),
                entries,
            });
        }
        (reg, train, pseudo)
    }

    fn stack(values: Array3<f64>) -> HeatmapStack {
        HeatmapStack { maps: values, domain_id: 0, sigma: 3.0, alpha: 10.0 }
    }

    // -- bce_loss ------------------------------------------------------------

    #[test]
    fn bce_of_exact_binary_prediction_is_zero() {
        let maps = Array3::from_shape_fn((2, 3, 3), |(n, i, j)| ((n + i + j) % 2) as f64);
        let loss = bce_loss(&stack(maps.clone()), &stack(maps)).unwrap();
        assert!(loss >= 0.0, "BCE must be non-negative, got {loss}");
        assert!(loss < 1e-6, "matching binary stacks must cost ~0, got {loss}");
    }

    #[test]
    fn bce_of_constant_half_is_ln_two_for_any_target() {
        let pred = Array3::from_elem((1, 4, 4), 0.5);
        let target = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| (i as f64 + j as f64) / 8.0);
        let loss = bce_loss(&stack(pred), &stack(target)).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn bce_matches_direct_scalar_evaluation_on_fixture() {
        let pred =
            Array3::from_shape_vec((1, 2, 2), vec![0.9, 0.2, 0.6, 0.4]).unwrap();
        let target =
            Array3::from_shape_vec((1, 2, 2), vec![1.0, 0.0, 0.5, 0.0]).unwrap();
        let expected = -(0.9f64.ln()
            + 0.8f64.ln()
            + (0.5 * 0.6f64.ln() + 0.5 * 0.4f64.ln())
            + 0.6f64.ln())
            / 4.0;
        let loss = bce_loss(&stack(pred), &stack(target)).unwrap();
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
    }

    #[test]
    fn bce_rejects_shape_mismatch_and_out_of_range_values() {
        let a = stack(Array3::from_elem((1, 2, 2), 0.5));
        let b = stack(Array3::from_elem((1, 2, 3), 0.5));
        assert!(bce_loss(&a, &b).is_err());
        let bad = stack(Array3::from_elem((1, 2, 2), 1.25));
        assert!(bce_loss(&bad, &a).is_err());
    }

    // -- training loop -------------------------------------------------------

    #[test]
    fn epoch_logs_cover_every_epoch_and_domain() {
        let (reg, train, pseudo) = tiny_setup(4);
        let config = tiny_config(1);
        let artifacts = train_stage2(&config, &reg, &train, &pseudo).unwrap();
        assert_eq!(artifacts.log.len(), 2);
        for (e, row) in artifacts.log.iter().enumerate() {
            assert_eq!(row.epoch, e + 1);
            assert!(row.train_loss.is_finite());
            assert!(row.val_loss.is_finite());
            assert_eq!(row.val_mre_px.len(), 2);
        }
        assert!(artifacts.state.best.is_some(), "some epoch must be retained as best");
        let header = EpochLog::csv_header(&artifacts.state.domains);
        assert_eq!(header, "epoch,train_loss,val_loss,val_mre_px_alpha,val_mre_px_beta");
        let row = artifacts.log[0].csv_row();
        assert_eq!(row.split(',').count(), 5, "row {row} must match the header");
    }

    #[test]
    fn training_reduces_the_loss_on_a_tiny_fixture() {
        let (reg, train, pseudo) = tiny_setup(4);
        let mut config = tiny_config(3);
        config.epochs = 8;
        config.lr = 3e-3;
        let artifacts = train_stage2(&config, &reg, &train, &pseudo).unwrap();
        let first = artifacts.log.first().unwrap().train_loss;
        let last = artifacts.log.last().unwrap().train_loss;
        assert!(
            last < first,
            "train loss must drop over 8 epochs: first {first:.4}, last {last:.4}"
        );
    }

    #[test]
    fn best_model_tracks_the_minimum_validation_loss() {
        let (reg, train, pseudo) = tiny_setup(4);
        let mut config = tiny_config(7);
        config.epochs = 5;
        let artifacts = train_stage2(&config, &reg, &train, &pseudo).unwrap();
        let best = artifacts.state.best.as_ref().unwrap();
        let min = artifacts
            .log
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best.val_loss, min);
        let row = artifacts.log.iter().find(|r| r.epoch == best.epoch).unwrap();
        assert_eq!(row.val_loss, best.val_loss);
    }

    #[test]
    fn fixed_seed_reproduces_the_run_bit_for_bit() {
        let (reg, train, pseudo) = tiny_setup(3);
        let config = tiny_config(11);
        let a = train_stage2(&config, &reg, &train, &pseudo).unwrap();
        let b = train_stage2(&config, &reg, &train, &pseudo).unwrap();
        assert_eq!(a.log, b.log);
        for (pa, pb) in a.state.params.params().iter().zip(b.state.params.params()) {
            assert_eq!(pa.borrow().value, pb.borrow().value, "{}", pa.borrow().name);
        }
    }

    #[test]
    fn step_on_domain_zero_leaves_domain_one_untouched() {
        let (reg, train, pseudo) = tiny_setup(2);
        let config = tiny_config(5);
        let mut state = TrainState::init(&config, &reg).unwrap();

        let grab = |state: &TrainState| -> Vec<(String, ArrayD<f64>)> {
            state
                .params
                .params()
                .iter()
                .chain(state.params.buffers())
                .filter(|p| p.borrow().tag == ParamTag::Domain(1))
                .map(|p| (p.borrow().name.clone(), p.borrow().value.clone()))
                .collect()
        };
        let before = grab(&state);
        assert!(!before.is_empty(), "the model must carry domain-1 parameters");

        // One manual optimizer step on a domain-0 batch.
        let spec = &state.domains[0];
        let dom = prepare_domain(spec, &train[0], &pseudo[0], 16).unwrap();
        let items: Vec<&Prepared> = dom.fit.iter().collect();
        let images: Vec<&Array3<f64>> = items.iter().map(|p| &p.pixels).collect();
        let targets = encode_batch_targets(&items, 0, 16, 2.0, 10.0).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true);
        let x = tape.leaf(stack_batch(&images));
        let (pred, _) = state.net.forward(&ctx, x, 0);
        tape.backward(pred.bce_mean(Rc::new(targets)));
        state.adam.step(&tape, &ctx.bound());

        for ((name, old), (_, new)) in before.iter().zip(grab(&state)) {
            assert_eq!(
                old.as_slice().unwrap(),
                new.as_slice().unwrap(),
                "domain-1 tensor {name} changed after a domain-0 step"
            );
        }
    }

    // -- persistence and resume ---------------------------------------------

    #[test]
    fn resumed_training_continues_bit_identically() {
        let (reg, train, pseudo) = tiny_setup(3);
        let mut config = tiny_config(13);
        config.epochs = 4;

        let straight = train_stage2(&config, &reg, &train, &pseudo).unwrap();

        let mut half = TrainState::init(&config, &reg).unwrap();
        let log_a = half.run_epochs(&train, &pseudo, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        half.save(dir.path()).unwrap();
        let mut resumed = TrainState::load(dir.path()).unwrap();
        assert_eq!(resumed.epoch, 2);
        let log_b = resumed.run_epochs(&train, &pseudo, 4).unwrap();

        let joined: Vec<EpochLog> = log_a.into_iter().chain(log_b).collect();
        assert_eq!(joined, straight.log);
        for (pa, pb) in straight
            .state
            .params
            .params()
            .iter()
            .chain(straight.state.params.buffers())
            .zip(resumed.params.params().iter().chain(resumed.params.buffers()))
        {
            assert_eq!(
                pa.borrow().value,
                pb.borrow().value,
                "tensor {} diverged after resume",
                pa.borrow().name
            );
        }
        let (ba, bb) = (
            straight.state.best.as_ref().unwrap(),
            resumed.best.as_ref().unwrap(),
        );
        assert_eq!(ba.epoch, bb.epoch);
        assert_eq!(ba.val_loss, bb.val_loss);
    }

    #[test]
    fn saved_best_model_predicts_identically_to_the_in_memory_one() {
        let (reg, train, pseudo) = tiny_setup(3);
        let config = tiny_config(17);
        let artifacts = train_stage2(&config, &reg, &train, &pseudo).unwrap();
        let dir = tempfile::tempdir().unwrap();
        artifacts.state.save(dir.path()).unwrap();

        let from_memory = Stage2Model::from_best(&artifacts.state).unwrap();
        let from_disk = Stage2Model::load(&dir.path().join("best.ckpt")).unwrap();
        let image = &train[1][0];
        let a = predict(&from_memory, &image.pixels, 1).unwrap();
        let b = predict(&from_disk, &image.pixels, 1).unwrap();
        assert_eq!(a.landmarks, b.landmarks);
        assert_eq!(a.heatmaps.maps, b.heatmaps.maps);
    }

    // -- inference -----------------------------------------------------------

    #[test]
    fn predict_maps_coordinates_back_to_native_resolution() {
        let (reg, _train, _pseudo) = tiny_setup(2);
        let config = tiny_config(19);
        let state = TrainState::init(&config, &reg).unwrap();
        let model = Stage2Model {
            params: state.params,
            net: state.net,
            config: state.config,
            domains: state.domains,
        };

        // A native 24x24 image: predictions must land in the native frame and
        // agree with predicting on a pre-resized copy within resampling
        // tolerance (1 native px).
        let native = Array3::from_shape_fn((1, 24, 24), |(_, i, j)| {
            let r2 = (i as f64 - 9.0).powi(2) + (j as f64 - 13.0).powi(2);
            (-r2 / 12.0).exp()
        });
        let direct = predict(&model, &native, 0).unwrap();
        assert_eq!(direct.landmarks.len(), 2);
        assert_eq!(direct.heatmaps.maps.dim(), (2, 16, 16));

        let resized = resize_image(&native, (16, 16)).unwrap();
        let on_resized = predict(&model, &resized, 0).unwrap();
        let scale = coord_scale((16, 16), (24, 24));
        for (a, b) in direct.landmarks.iter().zip(&on_resized.landmarks) {
            let (ai, aj) = a.expect("decodable");
            let (bi, bj) = b.expect("decodable");
            let (mi, mj) = (bi * scale.0, bj * scale.1);
            assert!(
                (ai - mi).hypot(aj - mj) <= 1.0,
                "native ({ai:.2}, {aj:.2}) vs mapped ({mi:.2}, {mj:.2})"
            );
        }
    }

    #[test]
    fn predict_flags_all_zero_channels_and_keeps_the_rest() {
        let (reg, _train, _pseudo) = tiny_setup(2);
        let config = tiny_config(23);
        let state = TrainState::init(&config, &reg).unwrap();
        // Drive landmark 0 of domain 0 to an exactly-zero map: a -800 bias
        // saturates the sigmoid to 0 underflow.
        let bias = state.params.by_name("head.bias.d0").unwrap();
        bias.borrow_mut().value[[0]] = -800.0;
        let model = Stage2Model {
            params: state.params,
            net: state.net,
            config: state.config,
            domains: state.domains,
        };
        let image = Array3::from_elem((1, 16, 16), 0.4);
        let pred = predict(&model, &image, 0).unwrap();
        assert_eq!(pred.landmarks[0], None, "saturated channel must be flagged");
        assert!(pred.landmarks[1].is_some(), "healthy channel must decode");
    }

    #[test]
    fn predict_rejects_unknown_domains_and_wrong_channels() {
        let (reg, _train, _pseudo) = tiny_setup(2);
        let config = tiny_config(29);
        let state = TrainState::init(&config, &reg).unwrap();
        let model = Stage2Model {
            params: state.params,
            net: state.net,
            config: state.config,
            domains: state.domains,
        };
        let image = Array3::from_elem((1, 16, 16), 0.4);
        assert!(predict(&model, &image, 2).is_err());
        let rgb = Array3::from_elem((3, 16, 16), 0.4);
        assert!(predict(&model, &rgb, 0).is_err());
    }

    // -- input validation ----------------------------------------------------

    #[test]
    fn train_rejects_missing_pseudo_labels_and_bad_configs() {
        let (reg, train, mut pseudo) = tiny_setup(3);
        let config = tiny_config(31);
        pseudo[0].entries.remove("img_0_1");
        let err = match train_stage2(&config, &reg, &train, &pseudo) {
            Err(e) => e,
            Ok(_) => panic!("missing pseudo labels must fail"),
        };
        assert!(err.to_string().contains("pseudo"), "{err}");

        let (reg, train, pseudo) = tiny_setup(3);
        let mut bad = tiny_config(31);
        bad.epochs = 0;
        assert!(train_stage2(&bad, &reg, &train, &pseudo).is_err());
        let mut bad = tiny_config(31);
        bad.image_size = 15; // not a multiple of the coarsest stride 4
        assert!(train_stage2(&bad, &reg, &train, &pseudo).is_err());
    }

    #[test]
    fn validation_split_takes_the_last_tenth_rounded_up() {
        let (reg, train, pseudo) = tiny_setup(4);
        let spec = reg.spec(0).unwrap();
        let dom = prepare_domain(spec, &train[0], &pseudo[0], 16).unwrap();
        assert_eq!(dom.fit.len(), 3);
        assert_eq!(dom.val.len(), 1);
        // The val image is the last record.
        assert_eq!(dom.val[0].native_coords, pseudo[0].entries["img_0_3"]
            .iter()
            .map(|l| l.coord)
            .collect::<Vec<_>>());

        // A single-image domain cannot be split.
        let one = vec![train[0][0].clone()];
        assert!(prepare_domain(spec, &one, &pseudo[0], 16).is_err());
    }
}
