//! Adam, the per-mode training objective, the epoch loop with validation
//! and best-model tracking, decoupled head re-training, and checkpoints.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_order, make_batch, Batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::{self, BinWeights, LossValues, LossWeights};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{is_head_param, Cblnet, EncoderConfig, ModelParams};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    L1Only,
    C2c,
    FocalR,
    Inv,
    Lds,
    Smogn,
    RrtInv,
}

impl LossMode {
    pub const ALL: [LossMode; 7] = [
        LossMode::L1Only,
        LossMode::C2c,
        LossMode::FocalR,
        LossMode::Inv,
        LossMode::Lds,
        LossMode::Smogn,
        LossMode::RrtInv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::L1Only => "l1_only",
            LossMode::C2c => "c2c",
            LossMode::FocalR => "focal_r",
            LossMode::Inv => "inv",
            LossMode::Lds => "lds",
            LossMode::Smogn => "smogn",
            LossMode::RrtInv => "rrt_inv",
        }
    }

    /// Modes that mine pairs within a batch.
    pub fn needs_pairs(self) -> bool {
        matches!(self, LossMode::C2c | LossMode::Smogn)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss_mode: LossMode,
    pub loss: LossWeights,
    /// Seeds parameter init, batch order, augmentation and oversampling.
    pub seed: u64,
    /// Random-crop augmentation of training batches.
    pub augment: bool,
    /// Histogram bins for inverse-frequency and smoothed reweighting.
    pub reweight_bins: usize,
    pub lds_sigma: f64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss_mode: LossMode::C2c,
            loss: LossWeights::default(),
            seed: 0,
            augment: true,
            reweight_bins: 50,
            lds_sigma: 2.0,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("batch sizes must be positive".into());
        }
        if self.loss_mode.needs_pairs() && self.batch_size < 2 {
            return fail(format!("loss mode {} needs batch_size >= 2", self.loss_mode));
        }
        if !(self.learning_rate >= 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return fail("need learning_rate >= 0, beta1 and beta2 in [0, 1), adam_eps > 0".into());
        }
        if self.reweight_bins == 0 || self.lds_sigma.is_nan() || self.lds_sigma < 0.0 {
            return fail("need reweight_bins > 0 and lds_sigma >= 0".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

// ---- Adam ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments per parameter entry.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || params.entries.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update. Entries whose gradient is `None` are
/// frozen: neither they nor their moments change.
pub fn adam_step(params: &mut ModelParams, grads: &[Option<&[f64]>], state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, (_, p)) in params.entries.iter_mut().enumerate() {
        let Some(g) = grads[k] else { continue };
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

// ---- objective -----------------------------------------------------------

/// What a training step optimizes.
#[derive(Clone, Debug)]
pub enum Objective {
    /// ℓ1 plus weighted alignment and uniformity (`β = γ = 0` gives plain ℓ1).
    Contrastive(LossWeights),
    FocalR(LossWeights),
    /// Per-boundary bin weights on the ℓ1 error.
    Reweighted(Box<[BinWeights; 4]>),
    Smogn,
}

impl Objective {
    /// Objective of the (first) training stage of `config.loss_mode`.
    pub fn for_mode(config: &TrainConfig, train_targets: &[[f64; 4]]) -> Self {
        match config.loss_mode {
            LossMode::L1Only | LossMode::RrtInv => Objective::Contrastive(LossWeights {
                beta: 0.0,
                gamma: 0.0,
                ..config.loss.clone()
            }),
            LossMode::C2c => Objective::Contrastive(config.loss.clone()),
            LossMode::FocalR => Objective::FocalR(config.loss.clone()),
            LossMode::Inv => Objective::inverse_frequency(config, train_targets),
            LossMode::Lds => Objective::Reweighted(Box::new(std::array::from_fn(|d| {
                let y: Vec<f64> = train_targets.iter().map(|t| t[d]).collect();
                losses::lds_weights(&y, config.reweight_bins, config.lds_sigma)
            }))),
            LossMode::Smogn => Objective::Smogn,
        }
    }

    pub fn inverse_frequency(config: &TrainConfig, train_targets: &[[f64; 4]]) -> Self {
        Objective::Reweighted(Box::new(std::array::from_fn(|d| {
            let y: Vec<f64> = train_targets.iter().map(|t| t[d]).collect();
            losses::inverse_frequency_weights(&y, config.reweight_bins)
        })))
    }
}

/// Per-step loss values plus the tape holding the graph.
pub struct StepLoss {
    pub tape: Tape,
    pub vars: Vec<Var>,
    pub total: Var,
    pub values: LossValues,
}

/// Record the forward pass and objective for one batch.
pub fn batch_loss(
    model: &Cblnet,
    params: &ModelParams,
    trainable: &dyn Fn(&str) -> bool,
    batch: &Batch,
    objective: &Objective,
    rng: &mut ChaCha8Rng,
) -> Result<StepLoss> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, trainable);
    let images = model.batch_images(&mut tape, &batch.image_refs())?;
    let out = model.forward(&mut tape, &vars, images)?;
    let target = tape.constant(losses::targets_tensor(&batch.targets)?);
    let plain_l1 = mean_abs(tape.value(out.pred).data(), tape.value(target).data());

    let (total, align, uniform) = match objective {
        Objective::Contrastive(w) => {
            let b = losses::total_loss(&mut tape, out.pred, &batch.targets, &out.pooled, w)?;
            (b.total, Some(b.align), Some(b.uniform))
        }
        Objective::FocalR(w) => {
            let diff = tape.sub(out.pred, target)?;
            let e = tape.abs(diff);
            (losses::focal_r_loss(&mut tape, e, w), None, None)
        }
        Objective::Reweighted(bins) => {
            let weights: Vec<f64> = batch
                .targets
                .iter()
                .flat_map(|t| (0..4).map(move |d| bins[d].weight(t[d])))
                .collect();
            let w = tape.constant(Tensor::new(vec![batch.len(), 4], weights)?);
            (losses::weighted_l1_loss(&mut tape, out.pred, target, w)?, None, None)
        }
        Objective::Smogn => {
            let aug = losses::smogn_augment(&mut tape, &out.pooled, &batch.targets, &batch.size_ratios, rng)?;
            let pred = model.heads_forward(&mut tape, &vars, &aug.pooled)?;
            let t = tape.constant(losses::targets_tensor(&aug.targets)?);
            (losses::l1_loss(&mut tape, pred, t)?, None, None)
        }
    };
    let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let values = LossValues {
        l1: plain_l1,
        align: value(align),
        uniform: value(uniform),
        total: tape.value(total).item(),
    };
    Ok(StepLoss { tape, vars, total, values })
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

// ---- training loop -------------------------------------------------------

/// RNG stream for `(seed, stage, epoch, purpose)`.
pub fn epoch_rng(seed: u64, stage: u8, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 56) | ((epoch as u64) << 8) | purpose);
    rng
}

fn shuffle_seed(seed: u64, stage: u8, epoch: usize) -> u64 {
    use rand::Rng;
    epoch_rng(seed, stage, epoch, 0).random()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub steps: u64,
    /// Batch means over the epoch.
    pub train: LossValues,
    pub val: MetricsReport,
    pub best_val_iou: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestModel {
    pub val_iou: f64,
    pub stage: u8,
    pub epoch: usize,
    pub params: ModelParams,
}

/// Everything needed to continue training exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub stage: u8,
    /// Completed epochs in the current stage.
    pub epoch: usize,
    pub best: Option<BestModel>,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    pub fn fresh(model: &Cblnet, seed: u64) -> Self {
        let params = model.init_params(seed);
        Self {
            adam: AdamState::new(&params),
            params,
            stage: 1,
            epoch: 0,
            best: None,
            log: Vec::new(),
        }
    }

    /// Parameters with the best validation IoU, or the current ones.
    pub fn best_params(&self) -> &ModelParams {
        self.best.as_ref().map_or(&self.params, |b| &b.params)
    }
}

/// Inputs shared by every epoch of a run.
pub struct Trainer<'a> {
    pub model: &'a Cblnet,
    pub config: &'a TrainConfig,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
}

impl Trainer<'_> {
    /// Train one epoch of the current stage, validate, and update the best model.
    pub fn run_epoch(&self, state: &mut TrainState, objective: &Objective, trainable: &dyn Fn(&str) -> bool) -> Result<EpochLog> {
        let cfg = self.config;
        let epoch = state.epoch;
        let order = batch_order(self.train.len(), cfg.batch_size, shuffle_seed(cfg.seed, state.stage, epoch));
        let mut aug_rng = epoch_rng(cfg.seed, state.stage, epoch, 1);
        let mut smogn_rng = epoch_rng(cfg.seed, state.stage, epoch, 2);
        let adam = cfg.adam();
        let mut sums = LossValues::default();
        for (b, idx) in order.iter().enumerate() {
            let batch = make_batch(self.train, idx, cfg.augment.then_some(&mut aug_rng))?;
            let mut step = batch_loss(self.model, &state.params, trainable, &batch, objective, &mut smogn_rng)?;
            if !step.values.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            step.tape.backward(step.total)?;
            let grads: Vec<Option<&[f64]>> = step
                .vars
                .iter()
                .map(|&v| if step.tape.requires_grad(v) { step.tape.grad(v) } else { None })
                .collect();
            if grads.iter().flatten().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            adam_step(&mut state.params, &grads, &mut state.adam, &adam);
            sums.l1 += step.values.l1;
            sums.align += step.values.align;
            sums.uniform += step.values.uniform;
            sums.total += step.values.total;
        }
        let n = order.len().max(1) as f64;
        let train = LossValues {
            l1: sums.l1 / n,
            align: sums.align / n,
            uniform: sums.uniform / n,
            total: sums.total / n,
        };
        let (val, _) = evaluate(self.model, &state.params, self.val, cfg.eval_batch_size)?;
        let iou = val.all.iou.unwrap_or(0.0);
        if state.best.as_ref().is_none_or(|b| iou > b.val_iou) {
            state.best = Some(BestModel {
                val_iou: iou,
                stage: state.stage,
                epoch,
                params: state.params.clone(),
            });
        }
        state.epoch += 1;
        let best = state.best.as_ref().expect("set above");
        let log = EpochLog {
            stage: state.stage,
            epoch,
            steps: state.adam.step,
            train,
            val,
            best_val_iou: best.val_iou,
            best_epoch: best.epoch,
        };
        state.log.push(log.clone());
        Ok(log)
    }

    /// Continue `state` to the configured number of epochs of every stage.
    /// `on_epoch` sees each finished epoch, for logging and checkpointing.
    pub fn run(&self, mut state: TrainState, mut on_epoch: impl FnMut(&EpochLog, &TrainState) -> Result<()>) -> Result<TrainState> {
        let targets = self.train.targets();
        if state.stage == 1 {
            let objective = Objective::for_mode(self.config, &targets);
            while state.epoch < self.config.epochs {
                let log = self.run_epoch(&mut state, &objective, &|_| true)?;
                on_epoch(&log, &state)?;
            }
            if self.config.loss_mode == LossMode::RrtInv {
                state = start_second_stage(state);
            }
        }
        if state.stage == 2 {
            let objective = Objective::inverse_frequency(self.config, &targets);
            while state.epoch < self.config.epochs {
                let log = self.run_epoch(&mut state, &objective, &is_head_param)?;
                on_epoch(&log, &state)?;
            }
        }
        Ok(state)
    }
}

/// Freeze everything but the heads: fresh optimizer moments, epoch counter
/// reset. Stage-two validation competes with the stage-one best.
pub fn start_second_stage(state: TrainState) -> TrainState {
    TrainState {
        adam: AdamState {
            step: state.adam.step,
            ..AdamState::new(&state.params)
        },
        stage: 2,
        epoch: 0,
        ..state
    }
}

/// Train from scratch.
pub fn train_loop(model: &Cblnet, config: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<TrainState> {
    config.validate()?;
    let trainer = Trainer { model, config, train, val };
    trainer.run(TrainState::fresh(model, config.seed), |_, _| Ok(()))
}

// ---- checkpoints ---------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"C2CK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    pub loss_mode: LossMode,
    /// Every random stream is derived from this seed and the epoch.
    pub seed: u64,
    pub stage: u8,
    /// Completed epochs in `stage`.
    pub epoch: usize,
    pub adam_step: u64,
    pub best_val_iou: Option<f64>,
    pub best_stage: Option<u8>,
    pub best_epoch: Option<usize>,
}

/// First and second Adam moments per parameter entry.
pub type Moments = (Vec<Vec<f64>>, Vec<Vec<f64>>);

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
    /// Moments as `(m, v)`; absent for inference-only checkpoints.
    pub adam: Option<Moments>,
}

impl Checkpoint {
    /// Inference-only checkpoint of `params`.
    pub fn weights(model: &Cblnet, params: ModelParams, loss_mode: LossMode, seed: u64) -> Self {
        Self {
            meta: CheckpointMeta {
                encoder: model.config().clone(),
                loss_mode,
                seed,
                stage: 1,
                epoch: 0,
                adam_step: 0,
                best_val_iou: None,
                best_stage: None,
                best_epoch: None,
            },
            params,
            adam: None,
        }
    }

    /// Full training state.
    pub fn from_state(model: &Cblnet, config: &TrainConfig, state: &TrainState) -> Self {
        Self {
            meta: CheckpointMeta {
                encoder: model.config().clone(),
                loss_mode: config.loss_mode,
                seed: config.seed,
                stage: state.stage,
                epoch: state.epoch,
                adam_step: state.adam.step,
                best_val_iou: state.best.as_ref().map(|b| b.val_iou),
                best_stage: state.best.as_ref().map(|b| b.stage),
                best_epoch: state.best.as_ref().map(|b| b.epoch),
            },
            params: state.params.clone(),
            adam: Some((state.adam.m.clone(), state.adam.v.clone())),
        }
    }

    /// Restore a training state. The best model's parameters come from
    /// `best` when given, else from this checkpoint.
    pub fn into_state(self, best: Option<ModelParams>) -> Result<TrainState> {
        let (m, v) = self
            .adam
            .ok_or_else(|| Error::Checkpoint("no optimizer state to resume from".into()))?;
        let best = match (self.meta.best_val_iou, self.meta.best_stage, self.meta.best_epoch) {
            (Some(val_iou), Some(stage), Some(epoch)) => Some(BestModel {
                val_iou,
                stage,
                epoch,
                params: best.unwrap_or_else(|| self.params.clone()),
            }),
            _ => None,
        };
        Ok(TrainState {
            adam: AdamState {
                step: self.meta.adam_step,
                m,
                v,
            },
            params: self.params,
            stage: self.meta.stage,
            epoch: self.meta.epoch,
            best,
            log: Vec::new(),
        })
    }

    fn entries(&self) -> Vec<(String, &[usize], &[f64])> {
        let mut out: Vec<(String, &[usize], &[f64])> = self
            .params
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), t.shape(), t.data()))
            .collect();
        if let Some((m, v)) = &self.adam {
            for (prefix, moments) in [("adam.m.", m), ("adam.v.", v)] {
                for ((n, t), data) in self.params.entries.iter().zip(moments) {
                    out.push((format!("{prefix}{n}"), t.shape(), data));
                }
            }
        }
        out
    }

    /// `C2CK`, version, JSON metadata, entry manifest, raw f64 payloads;
    /// all integers and floats little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let entries = self.entries();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, shape, _) in &entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape.iter() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, _, data) in &entries {
            for v in data.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing C2CK magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("entry {name}: unsupported dtype {dtype}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            manifest.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("entry {name} too large")))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in tensors {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                m.push((rest.to_string(), t));
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                v.push((rest.to_string(), t));
            } else {
                params.push((name, t));
            }
        }
        let moments = |entries: Vec<(String, Tensor)>| -> Result<Vec<Vec<f64>>> {
            if entries.len() != params.len() || entries.iter().zip(&params).any(|((a, x), (b, y))| a != b || x.shape() != y.shape()) {
                return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
            }
            Ok(entries.into_iter().map(|(_, t)| t.into_data()).collect())
        };
        let adam = match (m.is_empty(), v.is_empty()) {
            (true, true) => None,
            _ => Some((moments(m)?, moments(v)?)),
        };
        Ok(Self {
            meta,
            params: ModelParams { entries: params },
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GeneratorConfig, Sample, SampleSource};

    fn toy_model() -> Cblnet {
        Cblnet::new(EncoderConfig {
            image_size: 8,
            in_channels: 3,
            backbone_widths: vec![4],
            channels: 4,
            height: 2,
            width: 2,
            heads: 2,
            head_hidden: vec![],
        })
        .unwrap()
    }

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let cfg = GeneratorConfig {
            image_size: 8,
            size: n,
            val_size: 0,
            seed,
            ..GeneratorConfig::default()
        };
        Dataset::synthetic(&cfg, &(0..n).collect::<Vec<_>>())
    }

    fn toy_config(mode: LossMode) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 2,
            loss_mode: mode,
            augment: true,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut params = ModelParams {
            entries: vec![("w".into(), Tensor::from_slice(&[0.5]))],
        };
        let mut st = AdamState::new(&params);
        let cfg = AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        adam_step(&mut params, &[Some(&[1.0])], &mut st, &cfg);
        // m = 0.1, v = 0.001, both bias-corrected to 1
        let expect = 0.5 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((params.entries[0].1.data()[0] - expect).abs() < 1e-15);
        assert!((st.m[0][0] - 0.1).abs() < 1e-15);
        assert!((st.v[0][0] - 0.001).abs() < 1e-15);

        // second step, g = 1 again: m̂ = v̂ = 1
        adam_step(&mut params, &[Some(&[1.0])], &mut st, &cfg);
        let expect2 = expect - 1e-3 / (1.0 + 1e-8);
        assert!((params.entries[0].1.data()[0] - expect2).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_decays_moments() {
        let mut params = ModelParams {
            entries: vec![("w".into(), Tensor::from_slice(&[0.5, -0.5]))],
        };
        let mut st = AdamState::new(&params);
        let cfg = AdamConfig {
            learning_rate: 1e-3,
            ..TrainConfig::default().adam()
        };
        adam_step(&mut params, &[Some(&[0.0, 0.0])], &mut st, &cfg);
        assert_eq!(params.entries[0].1.data(), &[0.5, -0.5]);

        adam_step(&mut params, &[Some(&[1.0, -2.0])], &mut st, &cfg);
        let (m1, v1) = (st.m[0].clone(), st.v[0].clone());
        adam_step(&mut params, &[Some(&[0.0, 0.0])], &mut st, &cfg);
        assert_eq!(st.m[0], m1.iter().map(|x| 0.9 * x).collect::<Vec<_>>());
        assert_eq!(st.v[0], v1.iter().map(|x| 0.999 * x).collect::<Vec<_>>());
    }

    #[test]
    fn frozen_entries_do_not_move() {
        let mut params = ModelParams {
            entries: vec![("a".into(), Tensor::from_slice(&[1.0])), ("b".into(), Tensor::from_slice(&[1.0]))],
        };
        let mut st = AdamState::new(&params);
        adam_step(&mut params, &[None, Some(&[1.0])], &mut st, &TrainConfig::default().adam());
        assert_eq!(params.entries[0].1.data(), &[1.0]);
        assert_ne!(params.entries[1].1.data(), &[1.0]);
        assert_eq!(st.m[0], vec![0.0]);
    }

    #[test]
    fn loss_mode_names_round_trip() {
        for m in LossMode::ALL {
            assert_eq!(m.name().parse::<LossMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("l2".parse::<LossMode>().is_err());
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            batch_size: 1,
            loss_mode: LossMode::C2c,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let ok = TrainConfig {
            batch_size: 1,
            loss_mode: LossMode::L1Only,
            ..TrainConfig::default()
        };
        ok.validate().unwrap();
    }

    #[test]
    fn every_mode_runs() {
        let model = toy_model();
        let (train, val) = (toy_data(12, 1), toy_data(4, 2));
        for mode in LossMode::ALL {
            let cfg = toy_config(mode);
            let st = train_loop(&model, &cfg, &train, &val).unwrap();
            let expect_epochs = if mode == LossMode::RrtInv { 4 } else { 2 };
            assert_eq!(st.log.len(), expect_epochs, "{mode}");
            assert_eq!(st.adam.step as usize, expect_epochs * 3, "{mode}");
            assert!(st.params.all_finite());
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let model = toy_model();
        let (train, val) = (toy_data(8, 1), toy_data(4, 2));
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..toy_config(LossMode::L1Only)
        };
        let st = train_loop(&model, &cfg, &train, &val).unwrap();
        assert_eq!(st.params, model.init_params(cfg.seed));
        assert_eq!(st.log[0].val, st.log[1].val);
    }

    #[test]
    fn l1_only_equals_c2c_without_clustering_weights() {
        let model = toy_model();
        let (train, val) = (toy_data(12, 3), toy_data(4, 4));
        let a = train_loop(&model, &toy_config(LossMode::L1Only), &train, &val).unwrap();
        let mut cfg = toy_config(LossMode::C2c);
        cfg.loss.beta = 0.0;
        cfg.loss.gamma = 0.0;
        let b = train_loop(&model, &cfg, &train, &val).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn contrastive_terms_reach_the_encoder() {
        let model = toy_model();
        let params = model.init_params(0);
        let batch = Batch {
            indices: vec![0, 1, 2],
            images: (0..3)
                .map(|i| crate::data::generate_sample(&GeneratorConfig { image_size: 8, ..Default::default() }, i).image.unwrap())
                .collect(),
            targets: vec![[0.1, 0.5, 0.1, 0.5], [0.11, 0.52, 0.12, 0.51], [0.9, 0.95, 0.85, 0.99]],
            size_ratios: vec![0.16, 0.16, 0.007],
        };
        let w = LossWeights {
            beta: 1.0,
            gamma: 1.0,
            ..LossWeights::default()
        };
        // zero the heads: regression gradients then stop at the head input
        let mut params = params;
        for (n, t) in params.entries.iter_mut() {
            if is_head_param(n) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut step = batch_loss(&model, &params, &|_| true, &batch, &Objective::Contrastive(w), &mut rng).unwrap();
        assert!(step.values.align > 0.0 || step.values.uniform > 0.0);
        step.tape.backward(step.total).unwrap();
        for ((name, _), &v) in params.entries.iter().zip(&step.vars) {
            if name.starts_with("encoder.") {
                let g = step.tape.grad(v).unwrap();
                assert!(g.iter().any(|x| *x != 0.0), "{name} has zero gradient");
            }
        }
    }

    #[test]
    fn non_finite_input_aborts_with_location() {
        let model = toy_model();
        let mut samples: Vec<Sample> = (0..4).map(|i| toy_data(4, 0).materialize(i).unwrap()).collect();
        samples[2].image.as_mut().unwrap().data_mut()[0] = f64::NAN;
        samples[2].source = SampleSource::File("nan.ppm".into());
        let train = Dataset::from_samples(samples, 8);
        let cfg = TrainConfig {
            batch_size: 4,
            ..toy_config(LossMode::L1Only)
        };
        let err = train_loop(&model, &cfg, &train, &toy_data(2, 1)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, batch: 0 }), "{err}");
    }

    #[test]
    fn rrt_second_stage_only_moves_heads() {
        let model = toy_model();
        let (train, val) = (toy_data(12, 5), toy_data(4, 6));
        let cfg = toy_config(LossMode::RrtInv);
        let trainer = Trainer {
            model: &model,
            config: &cfg,
            train: &train,
            val: &val,
        };
        let mut first: Option<ModelParams> = None;
        let st = trainer
            .run(TrainState::fresh(&model, 0), |log, st| {
                if log.stage == 1 && st.epoch == cfg.epochs {
                    first = Some(st.params.clone());
                }
                Ok(())
            })
            .unwrap();
        let first = first.unwrap();
        assert_eq!(st.adam.step, 2 * 2 * 3);
        let mut heads_moved = 0;
        for ((name, a), (_, b)) in first.entries.iter().zip(&st.params.entries) {
            if is_head_param(name) {
                heads_moved += (a != b) as usize;
            } else {
                assert_eq!(a, b, "{name} moved");
            }
        }
        assert!(heads_moved > 0);
    }

    #[test]
    fn checkpoint_round_trip_and_truncation() {
        let model = toy_model();
        let (train, val) = (toy_data(8, 1), toy_data(4, 2));
        let cfg = toy_config(LossMode::C2c);
        let st = train_loop(&model, &cfg, &train, &val).unwrap();
        let ck = Checkpoint::from_state(&model, &cfg, &st);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"C2CK");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        let err = Checkpoint::from_bytes(&wrong).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        let weights = Checkpoint::weights(&model, st.params.clone(), cfg.loss_mode, 0);
        assert_eq!(Checkpoint::from_bytes(&weights.to_bytes().unwrap()).unwrap(), weights);
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let model = toy_model();
        let (train, val) = (toy_data(12, 7), toy_data(4, 8));
        let cfg = TrainConfig {
            epochs: 3,
            ..toy_config(LossMode::Smogn)
        };
        let full = train_loop(&model, &cfg, &train, &val).unwrap();

        let short = TrainConfig { epochs: 1, ..cfg.clone() };
        let partial = train_loop(&model, &short, &train, &val).unwrap();
        let bytes = Checkpoint::from_state(&model, &short, &partial).to_bytes().unwrap();
        let best = partial.best.as_ref().map(|b| b.params.clone());
        let state = Checkpoint::from_bytes(&bytes).unwrap().into_state(best).unwrap();
        let trainer = Trainer {
            model: &model,
            config: &cfg,
            train: &train,
            val: &val,
        };
        let resumed = trainer.run(state, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.log[..], full.log[1..]);
        assert_eq!(resumed.params, full.params);
    }
}
