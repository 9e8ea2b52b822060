//! Adam optimization, the pre-train -> fine-tune schedule, run artifacts,
//! and reproducibility.
//!
//! All randomness is derived from (seed, stage, epoch, batch, purpose)
//! streams, so a run can be resumed at any epoch boundary and disabled
//! tasks never perturb the draws of enabled ones.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::Tape;
use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointError};
use crate::corpus::{iter_batches, AttributeCatalog, DatasetSplit, IdMaps};
use crate::evaluator::{evaluate, EvalError, EvalMode, EvalReport};
use crate::model::{Mode, ModelConfig, ModelError, Parameters};
use crate::objectives::{
    build_nip_graph, build_pretrain_graph, LossWeights, ObjectiveError, PretrainRngs,
};
use crate::rng::{purpose, stage, stream};
use crate::statistics::CooccurrenceTable;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter '{param}'")]
    NonFiniteGrad { param: String },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub batch_size: usize,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    /// epochs without validation-MRR improvement before fine-tuning stops
    pub patience: usize,
    pub seed: u64,
    /// separate from `seed` so metric comparisons across training configs
    /// share candidate sets
    pub eval_seed: u64,
    pub weights: LossWeights,
    /// replacement probability when building paired sequences
    pub p_rpc: f32,
    /// reorder fraction when building paired sequences
    pub beta: f32,
    /// co-occurrence and frequent-attribute set size
    pub k: u32,
    /// sampled negatives per evaluation
    pub n_neg: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 256,
            epochs_pretrain: 20,
            epochs_finetune: 100,
            patience: 10,
            seed: 42,
            eval_seed: 7777,
            weights: LossWeights::default(),
            p_rpc: 0.2,
            beta: 0.2,
            k: 20,
            n_neg: 99,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 {
            return Err(TrainError::BadConfig("lr must be > 0".into()));
        }
        if self.patience < 1 {
            return Err(TrainError::BadConfig("patience must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::BadConfig("batch must be >= 1".into()));
        }
        if self.k < 1 {
            return Err(TrainError::BadConfig("k must be >= 1".into()));
        }
        for (name, v) in [("p_rpc", self.p_rpc), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TrainError::BadConfig(format!("{name} {v} outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("lambda_cip", self.weights.cip),
            ("lambda_pss", self.weights.pss),
            ("lambda_iap", self.weights.iap),
            ("lambda_fap", self.weights.fap),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(TrainError::BadConfig(format!(
                    "{name} must be a non-negative finite number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// First/second moment accumulators, aligned with the canonical parameter
/// order, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &Parameters) -> Self {
        let zeros: Vec<Vec<f32>> = params
            .named()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Standard Adam with bias correction; the padding embedding rows are
/// re-zeroed afterwards. Parameters whose gradient slot is None are left
/// untouched (their moments do not decay).
pub fn adam_step(
    params: &mut Parameters,
    grads: &[Option<&[f32]>],
    state: &mut OptimizerState,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (beta1 as f64).powi(t);
    let bc2 = 1.0 - (beta2 as f64).powi(t);
    let named = params.named_mut();
    debug_assert_eq!(named.len(), grads.len());
    for (idx, ((name, tensor), grad)) in named.into_iter().zip(grads).enumerate() {
        let Some(grad) = grad else { continue };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGrad { param: name });
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let data = tensor.data_mut();
        for j in 0..data.len() {
            let g = grad[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let mhat = m[j] as f64 / bc1;
            let vhat = v[j] as f64 / bc2;
            data[j] -= (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
        }
    }
    let d = params.d();
    params.item_emb.data_mut()[..d].fill(0.0);
    params.attr_emb.data_mut()[..d].fill(0.0);
    Ok(())
}

/// Mutable training snapshot: parameters, optimizer moments, and how many
/// epochs of the current stage have run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: Parameters,
    pub opt: OptimizerState,
    pub epochs_done: u32,
}

impl TrainState {
    pub fn fresh(params: Parameters) -> Self {
        let opt = OptimizerState::new(&params);
        Self {
            params,
            opt,
            epochs_done: 0,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        let opt = ckpt
            .opt
            .unwrap_or_else(|| OptimizerState::new(&ckpt.params));
        Self {
            params: ckpt.params,
            opt,
            epochs_done: ckpt.epochs_done,
        }
    }
}

/// Run directory layout: config.snapshot, stats.bin, ckpt-pretrain.bin,
/// ckpt-best.bin, metrics.jsonl.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(path: impl AsRef<Path>) -> std::io::Result<Self> {
        std::fs::create_dir_all(path.as_ref())?;
        Ok(Self {
            root: path.as_ref().to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn stats_path(&self) -> PathBuf {
        self.root.join("stats.bin")
    }

    pub fn ckpt_pretrain(&self) -> PathBuf {
        self.root.join("ckpt-pretrain.bin")
    }

    pub fn ckpt_best(&self) -> PathBuf {
        self.root.join("ckpt-best.bin")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn snapshot_path(&self) -> PathBuf {
        self.root.join("config.snapshot")
    }

    pub fn append_metrics(&self, record: &EpochRecord) -> Result<(), TrainError> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.metrics_path())?;
        let line = serde_json::to_string(record)?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}

/// One line of metrics.jsonl.
#[derive(Debug, Serialize)]
pub struct EpochRecord {
    pub stage: &'static str,
    pub epoch: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_pre: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_cip: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_pss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_iap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_fap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_nip: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid: Option<EvalReport>,
}

#[derive(Debug, Clone, Default)]
pub struct PretrainEpochLoss {
    pub total: f64,
    pub cip: Option<f64>,
    pub pss: Option<f64>,
    pub iap: Option<f64>,
    pub fap: Option<f64>,
}

pub struct PretrainOutcome {
    pub state: TrainState,
    pub epoch_losses: Vec<PretrainEpochLoss>,
}

struct MeanAcc {
    sum: f64,
    n: usize,
}

impl MeanAcc {
    fn new() -> Self {
        Self { sum: 0.0, n: 0 }
    }

    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

fn pretrain_rngs(seed: u64, epoch: u64, batch: u64) -> PretrainRngs {
    let r = |p: u64| -> ChaCha8Rng { stream(seed, &[stage::PRETRAIN, epoch, batch, p]) };
    PretrainRngs {
        cip: r(purpose::TASK_CIP),
        pss: r(purpose::TASK_PSS),
        iap: r(purpose::TASK_IAP),
        fap: r(purpose::TASK_FAP),
        dropout_main: r(purpose::DROPOUT_MAIN),
        dropout_paired: r(purpose::DROPOUT_PAIRED),
    }
}

/// Rng streams used by the standalone loss computations and the training
/// loop alike; a weighted pre-train batch and the corresponding standalone
/// task loss therefore see identical draws.
pub fn pretrain_batch_rngs(cfg: &TrainConfig, epoch: u32, batch: usize) -> PretrainRngs {
    pretrain_rngs(cfg.seed, epoch as u64, batch as u64)
}

/// Joint pre-training over the split's windows for the configured epochs.
/// Writes one metrics line per epoch and the final checkpoint when a run
/// directory is given. All-zero weights make this a no-op on parameters.
pub fn pretrain(
    run: Option<&RunDir>,
    split: &DatasetSplit,
    cooc: &CooccurrenceTable,
    catalog: &AttributeCatalog,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    ids: &IdMaps,
    mut state: TrainState,
) -> Result<PretrainOutcome, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    let mut epoch_losses = Vec::new();
    for epoch in (state.epochs_done + 1)..=(cfg.epochs_pretrain as u32) {
        let mut shuffle = stream(cfg.seed, &[purpose::SHUFFLE, stage::PRETRAIN, epoch as u64]);
        let mut total = MeanAcc::new();
        let mut parts = [MeanAcc::new(), MeanAcc::new(), MeanAcc::new(), MeanAcc::new()];
        for (batch_idx, batch) in
            iter_batches(split, model_cfg.max_len, cfg.batch_size, &mut shuffle).enumerate()
        {
            let mut rngs = pretrain_rngs(cfg.seed, epoch as u64, batch_idx as u64);
            let mut tape = Tape::new();
            let graph = build_pretrain_graph(
                &mut tape,
                &state.params,
                model_cfg,
                &batch,
                cooc,
                catalog,
                &cfg.weights,
                cfg.k,
                cfg.p_rpc,
                cfg.beta,
                Mode::Train,
                &mut rngs,
            )?;
            for (slot, part) in [
                graph.parts.cip,
                graph.parts.pss,
                graph.parts.iap,
                graph.parts.fap,
            ]
            .into_iter()
            .enumerate()
            {
                if let Some(v) = part {
                    parts[slot].push(v as f64);
                }
            }
            if let Some(loss) = graph.total {
                total.push(tape.value(loss).item() as f64);
                tape.backward(loss).map_err(ObjectiveError::from)?;
                let vars = graph.bound.vars();
                let grads: Vec<Option<&[f32]>> = vars.iter().map(|&v| tape.grad(v)).collect();
                adam_step(
                    &mut state.params,
                    &grads,
                    &mut state.opt,
                    cfg.lr,
                    cfg.adam_beta1,
                    cfg.adam_beta2,
                    cfg.adam_eps,
                )?;
            }
        }
        state.epochs_done = epoch;
        let epoch_loss = PretrainEpochLoss {
            total: total.mean().unwrap_or(0.0),
            cip: parts[0].mean(),
            pss: parts[1].mean(),
            iap: parts[2].mean(),
            fap: parts[3].mean(),
        };
        if let Some(run) = run {
            run.append_metrics(&EpochRecord {
                stage: "pretrain",
                epoch,
                loss_pre: Some(epoch_loss.total),
                loss_cip: epoch_loss.cip,
                loss_pss: epoch_loss.pss,
                loss_iap: epoch_loss.iap,
                loss_fap: epoch_loss.fap,
                loss_nip: None,
                valid: None,
            })?;
        }
        epoch_losses.push(epoch_loss);
    }
    if let Some(run) = run {
        save_checkpoint(
            run.ckpt_pretrain(),
            &Checkpoint {
                config: *model_cfg,
                ids: ids.clone(),
                params: state.params.clone(),
                opt: Some(state.opt.clone()),
                epochs_done: state.epochs_done,
            },
        )?;
    }
    Ok(PretrainOutcome {
        state,
        epoch_losses,
    })
}

pub struct FinetuneOutcome {
    pub best_params: Parameters,
    pub best_valid_mrr: f64,
    pub best_epoch: u32,
    pub final_state: TrainState,
    pub epoch_losses: Vec<f64>,
    pub stopped_early: bool,
}

/// Next-item-prediction fine-tuning with per-epoch validation. Keeps the
/// best-validation-MRR parameters, stops once `patience` epochs pass
/// without improvement, and (with a run directory) writes metrics lines
/// and ckpt-best.bin. Early-stop tracking always starts fresh, even when
/// resuming from a checkpointed state.
pub fn finetune(
    run: Option<&RunDir>,
    split: &DatasetSplit,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    ids: &IdMaps,
    mut state: TrainState,
    threads: usize,
) -> Result<FinetuneOutcome, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    let mut best_params = state.params.clone();
    let mut best_mrr = f64::NEG_INFINITY;
    let mut best_epoch = state.epochs_done;
    let mut bad_epochs = 0usize;
    let mut epoch_losses = Vec::new();
    let mut stopped_early = false;
    for epoch in (state.epochs_done + 1)..=(cfg.epochs_finetune as u32) {
        let mut shuffle = stream(cfg.seed, &[purpose::SHUFFLE, stage::FINETUNE, epoch as u64]);
        let mut loss_acc = MeanAcc::new();
        for (batch_idx, batch) in
            iter_batches(split, model_cfg.max_len, cfg.batch_size, &mut shuffle).enumerate()
        {
            let mut sample_rng = stream(
                cfg.seed,
                &[stage::FINETUNE, epoch as u64, batch_idx as u64, purpose::TASK_NIP],
            );
            let mut dropout_rng = stream(
                cfg.seed,
                &[
                    stage::FINETUNE,
                    epoch as u64,
                    batch_idx as u64,
                    purpose::DROPOUT_MAIN,
                ],
            );
            let mut tape = Tape::new();
            let graph = build_nip_graph(
                &mut tape,
                &state.params,
                model_cfg,
                &batch,
                split,
                Mode::Train,
                &mut sample_rng,
                &mut dropout_rng,
            )?;
            if let Some(loss) = graph.loss {
                loss_acc.push(graph.value as f64);
                tape.backward(loss).map_err(ObjectiveError::from)?;
                let vars = graph.bound.vars();
                let grads: Vec<Option<&[f32]>> = vars.iter().map(|&v| tape.grad(v)).collect();
                adam_step(
                    &mut state.params,
                    &grads,
                    &mut state.opt,
                    cfg.lr,
                    cfg.adam_beta1,
                    cfg.adam_beta2,
                    cfg.adam_eps,
                )?;
            }
        }
        state.epochs_done = epoch;
        let epoch_loss = loss_acc.mean().unwrap_or(0.0);
        epoch_losses.push(epoch_loss);

        let report = evaluate(
            split,
            &state.params,
            model_cfg,
            EvalMode::Valid,
            cfg.eval_seed,
            cfg.n_neg,
            threads,
        )?;
        if let Some(run) = run {
            run.append_metrics(&EpochRecord {
                stage: "finetune",
                epoch,
                loss_pre: None,
                loss_cip: None,
                loss_pss: None,
                loss_iap: None,
                loss_fap: None,
                loss_nip: Some(epoch_loss),
                valid: Some(report),
            })?;
        }
        if report.mrr > best_mrr {
            best_mrr = report.mrr;
            best_epoch = epoch;
            best_params = state.params.clone();
            bad_epochs = 0;
            if let Some(run) = run {
                save_checkpoint(
                    run.ckpt_best(),
                    &Checkpoint {
                        config: *model_cfg,
                        ids: ids.clone(),
                        params: best_params.clone(),
                        opt: Some(state.opt.clone()),
                        epochs_done: epoch,
                    },
                )?;
            }
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(FinetuneOutcome {
        best_params,
        best_valid_mrr: best_mrr,
        best_epoch,
        final_state: state,
        epoch_losses,
        stopped_early,
    })
}
