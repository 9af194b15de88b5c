//! Optimization: Adam, learning-rate and teacher-forcing schedules, the
//! epoch loop with scheduled sampling, early stopping and checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSummary};
use crate::model::{CaptionModel, ModelConfig, PreparedSegment, Preset};
use crate::params::ParamStore;
use crate::rng::{RngState, SplitRng};
use crate::data::Vocabulary;
use crate::decoder::GenerateOptions;
use crate::util::{config_hash, write_atomic};

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrStage {
    /// Applies while `epoch < until`; `None` means forever.
    pub until: Option<usize>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub stages: Vec<LrStage>,
}

impl LrSchedule {
    /// 3e-4 below epoch 300, 1e-4 below 400, 5e-5 afterwards.
    pub fn paper() -> Self {
        LrSchedule {
            stages: vec![
                LrStage { until: Some(300), lr: 3e-4 },
                LrStage { until: Some(400), lr: 1e-4 },
                LrStage { until: None, lr: 5e-5 },
            ],
        }
    }

    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            stages: vec![LrStage { until: None, lr }],
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.stages
            .iter()
            .find(|s| s.until.is_none_or(|u| epoch < u))
            .or(self.stages.last())
            .map_or(0.0, |s| s.lr)
    }
}

/// Teacher-forcing probability, decayed linearly over the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherForcing {
    pub start: f64,
    pub end: f64,
}

impl Default for TeacherForcing {
    fn default() -> Self {
        TeacherForcing { start: 1.0, end: 0.75 }
    }
}

impl TeacherForcing {
    pub fn p_tf(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.start;
        }
        let frac = (epoch.min(epochs - 1)) as f64 / (epochs - 1) as f64;
        self.start + (self.end - self.start) * frac
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.start) || !(0.0..=1.0).contains(&self.end) || self.end > self.start {
            return Err(Error::Config(format!(
                "teacher forcing must be non-increasing within [0, 1], got {} -> {}",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    /// Epochs without a validation CIDEr-D improvement before stopping.
    pub patience: usize,
    pub eval_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub epochs: usize,
    pub teacher_forcing: TeacherForcing,
    /// Global-norm clipping threshold.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub early_stopping: Option<EarlyStopping>,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => TrainConfig {
                batch_size: 100,
                lr: LrSchedule::paper(),
                epochs: 500,
                teacher_forcing: TeacherForcing::default(),
                grad_clip: Some(5.0),
                seed: 0,
                early_stopping: Some(EarlyStopping {
                    patience: 30,
                    eval_every: 5,
                }),
                adam: AdamConfig::default(),
            },
            Preset::Desk => TrainConfig {
                batch_size: 10,
                lr: LrSchedule {
                    stages: vec![
                        LrStage { until: Some(120), lr: 3e-3 },
                        LrStage { until: Some(160), lr: 1e-3 },
                        LrStage { until: None, lr: 5e-4 },
                    ],
                },
                epochs: 200,
                teacher_forcing: TeacherForcing::default(),
                grad_clip: Some(5.0),
                seed: 0,
                early_stopping: Some(EarlyStopping {
                    patience: 30,
                    eval_every: 5,
                }),
                adam: AdamConfig::default(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.lr.stages.is_empty() {
            return Err(Error::Config("empty learning-rate schedule".into()));
        }
        if let Some(es) = &self.early_stopping {
            if es.eval_every == 0 {
                return Err(Error::Config("eval_every must be positive".into()));
            }
        }
        self.teacher_forcing.validate()
    }
}

/// First and second moments, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ParamStore, grads: &[Vec<f64>], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim("adam_step", &[params.len()], &[grads.len()]));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((tensor, g), m), v) in params.tensors_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if g.len() != tensor.numel() {
            return Err(Error::dim("adam_step", tensor.shape(), &[g.len()]));
        }
        for (((x, &gi), mi), vi) in tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mh = *mi / bc1;
            let vh = *vi / bc2;
            *x -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescale so the global norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub token_accuracy: f64,
    pub lr: f64,
    pub p_tf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<EvalSummary>,
}

/// Gradient of the batch-mean token cross-entropy for one batch, plus the
/// summed loss, token count and correct-token count.
pub fn batch_gradients(
    model: &CaptionModel,
    batch: &[&PreparedSegment],
    p_tf: f64,
    rng: &mut SplitRng,
) -> Result<(Vec<Vec<f64>>, f64, usize, usize)> {
    let total: usize = batch.iter().map(|s| s.tokens.len() + 1).sum();
    let mut grads: Vec<Vec<f64>> = model.params.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
    let (mut loss_sum, mut tokens, mut correct) = (0.0, 0, 0);
    for seg in batch {
        let mut seg_rng = rng.split();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let z = model.encode(&mut tape, &p, seg)?;
        let out = model.sequence_loss(&mut tape, &p, &z, &seg.targets(), p_tf, Some(&mut seg_rng))?;
        let scaled = tape.scale(out.loss, 1.0 / total as f64);
        let g = tape.backward(scaled)?;
        for (acc, var) in grads.iter_mut().zip(p.vars()) {
            if let Some(gv) = g.get(*var) {
                acc.iter_mut().zip(gv).for_each(|(a, b)| *a += b);
            }
        }
        loss_sum += tape.value(out.loss).item();
        tokens += out.tokens;
        correct += out.correct;
    }
    Ok((grads, loss_sum, tokens, correct))
}

fn param_norms(params: &ParamStore) -> String {
    params
        .entries()
        .iter()
        .map(|e| format!("{}={:.3e}", e.name, e.tensor.norm_sq().sqrt()))
        .collect::<Vec<_>>()
        .join(",")
}

/// One pass over `data` in seeded random batches with one Adam update per batch.
pub fn train_epoch(
    model: &mut CaptionModel,
    data: &[PreparedSegment],
    cfg: &TrainConfig,
    epoch: usize,
    adam: &mut AdamState,
    rng: &mut SplitRng,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let lr = cfg.lr.lr(epoch);
    let p_tf = cfg.teacher_forcing.p_tf(epoch, cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let (mut loss_sum, mut tokens, mut correct) = (0.0, 0usize, 0usize);
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&PreparedSegment> = chunk.iter().map(|&i| &data[i]).collect();
        let (mut grads, l, t, c) = batch_gradients(model, &batch, p_tf, rng).map_err(|e| match e {
            Error::Numeric(what) => Error::Numeric(format!(
                "{what} in epoch {epoch} batch {b}; parameter norms: {}",
                param_norms(&model.params)
            )),
            other => other,
        })?;
        if !l.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "loss/gradient in epoch {epoch} batch {b}; parameter norms: {}",
                param_norms(&model.params)
            )));
        }
        if let Some(max) = cfg.grad_clip {
            clip_global_norm(&mut grads, max);
        }
        adam_step(&mut model.params, &grads, adam, lr, &cfg.adam)?;
        loss_sum += l;
        tokens += t;
        correct += c;
    }
    Ok(EpochMetrics {
        epoch,
        loss: loss_sum / tokens as f64,
        token_accuracy: correct as f64 / tokens as f64,
        lr,
        p_tf,
        val: None,
    })
}

/// Reference captions for validation, aligned with prepared segments.
#[derive(Debug, Clone)]
pub struct ValidationSet<'a> {
    pub segments: &'a [PreparedSegment],
    pub references: &'a [String],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyState {
    pub best_score: f64,
    pub best_epoch: usize,
    pub since_best: usize,
    pub best_params: ParamStore,
}

/// Complete training state; enough to resume bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub config_hash: String,
    pub epoch: usize,
    pub finished: bool,
    pub shapes: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub adam: AdamState,
    pub rng: RngState,
    pub early: Option<EarlyState>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = serde_json::to_vec(self).map_err(|e| Error::Data(e.to_string()))?;
        write_atomic(path.as_ref(), &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Data(format!("{}: malformed checkpoint: {e}", path.display())))?;
        if ck.header.schema_version != CHECKPOINT_SCHEMA {
            return Err(Error::Data(format!(
                "checkpoint schema {} unsupported (expected {CHECKPOINT_SCHEMA})",
                ck.header.schema_version
            )));
        }
        let expect = run_hash(&ck.model_config, &ck.train_config);
        if ck.header.config_hash != expect {
            return Err(Error::Data("checkpoint config hash does not match its configuration".into()));
        }
        Ok(ck)
    }

    pub fn model(&self) -> Result<CaptionModel> {
        CaptionModel::from_parts(self.model_config.clone(), self.vocab.clone(), self.params.clone())
    }
}

pub fn run_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    config_hash(&(model, train))
}

/// Stateful training driver.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: CaptionModel,
    pub cfg: TrainConfig,
    pub adam: AdamState,
    pub rng: SplitRng,
    /// Next epoch to run.
    pub epoch: usize,
    pub early: Option<EarlyState>,
    pub finished: bool,
}

impl Trainer {
    pub fn new(model: CaptionModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(&model.params);
        let rng = SplitRng::new(cfg.seed);
        Ok(Trainer {
            model,
            cfg,
            adam,
            rng,
            epoch: 0,
            early: None,
            finished: false,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.model()?;
        let rng = SplitRng::from_state(&ck.rng).ok_or_else(|| Error::Data("corrupt rng state in checkpoint".into()))?;
        Ok(Trainer {
            model,
            cfg: ck.train_config.clone(),
            adam: ck.adam.clone(),
            rng,
            epoch: ck.header.epoch,
            early: ck.early.clone(),
            finished: ck.header.finished,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                schema_version: CHECKPOINT_SCHEMA,
                config_hash: run_hash(&self.model.config, &self.cfg),
                epoch: self.epoch,
                finished: self.finished,
                shapes: self
                    .model
                    .params
                    .entries()
                    .iter()
                    .map(|e| (e.name.clone(), e.tensor.shape().to_vec()))
                    .collect(),
            },
            model_config: self.model.config.clone(),
            train_config: self.cfg.clone(),
            vocab: self.model.vocab.clone(),
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            rng: self.rng.state(),
            early: self.early.clone(),
        }
    }

    /// Run one epoch and, when due, a validation pass.
    pub fn step(&mut self, train: &[PreparedSegment], val: Option<&ValidationSet<'_>>) -> Result<EpochMetrics> {
        let mut metrics = train_epoch(&mut self.model, train, &self.cfg, self.epoch, &mut self.adam, &mut self.rng)?;
        self.epoch += 1;
        if let (Some(es), Some(val)) = (self.cfg.early_stopping, val) {
            if self.epoch.is_multiple_of(es.eval_every) || self.epoch == self.cfg.epochs {
                let summary = evaluate(&self.model, val.segments, val.references, &GenerateOptions::default())?.summary;
                let score = summary.cider_d;
                metrics.val = Some(summary);
                let improved = self.early.as_ref().is_none_or(|e| score > e.best_score);
                if improved {
                    self.early = Some(EarlyState {
                        best_score: score,
                        best_epoch: self.epoch,
                        since_best: 0,
                        best_params: self.model.params.clone(),
                    });
                } else if let Some(e) = self.early.as_mut() {
                    e.since_best = self.epoch - e.best_epoch;
                    if e.since_best >= es.patience {
                        self.finished = true;
                    }
                }
            }
        }
        if self.epoch >= self.cfg.epochs {
            self.finished = true;
        }
        Ok(metrics)
    }

    /// Train until the epoch budget or early stopping, then restore the
    /// best validation parameters if any were recorded.
    pub fn fit(
        &mut self,
        train: &[PreparedSegment],
        val: Option<&ValidationSet<'_>>,
        mut on_epoch: impl FnMut(&EpochMetrics, &Trainer) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut history = Vec::new();
        while !self.finished {
            let m = self.step(train, val)?;
            on_epoch(&m, self)?;
            history.push(m);
        }
        self.restore_best();
        Ok(history)
    }

    pub fn restore_best(&mut self) {
        if let Some(e) = &self.early {
            self.model.params = e.best_params.clone();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = scalar_store(0.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[vec![1.0]], &mut st, 0.1, &AdamConfig::default()).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((p.entries()[0].tensor.item() - expect).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = scalar_store(1.25);
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &[vec![0.0]], &mut st, 0.1, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.entries()[0].tensor.item(), 1.25);
    }

    #[test]
    fn adam_moments_decay_after_gradients_stop() {
        let mut p = scalar_store(0.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[vec![2.0]], &mut st, 0.01, &AdamConfig::default()).unwrap();
        let (m0, v0) = (st.m[0][0], st.v[0][0]);
        for _ in 0..20_000 {
            adam_step(&mut p, &[vec![0.0]], &mut st, 0.01, &AdamConfig::default()).unwrap();
        }
        assert!(st.m[0][0].abs() < m0 * 1e-12);
        assert!(st.v[0][0] < v0 * 1e-8);
    }

    #[test]
    fn lr_schedule_boundaries() {
        let s = LrSchedule::paper();
        assert_eq!(s.lr(0), 3e-4);
        assert_eq!(s.lr(299), 3e-4);
        assert_eq!(s.lr(300), 1e-4);
        assert_eq!(s.lr(399), 1e-4);
        assert_eq!(s.lr(400), 5e-5);
        assert_eq!(s.lr(10_000), 5e-5);
    }

    #[test]
    fn teacher_forcing_is_linear_and_non_increasing() {
        let tf = TeacherForcing::default();
        assert_eq!(tf.p_tf(0, 11), 1.0);
        assert!((tf.p_tf(5, 11) - 0.875).abs() < 1e-15);
        assert_eq!(tf.p_tf(10, 11), 0.75);
        let ps: Vec<f64> = (0..11).map(|e| tf.p_tf(e, 11)).collect();
        assert!(ps.windows(2).all(|w| w[1] <= w[0]));
        assert!(TeacherForcing { start: 0.5, end: 0.9 }.validate().is_err());
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        let before = g.clone();
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        for (a, b) in g.iter().flatten().zip(before.iter().flatten()) {
            assert!((a * 5.0 - b).abs() < 1e-15);
        }
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
