//! Optimizer, dataset splits, the training loop and evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NormMode, Tape};
use crate::config::{FrameFormat, ModelConfig, OutputFormat};
use crate::error::{ensure, Error, Result};
use crate::metrics::{compute_metrics, hr_from_signal, integrate_diff, ExperimentResult, HrPair, DEFAULT_BAND};
use crate::model::{batch_tensor, Model};
use crate::preprocess::{Example, SignalTrace, Target};
use crate::tensor::Tensor;

/// Clips per inference batch in [`evaluate`].
pub const EVAL_BATCH: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loss {
    #[default]
    #[serde(rename = "MSE")]
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: Loss,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 50,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            loss: Loss::Mse,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "batch_size must be positive");
        ensure!(self.epochs >= 1, Config, "epochs must be positive");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Config,
            "learning_rate must be positive, got {}",
            self.learning_rate
        );
        ensure!(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            Config,
            "weight_decay must be non-negative, got {}",
            self.weight_decay
        );
        ensure!(self.max_steps != Some(0), Config, "max_steps must be positive when set");
        Ok(())
    }
}

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One AdamW update of `p` at step `t ≥ 1`: decoupled decay `p ← p − lr·wd·p`,
/// then the bias-corrected moment step.
pub fn adamw_step(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, hp: &AdamW) {
    assert!(t >= 1, "AdamW steps are counted from 1");
    assert!(p.len() == g.len() && p.len() == m.len() && p.len() == v.len(), "AdamW buffer lengths differ");
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    for i in 0..p.len() {
        p[i] -= hp.lr * hp.weight_decay * p[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// First and second moments for every parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamWState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamWState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], hp: &AdamW) {
        self.t += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            adamw_step(p.data_mut(), g.data(), &mut self.m[i], &mut self.v[i], self.t, hp);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitMode {
    /// 7:1:2 train/val/test.
    IntraGuideline,
    /// 8:2 train/val.
    CrossTrainVal,
    /// `k`-fold partition.
    KFold(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    Train,
    Val,
    Test,
    Fold(usize),
}

/// Assignment of ids (subjects) to partitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub assignment: BTreeMap<String, Partition>,
}

impl SplitPlan {
    /// Ids in `part`, sorted.
    pub fn ids(&self, part: Partition) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &p)| p == part)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn partition_of(&self, id: &str) -> Option<Partition> {
        self.assignment.get(id).copied()
    }

    /// Partition sizes in declared order (train, val, test or fold 0..k).
    pub fn sizes(&self) -> Vec<usize> {
        let parts: Vec<Partition> = match self.mode {
            SplitMode::IntraGuideline => vec![Partition::Train, Partition::Val, Partition::Test],
            SplitMode::CrossTrainVal => vec![Partition::Train, Partition::Val],
            SplitMode::KFold(k) => (0..k).map(Partition::Fold).collect(),
        };
        parts.into_iter().map(|p| self.ids(p).len()).collect()
    }
}

/// Seeded shuffle of the distinct `ids`, then a contiguous partition.
///
/// Ratio modes floor the train share, floor the validation share and give
/// the remainder to the last split. K-fold gives the first `n mod k` folds one
/// extra id.
pub fn split_dataset(ids: &[String], mode: SplitMode, seed: u64) -> Result<SplitPlan> {
    let mut unique: Vec<String> = ids.to_vec();
    unique.sort();
    unique.dedup();
    let n = unique.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let parts: Vec<(Partition, usize)> = match mode {
        SplitMode::IntraGuideline => {
            ensure!(n >= 10, Input, "a 7:1:2 split needs at least 10 ids, got {n}");
            let train = n * 7 / 10;
            let val = n / 10;
            vec![(Partition::Train, train), (Partition::Val, val), (Partition::Test, n - train - val)]
        }
        SplitMode::CrossTrainVal => {
            ensure!(n >= 10, Input, "an 8:2 split needs at least 10 ids, got {n}");
            let train = n * 8 / 10;
            vec![(Partition::Train, train), (Partition::Val, n - train)]
        }
        SplitMode::KFold(k) => {
            ensure!(k >= 2, Input, "k-fold needs k ≥ 2, got {k}");
            ensure!(n >= k, Input, "{k}-fold needs at least {k} ids, got {n}");
            (0..k).map(|f| (Partition::Fold(f), n / k + usize::from(f < n % k))).collect()
        }
    };
    let mut assignment = BTreeMap::new();
    let mut it = unique.into_iter();
    for (part, size) in parts {
        for id in it.by_ref().take(size) {
            assignment.insert(id, part);
        }
    }
    Ok(SplitPlan { mode, assignment })
}

/// Anything that maps preprocessed examples to outputs in target space: a
/// waveform per window for signal output, one bpm value for HR output.
pub trait Predictor {
    fn predict(&self, batch: &[&Example]) -> Result<Vec<Vec<f64>>>;
}

impl Predictor for Model {
    fn predict(&self, batch: &[&Example]) -> Result<Vec<Vec<f64>>> {
        let clips: Vec<_> = batch.iter().map(|e| &e.input).collect();
        Model::predict(self, &clips)
    }
}

/// Predictor that returns each example's own target.
pub struct PerfectStub;

impl Predictor for PerfectStub {
    fn predict(&self, batch: &[&Example]) -> Result<Vec<Vec<f64>>> {
        Ok(batch.iter().map(|e| e.target.values()).collect())
    }
}

/// Heart rate of one predicted output under `cfg`'s output conventions.
pub fn predicted_hr(output: &[f64], fps: f64, cfg: &ModelConfig) -> Result<f64> {
    match cfg.output_format {
        OutputFormat::Hr => {
            ensure!(output.len() == 1, Dimension, "HR output must be one value, got {}", output.len());
            ensure!(output[0].is_finite(), Estimation, "non-finite HR prediction");
            Ok(output[0])
        }
        OutputFormat::Signal => {
            let trace = SignalTrace {
                samples: output.to_vec(),
                fps,
            };
            let trace = match cfg.frame_format {
                FrameFormat::DiffNorm => integrate_diff(&trace),
                FrameFormat::Raw => trace,
            };
            Ok(hr_from_signal(&trace.samples, fps, DEFAULT_BAND)?.bpm)
        }
    }
}

/// Predicts every window and compares heart rates with the ground-truth traces.
///
/// Windows whose predicted or reference HR cannot be estimated are excluded
/// and counted.
pub fn evaluate(predictor: &dyn Predictor, cfg: &ModelConfig, examples: &[Example]) -> Result<ExperimentResult> {
    ensure!(!examples.is_empty(), Input, "cannot evaluate an empty dataset");
    let mut pairs = Vec::with_capacity(examples.len());
    let mut excluded = 0;
    for chunk in examples.chunks(EVAL_BATCH) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let outputs = predictor.predict(&refs)?;
        ensure!(
            outputs.len() == chunk.len(),
            Contract,
            "predictor returned {} outputs for {} examples",
            outputs.len(),
            chunk.len()
        );
        for (ex, out) in chunk.iter().zip(outputs) {
            let fps = ex.label_trace.fps;
            let pred = predicted_hr(&out, fps, cfg);
            let label = hr_from_signal(&ex.label_trace.samples, fps, DEFAULT_BAND);
            match (pred, label) {
                (Ok(p), Ok(l)) => pairs.push(HrPair {
                    clip_id: ex.id.clone(),
                    pred_bpm: p,
                    label_bpm: l.bpm,
                }),
                (Err(e), _) | (_, Err(e)) if matches!(e.root(), Error::Estimation(_)) => excluded += 1,
                (Err(e), _) | (_, Err(e)) => return Err(e),
            }
        }
    }
    ensure!(
        !pairs.is_empty(),
        Estimation,
        "all {excluded} windows were excluded: no heart rate could be estimated"
    );
    compute_metrics(pairs, excluded)
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` without a validation set; `+∞` when no window could be scored.
    pub val_mae: Option<f64>,
}

pub struct TrainOutcome {
    /// The model at the best validation epoch.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: usize,
}

fn targets_tensor(batch: &[&Example]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = batch.iter().map(|e| e.target.values()).collect();
    let len = rows[0].len();
    ensure!(rows.iter().all(|r| r.len() == len), Dimension, "targets in a batch differ in length");
    let shape: Vec<usize> = match batch[0].target {
        Target::Signal(_) => vec![batch.len(), len],
        Target::Hr(_) => vec![batch.len()],
    };
    Tensor::new(&shape, rows.concat())
}

/// Trains a fresh model seeded with `tcfg.seed`.
///
/// Each epoch visits the training set in a seeded shuffled order; after each
/// epoch the validation MAE decides whether the parameters become the new
/// best (strict improvement, so ties keep the earlier epoch). Without a
/// validation set the last epoch wins.
pub fn train_model(cfg: &ModelConfig, tcfg: &TrainConfig, train: &[Example], val: &[Example]) -> Result<TrainOutcome> {
    train_model_with(cfg, tcfg, train, val, |_| {})
}

/// [`train_model`] with a callback after every epoch.
pub fn train_model_with(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    train: &[Example],
    val: &[Example],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    ensure!(!train.is_empty(), Input, "training set is empty");
    let mut model = Model::new(cfg, tcfg.seed)?;
    let hp = AdamW::new(tcfg.learning_rate, tcfg.weight_decay);
    let mut opt = AdamWState::new(model.params().tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut steps = 0;
    let cap = tcfg.max_steps.unwrap_or(usize::MAX);

    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(tcfg.batch_size) {
            if steps == cap {
                break;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = train_step(&mut model, &mut opt, &hp, &batch).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "{msg} at epoch {epoch}, step {} (batch {})",
                    steps + 1,
                    batch.iter().map(|e| e.id.as_str()).collect::<Vec<_>>().join(", ")
                )),
                other => other,
            })?;
            loss_sum += loss;
            batches += 1;
            steps += 1;
        }
        if batches == 0 {
            break;
        }
        let val_mae = if val.is_empty() {
            None
        } else {
            Some(match evaluate(&model, cfg, val) {
                Ok(r) => r.mae,
                Err(e) if matches!(e.root(), Error::Estimation(_)) => f64::INFINITY,
                Err(e) => return Err(e),
            })
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_mae,
        };
        on_epoch(&record);
        history.push(record);
        let score = val_mae.unwrap_or(f64::NEG_INFINITY);
        let improves = match &best {
            None => true,
            Some((b, _, _)) => score < *b || val_mae.is_none(),
        };
        if improves {
            best = Some((score, epoch, model.clone()));
        }
        if steps == cap {
            break;
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        steps,
    })
}

/// Forward, MSE loss, backward and one AdamW update; returns the batch loss.
pub fn train_step(model: &mut Model, opt: &mut AdamWState, hp: &AdamW, batch: &[&Example]) -> Result<f64> {
    let clips: Vec<_> = batch.iter().map(|e| &e.input).collect();
    let x = batch_tensor(&clips)?;
    let y = targets_tensor(batch)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let mut states = model.bn_states().to_vec();
    let out = model.forward(&mut tape, xv, NormMode::Train, &mut states)?;
    let loss = tape.mse_loss(out.output, yv)?;
    let loss_value = tape.value(loss).item();
    ensure!(loss_value.is_finite(), Numeric, "non-finite training loss {loss_value}");
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Tensor> = out
        .param_vars
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    ensure!(grads.iter().all(Tensor::is_finite), Numeric, "non-finite gradient");
    opt.update(model.params_mut().tensors_mut(), &grads, hp);
    model.bn_states_mut().clone_from_slice(&states);
    Ok(loss_value)
}
