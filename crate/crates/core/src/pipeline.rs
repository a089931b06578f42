//! Two-stage training, evaluation and ablation switches.
//!
//! Stage 1 trains each modality's encoder, adapter and decoder against its
//! unimodal labels and keeps the parameters of the best validation epoch.
//! Stage 2 loads that checkpoint, freezes adapters and decoders, and trains
//! the rest of the network on the multimodal label with the union loss.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autograd::Var;
use crate::data::SampleRecord;
use crate::encoders::Modality;
use crate::error::{KudaError, Result};
use crate::fusion::{ratio_vars, unit_ratios, FusionStrategy};
use crate::metrics::{compute_metrics, MetricReport};
use crate::model::{Features, KudaModel, Labels, ModelConfig, Prediction};
use crate::objectives::{mae_loss, union_loss, LossBundle};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::Session;
use crate::rng::rng_for;
use crate::snapshot::Snapshot;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// Skip stage 1; adapters and decoders start untrained and stay trainable.
    #[serde(rename = "no_KIP")]
    NoKip,
    /// Knowledge representation replaced by the encoder output.
    #[serde(rename = "no_Adapter")]
    NoAdapter,
    /// `no_KIP`, `no_Adapter` and `no_SR` together.
    #[serde(rename = "no_EKI")]
    NoEki,
    /// Ratios fixed to 1 during training.
    #[serde(rename = "no_SR")]
    NoSr,
    /// Addition fusion in place of the attention blocks.
    #[serde(rename = "no_DAF")]
    NoDaf,
    /// Contrastive term dropped (`alpha = 0`).
    #[serde(rename = "no_CE")]
    NoCe,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoKip,
        Ablation::NoAdapter,
        Ablation::NoEki,
        Ablation::NoSr,
        Ablation::NoDaf,
        Ablation::NoCe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoKip => "no_KIP",
            Ablation::NoAdapter => "no_Adapter",
            Ablation::NoEki => "no_EKI",
            Ablation::NoSr => "no_SR",
            Ablation::NoDaf => "no_DAF",
            Ablation::NoCe => "no_CE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub epochs: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub pretrain: StageSchedule,
    pub downstream: StageSchedule,
    /// Slope of the ratio function.
    pub k: f64,
    pub alpha: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub ablations: BTreeSet<Ablation>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Batch 32, learning rate 3e-5, 50 epochs, k = 0.3, alpha = 0.01.
    pub fn paper() -> Self {
        let schedule = StageSchedule {
            epochs: 50,
            learning_rate: 3e-5,
        };
        Self {
            seed: 0,
            batch_size: 32,
            pretrain: schedule,
            downstream: schedule,
            k: 0.3,
            alpha: 0.01,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            ablations: BTreeSet::new(),
            model: ModelConfig::paper(),
        }
    }

    /// Small widths and a short, faster schedule for single-CPU runs.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            pretrain: StageSchedule {
                epochs: 8,
                learning_rate: 2e-3,
            },
            downstream: StageSchedule {
                epochs: 8,
                learning_rate: 1e-3,
            },
            k: 5.0,
            model: ModelConfig::desk(),
            ..Self::paper()
        }
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
            || (self.ablations.contains(&Ablation::NoEki)
                && matches!(a, Ablation::NoKip | Ablation::NoAdapter | Ablation::NoSr))
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.ablations.insert(a);
        self
    }

    /// Model configuration after applying architectural ablations.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.has(Ablation::NoAdapter) {
            m.adapters = false;
        }
        if self.has(Ablation::NoDaf) {
            m.fusion = FusionStrategy::Addition;
        }
        m
    }

    pub fn effective_alpha(&self) -> f64 {
        if self.has(Ablation::NoCe) {
            0.0
        } else {
            self.alpha
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(KudaError::Config("batch_size must be at least 2".into()));
        }
        if !(self.k.is_finite() && self.k > 0.0) {
            return Err(KudaError::Config(format!(
                "k must be positive, got {}",
                self.k
            )));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(KudaError::Config(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        for s in [self.pretrain, self.downstream] {
            if !(s.learning_rate.is_finite() && s.learning_rate > 0.0) {
                return Err(KudaError::Config("learning rates must be positive".into()));
            }
        }
        Ok(())
    }

    fn optimizer(&self, schedule: StageSchedule) -> AdamWConfig {
        AdamWConfig {
            lr: schedule.learning_rate,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            ..AdamWConfig::default()
        }
    }
}

/// Append-only JSON Lines log with a step counter that keeps increasing
/// across reopenings of the same file.
pub struct RunLog {
    sink: Option<File>,
    step: u64,
    pub records: Vec<Value>,
}

impl RunLog {
    pub fn memory() -> Self {
        Self {
            sink: None,
            step: 0,
            records: Vec::new(),
        }
    }

    pub fn append_to(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut step = 0;
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if let Ok(v) = serde_json::from_str::<Value>(&line) {
                    if let Some(s) = v.get("step").and_then(Value::as_u64) {
                        step = step.max(s + 1);
                    }
                }
            }
        }
        let sink = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            sink: Some(sink),
            step,
            records: Vec::new(),
        })
    }

    pub fn write(&mut self, mut event: Value) -> Result<()> {
        if let Value::Object(map) = &mut event {
            map.insert("step".into(), json!(self.step));
        }
        self.step += 1;
        if let Some(f) = &mut self.sink {
            writeln!(f, "{}", serde_json::to_string(&event)?)?;
        }
        self.records.push(event);
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_mae: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub best_epoch: usize,
    pub best_valid_mae: f64,
    pub history: Vec<EpochRecord>,
}

fn batches(n: usize, batch_size: usize, rng: &mut crate::rng::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn pick<'a>(records: &[&'a SampleRecord], idx: &[usize]) -> Vec<&'a SampleRecord> {
    idx.iter().map(|&i| records[i]).collect()
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(KudaError::NonFinite(what.into()))
    }
}

/// Mean over modalities of each decoder's validation MAE.
pub fn unimodal_mae(model: &KudaModel, records: &[&SampleRecord]) -> Result<[f64; 3]> {
    let mut sums = [0.0; 3];
    for chunk in records.chunks(EVAL_CHUNK) {
        let feats = Features::from_records(chunk, &model.config)?;
        let labels = Labels::from_records(chunk);
        let uni = labels.require_unimodal(chunk)?;
        let mut s = Session::inference(&model.store);
        let bundles = model.unimodal(&mut s, &feats)?;
        for m in 0..3 {
            let pred = s.graph.value(bundles[m].y_hat).data();
            sums[m] += pred
                .iter()
                .zip(uni)
                .map(|(p, u)| (p - u[m]).abs())
                .sum::<f64>();
        }
    }
    Ok(sums.map(|v| v / records.len() as f64))
}

const EVAL_CHUNK: usize = 128;

/// Stage 1. Returns the checkpoint of the best validation epoch, which is
/// also left loaded in `model`.
pub fn pretrain_stage(
    model: &mut KudaModel,
    train: &[&SampleRecord],
    valid: &[&SampleRecord],
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<(Snapshot, StageReport)> {
    cfg.validate()?;
    for r in train.iter().chain(valid) {
        r.unimodal_labels()?;
    }
    let select = model.stage1_names();
    let mut opt = AdamW::new(cfg.optimizer(cfg.pretrain), &model.store);
    let mut rng = rng_for(cfg.seed, "shuffle/pretrain");
    let initial = unimodal_mae(model, valid)?;
    let mut best = (
        0,
        initial.iter().sum::<f64>() / 3.0,
        model.store.snapshot_where(&select),
    );
    let mut history = Vec::new();
    log.write(json!({"stage": "pretrain", "epoch": 0, "valid_mae": best.1, "valid_mae_per_modality": initial}))?;
    for epoch in 1..=cfg.pretrain.epochs {
        let mut total = 0.0;
        let plan = batches(train.len(), cfg.batch_size, &mut rng);
        for idx in &plan {
            let batch = pick(train, idx);
            let feats = Features::from_records(&batch, &model.config)?;
            let labels = Labels::from_records(&batch);
            let uni = labels.require_unimodal(&batch)?;
            let mut s = Session::train(&model.store);
            let bundles = model.unimodal(&mut s, &feats)?;
            let mut loss: Option<crate::autograd::Var> = None;
            for m in Modality::ALL {
                let target =
                    Tensor::new(&[batch.len()], uni.iter().map(|u| u[m.index()]).collect())?;
                let target = s.constant(target);
                let l = mae_loss(&mut s, bundles[m.index()].y_hat, target)?;
                loss = Some(match loss {
                    None => l,
                    Some(acc) => s.graph.add(acc, l)?,
                });
            }
            let loss = loss.expect("three modalities");
            let value = s.graph.value(loss).item();
            check_finite(value, "stage-1 loss")?;
            s.graph.backward(loss)?;
            let grads = s.param_grads();
            drop(s);
            opt.step(&mut model.store, &grads);
            total += value;
        }
        let per = unimodal_mae(model, valid)?;
        let valid_mae = per.iter().sum::<f64>() / 3.0;
        check_finite(valid_mae, "stage-1 validation")?;
        let train_loss = total / plan.len().max(1) as f64;
        log.write(json!({
            "stage": "pretrain", "epoch": epoch, "train_loss": train_loss,
            "valid_mae": valid_mae, "valid_mae_per_modality": per,
        }))?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            valid_mae,
        });
        if valid_mae < best.1 {
            best = (epoch, valid_mae, model.store.snapshot_where(&select));
        }
    }
    model.store.load(&best.2)?;
    Ok((
        best.2,
        StageReport {
            best_epoch: best.0,
            best_valid_mae: best.1,
            history,
        },
    ))
}

/// Validation MAE of the fused prediction.
pub fn fused_mae(model: &KudaModel, records: &[&SampleRecord]) -> Result<f64> {
    let preds = predict_records(model, records)?;
    let total: f64 = preds
        .y_hat
        .iter()
        .zip(records)
        .map(|(p, r)| (p - r.y).abs())
        .sum();
    Ok(total / records.len() as f64)
}

/// Stage-2 training objective for one batch: fused MAE plus the weighted
/// contrastive term, with train-mode ratios computed from the labels `y`.
pub fn downstream_loss(
    model: &KudaModel,
    s: &mut Session,
    feats: &Features,
    y: &[f64],
    cfg: &TrainConfig,
) -> Result<(Var, LossBundle)> {
    let alpha = cfg.effective_alpha();
    let bundles = model.unimodal(s, feats)?;
    let y = s.constant(Tensor::new(&[y.len()], y.to_vec())?);
    let ratios = if cfg.has(Ablation::NoSr) {
        unit_ratios(s, feats.batch())
    } else {
        ratio_vars(s, bundles.map(|b| b.y_hat), y, cfg.k)?
    };
    let pass = model.fuse(s, &bundles, &ratios)?;
    let l_reg = mae_loss(s, pass.y_hat, y)?;
    let (loss, l_cor) = if alpha > 0.0 {
        let l_cor = model.nce.loss(s, pass.pooled, &pass.pooled_unimodal)?;
        (
            union_loss(s, l_reg, l_cor, alpha)?,
            s.graph.value(l_cor).item(),
        )
    } else {
        (l_reg, 0.0)
    };
    let bundle = LossBundle::new(s.graph.value(l_reg).item(), l_cor, alpha)?;
    Ok((loss, bundle))
}

/// Stage 2. With a checkpoint, its parameters are loaded and adapters and
/// decoders are frozen; the final model holds the best validation epoch.
pub fn downstream_stage(
    model: &mut KudaModel,
    checkpoint: Option<&Snapshot>,
    train: &[&SampleRecord],
    valid: &[&SampleRecord],
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<StageReport> {
    cfg.validate()?;
    if let Some(ckpt) = checkpoint {
        model.store.load(ckpt)?;
        model
            .store
            .set_frozen_where(true, KudaModel::frozen_in_stage2);
    }
    let mut opt = AdamW::new(cfg.optimizer(cfg.downstream), &model.store);
    let mut rng = rng_for(cfg.seed, "shuffle/downstream");
    let mut best = (0, fused_mae(model, valid)?, model.store.snapshot());
    let mut history = Vec::new();
    log.write(json!({"stage": "downstream", "epoch": 0, "valid_mae": best.1}))?;
    for epoch in 1..=cfg.downstream.epochs {
        let mut total = 0.0;
        let plan = batches(train.len(), cfg.batch_size, &mut rng);
        for idx in &plan {
            let batch = pick(train, idx);
            let feats = Features::from_records(&batch, &model.config)?;
            let labels = Labels::from_records(&batch);
            let mut s = Session::train(&model.store);
            let (loss, bundle) = downstream_loss(model, &mut s, &feats, &labels.y, cfg)?;
            s.graph.backward(loss)?;
            let grads = s.param_grads();
            drop(s);
            opt.step(&mut model.store, &grads);
            total += bundle.l_task;
        }
        let valid_mae = fused_mae(model, valid)?;
        check_finite(valid_mae, "stage-2 validation")?;
        let train_loss = total / plan.len().max(1) as f64;
        log.write(json!({"stage": "downstream", "epoch": epoch, "train_loss": train_loss, "valid_mae": valid_mae}))?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            valid_mae,
        });
        if valid_mae < best.1 {
            best = (epoch, valid_mae, model.store.snapshot());
        }
    }
    model.store.load(&best.2)?;
    Ok(StageReport {
        best_epoch: best.0,
        best_valid_mae: best.1,
        history,
    })
}

/// Predictions for `records` in order, computed from features only.
pub fn predict_records(model: &KudaModel, records: &[&SampleRecord]) -> Result<Prediction> {
    let mut out: Option<Prediction> = None;
    for chunk in records.chunks(EVAL_CHUNK) {
        let feats = Features::from_records(chunk, &model.config)?;
        let p = model.predict(&feats)?;
        out = Some(match out {
            None => p,
            Some(acc) => merge(acc, p),
        });
    }
    out.ok_or(KudaError::EmptyBatch)
}

fn merge(mut a: Prediction, b: Prediction) -> Prediction {
    a.ids.extend(b.ids);
    a.y_hat.extend(b.y_hat);
    a.unimodal.extend(b.unimodal);
    a.branch_mass.extend(b.branch_mass);
    a.pooled.extend(b.pooled);
    for (x, y) in a.pooled_unimodal.iter_mut().zip(b.pooled_unimodal) {
        x.extend(y);
    }
    for (blocks_a, blocks_b) in a.attention.iter_mut().zip(b.attention) {
        for (ta, tb) in blocks_a.iter_mut().zip(blocks_b) {
            let (rows, cols) = (ta.shape()[1], ta.shape()[2]);
            let batch = ta.shape()[0] + tb.shape()[0];
            let mut data = ta.data().to_vec();
            data.extend_from_slice(tb.data());
            *ta = Tensor::new(&[batch, rows, cols], data).expect("stacked batches");
        }
    }
    a
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub prediction: Prediction,
}

/// Test-mode evaluation. Predictions are clamped to the label range before
/// scoring.
pub fn evaluate(model: &KudaModel, records: &[&SampleRecord]) -> Result<Evaluation> {
    let prediction = predict_records(model, records)?;
    let range = model.config.label_range;
    let clamped: Vec<f64> = prediction.y_hat.iter().map(|&p| range.clamp(p)).collect();
    let truth: Vec<f64> = records.iter().map(|r| r.y).collect();
    let report = compute_metrics(&clamped, &truth, range)?;
    Ok(Evaluation { report, prediction })
}

/// Contents of `metrics.json`: the report plus what produced it. Field order
/// is fixed so equal runs serialize to equal bytes.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsDocument<'a> {
    pub split: &'a str,
    pub seed: u64,
    pub ablations: Vec<&'static str>,
    pub metrics: &'a MetricReport,
}

pub fn metrics_json(report: &MetricReport, cfg: &TrainConfig, split: &str) -> Result<String> {
    let doc = MetricsDocument {
        split,
        seed: cfg.seed,
        ablations: cfg.ablations.iter().map(|a| a.name()).collect(),
        metrics: report,
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    Ok(text)
}

/// One attention-dump line per sample, block and modality.
pub fn attention_records(pred: &Prediction) -> Vec<Value> {
    let mut out = Vec::new();
    for (i, id) in pred.ids.iter().enumerate() {
        for (n, block) in pred.attention.iter().enumerate() {
            for m in Modality::ALL {
                let t = &block[m.index()];
                let (rows, cols) = (t.shape()[1], t.shape()[2]);
                let w = &t.data()[i * rows * cols..(i + 1) * rows * cols];
                out.push(json!({
                    "id": id, "block": n, "modality": m.name(),
                    "rows": rows, "cols": cols, "weights": w,
                    "ratio": 1.0, "branch_mass": pred.branch_mass[i][m.index()],
                }));
            }
        }
    }
    out
}

/// One pooled-feature line per sample.
pub fn feature_records(pred: &Prediction) -> Vec<Value> {
    (0..pred.ids.len())
        .map(|i| {
            json!({
                "id": pred.ids[i], "y_hat": pred.y_hat[i],
                "fused": pred.pooled[i],
                "text": pred.pooled_unimodal[0][i],
                "vision": pred.pooled_unimodal[1][i],
                "audio": pred.pooled_unimodal[2][i],
            })
        })
        .collect()
}

/// Summary of a full two-stage run on one dataset.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub pretrain: Option<StageReport>,
    pub downstream: StageReport,
    pub evaluation: Evaluation,
    pub checkpoint: Option<Snapshot>,
}

/// Runs both stages and evaluates on the test split. A precomputed stage-1
/// checkpoint can be supplied to share pretraining between variants with the
/// same unimodal architecture.
pub fn run_two_stage(
    records: &[SampleRecord],
    cfg: &TrainConfig,
    stage1: Option<&Snapshot>,
    log: &mut RunLog,
) -> Result<(KudaModel, RunOutcome)> {
    use crate::data::{split_of, Split};
    let train = split_of(records, Split::Train);
    let valid = split_of(records, Split::Valid);
    let test = split_of(records, Split::Test);
    if train.is_empty() || valid.is_empty() || test.is_empty() {
        return Err(KudaError::Config(
            "dataset needs train, valid and test samples".into(),
        ));
    }
    let mut model = KudaModel::new(&cfg.effective_model(), cfg.seed)?;
    let (pretrain, checkpoint) = if cfg.has(Ablation::NoKip) {
        (None, None)
    } else if let Some(ckpt) = stage1 {
        (None, Some(ckpt.clone()))
    } else {
        let (ckpt, report) = pretrain_stage(&mut model, &train, &valid, cfg, log)?;
        (Some(report), Some(ckpt))
    };
    let downstream = downstream_stage(&mut model, checkpoint.as_ref(), &train, &valid, cfg, log)?;
    let evaluation = evaluate(&model, &test)?;
    Ok((
        model,
        RunOutcome {
            pretrain,
            downstream,
            evaluation,
            checkpoint,
        },
    ))
}
