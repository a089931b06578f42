use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use kuda_core::data::{
    classify_sample, dominance_stats, load_jsonl, split_of, store_jsonl, synthesize, SampleRecord,
    Split,
};
use kuda_core::encoders::Modality;
use kuda_core::fusion::{sentiment_ratio, Mode};
use kuda_core::gradcheck::{run_all, GradcheckConfig};
use kuda_core::pipeline::{
    attention_records, downstream_stage, evaluate, feature_records, metrics_json, pretrain_stage,
    RunLog,
};
use kuda_core::snapshot::Snapshot;
use kuda_core::{Ablation, KudaModel};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::Failure;

pub const DATASET: &str = "dataset.jsonl";
pub const STAGE1: &str = "stage1.kuda";
pub const MODEL: &str = "model.kuda";
pub const METRICS: &str = "metrics.json";
pub const ATTENTION: &str = "attention.jsonl";
pub const FEATURES: &str = "features.jsonl";
pub const STATS: &str = "stats.json";
pub const LOG: &str = "log.jsonl";
pub const INSPECT: &str = "inspect.jsonl";
pub const CONFIG: &str = "config.json";

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub log: RunLog,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn dataset(&self) -> Result<Vec<SampleRecord>, Failure> {
        let path = self.cfg.dataset_path(&self.out);
        if !path.exists() {
            return Err(Failure::Data(format!(
                "no dataset at {}; run `kuda synth` first or set \"dataset\" in the config",
                path.display()
            )));
        }
        Ok(load_jsonl(&path, self.cfg.train.model.label_range)?)
    }

    fn split<'a>(
        &self,
        data: &'a [SampleRecord],
        split: Split,
    ) -> Result<Vec<&'a SampleRecord>, Failure> {
        let part = split_of(data, split);
        if part.is_empty() {
            return Err(Failure::Data(format!("dataset has no {split} samples")));
        }
        Ok(part)
    }

    fn fresh_model(&self) -> Result<KudaModel, Failure> {
        Ok(KudaModel::new(
            &self.cfg.train.effective_model(),
            self.cfg.seed(),
        )?)
    }

    fn trained_model(&self) -> Result<KudaModel, Failure> {
        let path = self.path(MODEL);
        if !path.exists() {
            return Err(Failure::Data(format!(
                "no model at {}; run `kuda train` first",
                path.display()
            )));
        }
        let mut model = self.fresh_model()?;
        model.store.load(&Snapshot::load(&path)?)?;
        Ok(model)
    }

    fn event(&mut self, event: Value) -> Result<(), Failure> {
        Ok(self.log.write(event)?)
    }
}

fn write_jsonl(path: &Path, lines: &[Value]) -> Result<(), Failure> {
    let mut f =
        std::io::BufWriter::new(fs::File::create(path).map_err(kuda_core::KudaError::from)?);
    for line in lines {
        let text = serde_json::to_string(line).map_err(kuda_core::KudaError::from)?;
        writeln!(f, "{text}").map_err(kuda_core::KudaError::from)?;
    }
    f.flush().map_err(kuda_core::KudaError::from)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(kuda_core::KudaError::from)?;
    Ok(())
}

pub fn synth(ctx: &mut Context) -> Result<(), Failure> {
    let records = synthesize(&ctx.cfg.generator, ctx.cfg.seed())?;
    let path = ctx.path(DATASET);
    store_jsonl(&path, &records)?;
    ctx.event(json!({"command": "synth", "samples": records.len(), "path": path}))?;
    println!("wrote {} samples to {}", records.len(), path.display());
    Ok(())
}

fn run_pretrain(ctx: &mut Context, data: &[SampleRecord]) -> Result<Snapshot, Failure> {
    let train = ctx.split(data, Split::Train)?;
    let valid = ctx.split(data, Split::Valid)?;
    let mut model = ctx.fresh_model()?;
    let (ckpt, report) = pretrain_stage(&mut model, &train, &valid, &ctx.cfg.train, &mut ctx.log)?;
    ckpt.save(ctx.path(STAGE1))?;
    println!(
        "stage 1: best epoch {} with mean unimodal validation MAE {:.4}",
        report.best_epoch, report.best_valid_mae
    );
    Ok(ckpt)
}

pub fn pretrain(ctx: &mut Context) -> Result<(), Failure> {
    let data = ctx.dataset()?;
    ctx.event(json!({"command": "pretrain", "event": "start"}))?;
    run_pretrain(ctx, &data)?;
    ctx.event(json!({"command": "pretrain", "event": "done", "checkpoint": ctx.path(STAGE1)}))
}

/// Stage 2, reusing `stage1.kuda` from the output directory when present and
/// pretraining first otherwise. `no_KIP` skips the checkpoint entirely.
pub fn train(ctx: &mut Context) -> Result<(), Failure> {
    let data = ctx.dataset()?;
    ctx.event(json!({"command": "train", "event": "start"}))?;
    let checkpoint = if ctx.cfg.train.has(Ablation::NoKip) {
        None
    } else if ctx.path(STAGE1).exists() {
        ctx.event(json!({"command": "train", "event": "load_stage1", "path": ctx.path(STAGE1)}))?;
        Some(Snapshot::load(ctx.path(STAGE1))?)
    } else {
        Some(run_pretrain(ctx, &data)?)
    };
    let train = ctx.split(&data, Split::Train)?;
    let valid = ctx.split(&data, Split::Valid)?;
    let mut model = ctx.fresh_model()?;
    let report = downstream_stage(
        &mut model,
        checkpoint.as_ref(),
        &train,
        &valid,
        &ctx.cfg.train,
        &mut ctx.log,
    )?;
    model.store.snapshot().save(ctx.path(MODEL))?;
    println!(
        "stage 2: best epoch {} with validation MAE {:.4}",
        report.best_epoch, report.best_valid_mae
    );
    ctx.event(json!({"command": "train", "event": "done", "model": ctx.path(MODEL)}))
}

pub fn eval(ctx: &mut Context) -> Result<(), Failure> {
    let data = ctx.dataset()?;
    let model = ctx.trained_model()?;
    let test = ctx.split(&data, Split::Test)?;
    let evaluation = evaluate(&model, &test)?;
    write_text(
        &ctx.path(METRICS),
        &metrics_json(&evaluation.report, &ctx.cfg.train, "test")?,
    )?;
    write_jsonl(
        &ctx.path(ATTENTION),
        &attention_records(&evaluation.prediction),
    )?;
    write_jsonl(
        &ctx.path(FEATURES),
        &feature_records(&evaluation.prediction),
    )?;
    print!("{}", evaluation.report.to_table());
    ctx.event(json!({"command": "eval", "samples": test.len(), "mae": evaluation.report.mae}))
}

pub fn stats(ctx: &mut Context) -> Result<(), Failure> {
    let data = ctx.dataset()?;
    let all = dominance_stats(&data)?;
    let mut doc = serde_json::to_value(&all).map_err(kuda_core::KudaError::from)?;
    let mut by_split = serde_json::Map::new();
    for split in [Split::Train, Split::Valid, Split::Test] {
        let part = split_of(&data, split);
        if !part.is_empty() {
            let s = dominance_stats(part)?;
            by_split.insert(
                split.to_string(),
                serde_json::to_value(s).map_err(kuda_core::KudaError::from)?,
            );
        }
    }
    doc["by_split"] = Value::Object(by_split);
    let mut text = serde_json::to_string_pretty(&doc).map_err(kuda_core::KudaError::from)?;
    text.push('\n');
    write_text(&ctx.path(STATS), &text)?;
    print!("{}", all.to_table());
    ctx.event(json!({"command": "stats", "samples": all.samples}))
}

/// Per-sample bundle for test samples: predictions, the ratios the labels
/// would have produced in training next to the unit test-time ratios, branch
/// masses and head-averaged cross-attention per block.
pub fn inspect(ctx: &mut Context) -> Result<(), Failure> {
    let data = ctx.dataset()?;
    let model = ctx.trained_model()?;
    let test = ctx.split(&data, Split::Test)?;
    let evaluation = evaluate(&model, &test)?;
    let pred = &evaluation.prediction;
    let mut lines = Vec::with_capacity(test.len());
    for (i, r) in test.iter().enumerate() {
        let train_ratio = sentiment_ratio(pred.unimodal[i], r.y, ctx.cfg.train.k, Mode::Train)?;
        let dominance = r.unimodal_labels().ok().map(|labels| {
            let c = classify_sample(labels, r.y);
            json!({"dominant": c.dominant, "noise": c.noise})
        });
        let attention: Vec<Value> = pred
            .attention
            .iter()
            .enumerate()
            .map(|(n, block)| {
                let per_modality: serde_json::Map<String, Value> = Modality::ALL
                    .iter()
                    .map(|m| {
                        let t = &block[m.index()];
                        let (rows, cols) = (t.shape()[1], t.shape()[2]);
                        let w = &t.data()[i * rows * cols..(i + 1) * rows * cols];
                        let matrix: Vec<&[f64]> = w.chunks(cols).collect();
                        (m.name().to_owned(), json!(matrix))
                    })
                    .collect();
                json!({"block": n, "weights": per_modality})
            })
            .collect();
        lines.push(json!({
            "id": r.id,
            "y": r.y,
            "y_hat": pred.y_hat[i],
            "unimodal_labels": [r.y_t, r.y_v, r.y_a],
            "unimodal_predictions": pred.unimodal[i],
            "train_ratio": train_ratio.r,
            "test_ratio": [1.0, 1.0, 1.0],
            "dominance": dominance,
            "branch_mass": pred.branch_mass[i],
            "attention": attention,
        }));
    }
    write_jsonl(&ctx.path(INSPECT), &lines)?;
    println!(
        "{:<10} {:>7} {:>7}   {:<17}   {:<17}",
        "id", "y", "y_hat", "train ratio t/v/a", "branch mass t/v/a"
    );
    for (i, r) in test.iter().take(10).enumerate() {
        let tr = lines[i]["train_ratio"].as_array().expect("ratio array");
        let tr: Vec<f64> = tr.iter().filter_map(Value::as_f64).collect();
        let bm = pred.branch_mass[i];
        println!(
            "{:<10} {:>7.3} {:>7.3}   {:.3} {:.3} {:.3}   {:.3} {:.3} {:.3}",
            r.id, r.y, pred.y_hat[i], tr[0], tr[1], tr[2], bm[0], bm[1], bm[2]
        );
    }
    println!(
        "wrote {} samples to {}",
        lines.len(),
        ctx.path(INSPECT).display()
    );
    ctx.event(json!({"command": "inspect", "samples": lines.len()}))
}

pub fn gradcheck(ctx: &mut Context) -> Result<(), Failure> {
    let cfg = GradcheckConfig::default();
    let summary = run_all(ctx.cfg.seed(), &cfg)?;
    println!(
        "{:<16} {:>7} {:>12}  {:<6} worst entry",
        "check", "entries", "max rel err", "result"
    );
    for r in &summary.reports {
        println!(
            "{:<16} {:>7} {:>12.3e}  {:<6} {}",
            r.name,
            r.entries,
            r.max_rel_err,
            if r.passed { "pass" } else { "FAIL" },
            r.worst
        );
    }
    println!("tolerance {:.0e}, {:.1}s", cfg.tolerance, summary.seconds);
    ctx.event(
        json!({"command": "gradcheck", "passed": summary.passed, "seconds": summary.seconds}),
    )?;
    if summary.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = summary
            .reports
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name.as_str())
            .collect();
        Err(Failure::Numerical(format!(
            "gradient check failed for {failed:?}"
        )))
    }
}
