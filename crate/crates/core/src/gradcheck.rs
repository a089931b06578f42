//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Each check reduces the output to a scalar through a fixed random
//! weighting, `L = Σ w ⊙ f(x)`, so every output element contributes and a
//! wrong backward rule cannot hide behind a symmetric reduction.

use std::time::Instant;

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::data::{synthesize, GeneratorConfig, LabelRange, SampleRecord};
use crate::encoders::{SequenceEncoderConfig, TextEncoderConfig};
use crate::error::{KudaError, Result};
use crate::model::{Features, KudaModel, Labels, ModelConfig};
use crate::params::Session;
use crate::pipeline::{downstream_loss, TrainConfig};
use crate::rng::{rng_for, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Denominator floor, so gradients near zero are judged on absolute error.
    pub floor: f64,
    /// Entries checked per tensor; larger tensors are sampled.
    pub max_entries: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            max_entries: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    /// Input (or parameter) holding the worst entry.
    pub worst: String,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn chosen_entries(numel: usize, max: usize, rng: &mut Rng) -> Vec<usize> {
    if numel <= max {
        (0..numel).collect()
    } else {
        let mut idx = sample(rng, numel, max).into_vec();
        idx.sort_unstable();
        idx
    }
}

struct Tracker {
    entries: usize,
    worst: (f64, String),
}

impl Tracker {
    fn new() -> Self {
        Self {
            entries: 0,
            worst: (0.0, String::new()),
        }
    }

    fn record(&mut self, err: f64, label: impl FnOnce() -> String) {
        self.entries += 1;
        if err > self.worst.0 || self.entries == 1 || err.is_nan() {
            self.worst = (err, label());
        }
    }

    fn finish(self, name: &str, cfg: &GradcheckConfig) -> CheckReport {
        CheckReport {
            name: name.to_owned(),
            entries: self.entries,
            max_rel_err: self.worst.0,
            worst: self.worst.1,
            passed: self.worst.0 < cfg.tolerance,
        }
    }
}

/// Compares the tape gradient of `f` against central differences for every
/// input entry (sampled beyond `max_entries`).
pub fn check_op<F>(
    name: &str,
    inputs: &[Tensor],
    cfg: &GradcheckConfig,
    f: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = rng_for(0, &format!("gradcheck/{name}"));
    let mut weights: Option<Tensor> = None;
    let mut eval = |inputs: &[Tensor], grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grad)).collect();
        let out = f(&mut g, &vars)?;
        let w = weights
            .get_or_insert_with(|| {
                random_tensor(
                    g.shape(out),
                    &mut rng_for(1, &format!("gradcheck/{name}/w")),
                )
            })
            .clone();
        let w = g.constant(w);
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        if !grad {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
            })
            .collect();
        Ok((value, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut work = inputs.to_vec();
    let mut tracker = Tracker::new();
    for (i, input) in inputs.iter().enumerate() {
        for e in chosen_entries(input.numel(), cfg.max_entries, &mut rng) {
            let x = input.data()[e];
            work[i].data_mut()[e] = x + cfg.step;
            let up = eval(&work, false)?.0;
            work[i].data_mut()[e] = x - cfg.step;
            let down = eval(&work, false)?.0;
            work[i].data_mut()[e] = x;
            let numeric = (up - down) / (2.0 * cfg.step);
            let err = relative_error(analytic[i][e], numeric, cfg.floor);
            tracker.record(err, || format!("input {i}[{e}]"));
        }
    }
    Ok(tracker.finish(name, cfg))
}

/// Random inputs for the op suite. Values are kept away from the kinks of
/// `relu` and `abs` so a central difference never straddles one.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = random_tensor(shape, rng);
    for v in t.data_mut() {
        if v.abs() < 0.1 {
            *v = 0.1_f64.copysign(*v) + *v;
        }
    }
    t
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = random_tensor(shape, rng);
    for v in t.data_mut() {
        *v = 0.5 + v.abs();
    }
    t
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Every differentiable op on the tape, each checked at random inputs.
pub fn op_suite(cfg: &GradcheckConfig) -> Result<Vec<CheckReport>> {
    let mut rng = rng_for(0, "gradcheck/suite");
    let r = &mut rng;
    let cases: Vec<(&str, Vec<Tensor>, OpFn)> = vec![
        (
            "matmul",
            vec![random_tensor(&[3, 4], r), random_tensor(&[4, 5], r)],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        (
            "bmm",
            vec![random_tensor(&[2, 3, 4], r), random_tensor(&[2, 4, 3], r)],
            Box::new(|g, v| g.bmm(v[0], v[1])),
        ),
        (
            "linear",
            vec![
                random_tensor(&[2, 3, 4], r),
                random_tensor(&[4, 5], r),
                random_tensor(&[5], r),
            ],
            Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
        ),
        (
            "linear_no_bias",
            vec![random_tensor(&[3, 4], r), random_tensor(&[4, 2], r)],
            Box::new(|g, v| g.linear(v[0], v[1], None)),
        ),
        (
            "add",
            vec![random_tensor(&[2, 3], r), random_tensor(&[2, 3], r)],
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        (
            "sub",
            vec![random_tensor(&[2, 3], r), random_tensor(&[2, 3], r)],
            Box::new(|g, v| g.sub(v[0], v[1])),
        ),
        (
            "mul",
            vec![random_tensor(&[2, 3], r), random_tensor(&[2, 3], r)],
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        (
            "div",
            vec![random_tensor(&[2, 3], r), positive(&[2, 3], r)],
            Box::new(|g, v| g.div(v[0], v[1])),
        ),
        (
            "scale",
            vec![random_tensor(&[4], r)],
            Box::new(|g, v| Ok(g.scale(v[0], -1.7))),
        ),
        (
            "add_scalar",
            vec![random_tensor(&[4], r)],
            Box::new(|g, v| Ok(g.add_scalar(v[0], 0.3))),
        ),
        (
            "relu",
            vec![away_from_zero(&[3, 4], r)],
            Box::new(|g, v| Ok(g.relu(v[0]))),
        ),
        (
            "gelu",
            vec![random_tensor(&[3, 4], r)],
            Box::new(|g, v| Ok(g.gelu(v[0]))),
        ),
        (
            "exp",
            vec![random_tensor(&[3, 4], r)],
            Box::new(|g, v| Ok(g.exp(v[0]))),
        ),
        (
            "log",
            vec![positive(&[3, 4], r)],
            Box::new(|g, v| Ok(g.log(v[0]))),
        ),
        (
            "abs",
            vec![away_from_zero(&[3, 4], r)],
            Box::new(|g, v| Ok(g.abs(v[0]))),
        ),
        (
            "square",
            vec![random_tensor(&[3, 4], r)],
            Box::new(|g, v| Ok(g.square(v[0]))),
        ),
        (
            "softmax_axis0",
            vec![random_tensor(&[3, 4], r)],
            Box::new(|g, v| g.softmax(v[0], 0)),
        ),
        (
            "softmax_axis2",
            vec![random_tensor(&[2, 3, 4], r)],
            Box::new(|g, v| g.softmax(v[0], 2)),
        ),
        (
            "log_softmax",
            vec![random_tensor(&[3, 4], r)],
            Box::new(|g, v| g.log_softmax(v[0], 1)),
        ),
        (
            "layer_norm",
            vec![
                random_tensor(&[2, 3, 5], r),
                random_tensor(&[5], r),
                random_tensor(&[5], r),
            ],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        (
            "concat_axis1",
            vec![random_tensor(&[2, 3, 2], r), random_tensor(&[2, 1, 2], r)],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
        ),
        (
            "concat_axis2",
            vec![random_tensor(&[2, 3, 2], r), random_tensor(&[2, 3, 4], r)],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 2)),
        ),
        (
            "slice",
            vec![random_tensor(&[2, 5, 3], r)],
            Box::new(|g, v| g.slice(v[0], 1, 1, 3)),
        ),
        (
            "mean_axis",
            vec![random_tensor(&[2, 4, 3], r)],
            Box::new(|g, v| g.mean_axis(v[0], 1)),
        ),
        (
            "sum",
            vec![random_tensor(&[2, 3], r)],
            Box::new(|g, v| Ok(g.sum(v[0]))),
        ),
        (
            "mean_all",
            vec![random_tensor(&[2, 3], r)],
            Box::new(|g, v| Ok(g.mean_all(v[0]))),
        ),
        (
            "transpose",
            vec![random_tensor(&[2, 3, 4], r)],
            Box::new(|g, v| g.transpose(v[0])),
        ),
        (
            "reshape",
            vec![random_tensor(&[2, 6], r)],
            Box::new(|g, v| g.reshape(v[0], &[3, 4])),
        ),
        (
            "expand_batch",
            vec![random_tensor(&[3, 2], r)],
            Box::new(|g, v| g.expand_batch(v[0], 4)),
        ),
        (
            "mul_batch",
            vec![random_tensor(&[3, 2, 4], r), random_tensor(&[3], r)],
            Box::new(|g, v| g.mul_batch(v[0], v[1])),
        ),
        (
            "embedding",
            vec![random_tensor(&[5, 3], r)],
            Box::new(|g, v| g.embedding(v[0], &[4, 0, 4, 2, 1, 1], &[2, 3, 3])),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| check_op(name, &inputs, cfg, f))
        .collect()
}

/// Small configuration for the end-to-end check: two fusion blocks and
/// every stage of the model, at widths that keep a full sweep cheap.
pub fn tiny_setup(seed: u64, batch: usize) -> Result<(ModelConfig, Vec<SampleRecord>)> {
    let len = 4;
    let gen = GeneratorConfig {
        n_samples: batch,
        text_len: len,
        vision_len: len,
        audio_len: len,
        vision_dim: 4,
        audio_dim: 6,
        splits: [1.0, 0.0, 0.0],
        ..Default::default()
    };
    let records = synthesize(&gen, seed)?;
    let seq = |d| SequenceEncoderConfig {
        seq_len: len,
        d_model: d,
        layers: 2,
        heads: 2,
        taps: None,
        learned_positions: false,
    };
    let model = ModelConfig {
        text: TextEncoderConfig {
            vocab_size: gen.vocabulary().size(),
            max_len: len,
            d_model: 8,
            layers: 2,
            heads: 2,
            taps: vec![1, 2],
            learned_positions: true,
        },
        vision: seq(4),
        audio: seq(6),
        fusion_len: 3,
        fusion_dim: 8,
        blocks: 2,
        fusion_heads: 2,
        label_range: LabelRange::UNIT,
        ..ModelConfig::desk()
    };
    Ok((model, records))
}

/// Adds Gaussian noise to every parameter so zero-initialised paths (the
/// adapter up-projections) carry gradient during the check.
pub fn jitter(model: &mut KudaModel, std: f64, seed: u64) {
    let mut rng = rng_for(seed, "gradcheck/jitter");
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += std * z;
        }
    }
}

/// Checks the full stage-2 training loss (train-mode ratios, fused MAE and
/// the contrastive term) against central differences in every parameter.
pub fn check_model(
    model: &mut KudaModel,
    records: &[SampleRecord],
    train: &TrainConfig,
    cfg: &GradcheckConfig,
) -> Result<CheckReport> {
    let refs: Vec<&SampleRecord> = records.iter().collect();
    let feats = Features::from_records(&refs, &model.config)?;
    let labels = Labels::from_records(&refs);
    let loss_value = |model: &KudaModel| -> Result<f64> {
        let mut s = Session::train(&model.store);
        let (loss, _) = downstream_loss(model, &mut s, &feats, &labels.y, train)?;
        Ok(s.graph.value(loss).item())
    };
    let analytic = {
        let mut s = Session::train(&model.store);
        let (loss, _) = downstream_loss(model, &mut s, &feats, &labels.y, train)?;
        s.graph.backward(loss)?;
        s.param_grads()
    };
    let mut rng = rng_for(train.seed, "gradcheck/entries");
    let mut tracker = Tracker::new();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        if model.store.is_frozen(id) {
            continue;
        }
        let numel = model.store.get(id).numel();
        let grad = analytic
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, g)| g.as_slice());
        for e in chosen_entries(numel, cfg.max_entries, &mut rng) {
            let x = model.store.get(id).data()[e];
            model.store.get_mut(id).data_mut()[e] = x + cfg.step;
            let up = loss_value(model)?;
            model.store.get_mut(id).data_mut()[e] = x - cfg.step;
            let down = loss_value(model)?;
            model.store.get_mut(id).data_mut()[e] = x;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = grad.map_or(0.0, |g| g[e]);
            let err = relative_error(a, numeric, cfg.floor);
            tracker.record(err, || format!("{}[{e}]", model.store.name(id)));
        }
    }
    if tracker.entries == 0 {
        return Err(KudaError::Config("no trainable parameters to check".into()));
    }
    Ok(tracker.finish("end_to_end", cfg))
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckSummary {
    pub config: GradcheckConfig,
    pub reports: Vec<CheckReport>,
    pub seconds: f64,
    pub passed: bool,
}

/// The op suite followed by the end-to-end model check.
pub fn run_all(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckSummary> {
    let start = Instant::now();
    let mut reports = op_suite(cfg)?;
    let (model_cfg, records) = tiny_setup(seed, 4)?;
    let mut model = KudaModel::new(&model_cfg, seed)?;
    jitter(&mut model, 0.1, seed);
    let train = TrainConfig {
        seed,
        model: model_cfg,
        ..TrainConfig::desk()
    };
    reports.push(check_model(&mut model, &records, &train, cfg)?);
    let passed = reports.iter().all(|r| r.passed);
    Ok(GradcheckSummary {
        config: *cfg,
        reports,
        seconds: start.elapsed().as_secs_f64(),
        passed,
    })
}
