//! Exit criteria, one PASS/FAIL line each. Runs as a harness-less test
//! target; any failure makes the process exit non-zero.

use std::time::Instant;

use kuda_core::data::{
    classify_sample, dominance_stats, split_of, synthesize, GeneratorConfig, LabelRange,
    SampleRecord, Split,
};
use kuda_core::encoders::Modality;
use kuda_core::fusion::{ratio_vars, sentiment_ratio, Mode};
use kuda_core::gradcheck::{run_all, GradcheckConfig};
use kuda_core::metrics::compute_metrics;
use kuda_core::objectives::{nce_from_scores, NceHead};
use kuda_core::pipeline::{
    evaluate, metrics_json, pretrain_stage, run_two_stage, RunLog, RunOutcome,
};
use kuda_core::rng::rng_for;
use kuda_core::snapshot::Snapshot;
use kuda_core::{Ablation, KudaModel, ParamStore, Session, Tensor, TrainConfig};
use rand::Rng as _;

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_SECONDS: f64 = 60.0;
const RATIO_SUM_TOL: f64 = 1e-9;
const RATIO_EQUAL_TOL: f64 = 1e-12;
const RATIO_ORACLE_TOL: f64 = 1e-9;
const NCE_TOL: f64 = 1e-9;
const METRIC_TOL: f64 = 1e-12;
const METRIC_PAIRS: usize = 1000;
const DOMINANCE_TOL: f64 = 0.05;
const DOMINANCE_SAMPLES: usize = 2000;
const ABLATION_SEEDS: u64 = 5;
const ABLATION_SAMPLES: usize = 3000;
const ABLATION_SECONDS: f64 = 15.0 * 60.0;
const ATTENTION_WIN_RATE: f64 = 0.6;

struct Outcome {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn report(out: &mut Vec<Outcome>, id: usize, title: &'static str, passed: bool, detail: String) {
    println!(
        "{} C{id:<2} {title}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    out.push(Outcome {
        id,
        title,
        passed,
        detail,
    });
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn gradients(out: &mut Vec<Outcome>) {
    let cfg = GradcheckConfig {
        tolerance: GRAD_REL_TOL,
        ..GradcheckConfig::default()
    };
    let summary = run_all(0, &cfg).expect("gradcheck runs");
    let worst = summary
        .reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("reports");
    let e2e = summary
        .reports
        .iter()
        .find(|r| r.name == "end_to_end")
        .expect("end-to-end");
    let failed: Vec<&str> = summary
        .reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    let passed = summary.passed && summary.seconds < GRAD_SECONDS;
    report(
        out,
        1,
        "finite-difference gradients",
        passed,
        format!(
            "{} checks, worst {:.2e} ({} {}), end-to-end {:.2e}, {:.1}s; failed {:?}",
            summary.reports.len(),
            worst.max_rel_err,
            worst.name,
            worst.worst,
            e2e.max_rel_err,
            summary.seconds,
            failed
        ),
    );
}

fn ratio_oracle(err: [f64; 3], k: f64) -> [f64; 3] {
    let d = err.map(|e| (-k * e * e).exp());
    let total = d[0] + d[1] + d[2];
    d.map(|v| v / total)
}

fn ratios(out: &mut Vec<Outcome>) {
    let mut rng = rng_for(2, "acceptance/ratios");
    let mut worst_sum: f64 = 0.0;
    let mut worst_equal: f64 = 0.0;
    let batch = 256;
    for k in [0.1, 0.3, 2.0, 5.0] {
        let y: Vec<f64> = (0..batch).map(|_| rng.random_range(-3.0..3.0)).collect();
        let preds: [Vec<f64>; 3] =
            std::array::from_fn(|_| (0..batch).map(|_| rng.random_range(-3.0..3.0)).collect());
        for b in 0..batch {
            let r = sentiment_ratio(
                [preds[0][b], preds[1][b], preds[2][b]],
                y[b],
                k,
                Mode::Train,
            )
            .unwrap();
            worst_sum = worst_sum.max((r.r.iter().sum::<f64>() - 1.0).abs());
            let e: f64 = rng.random_range(0.0..2.0);
            let signs: [f64; 3] =
                std::array::from_fn(|_| if rng.random::<bool>() { 1.0 } else { -1.0 });
            let eq = sentiment_ratio(signs.map(|s| y[b] + s * e), y[b], k, Mode::Train).unwrap();
            for v in eq.r {
                worst_equal = worst_equal.max((v - 1.0 / 3.0).abs());
            }
        }
        let store = ParamStore::new();
        let mut s = Session::train(&store);
        let yv = s.constant(Tensor::new(&[batch], y.clone()).unwrap());
        let pv = preds
            .clone()
            .map(|p| s.constant(Tensor::new(&[batch], p).unwrap()));
        let rv = ratio_vars(&mut s, pv, yv, k).unwrap();
        for b in 0..batch {
            let total: f64 = rv.iter().map(|&v| s.graph.value(v).data()[b]).sum();
            worst_sum = worst_sum.max((total - 1.0).abs());
        }
    }
    let y = 0.25;
    let example = sentiment_ratio([y + 0.1, y - 0.5, y + 1.0], y, 0.3, Mode::Train).unwrap();
    let oracle = ratio_oracle([0.1, 0.5, 1.0], 0.3);
    let oracle_err = (0..3)
        .map(|m| (example.r[m] - oracle[m]).abs())
        .fold(0.0, f64::max);
    let passed =
        worst_sum < RATIO_SUM_TOL && worst_equal < RATIO_EQUAL_TOL && oracle_err < RATIO_ORACLE_TOL;
    report(
        out,
        2,
        "sentiment ratio contract",
        passed,
        format!(
            "sum err {worst_sum:.1e}, equal-error err {worst_equal:.1e}, k=0.3 example ({:.6}, {:.6}, {:.6}) vs oracle err {oracle_err:.1e}",
            example.r[0], example.r[1], example.r[2]
        ),
    );
}

fn nce(out: &mut Vec<Outcome>) {
    let store = ParamStore::new();
    let mut s = Session::inference(&store);
    let flat = s.constant(Tensor::full(&[4, 4], 0.7));
    let l = nce_from_scores(&mut s, flat).unwrap();
    let constant_err = (s.graph.value(l).item() - 4f64.ln()).abs();

    // Zero maps give constant scores for every modality.
    let mut store = ParamStore::new();
    let mut init = rng_for(0, "acceptance/nce");
    let head = NceHead::new(&mut store, "nce", 3, &mut init);
    for id in head.maps {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut s = Session::inference(&store);
    let f = s.constant(Tensor::full(&[4, 3], 0.4));
    let u = [0.1, -0.3, 0.9].map(|c| s.constant(Tensor::full(&[4, 3], c)));
    let l = head.loss(&mut s, f, &u).unwrap();
    let head_err = (s.graph.value(l).item() - 3.0 * 4f64.ln()).abs();

    let mut rng = rng_for(7, "acceptance/nce");
    let mut decreases = true;
    for _ in 0..200 {
        let scores: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let base = nce_value(&scores);
        for i in 0..4 {
            let mut raised = scores.clone();
            raised[i * 4 + i] += rng.random_range(0.001..2.0);
            decreases &= nce_value(&raised) < base;
        }
    }
    let passed = constant_err < NCE_TOL && head_err < 3.0 * NCE_TOL && decreases;
    report(
        out,
        7,
        "contrastive loss",
        passed,
        format!("constant N=4 err {constant_err:.1e}, three-modality err {head_err:.1e}, strict decrease on 800 diagonal bumps: {decreases}"),
    );
}

fn nce_value(scores: &[f64]) -> f64 {
    let store = ParamStore::new();
    let mut s = Session::inference(&store);
    let t = s.constant(Tensor::new(&[4, 4], scores.to_vec()).unwrap());
    let l = nce_from_scores(&mut s, t).unwrap();
    s.graph.value(l).item()
}

/// Brute-force reference metrics, written independently of the library.
mod oracle {
    use kuda_core::data::LabelRange;

    pub fn mae(p: &[f64], y: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..p.len() {
            total += if p[i] > y[i] {
                p[i] - y[i]
            } else {
                y[i] - p[i]
            };
        }
        total / p.len() as f64
    }

    pub fn corr(p: &[f64], y: &[f64]) -> f64 {
        let n = p.len() as f64;
        let mp = p.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for i in 0..p.len() {
            sxy += (p[i] - mp) * (y[i] - my);
            sxx += (p[i] - mp).powi(2);
            syy += (y[i] - my).powi(2);
        }
        sxy / (sxx * syy).sqrt()
    }

    /// Nearest of `k` evenly spaced class centres, found by enumeration.
    fn class(v: f64, range: LabelRange, k: usize) -> usize {
        let b = range.bound();
        let mut best = (f64::INFINITY, 0);
        for c in 0..k {
            let centre = -b + c as f64 * 2.0 * b / (k - 1) as f64;
            let d = (v - centre).abs();
            if d <= best.0 {
                best = (d, c);
            }
        }
        best.1
    }

    pub fn acc_k(p: &[f64], y: &[f64], range: LabelRange, k: usize) -> f64 {
        let hits = (0..p.len())
            .filter(|&i| class(p[i], range, k) == class(y[i], range, k))
            .count();
        hits as f64 / p.len() as f64
    }

    /// Accuracy and support-weighted F1 over boolean (predicted, truth) pairs.
    pub fn binary(pairs: &[(bool, bool)]) -> (f64, f64) {
        let n = pairs.len() as f64;
        let acc = pairs.iter().filter(|(a, b)| a == b).count() as f64 / n;
        let mut f1 = 0.0;
        for class in [true, false] {
            let mut tp = 0.0;
            let mut fp = 0.0;
            let mut fn_ = 0.0;
            for &(p, t) in pairs {
                match (p == class, t == class) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fn_ += 1.0,
                    _ => {}
                }
            }
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            f1 += f * (tp + fn_) / n;
        }
        (acc, f1)
    }
}

fn metrics(out: &mut Vec<Outcome>) {
    let mut rng = rng_for(8, "acceptance/metrics");
    let mut worst: f64 = 0.0;
    let mut where_ = String::new();
    for range in [LabelRange::UNIT, LabelRange::TRIPLE] {
        let b = range.bound();
        let mut draw = |zero_share: f64| -> f64 {
            if rng.random::<f64>() < zero_share {
                0.0
            } else {
                rng.random_range(-b..=b)
            }
        };
        let y: Vec<f64> = (0..METRIC_PAIRS).map(|_| draw(0.05)).collect();
        let p: Vec<f64> = (0..METRIC_PAIRS).map(|_| draw(0.02)).collect();
        let got = compute_metrics(&p, &y, range).unwrap();
        let has0: Vec<(bool, bool)> = (0..p.len()).map(|i| (p[i] >= 0.0, y[i] >= 0.0)).collect();
        let non0: Vec<(bool, bool)> = (0..p.len())
            .filter(|&i| y[i] != 0.0)
            .map(|i| (p[i] > 0.0, y[i] > 0.0))
            .collect();
        let (acc_h, f1_h) = oracle::binary(&has0);
        let (acc_n, f1_n) = oracle::binary(&non0);
        let pairs = [
            ("mae", got.mae, oracle::mae(&p, &y)),
            ("corr", got.corr, oracle::corr(&p, &y)),
            ("acc2_has0", got.acc2_has0, acc_h),
            ("f1_has0", got.f1_has0, f1_h),
            ("acc2_non0", got.acc2_non0, acc_n),
            ("f1_non0", got.f1_non0, f1_n),
            ("acc3", got.acc3, oracle::acc_k(&p, &y, range, 3)),
            ("acc5", got.acc5, oracle::acc_k(&p, &y, range, 5)),
            ("acc7", got.acc7, oracle::acc_k(&p, &y, range, 7)),
            ("samples_non0", got.samples_non0 as f64, non0.len() as f64),
        ];
        for (name, a, o) in pairs {
            let e = (a - o).abs();
            if e >= worst {
                worst = e;
                where_ = format!("{name} @ ±{b}");
            }
        }
    }
    report(
        out,
        8,
        "metrics against brute force",
        worst < METRIC_TOL,
        format!("{METRIC_PAIRS} pairs per range, worst abs diff {worst:.1e} ({where_})"),
    );
}

fn dominance(out: &mut Vec<Outcome>) {
    let cases = [
        (
            [-0.8, 1.0, -0.8],
            0.6,
            Modality::Vision,
            [true, false, true],
        ),
        ([-1.0, 0.6, 0.6], -0.8, Modality::Text, [false, true, true]),
        ([-0.8, 0.8, 0.0], 0.0, Modality::Audio, [true, true, false]),
    ];
    let cases_ok = cases.iter().all(|&(labels, y, dominant, noise)| {
        let c = classify_sample(labels, y);
        c.unique_dominant() == Some(dominant) && c.noise == noise
    });
    let mut worst: f64 = 0.0;
    for (seed, target) in [
        (0, [0.5, 0.5, 0.5]),
        (1, [0.6, 0.3, 0.3]),
        (2, [0.2, 0.5, 0.7]),
    ] {
        let cfg = GeneratorConfig {
            n_samples: DOMINANCE_SAMPLES,
            dominance: target,
            ..Default::default()
        };
        let stats = dominance_stats(&synthesize(&cfg, seed).unwrap()).unwrap();
        for (got, want) in stats.dominant_proportion.iter().zip(target) {
            worst = worst.max((got - want).abs());
        }
    }
    report(
        out,
        9,
        "dominance statistics",
        cases_ok && worst <= DOMINANCE_TOL,
        format!("case-study samples classified: {cases_ok}; generator worst deviation {worst:.3} at n={DOMINANCE_SAMPLES}"),
    );
}

fn determinism(out: &mut Vec<Outcome>) {
    let gen = GeneratorConfig {
        n_samples: 300,
        ..Default::default()
    };
    let data = synthesize(&gen, 21).unwrap();
    let mut cfg = TrainConfig::desk();
    cfg.seed = 21;
    cfg.pretrain.epochs = 2;
    cfg.downstream.epochs = 2;
    let run = || -> String {
        let (_, outcome) = run_two_stage(&data, &cfg, None, &mut RunLog::memory()).unwrap();
        metrics_json(&outcome.evaluation.report, &cfg, "test").unwrap()
    };
    let (a, b) = (run(), run());
    report(
        out,
        10,
        "byte-identical metrics",
        a.as_bytes() == b.as_bytes(),
        format!("{} bytes, identical: {}", a.len(), a == b),
    );
}

struct SeedRun {
    data: Vec<SampleRecord>,
    cfg: TrainConfig,
    checkpoint: Snapshot,
    model: KudaModel,
    full: RunOutcome,
}

fn dominance_win_rate(data: &[SampleRecord], outcome: &RunOutcome) -> (f64, usize) {
    let test = split_of(data, Split::Test);
    let mass = &outcome.evaluation.prediction.branch_mass;
    let (mut wins, mut n) = (0, 0);
    for (i, r) in test.iter().enumerate() {
        let c = classify_sample(r.unimodal_labels().unwrap(), r.y);
        if let Some(m) = c.unique_dominant() {
            let j = m.index();
            n += 1;
            wins += usize::from((0..3).all(|o| o == j || mass[i][j] > mass[i][o]));
        }
    }
    (wins as f64 / n.max(1) as f64, n)
}

fn ablations(out: &mut Vec<Outcome>) -> SeedRun {
    let start = Instant::now();
    let mut mae = [Vec::new(), Vec::new(), Vec::new()];
    let mut win = Vec::new();
    let mut first: Option<SeedRun> = None;
    for seed in 0..ABLATION_SEEDS {
        let gen = GeneratorConfig {
            n_samples: ABLATION_SAMPLES,
            ..Default::default()
        };
        let data = synthesize(&gen, seed).unwrap();
        if seed == 0 {
            let s = dominance_stats(&data).unwrap();
            println!(
                "     dataset: dominant share {:?}, noise share {:.3}",
                s.dominant_proportion.map(|p| (p * 1000.0).round() / 1000.0),
                s.noise_proportion
            );
        }
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::desk()
        };
        let mut pre = KudaModel::new(&cfg.effective_model(), seed).unwrap();
        let train = split_of(&data, Split::Train);
        let valid = split_of(&data, Split::Valid);
        let (ckpt, _) =
            pretrain_stage(&mut pre, &train, &valid, &cfg, &mut RunLog::memory()).unwrap();
        let variants = [
            cfg.clone(),
            cfg.clone().with_ablation(Ablation::NoDaf),
            cfg.clone().with_ablation(Ablation::NoSr),
        ];
        let mut runs = Vec::new();
        for (v, c) in variants.iter().enumerate() {
            let (model, outcome) =
                run_two_stage(&data, c, Some(&ckpt), &mut RunLog::memory()).unwrap();
            mae[v].push(outcome.evaluation.report.mae);
            runs.push((model, outcome));
        }
        let (rate, n) = dominance_win_rate(&data, &runs[0].1);
        win.push(rate);
        println!(
            "     seed {seed}: full {:.4}  no_DAF {:.4}  no_SR {:.4}  dominant-branch wins {rate:.3} of {n}  [{:.0}s]",
            mae[0][seed as usize],
            mae[1][seed as usize],
            mae[2][seed as usize],
            start.elapsed().as_secs_f64()
        );
        if first.is_none() {
            let (model, full) = runs.swap_remove(0);
            first = Some(SeedRun {
                data,
                cfg,
                checkpoint: ckpt,
                model,
                full,
            });
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    let med = mae.clone().map(median);
    let passed = med[0] < med[1] && med[0] < med[2] && seconds < ABLATION_SECONDS;
    report(
        out,
        5,
        "ablation ordering",
        passed,
        format!(
            "median test MAE full {:.4}, no_DAF {:.4}, no_SR {:.4} over {ABLATION_SEEDS} seeds; {seconds:.0}s",
            med[0], med[1], med[2]
        ),
    );
    let med_win = median(win.clone());
    report(
        out,
        6,
        "dominant-branch attention",
        med_win >= ATTENTION_WIN_RATE,
        format!("median share of unique-dominant test samples won by the dominant branch {med_win:.3} (per seed {win:.3?})"),
    );
    first.expect("at least one seed")
}

fn purity(out: &mut Vec<Outcome>, run: &SeedRun) {
    let mut rng = rng_for(3, "acceptance/purity");
    let baseline = &run.full.evaluation.prediction;
    let mut identical = true;
    let mut variants = 0;
    for variant in 0..4 {
        let mut altered = run.data.clone();
        let mut ys: Vec<f64> = altered.iter().map(|r| r.y).collect();
        ys.reverse();
        for (r, y) in altered.iter_mut().zip(ys) {
            match variant {
                0 => r.y = -r.y,
                1 => r.y = y,
                2 => r.y = rng.random_range(-1.0..=1.0),
                _ => {
                    r.y = 0.0;
                    r.y_t = None;
                    r.y_v = None;
                    r.y_a = None;
                }
            }
        }
        let test = split_of(&altered, Split::Test);
        let again = evaluate(&run.model, &test).unwrap().prediction;
        identical &= again.y_hat == baseline.y_hat && again.unimodal == baseline.unimodal;
        identical &= again.branch_mass == baseline.branch_mass;
        variants += 1;
    }
    report(
        out,
        3,
        "test-mode label independence",
        identical,
        format!("{variants} label alterations, predictions bitwise equal: {identical}"),
    );
}

fn protocol(out: &mut Vec<Outcome>, run: &SeedRun) {
    let frozen = run.model.store.snapshot_where(KudaModel::frozen_in_stage2);
    let mut count = 0;
    let mut unchanged = frozen.names().count() > 0;
    for name in frozen.names() {
        count += 1;
        let (a, b) = (frozen.get(name).unwrap(), run.checkpoint.get(name));
        unchanged &= b.is_some_and(|b| {
            a.shape() == b.shape()
                && a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        });
    }
    let no_kip = run.cfg.clone().with_ablation(Ablation::NoKip);
    let (_, ablated) = run_two_stage(&run.data, &no_kip, None, &mut RunLog::memory()).unwrap();
    let differs = ablated.evaluation.prediction.y_hat != run.full.evaluation.prediction.y_hat;
    report(
        out,
        4,
        "two-stage protocol",
        unchanged && differs,
        format!(
            "{count} frozen adapter/decoder tensors bitwise equal to stage 1: {unchanged}; no_KIP predictions differ: {differs} (MAE {:.4} vs {:.4})",
            ablated.evaluation.report.mae, run.full.evaluation.report.mae
        ),
    );
}

fn main() {
    let mut out = Vec::new();
    gradients(&mut out);
    ratios(&mut out);
    nce(&mut out);
    metrics(&mut out);
    dominance(&mut out);
    determinism(&mut out);
    let run = ablations(&mut out);
    purity(&mut out, &run);
    protocol(&mut out, &run);

    out.sort_by_key(|o| o.id);
    println!("\nacceptance summary");
    for o in &out {
        println!(
            "  {} C{:<2} {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.id,
            o.title
        );
    }
    let failed: Vec<_> = out.iter().filter(|o| !o.passed).collect();
    if !failed.is_empty() {
        for o in &failed {
            eprintln!("criterion {} failed: {}", o.id, o.detail);
        }
        std::process::exit(1);
    }
}
