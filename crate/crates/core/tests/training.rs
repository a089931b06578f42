use kuda_core::data::{split_of, synthesize, GeneratorConfig, SampleRecord, Split};
use kuda_core::gradcheck::tiny_setup;
use kuda_core::pipeline::{
    downstream_loss, downstream_stage, evaluate, pretrain_stage, run_two_stage, RunLog,
    StageSchedule,
};
use kuda_core::snapshot::Snapshot;
use kuda_core::{Ablation, Features, KudaModel, Labels, Session, TrainConfig};

fn tiny() -> (TrainConfig, Vec<SampleRecord>) {
    let (model, _) = tiny_setup(0, 2).unwrap();
    let gen = GeneratorConfig {
        n_samples: 120,
        text_len: 4,
        vision_len: 4,
        audio_len: 4,
        vision_dim: 4,
        audio_dim: 6,
        ..Default::default()
    };
    let data = synthesize(&gen, 1).unwrap();
    let cfg = TrainConfig {
        seed: 4,
        batch_size: 8,
        pretrain: StageSchedule {
            epochs: 2,
            learning_rate: 2e-3,
        },
        downstream: StageSchedule {
            epochs: 2,
            learning_rate: 1e-3,
        },
        model,
        ..TrainConfig::desk()
    };
    (cfg, data)
}

#[test]
fn frozen_parameters_survive_stage_two_bitwise() {
    let (cfg, data) = tiny();
    let train = split_of(&data, Split::Train);
    let valid = split_of(&data, Split::Valid);
    let mut model = KudaModel::new(&cfg.effective_model(), cfg.seed).unwrap();
    let (ckpt, _) =
        pretrain_stage(&mut model, &train, &valid, &cfg, &mut RunLog::memory()).unwrap();
    let before = model.store.snapshot_where(KudaModel::frozen_in_stage2);
    assert!(before.names().count() > 0);
    downstream_stage(
        &mut model,
        Some(&ckpt),
        &train,
        &valid,
        &cfg,
        &mut RunLog::memory(),
    )
    .unwrap();
    let after = model.store.snapshot_where(KudaModel::frozen_in_stage2);
    assert_eq!(before.to_bytes(), after.to_bytes());
    for name in before.names() {
        assert_eq!(ckpt.get(name), before.get(name), "{name}");
    }
}

#[test]
fn no_gradient_reaches_frozen_parameters() {
    let (cfg, data) = tiny();
    let mut model = KudaModel::new(&cfg.effective_model(), cfg.seed).unwrap();
    model
        .store
        .set_frozen_where(true, KudaModel::frozen_in_stage2);
    let batch: Vec<&SampleRecord> = data.iter().take(6).collect();
    let feats = Features::from_records(&batch, &model.config).unwrap();
    let labels = Labels::from_records(&batch);
    let mut s = Session::train(&model.store);
    let (loss, _) = downstream_loss(&model, &mut s, &feats, &labels.y, &cfg).unwrap();
    s.graph.backward(loss).unwrap();
    let grads = s.param_grads();
    assert!(!grads.is_empty());
    for id in model.store.ids().filter(|&id| model.store.is_frozen(id)) {
        let bound = s
            .bound_var(id)
            .expect("frozen parameter used in the forward pass");
        assert!(s.graph.grad(bound).is_none(), "{}", model.store.name(id));
        assert!(grads.iter().all(|(g, _)| *g != id));
    }
}

#[test]
fn predictions_ignore_test_labels() {
    let (cfg, data) = tiny();
    let (model, outcome) = run_two_stage(&data, &cfg, None, &mut RunLog::memory()).unwrap();
    let mut altered = data.clone();
    for (i, r) in altered.iter_mut().enumerate() {
        r.y = if i % 2 == 0 { 0.9 } else { -r.y };
        r.y_t = None;
        r.y_v = Some(0.0);
    }
    let test = split_of(&altered, Split::Test);
    let again = evaluate(&model, &test).unwrap();
    assert_eq!(again.prediction.y_hat, outcome.evaluation.prediction.y_hat);
    assert_eq!(
        again.prediction.unimodal,
        outcome.evaluation.prediction.unimodal
    );
}

#[test]
fn best_epoch_is_the_minimum_logged() {
    let (cfg, data) = tiny();
    let mut log = RunLog::memory();
    let (_, outcome) = run_two_stage(&data, &cfg, None, &mut log).unwrap();
    for report in [outcome.pretrain.unwrap(), outcome.downstream] {
        assert!(report
            .history
            .iter()
            .all(|h| report.best_valid_mae <= h.valid_mae));
    }
    let steps: Vec<u64> = log
        .records
        .iter()
        .map(|r| r["step"].as_u64().unwrap())
        .collect();
    assert!(steps.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn checkpoint_round_trip_reproduces_the_forward_pass() {
    let (cfg, data) = tiny();
    let (model, _) = run_two_stage(&data, &cfg, None, &mut RunLog::memory()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.kuda");
    model.store.snapshot().save(&path).unwrap();
    let mut fresh = KudaModel::new(&cfg.effective_model(), 99).unwrap();
    fresh.store.load(&Snapshot::load(&path).unwrap()).unwrap();
    let test = split_of(&data, Split::Test);
    let feats = Features::from_records(&test, &model.config).unwrap();
    let a = model.predict(&feats).unwrap();
    let b = fresh.predict(&feats).unwrap();
    assert_eq!(a.y_hat, b.y_hat);
    assert_eq!(a.pooled, b.pooled);
}

#[test]
fn skipping_the_checkpoint_changes_predictions() {
    let (cfg, data) = tiny();
    let (_, full) = run_two_stage(&data, &cfg, None, &mut RunLog::memory()).unwrap();
    let no_kip = cfg.clone().with_ablation(Ablation::NoKip);
    let (_, ablated) = run_two_stage(&data, &no_kip, None, &mut RunLog::memory()).unwrap();
    assert!(ablated.pretrain.is_none());
    assert_ne!(
        full.evaluation.prediction.y_hat,
        ablated.evaluation.prediction.y_hat
    );
}

#[test]
fn identical_runs_are_identical() {
    let (cfg, data) = tiny();
    let (_, a) = run_two_stage(&data, &cfg, None, &mut RunLog::memory()).unwrap();
    let (_, b) = run_two_stage(&data, &cfg, None, &mut RunLog::memory()).unwrap();
    assert_eq!(
        serde_json::to_string(&a.evaluation.report).unwrap(),
        serde_json::to_string(&b.evaluation.report).unwrap()
    );
}

#[test]
fn every_ablation_trains() {
    let (cfg, data) = tiny();
    for ablation in Ablation::ALL {
        let c = cfg.clone().with_ablation(ablation);
        let (_, out) = run_two_stage(&data, &c, None, &mut RunLog::memory())
            .unwrap_or_else(|e| panic!("{}: {e}", ablation.name()));
        assert!(out.evaluation.report.mae.is_finite());
    }
}

#[test]
fn stage_one_needs_unimodal_labels() {
    let (cfg, mut data) = tiny();
    let first_train = data.iter().position(|r| r.split == Split::Train).unwrap();
    data[first_train].y_a = None;
    let train = split_of(&data, Split::Train);
    let valid = split_of(&data, Split::Valid);
    let mut model = KudaModel::new(&cfg.effective_model(), 0).unwrap();
    assert!(pretrain_stage(&mut model, &train, &valid, &cfg, &mut RunLog::memory()).is_err());
}

/// Text alone encodes its unimodal label through sentiment tokens.
#[test]
fn text_decoder_learns_its_label() {
    let gen = GeneratorConfig {
        n_samples: 600,
        ..Default::default()
    };
    let data = synthesize(&gen, 2).unwrap();
    let train = split_of(&data, Split::Train);
    let valid = split_of(&data, Split::Valid);
    let mut cfg = TrainConfig::desk();
    cfg.pretrain.epochs = 10;
    let mut model = KudaModel::new(&cfg.effective_model(), 2).unwrap();
    pretrain_stage(&mut model, &train, &valid, &cfg, &mut RunLog::memory()).unwrap();
    let mae = kuda_core::pipeline::unimodal_mae(&model, &valid).unwrap();
    assert!(mae[0] < 0.15, "{mae:?}");
}
