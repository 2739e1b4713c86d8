//! Library-level workflows on a small simulated world.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmrec::cli::{self, modelfile, Prepared, RunConfig};
use mmrec::data::Dataset;
use mmrec::interest::StaticProfile;
use mmrec::model::{AblationVariant, Model};
use mmrec::simdata;
use mmrec::training::{aggregate, dataset_loss, evaluate_scorer, train_with, StopReason};

fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default().with_seed(seed);
    cfg.world.n_users = 300;
    cfg.world.n_videos = 600;
    cfg.train.max_epochs = 2;
    cfg
}

fn prepared(cfg: &RunConfig) -> Prepared {
    let world = simdata::generate_world(&cfg.world).unwrap();
    let logs = simdata::simulate_logs(&world);
    cli::prepare(simdata::dataset(&world, &logs), cfg).unwrap()
}

fn init_model(p: &Prepared, cfg: &RunConfig) -> Model {
    let mc = cfg
        .train
        .model_config(p.dims, p.schema.clone(), AblationVariant::Full);
    Model::new(mc, cfg.train.seed).unwrap()
}

#[test]
fn reloaded_model_reproduces_metrics() {
    let cfg = small_config(1);
    let p = prepared(&cfg);
    let fitted = cli::fit(&p, &cfg, AblationVariant::Full).unwrap();
    let (before, _) = cli::assess(&p, &fitted.model, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    modelfile::save(&path, &fitted.model, modelfile::Seeds { data: 1, train: 1 }).unwrap();
    let (loaded, _) = modelfile::load(&path).unwrap();
    let (after, _) = cli::assess(&p, &loaded, &cfg).unwrap();
    assert_eq!(before, after);
}

#[test]
fn ablation_variants_differ_only_in_variant() {
    let mut cfg = small_config(2);
    cfg.train.max_epochs = 1;
    let p = prepared(&cfg);
    let run = cli::run_variants(&p, &cfg, false).unwrap();
    assert_eq!(run.variants.len(), 5);
    let full = &run.get(AblationVariant::Full).unwrap().config;
    for v in &run.variants {
        let mut c = v.config.clone();
        c.variant = AblationVariant::Full;
        assert_eq!(&c, full, "{} changed more than the variant", v.variant);
        assert_eq!(v.history.epochs.len(), 1);
    }
    let text = run.get(AblationVariant::TextOnly).unwrap();
    let share = text.metrics.modality_share.as_array();
    assert_eq!(share, [0.0, 1.0, 0.0]);
}

#[test]
fn random_scores_give_chance_auc() {
    let cfg = small_config(3);
    let p = prepared(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let outcomes = evaluate_scorer(&p.test, 10, |_, _| rng.random::<f64>());
    let report = aggregate(&outcomes, &[10]).unwrap();
    let auc = report.auc.unwrap();
    assert!((auc - 0.5).abs() < 0.05, "random AUC {auc}");
}

#[test]
fn user_without_history_still_gets_recommendations() {
    let cfg = small_config(4);
    let p = prepared(&cfg);
    let model = init_model(&p, &cfg);
    let mut profiles = p.dataset.profiles.clone();
    let new_user = 1_000_000;
    profiles.insert(
        new_user,
        StaticProfile {
            gender: "female".into(),
            region: "region_3".into(),
            registration_bucket: "lt_30d".into(),
        },
    );
    let dataset = Dataset::new(p.dataset.catalog.clone(), p.dataset.logs.clone(), profiles);
    let recs = cli::recommend_for_user(&dataset, &model, new_user, 10, 200).unwrap();
    assert_eq!(recs.len(), 10);
    assert!(recs.iter().all(|r| r.score.is_finite()));
    assert!(recs.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut cfg = small_config(5);
    cfg.train.learning_rate = 0.0;
    let p = prepared(&cfg);
    let model = init_model(&p, &cfg);
    let start = model.params().clone();
    let out = train_with(
        model,
        &p.dataset.catalog,
        &p.examples,
        &p.dataset.profiles,
        &cfg.train,
        |_, e| Ok(e as f64),
    )
    .unwrap();
    assert_eq!(out.model.params(), &start);
}

#[test]
fn training_lowers_the_loss() {
    let mut cfg = small_config(6);
    cfg.train.learning_rate = 0.01;
    cfg.train.max_epochs = 3;
    let p = prepared(&cfg);
    let model = init_model(&p, &cfg);
    let before =
        dataset_loss(&model, &p.dataset.catalog, &p.examples, &p.dataset.profiles).unwrap();
    let out = train_with(
        model,
        &p.dataset.catalog,
        &p.examples,
        &p.dataset.profiles,
        &cfg.train,
        |_, e| Ok(e as f64),
    )
    .unwrap();
    let after = dataset_loss(
        &out.model,
        &p.dataset.catalog,
        &p.examples,
        &p.dataset.profiles,
    )
    .unwrap();
    assert!(after < before - 0.01, "loss {before} -> {after}");
}

#[test]
fn flat_validation_stops_after_patience() {
    let mut cfg = small_config(7);
    cfg.train.max_epochs = 20;
    cfg.train.patience = 2;
    let p = prepared(&cfg);
    let model = init_model(&p, &cfg);
    let out = train_with(
        model,
        &p.dataset.catalog,
        &p.examples,
        &p.dataset.profiles,
        &cfg.train,
        |_, _| Ok(0.6),
    )
    .unwrap();
    assert_eq!(out.history.epochs.len(), 3);
    assert_eq!(out.history.best_epoch, Some(1));
    assert_eq!(out.history.stop_reason, StopReason::Patience);
}
