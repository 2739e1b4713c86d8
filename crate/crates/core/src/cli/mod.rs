//! Run configuration, the end-to-end commands and the files they exchange.

pub mod modelfile;
pub mod report;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, EventKind};
use crate::error::{Error, Result};
use crate::fusion::{AttentionWeights, Modality};
use crate::interest::ProfileSchema;
use crate::metrics::MetricsReport;
use crate::model::{AblationVariant, Model, ModelConfig};
use crate::pipeline::{recommend, Catalog, Recommendation, UserQuery};
use crate::simdata::{self, WorldConfig, WorldSummary};
use crate::training::{
    build_eval_users, build_examples, evaluate, split_users, train, CandidateScope, EvalConfig,
    EvalUser, LabeledExample, StopReason, TrainConfig, TrainHistory, UserOutcome, UserSplit,
};

use modelfile::Seeds;
use report::{AblationReport, AblationRow, EvaluationReport, RandomBaseline};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub catalog: PathBuf,
    pub logs: PathBuf,
    pub profiles: PathBuf,
    pub ground_truth: PathBuf,
    pub model: PathBuf,
    pub history: PathBuf,
    /// Report stem; `.json` and `.txt` are appended.
    pub report: PathBuf,
    pub explain: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let dir = Path::new("out");
        Self {
            catalog: dir.join("catalog.jsonl"),
            logs: dir.join("logs.jsonl"),
            profiles: dir.join("profiles.jsonl"),
            ground_truth: dir.join("ground_truth.jsonl"),
            model: dir.join("model.bin"),
            history: dir.join("history.json"),
            report: dir.join("report"),
            explain: dir.join("explain.json"),
        }
    }
}

impl Paths {
    /// Moves every file into `dir`, keeping file names.
    pub fn rebase(&mut self, dir: &Path) {
        for p in self.all_mut() {
            let name = p.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            *p = dir.join(name);
        }
    }

    fn all_mut(&mut self) -> [&mut PathBuf; 8] {
        [
            &mut self.catalog,
            &mut self.logs,
            &mut self.profiles,
            &mut self.ground_truth,
            &mut self.model,
            &mut self.history,
            &mut self.report,
            &mut self.explain,
        ]
    }

    /// Environment overrides. Only paths can be overridden this way.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        if let Some(dir) = var("MMREC_OUT_DIR") {
            self.rebase(Path::new(&dir));
        }
        let specific = [
            ("MMREC_CATALOG", &mut self.catalog),
            ("MMREC_LOGS", &mut self.logs),
            ("MMREC_PROFILES", &mut self.profiles),
            ("MMREC_MODEL", &mut self.model),
            ("MMREC_REPORT", &mut self.report),
        ];
        for (key, slot) in specific {
            if let Some(v) = var(key) {
                *slot = PathBuf::from(v);
            }
        }
    }

    pub fn report_json(&self) -> PathBuf {
        with_suffix(&self.report, "json")
    }

    pub fn report_table(&self) -> PathBuf {
        with_suffix(&self.report, "txt")
    }
}

fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub paths: Paths,
    pub train: TrainConfig,
    pub world: WorldConfig,
    pub ks: Vec<usize>,
    /// Coarse candidate count.
    pub m: usize,
    pub variant: AblationVariant,
    pub scope: CandidateScope,
    /// Train, validation, test shares of users.
    pub split_ratios: [f64; 3],
    /// Training seeds swept by the ablation command.
    pub ablation_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            paths: Paths::default(),
            train: TrainConfig::default(),
            world: WorldConfig::default(),
            ks: vec![5, 10],
            m: 200,
            variant: AblationVariant::Full,
            scope: CandidateScope::Impressions,
            split_ratios: [0.70, 0.15, 0.15],
            ablation_seeds: vec![0],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config(
                "ks must be a nonempty list of positive cutoffs".into(),
            ));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if let CandidateScope::Catalog { m } = self.scope {
            if m == 0 {
                return Err(Error::Config("catalog scope needs m >= 1".into()));
            }
        }
        self.train.validate()?;
        self.world.validate()
    }

    /// Uses `seed` for both data generation and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn eval_config(&self) -> EvalConfig {
        let mut ks = self.ks.clone();
        if !ks.contains(&report::TABLE_K) {
            ks.push(report::TABLE_K);
        }
        ks.sort_unstable();
        ks.dedup();
        EvalConfig {
            ks,
            scope: self.scope,
            keep: report::TABLE_K,
        }
    }

    fn seeds(&self) -> Seeds {
        Seeds {
            data: self.world.seed,
            train: self.train.seed,
        }
    }
}

/// Dataset with its user split, training examples and evaluation users.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub split: UserSplit,
    pub examples: Vec<LabeledExample>,
    pub validation: Vec<EvalUser>,
    pub test: Vec<EvalUser>,
    pub schema: ProfileSchema,
    pub dims: [usize; 3],
}

pub fn prepare(dataset: Dataset, config: &RunConfig) -> Result<Prepared> {
    let dims = dataset
        .dims()
        .ok_or_else(|| Error::Catalog("the catalog is empty".into()))?;
    let split = split_users(&dataset.user_ids(), config.split_ratios, config.train.seed)?;
    let examples = build_examples(
        &dataset,
        &split.train,
        config.train.negative_ratio,
        config.train.seed,
    )?;
    let split_ts = config.world.split_ts();
    let validation = build_eval_users(&dataset, &split.validation, split_ts);
    let test = build_eval_users(&dataset, &split.test, split_ts);
    let held_out: HashSet<u64> = split
        .validation
        .iter()
        .chain(&split.test)
        .copied()
        .collect();
    if let Some(ex) = examples.iter().find(|e| held_out.contains(&e.user_id)) {
        return Err(Error::Argument(format!(
            "user {} is both held out and in the training examples",
            ex.user_id
        )));
    }
    let schema = ProfileSchema::from_profiles(dataset.profiles.values());
    Ok(Prepared {
        dataset,
        split,
        examples,
        validation,
        test,
        schema,
        dims,
    })
}

#[derive(Clone, Debug)]
pub struct Fitted {
    pub model: Model,
    pub history: TrainHistory,
}

/// Builds the variant's model and trains it; `max_epochs = 0` keeps the
/// initialization.
pub fn fit(prepared: &Prepared, config: &RunConfig, variant: AblationVariant) -> Result<Fitted> {
    let model_config: ModelConfig =
        config
            .train
            .model_config(prepared.dims, prepared.schema.clone(), variant);
    let model = Model::new(model_config, config.train.seed)?;
    if config.train.max_epochs == 0 {
        return Ok(Fitted {
            model,
            history: TrainHistory {
                epochs: Vec::new(),
                best_epoch: None,
                stop_reason: StopReason::MaxEpochs,
            },
        });
    }
    let out = train(
        model,
        &prepared.dataset.catalog,
        &prepared.examples,
        &prepared.dataset.profiles,
        &prepared.validation,
        &config.train,
    )?;
    Ok(Fitted {
        model: out.model,
        history: out.history,
    })
}

pub fn assess(
    prepared: &Prepared,
    model: &Model,
    config: &RunConfig,
) -> Result<(MetricsReport, Vec<UserOutcome>)> {
    evaluate(
        model,
        &prepared.dataset.catalog,
        &prepared.test,
        &config.eval_config(),
    )
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, e.into()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let p = &config.paths;
    Dataset::load(&p.catalog, &p.logs, &p.profiles)
}

pub fn cmd_gen_data(config: &RunConfig) -> Result<WorldSummary> {
    config.validate()?;
    let world = simdata::generate_world(&config.world)?;
    let logs = simdata::simulate_logs(&world);
    let p = &config.paths;
    for path in [&p.catalog, &p.logs, &p.profiles, &p.ground_truth] {
        ensure_parent(path)?;
    }
    data::write_catalog(&p.catalog, &world.catalog)?;
    data::write_logs(&p.logs, &logs.events)?;
    data::write_profiles(&p.profiles, &world.profiles())?;
    simdata::write_ground_truth(&p.ground_truth, &world, &logs)?;
    Ok(simdata::summarize(&world, &logs))
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainHistory> {
    config.validate()?;
    let prepared = prepare(load_dataset(config)?, config)?;
    info!(
        "{} training examples from {} users",
        prepared.examples.len(),
        prepared.split.train.len()
    );
    let fitted = fit(&prepared, config, config.variant)?;
    ensure_parent(&config.paths.model)?;
    modelfile::save(&config.paths.model, &fitted.model, config.seeds())?;
    write_json(&config.paths.history, &fitted.history)?;
    Ok(fitted.history)
}

pub fn cmd_evaluate(config: &RunConfig) -> Result<EvaluationReport> {
    config.validate()?;
    let (model, header) = modelfile::load(&config.paths.model)?;
    if header.variant != config.variant {
        return Err(Error::Config(format!(
            "model file holds variant {} but {} was requested",
            header.variant, config.variant
        )));
    }
    // the split must be the one the model was trained with
    let mut config = config.clone();
    config.train.seed = header.seeds.train;
    let prepared = prepare(load_dataset(&config)?, &config)?;
    let (metrics, outcomes) = assess(&prepared, &model, &config)?;
    let report = EvaluationReport {
        variant: model.variant(),
        label: model.variant().label().to_string(),
        baseline: RandomBaseline::from_outcomes(&outcomes, report::TABLE_K)?,
        metrics,
    };
    write_json(&config.paths.report_json(), &report)?;
    write_text(&config.paths.report_table(), &report.table())?;
    Ok(report)
}

/// Every click of the user, oldest first.
fn click_history(dataset: &Dataset, user: u64) -> Vec<u64> {
    dataset
        .logs
        .iter()
        .filter(|e| e.user_id == user && e.event == EventKind::Click)
        .map(|e| e.video_id)
        .collect()
}

fn unknown_user(dataset: &Dataset, user: u64) -> Error {
    let mut ids: Vec<u64> = dataset.profiles.keys().copied().collect();
    ids.sort_by_key(|&id| (id.abs_diff(user), id));
    let near: Vec<String> = ids.iter().take(5).map(u64::to_string).collect();
    Error::Lookup(format!(
        "unknown user {user}; nearest ids: {}",
        near.join(", ")
    ))
}

fn user_query(dataset: &Dataset, model: &Model, user: u64) -> Result<UserQuery> {
    let profile = dataset
        .profiles
        .get(&user)
        .ok_or_else(|| unknown_user(dataset, user))?;
    Ok(UserQuery {
        history: click_history(dataset, user),
        profile: model.config().profile_schema.resolve(profile),
    })
}

pub fn recommend_for_user(
    dataset: &Dataset,
    model: &Model,
    user: u64,
    k: usize,
    m: usize,
) -> Result<Vec<Recommendation>> {
    let query = user_query(dataset, model, user)?;
    let catalog = Catalog::for_model(&dataset.catalog, model)?;
    recommend(&query, model, &catalog, k, m)
}

pub fn format_recommendations(recs: &[Recommendation]) -> String {
    let mut out = String::new();
    for (i, r) in recs.iter().enumerate() {
        let [v, t, a] = r.weights.as_array();
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\t{:.4}\n",
            i + 1,
            r.video_id,
            r.score,
            r.probability,
            v,
            t,
            a
        ));
    }
    out
}

pub fn cmd_recommend(config: &RunConfig, user: u64, k: usize) -> Result<Vec<Recommendation>> {
    config.validate()?;
    let (model, _) = modelfile::load(&config.paths.model)?;
    let dataset = load_dataset(config)?;
    recommend_for_user(&dataset, &model, user, k, config.m.max(k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemExplanation {
    pub rank: usize,
    pub video_id: u64,
    pub score: f64,
    pub probability: f64,
    pub weights: AttentionWeights,
    pub dominant: Modality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttendedItem {
    pub video_id: u64,
    /// Index into `history`.
    pub position: usize,
    /// Attention received, averaged over heads and query rows.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub user_id: u64,
    pub variant: AblationVariant,
    pub items: Vec<ItemExplanation>,
    /// Encoded history, oldest first.
    pub history: Vec<u64>,
    /// Per head, `history.len()` rows of attention over the history.
    pub attention: Vec<Vec<Vec<f64>>>,
    pub top_attended: Vec<AttendedItem>,
}

const TOP_ATTENDED: usize = 5;

pub fn explain_user(
    dataset: &Dataset,
    model: &Model,
    user: u64,
    k: usize,
    m: usize,
) -> Result<Explanation> {
    if model.variant() != AblationVariant::Full {
        return Err(Error::Config(format!(
            "explanations need the full model, got variant {}",
            model.variant()
        )));
    }
    let query = user_query(dataset, model, user)?;
    let catalog = Catalog::for_model(&dataset.catalog, model)?;
    let recs = recommend(&query, model, &catalog, k, m.max(k))?;
    let max_len = model.config().encoder.max_len;
    let history = query.history[query.history.len().saturating_sub(max_len)..].to_vec();
    let feats = crate::pipeline::history_features(&history, &catalog)?;
    let state = model.user_state(&feats, query.profile, true);
    let attention: Vec<Vec<Vec<f64>>> = state
        .interest
        .attention_trace
        .unwrap_or_default()
        .iter()
        .map(|h| (0..h.rows()).map(|r| h.row(r).to_vec()).collect())
        .collect();
    let n = history.len();
    let mut received = vec![0.0; n];
    for head in &attention {
        for row in head {
            for (acc, w) in received.iter_mut().zip(row) {
                *acc += w;
            }
        }
    }
    let norm = (attention.len() * n).max(1) as f64;
    let mut top: Vec<AttendedItem> = received
        .iter()
        .enumerate()
        .map(|(position, w)| AttendedItem {
            video_id: history[position],
            position,
            weight: w / norm,
        })
        .collect();
    top.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then(a.position.cmp(&b.position))
    });
    top.truncate(TOP_ATTENDED);
    Ok(Explanation {
        user_id: user,
        variant: model.variant(),
        items: recs
            .iter()
            .enumerate()
            .map(|(i, r)| ItemExplanation {
                rank: i + 1,
                video_id: r.video_id,
                score: r.score,
                probability: r.probability,
                weights: r.weights,
                dominant: r.weights.dominant(),
            })
            .collect(),
        history,
        attention,
        top_attended: top,
    })
}

pub fn cmd_explain(config: &RunConfig, user: u64, k: usize) -> Result<Explanation> {
    config.validate()?;
    let (model, _) = modelfile::load(&config.paths.model)?;
    let dataset = load_dataset(config)?;
    let explanation = explain_user(&dataset, &model, user, k, config.m)?;
    write_json(&config.paths.explain, &explanation)?;
    Ok(explanation)
}

/// One trained and evaluated variant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: AblationVariant,
    pub config: ModelConfig,
    pub history: TrainHistory,
    pub metrics: MetricsReport,
    #[serde(skip)]
    pub outcomes: Vec<UserOutcome>,
    #[serde(skip)]
    pub model: Option<Model>,
    /// Wall-clock training time.
    #[serde(skip)]
    pub train_time: Duration,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub variants: Vec<VariantRun>,
}

impl SeedRun {
    pub fn get(&self, variant: AblationVariant) -> Option<&VariantRun> {
        self.variants.iter().find(|v| v.variant == variant)
    }
}

/// Trains and evaluates every variant on one prepared split. Variants share
/// the data, split, examples and seeds.
pub fn run_variants(prepared: &Prepared, config: &RunConfig, keep_models: bool) -> Result<SeedRun> {
    let mut variants = Vec::with_capacity(AblationVariant::ALL.len());
    for variant in AblationVariant::ALL {
        let wrap = |e: Error| match e {
            Error::Numerical(msg) => Error::Numerical(format!("variant {variant}: {msg}")),
            Error::Config(msg) => Error::Config(format!("variant {variant}: {msg}")),
            Error::Argument(msg) => Error::Argument(format!("variant {variant}: {msg}")),
            other => other,
        };
        info!("training variant {variant} (seed {})", config.train.seed);
        let start = Instant::now();
        let fitted = fit(prepared, config, variant).map_err(wrap)?;
        let train_time = start.elapsed();
        let (metrics, outcomes) = assess(prepared, &fitted.model, config).map_err(wrap)?;
        variants.push(VariantRun {
            variant,
            config: fitted.model.config().clone(),
            history: fitted.history,
            metrics,
            outcomes,
            model: keep_models.then_some(fitted.model),
            train_time,
        });
    }
    Ok(SeedRun {
        seed: config.train.seed,
        variants,
    })
}

pub fn cmd_ablate(config: &RunConfig) -> Result<AblationReport> {
    config.validate()?;
    let dataset = load_dataset(config)?;
    let mut runs = Vec::new();
    for &seed in &config.ablation_seeds {
        let mut cfg = config.clone();
        cfg.train.seed = seed;
        let prepared = prepare(dataset.clone(), &cfg)?;
        runs.push(run_variants(&prepared, &cfg, false)?);
    }
    let report = AblationReport::from_runs(runs)?;
    write_json(&config.paths.report_json(), &report)?;
    write_text(&config.paths.report_table(), &report.table())?;
    Ok(report)
}

/// Rows averaged over seeds, in table order.
pub(crate) fn mean_rows(runs: &[SeedRun]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in AblationVariant::ALL {
        let mut acc = BTreeMap::<&str, Vec<f64>>::new();
        for run in runs {
            let v = run.get(variant).ok_or_else(|| {
                Error::Argument(format!("seed {} lacks variant {variant}", run.seed))
            })?;
            let at = v
                .metrics
                .at(report::TABLE_K)
                .ok_or_else(|| Error::Argument(format!("no metrics at K = {}", report::TABLE_K)))?;
            acc.entry("ndcg").or_default().push(at.ndcg);
            acc.entry("precision").or_default().push(at.precision);
            acc.entry("auc")
                .or_default()
                .push(v.metrics.auc.unwrap_or(f64::NAN));
        }
        let mean = |k: &str| {
            let v = &acc[k];
            v.iter().sum::<f64>() / v.len() as f64
        };
        rows.push(AblationRow {
            variant,
            label: variant.label().to_string(),
            ndcg: mean("ndcg"),
            precision: mean("precision"),
            auc: mean("auc"),
        });
    }
    Ok(rows)
}
