//! Held-out evaluation. Each user's history is every click before the split
//! time; the test window supplies the impressions to score and the clicks
//! that count as relevant.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EventKind, VideoRecord};
use crate::error::{Error, Result};
use crate::fusion::{AttentionWeights, ModalityFeatures};
use crate::interest::StaticProfile;
use crate::metrics::{auc, f1, macro_ranking, MetricsReport, RankedList};
use crate::model::Model;
use crate::numerics::sigmoid;
use crate::pipeline::{fine_rank, history_features, retrieve, Catalog};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalUser {
    pub user_id: u64,
    pub profile: StaticProfile,
    /// Clicks before the split time, oldest first.
    pub history: Vec<u64>,
    /// Distinct test-window impressions with their click label, by id.
    pub candidates: Vec<(u64, bool)>,
}

impl EvalUser {
    pub fn relevant(&self) -> impl Iterator<Item = u64> + '_ {
        self.candidates.iter().filter(|c| c.1).map(|c| c.0)
    }
}

pub fn build_eval_users(dataset: &Dataset, users: &[u64], split_ts: i64) -> Vec<EvalUser> {
    let by_user = dataset.events_by_user();
    let unknown = StaticProfile {
        gender: String::new(),
        region: String::new(),
        registration_bucket: String::new(),
    };
    users
        .iter()
        .map(|&uid| {
            let events = by_user.get(&uid).copied().unwrap_or(&[]);
            let history = events
                .iter()
                .filter(|e| e.ts < split_ts && e.event == EventKind::Click)
                .map(|e| e.video_id)
                .collect();
            let mut candidates: BTreeMap<u64, bool> = BTreeMap::new();
            for e in events.iter().filter(|e| e.ts >= split_ts) {
                match e.event {
                    EventKind::Impression => {
                        candidates.entry(e.video_id).or_insert(false);
                    }
                    EventKind::Click => {
                        candidates.insert(e.video_id, true);
                    }
                    _ => {}
                }
            }
            EvalUser {
                user_id: uid,
                profile: dataset
                    .profiles
                    .get(&uid)
                    .cloned()
                    .unwrap_or_else(|| unknown.clone()),
                history,
                candidates: candidates.into_iter().collect(),
            }
        })
        .collect()
}

/// What gets ranked for each user.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CandidateScope {
    /// The user's own test-window impressions.
    Impressions,
    /// The whole catalog through two-stage retrieval with `m` candidates.
    Catalog { m: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub scope: CandidateScope,
    /// Length of the ranking kept per user (at least the largest K).
    pub keep: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![5, 10],
            scope: CandidateScope::Impressions,
            keep: 10,
        }
    }
}

impl EvalConfig {
    fn keep(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(0).max(self.keep)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserOutcome {
    pub user_id: u64,
    pub ranking: Vec<u64>,
    /// Attention weights of the ranked items, in ranking order.
    pub ranking_weights: Vec<AttentionWeights>,
    pub relevant: Vec<u64>,
    /// Size of the pool the ranking was drawn from.
    pub n_candidates: usize,
    /// (score, clicked) for every test-window impression.
    pub scored: Vec<(f64, bool)>,
    pub weight_sum: [f64; 3],
    pub weight_count: usize,
}

fn descending(a: (f64, u64), b: (f64, u64)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Outcome of one user whose impressions were scored by `scores`
/// (aligned with `user.candidates`).
pub fn impression_outcome(
    user: &EvalUser,
    scores: &[(f64, AttentionWeights)],
    keep: usize,
) -> UserOutcome {
    let mut order: Vec<usize> = (0..user.candidates.len()).collect();
    order.sort_by(|&a, &b| {
        descending(
            (scores[a].0, user.candidates[a].0),
            (scores[b].0, user.candidates[b].0),
        )
    });
    order.truncate(keep);
    let mut weight_sum = [0.0; 3];
    for (_, w) in scores {
        for (s, v) in weight_sum.iter_mut().zip(w.as_array()) {
            *s += v;
        }
    }
    UserOutcome {
        user_id: user.user_id,
        ranking: order.iter().map(|&i| user.candidates[i].0).collect(),
        ranking_weights: order.iter().map(|&i| scores[i].1).collect(),
        relevant: user.relevant().collect(),
        n_candidates: user.candidates.len(),
        scored: scores
            .iter()
            .zip(&user.candidates)
            .map(|(s, c)| (s.0, c.1))
            .collect(),
        weight_sum,
        weight_count: scores.len(),
    }
}

pub fn evaluate_users(
    model: &Model,
    videos: &[VideoRecord],
    users: &[EvalUser],
    config: &EvalConfig,
) -> Result<Vec<UserOutcome>> {
    let catalog = Catalog::for_model(videos, model)?;
    let schema = &model.config().profile_schema;
    let keep = config.keep();
    let mut out = Vec::with_capacity(users.len());
    for user in users {
        let history = history_features(&user.history, &catalog)?;
        let state = model.user_state(&history, schema.resolve(&user.profile), false);
        let z = &state.representation;
        let scores: Vec<(f64, AttentionWeights)> = user
            .candidates
            .iter()
            .map(|&(id, _)| {
                let feats: &ModalityFeatures = &catalog
                    .get(id)
                    .ok_or_else(|| Error::Lookup(format!("test video {id} is not in the catalog")))?
                    .features;
                let ps = model.score(z, feats);
                Ok((ps.score, ps.weights))
            })
            .collect::<Result<_>>()?;
        let mut outcome = impression_outcome(user, &scores, keep);
        if let CandidateScope::Catalog { m } = config.scope {
            let exclude: HashSet<u64> = user.history.iter().copied().collect();
            let candidates = retrieve(z, &catalog, m.max(keep), &exclude, &model.params().fusion)?;
            let ids: Vec<u64> = candidates.iter().map(|c| c.video_id).collect();
            let recs = fine_rank(z, model, &catalog, &ids, keep)?;
            outcome.ranking = recs.iter().map(|r| r.video_id).collect();
            outcome.ranking_weights = recs.iter().map(|r| r.weights).collect();
            outcome.n_candidates = catalog.len() - exclude.len().min(catalog.len());
        }
        out.push(outcome);
    }
    Ok(out)
}

/// Scores every user's impressions with an arbitrary function, e.g. a
/// ground-truth oracle. Attention weights are reported as zero.
pub fn evaluate_scorer<F>(users: &[EvalUser], keep: usize, mut score: F) -> Vec<UserOutcome>
where
    F: FnMut(&EvalUser, u64) -> f64,
{
    users
        .iter()
        .map(|u| {
            let scores: Vec<(f64, AttentionWeights)> = u
                .candidates
                .iter()
                .map(|&(id, _)| (score(u, id), AttentionWeights::from_array([0.0; 3])))
                .collect();
            let mut o = impression_outcome(u, &scores, keep);
            o.weight_count = 0;
            o
        })
        .collect()
}

/// Report over any subset of outcomes. Users with no relevant item are
/// skipped for ranking metrics; AUC and F1 pool every scored impression.
pub fn aggregate<'a>(
    outcomes: impl IntoIterator<Item = &'a UserOutcome>,
    ks: &[usize],
) -> Result<MetricsReport> {
    let outcomes: Vec<&UserOutcome> = outcomes.into_iter().collect();
    let lists = outcomes
        .iter()
        .map(|o| RankedList::new(o.ranking.clone(), o.relevant.iter().copied()))
        .collect::<Result<Vec<_>>>()?;
    let (ranking, skipped) = macro_ranking(&lists, ks)?;
    let pooled: Vec<(f64, bool)> = outcomes
        .iter()
        .flat_map(|o| o.scored.iter().copied())
        .collect();
    let probs: Vec<f64> = pooled.iter().map(|s| sigmoid(s.0)).collect();
    let labels: Vec<bool> = pooled.iter().map(|s| s.1).collect();
    let mut weight_sum = [0.0; 3];
    let mut count = 0;
    for o in &outcomes {
        for (s, v) in weight_sum.iter_mut().zip(o.weight_sum) {
            *s += v;
        }
        count += o.weight_count;
    }
    let share = weight_sum.map(|s| if count > 0 { s / count as f64 } else { 0.0 });
    Ok(MetricsReport {
        ranking,
        auc: auc(&pooled).ok(),
        f1: f1(&probs, &labels, 0.5)?,
        modality_share: AttentionWeights::from_array(share),
        users: outcomes.len() - skipped,
        skipped_users: skipped,
    })
}

pub fn evaluate(
    model: &Model,
    videos: &[VideoRecord],
    users: &[EvalUser],
    config: &EvalConfig,
) -> Result<(MetricsReport, Vec<UserOutcome>)> {
    let outcomes = evaluate_users(model, videos, users, config)?;
    let report = aggregate(&outcomes, &config.ks)?;
    Ok((report, outcomes))
}

/// Pooled AUC over the users' test-window impressions; 0.5 when undefined.
pub fn validation_auc(model: &Model, videos: &[VideoRecord], users: &[EvalUser]) -> Result<f64> {
    let config = EvalConfig {
        ks: vec![],
        scope: CandidateScope::Impressions,
        keep: 0,
    };
    let outcomes = evaluate_users(model, videos, users, &config)?;
    let pooled: Vec<(f64, bool)> = outcomes
        .iter()
        .flat_map(|o| o.scored.iter().copied())
        .collect();
    Ok(auc(&pooled).unwrap_or(0.5))
}
