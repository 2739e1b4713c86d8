//! Batch learning: user-level splits, labeled examples with negative
//! sampling, cross-entropy training with Adam and early stopping on
//! validation AUC, and evaluation.

mod backprop;
mod evaluate;
mod optim;

use std::collections::{BTreeMap, HashMap, HashSet};

use log::{debug, info};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EventKind, LogEvent, VideoRecord};
use crate::error::{Error, Result};
use crate::fusion::ModalityFeatures;
use crate::interest::{EncoderConfig, Pooling, ProfileIndex, ProfileSchema, StaticProfile};
use crate::model::{AblationVariant, Model, ModelConfig, ModelParams};

pub(crate) use backprop::accumulate_group;
pub use backprop::{group_loss, loss_and_gradient};
pub use evaluate::{
    aggregate, build_eval_users, evaluate, evaluate_scorer, evaluate_users, impression_outcome,
    validation_auc, CandidateScope, EvalConfig, EvalUser, UserOutcome,
};
pub use optim::Adam;

/// Impressions further apart than this start a new session.
pub const SESSION_GAP_S: i64 = 1800;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    ValidationAuc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_len: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_metric: EarlyStopMetric,
    pub patience: usize,
    pub negative_ratio: usize,
    pub d: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub pooling: Pooling,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_len: 50,
            learning_rate: 0.001,
            batch_size: 128,
            max_epochs: 20,
            early_stop_metric: EarlyStopMetric::ValidationAuc,
            patience: 3,
            negative_ratio: 4,
            d: 16,
            heads: 2,
            ff_width: 64,
            pooling: Pooling::Mean,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "batch_size and max_len must be at least 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "invalid learning rate {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn model_config(
        &self,
        dims: [usize; 3],
        profile_schema: ProfileSchema,
        variant: AblationVariant,
    ) -> ModelConfig {
        ModelConfig {
            d: self.d,
            dims,
            heads: self.heads,
            ff_width: self.ff_width,
            encoder: EncoderConfig {
                max_len: self.max_len,
                pooling: self.pooling,
            },
            variant,
            profile_schema,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stop_reason: StopReason,
}

/// Cross-entropy with `p` clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
    pub test: Vec<u64>,
}

/// Seeded user-level partition with sizes `round(r0 n)`, `round(r1 n)` and
/// the remainder.
pub fn split_users(users: &[u64], ratios: [f64; 3], seed: u64) -> Result<UserSplit> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r))
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Argument(format!(
            "split ratios {ratios:?} must be in [0,1] and sum to 1"
        )));
    }
    let mut ids = users.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 3 {
        return Err(Error::Argument(format!(
            "need at least 3 users to split, got {}",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    ids.shuffle(&mut rng);
    let n = ids.len() as f64;
    let n_train = (ratios[0] * n).round() as usize;
    let n_val = ((ratios[1] * n).round() as usize).min(ids.len() - n_train);
    let mut train = ids[..n_train].to_vec();
    let mut validation = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(UserSplit {
        train,
        validation,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub user_id: u64,
    pub video_id: u64,
    pub label: bool,
    /// Videos clicked strictly before the positive, oldest first.
    pub prefix: Vec<u64>,
    /// Examples of one group share the prefix.
    pub group: usize,
}

/// Assigns a session number to every event of one user's time-ordered log.
fn sessions(events: &[LogEvent]) -> Vec<usize> {
    let mut out = Vec::with_capacity(events.len());
    let mut session = 0;
    let mut last: Option<i64> = None;
    for e in events {
        if let Some(prev) = last {
            if e.ts - prev > SESSION_GAP_S {
                session += 1;
            }
        }
        last = Some(e.ts);
        out.push(session);
    }
    out
}

/// One positive per click plus `negative_ratio` negatives, drawn from the
/// session's unclicked impressions and topped up from the catalog.
pub fn build_examples(
    dataset: &Dataset,
    users: &[u64],
    negative_ratio: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    let index = dataset.video_index();
    let catalog_ids: Vec<u64> = dataset.catalog.iter().map(|v| v.video_id).collect();
    let by_user = dataset.events_by_user();
    let wanted: HashSet<u64> = users.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut out = Vec::new();
    let mut group = 0;
    for (&uid, events) in by_user.iter().filter(|(u, _)| wanted.contains(u)) {
        for e in events.iter() {
            if !index.contains_key(&e.video_id) {
                return Err(Error::Lookup(format!(
                    "user {uid} has an event for video {} which is not in the catalog",
                    e.video_id
                )));
            }
        }
        let session_of = sessions(events);
        let clicked_ever: HashSet<u64> = events
            .iter()
            .filter(|e| e.event == EventKind::Click)
            .map(|e| e.video_id)
            .collect();
        let mut session_clicks: HashMap<usize, HashSet<u64>> = HashMap::new();
        let mut session_impressions: HashMap<usize, Vec<u64>> = HashMap::new();
        for (e, &s) in events.iter().zip(&session_of) {
            match e.event {
                EventKind::Click => {
                    session_clicks.entry(s).or_default().insert(e.video_id);
                }
                EventKind::Impression => session_impressions.entry(s).or_default().push(e.video_id),
                _ => {}
            }
        }
        let mut prefix: Vec<u64> = Vec::new();
        let mut i = 0;
        while i < events.len() {
            // clicks sharing a timestamp all see the same prefix
            let ts = events[i].ts;
            let mut j = i;
            while j < events.len() && events[j].ts == ts {
                j += 1;
            }
            let mut new_clicks = Vec::new();
            for (e, &s) in events[i..j].iter().zip(&session_of[i..j]) {
                if e.event != EventKind::Click {
                    continue;
                }
                let own: Vec<u64> = prefix
                    .iter()
                    .copied()
                    .filter(|&v| v != e.video_id)
                    .collect();
                out.push(LabeledExample {
                    user_id: uid,
                    video_id: e.video_id,
                    label: true,
                    prefix: own.clone(),
                    group,
                });
                let clicked_here = &session_clicks[&s];
                let mut pool: Vec<u64> = session_impressions
                    .get(&s)
                    .map(|v| {
                        v.iter()
                            .copied()
                            .filter(|id| !clicked_here.contains(id) && !clicked_ever.contains(id))
                            .collect()
                    })
                    .unwrap_or_default();
                pool.sort_unstable();
                pool.dedup();
                let mut chosen: Vec<u64> = pool
                    .choose_multiple(&mut rng, negative_ratio)
                    .copied()
                    .collect();
                let mut attempts = 0;
                while chosen.len() < negative_ratio && attempts < 100 * negative_ratio.max(1) {
                    attempts += 1;
                    let cand = catalog_ids[rng.random_range(0..catalog_ids.len())];
                    if !clicked_ever.contains(&cand) && !chosen.contains(&cand) {
                        chosen.push(cand);
                    }
                }
                for video_id in chosen {
                    out.push(LabeledExample {
                        user_id: uid,
                        video_id,
                        label: false,
                        prefix: own.clone(),
                        group,
                    });
                }
                group += 1;
                new_clicks.push(e.video_id);
            }
            prefix.extend(new_clicks);
            i = j;
        }
    }
    Ok(out)
}

/// Examples sharing a prefix, resolved to catalog positions.
struct Group {
    history: Vec<usize>,
    profile: ProfileIndex,
    targets: Vec<(usize, f64)>,
}

fn build_groups(
    examples: &[LabeledExample],
    index: &HashMap<u64, usize>,
    profiles: &BTreeMap<u64, StaticProfile>,
    schema: &ProfileSchema,
    max_len: usize,
) -> Result<Vec<Group>> {
    let lookup = |id: u64| {
        index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("example video {id} is not in the catalog")))
    };
    let unknown = StaticProfile {
        gender: String::new(),
        region: String::new(),
        registration_bucket: String::new(),
    };
    let mut groups: Vec<Group> = Vec::new();
    let mut current: Option<usize> = None;
    for ex in examples {
        if current != Some(ex.group) {
            let recent = &ex.prefix[ex.prefix.len().saturating_sub(max_len)..];
            groups.push(Group {
                history: recent.iter().map(|&v| lookup(v)).collect::<Result<_>>()?,
                profile: schema.resolve(profiles.get(&ex.user_id).unwrap_or(&unknown)),
                targets: Vec::new(),
            });
            current = Some(ex.group);
        }
        let g = groups.last_mut().expect("group pushed above");
        g.targets
            .push((lookup(ex.video_id)?, if ex.label { 1.0 } else { 0.0 }));
    }
    Ok(groups)
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: TrainHistory,
}

/// Trains with early stopping on the pooled validation AUC of `validation`.
pub fn train(
    model: Model,
    videos: &[VideoRecord],
    examples: &[LabeledExample],
    profiles: &BTreeMap<u64, StaticProfile>,
    validation: &[EvalUser],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if examples.is_empty() || validation.is_empty() {
        return Err(Error::Argument(
            "training needs nonempty train and validation sets".into(),
        ));
    }
    train_with(model, videos, examples, profiles, config, |m, _| {
        validation_auc(m, videos, validation)
    })
}

/// Training loop with a caller-supplied validation score (higher is better).
pub fn train_with<F>(
    mut model: Model,
    videos: &[VideoRecord],
    examples: &[LabeledExample],
    profiles: &BTreeMap<u64, StaticProfile>,
    config: &TrainConfig,
    mut validate: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Model, usize) -> Result<f64>,
{
    config.validate()?;
    let index: HashMap<u64, usize> = videos
        .iter()
        .enumerate()
        .map(|(i, v)| (v.video_id, i))
        .collect();
    let masked: Vec<ModalityFeatures> = videos
        .iter()
        .map(|v| model.mask(&v.features).into_owned())
        .collect();
    let mut groups = build_groups(
        examples,
        &index,
        profiles,
        &model.config().profile_schema,
        model.config().encoder.max_len,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(4);
    let mut adam = Adam::new(model.params(), config.learning_rate);
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        groups.shuffle(&mut rng);
        let flat: Vec<(usize, usize)> = groups
            .iter()
            .enumerate()
            .flat_map(|(g, grp)| (0..grp.targets.len()).map(move |t| (g, t)))
            .collect();
        let mut total_loss = 0.0;
        for (batch_idx, batch) in flat.chunks(config.batch_size).enumerate() {
            let mut grads = ModelParams::zeros(model.config());
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            let mut start = 0;
            while start < batch.len() {
                let g = batch[start].0;
                let mut end = start;
                while end < batch.len() && batch[end].0 == g {
                    end += 1;
                }
                let grp = &groups[g];
                let history: Vec<&ModalityFeatures> =
                    grp.history.iter().map(|&i| &masked[i]).collect();
                let targets: Vec<(&ModalityFeatures, f64)> = batch[start..end]
                    .iter()
                    .map(|&(_, t)| {
                        let (vi, y) = grp.targets[t];
                        (&masked[vi], y)
                    })
                    .collect();
                batch_loss +=
                    accumulate_group(&model, &history, grp.profile, &targets, scale, &mut grads);
                start = end;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss in batch {batch_idx} of epoch {epoch}"
                )));
            }
            total_loss += batch_loss;
            adam.step(model.params_mut(), &grads);
            if !model.params().is_finite() {
                return Err(Error::Numerical(format!(
                    "parameters became non-finite after batch {batch_idx} of epoch {epoch}"
                )));
            }
        }
        let train_loss = total_loss / flat.len().max(1) as f64;
        let auc = validate(&model, epoch)?;
        info!("epoch {epoch}: train loss {train_loss:.5}, validation AUC {auc:.5}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            validation_auc: auc,
        });
        if best.as_ref().is_none_or(|(b, _, _)| auc > *b) {
            best = Some((auc, epoch, model.params().clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                debug!("stopping: no improvement for {since_best} epochs");
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, params)) = best {
        *model.params_mut() = params;
    }
    Ok(TrainOutcome {
        model,
        history: TrainHistory {
            epochs,
            best_epoch,
            stop_reason,
        },
    })
}

/// Mean loss over every example, through the forward-only path.
pub fn dataset_loss(
    model: &Model,
    videos: &[VideoRecord],
    examples: &[LabeledExample],
    profiles: &BTreeMap<u64, StaticProfile>,
) -> Result<f64> {
    let index: HashMap<u64, usize> = videos
        .iter()
        .enumerate()
        .map(|(i, v)| (v.video_id, i))
        .collect();
    let groups = build_groups(
        examples,
        &index,
        profiles,
        &model.config().profile_schema,
        model.config().encoder.max_len,
    )?;
    let mut total = 0.0;
    let mut count = 0;
    for g in &groups {
        let history: Vec<&ModalityFeatures> =
            g.history.iter().map(|&i| &videos[i].features).collect();
        let targets: Vec<(&ModalityFeatures, f64)> = g
            .targets
            .iter()
            .map(|&(i, y)| (&videos[i].features, y))
            .collect();
        total += group_loss(model, &history, g.profile, &targets);
        count += targets.len();
    }
    Ok(total / count.max(1) as f64)
}
