//! Synthetic world: latent-topic videos seen through three modalities, users
//! with topic affinities and modality reliance, and a click simulator that
//! doubles as the ground-truth oracle.
//!
//! Each video has a topic mixture `theta`. Modality `m` expresses the view
//! `rho * theta + (1 - rho) * theta_m`, where `theta_m` is a private mixture,
//! and its raw features are `L_m * view_m + sigma * noise`. A user clicks
//! with probability `sigmoid(kappa * <affinity(t), sum_m beta_m view_m> + bias)`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_jsonl, Dataset, EventContext, EventKind, LogEvent, VideoRecord};
use crate::error::{Error, Result};
use crate::fusion::ModalityFeatures;
use crate::interest::StaticProfile;
use crate::metrics::auc;
use crate::numerics::{dot, sigmoid};

pub const SECONDS_PER_DAY: i64 = 86_400;
const GENDERS: [&str; 2] = ["female", "male"];
const REGISTRATION_BUCKETS: [&str; 4] = ["lt_30d", "lt_180d", "lt_2y", "ge_2y"];
const DEVICES: [&str; 3] = ["mobile", "tablet", "desktop"];
const NETWORKS: [&str; 3] = ["wifi", "4g", "5g"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_videos: usize,
    pub n_topics: usize,
    /// Raw feature widths (visual, text, audio).
    pub dims: [usize; 3],
    /// Share of each modality's view that is the common topic mixture.
    pub rho: f64,
    pub sigma: f64,
    pub audio_missing_fraction: f64,
    pub cold_fraction: f64,
    pub drift_fraction: f64,
    pub sessions_per_user: usize,
    pub impressions_per_session: usize,
    pub kappa: f64,
    pub bias: f64,
    /// Symmetric Dirichlet parameter of topic mixtures.
    pub topic_concentration: f64,
    /// Symmetric Dirichlet parameter of modality reliance.
    pub reliance_concentration: f64,
    pub n_regions: usize,
    /// Spread of the per-region affinity prior.
    pub region_scale: f64,
    pub gender_scale: f64,
    /// Spread of the per-user deviation from the prior.
    pub individual_scale: f64,
    pub n_days: u32,
    /// Fraction of the horizon before the history/test boundary.
    pub history_fraction: f64,
    /// Fraction of the horizon at which drifting users switch affinity.
    pub drift_point: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_users: 2_000,
            n_videos: 5_000,
            n_topics: 5,
            dims: [16, 16, 16],
            rho: 0.4,
            sigma: 0.2,
            audio_missing_fraction: 0.0,
            cold_fraction: 0.2,
            drift_fraction: 0.3,
            sessions_per_user: 10,
            impressions_per_session: 16,
            kappa: 8.0,
            bias: -3.0,
            topic_concentration: 0.3,
            reliance_concentration: 0.5,
            n_regions: 8,
            region_scale: 1.0,
            gender_scale: 0.3,
            individual_scale: 0.5,
            n_days: 60,
            history_fraction: 0.7,
            drift_point: 0.5,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// Same world with every video's audio missing.
    pub fn kubd_like() -> Self {
        Self {
            audio_missing_fraction: 1.0,
            ..Self::default()
        }
    }

    /// Applies a named world profile on top of `self`: `default` keeps
    /// every video's audio, `kubd-like` drops it.
    pub fn with_profile(mut self, name: &str) -> Result<Self> {
        self.audio_missing_fraction = match name {
            "default" => Self::default().audio_missing_fraction,
            "kubd-like" | "kubd_like" => Self::kubd_like().audio_missing_fraction,
            other => {
                return Err(Error::Config(format!(
                    "unknown world profile '{other}' (expected default or kubd-like)"
                )))
            }
        };
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rho", self.rho),
            ("audio_missing_fraction", self.audio_missing_fraction),
            ("cold_fraction", self.cold_fraction),
            ("drift_fraction", self.drift_fraction),
            ("drift_point", self.drift_point),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.history_fraction > 0.0 && self.history_fraction < 1.0) {
            return Err(Error::Config("history_fraction must lie in (0, 1)".into()));
        }
        let counts = [
            ("n_users", self.n_users),
            ("n_videos", self.n_videos),
            ("n_topics", self.n_topics),
            ("sessions_per_user", self.sessions_per_user),
            ("impressions_per_session", self.impressions_per_session),
            ("n_regions", self.n_regions),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.dims.contains(&0) {
            return Err(Error::Config("feature widths must be at least 1".into()));
        }
        if (self.sessions_per_user as u64) > self.n_days as u64 {
            return Err(Error::Config(
                "sessions_per_user cannot exceed n_days (one session per day)".into(),
            ));
        }
        if self.sigma < 0.0 || self.topic_concentration <= 0.0 || self.reliance_concentration <= 0.0
        {
            return Err(Error::Config(
                "sigma must be >= 0 and concentrations > 0".into(),
            ));
        }
        Ok(())
    }

    /// Start of the test window: events before it form the history.
    pub fn split_ts(&self) -> i64 {
        (self.history_fraction * self.n_days as f64).round() as i64 * SECONDS_PER_DAY
    }

    pub fn drift_ts(&self) -> i64 {
        (self.drift_point * (self.n_days as i64 * SECONDS_PER_DAY) as f64).round() as i64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVideo {
    pub video_id: u64,
    pub topics: Vec<f64>,
    /// Topic content expressed through each modality.
    pub views: [Vec<f64>; 3],
    pub audio_present: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentUser {
    pub user_id: u64,
    pub profile: StaticProfile,
    pub affinity: Vec<f64>,
    pub post_drift_affinity: Option<Vec<f64>>,
    /// Modality reliance (visual, text, audio) on the simplex.
    pub reliance: [f64; 3],
    pub cold: bool,
}

impl LatentUser {
    pub fn drifted(&self) -> bool {
        self.post_drift_affinity.is_some()
    }

    pub fn affinity_at(&self, ts: i64, drift_ts: i64) -> &[f64] {
        match &self.post_drift_affinity {
            Some(post) if ts >= drift_ts => post,
            _ => &self.affinity,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub videos: Vec<LatentVideo>,
    pub users: Vec<LatentUser>,
    pub catalog: Vec<VideoRecord>,
}

impl World {
    pub fn profiles(&self) -> BTreeMap<u64, StaticProfile> {
        self.users
            .iter()
            .map(|u| (u.user_id, u.profile.clone()))
            .collect()
    }
}

fn dirichlet<R: Rng + ?Sized>(k: usize, concentration: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

fn normal_vec<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Affinities are relative: only differences between topics matter, so every
/// user has the same average click logit over a uniform topic mix.
fn centered(mut v: Vec<f64>) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in &mut v {
        *x -= mean;
    }
    v
}

pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.n_topics;
    let loadings: Vec<Vec<Vec<f64>>> = config
        .dims
        .iter()
        .map(|&d| (0..d).map(|_| normal_vec(k, 1.0, &mut rng)).collect())
        .collect();

    let mut videos = Vec::with_capacity(config.n_videos);
    let mut catalog = Vec::with_capacity(config.n_videos);
    for i in 0..config.n_videos {
        let video_id = i as u64;
        let topics = dirichlet(k, config.topic_concentration, &mut rng);
        let views: [Vec<f64>; 3] = std::array::from_fn(|_| {
            let own = dirichlet(k, config.topic_concentration, &mut rng);
            topics
                .iter()
                .zip(&own)
                .map(|(t, o)| config.rho * t + (1.0 - config.rho) * o)
                .collect()
        });
        let audio_present = rng.random::<f64>() >= config.audio_missing_fraction;
        let feats: Vec<Vec<f64>> = (0..3)
            .map(|m| {
                loadings[m]
                    .iter()
                    .map(|row| {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        dot(row, &views[m]) + config.sigma * noise
                    })
                    .collect()
            })
            .collect();
        let mut feats = feats.into_iter();
        let (v, t, a) = (feats.next(), feats.next(), feats.next());
        let features = ModalityFeatures::new(v, t, a.filter(|_| audio_present), config.dims)?;
        catalog.push(VideoRecord {
            video_id,
            features,
            topics: Some(topics.clone()),
        });
        videos.push(LatentVideo {
            video_id,
            topics,
            views,
            audio_present,
        });
    }

    let region_prior: Vec<Vec<f64>> = (0..config.n_regions)
        .map(|_| normal_vec(k, config.region_scale, &mut rng))
        .collect();
    let gender_effect: Vec<Vec<f64>> = (0..GENDERS.len())
        .map(|_| normal_vec(k, config.gender_scale, &mut rng))
        .collect();
    let total_scale = (config.region_scale.powi(2)
        + config.gender_scale.powi(2)
        + config.individual_scale.powi(2))
    .sqrt();
    let reliance_dist =
        Dirichlet::new([config.reliance_concentration; 3]).expect("positive concentration");

    let mut users = Vec::with_capacity(config.n_users);
    for i in 0..config.n_users {
        let gender = rng.random_range(0..GENDERS.len());
        let region = rng.random_range(0..config.n_regions);
        let bucket = rng.random_range(0..REGISTRATION_BUCKETS.len());
        let own = normal_vec(k, config.individual_scale, &mut rng);
        let affinity: Vec<f64> = centered(
            (0..k)
                .map(|j| region_prior[region][j] + gender_effect[gender][j] + own[j])
                .collect(),
        );
        let reliance = reliance_dist.sample(&mut rng);
        let cold = rng.random::<f64>() < config.cold_fraction;
        let drifted = rng.random::<f64>() < config.drift_fraction;
        let post = centered(normal_vec(k, total_scale, &mut rng));
        users.push(LatentUser {
            user_id: i as u64,
            profile: StaticProfile {
                gender: GENDERS[gender].to_string(),
                region: format!("region_{region}"),
                registration_bucket: REGISTRATION_BUCKETS[bucket].to_string(),
            },
            affinity,
            post_drift_affinity: drifted.then_some(post),
            reliance,
            cold,
        });
    }
    Ok(World {
        config: config.clone(),
        videos,
        users,
        catalog,
    })
}

/// Reliance renormalized over the modalities the video actually has.
fn effective_reliance(user: &LatentUser, video: &LatentVideo) -> [f64; 3] {
    let present = [true, true, video.audio_present];
    let mut b = [0.0; 3];
    for m in 0..3 {
        if present[m] {
            b[m] = user.reliance[m];
        }
    }
    let total: f64 = b.iter().sum();
    if total > 0.0 {
        b.map(|v| v / total)
    } else {
        let n = present.iter().filter(|&&p| p).count() as f64;
        std::array::from_fn(|m| if present[m] { 1.0 / n } else { 0.0 })
    }
}

fn click_probability_with(
    config: &WorldConfig,
    affinity: &[f64],
    reliance: [f64; 3],
    video: &LatentVideo,
) -> f64 {
    let mut mix = vec![0.0; affinity.len()];
    for m in 0..3 {
        if reliance[m] > 0.0 {
            for (x, v) in mix.iter_mut().zip(&video.views[m]) {
                *x += reliance[m] * v;
            }
        }
    }
    sigmoid(config.kappa * dot(affinity, &mix) + config.bias)
}

/// The simulator's click probability, used both to draw clicks and as the
/// Bayes-optimal scorer.
pub fn true_click_probability(
    config: &WorldConfig,
    user: &LatentUser,
    video: &LatentVideo,
    ts: i64,
) -> f64 {
    let aff = user.affinity_at(ts, config.drift_ts());
    click_probability_with(config, aff, effective_reliance(user, video), video)
}

/// Click probability computed as if the user relied on the text view alone.
pub fn text_view_click_probability(
    config: &WorldConfig,
    user: &LatentUser,
    video: &LatentVideo,
    ts: i64,
) -> f64 {
    let aff = user.affinity_at(ts, config.drift_ts());
    click_probability_with(config, aff, [0.0, 1.0, 0.0], video)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpressionTruth {
    pub user_id: u64,
    pub video_id: u64,
    pub ts: i64,
    pub p_click: f64,
    pub clicked: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedLogs {
    /// Sorted by (user_id, ts).
    pub events: Vec<LogEvent>,
    pub truth: Vec<ImpressionTruth>,
}

pub fn simulate_logs(world: &World) -> SimulatedLogs {
    let cfg = &world.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let split_day = cfg.split_ts() / SECONDS_PER_DAY;
    let per_session = cfg.impressions_per_session.min(world.videos.len());
    let mut events = Vec::new();
    let mut truth = Vec::new();
    for user in &world.users {
        let device = DEVICES[rng.random_range(0..DEVICES.len())];
        let mut days: Vec<usize> =
            sample(&mut rng, cfg.n_days as usize, cfg.sessions_per_user).into_vec();
        days.sort_unstable();
        for day in days {
            // sessions are always drawn so every user consumes the same
            // randomness; cold users just never see their history window
            let start = day as i64 * SECONDS_PER_DAY + rng.random_range(0..20 * 3600);
            let network = NETWORKS[rng.random_range(0..NETWORKS.len())];
            let picks = sample(&mut rng, world.videos.len(), per_session).into_vec();
            let draws: Vec<(f64, f64, f64, f64)> = (0..per_session)
                .map(|_| (rng.random(), rng.random(), rng.random(), rng.random()))
                .collect();
            if user.cold && (day as i64) < split_day {
                continue;
            }
            let context = EventContext {
                hour_bucket: ((start % SECONDS_PER_DAY) / (6 * 3600)) as u8,
                device: device.to_string(),
                network: network.to_string(),
            };
            for (j, (&vi, &(u_click, u_watch, u_like, u_comment))) in
                picks.iter().zip(&draws).enumerate()
            {
                let video = &world.videos[vi];
                let ts = start + 60 * j as i64;
                let p = true_click_probability(cfg, user, video, ts);
                let clicked = u_click < p;
                let event = |kind, ts, watch| LogEvent {
                    user_id: user.user_id,
                    video_id: video.video_id,
                    ts,
                    event: kind,
                    watch_time_s: watch,
                    context: context.clone(),
                };
                events.push(event(EventKind::Impression, ts, 0.0));
                if clicked {
                    let watch =
                        (60.0 * (0.2 + 0.8 * p) * (0.5 + 0.5 * u_watch) * 10.0).round() / 10.0;
                    events.push(event(EventKind::Click, ts + 1, watch));
                    if u_like < 0.3 * p {
                        events.push(event(EventKind::Like, ts + 2, 0.0));
                    }
                    if u_comment < 0.1 * p {
                        events.push(event(EventKind::Comment, ts + 3, 0.0));
                    }
                }
                truth.push(ImpressionTruth {
                    user_id: user.user_id,
                    video_id: video.video_id,
                    ts,
                    p_click: p,
                    clicked,
                });
            }
        }
    }
    SimulatedLogs { events, truth }
}

/// World plus its logs as a model-visible dataset.
pub fn dataset(world: &World, logs: &SimulatedLogs) -> Dataset {
    let catalog = world
        .catalog
        .iter()
        .map(|v| VideoRecord {
            topics: None,
            ..v.clone()
        })
        .collect();
    Dataset::new(catalog, logs.events.clone(), world.profiles())
}

/// Counts in the layout of a dataset statistics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSummary {
    pub n_users: usize,
    pub n_videos: usize,
    pub impressions: usize,
    pub clicks: usize,
    pub click_rate: f64,
    pub avg_sequence_length: f64,
    pub audio_missing: usize,
    pub cold_users: usize,
    pub drifted_users: usize,
    /// AUC of the true click probability over test-window impressions.
    pub bayes_test_auc: Option<f64>,
}

pub fn summarize(world: &World, logs: &SimulatedLogs) -> WorldSummary {
    let clicks = logs.truth.iter().filter(|t| t.clicked).count();
    let split = world.config.split_ts();
    let test: Vec<(f64, bool)> = logs
        .truth
        .iter()
        .filter(|t| t.ts >= split)
        .map(|t| (t.p_click, t.clicked))
        .collect();
    WorldSummary {
        n_users: world.users.len(),
        n_videos: world.videos.len(),
        impressions: logs.truth.len(),
        clicks,
        click_rate: clicks as f64 / logs.truth.len().max(1) as f64,
        avg_sequence_length: clicks as f64 / world.users.len().max(1) as f64,
        audio_missing: world.videos.iter().filter(|v| !v.audio_present).count(),
        cold_users: world.users.iter().filter(|u| u.cold).count(),
        drifted_users: world.users.iter().filter(|u| u.drifted()).count(),
        bayes_test_auc: auc(&test).ok(),
    }
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum TruthLine<'a> {
    User(&'a LatentUser),
    Video(&'a LatentVideo),
    Impression(&'a ImpressionTruth),
}

/// Latents and per-impression true probabilities, for test harnesses only.
pub fn write_ground_truth(path: &Path, world: &World, logs: &SimulatedLogs) -> Result<()> {
    let lines = world
        .users
        .iter()
        .map(TruthLine::User)
        .chain(world.videos.iter().map(TruthLine::Video))
        .chain(logs.truth.iter().map(TruthLine::Impression));
    write_jsonl(path, lines)
}
