//! The full recommender: configuration, ablation variants, the parameter set,
//! and inference (user state and per-video scoring).

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    user_query, AttentionWeights, FusedEmbedding, FusionParams, FusionTrace, ModalityFeatures,
};
use crate::interest::{
    combine_forward, mean_pool, DynamicInterestVector, EncoderConfig, InterestFusionParams,
    ProfileIndex, ProfileSchema, SequenceEncoding, StaticProfileVector, UserRepresentation,
};
use crate::numerics::{
    dot, sigmoid, sinusoidal_positions, DenseMatrix, DenseVector, TransformerBlockParams,
};

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AblationVariant {
    #[default]
    Full,
    NoAudio,
    NoSeq,
    NoStatic,
    TextOnly,
}

impl AblationVariant {
    /// Report order.
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::NoAudio,
        AblationVariant::NoSeq,
        AblationVariant::NoStatic,
        AblationVariant::TextOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "FULL",
            AblationVariant::NoAudio => "NO_AUDIO",
            AblationVariant::NoSeq => "NO_SEQ",
            AblationVariant::NoStatic => "NO_STATIC",
            AblationVariant::TextOnly => "TEXT_ONLY",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Full => "MMT (Full Model)",
            AblationVariant::NoAudio => "w/o Audio",
            AblationVariant::NoSeq => "w/o Sequence Modeling",
            AblationVariant::NoStatic => "w/o Static Profile",
            AblationVariant::TextOnly => "Text-Only (No Fusion)",
        }
    }

    /// Modalities the variant may see (visual, text, audio).
    pub fn modality_mask(self) -> [bool; 3] {
        match self {
            AblationVariant::NoAudio => [true, true, false],
            AblationVariant::TextOnly => [false, true, false],
            _ => [true; 3],
        }
    }

    pub fn uses_sequence_encoder(self) -> bool {
        self != AblationVariant::NoSeq
    }

    pub fn uses_profile(self) -> bool {
        self != AblationVariant::NoStatic
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant '{s}' (expected one of FULL, NO_AUDIO, NO_SEQ, NO_STATIC, TEXT_ONLY)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    /// Raw feature widths (visual, text, audio).
    pub dims: [usize; 3],
    pub heads: usize,
    pub ff_width: usize,
    pub encoder: EncoderConfig,
    pub variant: AblationVariant,
    pub profile_schema: ProfileSchema,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 16,
            dims: [16, 16, 16],
            heads: 2,
            ff_width: 64,
            encoder: EncoderConfig::default(),
            variant: AblationVariant::Full,
            profile_schema: ProfileSchema::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 2 != 0 {
            return Err(Error::Config(format!(
                "model width must be even and positive, got {}",
                self.d
            )));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide model width {}",
                self.heads, self.d
            )));
        }
        if self.ff_width == 0 || self.dims.contains(&0) || self.encoder.max_len == 0 {
            return Err(Error::Config(
                "feature widths, feed-forward width and max_len must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Every trainable tensor of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub fusion: FusionParams,
    pub block: TransformerBlockParams,
    pub interest: InterestFusionParams,
}

impl ModelParams {
    /// Initialization is independent of the variant, so all variants trained
    /// with one seed start from the same point.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fusion = FusionParams::glorot(config.d, config.dims, &mut rng);
        let block =
            TransformerBlockParams::glorot(config.d, config.heads, config.ff_width, &mut rng);
        let interest = InterestFusionParams::glorot(config.d, &config.profile_schema, &mut rng);
        Self {
            fusion,
            block,
            interest,
        }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            fusion: FusionParams::zeros(config.d, config.dims),
            block: TransformerBlockParams::zeros(config.d, config.heads, config.ff_width),
            interest: InterestFusionParams::zeros(config.d, &config.profile_schema),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut t = self.fusion.tensors();
        t.extend(self.block.tensors());
        t.extend(self.interest.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut t = self.fusion.tensors_mut();
        t.extend(self.block.tensors_mut());
        t.extend(self.interest.tensors_mut());
        t
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (_, t) in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::dim("flat parameter vector", flat.len(), self.len()));
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Hash of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.tensors() {
            for v in t {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let reference = ModelParams::zeros(config);
        for ((name, a), (_, b)) in self.tensors().iter().zip(reference.tensors()) {
            if a.len() != b.len() {
                return Err(Error::dim(*name, a.len(), b.len()));
            }
        }
        self.fusion.validate()?;
        self.block.validate()?;
        self.interest.validate()
    }
}

/// Everything derived from a user's history and profile.
#[derive(Clone, Debug, PartialEq)]
pub struct UserState {
    pub interest: DynamicInterestVector,
    pub profile: StaticProfileVector,
    pub representation: UserRepresentation,
}

/// Fine-ranking outcome for one (user, video) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairScore {
    pub score: f64,
    pub weights: AttentionWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
    positions: DenseMatrix,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Self::from_parts(config, params)
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        let positions = sinusoidal_positions(config.encoder.max_len, config.d)?;
        Ok(Self {
            config,
            params,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn variant(&self) -> AblationVariant {
        self.config.variant
    }

    pub(crate) fn positions(&self) -> &DenseMatrix {
        &self.positions
    }

    /// Applies the variant's modality mask.
    pub fn mask<'a>(&self, feats: &'a ModalityFeatures) -> Cow<'a, ModalityFeatures> {
        let keep = self.config.variant.modality_mask();
        let present = feats.present();
        if (0..3).all(|m| keep[m] || !present[m]) {
            Cow::Borrowed(feats)
        } else {
            Cow::Owned(feats.masked(keep))
        }
    }

    /// Fused embedding of a consumed video, weighted by the global query.
    pub fn history_embedding(&self, feats: &ModalityFeatures) -> FusedEmbedding {
        let feats = self.mask(feats);
        let tr = FusionTrace::forward(
            &feats,
            &self.params.fusion,
            self.params.fusion.query.as_slice(),
        );
        FusedEmbedding {
            vector: DenseVector::from_vec_unchecked(tr.f),
            weights: AttentionWeights::from_array(tr.alpha),
        }
    }

    /// Runs the user side of the model. `history` is oldest first; only the
    /// most recent `max_len` items are used.
    pub fn user_state(
        &self,
        history: &[&ModalityFeatures],
        profile: ProfileIndex,
        trace: bool,
    ) -> UserState {
        let max_len = self.config.encoder.max_len;
        let recent = &history[history.len().saturating_sub(max_len)..];
        let u = self.params.fusion.query.as_slice();
        let fused: Vec<Vec<f64>> = recent
            .iter()
            .map(|f| FusionTrace::forward(&self.mask(f), &self.params.fusion, u).f)
            .collect();
        let refs: Vec<&[f64]> = fused.iter().map(Vec::as_slice).collect();
        let interest = if self.config.variant.uses_sequence_encoder() {
            let enc = SequenceEncoding::forward(
                &refs,
                &self.params.block,
                &self.params.interest,
                &self.positions,
                self.config.encoder.pooling,
            );
            let attention_trace = match (&enc.cache, trace) {
                (Some(cache), true) => Some(
                    (0..cache.heads())
                        .map(|h| {
                            DenseMatrix::from_vec_unchecked(
                                cache.len(),
                                cache.len(),
                                cache.attention(h).to_vec(),
                            )
                        })
                        .collect(),
                ),
                _ => None,
            };
            DynamicInterestVector {
                vector: DenseVector::from_vec_unchecked(enc.h),
                attention_trace,
            }
        } else {
            DynamicInterestVector {
                vector: DenseVector::from_vec_unchecked(mean_pool(&refs, &self.params.interest)),
                attention_trace: None,
            }
        };
        let s = if self.config.variant.uses_profile() {
            self.params.interest.profile_vector(profile)
        } else {
            vec![0.0; self.config.d]
        };
        let (z, _, _) = combine_forward(&interest.vector, &s, &self.params.interest);
        UserState {
            interest,
            profile: StaticProfileVector {
                vector: DenseVector::from_vec_unchecked(s),
            },
            representation: UserRepresentation {
                vector: DenseVector::from_vec_unchecked(z),
            },
        }
    }

    /// Fine score `dot(z, f)` where `f` is fused with the user-conditioned
    /// query `u + z / sqrt(d)`.
    pub fn score(&self, z: &UserRepresentation, feats: &ModalityFeatures) -> PairScore {
        let q = self.ranking_query(z.vector.as_slice());
        let tr = FusionTrace::forward(&self.mask(feats), &self.params.fusion, &q);
        PairScore {
            score: dot(z.vector.as_slice(), &tr.f),
            weights: AttentionWeights::from_array(tr.alpha),
        }
    }

    pub fn click_probability(&self, z: &UserRepresentation, feats: &ModalityFeatures) -> f64 {
        sigmoid(self.score(z, feats).score)
    }

    pub(crate) fn ranking_query(&self, z: &[f64]) -> Vec<f64> {
        user_query(self.params.fusion.query.as_slice(), z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{attention_weights, fuse, project_modalities};
    use crate::interest::{encode_sequence, BehaviorItem, BehaviorSequence};
    use rand::Rng;

    fn random_feats(rng: &mut ChaCha8Rng, dims: [usize; 3], audio: bool) -> ModalityFeatures {
        let mut v = |n: usize| {
            (0..n)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        let a = v(dims[0]);
        let b = v(dims[1]);
        let c = v(dims[2]);
        ModalityFeatures::new(Some(a), Some(b), audio.then_some(c), dims).unwrap()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AblationVariant::ALL {
            assert_eq!(v.name().parse::<AblationVariant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("no-audio".parse::<AblationVariant>().is_ok());
        assert!("BOGUS".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn init_is_variant_independent_and_seeded() {
        let mut cfg = ModelConfig::default();
        let a = ModelParams::init(&cfg, 7);
        cfg.variant = AblationVariant::TextOnly;
        assert_eq!(a, ModelParams::init(&cfg, 7));
        assert_ne!(a, ModelParams::init(&cfg, 8));
    }

    #[test]
    fn flatten_round_trips() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, 1);
        let mut q = ModelParams::zeros(&cfg);
        q.assign_flat(&p.flatten()).unwrap();
        assert_eq!(p, q);
        assert!(q.assign_flat(&[1.0]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        cfg.heads = 2;
        cfg.d = 7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn user_state_matches_public_operations() {
        let cfg = ModelConfig::default();
        let model = Model::new(cfg.clone(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hist: Vec<ModalityFeatures> = (0..12)
            .map(|i| random_feats(&mut rng, cfg.dims, i % 3 != 0))
            .collect();
        let refs: Vec<&ModalityFeatures> = hist.iter().collect();
        let profile = ProfileIndex([1, 2, 3]);
        let state = model.user_state(&refs, profile, true);

        let items = hist
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let p = &model.params().fusion;
                let proj = project_modalities(f, p).unwrap();
                let w = attention_weights(&p.query, &proj).unwrap();
                BehaviorItem {
                    video_id: i as u64,
                    ts: i as i64,
                    embedding: fuse(&w, &proj).unwrap(),
                    liked: false,
                    commented: false,
                    watch_time_s: 0.0,
                }
            })
            .collect();
        let seq = BehaviorSequence::new(items).unwrap();
        let h = encode_sequence(
            &seq,
            &model.params().block,
            &model.params().interest,
            &sinusoidal_positions(50, cfg.d).unwrap(),
            cfg.encoder,
            true,
        )
        .unwrap();
        for (a, b) in h.vector.iter().zip(state.interest.vector.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(h.attention_trace.as_ref().unwrap().len(), 2);
        assert!(state.representation.vector.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn variants_change_only_their_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = [16; 3];
        let hist: Vec<ModalityFeatures> =
            (0..6).map(|_| random_feats(&mut rng, dims, true)).collect();
        let refs: Vec<&ModalityFeatures> = hist.iter().collect();
        let target = random_feats(&mut rng, dims, true);
        let profile = ProfileIndex([1, 1, 1]);
        let model_for = |variant| {
            let cfg = ModelConfig {
                variant,
                ..ModelConfig::default()
            };
            Model::new(cfg, 9).unwrap()
        };
        let full = model_for(AblationVariant::Full);
        let no_static = model_for(AblationVariant::NoStatic);
        let s = no_static.user_state(&refs, profile, false);
        assert!(s.profile.vector.iter().all(|&v| v == 0.0));
        assert_eq!(s.interest, full.user_state(&refs, profile, false).interest);

        let text = model_for(AblationVariant::TextOnly);
        let st = text.user_state(&refs, profile, false);
        let ps = text.score(&st.representation, &target);
        assert_eq!(ps.weights.as_array(), [0.0, 1.0, 0.0]);

        let no_audio = model_for(AblationVariant::NoAudio);
        let sa = no_audio.user_state(&refs, profile, false);
        assert_eq!(
            no_audio.score(&sa.representation, &target).weights.audio,
            0.0
        );

        let no_seq = model_for(AblationVariant::NoSeq);
        let sn = no_seq.user_state(&refs, profile, true);
        assert!(sn.interest.attention_trace.is_none());
    }

    #[test]
    fn empty_history_uses_learned_vector() {
        let model = Model::new(ModelConfig::default(), 5).unwrap();
        let st = model.user_state(&[], ProfileIndex([0, 0, 0]), false);
        assert_eq!(st.interest.vector, model.params().interest.empty_history);
    }
}
