//! Two-stage recommendation: a catalog of precomputed index vectors, exact
//! top-M coarse retrieval by dot product, then user-conditioned fine
//! ranking of the candidates.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::fusion::{
    user_query, AttentionWeights, FusionParams, FusionTrace, Modality, ModalityFeatures,
};
use crate::interest::{ProfileIndex, UserRepresentation};
use crate::model::{Model, PairScore};
use crate::numerics::{axpy, dot, sigmoid};

pub use crate::data::VideoRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    videos: Vec<VideoRecord>,
    /// Projected modality embeddings per video, zero when absent.
    projected: Vec<[Vec<f64>; 3]>,
    /// Row-major `len x d` uniform-weight fused vectors.
    index: Vec<f64>,
    width: usize,
    by_id: HashMap<u64, usize>,
    fingerprint: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub video_id: u64,
    pub coarse_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recommendation {
    pub video_id: u64,
    pub score: f64,
    pub probability: f64,
    pub weights: AttentionWeights,
}

pub fn build_catalog(videos: Vec<VideoRecord>, params: &FusionParams) -> Result<Catalog> {
    params.validate()?;
    let d = params.width();
    let mut by_id = HashMap::with_capacity(videos.len());
    for (i, v) in videos.iter().enumerate() {
        if by_id.insert(v.video_id, i).is_some() {
            return Err(Error::Catalog(format!("duplicate video id {}", v.video_id)));
        }
    }
    let mut projected = Vec::with_capacity(videos.len());
    let mut index = Vec::with_capacity(videos.len() * d);
    for v in &videos {
        let present = v.features.present();
        let e: [Vec<f64>; 3] = std::array::from_fn(|m| {
            let modality = Modality::ALL[m];
            if present[m] {
                params.projection(modality).matvec(v.features.raw(modality))
            } else {
                vec![0.0; d]
            }
        });
        let n = present.iter().filter(|&&p| p).count();
        let mut f = vec![0.0; d];
        if n > 0 {
            let w = 1.0 / n as f64;
            for m in 0..3 {
                if present[m] {
                    axpy(w, &e[m], &mut f);
                }
            }
        }
        index.extend_from_slice(&f);
        projected.push(e);
    }
    Ok(Catalog {
        videos,
        projected,
        index,
        width: d,
        by_id,
        fingerprint: params.fingerprint(),
    })
}

impl Catalog {
    /// Catalog of the videos as the model's variant sees them.
    pub fn for_model(videos: &[VideoRecord], model: &Model) -> Result<Self> {
        let masked = videos
            .iter()
            .map(|v| VideoRecord {
                video_id: v.video_id,
                features: model.mask(&v.features).into_owned(),
                topics: v.topics.clone(),
            })
            .collect();
        build_catalog(masked, &model.params().fusion)
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn videos(&self) -> &[VideoRecord] {
        &self.videos
    }

    pub fn get(&self, video_id: u64) -> Option<&VideoRecord> {
        self.by_id.get(&video_id).map(|&i| &self.videos[i])
    }

    pub fn position(&self, video_id: u64) -> Option<usize> {
        self.by_id.get(&video_id).copied()
    }

    pub fn index_vector(&self, i: usize) -> &[f64] {
        &self.index[i * self.width..(i + 1) * self.width]
    }

    pub fn projected(&self, i: usize, m: Modality) -> &[f64] {
        &self.projected[i][m.index()]
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn check_fresh(&self, params: &FusionParams) -> Result<()> {
        let current = params.fingerprint();
        if current != self.fingerprint {
            return Err(Error::StaleCatalog {
                built: self.fingerprint,
                current,
            });
        }
        Ok(())
    }
}

/// Descending score, ascending id on ties.
fn by_score_then_id(a: (f64, u64), b: (f64, u64)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Exact top-M of `dot(index, z)` over videos not in `exclude`.
pub fn retrieve(
    z: &UserRepresentation,
    catalog: &Catalog,
    m: usize,
    exclude: &HashSet<u64>,
    params: &FusionParams,
) -> Result<Vec<Candidate>> {
    if m == 0 {
        return Err(Error::Argument(
            "candidate count M must be at least 1".into(),
        ));
    }
    catalog.check_fresh(params)?;
    if z.vector.len() != catalog.width {
        return Err(Error::dim(
            "user representation",
            z.vector.len(),
            catalog.width,
        ));
    }
    let mut scored: Vec<(f64, u64)> = catalog
        .videos
        .iter()
        .enumerate()
        .filter(|(_, v)| !exclude.contains(&v.video_id))
        .map(|(i, v)| (dot(catalog.index_vector(i), &z.vector), v.video_id))
        .collect();
    if scored.len() > m {
        scored.select_nth_unstable_by(m - 1, |&a, &b| by_score_then_id(a, b));
        scored.truncate(m);
    }
    scored.sort_unstable_by(|&a, &b| by_score_then_id(a, b));
    Ok(scored
        .into_iter()
        .map(|(coarse_score, video_id)| Candidate {
            video_id,
            coarse_score,
        })
        .collect())
}

/// Fine score `dot(z, f)` with `f` fused under the user-conditioned query
/// `u + z / sqrt(d)`.
pub fn score_pair(
    z: &UserRepresentation,
    features: &ModalityFeatures,
    params: &FusionParams,
) -> Result<PairScore> {
    params.validate()?;
    if z.vector.len() != params.width() {
        return Err(Error::dim(
            "user representation",
            z.vector.len(),
            params.width(),
        ));
    }
    let dims = features.dims();
    for m in Modality::ALL {
        let w = params.projection(m);
        if features.present()[m.index()] && w.cols() != dims[m.index()] {
            return Err(Error::dim(
                format!("{} projection", m.name()),
                format!("{}x{}", w.rows(), w.cols()),
                format!("features of length {}", dims[m.index()]),
            ));
        }
    }
    let q = user_query(params.query.as_slice(), z.vector.as_slice());
    let tr = FusionTrace::forward(features, params, &q);
    Ok(PairScore {
        score: dot(&z.vector, &tr.f),
        weights: AttentionWeights::from_array(tr.alpha),
    })
}

pub fn predict_click(score: f64) -> f64 {
    sigmoid(score)
}

/// A user's request: consumed videos (oldest first) and profile.
#[derive(Clone, Debug, PartialEq)]
pub struct UserQuery {
    pub history: Vec<u64>,
    pub profile: ProfileIndex,
}

/// Recommendation plus the intermediate user representation.
pub fn recommend(
    query: &UserQuery,
    model: &Model,
    catalog: &Catalog,
    k: usize,
    m: usize,
) -> Result<Vec<Recommendation>> {
    if k > m {
        return Err(Error::Argument(format!("K ({k}) must not exceed M ({m})")));
    }
    let z = user_representation_for(query, model, catalog)?;
    let exclude: HashSet<u64> = query.history.iter().copied().collect();
    let candidates = retrieve(&z, catalog, m, &exclude, &model.params().fusion)?;
    let ids: Vec<u64> = candidates.iter().map(|c| c.video_id).collect();
    fine_rank(&z, model, catalog, &ids, k)
}

pub fn user_representation_for(
    query: &UserQuery,
    model: &Model,
    catalog: &Catalog,
) -> Result<UserRepresentation> {
    let history = history_features(&query.history, catalog)?;
    Ok(model
        .user_state(&history, query.profile, false)
        .representation)
}

pub(crate) fn history_features<'a>(
    ids: &[u64],
    catalog: &'a Catalog,
) -> Result<Vec<&'a ModalityFeatures>> {
    ids.iter()
        .map(|id| {
            catalog
                .get(*id)
                .map(|v| &v.features)
                .ok_or_else(|| Error::Lookup(format!("history video {id} is not in the catalog")))
        })
        .collect()
}

/// Fine-scores `ids` and returns the best `k`.
pub fn fine_rank(
    z: &UserRepresentation,
    model: &Model,
    catalog: &Catalog,
    ids: &[u64],
    k: usize,
) -> Result<Vec<Recommendation>> {
    let mut scored = Vec::with_capacity(ids.len());
    for &id in ids {
        let video = catalog
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("video {id} is not in the catalog")))?;
        let ps = model.score(z, &video.features);
        scored.push(Recommendation {
            video_id: id,
            score: ps.score,
            probability: predict_click(ps.score),
            weights: ps.weights,
        });
    }
    scored.sort_by(|a, b| by_score_then_id((a.score, a.video_id), (b.score, b.video_id)));
    scored.truncate(k);
    Ok(scored)
}

/// Fine ranking over every non-excluded catalog video.
pub fn exhaustive_ranking(
    query: &UserQuery,
    model: &Model,
    catalog: &Catalog,
    k: usize,
) -> Result<Vec<Recommendation>> {
    let z = user_representation_for(query, model, catalog)?;
    let exclude: HashSet<u64> = query.history.iter().copied().collect();
    let ids: Vec<u64> = catalog
        .videos()
        .iter()
        .map(|v| v.video_id)
        .filter(|id| !exclude.contains(id))
        .collect();
    fine_rank(&z, model, catalog, &ids, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{attention_weights, fuse, project_modalities};
    use crate::model::ModelConfig;
    use crate::numerics::{DenseMatrix, DenseVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_videos(n: usize, dims: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<VideoRecord> {
        (0..n)
            .map(|i| {
                let mut v = |w: usize| {
                    (0..w)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect::<Vec<f64>>()
                };
                let (a, b, c) = (v(dims[0]), v(dims[1]), v(dims[2]));
                let audio = i % 4 != 0;
                VideoRecord {
                    video_id: (n - i) as u64 * 3,
                    features: ModalityFeatures::new(Some(a), Some(b), audio.then_some(c), dims)
                        .unwrap(),
                    topics: None,
                }
            })
            .collect()
    }

    fn z_of(v: Vec<f64>) -> UserRepresentation {
        UserRepresentation {
            vector: DenseVector::new(v).unwrap(),
        }
    }

    fn identity_params(d: usize) -> FusionParams {
        FusionParams {
            w_visual: DenseMatrix::identity(d),
            w_text: DenseMatrix::identity(d),
            w_audio: DenseMatrix::identity(d),
            query: DenseVector::zeros(d),
        }
    }

    #[test]
    fn catalog_examples() {
        let p = identity_params(2);
        assert!(build_catalog(vec![], &p).unwrap().is_empty());
        let v = VideoRecord {
            video_id: 1,
            features: ModalityFeatures::new(
                Some(vec![1.0, 0.0]),
                Some(vec![0.0, 3.0]),
                None,
                [2; 3],
            )
            .unwrap(),
            topics: None,
        };
        let c = build_catalog(vec![v.clone()], &p).unwrap();
        assert_eq!(c.index_vector(0), &[0.5, 1.5]);
        let dup = build_catalog(vec![v.clone(), v], &p).unwrap_err();
        assert!(dup.to_string().contains('1'));
    }

    #[test]
    fn index_vectors_match_uniform_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = FusionParams::glorot(8, [5, 6, 4], &mut rng);
        let videos = random_videos(100, [5, 6, 4], &mut rng);
        let c = build_catalog(videos.clone(), &params).unwrap();
        for (i, v) in videos.iter().enumerate() {
            let proj = project_modalities(&v.features, &params).unwrap();
            let n = v.features.present().iter().filter(|&&p| p).count() as f64;
            let w = v.features.present().map(|p| if p { 1.0 / n } else { 0.0 });
            let f = fuse(&AttentionWeights::from_array(w), &proj).unwrap();
            for (a, b) in c.index_vector(i).iter().zip(f.vector.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn retrieval_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = FusionParams::glorot(4, [4; 3], &mut rng);
        let videos = random_videos(30, [4; 3], &mut rng);
        let c = build_catalog(videos.clone(), &params).unwrap();
        let z = z_of(vec![0.3, -0.1, 0.7, 0.2]);
        let exclude: HashSet<u64> = [videos[0].video_id, videos[3].video_id].into();
        let all = retrieve(&z, &c, 100, &exclude, &params).unwrap();
        assert_eq!(all.len(), 28);
        assert!(all
            .windows(2)
            .all(|w| w[0].coarse_score >= w[1].coarse_score));
        assert!(all.iter().all(|c| !exclude.contains(&c.video_id)));

        let zero = retrieve(&z_of(vec![0.0; 4]), &c, 5, &exclude, &params).unwrap();
        let mut ids: Vec<u64> = videos
            .iter()
            .map(|v| v.video_id)
            .filter(|i| !exclude.contains(i))
            .collect();
        ids.sort_unstable();
        assert_eq!(
            zero.iter().map(|c| c.video_id).collect::<Vec<_>>(),
            ids[..5]
        );

        let mut changed = params.clone();
        changed.query.as_mut_slice()[0] += 1.0;
        assert!(matches!(
            retrieve(&z, &c, 5, &exclude, &changed),
            Err(Error::StaleCatalog { .. })
        ));
        assert!(retrieve(&z, &c, 0, &exclude, &params).is_err());
    }

    #[test]
    fn retrieval_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = FusionParams::glorot(6, [4; 3], &mut rng);
        let videos = random_videos(200, [4; 3], &mut rng);
        let c = build_catalog(videos.clone(), &params).unwrap();
        for _ in 0..20 {
            let z = z_of((0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
            let got = retrieve(&z, &c, 20, &HashSet::new(), &params).unwrap();
            let mut oracle: Vec<(f64, u64)> = (0..videos.len())
                .map(|i| (dot(c.index_vector(i), &z.vector), videos[i].video_id))
                .collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<u64> = oracle.iter().take(20).map(|o| o.1).collect();
            assert_eq!(got.iter().map(|c| c.video_id).collect::<Vec<_>>(), want);
        }
    }

    #[test]
    fn score_pair_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = FusionParams::glorot(4, [3; 3], &mut rng);
        let feats = ModalityFeatures::new(
            Some(vec![1.0, 2.0, 3.0]),
            None,
            Some(vec![0.5, 0.5, 0.5]),
            [3; 3],
        )
        .unwrap();
        assert_eq!(
            score_pair(&z_of(vec![0.0; 4]), &feats, &params)
                .unwrap()
                .score,
            0.0
        );

        let single = ModalityFeatures::new(None, Some(vec![1.0, -1.0, 0.5]), None, [3; 3]).unwrap();
        let z = z_of(vec![0.2, 0.4, -0.3, 1.0]);
        let e = params.projection(Modality::Text).matvec(&[1.0, -1.0, 0.5]);
        let ps = score_pair(&z, &single, &params).unwrap();
        assert!((ps.score - dot(&z.vector, &e)).abs() < 1e-15);
        assert_eq!(ps.weights.as_array(), [0.0, 1.0, 0.0]);

        // compositional oracle with query u + z / 2 (d = 4)
        let proj = project_modalities(&feats, &params).unwrap();
        let q = DenseVector::new(
            params
                .query
                .iter()
                .zip(z.vector.iter())
                .map(|(a, b)| a + b / 2.0)
                .collect(),
        )
        .unwrap();
        let w = attention_weights(&q, &proj).unwrap();
        let f = fuse(&w, &proj).unwrap();
        let ps = score_pair(&z, &feats, &params).unwrap();
        assert!((ps.score - f.vector.dot(&z.vector).unwrap()).abs() < 1e-12);
        assert_eq!(ps.weights.audio > 0.0, true);

        let bad = ModalityFeatures::new(Some(vec![1.0; 5]), None, None, [5, 3, 3]).unwrap();
        assert!(score_pair(&z, &bad, &params)
            .unwrap_err()
            .to_string()
            .contains("visual"));
    }

    #[test]
    fn predict_click_examples() {
        assert_eq!(predict_click(0.0), 0.5);
        assert!((predict_click(3f64.ln()) - 0.75).abs() < 1e-15);
        let mut last = 0.0;
        for s in [-5.0, -1.0, 0.0, 2.0, 10.0, 40.0] {
            let p = predict_click(s);
            assert!(p > last && p <= 1.0);
            last = p;
        }
    }

    fn small_model(seed: u64, dims: [usize; 3]) -> Model {
        let cfg = ModelConfig {
            d: 8,
            dims,
            ff_width: 32,
            ..ModelConfig::default()
        };
        Model::new(cfg, seed).unwrap()
    }

    #[test]
    fn two_stage_equals_exhaustive_with_full_recall() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = small_model(seed, [4; 3]);
            let videos = random_videos(60, [4; 3], &mut rng);
            let catalog = Catalog::for_model(&videos, &model).unwrap();
            let history: Vec<u64> = (0..rng.random_range(0..8))
                .map(|i| videos[i * 2].video_id)
                .collect();
            let q = UserQuery {
                history,
                profile: ProfileIndex([1, 2, 0]),
            };
            let two = recommend(&q, &model, &catalog, 10, catalog.len()).unwrap();
            let one = exhaustive_ranking(&q, &model, &catalog, 10).unwrap();
            assert_eq!(two, one);
            assert!(two.iter().all(|r| !q.history.contains(&r.video_id)));
            assert!(two.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }

    #[test]
    fn recommend_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = small_model(9, [4; 3]);
        let videos = random_videos(40, [4; 3], &mut rng);
        let catalog = Catalog::for_model(&videos, &model).unwrap();
        let cold = UserQuery {
            history: vec![],
            profile: ProfileIndex([0, 0, 0]),
        };
        assert_eq!(
            recommend(&cold, &model, &catalog, 10, 20).unwrap().len(),
            10
        );
        assert!(recommend(&cold, &model, &catalog, 21, 20).is_err());
        let missing = UserQuery {
            history: vec![1_000_000],
            profile: ProfileIndex([0, 0, 0]),
        };
        assert!(matches!(
            recommend(&missing, &model, &catalog, 5, 10),
            Err(Error::Lookup(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn probability_order_equals_score_order(scores in proptest::collection::vec(-30.0f64..30.0, 1..50)) {
            let mut by_score: Vec<usize> = (0..scores.len()).collect();
            by_score.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let probs: Vec<f64> = scores.iter().map(|&s| predict_click(s)).collect();
            let mut by_prob: Vec<usize> = (0..scores.len()).collect();
            by_prob.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            prop_assert_eq!(by_score, by_prob);
        }

        #[test]
        fn ties_break_by_ascending_id(ids in proptest::collection::hash_set(0u64..1000, 1..40)) {
            let params = identity_params(2);
            let videos: Vec<VideoRecord> = ids
                .iter()
                .map(|&id| VideoRecord {
                    video_id: id,
                    features: ModalityFeatures::new(Some(vec![1.0, 1.0]), None, None, [2; 3]).unwrap(),
                    topics: None,
                })
                .collect();
            let c = build_catalog(videos, &params).unwrap();
            let got = retrieve(&z_of(vec![0.5, 0.5]), &c, ids.len(), &HashSet::new(), &params).unwrap();
            let mut sorted: Vec<u64> = ids.into_iter().collect();
            sorted.sort_unstable();
            prop_assert_eq!(got.iter().map(|c| c.video_id).collect::<Vec<_>>(), sorted);
        }
    }
}
