//! User interest representation: a transformer over the fused embeddings of
//! recently consumed videos (dynamic interest `h`), a sum of categorical
//! profile embeddings (static vector `s`), and the ReLU fusion layer
//! `z = ReLU(W_c [h; s] + b)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusedEmbedding;
use crate::numerics::{
    axpy, block_backward, block_forward, BlockCache, BlockGrads, DenseMatrix, DenseVector,
    TransformerBlockParams,
};

/// Reserved index of the unknown token in every vocabulary.
pub const UNK: usize = 0;

/// A declared categorical vocabulary. Index 0 is reserved for unknowns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub values: Vec<String>,
}

impl Vocabulary {
    pub fn new<S: Into<String>>(values: impl IntoIterator<Item = S>) -> Self {
        Self {
            values: values.into_iter().map(Into::into).collect(),
        }
    }

    /// Table rows needed, including UNK.
    pub fn table_len(&self) -> usize {
        self.values.len() + 1
    }

    pub fn index(&self, value: &str) -> usize {
        self.values
            .iter()
            .position(|v| v == value)
            .map_or(UNK, |i| i + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileSchema {
    pub gender: Vocabulary,
    pub region: Vocabulary,
    pub registration_bucket: Vocabulary,
}

impl Default for ProfileSchema {
    fn default() -> Self {
        Self {
            gender: Vocabulary::new(["female", "male"]),
            region: Vocabulary::new((0..8).map(|i| format!("region_{i}"))),
            registration_bucket: Vocabulary::new(["lt_30d", "lt_180d", "lt_2y", "ge_2y"]),
        }
    }
}

impl ProfileSchema {
    /// Vocabularies made of the distinct values seen, sorted.
    pub fn from_profiles<'a>(profiles: impl IntoIterator<Item = &'a StaticProfile>) -> Self {
        let mut fields: [std::collections::BTreeSet<&str>; 3] = Default::default();
        for p in profiles {
            fields[0].insert(&p.gender);
            fields[1].insert(&p.region);
            fields[2].insert(&p.registration_bucket);
        }
        let [g, r, b] = fields;
        Self {
            gender: Vocabulary::new(g),
            region: Vocabulary::new(r),
            registration_bucket: Vocabulary::new(b),
        }
    }

    pub fn resolve(&self, profile: &StaticProfile) -> ProfileIndex {
        ProfileIndex([
            self.gender.index(&profile.gender),
            self.region.index(&profile.region),
            self.registration_bucket.index(&profile.registration_bucket),
        ])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StaticProfile {
    pub gender: String,
    pub region: String,
    pub registration_bucket: String,
}

/// Vocabulary indices of a profile (gender, region, registration bucket).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ProfileIndex(pub [usize; 3]);

#[derive(Clone, Debug, PartialEq)]
pub struct StaticProfileVector {
    pub vector: DenseVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Mean over valid positions.
    #[default]
    Mean,
    /// Output row of the most recent item.
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterestFusionParams {
    /// d x 2d
    pub combine: DenseMatrix,
    pub bias: DenseVector,
    /// Dynamic interest used when the history is empty.
    pub empty_history: DenseVector,
    pub gender_table: DenseMatrix,
    pub region_table: DenseMatrix,
    pub registration_table: DenseMatrix,
}

impl InterestFusionParams {
    pub fn glorot<R: Rng + ?Sized>(d: usize, schema: &ProfileSchema, rng: &mut R) -> Self {
        let limit = (6.0 / (d + 1) as f64).sqrt();
        Self {
            combine: DenseMatrix::glorot(d, 2 * d, rng),
            bias: DenseVector::zeros(d),
            empty_history: DenseVector::from_vec_unchecked(
                (0..d).map(|_| rng.random_range(-limit..limit)).collect(),
            ),
            gender_table: DenseMatrix::glorot(schema.gender.table_len(), d, rng),
            region_table: DenseMatrix::glorot(schema.region.table_len(), d, rng),
            registration_table: DenseMatrix::glorot(schema.registration_bucket.table_len(), d, rng),
        }
    }

    pub fn zeros(d: usize, schema: &ProfileSchema) -> Self {
        Self {
            combine: DenseMatrix::zeros(d, 2 * d),
            bias: DenseVector::zeros(d),
            empty_history: DenseVector::zeros(d),
            gender_table: DenseMatrix::zeros(schema.gender.table_len(), d),
            region_table: DenseMatrix::zeros(schema.region.table_len(), d),
            registration_table: DenseMatrix::zeros(schema.registration_bucket.table_len(), d),
        }
    }

    pub fn width(&self) -> usize {
        self.bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        if self.combine.shape() != (d, 2 * d) {
            return Err(Error::dim(
                "fusion layer W_c",
                format!("{:?}", self.combine.shape()),
                format!("({d}, {})", 2 * d),
            ));
        }
        if self.empty_history.len() != d {
            return Err(Error::dim(
                "empty-history vector",
                self.empty_history.len(),
                d,
            ));
        }
        for t in [
            &self.gender_table,
            &self.region_table,
            &self.registration_table,
        ] {
            if t.cols() != d {
                return Err(Error::dim("profile table width", t.cols(), d));
            }
        }
        Ok(())
    }

    fn tables(&self) -> [&DenseMatrix; 3] {
        [
            &self.gender_table,
            &self.region_table,
            &self.registration_table,
        ]
    }

    fn tables_mut(&mut self) -> [&mut DenseMatrix; 3] {
        [
            &mut self.gender_table,
            &mut self.region_table,
            &mut self.registration_table,
        ]
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("interest.combine", self.combine.as_slice()),
            ("interest.bias", self.bias.as_slice()),
            ("interest.empty_history", self.empty_history.as_slice()),
            ("interest.gender_table", self.gender_table.as_slice()),
            ("interest.region_table", self.region_table.as_slice()),
            (
                "interest.registration_table",
                self.registration_table.as_slice(),
            ),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("interest.combine", self.combine.as_mut_slice()),
            ("interest.bias", self.bias.as_mut_slice()),
            ("interest.empty_history", self.empty_history.as_mut_slice()),
            ("interest.gender_table", self.gender_table.as_mut_slice()),
            ("interest.region_table", self.region_table.as_mut_slice()),
            (
                "interest.registration_table",
                self.registration_table.as_mut_slice(),
            ),
        ]
    }

    /// Sum of the three field embeddings.
    pub(crate) fn profile_vector(&self, idx: ProfileIndex) -> Vec<f64> {
        let mut s = vec![0.0; self.width()];
        for (table, &i) in self.tables().into_iter().zip(&idx.0) {
            axpy(1.0, table.row(i.min(table.rows() - 1)), &mut s);
        }
        s
    }

    pub(crate) fn profile_backward(
        &self,
        idx: ProfileIndex,
        ds: &[f64],
        grads: &mut InterestFusionParams,
    ) {
        for (table, &i) in grads.tables_mut().into_iter().zip(&idx.0) {
            let row = i.min(table.rows() - 1);
            axpy(1.0, ds, table.row_mut(row));
        }
    }
}

/// One consumed video in a user's history.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorItem {
    pub video_id: u64,
    pub ts: i64,
    pub embedding: FusedEmbedding,
    pub liked: bool,
    pub commented: bool,
    pub watch_time_s: f64,
}

/// Time-ordered consumed videos of one user.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct BehaviorSequence {
    items: Vec<BehaviorItem>,
}

impl BehaviorSequence {
    pub fn new(items: Vec<BehaviorItem>) -> Result<Self> {
        if items.windows(2).any(|w| w[1].ts < w[0].ts) {
            return Err(Error::Argument(
                "behavior sequence timestamps must be nondecreasing".into(),
            ));
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[BehaviorItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// The most recent `max_len` items.
    pub fn recent(&self, max_len: usize) -> &[BehaviorItem] {
        &self.items[self.items.len().saturating_sub(max_len)..]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicInterestVector {
    pub vector: DenseVector,
    /// Per-head attention matrices over the encoded items (oldest first).
    pub attention_trace: Option<Vec<DenseMatrix>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserRepresentation {
    pub vector: DenseVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub max_len: usize,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            max_len: 50,
            pooling: Pooling::Mean,
        }
    }
}

pub fn embed_profile(idx: ProfileIndex, params: &InterestFusionParams) -> StaticProfileVector {
    StaticProfileVector {
        vector: DenseVector::from_vec_unchecked(params.profile_vector(idx)),
    }
}

/// Transformer encoding of the most recent `max_len` fused embeddings.
///
/// Positions count backwards from the newest item (newest = position 0), so
/// recency has the same encoding regardless of history length. An empty
/// history yields the learned empty-history vector.
pub fn encode_sequence(
    seq: &BehaviorSequence,
    block: &TransformerBlockParams,
    interest: &InterestFusionParams,
    positions: &DenseMatrix,
    config: EncoderConfig,
    trace: bool,
) -> Result<DynamicInterestVector> {
    block.validate()?;
    let d = block.d();
    if interest.width() != d || positions.cols() != d {
        return Err(Error::dim("encoder width", interest.width(), d));
    }
    let recent = seq.recent(config.max_len);
    if recent.len() > positions.rows() {
        return Err(Error::dim(
            "positional table rows",
            positions.rows(),
            recent.len(),
        ));
    }
    let fused: Vec<&[f64]> = recent
        .iter()
        .map(|it| it.embedding.vector.as_slice())
        .collect();
    let enc = SequenceEncoding::forward(&fused, block, interest, positions, config.pooling);
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
    Ok(DynamicInterestVector {
        vector: DenseVector::new(enc.h)?,
        attention_trace,
    })
}

/// Order-free ablation: unweighted mean of the most recent `max_len` fused
/// embeddings, summed in a canonical order so any permutation of the history
/// gives a bit-identical result.
pub fn mean_pool_sequence(
    seq: &BehaviorSequence,
    interest: &InterestFusionParams,
    max_len: usize,
) -> DynamicInterestVector {
    let fused: Vec<&[f64]> = seq
        .recent(max_len)
        .iter()
        .map(|it| it.embedding.vector.as_slice())
        .collect();
    DynamicInterestVector {
        vector: DenseVector::from_vec_unchecked(mean_pool(&fused, interest)),
        attention_trace: None,
    }
}

pub(crate) fn mean_pool(fused: &[&[f64]], interest: &InterestFusionParams) -> Vec<f64> {
    if fused.is_empty() {
        return interest.empty_history.as_slice().to_vec();
    }
    let mut order: Vec<usize> = (0..fused.len()).collect();
    order.sort_by(|&a, &b| {
        fused[a]
            .iter()
            .zip(fused[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut h = vec![0.0; interest.width()];
    for i in order {
        axpy(1.0, fused[i], &mut h);
    }
    let inv = 1.0 / fused.len() as f64;
    h.iter_mut().for_each(|v| *v *= inv);
    h
}

/// `z = ReLU(W_c [h; s] + b)` with `h` first in the concatenation.
pub fn user_representation(
    h: &DynamicInterestVector,
    s: &StaticProfileVector,
    params: &InterestFusionParams,
) -> Result<UserRepresentation> {
    let d = params.width();
    if h.vector.len() != d || s.vector.len() != d {
        return Err(Error::dim(
            "user representation inputs",
            format!("h {} / s {}", h.vector.len(), s.vector.len()),
            format!("{d} / {d}"),
        ));
    }
    params.validate()?;
    let (z, _, _) = combine_forward(&h.vector, &s.vector, params);
    Ok(UserRepresentation {
        vector: DenseVector::from_vec_unchecked(z),
    })
}

/// Returns `(z, pre_activation, concat)`.
pub(crate) fn combine_forward(
    h: &[f64],
    s: &[f64],
    params: &InterestFusionParams,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut concat = Vec::with_capacity(h.len() + s.len());
    concat.extend_from_slice(h);
    concat.extend_from_slice(s);
    let mut pre = params.combine.matvec(&concat);
    axpy(1.0, &params.bias, &mut pre);
    let z = pre.iter().map(|&v| v.max(0.0)).collect();
    (z, pre, concat)
}

/// Returns `(dh, ds)` and accumulates `W_c`, `b` gradients.
pub(crate) fn combine_backward(
    dz: &[f64],
    pre: &[f64],
    concat: &[f64],
    params: &InterestFusionParams,
    grads: &mut InterestFusionParams,
) -> (Vec<f64>, Vec<f64>) {
    let d = params.width();
    let dpre: Vec<f64> = dz
        .iter()
        .zip(pre)
        .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
        .collect();
    grads.combine.add_outer(1.0, &dpre, concat);
    axpy(1.0, &dpre, grads.bias.as_mut_slice());
    let mut dc = vec![0.0; 2 * d];
    params.combine.matvec_t_acc(&dpre, &mut dc);
    let ds = dc.split_off(d);
    (dc, ds)
}

/// Forward state of the transformer encoder over a fused sequence.
pub(crate) struct SequenceEncoding {
    pub h: Vec<f64>,
    pub cache: Option<BlockCache>,
    pooling: Pooling,
}

impl SequenceEncoding {
    /// `fused` is oldest-first and already truncated.
    pub fn forward(
        fused: &[&[f64]],
        block: &TransformerBlockParams,
        interest: &InterestFusionParams,
        positions: &DenseMatrix,
        pooling: Pooling,
    ) -> Self {
        let n = fused.len();
        if n == 0 {
            return Self {
                h: interest.empty_history.as_slice().to_vec(),
                cache: None,
                pooling,
            };
        }
        let d = block.d();
        let mut x = Vec::with_capacity(n * d);
        for (i, f) in fused.iter().enumerate() {
            let pos = positions.row(n - 1 - i);
            x.extend(f.iter().zip(pos).map(|(a, b)| a + b));
        }
        let cache = block_forward(&x, n, block);
        let out = cache.output();
        let h = match pooling {
            Pooling::Mean => {
                let mut h = vec![0.0; d];
                for row in out.chunks_exact(d) {
                    axpy(1.0, row, &mut h);
                }
                let inv = 1.0 / n as f64;
                h.iter_mut().for_each(|v| *v *= inv);
                h
            }
            Pooling::Last => out[(n - 1) * d..].to_vec(),
        };
        Self {
            h,
            cache: Some(cache),
            pooling,
        }
    }

    /// Returns the gradient with respect to each fused input (oldest first),
    /// or accumulates into the empty-history vector when there was none.
    pub fn backward(
        &self,
        dh: &[f64],
        block: &TransformerBlockParams,
        block_grads: &mut BlockGrads,
        interest_grads: &mut InterestFusionParams,
    ) -> Vec<f64> {
        let Some(cache) = &self.cache else {
            axpy(1.0, dh, interest_grads.empty_history.as_mut_slice());
            return Vec::new();
        };
        let n = cache.len();
        let d = cache.width();
        let mut d_out = vec![0.0; n * d];
        match self.pooling {
            Pooling::Mean => {
                let inv = 1.0 / n as f64;
                for row in d_out.chunks_exact_mut(d) {
                    axpy(inv, dh, row);
                }
            }
            Pooling::Last => d_out[(n - 1) * d..].copy_from_slice(dh),
        }
        // positions are constants, so dX is the gradient of each fused input
        block_backward(cache, block, &d_out, block_grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::AttentionWeights;
    use crate::numerics::{sinusoidal_positions, LAYER_NORM_EPS};
    use approx::assert_abs_diff_eq;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn item(id: u64, ts: i64, v: Vec<f64>) -> BehaviorItem {
        BehaviorItem {
            video_id: id,
            ts,
            embedding: FusedEmbedding {
                vector: DenseVector::new(v).unwrap(),
                weights: AttentionWeights::from_array([1.0, 0.0, 0.0]),
            },
            liked: false,
            commented: false,
            watch_time_s: 10.0,
        }
    }

    fn random_seq(n: usize, d: usize, rng: &mut ChaCha8Rng) -> BehaviorSequence {
        BehaviorSequence::new(
            (0..n)
                .map(|i| {
                    item(
                        i as u64,
                        i as i64,
                        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn setup(
        d: usize,
        seed: u64,
    ) -> (
        TransformerBlockParams,
        InterestFusionParams,
        DenseMatrix,
        ChaCha8Rng,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = TransformerBlockParams::glorot(d, 2, 4 * d, &mut rng);
        let interest = InterestFusionParams::glorot(d, &ProfileSchema::default(), &mut rng);
        (block, interest, sinusoidal_positions(50, d).unwrap(), rng)
    }

    #[test]
    fn profile_embedding_examples() {
        let schema = ProfileSchema::default();
        let zero = InterestFusionParams::zeros(4, &schema);
        let p = StaticProfile {
            gender: "female".into(),
            region: "region_3".into(),
            registration_bucket: "lt_2y".into(),
        };
        assert_eq!(
            embed_profile(schema.resolve(&p), &zero).vector.as_slice(),
            &[0.0; 4]
        );

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = InterestFusionParams::glorot(4, &schema, &mut rng);
        let a = embed_profile(schema.resolve(&p), &params);
        let b = embed_profile(schema.resolve(&p.clone()), &params);
        assert_eq!(a, b);

        // scaled basis rows: gender -> e0 * 1, region -> e1 * 10, bucket -> e2 * 100
        let mut basis = InterestFusionParams::zeros(4, &schema);
        for r in 0..basis.gender_table.rows() {
            basis.gender_table.row_mut(r)[0] = r as f64;
        }
        for r in 0..basis.region_table.rows() {
            basis.region_table.row_mut(r)[1] = 10.0 * r as f64;
        }
        for r in 0..basis.registration_table.rows() {
            basis.registration_table.row_mut(r)[2] = 100.0 * r as f64;
        }
        let s = embed_profile(schema.resolve(&p), &basis);
        assert_eq!(s.vector.as_slice(), &[1.0, 40.0, 300.0, 0.0]);

        let unknown = StaticProfile {
            gender: "other".into(),
            region: "mars".into(),
            registration_bucket: "?".into(),
        };
        assert_eq!(schema.resolve(&unknown), ProfileIndex([UNK; 3]));
    }

    #[test]
    fn empty_sequence_returns_learned_vector() {
        let (block, interest, pos, _) = setup(8, 1);
        let h = encode_sequence(
            &BehaviorSequence::default(),
            &block,
            &interest,
            &pos,
            EncoderConfig::default(),
            true,
        )
        .unwrap();
        assert_eq!(h.vector, interest.empty_history);
        assert!(h.attention_trace.is_none());
    }

    #[test]
    fn single_item_matches_hand_trace() {
        let d = 8;
        let (mut block, interest, pos, mut rng) = setup(d, 2);
        block.ff_in = DenseMatrix::zeros(4 * d, d);
        block.ff_out = DenseMatrix::zeros(d, 4 * d);
        let f: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let seq = BehaviorSequence::new(vec![item(9, 0, f.clone())]).unwrap();
        let h = encode_sequence(
            &seq,
            &block,
            &interest,
            &pos,
            EncoderConfig::default(),
            false,
        )
        .unwrap();

        // x = f + position 0; one key so attention returns Wo Wv x
        let x: Vec<f64> = f.iter().zip(pos.row(0)).map(|(a, b)| a + b).collect();
        let wv_x: Vec<f64> = (0..d)
            .map(|r| (0..d).map(|c| block.wv.get(r, c) * x[c]).sum())
            .collect();
        let att: Vec<f64> = (0..d)
            .map(|r| (0..d).map(|c| block.wo.get(r, c) * wv_x[c]).sum())
            .collect();
        let ln = |r: &[f64]| -> Vec<f64> {
            let mu = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            r.iter()
                .map(|v| (v - mu) / (var + LAYER_NORM_EPS).sqrt())
                .collect()
        };
        let r1: Vec<f64> = x.iter().zip(&att).map(|(a, b)| a + b).collect();
        let y1 = ln(&r1);
        let y2 = ln(&y1);
        for j in 0..d {
            assert_abs_diff_eq!(h.vector[j], y2[j], epsilon = 1e-10);
        }
    }

    #[test]
    fn only_recent_items_matter() {
        let (block, interest, pos, mut rng) = setup(8, 3);
        let seq = random_seq(60, 8, &mut rng);
        let base = encode_sequence(
            &seq,
            &block,
            &interest,
            &pos,
            EncoderConfig::default(),
            false,
        )
        .unwrap();
        let mut items = seq.items().to_vec();
        items[5] = item(5, 5, vec![42.0; 8]);
        let perturbed = BehaviorSequence::new(items).unwrap();
        let again = encode_sequence(
            &perturbed,
            &block,
            &interest,
            &pos,
            EncoderConfig::default(),
            false,
        )
        .unwrap();
        assert_eq!(base.vector, again.vector);
    }

    #[test]
    fn encoder_is_order_sensitive_but_mean_pool_is_not() {
        let (block, interest, pos, mut rng) = setup(8, 4);
        for trial in 0..10 {
            let seq = random_seq(5, 8, &mut rng);
            let h = encode_sequence(
                &seq,
                &block,
                &interest,
                &pos,
                EncoderConfig::default(),
                false,
            )
            .unwrap();
            let mut items = seq.items().to_vec();
            let a = items[1].embedding.clone();
            items[1].embedding = items[3].embedding.clone();
            items[3].embedding = a;
            let swapped = BehaviorSequence::new(items.clone()).unwrap();
            let h2 = encode_sequence(
                &swapped,
                &block,
                &interest,
                &pos,
                EncoderConfig::default(),
                false,
            )
            .unwrap();
            assert_ne!(h.vector, h2.vector, "trial {trial}");

            let mean = mean_pool_sequence(&seq, &interest, 50);
            for _ in 0..5 {
                items.shuffle(&mut rng);
                for (k, it) in items.iter_mut().enumerate() {
                    it.ts = k as i64;
                }
                let shuffled = BehaviorSequence::new(items.clone()).unwrap();
                assert_eq!(
                    mean_pool_sequence(&shuffled, &interest, 50).vector,
                    mean.vector
                );
            }
        }
    }

    #[test]
    fn attention_trace_rows_are_stochastic() {
        let (block, interest, pos, mut rng) = setup(8, 5);
        let seq = random_seq(7, 8, &mut rng);
        let h = encode_sequence(
            &seq,
            &block,
            &interest,
            &pos,
            EncoderConfig::default(),
            true,
        )
        .unwrap();
        let trace = h.attention_trace.unwrap();
        assert_eq!(trace.len(), 2);
        for m in trace {
            for r in 0..7 {
                assert_abs_diff_eq!(m.row(r).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn user_representation_examples() {
        let schema = ProfileSchema::default();
        let d = 3;
        let h = DynamicInterestVector {
            vector: DenseVector::new(vec![0.5, 0.0, 2.0]).unwrap(),
            attention_trace: None,
        };
        let s = StaticProfileVector {
            vector: DenseVector::new(vec![-1.0, 3.0, 0.25]).unwrap(),
        };
        let zero = InterestFusionParams::zeros(d, &schema);
        assert_eq!(
            user_representation(&h, &s, &zero)
                .unwrap()
                .vector
                .as_slice(),
            &[0.0; 3]
        );

        let mut select = InterestFusionParams::zeros(d, &schema);
        for i in 0..d {
            select.combine.row_mut(i)[i] = 1.0;
        }
        assert_eq!(
            user_representation(&h, &s, &select).unwrap().vector,
            h.vector
        );

        // d = 2 hand evaluation: W = [[1, -1, 2, 0], [0.5, 0, -1, 1]], b = (0.1, -0.2)
        let mut p = InterestFusionParams::zeros(2, &schema);
        p.combine = DenseMatrix::from_rows(&[vec![1.0, -1.0, 2.0, 0.0], vec![0.5, 0.0, -1.0, 1.0]])
            .unwrap();
        p.bias = DenseVector::new(vec![0.1, -0.2]).unwrap();
        let h2 = DynamicInterestVector {
            vector: DenseVector::new(vec![1.0, 2.0]).unwrap(),
            attention_trace: None,
        };
        let s2 = StaticProfileVector {
            vector: DenseVector::new(vec![0.5, -3.0]).unwrap(),
        };
        // row0: 1 - 2 + 1 + 0 + 0.1 = 0.1 ; row1: 0.5 + 0 - 0.5 - 3 - 0.2 = -3.2 -> 0
        let z = user_representation(&h2, &s2, &p).unwrap();
        assert_abs_diff_eq!(z.vector[0], 0.1, epsilon = 1e-12);
        assert_eq!(z.vector[1], 0.0);

        let bad = StaticProfileVector {
            vector: DenseVector::new(vec![1.0; 2]).unwrap(),
        };
        assert!(user_representation(&h, &bad, &zero).is_err());
    }

    #[test]
    fn concatenation_order_matters() {
        let schema = ProfileSchema::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = InterestFusionParams::glorot(4, &schema, &mut rng);
        let a = DenseVector::new((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = DenseVector::new((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let z1 = user_representation(
            &DynamicInterestVector {
                vector: a.clone(),
                attention_trace: None,
            },
            &StaticProfileVector { vector: b.clone() },
            &p,
        )
        .unwrap();
        let z2 = user_representation(
            &DynamicInterestVector {
                vector: b,
                attention_trace: None,
            },
            &StaticProfileVector { vector: a },
            &p,
        )
        .unwrap();
        assert_ne!(z1, z2);
        assert!(z1.vector.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn timestamps_must_be_nondecreasing() {
        assert!(BehaviorSequence::new(vec![item(1, 5, vec![0.0]), item(2, 4, vec![0.0])]).is_err());
    }
}
