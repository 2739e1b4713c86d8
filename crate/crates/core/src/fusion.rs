//! Attention-weighted intermediate fusion of visual, text, and audio features.
//!
//! Each modality is projected into a shared `d`-dimensional space, scored
//! against a query vector, and the softmax of those scores weights a convex
//! combination of the projections. Absent modalities are removed from both
//! the softmax and the sum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, softmax_backward, softmax_in_place, DenseMatrix, DenseVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Text,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Text, Modality::Audio];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Text => "text",
            Modality::Audio => "audio",
        }
    }
}

/// Raw per-modality features of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeatures {
    vectors: [DenseVector; 3],
    present: [bool; 3],
}

impl ModalityFeatures {
    /// `dims` gives the raw width of each modality; an absent modality is
    /// stored as a zero vector of that width.
    pub fn new(
        visual: Option<Vec<f64>>,
        text: Option<Vec<f64>>,
        audio: Option<Vec<f64>>,
        dims: [usize; 3],
    ) -> Result<Self> {
        let raw = [visual, text, audio];
        let present = [raw[0].is_some(), raw[1].is_some(), raw[2].is_some()];
        if !present.iter().any(|&p| p) {
            return Err(Error::Argument(
                "a video needs at least one modality".into(),
            ));
        }
        let mut vectors: Vec<DenseVector> = Vec::with_capacity(3);
        for (m, values) in raw.into_iter().enumerate() {
            let v = match values {
                Some(v) => {
                    if v.len() != dims[m] {
                        return Err(Error::dim(
                            format!("{} features", Modality::ALL[m].name()),
                            v.len(),
                            dims[m],
                        ));
                    }
                    DenseVector::new(v)?
                }
                None => DenseVector::zeros(dims[m]),
            };
            vectors.push(v);
        }
        let vectors: [DenseVector; 3] = vectors.try_into().expect("three modalities");
        Ok(Self { vectors, present })
    }

    pub fn get(&self, m: Modality) -> Option<&DenseVector> {
        self.present[m.index()].then(|| &self.vectors[m.index()])
    }

    pub fn raw(&self, m: Modality) -> &DenseVector {
        &self.vectors[m.index()]
    }

    pub fn present(&self) -> [bool; 3] {
        self.present
    }

    pub fn dims(&self) -> [usize; 3] {
        [
            self.vectors[0].len(),
            self.vectors[1].len(),
            self.vectors[2].len(),
        ]
    }

    /// Copy with every modality outside `keep` marked absent. The result may
    /// have no modality left; such a video fuses to the zero vector inside
    /// the model, while the public fusion operations reject it.
    pub fn masked(&self, keep: [bool; 3]) -> Self {
        let mut out = self.clone();
        for m in 0..3 {
            if !keep[m] {
                out.present[m] = false;
                out.vectors[m] = DenseVector::zeros(self.vectors[m].len());
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub w_visual: DenseMatrix,
    pub w_text: DenseMatrix,
    pub w_audio: DenseMatrix,
    /// Attention query shared by all users.
    pub query: DenseVector,
}

impl FusionParams {
    pub fn glorot<R: Rng + ?Sized>(d: usize, dims: [usize; 3], rng: &mut R) -> Self {
        let limit = (6.0 / (d + 1) as f64).sqrt();
        Self {
            w_visual: DenseMatrix::glorot(d, dims[0], rng),
            w_text: DenseMatrix::glorot(d, dims[1], rng),
            w_audio: DenseMatrix::glorot(d, dims[2], rng),
            query: DenseVector::from_vec_unchecked(
                (0..d).map(|_| rng.random_range(-limit..limit)).collect(),
            ),
        }
    }

    pub fn zeros(d: usize, dims: [usize; 3]) -> Self {
        Self {
            w_visual: DenseMatrix::zeros(d, dims[0]),
            w_text: DenseMatrix::zeros(d, dims[1]),
            w_audio: DenseMatrix::zeros(d, dims[2]),
            query: DenseVector::zeros(d),
        }
    }

    pub fn width(&self) -> usize {
        self.query.len()
    }

    pub fn projection(&self, m: Modality) -> &DenseMatrix {
        match m {
            Modality::Visual => &self.w_visual,
            Modality::Text => &self.w_text,
            Modality::Audio => &self.w_audio,
        }
    }

    pub(crate) fn projection_mut(&mut self, m: Modality) -> &mut DenseMatrix {
        match m {
            Modality::Visual => &mut self.w_visual,
            Modality::Text => &mut self.w_text,
            Modality::Audio => &mut self.w_audio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        for m in Modality::ALL {
            let rows = self.projection(m).rows();
            if rows != d {
                return Err(Error::dim(format!("{} projection rows", m.name()), rows, d));
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("fusion.w_visual", self.w_visual.as_slice()),
            ("fusion.w_text", self.w_text.as_slice()),
            ("fusion.w_audio", self.w_audio.as_slice()),
            ("fusion.query", self.query.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("fusion.w_visual", self.w_visual.as_mut_slice()),
            ("fusion.w_text", self.w_text.as_mut_slice()),
            ("fusion.w_audio", self.w_audio.as_mut_slice()),
            ("fusion.query", self.query.as_mut_slice()),
        ]
    }

    /// FNV-1a over the parameter bits; identifies the params a catalog was
    /// built with.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.tensors() {
            for v in t {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Convex modality weights. Absent modalities have weight exactly zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub visual: f64,
    pub text: f64,
    pub audio: f64,
}

impl AttentionWeights {
    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            visual: a[0],
            text: a[1],
            audio: a[2],
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.visual, self.text, self.audio]
    }

    pub fn get(&self, m: Modality) -> f64 {
        self.as_array()[m.index()]
    }

    /// Modality with the largest weight; ties resolve to the earlier one.
    pub fn dominant(&self) -> Modality {
        let a = self.as_array();
        let mut best = 0;
        for m in 1..3 {
            if a[m] > a[best] {
                best = m;
            }
        }
        Modality::ALL[best]
    }
}

/// The three projected vectors `e_m = W_m x_m` plus the presence mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedModalities {
    pub vectors: [DenseVector; 3],
    pub present: [bool; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedEmbedding {
    pub vector: DenseVector,
    pub weights: AttentionWeights,
}

pub fn project_modalities(
    feats: &ModalityFeatures,
    params: &FusionParams,
) -> Result<ProjectedModalities> {
    let d = params.width();
    let mut vectors: Vec<DenseVector> = Vec::with_capacity(3);
    for m in Modality::ALL {
        let w = params.projection(m);
        let x = feats.raw(m);
        if w.cols() != x.len() {
            return Err(Error::dim(
                format!("{} projection", m.name()),
                format!("W {}x{}", w.rows(), w.cols()),
                format!("x of length {}", x.len()),
            ));
        }
        let e = if feats.present[m.index()] {
            DenseVector::from_vec_unchecked(w.matvec(x))
        } else {
            DenseVector::zeros(d)
        };
        vectors.push(e);
    }
    Ok(ProjectedModalities {
        vectors: vectors.try_into().expect("three modalities"),
        present: feats.present,
    })
}

/// Fine-ranking query: the global preference vector shifted by the user
/// representation, scaled by `1/sqrt(d)` so the user term cannot saturate
/// the modality softmax as `z` grows.
pub fn user_query(u: &[f64], z: &[f64]) -> Vec<f64> {
    let scale = user_query_scale(u.len());
    u.iter().zip(z).map(|(u, z)| u + scale * z).collect()
}

pub(crate) fn user_query_scale(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

pub fn attention_weights(
    query: &DenseVector,
    projected: &ProjectedModalities,
) -> Result<AttentionWeights> {
    for e in &projected.vectors {
        if e.len() != query.len() {
            return Err(Error::dim("attention query", query.len(), e.len()));
        }
    }
    let refs = [
        projected.vectors[0].as_slice(),
        projected.vectors[1].as_slice(),
        projected.vectors[2].as_slice(),
    ];
    Ok(AttentionWeights::from_array(modality_softmax(
        query,
        refs,
        projected.present,
    )?))
}

pub fn fuse(weights: &AttentionWeights, projected: &ProjectedModalities) -> Result<FusedEmbedding> {
    let d = projected.vectors[0].len();
    if projected.vectors.iter().any(|e| e.len() != d) {
        return Err(Error::Argument(
            "projected modalities differ in width".into(),
        ));
    }
    let alpha = weights.as_array();
    let mut f = vec![0.0; d];
    for m in 0..3 {
        if alpha[m] != 0.0 {
            axpy(alpha[m], &projected.vectors[m], &mut f);
        }
    }
    Ok(FusedEmbedding {
        vector: DenseVector::new(f)?,
        weights: *weights,
    })
}

pub(crate) fn modality_softmax(
    query: &[f64],
    e: [&[f64]; 3],
    present: [bool; 3],
) -> Result<[f64; 3]> {
    if !present.iter().any(|&p| p) {
        return Err(Error::Argument("no modality present".into()));
    }
    let mut logits = [f64::NEG_INFINITY; 3];
    for m in 0..3 {
        if present[m] {
            logits[m] = dot(query, e[m]);
        }
    }
    softmax_in_place(&mut logits)?;
    Ok(logits)
}

/// Forward intermediates of one fusion, kept for the reverse pass.
#[derive(Clone, Debug)]
pub(crate) struct FusionTrace {
    pub e: [Vec<f64>; 3],
    pub alpha: [f64; 3],
    pub f: Vec<f64>,
    pub present: [bool; 3],
}

impl FusionTrace {
    /// Projects, weights against `query`, and fuses in one pass.
    pub fn forward(feats: &ModalityFeatures, params: &FusionParams, query: &[f64]) -> Self {
        let d = params.width();
        let present = feats.present;
        let e: [Vec<f64>; 3] = std::array::from_fn(|m| {
            if present[m] {
                params
                    .projection(Modality::ALL[m])
                    .matvec(&feats.vectors[m])
            } else {
                vec![0.0; d]
            }
        });
        // a video masked down to nothing fuses to the zero vector
        let alpha = if present.iter().any(|&p| p) {
            modality_softmax(query, [&e[0], &e[1], &e[2]], present).expect("non-empty softmax")
        } else {
            [0.0; 3]
        };
        let mut f = vec![0.0; d];
        for m in 0..3 {
            if present[m] {
                axpy(alpha[m], &e[m], &mut f);
            }
        }
        Self {
            e,
            alpha,
            f,
            present,
        }
    }

    /// Given `df`, accumulates projection gradients into `grads` and returns
    /// the gradient with respect to the query.
    pub fn backward(
        &self,
        feats: &ModalityFeatures,
        query: &[f64],
        df: &[f64],
        grads: &mut FusionParams,
    ) -> Vec<f64> {
        let mut dalpha = [0.0; 3];
        for m in 0..3 {
            if self.present[m] {
                dalpha[m] = dot(df, &self.e[m]);
            }
        }
        let mut dlogit = [0.0; 3];
        softmax_backward(&self.alpha, &dalpha, &mut dlogit);
        let mut dq = vec![0.0; query.len()];
        for m in 0..3 {
            if !self.present[m] {
                continue;
            }
            axpy(dlogit[m], &self.e[m], &mut dq);
            let mut de = df.to_vec();
            for v in de.iter_mut() {
                *v *= self.alpha[m];
            }
            axpy(dlogit[m], query, &mut de);
            grads
                .projection_mut(Modality::ALL[m])
                .add_outer(1.0, &de, &feats.vectors[m]);
        }
        dq
    }
}
