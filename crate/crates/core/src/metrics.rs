//! Ranking and classification metrics: precision/recall/NDCG at K,
//! Mann-Whitney AUC, F1 and the mean modality attention share.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::AttentionWeights;

/// A model ordering plus the ground-truth relevant set.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    ids: Vec<u64>,
    relevant: HashSet<u64>,
}

impl RankedList {
    pub fn new(ids: Vec<u64>, relevant: impl IntoIterator<Item = u64>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::Argument(format!(
                    "video {id} appears twice in a ranking"
                )));
            }
        }
        Ok(Self {
            ids,
            relevant: relevant.into_iter().collect(),
        })
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn relevant(&self) -> &HashSet<u64> {
        &self.relevant
    }

    pub fn hits_at(&self, k: usize) -> usize {
        self.ids
            .iter()
            .take(k)
            .filter(|id| self.relevant.contains(id))
            .count()
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    Ok(())
}

fn check_relevant(r: &RankedList) -> Result<()> {
    if r.relevant.is_empty() {
        return Err(Error::Argument("relevant set is empty".into()));
    }
    Ok(())
}

/// Hits in the top K divided by K, even when fewer than K items are ranked.
pub fn precision_at_k(ranked: &RankedList, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(ranked.hits_at(k) as f64 / k as f64)
}

pub fn recall_at_k(ranked: &RankedList, k: usize) -> Result<f64> {
    check_k(k)?;
    check_relevant(ranked)?;
    Ok(ranked.hits_at(k) as f64 / ranked.relevant.len() as f64)
}

/// Binary-gain NDCG with discount `1 / log2(rank + 1)`, rank starting at 1.
pub fn ndcg_at_k(ranked: &RankedList, k: usize) -> Result<f64> {
    check_k(k)?;
    check_relevant(ranked)?;
    let dcg: f64 = ranked
        .ids
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| ranked.relevant.contains(id))
        .map(|(i, _)| discount(i + 1))
        .sum();
    Ok(dcg / ideal_dcg(k.min(ranked.relevant.len())))
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

fn ideal_dcg(n: usize) -> f64 {
    (1..=n).map(discount).sum()
}

/// Expected NDCG@K of a uniformly random ordering of `n_items` candidates
/// of which `n_relevant` are relevant.
pub fn random_ndcg_expectation(n_items: usize, n_relevant: usize, k: usize) -> Result<f64> {
    check_k(k)?;
    if n_relevant == 0 || n_relevant > n_items {
        return Err(Error::Argument(format!(
            "need 1 <= relevant ({n_relevant}) <= items ({n_items})"
        )));
    }
    // each position holds a relevant item with probability R / N
    let p = n_relevant as f64 / n_items as f64;
    let dcg: f64 = (1..=k.min(n_items)).map(discount).sum::<f64>() * p;
    Ok(dcg / ideal_dcg(k.min(n_relevant)))
}

/// Mann-Whitney AUC: concordant pairs plus half the tied pairs, over
/// positives times negatives. Ties are resolved with mid-ranks.
pub fn auc(scored: &[(f64, bool)]) -> Result<f64> {
    if scored.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::Numerical("NaN score passed to auc".into()));
    }
    let pos = scored.iter().filter(|(_, y)| *y).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Argument(
            "auc needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));
    // sum of doubled mid-ranks keeps everything in integers
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scored[order[j]].0 == scored[order[i]].0 {
            j += 1;
        }
        // ranks i+1 ..= j, doubled mid-rank = i + 1 + j
        let mid2 = (i + 1 + j) as u128;
        let pos_in_tie = order[i..j].iter().filter(|&&o| scored[o].1).count() as u128;
        rank_sum2 += mid2 * pos_in_tie;
        i = j;
    }
    let pos = pos as u128;
    let u2 = rank_sum2 - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg as u128) as f64)
}

/// F1 at `threshold` (prediction positive when `p >= threshold`); 0 when
/// precision and recall are both 0 or undefined.
pub fn f1(probabilities: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::dim("f1 inputs", probabilities.len(), labels.len()));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &y) in probabilities.iter().zip(labels) {
        match (p >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

pub fn modality_weight_share(weights: &[AttentionWeights]) -> Result<AttentionWeights> {
    if weights.is_empty() {
        return Err(Error::Argument("no attention weights to average".into()));
    }
    let mut sum = [0.0; 3];
    for w in weights {
        for (s, v) in sum.iter_mut().zip(w.as_array()) {
            *s += v;
        }
    }
    let n = weights.len() as f64;
    Ok(AttentionWeights::from_array(sum.map(|s| s / n)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingAtK {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Macro averages over users with at least one relevant item.
    pub ranking: Vec<RankingAtK>,
    pub auc: Option<f64>,
    pub f1: f64,
    pub modality_share: AttentionWeights,
    pub users: usize,
    pub skipped_users: usize,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&RankingAtK> {
        self.ranking.iter().find(|r| r.k == k)
    }
}

/// Macro-averaged precision/recall/NDCG for each K; users with an empty
/// relevant set are skipped. Returns the averages and the skip count.
pub fn macro_ranking(lists: &[RankedList], ks: &[usize]) -> Result<(Vec<RankingAtK>, usize)> {
    let eligible: Vec<&RankedList> = lists.iter().filter(|l| !l.relevant.is_empty()).collect();
    let skipped = lists.len() - eligible.len();
    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        let (mut p, mut r, mut n) = (0.0, 0.0, 0.0);
        for l in &eligible {
            p += precision_at_k(l, k)?;
            r += recall_at_k(l, k)?;
            n += ndcg_at_k(l, k)?;
        }
        let m = eligible.len().max(1) as f64;
        out.push(RankingAtK {
            k,
            precision: p / m,
            recall: r / m,
            ndcg: n / m,
        });
    }
    Ok((out, skipped))
}
