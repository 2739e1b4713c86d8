//! JSON reports and their plain-text tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{random_ndcg_expectation, MetricsReport};
use crate::model::AblationVariant;
use crate::training::UserOutcome;

use super::{mean_rows, SeedRun};

/// Cutoff of the table columns.
pub const TABLE_K: usize = 10;

pub const TABLE_HEADER: &str = "Model Variant | NDCG@10 | Precision@10 | AUC";

/// Expected metrics of a uniformly random ordering of each user's
/// candidates, over the users the ranking metrics cover.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    pub k: usize,
    pub ndcg: f64,
    pub precision: f64,
    pub auc: f64,
    pub users: usize,
}

impl RandomBaseline {
    pub fn from_outcomes(outcomes: &[UserOutcome], k: usize) -> Result<Self> {
        let mut ndcg = 0.0;
        let mut precision = 0.0;
        let mut users = 0;
        for o in outcomes.iter().filter(|o| !o.relevant.is_empty()) {
            let n = o.n_candidates;
            let r = o.relevant.len();
            ndcg += random_ndcg_expectation(n, r, k)?;
            precision += n.min(k) as f64 * r as f64 / n as f64 / k as f64;
            users += 1;
        }
        if users == 0 {
            return Err(Error::Argument("no user has a relevant item".into()));
        }
        Ok(Self {
            k,
            ndcg: ndcg / users as f64,
            precision: precision / users as f64,
            auc: 0.5,
            users,
        })
    }

    fn note(&self) -> String {
        format!(
            "# Baseline: uniformly random ranking of the same candidates, expected NDCG@{k} = {:.4}, \
             Precision@{k} = {:.4}, AUC = {:.4} ({} users)",
            self.ndcg,
            self.precision,
            self.auc,
            self.users,
            k = self.k
        )
    }
}

fn row(label: &str, ndcg: f64, precision: f64, auc: Option<f64>) -> String {
    let auc = auc.map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"));
    format!("{label} | {ndcg:.4} | {precision:.4} | {auc}\n")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub variant: AblationVariant,
    pub label: String,
    pub metrics: MetricsReport,
    pub baseline: RandomBaseline,
}

impl EvaluationReport {
    pub fn table(&self) -> String {
        let mut out = self.baseline.note();
        out.push('\n');
        out.push_str(TABLE_HEADER);
        out.push('\n');
        let at = self.metrics.at(TABLE_K);
        out.push_str(&row(
            &self.label,
            at.map_or(f64::NAN, |a| a.ndcg),
            at.map_or(f64::NAN, |a| a.precision),
            self.metrics.auc,
        ));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub label: String,
    pub ndcg: f64,
    pub precision: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    /// Seed means, one per variant in table order.
    pub rows: Vec<AblationRow>,
    /// Random baseline over the first seed's test users.
    pub baseline: RandomBaseline,
    /// Raw per-seed results.
    pub seeds: Vec<SeedRun>,
}

impl AblationReport {
    pub fn from_runs(seeds: Vec<SeedRun>) -> Result<Self> {
        let first = seeds
            .first()
            .and_then(|s| s.variants.first())
            .ok_or_else(|| Error::Argument("ablation needs at least one seed".into()))?;
        let baseline = RandomBaseline::from_outcomes(&first.outcomes, TABLE_K)?;
        Ok(Self {
            rows: mean_rows(&seeds)?,
            baseline,
            seeds,
        })
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "# Variant grid in place of external baselines; means over seeds {:?}\n",
            self.seeds.iter().map(|s| s.seed).collect::<Vec<_>>()
        );
        out.push_str(&self.baseline.note());
        out.push('\n');
        out.push_str(TABLE_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&row(&r.label, r.ndcg, r.precision, Some(r.auc)));
        }
        out
    }
}
