//! Retrieval and calibration metrics, and the end-to-end evaluation report.

mod calibration;
mod contrast;
mod metrics;

pub use calibration::{
    bin_uncertainty_levels, ece, ece_with_binning, removal_curve, BinReport, Binning, CalibrationMetric,
    CalibrationReport, RemovalPoint,
};
pub use contrast::{histogram_spread, to_gray_u8};
pub use metrics::{average_precision, map_at_n, pr_area, pr_curve, recall_at_n, top1_ratio, PrPoint, QueryOutcome};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::retrieval::{build_index, EmbeddingIndex, RetrievalResult};
use crate::types::{geo_distance, EmbeddingDistribution, PairLabel, PlaceSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchMode {
    /// Euclidean distance between means.
    Euclidean,
    /// Mutual likelihood score using both variances.
    Mls,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffValue {
    pub n: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySummary {
    pub id: u64,
    pub uncertainty: f64,
    pub top1_correct: bool,
    pub top1_distance: f64,
    pub histogram_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub match_mode: MatchMode,
    /// False for deterministic embeddings; calibration fields are then empty.
    pub has_uncertainty: bool,
    pub num_queries: usize,
    pub num_database: usize,
    pub depth: usize,
    pub bins: usize,
    pub recall: Vec<CutoffValue>,
    pub map: Vec<CutoffValue>,
    pub ap: f64,
    pub ece_recall: Vec<CutoffValue>,
    pub ece_map: Vec<CutoffValue>,
    pub ece_ap: Option<f64>,
    pub reliability: Vec<CalibrationReport>,
    pub pr_curve: Vec<PrPoint>,
    pub removal_curve: Vec<RemovalPoint>,
    /// Mean histogram spread of the queries in each uncertainty bin.
    pub hs_per_bin: Vec<f64>,
    pub queries: Vec<QuerySummary>,
}

impl MetricsReport {
    pub fn reliability_for(&self, metric: CalibrationMetric) -> Option<&CalibrationReport> {
        self.reliability.iter().find(|r| r.metric == metric)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Converts retrieval results into outcomes using geographic ground truth.
/// MLS scores are negated so that smaller always means more confident.
pub fn outcomes_from_results(
    results: &[RetrievalResult],
    queries: &[PlaceSample],
    index: &EmbeddingIndex,
    cfg: &ExperimentConfig,
    mode: MatchMode,
) -> Vec<QueryOutcome> {
    results
        .iter()
        .zip(queries)
        .map(|(r, q)| QueryOutcome {
            query_id: r.query_id,
            flags: r
                .rows
                .iter()
                .map(|&row| cfg.radii.label(geo_distance(q.geo, index.geos()[row])) == PairLabel::Positive)
                .collect(),
            uncertainty: r.uncertainty,
            top1_distance: match mode {
                MatchMode::Euclidean => r.scores[0],
                MatchMode::Mls => -r.scores[0],
            },
        })
        .collect()
}

/// Retrieval outcomes of every query against the database.
pub fn retrieve(
    database: &[PlaceSample],
    db_emb: &[EmbeddingDistribution],
    queries: &[PlaceSample],
    q_emb: &[EmbeddingDistribution],
    cfg: &ExperimentConfig,
    mode: MatchMode,
) -> Result<Vec<QueryOutcome>> {
    if queries.len() != q_emb.len() {
        return Err(Error::DimensionMismatch {
            expected: queries.len(),
            got: q_emb.len(),
        });
    }
    let ids: Vec<u64> = database.iter().map(|s| s.id).collect();
    let geos: Vec<_> = database.iter().map(|s| s.geo).collect();
    let index = build_index(db_emb, &ids, &geos)?;
    let k = cfg.eval.topk;
    let results = queries
        .iter()
        .zip(q_emb)
        .map(|(q, e)| match mode {
            MatchMode::Euclidean => index.query_topk(q.id, e, k),
            MatchMode::Mls => index.query_topk_mls(q.id, e, k),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(outcomes_from_results(&results, queries, &index, cfg, mode))
}

/// Full metrics report. When `has_uncertainty` is false the calibration
/// fields (ECE, reliability, removal curve, HS per bin) are left empty.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    method: &str,
    database: &[PlaceSample],
    db_emb: &[EmbeddingDistribution],
    queries: &[PlaceSample],
    q_emb: &[EmbeddingDistribution],
    has_uncertainty: bool,
    mode: MatchMode,
    cfg: &ExperimentConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let outcomes = retrieve(database, db_emb, queries, q_emb, cfg, mode)?;
    let cut = |f: &dyn Fn(usize) -> Result<f64>| -> Result<Vec<CutoffValue>> {
        cfg.eval
            .cutoffs
            .iter()
            .map(|&n| Ok(CutoffValue { n, value: f(n)? }))
            .collect()
    };
    let recall = cut(&|n| recall_at_n(&outcomes, n))?;
    let map = cut(&|n| map_at_n(&outcomes, n))?;
    let (ap, pr) = match pr_curve(&outcomes) {
        Ok(points) => (pr_area(&points), points),
        Err(e) => {
            log::warn!("{method}: {e}; AP reported as 0");
            (0.0, Vec::new())
        }
    };
    let hs: Vec<f64> = queries
        .iter()
        .map(|q| histogram_spread(&to_gray_u8(&q.image)))
        .collect::<Result<_>>()?;
    let mut report = MetricsReport {
        method: method.to_string(),
        match_mode: mode,
        has_uncertainty,
        num_queries: queries.len(),
        num_database: database.len(),
        depth: cfg.eval.topk,
        bins: cfg.eval.bins,
        recall,
        map,
        ap,
        ece_recall: Vec::new(),
        ece_map: Vec::new(),
        ece_ap: None,
        reliability: Vec::new(),
        pr_curve: pr,
        removal_curve: Vec::new(),
        hs_per_bin: Vec::new(),
        queries: outcomes
            .iter()
            .zip(&hs)
            .map(|(o, &h)| QuerySummary {
                id: o.query_id,
                uncertainty: o.uncertainty,
                top1_correct: o.flags[0],
                top1_distance: o.top1_distance,
                histogram_spread: h,
            })
            .collect(),
    };
    if has_uncertainty {
        let u: Vec<f64> = outcomes.iter().map(|o| o.uncertainty).collect();
        let binning = bin_uncertainty_levels(&u, cfg.eval.bins)?;
        for &n in &cfg.eval.cutoffs {
            let r = ece_with_binning(&outcomes, CalibrationMetric::RecallAt(n), &binning)?;
            report.ece_recall.push(CutoffValue { n, value: r.ece });
            report.reliability.push(r);
        }
        for &n in &cfg.eval.cutoffs {
            let r = ece_with_binning(&outcomes, CalibrationMetric::MapAt(n), &binning)?;
            report.ece_map.push(CutoffValue { n, value: r.ece });
            report.reliability.push(r);
        }
        let r = ece_with_binning(&outcomes, CalibrationMetric::AveragePrecision, &binning)?;
        report.ece_ap = Some(r.ece);
        report.reliability.push(r);
        report.removal_curve = removal_curve(&outcomes, &cfg.eval.removal_fractions)?;
        let mut sums = vec![0.0; binning.sizes.len()];
        for (&b, &h) in binning.assignments.iter().zip(&hs) {
            sums[b] += h;
        }
        report.hs_per_bin = sums.iter().zip(&binning.sizes).map(|(s, &c)| s / c as f64).collect();
    }
    Ok(report)
}
