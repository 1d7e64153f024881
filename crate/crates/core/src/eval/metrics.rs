use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Retrieval outcome of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: u64,
    /// Whether each ranked candidate is a geographic positive.
    pub flags: Vec<bool>,
    pub uncertainty: f64,
    /// Distance-like score of the top-1 candidate; smaller is more confident.
    pub top1_distance: f64,
}

fn check(outcomes: &[QueryOutcome], n: usize) -> Result<()> {
    if outcomes.is_empty() {
        return Err(Error::Metric("no query outcomes".into()));
    }
    if n == 0 {
        return Err(Error::Metric("cut-off must be at least 1".into()));
    }
    if let Some(o) = outcomes.iter().find(|o| o.flags.len() < n) {
        return Err(Error::Metric(format!(
            "query {} has retrieval depth {} < {n}",
            o.query_id,
            o.flags.len()
        )));
    }
    Ok(())
}

/// Fraction of queries with at least one positive among the top `n`.
pub fn recall_at_n(outcomes: &[QueryOutcome], n: usize) -> Result<f64> {
    check(outcomes, n)?;
    let hits = outcomes.iter().filter(|o| o.flags[..n].iter().any(|&f| f)).count();
    Ok(hits as f64 / outcomes.len() as f64)
}

/// Truncated average precision divided by the cut-off `n`, averaged over
/// queries. With `n = 1` this is exactly recall@1.
pub fn map_at_n(outcomes: &[QueryOutcome], n: usize) -> Result<f64> {
    check(outcomes, n)?;
    let total: f64 = outcomes
        .iter()
        .map(|o| {
            let mut hits = 0usize;
            let mut acc = 0.0;
            for (k, &f) in o.flags[..n].iter().enumerate() {
                if f {
                    hits += 1;
                    acc += hits as f64 / (k + 1) as f64;
                }
            }
            acc / n as f64
        })
        .sum();
    Ok(total / outcomes.len() as f64)
}

/// Point of the precision-recall curve obtained by accepting every top-1
/// match with distance `<= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Sweeps the threshold over the distinct top-1 distances (ascending). Tied
/// distances enter together. Needs at least one correct top-1 match.
pub fn pr_curve(outcomes: &[QueryOutcome]) -> Result<Vec<PrPoint>> {
    check(outcomes, 1)?;
    let positives = outcomes.iter().filter(|o| o.flags[0]).count();
    if positives == 0 {
        return Err(Error::Metric(
            "precision-recall needs at least one correct top-1 match".into(),
        ));
    }
    if let Some(o) = outcomes.iter().find(|o| o.top1_distance.is_nan()) {
        return Err(Error::Metric(format!("query {} has a NaN distance", o.query_id)));
    }
    let mut order: Vec<&QueryOutcome> = outcomes.iter().collect();
    order.sort_by(|a, b| a.top1_distance.total_cmp(&b.top1_distance));
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let t = order[k].top1_distance;
        while k < order.len() && order[k].top1_distance == t {
            tp += order[k].flags[0] as usize;
            seen += 1;
            k += 1;
        }
        points.push(PrPoint {
            threshold: t,
            precision: tp as f64 / seen as f64,
            recall: tp as f64 / positives as f64,
        });
    }
    Ok(points)
}

/// Step-wise area under [`pr_curve`]: `Σ (R_k − R_{k−1}) · P_k`.
pub fn average_precision(outcomes: &[QueryOutcome]) -> Result<f64> {
    Ok(pr_area(&pr_curve(outcomes)?))
}

pub fn pr_area(points: &[PrPoint]) -> f64 {
    let mut prev = 0.0;
    let mut area = 0.0;
    for p in points {
        area += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    area
}

/// Fraction of queries whose top-1 match is correct.
pub fn top1_ratio(outcomes: &[QueryOutcome]) -> Result<f64> {
    recall_at_n(outcomes, 1)
}
