use serde::{Deserialize, Serialize};

use super::metrics::{average_precision, map_at_n, recall_at_n, QueryOutcome};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "metric", content = "n", rename_all = "kebab-case")]
pub enum CalibrationMetric {
    RecallAt(usize),
    MapAt(usize),
    AveragePrecision,
}

impl CalibrationMetric {
    pub fn label(&self) -> String {
        match self {
            CalibrationMetric::RecallAt(n) => format!("r@{n}"),
            CalibrationMetric::MapAt(n) => format!("mAP@{n}"),
            CalibrationMetric::AveragePrecision => "AP".into(),
        }
    }

    /// Metric over a subset of queries. A bin without any correct top-1 match
    /// has AP 0.
    pub fn evaluate(&self, outcomes: &[QueryOutcome]) -> Result<f64> {
        match *self {
            CalibrationMetric::RecallAt(n) => recall_at_n(outcomes, n),
            CalibrationMetric::MapAt(n) => map_at_n(outcomes, n),
            CalibrationMetric::AveragePrecision => {
                if outcomes.iter().any(|o| o.flags.first() == Some(&true)) {
                    average_precision(outcomes)
                } else if outcomes.is_empty() {
                    Err(Error::Metric("no query outcomes".into()))
                } else {
                    Ok(0.0)
                }
            }
        }
    }
}

/// Binning of queries by uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    /// Bin of each query, in input order.
    pub assignments: Vec<usize>,
    pub sizes: Vec<usize>,
    pub mean_uncertainty: Vec<f64>,
    /// Bin means divided by the largest bin mean.
    pub levels: Vec<f64>,
}

/// Sorts queries by `(uncertainty, position)` and cuts them into `m` bins whose
/// sizes differ by at most one, earlier bins taking the extra items. If the
/// largest bin mean is not positive every level is 1.
pub fn bin_uncertainty_levels(uncertainties: &[f64], m: usize) -> Result<Binning> {
    let n = uncertainties.len();
    if m == 0 || m > n {
        return Err(Error::Metric(format!("bin count {m} must lie in 1..={n}")));
    }
    if let Some(u) = uncertainties.iter().find(|u| !u.is_finite()) {
        return Err(Error::Metric(format!("non-finite uncertainty {u}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| uncertainties[a].total_cmp(&uncertainties[b]).then(a.cmp(&b)));
    let (base, extra) = (n / m, n % m);
    let sizes: Vec<usize> = (0..m).map(|b| base + usize::from(b < extra)).collect();
    let mut assignments = vec![0; n];
    let mut sums = vec![0.0; m];
    let mut pos = 0;
    for (b, &size) in sizes.iter().enumerate() {
        for &q in &order[pos..pos + size] {
            assignments[q] = b;
            sums[b] += uncertainties[q];
        }
        pos += size;
    }
    let mean_uncertainty: Vec<f64> = sums.iter().zip(&sizes).map(|(s, &c)| s / c as f64).collect();
    let max = mean_uncertainty.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let levels = if max > 0.0 {
        mean_uncertainty.iter().map(|u| u / max).collect()
    } else {
        vec![1.0; m]
    };
    Ok(Binning {
        assignments,
        sizes,
        mean_uncertainty,
        levels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub size: usize,
    pub mean_uncertainty: f64,
    pub level: f64,
    pub confidence: f64,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub metric: CalibrationMetric,
    pub bins: usize,
    pub per_bin: Vec<BinReport>,
    pub ece: f64,
}

/// Expected calibration error of `metric` against confidence `1 − level`.
pub fn ece(outcomes: &[QueryOutcome], metric: CalibrationMetric, m: usize) -> Result<CalibrationReport> {
    let u: Vec<f64> = outcomes.iter().map(|o| o.uncertainty).collect();
    let binning = bin_uncertainty_levels(&u, m)?;
    ece_with_binning(outcomes, metric, &binning)
}

pub fn ece_with_binning(
    outcomes: &[QueryOutcome],
    metric: CalibrationMetric,
    binning: &Binning,
) -> Result<CalibrationReport> {
    let m = binning.sizes.len();
    let mut members: Vec<Vec<QueryOutcome>> = vec![Vec::new(); m];
    for (o, &b) in outcomes.iter().zip(&binning.assignments) {
        members[b].push(o.clone());
    }
    let mut per_bin = Vec::with_capacity(m);
    let (mut num, mut den) = (0.0, 0.0);
    for (b, qs) in members.iter().enumerate() {
        let value = metric.evaluate(qs)?;
        let confidence = 1.0 - binning.levels[b];
        num += qs.len() as f64 * (value - confidence).abs();
        den += qs.len() as f64;
        per_bin.push(BinReport {
            size: qs.len(),
            mean_uncertainty: binning.mean_uncertainty[b],
            level: binning.levels[b],
            confidence,
            metric: value,
        });
    }
    Ok(CalibrationReport {
        metric,
        bins: m,
        per_bin,
        ece: num / den,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemovalPoint {
    pub fraction: f64,
    pub kept: usize,
    pub top1_ratio: f64,
}

/// Top-1 correctness of the queries left after discarding the
/// `floor(f · N)` most uncertain ones (ties: later queries go first).
pub fn removal_curve(outcomes: &[QueryOutcome], fractions: &[f64]) -> Result<Vec<RemovalPoint>> {
    if outcomes.is_empty() {
        return Err(Error::Metric("no query outcomes".into()));
    }
    let n = outcomes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        outcomes[a]
            .uncertainty
            .total_cmp(&outcomes[b].uncertainty)
            .then(a.cmp(&b))
    });
    fractions
        .iter()
        .map(|&f| {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Metric(format!("removal fraction {f} outside [0, 1)")));
            }
            let kept = n - (f * n as f64).floor() as usize;
            if kept == 0 {
                return Err(Error::Metric(format!("removal fraction {f} discards every query")));
            }
            let correct = order[..kept]
                .iter()
                .filter(|&&q| outcomes[q].flags.first() == Some(&true))
                .count();
            Ok(RemovalPoint {
                fraction: f,
                kept,
                top1_ratio: correct as f64 / kept as f64,
            })
        })
        .collect()
}
