use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stun_core::eval::{
    average_precision, ece, histogram_spread, map_at_n, recall_at_n, removal_curve, CalibrationMetric, QueryOutcome,
};

use super::Check;

pub const DEPTH: usize = 10;

/// Random outcomes with deliberately coarse uncertainties and distances so
/// that ties occur.
pub fn random_outcomes(rng: &mut ChaCha8Rng, n: usize) -> Vec<QueryOutcome> {
    let p_hit: f64 = rng.gen_range(0.1..0.9);
    (0..n)
        .map(|i| QueryOutcome {
            query_id: i as u64,
            flags: (0..DEPTH).map(|_| rng.gen_bool(p_hit)).collect(),
            uncertainty: rng.gen_range(0..50) as f64 / 97.0,
            top1_distance: rng.gen_range(0..40) as f64 / 13.0,
        })
        .collect()
}

pub fn recall(outcomes: &[QueryOutcome], n: usize) -> f64 {
    let mut hits = 0;
    for o in outcomes {
        let mut hit = false;
        for k in 0..n {
            if o.flags[k] {
                hit = true;
            }
        }
        if hit {
            hits += 1;
        }
    }
    hits as f64 / outcomes.len() as f64
}

pub fn map(outcomes: &[QueryOutcome], n: usize) -> f64 {
    let mut total = 0.0;
    for o in outcomes {
        let mut ap = 0.0;
        for k in 0..n {
            if o.flags[k] {
                let correct_so_far = (0..=k).filter(|&j| o.flags[j]).count();
                ap += correct_so_far as f64 / (k + 1) as f64;
            }
        }
        total += ap / n as f64;
    }
    total / outcomes.len() as f64
}

/// Precision and recall at every distinct threshold, integrated stepwise.
pub fn ap(outcomes: &[QueryOutcome]) -> f64 {
    let positives = outcomes.iter().filter(|o| o.flags[0]).count();
    let mut thresholds: Vec<f64> = outcomes.iter().map(|o| o.top1_distance).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let accepted: Vec<&QueryOutcome> = outcomes.iter().filter(|o| o.top1_distance <= t).collect();
        let tp = accepted.iter().filter(|o| o.flags[0]).count();
        let precision = tp as f64 / accepted.len() as f64;
        let recall = tp as f64 / positives as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    area
}

pub fn metric(outcomes: &[QueryOutcome], metric: CalibrationMetric) -> f64 {
    match metric {
        CalibrationMetric::RecallAt(n) => recall(outcomes, n),
        CalibrationMetric::MapAt(n) => map(outcomes, n),
        CalibrationMetric::AveragePrecision => {
            if outcomes.iter().any(|o| o.flags[0]) {
                ap(outcomes)
            } else {
                0.0
            }
        }
    }
}

/// Selection-sort binning: repeatedly take the least uncertain remaining
/// query (earliest on ties). Members keep input order inside a bin.
pub fn expected_calibration_error(outcomes: &[QueryOutcome], which: CalibrationMetric, m: usize) -> f64 {
    let n = outcomes.len();
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut bins: Vec<Vec<QueryOutcome>> = Vec::new();
    let mut means = Vec::new();
    for b in 0..m {
        let size = n / m + usize::from(b < n % m);
        let mut members = Vec::new();
        for _ in 0..size {
            let mut best = 0;
            for (pos, &q) in remaining.iter().enumerate() {
                if outcomes[q].uncertainty < outcomes[remaining[best]].uncertainty {
                    best = pos;
                }
            }
            members.push(remaining.remove(best));
        }
        // mean accumulated in ascending-uncertainty order
        let mut sum = 0.0;
        for &q in &members {
            sum += outcomes[q].uncertainty;
        }
        means.push(sum / size as f64);
        members.sort();
        bins.push(members.iter().map(|&q| outcomes[q].clone()).collect());
    }
    let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for (b, bin) in bins.iter().enumerate() {
        let level = if max > 0.0 { means[b] / max } else { 1.0 };
        num += bin.len() as f64 * (metric(bin, which) - (1.0 - level)).abs();
        den += bin.len() as f64;
    }
    num / den
}

/// Removes the most uncertain query one at a time (later index first on ties).
pub fn removal(outcomes: &[QueryOutcome], f: f64) -> f64 {
    let mut kept: Vec<usize> = (0..outcomes.len()).collect();
    let remove = (f * outcomes.len() as f64).floor() as usize;
    for _ in 0..remove {
        let mut worst = 0;
        for (pos, &q) in kept.iter().enumerate() {
            if outcomes[q].uncertainty >= outcomes[kept[worst]].uncertainty {
                worst = pos;
            }
        }
        kept.remove(worst);
    }
    let correct = kept.iter().filter(|&&q| outcomes[q].flags[0]).count();
    correct as f64 / kept.len() as f64
}

/// numpy-style linear quantiles on the sorted pixel list.
pub fn histogram_spread_of(pixels: &[u8]) -> f64 {
    let mut sorted: Vec<f64> = pixels.iter().map(|&p| p as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let quantile = |q: f64| {
        let h = (sorted.len() - 1) as f64 * q;
        let lo = h.floor() as usize;
        let frac = h - lo as f64;
        if frac == 0.0 {
            sorted[lo]
        } else {
            sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
        }
    };
    (quantile(0.75) - quantile(0.25)) / 255.0
}

/// Exact agreement of every metric with its loop oracle: one set of 1000
/// outcomes followed by `extra` sets of random size.
pub fn check_metrics(seed: u64, extra: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut comparisons = 0usize;
    for trial in 0..=extra {
        let n = if trial == 0 { 1000 } else { rng.gen_range(11..300) };
        let qs = random_outcomes(&mut rng, n);
        for k in 1..=DEPTH {
            let (got, want) = (recall_at_n(&qs, k).unwrap(), recall(&qs, k));
            ensure!(got == want, "r@{k}: {got} vs oracle {want} (n = {n})");
            let (got, want) = (map_at_n(&qs, k).unwrap(), map(&qs, k));
            ensure!(got == want, "mAP@{k}: {got} vs oracle {want} (n = {n})");
            comparisons += 2;
        }
        ensure!(
            map_at_n(&qs, 1).unwrap() == recall_at_n(&qs, 1).unwrap(),
            "mAP@1 differs from r@1 (n = {n})"
        );
        if qs.iter().any(|o| o.flags[0]) {
            let (got, want) = (average_precision(&qs).unwrap(), ap(&qs));
            ensure!(got == want, "AP: {got} vs oracle {want} (n = {n})");
            comparisons += 1;
        }
        for m in [1, 2, 7, 11] {
            for which in [
                CalibrationMetric::RecallAt(1),
                CalibrationMetric::RecallAt(5),
                CalibrationMetric::MapAt(10),
                CalibrationMetric::AveragePrecision,
            ] {
                let got = ece(&qs, which, m).unwrap().ece;
                let want = expected_calibration_error(&qs, which, m);
                ensure!(
                    got == want,
                    "ECE {} with M = {m}: {got} vs oracle {want} (n = {n})",
                    which.label()
                );
                comparisons += 1;
            }
        }
        let fractions = [0.0, 0.1, 0.25, 0.5, 0.9];
        let curve = removal_curve(&qs, &fractions).unwrap();
        for (p, &f) in curve.iter().zip(&fractions) {
            let want = removal(&qs, f);
            ensure!(
                p.top1_ratio == want,
                "removal at {f}: {} vs oracle {want} (n = {n})",
                p.top1_ratio
            );
            comparisons += 1;
        }
        let pixels: Vec<u8> = (0..rng.gen_range(1..2000)).map(|_| rng.gen()).collect();
        let (got, want) = (histogram_spread(&pixels).unwrap(), histogram_spread_of(&pixels));
        ensure!(got == want, "HS: {got} vs oracle {want}");
        comparisons += 1;
    }
    Ok(format!(
        "{comparisons} exact comparisons over {} outcome sets, the first of 1000 queries",
        extra + 1
    ))
}
