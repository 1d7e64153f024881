use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stun_core::retrieval::{build_index, uncertainty_scalar, EmbeddingIndex};
use stun_core::{EmbeddingDistribution, GeoTag};

use super::Check;

pub const N: usize = 500;
pub const QUERIES: usize = 50;
pub const D: usize = 8;

pub fn random_unit(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..D).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn random_dist(rng: &mut ChaCha8Rng) -> EmbeddingDistribution {
    let mean = random_unit(rng);
    // coarse variances so that MLS scores tie as well
    let var = (0..D).map(|_| rng.gen_range(1..=4) as f64 / 4.0).collect();
    EmbeddingDistribution::new(mean, var).unwrap()
}

/// Database with duplicated rows (exact ties) and shuffled, non-contiguous ids.
pub fn database(rng: &mut ChaCha8Rng) -> (Vec<EmbeddingDistribution>, Vec<u64>) {
    let mut embs: Vec<EmbeddingDistribution> = (0..N - 100).map(|_| random_dist(rng)).collect();
    for _ in 0..100 {
        let copy = embs[rng.gen_range(0..embs.len())].clone();
        embs.push(copy);
    }
    let mut ids: Vec<u64> = (0..N as u64).map(|i| i * 7 + 3).collect();
    ids.shuffle(rng);
    (embs, ids)
}

pub fn oracle_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..a.len() {
        acc += (a[k] - b[k]) * (a[k] - b[k]);
    }
    acc.sqrt()
}

pub fn oracle_mls(a: &EmbeddingDistribution, b: &EmbeddingDistribution) -> f64 {
    let mut acc = 0.0;
    for k in 0..a.dim() {
        let s = (a.variance()[k] + b.variance()[k]).max(1e-6);
        acc += (a.mean()[k] - b.mean()[k]) * (a.mean()[k] - b.mean()[k]) / s + s.ln();
    }
    -0.5 * acc
}

/// Repeated arg-best scan; `better(x, y)` says whether score x ranks above y.
pub fn oracle_topk(scores: &[f64], ids: &[u64], k: usize, better: impl Fn(f64, f64) -> bool) -> Vec<(u64, f64)> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for r in 0..scores.len() {
            if taken[r] {
                continue;
            }
            best = match best {
                None => Some(r),
                Some(b) if better(scores[r], scores[b]) || (scores[r] == scores[b] && ids[r] < ids[b]) => Some(r),
                keep => keep,
            };
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push((ids[b], scores[b]));
    }
    out
}

pub fn setup(
    seed: u64,
) -> (
    EmbeddingIndex,
    Vec<EmbeddingDistribution>,
    Vec<u64>,
    Vec<EmbeddingDistribution>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (embs, ids) = database(&mut rng);
    let geos: Vec<GeoTag> = (0..N).map(|i| GeoTag::new(i as f64, 0.0)).collect();
    let index = build_index(&embs, &ids, &geos).unwrap();
    // half the queries coincide with database rows
    let queries = (0..QUERIES)
        .map(|q| {
            if q % 2 == 0 {
                embs[rng.gen_range(0..N)].clone()
            } else {
                random_dist(&mut rng)
            }
        })
        .collect();
    (index, embs, ids, queries)
}

/// Top-k by both scores for every query at several depths, compared with a
/// repeated arg-best scan. Half the queries coincide with database rows and the
/// database contains exact duplicates, so ties are exercised.
pub fn check_retrieval(seed: u64) -> Check {
    let (index, embs, ids, queries) = setup(seed);
    let mut compared = 0;
    for (qi, q) in queries.iter().enumerate() {
        let euclid: Vec<f64> = embs.iter().map(|e| oracle_distance(q.mean(), e.mean())).collect();
        let mls: Vec<f64> = embs.iter().map(|e| oracle_mls(q, e)).collect();
        for k in [1, 10, 37, N] {
            let got = index.query_topk(qi as u64, q, k).map_err(|e| e.to_string())?;
            let pairs: Vec<(u64, f64)> = got.candidates.iter().copied().zip(got.scores.iter().copied()).collect();
            ensure!(
                pairs == oracle_topk(&euclid, &ids, k, |a, b| a < b),
                "euclidean top-{k} differs for query {qi}"
            );
            ensure!(
                got.uncertainty == uncertainty_scalar(q),
                "query {qi}: uncertainty scalar differs"
            );
            let got = index.query_topk_mls(qi as u64, q, k).map_err(|e| e.to_string())?;
            let pairs: Vec<(u64, f64)> = got.candidates.iter().copied().zip(got.scores.iter().copied()).collect();
            ensure!(
                pairs == oracle_topk(&mls, &ids, k, |a, b| a > b),
                "MLS top-{k} differs for query {qi}"
            );
            compared += 2;
        }
    }
    Ok(format!("{compared} top-k lists over {N} items and {QUERIES} queries"))
}
