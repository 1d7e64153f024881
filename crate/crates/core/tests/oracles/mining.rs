use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stun_core::config::Radii;
use stun_core::mining::{filter_violating, MeanCache, MiningPool};
use stun_core::types::{Tuple, TupleKind};
use stun_core::GeoTag;

use super::Check;

pub const PLACES: usize = 20;
pub const PER_PLACE: usize = 5;
pub const TOP_K: usize = 10;

/// 100 samples: 20 places 30 m apart, each with 5 samples jittered up to 8 m,
/// so positive, negative and in-between pairs all occur.
pub fn pool_geos(rng: &mut ChaCha8Rng) -> Vec<GeoTag> {
    let mut geos = Vec::new();
    for p in 0..PLACES {
        let (cx, cy) = ((p % 5) as f64 * 30.0, (p / 5) as f64 * 30.0);
        for _ in 0..PER_PLACE {
            let r = 8.0 * rng.gen::<f64>();
            let t = rng.gen_range(0.0..std::f64::consts::TAU);
            geos.push(GeoTag::new(cx + r * t.cos(), cy + r * t.sin()));
        }
    }
    geos
}

pub fn random_cache(rng: &mut ChaCha8Rng, n: usize, d: usize) -> MeanCache {
    let mut m = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0f64..1.0));
    for mut row in m.rows_mut() {
        let norm: f64 = row.dot(&row).sqrt();
        row /= norm;
    }
    MeanCache { epoch: 0, means: m }
}

pub fn dist(means: &Array2<f64>, i: usize, j: usize) -> f64 {
    let mut acc = 0.0;
    for k in 0..means.ncols() {
        acc += (means[[i, k]] - means[[j, k]]) * (means[[i, k]] - means[[j, k]]);
    }
    acc.sqrt()
}

pub fn geo(g: &[GeoTag], i: usize, j: usize) -> f64 {
    ((g[i].easting - g[j].easting).powi(2) + (g[i].northing - g[j].northing).powi(2)).sqrt()
}

pub fn is_pos(g: &[GeoTag], i: usize, j: usize) -> bool {
    i != j && geo(g, i, j) <= 10.0
}

pub fn is_neg(g: &[GeoTag], i: usize, j: usize) -> bool {
    i != j && geo(g, i, j) > 25.0
}

/// Every geometrically valid tuple, enumerated with nested loops.
pub fn oracle_candidates(g: &[GeoTag], kind: TupleKind) -> BTreeSet<Tuple> {
    let n = g.len();
    let mut out = BTreeSet::new();
    for a in 0..n {
        let has_pos = (0..n).any(|j| is_pos(g, a, j));
        let has_neg = (0..n).any(|j| is_neg(g, a, j));
        if !has_pos {
            continue;
        }
        for x in 0..n {
            match kind {
                TupleKind::Doublet => {
                    if is_pos(g, a, x) {
                        out.insert(Tuple::Doublet {
                            i: a,
                            j: x,
                            similar: true,
                        });
                    }
                    if is_neg(g, a, x) {
                        out.insert(Tuple::Doublet {
                            i: a,
                            j: x,
                            similar: false,
                        });
                    }
                }
                TupleKind::Triplet if has_neg && is_pos(g, a, x) => {
                    for y in 0..n {
                        if is_neg(g, a, y) {
                            out.insert(Tuple::Triplet { a, p: x, n: y });
                        }
                    }
                }
                TupleKind::Quadruplet if has_neg && is_pos(g, a, x) => {
                    for y in 0..n {
                        for z in 0..n {
                            if is_neg(g, a, y) && is_neg(g, a, z) && is_neg(g, x, z) && is_neg(g, y, z) {
                                out.insert(Tuple::Quadruplet { a, p: x, n1: y, n2: z });
                            }
                        }
                    }
                }
                _ => {}
            }
        }
    }
    out
}

pub fn oracle_loss(t: Tuple, m: &Array2<f64>) -> f64 {
    match t {
        Tuple::Doublet { i, j, similar } => {
            let d = dist(m, i, j);
            if similar {
                d * d
            } else {
                (0.4 - d * d).max(0.0)
            }
        }
        Tuple::Triplet { a, p, n } => (dist(m, a, p) - dist(m, a, n) + 0.1).max(0.0),
        Tuple::Quadruplet { a, p, n1, n2 } => {
            let h1 = (dist(m, a, p) - dist(m, a, n1) + 0.1).max(0.0);
            let h2 = (dist(m, a, p) - dist(m, a, n2) + 0.1).max(0.0);
            h1 + h2
        }
    }
}

pub fn anchor_of(t: &Tuple) -> usize {
    t.indices()[0]
}

pub fn margins(kind: TupleKind) -> (f64, f64) {
    match kind {
        TupleKind::Doublet => (0.4, 0.4),
        _ => (0.1, 0.1),
    }
}

pub const KINDS: [TupleKind; 3] = [TupleKind::Doublet, TupleKind::Triplet, TupleKind::Quadruplet];

/// Candidate enumeration and the violating subset for every loss kind,
/// against nested-loop enumeration, on `caches` random embedding caches.
pub fn check_mining(seed: u64, caches: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = pool_geos(&mut rng);
    let pool = MiningPool::new(&g, &Radii::default());
    let mut sizes = Vec::new();
    for kind in KINDS {
        let mut got = BTreeSet::new();
        for a in 0..g.len() {
            for t in pool.candidate_tuples(a, kind).0.iter() {
                ensure!(got.insert(t), "duplicate tuple {t:?}");
                let distinct: BTreeSet<usize> = t.indices().iter().copied().collect();
                ensure!(distinct.len() == t.indices().len(), "repeated sample in {t:?}");
            }
        }
        ensure!(
            got == oracle_candidates(&g, kind),
            "{kind:?} candidates differ from exhaustive enumeration"
        );
        sizes.push(got.len());
    }
    for trial in 0..caches {
        let cache = random_cache(&mut rng, g.len(), 3 + trial);
        for kind in KINDS {
            let mut kept = BTreeSet::new();
            let mut expected = BTreeSet::new();
            for a in 0..g.len() {
                let (cands, _) = pool.candidate_tuples(a, kind);
                kept.extend(
                    filter_violating(&cands, &cache, 0, margins(kind))
                        .map_err(|e| e.to_string())?
                        .iter(),
                );
                expected.extend(cands.iter().filter(|&t| oracle_loss(t, &cache.means) > 1e-9));
            }
            ensure!(
                kept == expected,
                "{kind:?}: violating set differs ({} vs {})",
                kept.len(),
                expected.len()
            );
            ensure!(!kept.is_empty(), "{kind:?}: no violating tuples, check is vacuous");
        }
    }
    Ok(format!(
        "{} samples; {}/{}/{} doublet/triplet/quadruplet candidates; {caches} caches",
        g.len(),
        sizes[0],
        sizes[1],
        sizes[2]
    ))
}
