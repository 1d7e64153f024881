//! Tuple construction and hard-negative mining against a per-epoch cache of
//! teacher means.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{Array2, ArrayView1};

use crate::config::{LossKind, Radii};
use crate::error::{Error, Result};
use crate::losses::{contrastive_item, distance, quadruplet_item, triplet_item};
use crate::types::{geo_distance, GeoTag, PairLabel, Tuple, TupleBatch, TupleKind};

/// Tuples whose loss does not exceed this are treated as satisfied.
pub const VIOLATION_TOL: f64 = 1e-9;

pub fn tuple_kind(loss: LossKind) -> TupleKind {
    match loss {
        LossKind::Contrastive => TupleKind::Doublet,
        LossKind::Triplet => TupleKind::Triplet,
        LossKind::Quadruplet => TupleKind::Quadruplet,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorStatus {
    Ok,
    NoPositive,
    NoNegative,
}

/// Teacher means for every pool sample, tagged with the epoch that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanCache {
    pub epoch: usize,
    pub means: Array2<f64>,
}

impl MeanCache {
    fn check(&self, n: usize, current_epoch: usize) -> Result<()> {
        if self.epoch != current_epoch {
            return Err(Error::StaleCache {
                cache_epoch: self.epoch,
                current_epoch,
            });
        }
        if self.means.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.means.nrows(),
            });
        }
        Ok(())
    }

    fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.means.row(i)
    }
}

/// Pairwise geographic labels of a training set.
#[derive(Debug, Clone)]
pub struct MiningPool {
    n: usize,
    labels: Vec<PairLabel>,
    positives: Vec<Vec<usize>>,
    negatives: Vec<Vec<usize>>,
}

impl MiningPool {
    pub fn new(geos: &[GeoTag], radii: &Radii) -> Self {
        let n = geos.len();
        let mut labels = vec![PairLabel::Ignore; n * n];
        let mut positives = vec![Vec::new(); n];
        let mut negatives = vec![Vec::new(); n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let l = radii.label(geo_distance(geos[i], geos[j]));
                labels[i * n + j] = l;
                match l {
                    PairLabel::Positive => positives[i].push(j),
                    PairLabel::Negative => negatives[i].push(j),
                    PairLabel::Ignore => {}
                }
            }
        }
        Self {
            n,
            labels,
            positives,
            negatives,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Label of a pair; a sample paired with itself is `Ignore`.
    pub fn label(&self, i: usize, j: usize) -> PairLabel {
        self.labels[i * self.n + j]
    }

    pub fn positives(&self, i: usize) -> &[usize] {
        &self.positives[i]
    }

    pub fn negatives(&self, i: usize) -> &[usize] {
        &self.negatives[i]
    }

    /// All positive pairs `(i, j)` with `i < j`.
    pub fn positive_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|i| self.positives[i].iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    pub fn status(&self, anchor: usize) -> AnchorStatus {
        if self.positives[anchor].is_empty() {
            AnchorStatus::NoPositive
        } else if self.negatives[anchor].is_empty() {
            AnchorStatus::NoNegative
        } else {
            AnchorStatus::Ok
        }
    }

    /// Every geometrically valid tuple of `kind` for `anchor`. Anchors without a
    /// positive (or, for triplets and quadruplets, without a negative) yield an
    /// empty batch and the corresponding status.
    pub fn candidate_tuples(&self, anchor: usize, kind: TupleKind) -> (TupleBatch, AnchorStatus) {
        let status = self.status(anchor);
        let mut batch = TupleBatch::empty(kind);
        let push = |b: &mut TupleBatch, t| b.push(t).expect("kind matches");
        match (kind, status) {
            (_, AnchorStatus::NoPositive) => {}
            (TupleKind::Doublet, _) => {
                for &j in &self.positives[anchor] {
                    push(
                        &mut batch,
                        Tuple::Doublet {
                            i: anchor,
                            j,
                            similar: true,
                        },
                    );
                }
                for &j in &self.negatives[anchor] {
                    push(
                        &mut batch,
                        Tuple::Doublet {
                            i: anchor,
                            j,
                            similar: false,
                        },
                    );
                }
            }
            (_, AnchorStatus::NoNegative) => {}
            (TupleKind::Triplet, _) => {
                for &p in &self.positives[anchor] {
                    for &n in &self.negatives[anchor] {
                        push(&mut batch, Tuple::Triplet { a: anchor, p, n });
                    }
                }
            }
            (TupleKind::Quadruplet, _) => {
                for &p in &self.positives[anchor] {
                    for &n1 in &self.negatives[anchor] {
                        for &n2 in &self.negatives[anchor] {
                            if self.second_negative_ok(p, n1, n2) {
                                push(&mut batch, Tuple::Quadruplet { a: anchor, p, n1, n2 });
                            }
                        }
                    }
                }
            }
        }
        (batch, status)
    }

    /// `n2` (already negative to the anchor) must be negative to `p` and `n1` too.
    fn second_negative_ok(&self, p: usize, n1: usize, n2: usize) -> bool {
        n2 != n1 && self.label(p, n2) == PairLabel::Negative && self.label(n1, n2) == PairLabel::Negative
    }
}

/// Loss of a single tuple under the cached means.
pub fn tuple_loss(t: Tuple, cache: &MeanCache, margins: (f64, f64)) -> f64 {
    let r = |i| cache.row(i);
    match t {
        Tuple::Doublet { i, j, similar } => contrastive_item(r(i), r(j), similar, margins.0),
        Tuple::Triplet { a, p, n } => triplet_item(r(a), r(p), r(n), margins.0),
        Tuple::Quadruplet { a, p, n1, n2 } => quadruplet_item(r(a), r(p), r(n1), r(n2), margins.0, margins.1),
    }
}

/// Keeps exactly the tuples whose loss exceeds [`VIOLATION_TOL`].
pub fn filter_violating(
    tuples: &TupleBatch,
    cache: &MeanCache,
    current_epoch: usize,
    margins: (f64, f64),
) -> Result<TupleBatch> {
    cache.check(cache.means.nrows(), current_epoch)?;
    tuples.validate(cache.means.nrows())?;
    let mut out = TupleBatch::empty(tuples.kind);
    for t in tuples.iter() {
        if tuple_loss(t, cache, margins) > VIOLATION_TOL {
            out.push(t)?;
        }
    }
    Ok(out)
}

/// Heap entry ordered so that the *worst* kept tuple is at the top: lower loss
/// is worse, and at equal loss the lexicographically larger tuple is worse.
#[derive(Debug, Clone, Copy)]
struct Ranked {
    loss: f64,
    tuple: Tuple,
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked {}
impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked {
    /// `Greater` means worse.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .loss
            .total_cmp(&self.loss)
            .then_with(|| self.tuple.cmp(&other.tuple))
    }
}

struct TopK {
    k: usize,
    heap: BinaryHeap<Ranked>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    /// Whether `r` would be rejected outright.
    fn rejects(&self, r: &Ranked) -> bool {
        self.heap.len() == self.k && self.heap.peek().is_some_and(|w| r >= w)
    }

    fn offer(&mut self, r: Ranked) {
        if self.rejects(&r) {
            return;
        }
        self.heap.push(r);
        if self.heap.len() > self.k {
            self.heap.pop();
        }
    }

    /// Best first.
    fn into_sorted(self) -> Vec<Tuple> {
        self.heap.into_sorted_vec().into_iter().map(|r| r.tuple).collect()
    }
}

/// Per anchor (in index order), the `top_k` violating tuples with the largest
/// loss; ties go to the lexicographically smaller tuple.
pub fn mine_hardest(
    pool: &MiningPool,
    cache: &MeanCache,
    current_epoch: usize,
    kind: TupleKind,
    margins: (f64, f64),
    top_k: usize,
) -> Result<TupleBatch> {
    cache.check(pool.len(), current_epoch)?;
    let mut out = TupleBatch::empty(kind);
    for anchor in 0..pool.len() {
        let tuples = match kind {
            TupleKind::Quadruplet => hardest_quadruplets(pool, cache, anchor, margins, top_k),
            _ => {
                let (cands, _) = pool.candidate_tuples(anchor, kind);
                let mut top = TopK::new(top_k);
                for t in cands.iter() {
                    let loss = tuple_loss(t, cache, margins);
                    if loss > VIOLATION_TOL {
                        top.offer(Ranked { loss, tuple: t });
                    }
                }
                top.into_sorted()
            }
        };
        for t in tuples {
            out.push(t)?;
        }
    }
    Ok(out)
}

/// Same result as exhaustive enumeration followed by [`TopK`], without
/// materializing all quadruplets: the loss splits into a term in `n1` and a
/// term in `n2`, so scanning `n2` by decreasing hinge lets each inner loop stop
/// at the first rejected candidate.
fn hardest_quadruplets(pool: &MiningPool, cache: &MeanCache, a: usize, (m1, m2): (f64, f64), k: usize) -> Vec<Tuple> {
    if pool.status(a) != AnchorStatus::Ok {
        return Vec::new();
    }
    let negs = pool.negatives(a);
    let ra = cache.row(a);
    let d_an: Vec<f64> = negs.iter().map(|&n| distance(ra, cache.row(n))).collect();
    let mut top = TopK::new(k);
    for &p in pool.positives(a) {
        let d_ap = distance(ra, cache.row(p));
        let h1: Vec<f64> = d_an.iter().map(|&d| (d_ap - d + m1).max(0.0)).collect();
        // n2 candidates valid w.r.t. p, ordered by (hinge desc, index asc)
        let mut n2s: Vec<(f64, usize)> = negs
            .iter()
            .zip(&d_an)
            .filter(|(&n2, _)| pool.label(p, n2) == PairLabel::Negative)
            .map(|(&n2, &d)| ((d_ap - d + m2).max(0.0), n2))
            .collect();
        n2s.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        for (idx, &n1) in negs.iter().enumerate() {
            for &(h2, n2) in &n2s {
                if n2 == n1 || pool.label(n1, n2) != PairLabel::Negative {
                    continue;
                }
                let loss = h1[idx] + h2;
                let r = Ranked {
                    loss,
                    tuple: Tuple::Quadruplet { a, p, n1, n2 },
                };
                if loss <= VIOLATION_TOL || top.rejects(&r) {
                    break;
                }
                top.offer(r);
            }
        }
    }
    top.into_sorted()
}
