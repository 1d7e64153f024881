//! Domain types shared by every stage of the pipeline.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Radii};
use crate::error::{Error, Result};

/// Planar (already projected) geographic position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTag {
    pub easting: f64,
    pub northing: f64,
}

impl GeoTag {
    pub fn new(easting: f64, northing: f64) -> Self {
        Self { easting, northing }
    }

    pub fn is_finite(&self) -> bool {
        self.easting.is_finite() && self.northing.is_finite()
    }
}

/// Euclidean planar distance in meters.
pub fn geo_distance(a: GeoTag, b: GeoTag) -> f64 {
    let de = a.easting - b.easting;
    let dn = a.northing - b.northing;
    (de * de + dn * dn).sqrt()
}

/// One geo-tagged observation. The image is stored channels × height × width.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaceSample {
    pub id: u64,
    pub image: Array3<f32>,
    pub geo: GeoTag,
}

/// Ground-truth relation between two samples under the radius rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairLabel {
    Positive,
    Negative,
    /// Inside the annulus between the positive and negative radius.
    Ignore,
}

impl Radii {
    pub fn label(&self, distance: f64) -> PairLabel {
        if distance <= self.positive {
            PairLabel::Positive
        } else if distance > self.negative {
            PairLabel::Negative
        } else {
            PairLabel::Ignore
        }
    }
}

pub fn label_of_pair(q: &PlaceSample, c: &PlaceSample, cfg: &ExperimentConfig) -> PairLabel {
    cfg.radii.label(geo_distance(q.geo, c.geo))
}

/// Tolerance on the unit norm of an embedding mean.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// Gaussian embedding with diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDistribution {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl EmbeddingDistribution {
    /// Checks the unit-norm mean and the `(0, 1]` variance range.
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: variance.len(),
            });
        }
        if mean.len() < 2 {
            return Err(Error::Shape(format!(
                "embedding dimension must be at least 2, got {}",
                mean.len()
            )));
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
            return Err(Error::Shape(format!("embedding mean is not unit norm ({norm})")));
        }
        if let Some(&bad) = variance.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::NonPositiveVariance(bad));
        }
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TupleKind {
    Doublet,
    Triplet,
    Quadruplet,
}

/// One mined tuple, indices into the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tuple {
    Doublet { i: usize, j: usize, similar: bool },
    Triplet { a: usize, p: usize, n: usize },
    Quadruplet { a: usize, p: usize, n1: usize, n2: usize },
}

impl Tuple {
    pub fn kind(&self) -> TupleKind {
        match self {
            Tuple::Doublet { .. } => TupleKind::Doublet,
            Tuple::Triplet { .. } => TupleKind::Triplet,
            Tuple::Quadruplet { .. } => TupleKind::Quadruplet,
        }
    }

    pub fn indices(&self) -> Vec<usize> {
        match *self {
            Tuple::Doublet { i, j, .. } => vec![i, j],
            Tuple::Triplet { a, p, n } => vec![a, p, n],
            Tuple::Quadruplet { a, p, n1, n2 } => vec![a, p, n1, n2],
        }
    }
}

/// Columnar batch of tuples of a single kind. Fields a kind does not use stay empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TupleBatch {
    pub kind: TupleKind,
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives1: Vec<usize>,
    pub negatives2: Vec<usize>,
    /// Similarity flags, doublets only.
    pub similar: Vec<bool>,
}

impl TupleBatch {
    pub fn empty(kind: TupleKind) -> Self {
        Self {
            kind,
            anchors: Vec::new(),
            positives: Vec::new(),
            negatives1: Vec::new(),
            negatives2: Vec::new(),
            similar: Vec::new(),
        }
    }

    /// Builds a batch from tuples; all tuples must share `kind`.
    pub fn from_tuples(kind: TupleKind, tuples: impl IntoIterator<Item = Tuple>) -> Result<Self> {
        let mut batch = Self::empty(kind);
        for t in tuples {
            batch.push(t)?;
        }
        Ok(batch)
    }

    pub fn push(&mut self, t: Tuple) -> Result<()> {
        if t.kind() != self.kind {
            return Err(Error::Shape(format!(
                "cannot push a {:?} into a {:?} batch",
                t.kind(),
                self.kind
            )));
        }
        match t {
            Tuple::Doublet { i, j, similar } => {
                self.anchors.push(i);
                self.positives.push(j);
                self.similar.push(similar);
            }
            Tuple::Triplet { a, p, n } => {
                self.anchors.push(a);
                self.positives.push(p);
                self.negatives1.push(n);
            }
            Tuple::Quadruplet { a, p, n1, n2 } => {
                self.anchors.push(a);
                self.positives.push(p);
                self.negatives1.push(n1);
                self.negatives2.push(n2);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Doublets keep the second element in `positives` regardless of the flag.
    pub fn get(&self, k: usize) -> Tuple {
        match self.kind {
            TupleKind::Doublet => Tuple::Doublet {
                i: self.anchors[k],
                j: self.positives[k],
                similar: self.similar[k],
            },
            TupleKind::Triplet => Tuple::Triplet {
                a: self.anchors[k],
                p: self.positives[k],
                n: self.negatives1[k],
            },
            TupleKind::Quadruplet => Tuple::Quadruplet {
                a: self.anchors[k],
                p: self.positives[k],
                n1: self.negatives1[k],
                n2: self.negatives2[k],
            },
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Tuple> + '_ {
        (0..self.len()).map(move |k| self.get(k))
    }

    /// Checks field lengths for the kind and that every index is below `n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let len = self.len();
        let (p, n1, n2, s) = match self.kind {
            TupleKind::Doublet => (len, 0, 0, len),
            TupleKind::Triplet => (len, len, 0, 0),
            TupleKind::Quadruplet => (len, len, len, 0),
        };
        let lens = [
            (self.positives.len(), p),
            (self.negatives1.len(), n1),
            (self.negatives2.len(), n2),
            (self.similar.len(), s),
        ];
        for (got, expected) in lens {
            if got != expected {
                return Err(Error::DimensionMismatch { expected, got });
            }
        }
        let all = self
            .anchors
            .iter()
            .chain(&self.positives)
            .chain(&self.negatives1)
            .chain(&self.negatives2);
        if let Some(&bad) = all.into_iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("tuple index {bad} out of range for {n} samples")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample_at(id: u64, e: f64, n: f64) -> PlaceSample {
        PlaceSample {
            id,
            image: Array3::zeros((1, 1, 1)),
            geo: GeoTag::new(e, n),
        }
    }

    #[test]
    fn geo_distance_examples() {
        assert_eq!(geo_distance(GeoTag::new(0.0, 0.0), GeoTag::new(0.0, 0.0)), 0.0);
        assert_eq!(geo_distance(GeoTag::new(0.0, 0.0), GeoTag::new(3.0, 4.0)), 5.0);
    }

    #[test]
    fn geo_distance_matches_sqrt_of_squares() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a = GeoTag::new(rng.gen_range(-1e4..1e4), rng.gen_range(-1e4..1e4));
            let b = GeoTag::new(rng.gen_range(-1e4..1e4), rng.gen_range(-1e4..1e4));
            let oracle = ((a.easting - b.easting).powi(2) + (a.northing - b.northing).powi(2)).sqrt();
            let d = geo_distance(a, b);
            assert_eq!(d, oracle);
            assert_eq!(d, geo_distance(b, a));
        }
    }

    #[test]
    fn pair_labels_follow_radii() {
        let cfg = ExperimentConfig::default();
        let q = sample_at(0, 0.0, 0.0);
        assert_eq!(label_of_pair(&q, &sample_at(1, 0.0, 0.0), &cfg), PairLabel::Positive);
        assert_eq!(label_of_pair(&q, &sample_at(2, 30.0, 0.0), &cfg), PairLabel::Negative);
        assert_eq!(label_of_pair(&q, &sample_at(3, 0.0, 17.0), &cfg), PairLabel::Ignore);
    }

    #[test]
    fn pair_labels_are_monotone_in_distance() {
        let radii = Radii {
            positive: 10.0,
            negative: 25.0,
        };
        let rank = |l: PairLabel| match l {
            PairLabel::Positive => 0,
            PairLabel::Ignore => 1,
            PairLabel::Negative => 2,
        };
        let mut prev = 0;
        for step in 0..4000 {
            let d = step as f64 * 0.01;
            let r = rank(radii.label(d));
            assert!(r >= prev, "label went backwards at {d}");
            prev = r;
        }
        assert_eq!(prev, 2);
    }

    #[test]
    fn embedding_distribution_invariants() {
        let s = 0.5f64.sqrt();
        assert!(EmbeddingDistribution::new(vec![s, s], vec![0.5, 1.0]).is_ok());
        assert!(EmbeddingDistribution::new(vec![1.0, 1.0], vec![0.5, 0.5]).is_err());
        assert!(matches!(
            EmbeddingDistribution::new(vec![s, s], vec![0.0, 0.5]),
            Err(Error::NonPositiveVariance(_))
        ));
        assert!(EmbeddingDistribution::new(vec![s, s], vec![0.5, 1.5]).is_err());
        assert!(EmbeddingDistribution::new(vec![s, s], vec![0.5]).is_err());
    }

    #[test]
    fn tuple_batch_validation() {
        let mut b = TupleBatch::empty(TupleKind::Quadruplet);
        b.push(Tuple::Quadruplet {
            a: 0,
            p: 1,
            n1: 2,
            n2: 3,
        })
        .unwrap();
        assert!(b.validate(4).is_ok());
        assert!(b.validate(3).is_err());
        assert!(b.push(Tuple::Triplet { a: 0, p: 1, n: 2 }).is_err());
        b.negatives2.clear();
        assert!(b.validate(4).is_err());
        assert_eq!(
            TupleBatch::from_tuples(
                TupleKind::Doublet,
                [Tuple::Doublet {
                    i: 0,
                    j: 1,
                    similar: true
                }]
            )
            .unwrap()
            .get(0),
            Tuple::Doublet {
                i: 0,
                j: 1,
                similar: true
            }
        );
    }
}
