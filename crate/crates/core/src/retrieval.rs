//! Exhaustive nearest-neighbor retrieval over probabilistic embeddings.

use std::collections::HashSet;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::{mls_score, squared_distance};
use crate::types::{EmbeddingDistribution, GeoTag};

const INDEX_MAGIC: &[u8; 8] = b"STUNIDX1";
pub const INDEX_VERSION: u32 = 1;

/// Mean of the variance vector.
pub fn uncertainty_scalar(dist: &EmbeddingDistribution) -> f64 {
    let v = dist.variance();
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<u64>,
    means: Array2<f64>,
    variances: Array2<f64>,
    geos: Vec<GeoTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: u64,
    pub candidates: Vec<u64>,
    /// Row of each candidate in the index.
    pub rows: Vec<usize>,
    /// Euclidean distances (ascending) or MLS scores (descending).
    pub scores: Vec<f64>,
    pub uncertainty: f64,
}

pub fn build_index(embeddings: &[EmbeddingDistribution], ids: &[u64], geos: &[GeoTag]) -> Result<EmbeddingIndex> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Data("cannot build an empty index".into()))?;
    if ids.len() != embeddings.len() || geos.len() != embeddings.len() {
        return Err(Error::DimensionMismatch {
            expected: embeddings.len(),
            got: if ids.len() != embeddings.len() {
                ids.len()
            } else {
                geos.len()
            },
        });
    }
    let d = first.dim();
    let mut seen = HashSet::with_capacity(ids.len());
    for &id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id));
        }
    }
    let mut means = Array2::zeros((embeddings.len(), d));
    let mut variances = Array2::zeros((embeddings.len(), d));
    for (r, e) in embeddings.iter().enumerate() {
        if e.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: e.dim(),
            });
        }
        means.row_mut(r).assign(&ArrayView1::from(e.mean()));
        variances.row_mut(r).assign(&ArrayView1::from(e.variance()));
    }
    Ok(EmbeddingIndex {
        ids: ids.to_vec(),
        means,
        variances,
        geos: geos.to_vec(),
    })
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn geos(&self) -> &[GeoTag] {
        &self.geos
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn variances(&self) -> &Array2<f64> {
        &self.variances
    }

    fn check_query(&self, query: &EmbeddingDistribution, k: usize) -> Result<()> {
        if query.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: query.dim(),
            });
        }
        if k > self.len() {
            return Err(Error::TopKTooLarge { k, n: self.len() });
        }
        Ok(())
    }

    fn ranked(
        &self,
        query_id: u64,
        query: &EmbeddingDistribution,
        mut scored: Vec<(f64, usize)>,
        k: usize,
        descending: bool,
    ) -> RetrievalResult {
        scored.sort_by(|a, b| {
            let primary = if descending {
                b.0.total_cmp(&a.0)
            } else {
                a.0.total_cmp(&b.0)
            };
            primary.then(self.ids[a.1].cmp(&self.ids[b.1]))
        });
        scored.truncate(k);
        RetrievalResult {
            query_id,
            candidates: scored.iter().map(|&(_, r)| self.ids[r]).collect(),
            rows: scored.iter().map(|&(_, r)| r).collect(),
            scores: scored.iter().map(|&(s, _)| s).collect(),
            uncertainty: uncertainty_scalar(query),
        }
    }

    /// The `k` nearest means by Euclidean distance; ties by ascending id.
    pub fn query_topk(&self, query_id: u64, query: &EmbeddingDistribution, k: usize) -> Result<RetrievalResult> {
        self.check_query(query, k)?;
        let q = ArrayView1::from(query.mean());
        let scored = self
            .means
            .rows()
            .into_iter()
            .enumerate()
            .map(|(r, m)| (squared_distance(q, m).sqrt(), r))
            .collect();
        Ok(self.ranked(query_id, query, scored, k, false))
    }

    /// The `k` highest mutual-likelihood scores; ties by ascending id.
    pub fn query_topk_mls(&self, query_id: u64, query: &EmbeddingDistribution, k: usize) -> Result<RetrievalResult> {
        self.check_query(query, k)?;
        let qm = ArrayView1::from(query.mean());
        let qv = ArrayView1::from(query.variance());
        let scored = (0..self.len())
            .map(|r| (mls_score(qm, qv, self.means.row(r), self.variances.row(r)), r))
            .collect();
        Ok(self.ranked(query_id, query, scored, k, true))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = self.means.dim();
        let mut out = Vec::with_capacity(32 + n * (8 + 16 * d + 16));
        out.extend_from_slice(INDEX_MAGIC);
        out.write_u32::<LittleEndian>(INDEX_VERSION).expect("vec write");
        out.write_u64::<LittleEndian>(n as u64).expect("vec write");
        out.write_u64::<LittleEndian>(d as u64).expect("vec write");
        for &id in &self.ids {
            out.write_u64::<LittleEndian>(id).expect("vec write");
        }
        for v in self.means.iter().chain(self.variances.iter()) {
            out.write_f64::<LittleEndian>(*v).expect("vec write");
        }
        for g in &self.geos {
            out.write_f64::<LittleEndian>(g.easting).expect("vec write");
            out.write_f64::<LittleEndian>(g.northing).expect("vec write");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("index file: {m}"));
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != INDEX_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        if version != INDEX_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = cur.read_u64::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        let d = cur.read_u64::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        let expected = 28 + n * 8 + 2 * n * d * 8 + 2 * n * 8;
        if bytes.len() != expected {
            return Err(bad(&format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let mut ids = vec![0u64; n];
        cur.read_u64_into::<LittleEndian>(&mut ids)
            .map_err(|_| bad("truncated ids"))?;
        let mut means = vec![0f64; n * d];
        cur.read_f64_into::<LittleEndian>(&mut means)
            .map_err(|_| bad("truncated means"))?;
        let mut vars = vec![0f64; n * d];
        cur.read_f64_into::<LittleEndian>(&mut vars)
            .map_err(|_| bad("truncated variances"))?;
        let mut geo = vec![0f64; 2 * n];
        cur.read_f64_into::<LittleEndian>(&mut geo)
            .map_err(|_| bad("truncated geo tags"))?;
        Ok(Self {
            ids,
            means: Array2::from_shape_vec((n, d), means).map_err(|e| bad(&e.to_string()))?,
            variances: Array2::from_shape_vec((n, d), vars).map_err(|e| bad(&e.to_string()))?,
            geos: geo.chunks(2).map(|c| GeoTag::new(c[0], c[1])).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
