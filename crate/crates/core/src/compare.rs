//! Runs every method through the same evaluation path and tabulates the results.

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, LossKind};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, CutoffValue, MatchMode, MetricsReport};
use crate::model::{to_distributions, Checkpoint, NetKind, Network, StudentNet, TeacherNet};
use crate::types::{EmbeddingDistribution, PlaceSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Standard,
    Stun,
    McDropout,
    PfeWithoutMls,
    PfeWithMls,
}

impl Method {
    pub fn name(&self, loss: LossKind) -> String {
        match self {
            Method::Standard => format!("Standard {}", loss.label()),
            Method::Stun if loss == LossKind::Triplet => "STUN".into(),
            Method::Stun => format!("STUN ({})", loss.label()),
            Method::McDropout => "MC Dropout".into(),
            Method::PfeWithoutMls => "PFE w/o MLS".into(),
            Method::PfeWithMls => "PFE w/ MLS".into(),
        }
    }

    pub fn for_checkpoint(kind: NetKind, mls_match: bool) -> Result<Self> {
        match (kind, mls_match) {
            (NetKind::Teacher, false) => Ok(Method::Standard),
            (NetKind::Student, false) => Ok(Method::Stun),
            (NetKind::McDropout, false) => Ok(Method::McDropout),
            (NetKind::Pfe, false) => Ok(Method::PfeWithoutMls),
            (NetKind::Pfe, true) => Ok(Method::PfeWithMls),
            (k, true) => Err(Error::Config(format!("MLS matching needs a PFE checkpoint, got {k:?}"))),
        }
    }

    pub fn match_mode(&self) -> MatchMode {
        if *self == Method::PfeWithMls {
            MatchMode::Mls
        } else {
            MatchMode::Euclidean
        }
    }
}

/// Teacher means wrapped as distributions with unit variance (the variance
/// carries no information and is never reported).
pub fn teacher_distributions(teacher: &TeacherNet, samples: &[PlaceSample]) -> Result<Vec<EmbeddingDistribution>> {
    let m = teacher.encode(samples)?;
    to_distributions(&m, &ndarray::Array2::ones(m.raw_dim()))
}

/// A trained network ready to embed samples.
#[derive(Debug, Clone)]
pub enum Embedder {
    Deterministic(TeacherNet),
    Probabilistic(StudentNet),
    McDropout { net: TeacherNet, passes: usize, seed: u64 },
}

impl Embedder {
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &ExperimentConfig) -> Result<Self> {
        Ok(match ckpt.kind {
            NetKind::Teacher => Embedder::Deterministic(ckpt.to_teacher()?),
            NetKind::Student | NetKind::Pfe => Embedder::Probabilistic(ckpt.to_student()?),
            NetKind::McDropout => Embedder::McDropout {
                net: ckpt.to_teacher()?,
                passes: cfg.mc_dropout.passes,
                seed: cfg.seed,
            },
        })
    }

    pub fn embedding_dim(&self) -> usize {
        match self {
            Embedder::Deterministic(n) | Embedder::McDropout { net: n, .. } => n.spec().embedding_dim,
            Embedder::Probabilistic(n) => n.spec().embedding_dim,
        }
    }

    pub fn has_uncertainty(&self) -> bool {
        !matches!(self, Embedder::Deterministic(_))
    }

    /// `stream` separates the dropout randomness of database and query passes.
    pub fn embed(&self, samples: &[PlaceSample], stream: u64) -> Result<Vec<EmbeddingDistribution>> {
        match self {
            Embedder::Deterministic(n) => teacher_distributions(n, samples),
            Embedder::Probabilistic(n) => n.encode(samples),
            Embedder::McDropout { net, passes, seed } => net.mc_dropout_encode(samples, *passes, seed ^ stream),
        }
    }
}

/// Evaluates one method on the dataset's database/query split.
pub fn evaluate_method(
    method: Method,
    embedder: &Embedder,
    data: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<MetricsReport> {
    let db = data.samples(Split::Database);
    let qs = data.samples(Split::Query);
    let db_emb = embedder.embed(&db, 0)?;
    let q_emb = embedder.embed(&qs, 1)?;
    evaluate(
        &method.name(cfg.loss),
        &db,
        &db_emb,
        &qs,
        &q_emb,
        embedder.has_uncertainty(),
        method.match_mode(),
        cfg,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub recall: Vec<CutoffValue>,
    pub map: Vec<CutoffValue>,
    pub ap: f64,
    /// Absent for methods without an uncertainty estimate.
    pub ece_recall: Option<Vec<CutoffValue>>,
    pub ece_map: Option<Vec<CutoffValue>>,
    pub ece_ap: Option<f64>,
}

impl From<&MetricsReport> for ComparisonRow {
    fn from(r: &MetricsReport) -> Self {
        Self {
            method: r.method.clone(),
            recall: r.recall.clone(),
            map: r.map.clone(),
            ap: r.ap,
            ece_recall: r.has_uncertainty.then(|| r.ece_recall.clone()),
            ece_map: r.has_uncertainty.then(|| r.ece_map.clone()),
            ece_ap: if r.has_uncertainty { r.ece_ap } else { None },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub num_queries: usize,
    pub depth: usize,
    pub bins: usize,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    /// All reports must share the query set size, depth and bin count.
    pub fn from_reports(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Config("comparison needs at least one method".into()))?;
        for r in reports {
            if (r.num_queries, r.depth, r.bins) != (first.num_queries, first.depth, first.bins) {
                return Err(Error::Config(format!(
                    "{} was evaluated on a different query set, depth or bin count",
                    r.method
                )));
            }
        }
        Ok(Self {
            num_queries: first.num_queries,
            depth: first.depth,
            bins: first.bins,
            rows: reports.iter().map(ComparisonRow::from).collect(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Aligned plain-text table; missing ECE entries print as `-`.
    pub fn to_text(&self) -> String {
        let triple = |v: &[CutoffValue]| {
            v.iter()
                .map(|c| format!("{:.3}", c.value))
                .collect::<Vec<_>>()
                .join(" / ")
        };
        let header_n = |prefix: &str| {
            let ns = self
                .rows
                .first()
                .map(|r| r.recall.iter().map(|c| c.n.to_string()).collect::<Vec<_>>().join("/"))
                .unwrap_or_default();
            format!("{prefix}@{ns}")
        };
        let headers = vec![
            "Method".to_string(),
            header_n("r"),
            header_n("mAP"),
            "AP".to_string(),
            format!("ECE {}", header_n("r")),
            format!("ECE {}", header_n("mAP")),
            "ECE AP".to_string(),
        ];
        let mut cells: Vec<Vec<String>> = vec![headers];
        for r in &self.rows {
            cells.push(vec![
                r.method.clone(),
                triple(&r.recall),
                triple(&r.map),
                format!("{:.3}", r.ap),
                r.ece_recall.as_deref().map_or("-".into(), triple),
                r.ece_map.as_deref().map_or("-".into(), triple),
                r.ece_ap.map_or("-".into(), |v| format!("{v:.3}")),
            ]);
        }
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell:<w$}"))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
                out.push('\n');
            }
        }
        out
    }
}

/// Evaluates each `(checkpoint, mls_match)` pair and tabulates the rows in order.
pub fn compare(methods: &[(Checkpoint, bool)], data: &Dataset, cfg: &ExperimentConfig) -> Result<ComparisonTable> {
    let mut reports = Vec::with_capacity(methods.len());
    let mut dim = None;
    for (ckpt, mls) in methods {
        let method = Method::for_checkpoint(ckpt.kind, *mls)?;
        let embedder = Embedder::from_checkpoint(ckpt, cfg)?;
        let d = embedder.embedding_dim();
        if *dim.get_or_insert(d) != d {
            return Err(Error::DimensionMismatch {
                expected: dim.unwrap_or(d),
                got: d,
            });
        }
        reports.push(evaluate_method(method, &embedder, data, cfg)?);
    }
    ComparisonTable::from_reports(&reports)
}
