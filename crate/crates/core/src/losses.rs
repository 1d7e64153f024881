//! Metric-learning losses for the teacher, the uncertainty-aware distillation
//! loss for the student, and the mutual likelihood score used by the PFE
//! baseline.
//!
//! Every batched loss takes one row per tuple member and returns a
//! [`LossValue`]; the `*_grad` variants additionally return the gradient of
//! `value` with respect to each input matrix.

use ndarray::{Array2, ArrayView1, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::EmbeddingDistribution;

/// Lower bound applied to variances inside logarithms and divisions.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub per_item: Vec<f64>,
}

impl LossValue {
    fn reduce(per_item: Vec<f64>, reduction: Reduction) -> Self {
        let sum: f64 = per_item.iter().sum();
        let value = match reduction {
            Reduction::Sum => sum,
            Reduction::Mean if per_item.is_empty() => 0.0,
            Reduction::Mean => sum / per_item.len() as f64,
        };
        Self { value, per_item }
    }
}

/// Batch reduction of per-item losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Sum,
}

impl Reduction {
    fn scale(&self, n: usize) -> f64 {
        match self {
            Reduction::Mean if n > 0 => 1.0 / n as f64,
            _ => 1.0,
        }
    }
}

pub fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    squared_distance(a, b).sqrt()
}

fn check_same_shape(dims: &[(usize, usize)]) -> Result<()> {
    let (rows, cols) = dims[0];
    for &(r, c) in &dims[1..] {
        if c != cols {
            return Err(Error::DimensionMismatch { expected: cols, got: c });
        }
        if r != rows {
            return Err(Error::DimensionMismatch { expected: rows, got: r });
        }
    }
    Ok(())
}

/// `(x - y) / ‖x - y‖`, zero when the points coincide.
fn unit_direction(x: ArrayView1<f64>, y: ArrayView1<f64>, d: f64) -> ndarray::Array1<f64> {
    if d > 0.0 {
        (&x - &y) / d
    } else {
        ndarray::Array1::zeros(x.len())
    }
}

/// Single contrastive term. The dissimilar branch is hinged at zero.
pub fn contrastive_item(a: ArrayView1<f64>, b: ArrayView1<f64>, similar: bool, margin: f64) -> f64 {
    let d2 = squared_distance(a, b);
    if similar {
        d2
    } else {
        (margin - d2).max(0.0)
    }
}

pub fn triplet_item(a: ArrayView1<f64>, p: ArrayView1<f64>, n: ArrayView1<f64>, margin: f64) -> f64 {
    (distance(a, p) - distance(a, n) + margin).max(0.0)
}

pub fn quadruplet_item(
    a: ArrayView1<f64>,
    p: ArrayView1<f64>,
    n1: ArrayView1<f64>,
    n2: ArrayView1<f64>,
    m1: f64,
    m2: f64,
) -> f64 {
    let d_ap = distance(a, p);
    let h1 = (d_ap - distance(a, n1) + m1).max(0.0);
    let h2 = (d_ap - distance(a, n2) + m2).max(0.0);
    h1 + h2
}

pub fn contrastive_loss(
    emb_i: ArrayView2<f64>,
    emb_j: ArrayView2<f64>,
    similar: &[bool],
    margin: f64,
) -> Result<LossValue> {
    contrastive_loss_grad(emb_i, emb_j, similar, margin).map(|(v, _)| v)
}

pub fn contrastive_loss_grad(
    emb_i: ArrayView2<f64>,
    emb_j: ArrayView2<f64>,
    similar: &[bool],
    margin: f64,
) -> Result<(LossValue, [Array2<f64>; 2])> {
    check_same_shape(&[emb_i.dim(), emb_j.dim()])?;
    if similar.len() != emb_i.nrows() {
        return Err(Error::DimensionMismatch {
            expected: emb_i.nrows(),
            got: similar.len(),
        });
    }
    let n = emb_i.nrows();
    let scale = Reduction::Mean.scale(n);
    let mut gi = Array2::zeros(emb_i.raw_dim());
    let mut gj = Array2::zeros(emb_j.raw_dim());
    let mut per_item = Vec::with_capacity(n);
    for k in 0..n {
        let (a, b) = (emb_i.row(k), emb_j.row(k));
        let d2 = squared_distance(a, b);
        let (loss, coeff) = if similar[k] {
            (d2, 1.0)
        } else if margin - d2 > 0.0 {
            (margin - d2, -1.0)
        } else {
            (0.0, 0.0)
        };
        per_item.push(loss);
        if coeff != 0.0 {
            let g = (&a - &b) * (2.0 * coeff * scale);
            gi.row_mut(k).assign(&g);
            gj.row_mut(k).assign(&(-g));
        }
    }
    Ok((LossValue::reduce(per_item, Reduction::Mean), [gi, gj]))
}

pub fn triplet_loss(
    anchor: ArrayView2<f64>,
    positive: ArrayView2<f64>,
    negative: ArrayView2<f64>,
    margin: f64,
) -> Result<LossValue> {
    triplet_loss_grad(anchor, positive, negative, margin).map(|(v, _)| v)
}

pub fn triplet_loss_grad(
    anchor: ArrayView2<f64>,
    positive: ArrayView2<f64>,
    negative: ArrayView2<f64>,
    margin: f64,
) -> Result<(LossValue, [Array2<f64>; 3])> {
    check_same_shape(&[anchor.dim(), positive.dim(), negative.dim()])?;
    let n = anchor.nrows();
    let scale = Reduction::Mean.scale(n);
    let mut ga = Array2::zeros(anchor.raw_dim());
    let mut gp = Array2::zeros(anchor.raw_dim());
    let mut gn = Array2::zeros(anchor.raw_dim());
    let mut per_item = Vec::with_capacity(n);
    for k in 0..n {
        let (a, p, ng) = (anchor.row(k), positive.row(k), negative.row(k));
        let d_ap = distance(a, p);
        let d_an = distance(a, ng);
        let hinge = d_ap - d_an + margin;
        if hinge > 0.0 {
            per_item.push(hinge);
            let u_ap = unit_direction(a, p, d_ap) * scale;
            let u_an = unit_direction(a, ng, d_an) * scale;
            ga.row_mut(k).assign(&(&u_ap - &u_an));
            gp.row_mut(k).assign(&(-&u_ap));
            gn.row_mut(k).assign(&u_an);
        } else {
            per_item.push(0.0);
        }
    }
    Ok((LossValue::reduce(per_item, Reduction::Mean), [ga, gp, gn]))
}

pub fn quadruplet_loss(
    anchor: ArrayView2<f64>,
    positive: ArrayView2<f64>,
    negative1: ArrayView2<f64>,
    negative2: ArrayView2<f64>,
    m1: f64,
    m2: f64,
) -> Result<LossValue> {
    quadruplet_loss_grad(anchor, positive, negative1, negative2, m1, m2).map(|(v, _)| v)
}

pub fn quadruplet_loss_grad(
    anchor: ArrayView2<f64>,
    positive: ArrayView2<f64>,
    negative1: ArrayView2<f64>,
    negative2: ArrayView2<f64>,
    m1: f64,
    m2: f64,
) -> Result<(LossValue, [Array2<f64>; 4])> {
    check_same_shape(&[anchor.dim(), positive.dim(), negative1.dim(), negative2.dim()])?;
    let n = anchor.nrows();
    let scale = Reduction::Mean.scale(n);
    let mut grads: [Array2<f64>; 4] = std::array::from_fn(|_| Array2::zeros(anchor.raw_dim()));
    let mut per_item = Vec::with_capacity(n);
    for k in 0..n {
        let a = anchor.row(k);
        let p = positive.row(k);
        let d_ap = distance(a, p);
        let u_ap = unit_direction(a, p, d_ap) * scale;
        let mut total = 0.0;
        for (slot, neg, margin) in [(2, negative1.row(k), m1), (3, negative2.row(k), m2)] {
            let d_an = distance(a, neg);
            let hinge = (d_ap - d_an + margin).max(0.0);
            total += hinge;
            if hinge > 0.0 {
                let u_an = unit_direction(a, neg, d_an) * scale;
                let mut ga = grads[0].row_mut(k);
                ga += &u_ap;
                ga -= &u_an;
                let mut gp = grads[1].row_mut(k);
                gp -= &u_ap;
                let mut gn = grads[slot].row_mut(k);
                gn += &u_an;
            }
        }
        per_item.push(total);
    }
    Ok((LossValue::reduce(per_item, Reduction::Mean), grads))
}

/// Per-item uncertainty-aware distillation loss, summed over dimensions.
pub fn student_item(student_mean: ArrayView1<f64>, teacher_mean: ArrayView1<f64>, student_var: ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    Zip::from(student_mean)
        .and(teacher_mean)
        .and(student_var)
        .for_each(|&s, &t, &v| {
            let v = v.max(VARIANCE_FLOOR);
            acc += (s - t) * (s - t) / (2.0 * v) + 0.5 * v.ln();
        });
    acc
}

pub fn student_loss(
    student_mean: ArrayView2<f64>,
    teacher_mean: ArrayView2<f64>,
    student_var: ArrayView2<f64>,
    reduction: Reduction,
) -> Result<LossValue> {
    student_loss_grad(student_mean, teacher_mean, student_var, reduction).map(|(v, _)| v)
}

/// Gradient of the student loss. There is deliberately no teacher field: the
/// teacher mean is a constant target.
#[derive(Debug, Clone)]
pub struct StudentLossGrad {
    pub mean: Array2<f64>,
    pub var: Array2<f64>,
}

pub fn student_loss_grad(
    student_mean: ArrayView2<f64>,
    teacher_mean: ArrayView2<f64>,
    student_var: ArrayView2<f64>,
    reduction: Reduction,
) -> Result<(LossValue, StudentLossGrad)> {
    check_same_shape(&[student_mean.dim(), teacher_mean.dim(), student_var.dim()])?;
    if let Some(&bad) = student_var.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::NonPositiveVariance(bad));
    }
    let n = student_mean.nrows();
    let scale = reduction.scale(n);
    let mut g_mean = Array2::zeros(student_mean.raw_dim());
    let mut g_var = Array2::zeros(student_mean.raw_dim());
    let per_item = (0..n)
        .map(|k| student_item(student_mean.row(k), teacher_mean.row(k), student_var.row(k)))
        .collect();
    Zip::from(&mut g_mean)
        .and(&mut g_var)
        .and(student_mean)
        .and(teacher_mean)
        .and(student_var)
        .for_each(|gm, gv, &s, &t, &v| {
            let r = s - t;
            *gm = scale * r / v.max(VARIANCE_FLOOR);
            // The floor is a clamp: no gradient flows below it.
            *gv = if v > VARIANCE_FLOOR {
                scale * (-r * r / (2.0 * v * v) + 0.5 / v)
            } else {
                0.0
            };
        });
    Ok((
        LossValue::reduce(per_item, reduction),
        StudentLossGrad {
            mean: g_mean,
            var: g_var,
        },
    ))
}

/// Mutual likelihood score between two diagonal Gaussians, additive constant
/// dropped. Higher means more likely to share a latent embedding.
pub fn mls_score(mu_i: ArrayView1<f64>, var_i: ArrayView1<f64>, mu_j: ArrayView1<f64>, var_j: ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    Zip::from(mu_i)
        .and(var_i)
        .and(mu_j)
        .and(var_j)
        .for_each(|&a, &va, &b, &vb| {
            let s = (va + vb).max(VARIANCE_FLOOR);
            acc += (a - b) * (a - b) / s + s.ln();
        });
    -0.5 * acc
}

pub fn mls_loss(dist_i: &EmbeddingDistribution, dist_j: &EmbeddingDistribution) -> Result<f64> {
    if dist_i.dim() != dist_j.dim() {
        return Err(Error::DimensionMismatch {
            expected: dist_i.dim(),
            got: dist_j.dim(),
        });
    }
    for &v in dist_i.variance().iter().chain(dist_j.variance()) {
        if !(v > 0.0) {
            return Err(Error::NonPositiveVariance(v));
        }
    }
    Ok(mls_score(
        ArrayView1::from(dist_i.mean()),
        ArrayView1::from(dist_i.variance()),
        ArrayView1::from(dist_j.mean()),
        ArrayView1::from(dist_j.variance()),
    ))
}

/// Batched negative MLS (the quantity PFE minimizes over positive pairs),
/// mean-reduced, with gradients for `[mu_i, var_i, mu_j, var_j]`.
pub fn negative_mls_loss_grad(
    mu_i: ArrayView2<f64>,
    var_i: ArrayView2<f64>,
    mu_j: ArrayView2<f64>,
    var_j: ArrayView2<f64>,
) -> Result<(LossValue, [Array2<f64>; 4])> {
    check_same_shape(&[mu_i.dim(), var_i.dim(), mu_j.dim(), var_j.dim()])?;
    if let Some(&bad) = var_i.iter().chain(var_j.iter()).find(|&&v| !(v > 0.0)) {
        return Err(Error::NonPositiveVariance(bad));
    }
    let n = mu_i.nrows();
    let scale = Reduction::Mean.scale(n);
    let per_item = (0..n)
        .map(|k| -mls_score(mu_i.row(k), var_i.row(k), mu_j.row(k), var_j.row(k)))
        .collect();
    let mut g_mu_i = Array2::zeros(mu_i.raw_dim());
    let mut g_var = Array2::zeros(mu_i.raw_dim());
    Zip::from(&mut g_mu_i)
        .and(&mut g_var)
        .and(mu_i)
        .and(var_i)
        .and(mu_j)
        .and(var_j)
        .for_each(|gm, gv, &a, &va, &b, &vb| {
            let s = va + vb;
            if s > VARIANCE_FLOOR {
                *gm = scale * (a - b) / s;
                *gv = scale * 0.5 * (1.0 / s - (a - b) * (a - b) / (s * s));
            } else {
                *gm = scale * (a - b) / VARIANCE_FLOOR;
                *gv = 0.0;
            }
        });
    let g_mu_j = -&g_mu_i;
    let g_var_j = g_var.clone();
    Ok((
        LossValue::reduce(per_item, Reduction::Mean),
        [g_mu_i, g_var, g_mu_j, g_var_j],
    ))
}
