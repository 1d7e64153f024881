use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stun_core::losses::{
    contrastive_loss, contrastive_loss_grad, distance, mls_loss, negative_mls_loss_grad, quadruplet_loss,
    quadruplet_loss_grad, student_item, student_loss, student_loss_grad, triplet_loss, triplet_loss_grad, Reduction,
};
use stun_core::EmbeddingDistribution;

use super::Check;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const EXAMPLE_TOL: f64 = 1e-6;
const BATCH: usize = 3;
const DIM: usize = 6;

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0f64..1.0));
    for mut row in m.rows_mut() {
        let norm: f64 = row.dot(&row).sqrt();
        row /= norm;
    }
    m
}

pub fn variances(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.gen_range(0.05..1.0))
}

fn norm(a: &Array2<f64>, b: &Array2<f64>, k: usize) -> f64 {
    let mut acc = 0.0;
    for c in 0..a.ncols() {
        acc += (a[[k, c]] - b[[k, c]]) * (a[[k, c]] - b[[k, c]]);
    }
    acc.sqrt()
}

/// Central differences of `f` with respect to every entry of `inputs[slot]`.
fn numeric_grad(f: &dyn Fn(&[Array2<f64>]) -> f64, inputs: &[Array2<f64>], slot: usize) -> Array2<f64> {
    let mut g = Array2::zeros(inputs[slot].raw_dim());
    for idx in 0..inputs[slot].len() {
        let (r, c) = (idx / inputs[slot].ncols(), idx % inputs[slot].ncols());
        let mut plus = inputs.to_vec();
        plus[slot][[r, c]] += STEP;
        let mut minus = inputs.to_vec();
        minus[slot][[r, c]] -= STEP;
        g[[r, c]] = (f(&plus) - f(&minus)) / (2.0 * STEP);
    }
    g
}

fn grads_agree(analytic: &Array2<f64>, numeric: &Array2<f64>, what: &str) -> Result<(), String> {
    for (a, n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs()).max(1e-2);
        ensure!((a - n).abs() <= REL_TOL * scale, "{what}: analytic {a} vs numeric {n}");
    }
    Ok(())
}

fn close(got: f64, want: f64, what: &str) -> Result<(), String> {
    ensure!((got - want).abs() <= EXAMPLE_TOL, "{what}: {got}, expected {want}");
    Ok(())
}

/// Hinges are not differentiable at their kink; inputs within this distance of
/// one are redrawn.
fn near_kink(x: f64) -> bool {
    x.abs() < 1e-3
}

/// Hand examples plus agreement with per-item loop formulas on random batches.
pub fn check_loss_examples(seed: u64, trials: usize) -> Check {
    let e0 = array![[1.0, 0.0]];
    let e1 = array![[0.0, 1.0]];
    let v = |x: f64| array![[x, x]];
    close(
        contrastive_loss(e0.view(), e0.view(), &[true], 0.4).unwrap().value,
        0.0,
        "contrastive similar identical",
    )?;
    close(
        contrastive_loss(e0.view(), e0.view(), &[false], 0.4).unwrap().value,
        0.4,
        "contrastive dissimilar identical",
    )?;
    close(
        contrastive_loss(e0.view(), e1.view(), &[true], 0.4).unwrap().value,
        2.0,
        "contrastive similar orthogonal",
    )?;
    close(
        contrastive_loss(e0.view(), e1.view(), &[false], 0.4).unwrap().value,
        0.0,
        "contrastive dissimilar orthogonal",
    )?;
    close(
        triplet_loss(e0.view(), e0.view(), e1.view(), 0.1).unwrap().value,
        0.0,
        "triplet easy",
    )?;
    close(
        triplet_loss(e0.view(), e0.view(), e0.view(), 0.1).unwrap().value,
        0.1,
        "triplet identical",
    )?;
    close(
        triplet_loss(e0.view(), e1.view(), e0.view(), 0.1).unwrap().value,
        2f64.sqrt() + 0.1,
        "triplet swapped",
    )?;
    close(
        quadruplet_loss(e0.view(), e0.view(), e0.view(), e0.view(), 0.1, 0.1)
            .unwrap()
            .value,
        0.2,
        "quadruplet identical",
    )?;
    close(
        quadruplet_loss(e0.view(), e0.view(), e1.view(), e1.view(), 0.1, 0.1)
            .unwrap()
            .value,
        0.0,
        "quadruplet easy",
    )?;
    close(
        student_loss(e0.view(), e0.view(), v(1.0).view(), Reduction::Mean)
            .unwrap()
            .value,
        0.0,
        "student exact, unit variance",
    )?;
    close(
        student_loss(
            array![[1.0]].view(),
            array![[0.0]].view(),
            array![[1.0]].view(),
            Reduction::Mean,
        )
        .unwrap()
        .value,
        0.5,
        "student unit residual, unit variance",
    )?;
    close(
        student_loss(e0.view(), e0.view(), v(0.5).view(), Reduction::Mean)
            .unwrap()
            .value,
        0.5f64.ln(),
        "student exact, variance 0.5",
    )?;
    let half = EmbeddingDistribution::new(vec![1.0, 0.0], vec![0.5, 0.5]).unwrap();
    close(mls_loss(&half, &half).unwrap(), 0.0, "MLS identical, variances 0.5")?;
    let other = EmbeddingDistribution::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
    close(mls_loss(&half, &other).unwrap(), -1.0, "MLS orthogonal, variances 0.5")?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let [a, b, c, d] = [(); 4].map(|_| unit_rows(&mut rng, BATCH, DIM));
        let (va, vb) = (variances(&mut rng, BATCH, DIM), variances(&mut rng, BATCH, DIM));
        let similar: Vec<bool> = (0..BATCH).map(|_| rng.gen()).collect();
        let (m1, m2) = (rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5));
        let (mut con, mut tri, mut quad, mut stu) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..BATCH {
            let dab = norm(&a, &b, k);
            con += if similar[k] {
                dab * dab
            } else {
                (m1 - dab * dab).max(0.0)
            };
            tri += (dab - norm(&a, &c, k) + m1).max(0.0);
            quad += (dab - norm(&a, &c, k) + m1).max(0.0) + (dab - norm(&a, &d, k) + m2).max(0.0);
            for j in 0..DIM {
                let r = a[[k, j]] - b[[k, j]];
                stu += r * r / (2.0 * va[[k, j]]) + 0.5 * va[[k, j]].ln();
            }
            let mut mls = 0.0;
            for j in 0..DIM {
                let s = va[[k, j]] + vb[[k, j]];
                mls += (a[[k, j]] - b[[k, j]]).powi(2) / s + s.ln();
            }
            let p = EmbeddingDistribution::new(a.row(k).to_vec(), va.row(k).to_vec()).unwrap();
            let q = EmbeddingDistribution::new(b.row(k).to_vec(), vb.row(k).to_vec()).unwrap();
            close(mls_loss(&p, &q).unwrap(), -0.5 * mls, "MLS")?;
        }
        let n = BATCH as f64;
        close(
            contrastive_loss(a.view(), b.view(), &similar, m1).unwrap().value,
            con / n,
            "contrastive",
        )?;
        close(
            triplet_loss(a.view(), b.view(), c.view(), m1).unwrap().value,
            tri / n,
            "triplet",
        )?;
        close(
            quadruplet_loss(a.view(), b.view(), c.view(), d.view(), m1, m2)
                .unwrap()
                .value,
            quad / n,
            "quadruplet",
        )?;
        close(
            student_loss(a.view(), b.view(), va.view(), Reduction::Mean)
                .unwrap()
                .value,
            stu / n,
            "student mean",
        )?;
        close(
            student_loss(a.view(), b.view(), va.view(), Reduction::Sum)
                .unwrap()
                .value,
            stu,
            "student sum",
        )?;
    }
    Ok(format!(
        "14 hand examples, {trials} random batches per loss within {EXAMPLE_TOL:e}"
    ))
}

pub fn check_contrastive_gradients(seed: u64, trials: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = 0.4;
    let mut checked = 0;
    while checked < trials {
        let inputs = vec![unit_rows(&mut rng, BATCH, DIM), unit_rows(&mut rng, BATCH, DIM)];
        let similar: Vec<bool> = (0..BATCH).map(|_| rng.gen()).collect();
        if (0..BATCH).any(|k| near_kink(margin - distance(inputs[0].row(k), inputs[1].row(k)).powi(2))) {
            continue;
        }
        let f = |x: &[Array2<f64>]| {
            contrastive_loss_grad(x[0].view(), x[1].view(), &similar, margin)
                .unwrap()
                .0
                .value
        };
        let (_, grads) = contrastive_loss_grad(inputs[0].view(), inputs[1].view(), &similar, margin).unwrap();
        for (slot, g) in grads.iter().enumerate() {
            grads_agree(g, &numeric_grad(&f, &inputs, slot), "contrastive")?;
        }
        checked += 1;
    }
    Ok(())
}

pub fn check_triplet_gradients(seed: u64, trials: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = 0.1;
    let mut checked = 0;
    while checked < trials {
        let inputs: Vec<_> = (0..3).map(|_| unit_rows(&mut rng, BATCH, DIM)).collect();
        if (0..BATCH).any(|k| {
            near_kink(
                distance(inputs[0].row(k), inputs[1].row(k)) - distance(inputs[0].row(k), inputs[2].row(k)) + margin,
            )
        }) {
            continue;
        }
        let f = |x: &[Array2<f64>]| {
            triplet_loss_grad(x[0].view(), x[1].view(), x[2].view(), margin)
                .unwrap()
                .0
                .value
        };
        let (_, grads) = triplet_loss_grad(inputs[0].view(), inputs[1].view(), inputs[2].view(), margin).unwrap();
        for (slot, g) in grads.iter().enumerate() {
            grads_agree(g, &numeric_grad(&f, &inputs, slot), "triplet")?;
        }
        checked += 1;
    }
    Ok(())
}

pub fn check_quadruplet_gradients(seed: u64, trials: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m1, m2) = (0.1, 0.1);
    let mut checked = 0;
    while checked < trials {
        let inputs: Vec<_> = (0..4).map(|_| unit_rows(&mut rng, BATCH, DIM)).collect();
        if (0..BATCH).any(|k| {
            let d_ap = distance(inputs[0].row(k), inputs[1].row(k));
            near_kink(d_ap - distance(inputs[0].row(k), inputs[2].row(k)) + m1)
                || near_kink(d_ap - distance(inputs[0].row(k), inputs[3].row(k)) + m2)
        }) {
            continue;
        }
        let f = |x: &[Array2<f64>]| {
            quadruplet_loss_grad(x[0].view(), x[1].view(), x[2].view(), x[3].view(), m1, m2)
                .unwrap()
                .0
                .value
        };
        let (_, grads) = quadruplet_loss_grad(
            inputs[0].view(),
            inputs[1].view(),
            inputs[2].view(),
            inputs[3].view(),
            m1,
            m2,
        )
        .unwrap();
        for (slot, g) in grads.iter().enumerate() {
            grads_agree(g, &numeric_grad(&f, &inputs, slot), "quadruplet")?;
        }
        checked += 1;
    }
    Ok(())
}

pub fn check_student_gradients(seed: u64, trials: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let reduction = if trial % 2 == 0 {
            Reduction::Mean
        } else {
            Reduction::Sum
        };
        let inputs = vec![
            unit_rows(&mut rng, BATCH, DIM),
            unit_rows(&mut rng, BATCH, DIM),
            variances(&mut rng, BATCH, DIM),
        ];
        let f = |x: &[Array2<f64>]| {
            student_loss_grad(x[0].view(), x[1].view(), x[2].view(), reduction)
                .unwrap()
                .0
                .value
        };
        let (_, g) = student_loss_grad(inputs[0].view(), inputs[1].view(), inputs[2].view(), reduction).unwrap();
        grads_agree(&g.mean, &numeric_grad(&f, &inputs, 0), "student mean")?;
        grads_agree(&g.var, &numeric_grad(&f, &inputs, 2), "student variance")?;
    }
    Ok(())
}

pub fn check_mls_gradients(seed: u64, trials: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let inputs = vec![
            unit_rows(&mut rng, BATCH, DIM),
            variances(&mut rng, BATCH, DIM),
            unit_rows(&mut rng, BATCH, DIM),
            variances(&mut rng, BATCH, DIM),
        ];
        let f = |x: &[Array2<f64>]| {
            negative_mls_loss_grad(x[0].view(), x[1].view(), x[2].view(), x[3].view())
                .unwrap()
                .0
                .value
        };
        let (_, grads) =
            negative_mls_loss_grad(inputs[0].view(), inputs[1].view(), inputs[2].view(), inputs[3].view()).unwrap();
        for (slot, g) in grads.iter().enumerate() {
            grads_agree(g, &numeric_grad(&f, &inputs, slot), "negative MLS")?;
        }
    }
    Ok(())
}

pub fn check_loss_gradients(seed: u64, trials: usize) -> Check {
    check_contrastive_gradients(seed, trials)?;
    check_triplet_gradients(seed + 1, trials)?;
    check_quadruplet_gradients(seed + 2, trials)?;
    check_student_gradients(seed + 3, trials)?;
    check_mls_gradients(seed + 4, trials)?;
    Ok(format!(
        "5 losses x {trials} random inputs, relative tolerance {REL_TOL:e}"
    ))
}

/// Dense grid over the head's range (0, 1]; the optimum is r² clipped to 1.
pub fn check_variance_minimizer() -> Check {
    let grid: Vec<f64> = (1..=1000).map(|k| k as f64 * 1e-3).collect();
    let residuals = [0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 1.0, 1.5];
    for r in residuals {
        let s = Array1::from(vec![r]);
        let t = Array1::from(vec![0.0]);
        let best = grid
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let la = student_item(s.view(), t.view(), Array1::from(vec![a]).view());
                let lb = student_item(s.view(), t.view(), Array1::from(vec![b]).view());
                la.total_cmp(&lb)
            })
            .unwrap();
        let expected = (r * r).min(1.0);
        ensure!(
            (best - expected).abs() <= 1e-3,
            "r = {r}: grid minimizer {best}, expected {expected}"
        );
    }
    Ok(format!("{} residuals, grid step 1e-3", residuals.len()))
}
