//! Layers of the feature extractor with explicit forward/backward passes.
//!
//! Activations are `N × C × H × W` in standard (row-major) layout. Convolutions
//! go through im2col and a single GEMM per batch.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: Array4<f32>,
    pub bias: Option<Array1<f32>>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-uniform weights, zero bias.
    pub fn new<R: Rng>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let weight = Array4::from_shape_simple_fn((c_out, c_in, kernel, kernel), || dist.sample(rng));
        Self {
            weight,
            bias: bias.then(|| Array1::zeros(c_out)),
            stride,
            pad,
        }
    }

    fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, f32> {
        let (o, i, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("weights are contiguous")
    }

    fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, Array2<f32>) {
        let (n, _, h, w) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let cols = im2col(x, self.kernel(), self.stride, self.pad, ho, wo);
        let mut y = self.weight_matrix().dot(&cols);
        if let Some(b) = &self.bias {
            y += &b.view().insert_axis(Axis(1));
        }
        let o = y.nrows();
        let y = y
            .into_shape_with_order((o, n, ho, wo))
            .expect("gemm output is contiguous")
            .permuted_axes([1, 0, 2, 3]);
        (y.as_standard_layout().into_owned(), cols)
    }

    fn backward(
        &self,
        dy: &Array4<f32>,
        cols: &Array2<f32>,
        in_dim: (usize, usize, usize, usize),
        need_input_grad: bool,
    ) -> (Option<Array4<f32>>, LayerGrad) {
        let (n, o, ho, wo) = dy.dim();
        let dy_mat = dy
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, n * ho * wo))
            .expect("contiguous");
        let dw = dy_mat.dot(&cols.t());
        let dw = dw.into_shape_with_order(self.weight.raw_dim()).expect("weight shape");
        let db = self.bias.as_ref().map(|_| dy_mat.sum_axis(Axis(1)));
        let dx = need_input_grad.then(|| {
            let dcols = self.weight_matrix().t().dot(&dy_mat);
            col2im(&dcols, in_dim, self.kernel(), self.stride, self.pad, ho, wo)
        });
        (dx, LayerGrad::Conv { w: dw, b: db })
    }
}

fn im2col(x: &Array4<f32>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let p = ho * wo;
    let ncols = n * p;
    let mut cols = Array2::<f32>::zeros((c * k * k, ncols));
    let xs = x.as_slice().expect("standard layout input");
    let cs = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ci * k + ki) * k + kj;
                let row = &mut cs[r * ncols..(r + 1) * ncols];
                for b in 0..n {
                    let img = &xs[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src = &img[ih as usize * w..(ih as usize + 1) * w];
                        let dst = &mut row[b * p + oh * wo..b * p + (oh + 1) * wo];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                *d = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f32>,
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<f32> {
    let p = ho * wo;
    let ncols = n * p;
    let mut x = Array4::<f32>::zeros((n, c, h, w));
    let xs = x.as_slice_mut().expect("fresh array");
    let cs = cols.as_slice().expect("standard layout");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ci * k + ki) * k + kj;
                let row = &cs[r * ncols..(r + 1) * ncols];
                for b in 0..n {
                    let img = &mut xs[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst = &mut img[ih as usize * w..(ih as usize + 1) * w];
                        let src = &row[b * p + oh * wo..b * p + (oh + 1) * wo];
                        for (ow, s) in src.iter().enumerate() {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                dst[iw as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Batch normalization evaluated with stored statistics. Statistics can be
/// estimated from data until [`FrozenNorm::freeze`] is called; the affine
/// parameters are never trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub frozen: bool,
}

impl FrozenNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            frozen: false,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn scale_shift(&self) -> (Array1<f32>, Array1<f32>) {
        let scale = &self.gamma / &self.running_var.mapv(|v| (v + NORM_EPS).sqrt());
        let shift = &self.beta - &(&self.running_mean * &scale);
        (scale, shift)
    }

    fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (scale, shift) = self.scale_shift();
        let mut y = x.clone();
        for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (s, t) = (scale[c], shift[c]);
            plane.mapv_inplace(|v| v * s + t);
        }
        y
    }

    fn backward(&self, dy: &Array4<f32>) -> Array4<f32> {
        let (scale, _) = self.scale_shift();
        let mut dx = dy.clone();
        for (c, mut plane) in dx.axis_iter_mut(Axis(1)).enumerate() {
            let s = scale[c];
            plane.mapv_inplace(|v| v * s);
        }
        dx
    }

    /// Sets running statistics to the per-channel mean and biased variance of `x`.
    fn estimate(&mut self, x: &Array4<f32>) -> Result<()> {
        if self.frozen {
            return Err(Error::Architecture("normalization statistics are frozen".into()));
        }
        for (c, plane) in x.axis_iter(Axis(1)).enumerate() {
            let count = plane.len() as f64;
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / count;
            let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / count;
            self.running_mean[c] = mean as f32;
            self.running_var[c] = var as f32;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool {
    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, Vec<usize>) {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let xs = x.as_slice().expect("standard layout");
        let mut y = Array4::<f32>::zeros((n, c, ho, wo));
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let ys = y.as_slice_mut().expect("fresh array");
        for (plane_idx, (img, out)) in xs.chunks(h * w).zip(ys.chunks_mut(ho * wo)).enumerate() {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ki in 0..self.kernel {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let idx = ih as usize * w + iw as usize;
                            if img[idx] > best {
                                best = img[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[oh * wo + ow] = best;
                    argmax.push(plane_idx * h * w + best_idx);
                }
            }
        }
        (y, argmax)
    }

    fn backward(&self, dy: &Array4<f32>, argmax: &[usize], in_dim: (usize, usize, usize, usize)) -> Array4<f32> {
        let mut dx = Array4::<f32>::zeros(in_dim);
        let dxs = dx.as_slice_mut().expect("fresh array");
        for (g, &idx) in dy.iter().zip(argmax) {
            dxs[idx] += *g;
        }
        dx
    }
}

/// Residual block: `relu(body(x) + shortcut(x))`; an empty shortcut is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub body: Vec<Layer>,
    pub shortcut: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv(Conv2d),
    Norm(FrozenNorm),
    Relu,
    /// Inverted dropout with the given drop probability.
    Dropout(f32),
    MaxPool(MaxPool),
    Residual(Box<Residual>),
}

#[derive(Debug)]
pub(crate) enum Cache {
    Conv {
        cols: Array2<f32>,
        in_dim: (usize, usize, usize, usize),
    },
    Norm,
    Relu {
        out: Array4<f32>,
    },
    Dropout {
        mask: Option<Array4<f32>>,
    },
    MaxPool {
        argmax: Vec<usize>,
        in_dim: (usize, usize, usize, usize),
    },
    Residual {
        body: Vec<Cache>,
        shortcut: Vec<Cache>,
        out: Array4<f32>,
    },
}

/// Parameter gradients of one layer, mirroring [`Layer`].
#[derive(Debug)]
pub(crate) enum LayerGrad {
    None,
    Conv {
        w: Array4<f32>,
        b: Option<Array1<f32>>,
    },
    Residual {
        body: Vec<LayerGrad>,
        shortcut: Vec<LayerGrad>,
    },
}

impl LayerGrad {
    /// Appends gradients in the same order as [`visit_trainable_mut`].
    pub(crate) fn flatten_into(self, out: &mut Vec<Vec<f32>>) {
        match self {
            LayerGrad::None => {}
            LayerGrad::Conv { w, b } => {
                out.push(w.into_raw_vec_and_offset().0);
                if let Some(b) = b {
                    out.push(b.into_raw_vec_and_offset().0);
                }
            }
            LayerGrad::Residual { body, shortcut } => {
                for g in body.into_iter().chain(shortcut) {
                    g.flatten_into(out);
                }
            }
        }
    }
}

pub(crate) fn forward_seq<R: Rng>(
    layers: &[Layer],
    x: Array4<f32>,
    mut rng: Option<&mut R>,
    mut tape: Option<&mut Vec<Cache>>,
) -> Array4<f32> {
    let mut x = x;
    for layer in layers {
        let (y, cache) = match layer {
            Layer::Conv(conv) => {
                let (y, cols) = conv.forward(&x);
                (y, Cache::Conv { cols, in_dim: x.dim() })
            }
            Layer::Norm(norm) => (norm.forward(&x), Cache::Norm),
            Layer::Relu => {
                x.mapv_inplace(|v| v.max(0.0));
                let cache = if tape.is_some() {
                    Cache::Relu { out: x.clone() }
                } else {
                    Cache::Norm
                };
                (x, cache)
            }
            Layer::Dropout(rate) => match rng.as_deref_mut() {
                Some(r) if *rate > 0.0 => {
                    let keep = 1.0 - *rate;
                    let mask = Array4::from_shape_simple_fn(x.raw_dim(), || {
                        if r.gen::<f32>() < *rate {
                            0.0
                        } else {
                            1.0 / keep
                        }
                    });
                    (&x * &mask, Cache::Dropout { mask: Some(mask) })
                }
                _ => (x, Cache::Dropout { mask: None }),
            },
            Layer::MaxPool(pool) => {
                let in_dim = x.dim();
                let (y, argmax) = pool.forward(&x);
                (y, Cache::MaxPool { argmax, in_dim })
            }
            Layer::Residual(block) => {
                let mut body_tape = Vec::new();
                let mut short_tape = Vec::new();
                let want = tape.is_some();
                let body = forward_seq(
                    &block.body,
                    x.clone(),
                    rng.as_deref_mut(),
                    want.then_some(&mut body_tape),
                );
                let short = if block.shortcut.is_empty() {
                    x
                } else {
                    forward_seq(&block.shortcut, x, rng.as_deref_mut(), want.then_some(&mut short_tape))
                };
                let mut out = body + short;
                out.mapv_inplace(|v| v.max(0.0));
                let cache = Cache::Residual {
                    body: body_tape,
                    shortcut: short_tape,
                    out: if want { out.clone() } else { Array4::zeros((0, 0, 0, 0)) },
                };
                (out, cache)
            }
        };
        if let Some(t) = tape.as_deref_mut() {
            t.push(cache);
        }
        x = y;
    }
    x
}

/// Backpropagates through `layers`. Returns the input gradient (when
/// requested) and per-layer parameter gradients in forward order.
pub(crate) fn backward_seq(
    layers: &[Layer],
    tape: Vec<Cache>,
    dy: Array4<f32>,
    need_input_grad: bool,
) -> (Option<Array4<f32>>, Vec<LayerGrad>) {
    let mut grads: Vec<LayerGrad> = Vec::with_capacity(layers.len());
    let mut dy = Some(dy);
    // The first parameterized layer never needs to propagate further unless asked.
    let first_needed = if need_input_grad {
        0
    } else {
        layers
            .iter()
            .position(|l| matches!(l, Layer::Conv(_) | Layer::Residual(_)))
            .unwrap_or(layers.len())
    };
    for (idx, (layer, cache)) in layers.iter().zip(tape).enumerate().rev() {
        let g = dy.take().expect("gradient present while layers remain");
        let propagate = idx > first_needed || need_input_grad;
        let (dx, lg) = match (layer, cache) {
            (Layer::Conv(conv), Cache::Conv { cols, in_dim }) => conv.backward(&g, &cols, in_dim, propagate),
            (Layer::Norm(norm), Cache::Norm) => (Some(norm.backward(&g)), LayerGrad::None),
            (Layer::Relu, Cache::Relu { out }) => {
                let mut g = g;
                ndarray::Zip::from(&mut g).and(&out).for_each(|d, &o| {
                    if o <= 0.0 {
                        *d = 0.0
                    }
                });
                (Some(g), LayerGrad::None)
            }
            (Layer::Dropout(_), Cache::Dropout { mask }) => match mask {
                Some(m) => (Some(g * m), LayerGrad::None),
                None => (Some(g), LayerGrad::None),
            },
            (Layer::MaxPool(pool), Cache::MaxPool { argmax, in_dim }) => {
                (Some(pool.backward(&g, &argmax, in_dim)), LayerGrad::None)
            }
            (Layer::Residual(block), Cache::Residual { body, shortcut, out }) => {
                let mut g = g;
                ndarray::Zip::from(&mut g).and(&out).for_each(|d, &o| {
                    if o <= 0.0 {
                        *d = 0.0
                    }
                });
                let (db, body_grads) = backward_seq(&block.body, body, g.clone(), propagate);
                let (ds, short_grads) = if block.shortcut.is_empty() {
                    (Some(g), Vec::new())
                } else {
                    backward_seq(&block.shortcut, shortcut, g, propagate)
                };
                let dx = match (db, ds) {
                    (Some(a), Some(b)) if propagate => Some(a + b),
                    _ => None,
                };
                (
                    dx,
                    LayerGrad::Residual {
                        body: body_grads,
                        shortcut: short_grads,
                    },
                )
            }
            _ => unreachable!("tape does not match layers"),
        };
        grads.push(lg);
        if idx == 0 {
            dy = if need_input_grad { dx } else { None };
            break;
        }
        match dx {
            Some(dx) => dy = Some(dx),
            None => {
                // Nothing below this layer carries parameters.
                for _ in 0..idx {
                    grads.push(LayerGrad::None);
                }
                break;
            }
        }
    }
    grads.reverse();
    (dy, grads)
}

/// Visits trainable tensors (convolution weights and biases) in forward order.
pub(crate) fn visit_trainable_mut(layers: &mut [Layer], f: &mut dyn FnMut(&mut [f32])) {
    for layer in layers {
        match layer {
            Layer::Conv(conv) => {
                f(conv.weight.as_slice_mut().expect("contiguous"));
                if let Some(b) = conv.bias.as_mut() {
                    f(b.as_slice_mut().expect("contiguous"));
                }
            }
            Layer::Residual(block) => {
                visit_trainable_mut(&mut block.body, f);
                visit_trainable_mut(&mut block.shortcut, f);
            }
            _ => {}
        }
    }
}

/// Kind of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    /// Updated by the optimizer.
    Trainable,
    /// A parameter that is held fixed (normalization affine).
    Frozen,
    /// Running statistics; not counted as parameters.
    Buffer,
}

pub(crate) type TensorVisitor<'v> = dyn FnMut(&str, &[usize], &[f32], TensorRole) + 'v;
pub(crate) type TensorVisitorMut<'v> = dyn FnMut(&str, &[usize], &mut [f32], TensorRole) + 'v;

pub(crate) fn visit_tensors(layers: &[Layer], prefix: &str, f: &mut TensorVisitor<'_>) {
    for (i, layer) in layers.iter().enumerate() {
        let p = format!("{prefix}.{i}");
        match layer {
            Layer::Conv(conv) => {
                f(
                    &format!("{p}.weight"),
                    conv.weight.shape(),
                    conv.weight.as_slice().expect("contiguous"),
                    TensorRole::Trainable,
                );
                if let Some(b) = &conv.bias {
                    f(
                        &format!("{p}.bias"),
                        b.shape(),
                        b.as_slice().expect("contiguous"),
                        TensorRole::Trainable,
                    );
                }
            }
            Layer::Norm(n) => {
                f(
                    &format!("{p}.weight"),
                    n.gamma.shape(),
                    n.gamma.as_slice().expect("contiguous"),
                    TensorRole::Frozen,
                );
                f(
                    &format!("{p}.bias"),
                    n.beta.shape(),
                    n.beta.as_slice().expect("contiguous"),
                    TensorRole::Frozen,
                );
                f(
                    &format!("{p}.running_mean"),
                    n.running_mean.shape(),
                    n.running_mean.as_slice().expect("contiguous"),
                    TensorRole::Buffer,
                );
                f(
                    &format!("{p}.running_var"),
                    n.running_var.shape(),
                    n.running_var.as_slice().expect("contiguous"),
                    TensorRole::Buffer,
                );
            }
            Layer::Residual(block) => {
                visit_tensors(&block.body, &format!("{p}.body"), f);
                visit_tensors(&block.shortcut, &format!("{p}.shortcut"), f);
            }
            _ => {}
        }
    }
}

pub(crate) fn visit_tensors_mut(layers: &mut [Layer], prefix: &str, f: &mut TensorVisitorMut<'_>) {
    for (i, layer) in layers.iter_mut().enumerate() {
        let p = format!("{prefix}.{i}");
        match layer {
            Layer::Conv(conv) => {
                let shape = conv.weight.shape().to_vec();
                f(
                    &format!("{p}.weight"),
                    &shape,
                    conv.weight.as_slice_mut().expect("contiguous"),
                    TensorRole::Trainable,
                );
                if let Some(b) = conv.bias.as_mut() {
                    let shape = b.shape().to_vec();
                    f(
                        &format!("{p}.bias"),
                        &shape,
                        b.as_slice_mut().expect("contiguous"),
                        TensorRole::Trainable,
                    );
                }
            }
            Layer::Norm(n) => {
                let shape = n.gamma.shape().to_vec();
                f(
                    &format!("{p}.weight"),
                    &shape,
                    n.gamma.as_slice_mut().expect("contiguous"),
                    TensorRole::Frozen,
                );
                f(
                    &format!("{p}.bias"),
                    &shape,
                    n.beta.as_slice_mut().expect("contiguous"),
                    TensorRole::Frozen,
                );
                f(
                    &format!("{p}.running_mean"),
                    &shape,
                    n.running_mean.as_slice_mut().expect("contiguous"),
                    TensorRole::Buffer,
                );
                f(
                    &format!("{p}.running_var"),
                    &shape,
                    n.running_var.as_slice_mut().expect("contiguous"),
                    TensorRole::Buffer,
                );
            }
            Layer::Residual(block) => {
                visit_tensors_mut(&mut block.body, &format!("{p}.body"), f);
                visit_tensors_mut(&mut block.shortcut, &format!("{p}.shortcut"), f);
            }
            _ => {}
        }
    }
}

/// Runs the layers in order, replacing each unfrozen normalization layer's
/// statistics with those of its input before applying it.
pub(crate) fn estimate_norm_stats(layers: &mut [Layer], x: Array4<f32>) -> Result<Array4<f32>> {
    let mut x = x;
    for layer in layers.iter_mut() {
        x = match layer {
            Layer::Norm(norm) => {
                norm.estimate(&x)?;
                norm.forward(&x)
            }
            Layer::Residual(block) => {
                let body = estimate_norm_stats(&mut block.body, x.clone())?;
                let short = if block.shortcut.is_empty() {
                    x
                } else {
                    estimate_norm_stats(&mut block.shortcut, x)?
                };
                (body + short).mapv(|v| v.max(0.0))
            }
            other => forward_seq::<rand_chacha::ChaCha8Rng>(std::slice::from_ref(other), x, None, None),
        };
    }
    Ok(x)
}

pub(crate) fn freeze_norms(layers: &mut [Layer]) {
    for layer in layers {
        match layer {
            Layer::Norm(n) => n.freeze(),
            Layer::Residual(block) => {
                freeze_norms(&mut block.body);
                freeze_norms(&mut block.shortcut);
            }
            _ => {}
        }
    }
}

pub(crate) fn norms_frozen(layers: &[Layer]) -> bool {
    layers.iter().all(|l| match l {
        Layer::Norm(n) => n.frozen,
        Layer::Residual(b) => norms_frozen(&b.body) && norms_frozen(&b.shortcut),
        _ => true,
    })
}

/// Output channel count after running `layers` on `c_in` channels.
pub(crate) fn output_channels(layers: &[Layer], c_in: usize) -> usize {
    layers.iter().fold(c_in, |c, l| match l {
        Layer::Conv(conv) => conv.weight.dim().0,
        Layer::Residual(b) => output_channels(&b.body, c),
        _ => c,
    })
}

/// Pooling over the spatial dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Pooling {
    /// Generalized mean with exponent `p`; inputs are clamped at [`GEM_EPS`].
    GeneralizedMean {
        p: f64,
    },
    Average,
}

pub const GEM_EPS: f32 = 1e-6;

pub(crate) struct PoolCache {
    input: Array4<f32>,
    pooled: Array2<f32>,
}

impl Pooling {
    pub fn forward(&self, x: &Array4<f32>) -> Array2<f32> {
        self.forward_cached(x, false).0
    }

    pub(crate) fn forward_cached(&self, x: &Array4<f32>, keep: bool) -> (Array2<f32>, Option<PoolCache>) {
        let (n, c, h, w) = x.dim();
        let area = (h * w) as f64;
        let mut pooled = Array2::<f32>::zeros((n, c));
        let xs = x.as_slice().expect("standard layout");
        for (plane, out) in xs.chunks(h * w).zip(pooled.iter_mut()) {
            *out = match *self {
                Pooling::Average => (plane.iter().map(|&v| v as f64).sum::<f64>() / area) as f32,
                Pooling::GeneralizedMean { p } => {
                    let m = plane.iter().map(|&v| (v.max(GEM_EPS) as f64).powf(p)).sum::<f64>() / area;
                    m.powf(1.0 / p) as f32
                }
            };
        }
        let cache = keep.then(|| PoolCache {
            input: x.clone(),
            pooled: pooled.clone(),
        });
        (pooled, cache)
    }

    pub(crate) fn backward(&self, cache: &PoolCache, dy: &Array2<f32>) -> Array4<f32> {
        let (n, c, h, w) = cache.input.dim();
        let area = (h * w) as f32;
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        let xs = cache.input.as_slice().expect("standard layout");
        let dxs = dx.as_slice_mut().expect("fresh array");
        for (idx, (src, dst)) in xs.chunks(h * w).zip(dxs.chunks_mut(h * w)).enumerate() {
            let g = dy.as_slice().expect("standard layout")[idx];
            match *self {
                Pooling::Average => dst.iter_mut().for_each(|d| *d = g / area),
                Pooling::GeneralizedMean { p } => {
                    // y = m^(1/p), m = mean(x^p)  =>  dy/dx_j = y^(1-p) x_j^(p-1) / area
                    let y = cache.pooled.as_slice().expect("standard layout")[idx] as f64;
                    let coeff = g as f64 * y.powf(1.0 - p) / area as f64;
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = if v > GEM_EPS {
                            (coeff * (v as f64).powf(p - 1.0)) as f32
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out × in`.
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f32).sqrt();
        Self::uniform(rng, d_in, d_out, bound, 0.0)
    }

    pub fn uniform<R: Rng>(rng: &mut R, d_in: usize, d_out: usize, bound: f32, bias: f32) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound);
        Self {
            weight: Array2::from_shape_simple_fn((d_out, d_in), || dist.sample(rng)),
            bias: Array1::from_elem(d_out, bias),
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Returns `(dx, dW, db)`.
    pub fn backward(&self, x: &Array2<f32>, dy: &Array2<f32>) -> (Array2<f32>, Array2<f32>, Array1<f32>) {
        (dy.dot(&self.weight), dy.t().dot(x), dy.sum_axis(Axis(0)))
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Row-wise L2 normalization.
pub fn l2_normalize(z: &Array2<f32>) -> Array2<f32> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        let norm = norm.max(1e-12);
        row.mapv_inplace(|v| (v as f64 / norm) as f32);
    }
    out
}

/// Backward of [`l2_normalize`]: `(dμ - μ (μ·dμ)) / ‖z‖` per row.
pub fn l2_normalize_backward(z: &Array2<f32>, mu: &Array2<f32>, dmu: &Array2<f32>) -> Array2<f32> {
    let mut dz = Array2::zeros(z.raw_dim());
    for ((zr, mr), (gr, mut out)) in z
        .rows()
        .into_iter()
        .zip(mu.rows())
        .zip(dmu.rows().into_iter().zip(dz.rows_mut()))
    {
        let norm = zr
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
            .max(1e-12);
        let dot: f64 = mr.iter().zip(gr.iter()).map(|(&m, &g)| m as f64 * g as f64).sum();
        for ((o, &m), &g) in out.iter_mut().zip(mr.iter()).zip(gr.iter()) {
            *o = ((g as f64 - m as f64 * dot) / norm) as f32;
        }
    }
    dz
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
