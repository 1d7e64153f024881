use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    self, backward_seq, forward_seq, l2_normalize, l2_normalize_backward, sigmoid, Cache, Conv2d, FrozenNorm, Layer,
    Linear, MaxPool, PoolCache, Residual, TensorRole,
};
use super::spec::{Backbone, EncoderSpec};
use crate::config::hex_digest;
use crate::error::{Error, Result};
use crate::losses::VARIANCE_FLOOR;
use crate::types::{EmbeddingDistribution, PlaceSample};

/// Images per forward call when embedding a whole dataset.
pub const INFERENCE_CHUNK: usize = 64;

/// Half-width of the uniform initializer of the variance head weights. The
/// bias starts at 0, so initial variances sit near sigmoid(0) = 0.5.
pub const VARIANCE_HEAD_INIT: f32 = 0.01;

/// Convolutional trunk, global pooling and an optional projection to D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extractor {
    spec: EncoderSpec,
    pub(crate) layers: Vec<Layer>,
    projection: Option<Linear>,
}

pub(crate) struct ExtractorTape {
    layers: Vec<Cache>,
    pool: PoolCache,
    pooled: Array2<f32>,
}

impl Extractor {
    pub fn new<R: Rng>(spec: &EncoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let dropout = spec.dropout as f32;
        let mut layers = Vec::new();
        let push_drop = |layers: &mut Vec<Layer>| {
            if dropout > 0.0 {
                layers.push(Layer::Dropout(dropout));
            }
        };
        match &spec.backbone {
            Backbone::TinyConv { widths } => {
                let mut c_in = spec.input_shape[0];
                for &w in widths {
                    layers.push(Layer::Conv(Conv2d::new(rng, c_in, w, 3, 2, 1, true)));
                    layers.push(Layer::Norm(FrozenNorm::new(w)));
                    layers.push(Layer::Relu);
                    push_drop(&mut layers);
                    c_in = w;
                }
            }
            Backbone::ResNet { depth } => {
                let (bottleneck, blocks) = Backbone::resnet_blocks(*depth).expect("validated depth");
                let expansion = if bottleneck { 4 } else { 1 };
                layers.push(Layer::Conv(Conv2d::new(rng, spec.input_shape[0], 64, 7, 2, 3, false)));
                layers.push(Layer::Norm(FrozenNorm::new(64)));
                layers.push(Layer::Relu);
                push_drop(&mut layers);
                layers.push(Layer::MaxPool(MaxPool {
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                }));
                let mut c_in = 64;
                for (stage, &count) in blocks.iter().enumerate() {
                    let width = 64 << stage;
                    for b in 0..count {
                        let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                        let c_out = width * expansion;
                        let mut body = Vec::new();
                        let mut conv_norm = |body: &mut Vec<Layer>, ci, co, k, st, relu: bool| {
                            body.push(Layer::Conv(Conv2d::new(rng, ci, co, k, st, k / 2, false)));
                            body.push(Layer::Norm(FrozenNorm::new(co)));
                            if relu {
                                body.push(Layer::Relu);
                                if dropout > 0.0 {
                                    body.push(Layer::Dropout(dropout));
                                }
                            }
                        };
                        if bottleneck {
                            conv_norm(&mut body, c_in, width, 1, 1, true);
                            conv_norm(&mut body, width, width, 3, stride, true);
                            conv_norm(&mut body, width, c_out, 1, 1, false);
                        } else {
                            conv_norm(&mut body, c_in, width, 3, stride, true);
                            conv_norm(&mut body, width, c_out, 3, 1, false);
                        }
                        let shortcut = if stride != 1 || c_in != c_out {
                            vec![
                                Layer::Conv(Conv2d::new(rng, c_in, c_out, 1, stride, 0, false)),
                                Layer::Norm(FrozenNorm::new(c_out)),
                            ]
                        } else {
                            Vec::new()
                        };
                        layers.push(Layer::Residual(Box::new(Residual { body, shortcut })));
                        push_drop(&mut layers);
                        c_in = c_out;
                    }
                }
            }
        }
        let channels = layers::output_channels(&layers, spec.input_shape[0]);
        debug_assert_eq!(channels, spec.feature_channels());
        let projection = spec
            .has_projection()
            .then(|| Linear::new(rng, channels, spec.embedding_dim));
        Ok(Self {
            spec: spec.clone(),
            layers,
            projection,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if [c, h, w] != self.spec.input_shape {
            return Err(Error::Shape(format!(
                "expected images of shape {:?}, got {:?}",
                self.spec.input_shape,
                [c, h, w]
            )));
        }
        if !x.is_standard_layout() {
            return Err(Error::Shape("image batch must be in standard layout".into()));
        }
        Ok(())
    }

    /// Pre-normalization features `z` (N × D). Dropout is active iff `rng` is given.
    pub fn features(&self, x: &Array4<f32>, rng: Option<&mut ChaCha8Rng>) -> Result<Array2<f32>> {
        self.check_input(x)?;
        let fmap = forward_seq(&self.layers, x.clone(), rng, None);
        let pooled = self.spec.pooling.forward(&fmap);
        Ok(match &self.projection {
            Some(p) => p.forward(&pooled),
            None => pooled,
        })
    }

    pub(crate) fn features_tape(
        &self,
        x: &Array4<f32>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<f32>, ExtractorTape)> {
        self.check_input(x)?;
        let mut tape = Vec::new();
        let fmap = forward_seq(&self.layers, x.clone(), rng, Some(&mut tape));
        let (pooled, pool) = self.spec.pooling.forward_cached(&fmap, true);
        let z = match &self.projection {
            Some(p) => p.forward(&pooled),
            None => pooled.clone(),
        };
        Ok((
            z,
            ExtractorTape {
                layers: tape,
                pool: pool.expect("cache requested"),
                pooled,
            },
        ))
    }

    /// Gradients of all trainable tensors in [`Extractor::visit_trainable_mut`] order.
    pub(crate) fn backward(&self, tape: ExtractorTape, dz: &Array2<f32>) -> Vec<Vec<f32>> {
        let mut proj_grads = None;
        let dpooled = match &self.projection {
            Some(p) => {
                let (dx, dw, db) = p.backward(&tape.pooled, dz);
                proj_grads = Some((dw, db));
                dx
            }
            None => dz.clone(),
        };
        let dfmap = self.spec.pooling.backward(&tape.pool, &dpooled);
        let (_, layer_grads) = backward_seq(&self.layers, tape.layers, dfmap, false);
        let mut out = Vec::new();
        for g in layer_grads {
            g.flatten_into(&mut out);
        }
        if let Some((dw, db)) = proj_grads {
            out.push(dw.into_raw_vec_and_offset().0);
            out.push(db.into_raw_vec_and_offset().0);
        }
        out
    }

    pub(crate) fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&mut [f32])) {
        layers::visit_trainable_mut(&mut self.layers, f);
        if let Some(p) = self.projection.as_mut() {
            f(p.weight.as_slice_mut().expect("contiguous"));
            f(p.bias.as_slice_mut().expect("contiguous"));
        }
    }

    pub(crate) fn visit_tensors(&self, prefix: &str, f: &mut layers::TensorVisitor<'_>) {
        layers::visit_tensors(&self.layers, &format!("{prefix}.features"), f);
        if let Some(p) = &self.projection {
            visit_linear(p, &format!("{prefix}.projection"), f);
        }
    }

    pub(crate) fn visit_tensors_mut(&mut self, prefix: &str, f: &mut layers::TensorVisitorMut<'_>) {
        layers::visit_tensors_mut(&mut self.layers, &format!("{prefix}.features"), f);
        if let Some(p) = self.projection.as_mut() {
            visit_linear_mut(p, &format!("{prefix}.projection"), f);
        }
    }

    /// Estimates normalization statistics from `images` (one pass, in order),
    /// then freezes them.
    pub fn calibrate_and_freeze(&mut self, images: &Array4<f32>) -> Result<()> {
        self.check_input(images)?;
        layers::estimate_norm_stats(&mut self.layers, images.clone())?;
        layers::freeze_norms(&mut self.layers);
        Ok(())
    }

    pub fn norms_frozen(&self) -> bool {
        layers::norms_frozen(&self.layers)
    }

    pub fn has_dropout(&self) -> bool {
        fn any(layers: &[Layer]) -> bool {
            layers.iter().any(|l| match l {
                Layer::Dropout(r) => *r > 0.0,
                Layer::Residual(b) => any(&b.body) || any(&b.shortcut),
                _ => false,
            })
        }
        any(&self.layers)
    }
}

fn visit_linear(p: &Linear, prefix: &str, f: &mut layers::TensorVisitor<'_>) {
    f(
        &format!("{prefix}.weight"),
        p.weight.shape(),
        p.weight.as_slice().expect("contiguous"),
        TensorRole::Trainable,
    );
    f(
        &format!("{prefix}.bias"),
        p.bias.shape(),
        p.bias.as_slice().expect("contiguous"),
        TensorRole::Trainable,
    );
}

fn visit_linear_mut(p: &mut Linear, prefix: &str, f: &mut layers::TensorVisitorMut<'_>) {
    let ws = p.weight.shape().to_vec();
    let bs = p.bias.shape().to_vec();
    f(
        &format!("{prefix}.weight"),
        &ws,
        p.weight.as_slice_mut().expect("contiguous"),
        TensorRole::Trainable,
    );
    f(
        &format!("{prefix}.bias"),
        &bs,
        p.bias.as_slice_mut().expect("contiguous"),
        TensorRole::Trainable,
    );
}

/// Common read access to network tensors.
pub trait Network {
    fn spec(&self) -> &EncoderSpec;
    fn visit_tensors(&self, f: &mut layers::TensorVisitor<'_>);
    fn visit_tensors_mut(&mut self, f: &mut layers::TensorVisitorMut<'_>);

    /// Parameters including frozen normalization affines, excluding running statistics.
    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_tensors(&mut |_, _, data, role| {
            if role != TensorRole::Buffer {
                n += data.len();
            }
        });
        n
    }

    /// SHA-256 over every tensor (names, shapes and little-endian values).
    fn parameter_hash(&self) -> String {
        let mut bytes = Vec::new();
        self.visit_tensors(&mut |name, shape, data, _| {
            bytes.extend_from_slice(name.as_bytes());
            for &s in shape {
                bytes.extend_from_slice(&(s as u64).to_le_bytes());
            }
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        });
        hex_digest(&bytes)
    }
}

/// Deterministic metric-learning encoder: extractor followed by L2 normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherNet {
    pub(crate) extractor: Extractor,
}

pub(crate) struct TeacherTape {
    ext: ExtractorTape,
    z: Array2<f32>,
    mean: Array2<f32>,
}

impl TeacherNet {
    pub fn new(spec: &EncoderSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            extractor: Extractor::new(spec, &mut rng)?,
        })
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    pub fn extractor_mut(&mut self) -> &mut Extractor {
        &mut self.extractor
    }

    /// Unit-norm means in inference mode.
    pub fn forward(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        Ok(l2_normalize(&self.extractor.features(x, None)?))
    }

    /// Forward with dropout sampled from `rng`.
    pub fn forward_stochastic(&self, x: &Array4<f32>, rng: &mut ChaCha8Rng) -> Result<Array2<f32>> {
        Ok(l2_normalize(&self.extractor.features(x, Some(rng))?))
    }

    pub(crate) fn forward_train(
        &self,
        x: &Array4<f32>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<f32>, TeacherTape)> {
        let (z, ext) = self.extractor.features_tape(x, rng)?;
        let mean = l2_normalize(&z);
        Ok((mean.clone(), TeacherTape { ext, z, mean }))
    }

    pub(crate) fn backward(&self, tape: TeacherTape, dmean: &Array2<f32>) -> Vec<Vec<f32>> {
        let dz = l2_normalize_backward(&tape.z, &tape.mean, dmean);
        self.extractor.backward(tape.ext, &dz)
    }

    pub(crate) fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&mut [f32])) {
        self.extractor.visit_trainable_mut(f);
    }

    /// Means for a list of samples, chunked.
    pub fn encode(&self, samples: &[PlaceSample]) -> Result<Array2<f32>> {
        encode_chunked(samples, self.extractor.spec.embedding_dim, |x| self.forward(x))
    }

    /// Monte-Carlo dropout: per-dimension sample mean (renormalized to unit
    /// length) and unbiased sample variance over `passes` stochastic passes.
    /// Without dropout layers every pass is identical and the variance is 0.
    pub fn mc_dropout_forward(
        &self,
        x: &Array4<f32>,
        passes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array2<f32>, Array2<f32>)> {
        if passes < 2 {
            return Err(Error::Config(format!(
                "MC dropout needs at least 2 passes, got {passes}"
            )));
        }
        let outs = (0..passes)
            .map(|_| Ok(self.forward_stochastic(x, rng)?.mapv(|v| v as f64)))
            .collect::<Result<Vec<_>>>()?;
        let p = passes as f64;
        let mut mean = Array2::<f64>::zeros(outs[0].raw_dim());
        for o in &outs {
            mean += o;
        }
        mean /= p;
        let mut var = Array2::<f64>::zeros(mean.raw_dim());
        for o in &outs {
            var += &(o - &mean).mapv(|v| v * v);
        }
        var /= p - 1.0;
        Ok((l2_normalize(&mean.mapv(|v| v as f32)), var.mapv(|v| v as f32)))
    }

    /// MC-dropout distributions for a list of samples; variance is floored at
    /// the loss floor so every output is a valid distribution.
    pub fn mc_dropout_encode(
        &self,
        samples: &[PlaceSample],
        passes: usize,
        seed: u64,
    ) -> Result<Vec<EmbeddingDistribution>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(INFERENCE_CHUNK) {
            let x = stack_images(chunk.iter().map(|s| &s.image))?;
            let (m, v) = self.mc_dropout_forward(&x, passes, &mut rng)?;
            out.extend(to_distributions(&m, &v.mapv(|x| x.clamp(VARIANCE_FLOOR as f32, 1.0)))?);
        }
        Ok(out)
    }
}

impl Network for TeacherNet {
    fn spec(&self) -> &EncoderSpec {
        &self.extractor.spec
    }
    fn visit_tensors(&self, f: &mut layers::TensorVisitor<'_>) {
        self.extractor.visit_tensors("extractor", f);
    }
    fn visit_tensors_mut(&mut self, f: &mut layers::TensorVisitorMut<'_>) {
        self.extractor.visit_tensors_mut("extractor", f);
    }
}

/// Extractor shared with the teacher architecture, the same L2 mean head, and a
/// sigmoid variance head fed by the extractor output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentNet {
    pub(crate) extractor: Extractor,
    pub(crate) variance_head: Linear,
}

pub(crate) struct StudentTape {
    ext: ExtractorTape,
    z: Array2<f32>,
    mean: Array2<f32>,
    sig: Array2<f32>,
}

impl StudentNet {
    /// Copies extractor and mean head from `teacher`; the variance head is drawn
    /// from its initializer with `seed`.
    pub fn from_teacher(teacher: &TeacherNet, seed: u64) -> Self {
        let d = teacher.extractor.spec.embedding_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            extractor: teacher.extractor.clone(),
            variance_head: Linear::uniform(&mut rng, d, d, VARIANCE_HEAD_INIT, 0.0),
        }
    }

    /// Fresh student: extractor from the encoder initializer (norm statistics
    /// still copied from `teacher` so both see identically normalized inputs).
    pub fn fresh(teacher: &TeacherNet, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut extractor = Extractor::new(&teacher.extractor.spec, &mut rng)?;
        let mut stats = Vec::new();
        teacher.extractor.visit_tensors("x", &mut |_, _, data, role| {
            if role != TensorRole::Trainable {
                stats.push(data.to_vec());
            }
        });
        let mut it = stats.into_iter();
        extractor.visit_tensors_mut("x", &mut |_, _, data, role| {
            if role != TensorRole::Trainable {
                data.copy_from_slice(&it.next().expect("same architecture"));
            }
        });
        layers::freeze_norms(&mut extractor.layers);
        let d = teacher.extractor.spec.embedding_dim;
        Ok(Self {
            extractor,
            variance_head: Linear::uniform(&mut rng, d, d, VARIANCE_HEAD_INIT, 0.0),
        })
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    pub fn variance_head(&self) -> &Linear {
        &self.variance_head
    }

    /// Means and floored variances in inference mode.
    pub fn forward(&self, x: &Array4<f32>) -> Result<(Array2<f32>, Array2<f32>)> {
        let z = self.extractor.features(x, None)?;
        let var = self
            .variance_head
            .forward(&z)
            .mapv(|a| sigmoid(a).max(VARIANCE_FLOOR as f32));
        Ok((l2_normalize(&z), var))
    }

    pub fn forward_distributions(&self, x: &Array4<f32>) -> Result<Vec<EmbeddingDistribution>> {
        let (m, v) = self.forward(x)?;
        to_distributions(&m, &v)
    }

    pub fn encode(&self, samples: &[PlaceSample]) -> Result<Vec<EmbeddingDistribution>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(INFERENCE_CHUNK) {
            let x = stack_images(chunk.iter().map(|s| &s.image))?;
            out.extend(self.forward_distributions(&x)?);
        }
        Ok(out)
    }

    pub(crate) fn forward_train(&self, x: &Array4<f32>) -> Result<(Array2<f32>, Array2<f32>, StudentTape)> {
        let (z, ext) = self.extractor.features_tape(x, None)?;
        let mean = l2_normalize(&z);
        let sig = self.variance_head.forward(&z).mapv(sigmoid);
        let var = sig.mapv(|s| s.max(VARIANCE_FLOOR as f32));
        Ok((mean.clone(), var, StudentTape { ext, z, mean, sig }))
    }

    /// Gradients for the extractor (skipped when `extractor_frozen`) followed by
    /// the variance head weight and bias.
    pub(crate) fn backward(
        &self,
        tape: StudentTape,
        dmean: &Array2<f32>,
        dvar: &Array2<f32>,
        extractor_frozen: bool,
    ) -> Vec<Vec<f32>> {
        // floor is flat: no gradient where the sigmoid output sits below it
        let dpre = ndarray::Zip::from(dvar).and(&tape.sig).map_collect(|&g, &s| {
            if s >= VARIANCE_FLOOR as f32 {
                g * s * (1.0 - s)
            } else {
                0.0
            }
        });
        let (dz_head, dw, db) = self.variance_head.backward(&tape.z, &dpre);
        let mut grads = if extractor_frozen {
            Vec::new()
        } else {
            let dz = l2_normalize_backward(&tape.z, &tape.mean, dmean) + dz_head;
            self.extractor.backward(tape.ext, &dz)
        };
        grads.push(dw.into_raw_vec_and_offset().0);
        grads.push(db.into_raw_vec_and_offset().0);
        grads
    }

    /// Visits trainable tensors in the order produced by [`StudentNet::backward`].
    pub(crate) fn visit_trainable_mut(&mut self, extractor_frozen: bool, f: &mut dyn FnMut(&mut [f32])) {
        if !extractor_frozen {
            self.extractor.visit_trainable_mut(f);
        }
        f(self.variance_head.weight.as_slice_mut().expect("contiguous"));
        f(self.variance_head.bias.as_slice_mut().expect("contiguous"));
    }

    /// The mean branch as a standalone teacher network.
    pub fn mean_network(&self) -> TeacherNet {
        TeacherNet {
            extractor: self.extractor.clone(),
        }
    }
}

impl Network for StudentNet {
    fn spec(&self) -> &EncoderSpec {
        &self.extractor.spec
    }
    fn visit_tensors(&self, f: &mut layers::TensorVisitor<'_>) {
        self.extractor.visit_tensors("extractor", f);
        visit_linear(&self.variance_head, "variance_head", f);
    }
    fn visit_tensors_mut(&mut self, f: &mut layers::TensorVisitorMut<'_>) {
        self.extractor.visit_tensors_mut("extractor", f);
        visit_linear_mut(&mut self.variance_head, "variance_head", f);
    }
}

/// Stacks equally shaped images into an `N × C × H × W` batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Array3<f32>>) -> Result<Array4<f32>> {
    let images: Vec<&Array3<f32>> = images.into_iter().collect();
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?
        .dim();
    let mut batch = Array4::<f32>::zeros((images.len(), first.0, first.1, first.2));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != first {
            return Err(Error::Shape(format!(
                "image {i} has shape {:?}, expected {first:?}",
                img.dim()
            )));
        }
        batch.slice_mut(s![i, .., .., ..]).assign(img);
    }
    Ok(batch)
}

fn encode_chunked(
    samples: &[PlaceSample],
    d: usize,
    mut f: impl FnMut(&Array4<f32>) -> Result<Array2<f32>>,
) -> Result<Array2<f32>> {
    let mut out = Array2::<f32>::zeros((samples.len(), d));
    for (c, chunk) in samples.chunks(INFERENCE_CHUNK).enumerate() {
        let x = stack_images(chunk.iter().map(|s| &s.image))?;
        let m = f(&x)?;
        out.slice_mut(s![c * INFERENCE_CHUNK..c * INFERENCE_CHUNK + chunk.len(), ..])
            .assign(&m);
    }
    Ok(out)
}

/// Converts f32 network outputs to validated distributions.
pub fn to_distributions(mean: &Array2<f32>, var: &Array2<f32>) -> Result<Vec<EmbeddingDistribution>> {
    mean.axis_iter(Axis(0))
        .zip(var.axis_iter(Axis(0)))
        .map(|(m, v)| {
            let m: Vec<f64> = m.iter().map(|&x| x as f64).collect();
            // renormalize in f64 so the unit-norm invariant holds at f64 precision
            let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
            EmbeddingDistribution::new(
                m.iter().map(|x| x / norm).collect(),
                v.iter().map(|&x| x as f64).collect(),
            )
        })
        .collect()
}
