//! Training loops: metric-learning teacher, self-taught student, and the PFE
//! variance-head baseline.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, LossKind, StudentInit};
use crate::error::{Error, Result};
use crate::losses::{
    contrastive_loss_grad, negative_mls_loss_grad, quadruplet_loss_grad, student_loss_grad, triplet_loss_grad,
    VARIANCE_FLOOR,
};
use crate::mining::{mine_hardest, tuple_kind, AnchorStatus, MeanCache, MiningPool};
use crate::model::{layers::sigmoid, stack_images, EncoderSpec, StudentNet, TeacherNet};
use crate::optim::{learning_rate, Adam};
use crate::types::{PlaceSample, TupleBatch};

/// Images used to estimate normalization statistics before they are frozen.
pub const NORM_CALIBRATION_IMAGES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Teacher,
    Student,
    Pfe,
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: Phase,
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer: Adam,
    pub seed: u64,
    /// One record per optimizer step.
    pub history: Vec<StepRecord>,
    /// Mean step loss per epoch (`None` when an epoch had nothing to train on).
    pub epoch_losses: Vec<Option<f64>>,
    pub config_hash: String,
}

impl TrainState {
    fn new(phase: Phase, cfg: &ExperimentConfig) -> Self {
        Self {
            phase,
            epoch: 0,
            optimizer: Adam::new(cfg.weight_decay),
            seed: cfg.seed,
            history: Vec::new(),
            epoch_losses: Vec::new(),
            config_hash: cfg.training_hash(),
        }
    }

    pub fn steps(&self) -> usize {
        self.history.len()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }

    /// Line-delimited JSON of the step history.
    pub fn log_jsonl(&self) -> String {
        self.history
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    fn record(&mut self, epoch: usize, lr: f64, loss: f64) -> Result<()> {
        let step = self.history.len();
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, step, loss });
        }
        self.history.push(StepRecord {
            phase: self.phase,
            epoch,
            step,
            lr,
            loss,
        });
        Ok(())
    }

    fn finish_epoch(&mut self, first_step: usize) {
        let losses: Vec<f64> = self.history[first_step..].iter().map(|r| r.loss).collect();
        let mean = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
        self.epoch_losses.push(mean);
        self.epoch += 1;
        let first = self.epoch_losses.iter().flatten().next().copied();
        if let Some(first) = first {
            let tail: Vec<f64> = self.epoch_losses.iter().rev().take(3).flatten().copied().collect();
            if tail.len() == 3 && first > 0.0 && tail.iter().all(|&l| l > 10.0 * first) {
                log::warn!(
                    "{:?} loss above 10x its first-epoch value for 3 consecutive epochs",
                    self.phase
                );
            }
        }
    }
}

fn epoch_rng(seed: u64, phase: Phase, epoch: usize) -> ChaCha8Rng {
    let tag = match phase {
        Phase::Teacher => 1u64,
        Phase::Student => 2,
        Phase::Pfe => 3,
    };
    ChaCha8Rng::seed_from_u64(seed ^ (tag << 56) ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn to_f64(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(|v| v as f64)
}

fn to_f32(a: &Array2<f64>) -> Array2<f32> {
    a.mapv(|v| v as f32)
}

/// Fresh teacher with normalization statistics estimated on (up to
/// [`NORM_CALIBRATION_IMAGES`] of) `samples` and frozen.
pub fn init_teacher(spec: &EncoderSpec, samples: &[PlaceSample], seed: u64) -> Result<TeacherNet> {
    let mut net = TeacherNet::new(spec, seed)?;
    let take = samples.len().min(NORM_CALIBRATION_IMAGES);
    if take == 0 {
        return Err(Error::Data("no training samples".into()));
    }
    let x = stack_images(samples[..take].iter().map(|s| &s.image))?;
    net.extractor_mut().calibrate_and_freeze(&x)?;
    Ok(net)
}

/// Trains a teacher on `samples` with the configured metric loss and per-epoch
/// hard-negative mining. `encoder` overrides `cfg.encoder` (used to add dropout).
pub fn train_teacher_with(
    samples: &[PlaceSample],
    cfg: &ExperimentConfig,
    encoder: &EncoderSpec,
) -> Result<(TeacherNet, TrainState)> {
    cfg.validate()?;
    encoder.validate()?;
    let mut net = init_teacher(encoder, samples, cfg.seed)?;
    let pool = MiningPool::new(&samples.iter().map(|s| s.geo).collect::<Vec<_>>(), &cfg.radii);
    let kind = tuple_kind(cfg.loss);
    if !(0..pool.len()).any(|a| match kind {
        crate::types::TupleKind::Doublet => pool.status(a) != AnchorStatus::NoPositive,
        _ => pool.status(a) == AnchorStatus::Ok,
    }) {
        return Err(Error::NoTuples("no anchor has both a positive and a negative".into()));
    }
    let margins = cfg.margins_for(cfg.loss);
    let mut state = TrainState::new(Phase::Teacher, cfg);
    for epoch in 0..cfg.epochs.teacher {
        let lr = learning_rate(cfg.learning_rate, cfg.lr_decay, epoch);
        let cache = MeanCache {
            epoch,
            means: to_f64(&net.encode(samples)?),
        };
        let tuples = mine_hardest(&pool, &cache, epoch, kind, margins, cfg.mining.top_k)?;
        log::info!("teacher epoch {epoch}: {} violating tuples", tuples.len());
        let mut rng = epoch_rng(cfg.seed, Phase::Teacher, epoch);
        let mut order: Vec<usize> = (0..tuples.len()).collect();
        order.shuffle(&mut rng);
        let first_step = state.steps();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = TupleBatch::from_tuples(kind, chunk.iter().map(|&k| tuples.get(k)))?;
            let loss = teacher_step(
                &mut net,
                samples,
                &batch,
                cfg,
                margins,
                lr,
                &mut state.optimizer,
                &mut rng,
            )?;
            state.record(epoch, lr, loss)?;
        }
        state.finish_epoch(first_step);
    }
    Ok((net, state))
}

pub fn train_teacher(samples: &[PlaceSample], cfg: &ExperimentConfig) -> Result<(TeacherNet, TrainState)> {
    train_teacher_with(samples, cfg, &cfg.encoder)
}

/// Teacher with dropout after every convolution stage, for MC-Dropout inference.
pub fn train_mc_dropout(samples: &[PlaceSample], cfg: &ExperimentConfig) -> Result<(TeacherNet, TrainState)> {
    train_teacher_with(samples, cfg, &cfg.encoder.with_dropout(cfg.mc_dropout.rate))
}

#[allow(clippy::too_many_arguments)]
fn teacher_step(
    net: &mut TeacherNet,
    samples: &[PlaceSample],
    batch: &TupleBatch,
    cfg: &ExperimentConfig,
    (m1, m2): (f64, f64),
    lr: f64,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    // each distinct image is encoded once per step
    let mut slot: BTreeMap<usize, usize> = BTreeMap::new();
    let columns: Vec<&Vec<usize>> = match cfg.loss {
        LossKind::Contrastive => vec![&batch.anchors, &batch.positives],
        LossKind::Triplet => vec![&batch.anchors, &batch.positives, &batch.negatives1],
        LossKind::Quadruplet => vec![&batch.anchors, &batch.positives, &batch.negatives1, &batch.negatives2],
    };
    for col in &columns {
        for &i in col.iter() {
            let next = slot.len();
            slot.entry(i).or_insert(next);
        }
    }
    let mut uniq = vec![0usize; slot.len()];
    for (&i, &s) in &slot {
        uniq[s] = i;
    }
    let x = stack_images(uniq.iter().map(|&i| &samples[i].image))?;
    let dropout = net.extractor().has_dropout();
    let (mean, tape) = net.forward_train(&x, dropout.then_some(&mut *rng))?;
    let mean = to_f64(&mean);
    let rows: Vec<Array2<f64>> = columns
        .iter()
        .map(|col| mean.select(Axis(0), &col.iter().map(|i| slot[i]).collect::<Vec<_>>()))
        .collect();
    let (value, grads) = match cfg.loss {
        LossKind::Contrastive => {
            let (v, g) = contrastive_loss_grad(rows[0].view(), rows[1].view(), &batch.similar, m1)?;
            (v, g.to_vec())
        }
        LossKind::Triplet => {
            let (v, g) = triplet_loss_grad(rows[0].view(), rows[1].view(), rows[2].view(), m1)?;
            (v, g.to_vec())
        }
        LossKind::Quadruplet => {
            let (v, g) = quadruplet_loss_grad(rows[0].view(), rows[1].view(), rows[2].view(), rows[3].view(), m1, m2)?;
            (v, g.to_vec())
        }
    };
    let mut dmean = Array2::<f64>::zeros(mean.raw_dim());
    for (col, g) in columns.iter().zip(&grads) {
        for (k, &i) in col.iter().enumerate() {
            let mut row = dmean.row_mut(slot[&i]);
            row += &g.row(k);
        }
    }
    if !value.value.is_finite() {
        return Ok(value.value);
    }
    let param_grads = net.backward(tape, &to_f32(&dmean));
    opt.step(lr, &param_grads, |f| net.visit_trainable_mut(f))?;
    Ok(value.value)
}

/// Builds the student from the teacher per `cfg.student.init`.
pub fn init_student(teacher: &TeacherNet, cfg: &ExperimentConfig) -> Result<StudentNet> {
    match cfg.student.init {
        StudentInit::CopyTeacher => Ok(StudentNet::from_teacher(teacher, cfg.seed)),
        StudentInit::Fresh => StudentNet::fresh(teacher, cfg.seed),
    }
}

/// Regresses the student means onto fixed teacher means while learning the
/// variance head, over all samples each epoch.
pub fn train_student(
    teacher: &TeacherNet,
    samples: &[PlaceSample],
    cfg: &ExperimentConfig,
) -> Result<(StudentNet, TrainState)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let mut student = init_student(teacher, cfg)?;
    let targets = to_f64(&teacher.encode(samples)?);
    let mut state = TrainState::new(Phase::Student, cfg);
    for epoch in 0..cfg.epochs.student {
        let lr = learning_rate(cfg.learning_rate, cfg.lr_decay, epoch);
        let mut rng = epoch_rng(cfg.seed, Phase::Student, epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let first_step = state.steps();
        for chunk in order.chunks(cfg.batch_size) {
            let x = stack_images(chunk.iter().map(|&i| &samples[i].image))?;
            let (mean, var, tape) = student.forward_train(&x)?;
            let t = targets.select(Axis(0), chunk);
            let (value, grad) = student_loss_grad(
                to_f64(&mean).view(),
                t.view(),
                to_f64(&var).view(),
                cfg.student.reduction,
            )?;
            state.record(epoch, lr, value.value)?;
            let grads = student.backward(tape, &to_f32(&grad.mean), &to_f32(&grad.var), false);
            state
                .optimizer
                .step(lr, &grads, |f| student.visit_trainable_mut(false, f))?;
        }
        state.finish_epoch(first_step);
    }
    Ok((student, state))
}

/// PFE baseline: extractor and mean head frozen at the teacher's values; the
/// variance head is trained to minimize negative MLS over positive pairs.
pub fn train_pfe(
    teacher: &TeacherNet,
    samples: &[PlaceSample],
    cfg: &ExperimentConfig,
) -> Result<(StudentNet, TrainState)> {
    cfg.validate()?;
    let pool = MiningPool::new(&samples.iter().map(|s| s.geo).collect::<Vec<_>>(), &cfg.radii);
    let pairs = pool.positive_pairs();
    if pairs.is_empty() {
        return Err(Error::NoTuples("no positive pairs for PFE training".into()));
    }
    let mut student = StudentNet::from_teacher(teacher, cfg.seed);
    // the extractor is frozen, so its features are computed once
    let mut feats = Array2::<f32>::zeros((samples.len(), cfg.encoder.embedding_dim));
    for (c, chunk) in samples.chunks(crate::model::INFERENCE_CHUNK).enumerate() {
        let x = stack_images(chunk.iter().map(|s| &s.image))?;
        let z = student.extractor().features(&x, None)?;
        let start = c * crate::model::INFERENCE_CHUNK;
        feats.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&z);
    }
    let means = to_f64(&crate::model::layers::l2_normalize(&feats));
    let mut state = TrainState::new(Phase::Pfe, cfg);
    for epoch in 0..cfg.epochs.pfe {
        let lr = learning_rate(cfg.learning_rate, cfg.lr_decay, epoch);
        let mut rng = epoch_rng(cfg.seed, Phase::Pfe, epoch);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let first_step = state.steps();
        for chunk in order.chunks(cfg.batch_size) {
            let ii: Vec<usize> = chunk.iter().map(|&k| pairs[k].0).collect();
            let jj: Vec<usize> = chunk.iter().map(|&k| pairs[k].1).collect();
            let zi = feats.select(Axis(0), &ii);
            let zj = feats.select(Axis(0), &jj);
            let head = student.variance_head().clone();
            let sig = |z: &Array2<f32>| head.forward(z).mapv(sigmoid);
            let (si, sj) = (sig(&zi), sig(&zj));
            let floor = |s: &Array2<f32>| to_f64(&s.mapv(|v| v.max(VARIANCE_FLOOR as f32)));
            let (value, g) = negative_mls_loss_grad(
                means.select(Axis(0), &ii).view(),
                floor(&si).view(),
                means.select(Axis(0), &jj).view(),
                floor(&sj).view(),
            )?;
            state.record(epoch, lr, value.value)?;
            let dpre = |dvar: &Array2<f64>, s: &Array2<f32>| {
                ndarray::Zip::from(dvar).and(s).map_collect(|&g, &s| {
                    if s >= VARIANCE_FLOOR as f32 {
                        g as f32 * s * (1.0 - s)
                    } else {
                        0.0
                    }
                })
            };
            let (_, dw_i, db_i) = head.backward(&zi, &dpre(&g[1], &si));
            let (_, dw_j, db_j) = head.backward(&zj, &dpre(&g[3], &sj));
            let grads = vec![
                (dw_i + dw_j).into_raw_vec_and_offset().0,
                (db_i + db_j).into_raw_vec_and_offset().0,
            ];
            state
                .optimizer
                .step(lr, &grads, |f| student.visit_trainable_mut(true, f))?;
        }
        state.finish_epoch(first_step);
    }
    Ok((student, state))
}
