use std::path::{Path, PathBuf};

use stun_core::compare::{compare as compare_methods, evaluate_method, Embedder, Method};
use stun_core::dataset::Dataset;
use stun_core::eval::MetricsReport;
use stun_core::io::write_atomic;
use stun_core::model::{Checkpoint, NetKind};
use stun_core::synthdata::{self, SynthSpec};
use stun_core::{train, ExperimentConfig, Split};

use crate::manifest::{CheckpointRef, DatasetRef, RunManifest};
use crate::{plot, Baseline, Common, EvalArgs};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] stun_core::Error),
    #[error("invalid arguments: {0}")]
    Usage(String),
    #[error("plotting failed: {0}")]
    Plot(String),
}

impl Error {
    pub fn exit_code(&self) -> u8 {
        use stun_core::Error as E;
        match self {
            Error::Usage(_) => 2,
            Error::Plot(_) => 1,
            Error::Core(e) => match e {
                E::Config(_) => 2,
                E::Data(_) | E::Manifest { .. } | E::DuplicateId(_) | E::NoTuples(_) => 3,
                E::Divergence { .. } => 4,
                E::HashMismatch { .. } => 5,
                _ => 1,
            },
        }
    }
}

type Result<T> = std::result::Result<T, Error>;

fn out_dir(out: &Path, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) if out.is_relative() => r.join(out),
        _ => out.to_path_buf(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Usage(format!("cannot read {}: {e}", path.display())))
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_toml_str(&read_text(p)?)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_eval(mut cfg: ExperimentConfig, eval: &EvalArgs) -> Result<ExperimentConfig> {
    if let Some(b) = eval.bins {
        cfg.eval.bins = b;
    }
    if let Some(k) = eval.topk {
        cfg.eval.topk = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(path: &Path) -> Result<(Dataset, DatasetRef)> {
    let ds = Dataset::read_manifest(path)?;
    if ds.split(Split::Database).is_empty() {
        return Err(stun_core::Error::Data(format!("{}: no database samples", path.display())).into());
    }
    let r = DatasetRef {
        path: path.to_path_buf(),
        fingerprint: ds.fingerprint(),
    };
    Ok((ds, r))
}

/// Loads a checkpoint and refuses it unless it was trained under `cfg`.
fn load_checkpoint(path: &Path, cfg: &ExperimentConfig) -> Result<(Checkpoint, CheckpointRef)> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_config(&cfg.training_hash())?;
    let r = CheckpointRef {
        path: path.to_path_buf(),
        kind: ckpt.kind,
        config_hash: ckpt.config_hash.clone(),
    };
    Ok((ckpt, r))
}

fn write_training(
    dir: &Path,
    name: &str,
    ckpt: Checkpoint,
    state: &train::TrainState,
    manifest: &mut RunManifest,
) -> Result<PathBuf> {
    let path = dir.join(format!("{name}.ckpt.json"));
    ckpt.save(&path)?;
    let log = dir.join(format!("{name}.log.jsonl"));
    write_atomic(&log, state.log_jsonl().as_bytes())?;
    manifest.outputs.push(path.clone());
    manifest.outputs.push(log);
    Ok(path)
}

pub fn generate(common: &Common, spec: Option<&Path>) -> Result<PathBuf> {
    let cfg = load_config(common.config.as_deref(), None)?;
    let mut s = match spec {
        Some(p) => SynthSpec::from_toml_str(&read_text(p)?)?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    let dir = out_dir(&common.out, common.out_root.as_deref());
    let ds = synthdata::generate(&s, &cfg.radii)?;
    let manifest_path = ds.write_manifest(&dir)?;
    let spec_path = dir.join("synth.toml");
    write_atomic(&spec_path, s.to_toml_string().as_bytes())?;
    let mut m = RunManifest::new("generate", s.seed);
    m.dataset = Some(DatasetRef {
        path: manifest_path.clone(),
        fingerprint: ds.fingerprint(),
    });
    m.outputs.push(manifest_path.clone());
    m.outputs.push(dir.join("images"));
    m.outputs.push(spec_path);
    m.write(&dir)?;
    println!("wrote {} samples to {}", ds.len(), manifest_path.display());
    Ok(manifest_path)
}

pub fn train_teacher(common: &Common, data: &Path) -> Result<PathBuf> {
    let cfg = load_config(common.config.as_deref(), common.seed)?;
    let (ds, dref) = load_data(data)?;
    let dir = out_dir(&common.out, common.out_root.as_deref());
    let (net, state) = train::train_teacher(&ds.samples(Split::Database), &cfg)?;
    let mut m = RunManifest::new("train-teacher", cfg.seed).with_config(&cfg);
    m.dataset = Some(dref);
    let ckpt = Checkpoint::from_teacher(&net, NetKind::Teacher, state.steps(), state.epoch, &state.config_hash);
    let path = write_training(&dir, "teacher", ckpt, &state, &mut m)?;
    m.write(&dir)?;
    println!("teacher: {} steps, checkpoint {}", state.steps(), path.display());
    Ok(path)
}

pub fn train_student(common: &Common, data: &Path, teacher: &Path) -> Result<PathBuf> {
    let cfg = load_config(common.config.as_deref(), common.seed)?;
    let (ds, dref) = load_data(data)?;
    let (tckpt, tref) = load_checkpoint(teacher, &cfg)?;
    if tckpt.kind != NetKind::Teacher {
        return Err(Error::Usage(format!(
            "{} is a {:?} checkpoint, not a teacher",
            teacher.display(),
            tckpt.kind
        )));
    }
    let net = tckpt.to_teacher()?;
    let dir = out_dir(&common.out, common.out_root.as_deref());
    let (student, state) = train::train_student(&net, &ds.samples(Split::Database), &cfg)?;
    let mut m = RunManifest::new("train-student", cfg.seed).with_config(&cfg);
    m.dataset = Some(dref);
    m.checkpoints.push(tref);
    let ckpt = Checkpoint::from_student(
        &student,
        NetKind::Student,
        state.steps(),
        state.epoch,
        &state.config_hash,
    );
    let path = write_training(&dir, "student", ckpt, &state, &mut m)?;
    m.write(&dir)?;
    println!("student: {} steps, checkpoint {}", state.steps(), path.display());
    Ok(path)
}

pub fn train_baseline(common: &Common, data: &Path, kind: Baseline, teacher: Option<&Path>) -> Result<PathBuf> {
    let cfg = load_config(common.config.as_deref(), common.seed)?;
    let (ds, dref) = load_data(data)?;
    let samples = ds.samples(Split::Database);
    let dir = out_dir(&common.out, common.out_root.as_deref());
    let mut m = RunManifest::new("train-baseline", cfg.seed).with_config(&cfg);
    m.dataset = Some(dref);
    let path = match kind {
        Baseline::McDropout => {
            let (net, state) = train::train_mc_dropout(&samples, &cfg)?;
            let ckpt =
                Checkpoint::from_teacher(&net, NetKind::McDropout, state.steps(), state.epoch, &state.config_hash);
            write_training(&dir, "mc-dropout", ckpt, &state, &mut m)?
        }
        Baseline::Pfe => {
            let teacher =
                teacher.ok_or_else(|| Error::Usage("the PFE baseline needs --ckpt <teacher checkpoint>".into()))?;
            let (tckpt, tref) = load_checkpoint(teacher, &cfg)?;
            if tckpt.kind != NetKind::Teacher {
                return Err(Error::Usage(format!(
                    "{} is not a teacher checkpoint",
                    teacher.display()
                )));
            }
            m.checkpoints.push(tref);
            let (net, state) = train::train_pfe(&tckpt.to_teacher()?, &samples, &cfg)?;
            let ckpt = Checkpoint::from_student(&net, NetKind::Pfe, state.steps(), state.epoch, &state.config_hash);
            write_training(&dir, "pfe", ckpt, &state, &mut m)?
        }
    };
    m.write(&dir)?;
    println!("baseline checkpoint {}", path.display());
    Ok(path)
}

pub fn evaluate(
    common: &Common,
    eval: &EvalArgs,
    data: &Path,
    ckpt: &Path,
    mls_match: bool,
) -> Result<(PathBuf, MetricsReport)> {
    let cfg = with_eval(load_config(common.config.as_deref(), common.seed)?, eval)?;
    let (ds, dref) = load_data(data)?;
    let (c, cref) = load_checkpoint(ckpt, &cfg)?;
    let method = Method::for_checkpoint(c.kind, mls_match)?;
    let embedder = Embedder::from_checkpoint(&c, &cfg)?;
    let report = evaluate_method(method, &embedder, &ds, &cfg)?;
    let dir = out_dir(&common.out, common.out_root.as_deref());
    let path = dir.join("metrics.json");
    write_atomic(&path, report.to_json()?.as_bytes())?;
    let mut m = RunManifest::new("evaluate", cfg.seed).with_config(&cfg);
    m.dataset = Some(dref);
    m.checkpoints.push(cref);
    m.metrics = Some(path.clone());
    m.outputs.push(path.clone());
    m.write(&dir)?;
    let r1 = report.recall.first().map_or(f64::NAN, |c| c.value);
    match report.ece_ap {
        Some(e) => println!("{}: r@1 {r1:.3}, AP {:.3}, ECE(AP) {e:.3}", report.method, report.ap),
        None => println!("{}: r@1 {r1:.3}, AP {:.3}", report.method, report.ap),
    }
    Ok((path, report))
}

pub fn plot(metrics: &Path, out: &Path, root: Option<&Path>) -> Result<()> {
    let report: MetricsReport = serde_json::from_str(&read_text(metrics)?)
        .map_err(|e| Error::Usage(format!("{} is not a metrics report: {e}", metrics.display())))?;
    let dir = out_dir(out, root);
    let written = plot::render_all(&report, &dir)?;
    let mut m = RunManifest::new("plot", 0);
    m.metrics = Some(metrics.to_path_buf());
    m.outputs = written;
    m.write(&dir)?;
    Ok(())
}

pub fn compare(common: &Common, eval: &EvalArgs, data: &Path, ckpts: &[PathBuf], mls_match: bool) -> Result<()> {
    let cfg = with_eval(load_config(common.config.as_deref(), common.seed)?, eval)?;
    let (ds, dref) = load_data(data)?;
    let dir = out_dir(&common.out, common.out_root.as_deref());
    let mut m = RunManifest::new("compare", cfg.seed).with_config(&cfg);
    m.dataset = Some(dref);
    let mut methods = Vec::new();
    for p in ckpts {
        let (c, r) = load_checkpoint(p, &cfg)?;
        m.checkpoints.push(r);
        let pfe = c.kind == NetKind::Pfe;
        methods.push((c.clone(), false));
        if mls_match && pfe {
            methods.push((c, true));
        }
    }
    let table = compare_methods(&methods, &ds, &cfg)?;
    let json = dir.join("comparison.json");
    let text = dir.join("comparison.txt");
    write_atomic(&json, table.to_json()?.as_bytes())?;
    write_atomic(&text, table.to_text().as_bytes())?;
    m.outputs.push(json);
    m.outputs.push(text);
    m.write(&dir)?;
    print!("{}", table.to_text());
    Ok(())
}

/// Whole experiment under one output directory.
pub fn run(common: &Common, eval: &EvalArgs, spec: Option<&Path>, baselines: bool) -> Result<()> {
    let root = out_dir(&common.out, common.out_root.as_deref());
    let sub = |name: &str| Common {
        out: root.join(name),
        out_root: None,
        ..common.clone()
    };
    let data = generate(&sub("data"), spec)?;
    let teacher = train_teacher(&sub("teacher"), &data)?;
    let student = train_student(&sub("student"), &data, &teacher)?;
    let mut ckpts = vec![teacher.clone(), student.clone()];
    if baselines {
        ckpts.push(train_baseline(&sub("mc-dropout"), &data, Baseline::McDropout, None)?);
        ckpts.push(train_baseline(&sub("pfe"), &data, Baseline::Pfe, Some(&teacher))?);
    }
    for (name, ckpt) in [("teacher", &teacher), ("student", &student)] {
        let (metrics, _) = evaluate(&sub(&format!("eval/{name}")), eval, &data, ckpt, false)?;
        plot(&metrics, &root.join("plots").join(name), None)?;
    }
    compare(&sub("."), eval, &data, &ckpts, baselines)
}

pub fn show_config(path: Option<&Path>, seed: Option<u64>) -> Result<()> {
    print!("{}", load_config(path, seed)?.to_toml_string());
    Ok(())
}
