use ndarray::{Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stun_core::config::{Epochs, ExperimentConfig};
use stun_core::model::{
    stack_images, Backbone, Checkpoint, EncoderSpec, NetKind, Network, Pooling, StudentNet, TeacherNet, TensorRole,
    VARIANCE_HEAD_INIT,
};
use stun_core::synthdata::{generate, SynthSpec};
use stun_core::train::{init_teacher, train_student, train_teacher};
use stun_core::{Error, Split};

fn random_batch(rng: &mut ChaCha8Rng, n: usize, shape: [usize; 3]) -> Array4<f32> {
    Array4::from_shape_fn((n, shape[0], shape[1], shape[2]), |_| rng.gen_range(-1.0f32..1.0))
}

fn small_data() -> stun_core::Dataset {
    let spec = SynthSpec {
        num_places: 8,
        samples_per_place: 6,
        queries_per_place: 2,
        ..SynthSpec::default()
    };
    generate(&spec, &Default::default()).unwrap()
}

fn teacher(seed: u64) -> TeacherNet {
    let data = small_data();
    init_teacher(&EncoderSpec::desk(), &data.samples(Split::Database), seed).unwrap()
}

fn buffers(net: &impl Network) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    net.visit_tensors(&mut |_, _, data, role| {
        if role == TensorRole::Buffer {
            out.push(data.to_vec());
        }
    });
    out
}

#[test]
fn resnet50_trunk_has_the_reference_parameter_count() {
    // torchvision resnet50 without its final fully connected layer
    let net = TeacherNet::new(&EncoderSpec::default(), 0).unwrap();
    assert_eq!(net.parameter_count(), 23_508_032);
}

#[test]
fn student_adds_exactly_a_square_head() {
    for spec in [
        EncoderSpec::desk(),
        EncoderSpec {
            embedding_dim: 24,
            ..EncoderSpec::desk()
        },
        EncoderSpec {
            backbone: Backbone::ResNet { depth: 18 },
            ..EncoderSpec::desk()
        },
    ] {
        let t = TeacherNet::new(&spec, 1).unwrap();
        let s = StudentNet::from_teacher(&t, 2);
        let d = spec.embedding_dim;
        assert_eq!(s.parameter_count(), t.parameter_count() + d * d + d);
    }
}

#[test]
fn teacher_outputs_are_unit_norm_deterministic_and_batch_independent() {
    let net = teacher(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut x = random_batch(&mut rng, 7, [3, 32, 32]);
    let dup = x.index_axis(Axis(0), 2).to_owned();
    x.index_axis_mut(Axis(0), 5).assign(&dup);
    let a = net.forward(&x).unwrap();
    assert_eq!(a.dim(), (7, 32));
    for row in a.rows() {
        let n: f32 = row.dot(&row).sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
    assert_eq!(a, net.forward(&x).unwrap());
    assert_eq!(a.row(2), a.row(5));
    // frozen normalization: a row does not depend on its batch mates
    let alone = net.forward(&x.slice(ndarray::s![2..3, .., .., ..]).to_owned()).unwrap();
    assert_eq!(alone.row(0), a.row(2));
}

#[test]
fn wrong_input_shape_is_rejected() {
    let net = teacher(4);
    let x = Array4::<f32>::zeros((2, 3, 16, 16));
    assert!(matches!(net.forward(&x), Err(Error::Shape(_))));
}

#[test]
fn copied_student_matches_teacher_and_is_independent() {
    let t = teacher(5);
    let s = StudentNet::from_teacher(&t, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_batch(&mut rng, 9, [3, 32, 32]);
    let (mean, var) = s.forward(&x).unwrap();
    assert_eq!(mean, t.forward(&x).unwrap());
    assert_eq!(var.dim(), (9, 32));
    assert!(var.iter().all(|&v| v > 0.0 && v <= 1.0));
    let w = &s.variance_head().weight;
    assert!(w.iter().any(|&v| v != 0.0));
    assert!(w.iter().all(|&v| v.abs() <= VARIANCE_HEAD_INIT));
    assert!(s.variance_head().bias.iter().all(|&b| b == 0.0));
    // tiny weights, zero bias: variance starts near one half
    assert!(var.iter().all(|&v| (v - 0.5).abs() < 0.05));

    let before = t.parameter_hash();
    let data = small_data();
    let cfg = ExperimentConfig {
        epochs: Epochs {
            teacher: 0,
            student: 1,
            pfe: 0,
        },
        ..ExperimentConfig::desk()
    };
    let (trained, _) = train_student(&t, &data.samples(Split::Database), &cfg).unwrap();
    assert_ne!(trained.parameter_hash(), s.parameter_hash());
    assert_eq!(t.parameter_hash(), before);
}

#[test]
fn fresh_student_keeps_the_teacher_norm_statistics() {
    let t = teacher(7);
    let s = StudentNet::fresh(&t, 8).unwrap();
    assert_eq!(buffers(&s.mean_network()), buffers(&t));
    assert!(s.extractor().norms_frozen());
    assert_ne!(s.mean_network().parameter_hash(), t.parameter_hash());
}

#[test]
fn gem_with_unit_exponent_equals_average_pooling() {
    let base = EncoderSpec {
        embedding_dim: 64,
        ..EncoderSpec::desk()
    };
    let gem = TeacherNet::new(
        &EncoderSpec {
            pooling: Pooling::GeneralizedMean { p: 1.0 },
            ..base.clone()
        },
        9,
    )
    .unwrap();
    let avg = TeacherNet::new(
        &EncoderSpec {
            pooling: Pooling::Average,
            ..base
        },
        9,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_batch(&mut rng, 4, [3, 32, 32]);
    let (a, b) = (gem.forward(&x).unwrap(), avg.forward(&x).unwrap());
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() < 1e-6, "{u} vs {v}");
    }
}

#[test]
fn norm_statistics_stay_frozen_through_training() {
    let data = small_data();
    let samples = data.samples(Split::Database);
    let cfg = ExperimentConfig {
        epochs: Epochs {
            teacher: 2,
            student: 2,
            pfe: 0,
        },
        ..ExperimentConfig::desk()
    };
    let initial = init_teacher(&cfg.encoder, &samples, cfg.seed).unwrap();
    let (t, state) = train_teacher(&samples, &cfg).unwrap();
    assert!(state.steps() > 0);
    assert!(t.extractor().norms_frozen());
    assert_eq!(buffers(&t), buffers(&initial));
    assert_ne!(t.parameter_hash(), initial.parameter_hash());
    let (s, _) = train_student(&t, &samples, &cfg).unwrap();
    assert_eq!(buffers(&s.mean_network()), buffers(&t));
}

#[test]
fn mc_dropout_contracts() {
    let data = small_data();
    let samples = data.samples(Split::Database);
    let x = stack_images(samples.iter().take(5).map(|s| &s.image)).unwrap();

    let plain = init_teacher(&EncoderSpec::desk(), &samples, 10).unwrap();
    let (mean, var) = plain
        .mc_dropout_forward(&x, 5, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert!(var.iter().all(|&v| v == 0.0));
    assert_eq!(mean, plain.forward(&x).unwrap());

    let drop = init_teacher(&EncoderSpec::desk().with_dropout(0.2), &samples, 10).unwrap();
    let run = |seed| {
        drop.mc_dropout_forward(&x, 40, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap()
    };
    let (m1, v1) = run(1);
    let (m2, v2) = run(1);
    assert_eq!((&m1, &v1), (&m2, &v2));
    let (m3, _) = run(2);
    assert_ne!(m1, m3);
    assert!(v1.iter().all(|&v| v >= 0.0) && v1.iter().any(|&v| v > 0.0));
    for row in m1.rows() {
        assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-5);
    }
    assert!(matches!(
        drop.mc_dropout_forward(&x, 1, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(Error::Config(_))
    ));
    // inference without an rng ignores dropout
    assert_eq!(drop.forward(&x).unwrap(), drop.forward(&x).unwrap());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let t = teacher(11);
    let s = StudentNet::from_teacher(&t, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_batch(&mut rng, 3, [3, 32, 32]);

    let tp = dir.path().join("teacher.json");
    Checkpoint::from_teacher(&t, NetKind::Teacher, 10, 2, "abc")
        .save(&tp)
        .unwrap();
    let loaded = Checkpoint::load(&tp).unwrap();
    assert_eq!(loaded.step, 10);
    let t2 = loaded.to_teacher().unwrap();
    assert_eq!(t2, t);
    assert_eq!(t2.forward(&x).unwrap(), t.forward(&x).unwrap());
    assert!(loaded.expect_config("abc").is_ok());
    assert!(matches!(loaded.expect_config("abd"), Err(Error::HashMismatch { .. })));
    assert!(loaded.to_student().is_err());

    let sp = dir.path().join("student.json");
    Checkpoint::from_student(&s, NetKind::Student, 0, 0, "abc")
        .save(&sp)
        .unwrap();
    let s2 = Checkpoint::load(&sp).unwrap().to_student().unwrap();
    assert_eq!(s2.forward(&x).unwrap(), s.forward(&x).unwrap());
    assert_eq!(s2.parameter_hash(), s.parameter_hash());

    std::fs::write(&sp, b"{ not json").unwrap();
    assert!(Checkpoint::load(&sp).is_err());
}

#[test]
fn encoder_spec_validation() {
    let bad = [
        EncoderSpec {
            embedding_dim: 1,
            ..EncoderSpec::desk()
        },
        EncoderSpec {
            pooling: Pooling::GeneralizedMean { p: 0.0 },
            ..EncoderSpec::desk()
        },
        EncoderSpec::desk().with_dropout(1.0),
        EncoderSpec {
            backbone: Backbone::ResNet { depth: 42 },
            ..EncoderSpec::desk()
        },
    ];
    for spec in bad {
        assert!(TeacherNet::new(&spec, 0).is_err(), "{spec:?}");
    }
}
