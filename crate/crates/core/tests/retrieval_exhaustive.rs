mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stun_core::losses::mls_loss;
use stun_core::retrieval::{build_index, uncertainty_scalar, EmbeddingIndex};
use stun_core::{EmbeddingDistribution, GeoTag};

use oracles::retrieval::*;

#[test]
fn topk_equals_exhaustive_search() {
    for seed in [1, 2] {
        if let Err(e) = check_retrieval(seed) {
            panic!("{e}");
        }
    }
}

#[test]
fn exact_ties_are_ordered_by_id() {
    let (index, embs, ids, _) = setup(3);
    // a database row that has an exact duplicate
    let (r1, r2) = (0..N)
        .flat_map(|a| ((a + 1)..N).map(move |b| (a, b)))
        .find(|&(a, b)| embs[a] == embs[b])
        .unwrap();
    let got = index.query_topk(0, &embs[r1], 2).unwrap();
    assert_eq!(got.scores, vec![0.0, 0.0]);
    assert_eq!(got.candidates, vec![ids[r1].min(ids[r2]), ids[r1].max(ids[r2])]);
}

#[test]
fn constant_tiny_variance_makes_mls_rank_like_euclidean() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tiny = vec![1e-3; D];
    let embs: Vec<EmbeddingDistribution> = (0..N)
        .map(|_| EmbeddingDistribution::new(random_unit(&mut rng), tiny.clone()).unwrap())
        .collect();
    let ids: Vec<u64> = (0..N as u64).collect();
    let geos = vec![GeoTag::new(0.0, 0.0); N];
    let index = build_index(&embs, &ids, &geos).unwrap();
    for qi in 0..QUERIES {
        let q = EmbeddingDistribution::new(random_unit(&mut rng), tiny.clone()).unwrap();
        let e = index.query_topk(qi as u64, &q, 20).unwrap();
        let m = index.query_topk_mls(qi as u64, &q, 20).unwrap();
        assert_eq!(e.candidates, m.candidates);
    }
}

#[test]
fn single_candidate_mls_score_is_the_mls_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_dist(&mut rng);
    let b = random_dist(&mut rng);
    let index = build_index(std::slice::from_ref(&b), &[9], &[GeoTag::new(0.0, 0.0)]).unwrap();
    let r = index.query_topk_mls(1, &a, 1).unwrap();
    assert_eq!(r.scores[0], mls_loss(&a, &b).unwrap());
    assert_eq!(r.candidates, vec![9]);
}

#[test]
fn duplicated_database_self_query_survives_a_shift_and_renormalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let embs: Vec<EmbeddingDistribution> = (0..100).map(|_| random_dist(&mut rng)).collect();
    let shift: Vec<f64> = (0..D).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let shifted: Vec<EmbeddingDistribution> = embs
        .iter()
        .map(|e| {
            let m: Vec<f64> = e.mean().iter().zip(&shift).map(|(a, s)| a + s).collect();
            let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
            EmbeddingDistribution::new(m.iter().map(|x| x / norm).collect(), e.variance().to_vec()).unwrap()
        })
        .collect();
    let ids: Vec<u64> = (0..100).collect();
    let index = build_index(&shifted, &ids, &vec![GeoTag::new(0.0, 0.0); 100]).unwrap();
    for (i, q) in shifted.iter().enumerate() {
        assert_eq!(index.query_topk(i as u64, q, 1).unwrap().candidates, vec![i as u64]);
    }
}

#[test]
fn uncertainty_scalar_examples() {
    let mean = {
        let mut m = vec![0.0; D];
        m[0] = 1.0;
        m
    };
    let quarter = EmbeddingDistribution::new(mean.clone(), vec![0.25; D]).unwrap();
    assert_eq!(uncertainty_scalar(&quarter), 0.25);
    let two = EmbeddingDistribution::new(vec![1.0, 0.0], vec![0.1, 0.3]).unwrap();
    assert!((uncertainty_scalar(&two) - 0.2).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let d = random_dist(&mut rng);
        let mut acc = 0.0;
        for v in d.variance() {
            acc += v;
        }
        assert_eq!(uncertainty_scalar(&d), acc / D as f64);
    }
}

#[test]
fn index_file_round_trip_is_lossless() {
    let (index, _, _, _) = setup(8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("db.idx");
    index.save(&path).unwrap();
    assert_eq!(EmbeddingIndex::load(&path).unwrap(), index);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    assert!(EmbeddingIndex::from_bytes(&bytes).is_err());
}
