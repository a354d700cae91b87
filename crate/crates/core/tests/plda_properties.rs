use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use asvadapt::plda::{
    apply_preprocess, enroll, fit_plda_em, fit_preprocess_with, score_trial, PldaModel,
    PreprocessChain, Scorer,
};
use asvadapt::protocol::{EmbeddingRecord, EmbeddingSet};
use asvadapt::synth::{random_spd, synth_corpus, SynthSpec};

fn gauss(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z
    })
}

fn random_model(r: usize, seed: u64) -> PldaModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi_b = random_spd(r, 2.0, 0.2, &mut rng);
    let phi_w = random_spd(r, 1.0, 0.3, &mut rng);
    PldaModel::new(gauss(r, &mut rng), phi_b, phi_w, PreprocessChain::identity(r)).unwrap()
}

#[test]
fn scoring_is_symmetric_for_single_sessions() {
    let model = random_model(6, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let e = gauss(6, &mut rng);
        let t = gauss(6, &mut rng);
        let fwd = score_trial(&model, &enroll(&model, &[e.as_slice()], "a").unwrap(), &t).unwrap();
        let rev = score_trial(&model, &enroll(&model, &[t.as_slice()], "b").unwrap(), &e).unwrap();
        assert!((fwd - rev).abs() < 1e-10, "{fwd} vs {rev}");
    }
}

#[test]
fn recanonicalization_keeps_scores() {
    let model = random_model(5, 3);
    let mut again = model.clone();
    again.recanonicalize().unwrap();
    let (s1, s2) = (Scorer::new(&model).unwrap(), Scorer::new(&again).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let st = enroll(&model, &[gauss(5, &mut rng).as_slice()], "m").unwrap();
        let t = gauss(5, &mut rng);
        let a = s1.score(&st, &t).unwrap();
        let b = s2.score(&st, &t).unwrap();
        assert!((a - b).abs() < 1e-10);
        assert!((a - score_trial(&again, &st, &t).unwrap()).abs() < 1e-8);
    }
}

#[test]
fn diag_cache_diagonalizes_both_covariances() {
    let model = random_model(7, 5);
    let cache = model.diag_cache().unwrap();
    let d = &cache.transform;
    let w = d * model.phi_w().matrix() * d.transpose();
    let b = d * model.phi_b().matrix() * d.transpose();
    assert!((w - DMatrix::identity(7, 7)).abs().max() < 1e-8);
    assert!((b - DMatrix::from_diagonal(&cache.psi)).abs().max() < 1e-8);
}

#[test]
fn same_speaker_trials_score_higher() {
    let model = random_model(4, 6);
    let chol_b = nalgebra::Cholesky::new(model.phi_b().matrix().clone()).unwrap().unpack();
    let chol_w = nalgebra::Cholesky::new(model.phi_w().matrix().clone()).unwrap().unpack();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let draw = |y: &DVector<f64>, rng: &mut ChaCha8Rng| y + &chol_w * gauss(4, rng);
    let (mut same, mut diff) = (0.0, 0.0);
    for _ in 0..1000 {
        let y1 = model.mu() + &chol_b * gauss(4, &mut rng);
        let y2 = model.mu() + &chol_b * gauss(4, &mut rng);
        let e = draw(&y1, &mut rng);
        let st = enroll(&model, &[e.as_slice()], "m").unwrap();
        same += score_trial(&model, &st, &draw(&y1, &mut rng)).unwrap();
        diff += score_trial(&model, &st, &draw(&y2, &mut rng)).unwrap();
    }
    assert!(same / 1000.0 > diff / 1000.0, "same {same} diff {diff}");
}

fn fisher(w: &DMatrix<f64>, s_w: &DMatrix<f64>, s_b: &DMatrix<f64>) -> f64 {
    let pw = w * s_w * w.transpose();
    let pb = w * s_b * w.transpose();
    (pw.try_inverse().unwrap() * pb).trace()
}

#[test]
fn lda_beats_random_projections() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 5;
    let mut set = EmbeddingSet::new(d);
    let centers: Vec<DVector<f64>> = (0..3).map(|_| gauss(d, &mut rng) * 2.0).collect();
    let shape = random_spd(d, 1.0, 0.1, &mut rng);
    let chol = nalgebra::Cholesky::new(shape.matrix().clone()).unwrap().unpack();
    for (s, c) in centers.iter().enumerate() {
        for u in 0..40 {
            let x = c + &chol * gauss(d, &mut rng);
            set.push(EmbeddingRecord::bonafide(format!("s{s}u{u}"), Some(&format!("s{s}")), x.as_slice().to_vec()))
                .unwrap();
        }
    }
    let chain = fit_preprocess_with(&set, 2, 0.0, false).unwrap();
    // scatters of the centered data
    let data: Vec<DVector<f64>> = set
        .iter()
        .map(|r| DVector::from_column_slice(&r.vector) - chain.global_mean())
        .collect();
    let mut s_w = DMatrix::zeros(d, d);
    let mut s_b = DMatrix::zeros(d, d);
    for s in 0..3 {
        let members = &data[s * 40..(s + 1) * 40];
        let mean = members.iter().fold(DVector::zeros(d), |a, x| a + x) / 40.0;
        for x in members {
            s_w += (x - &mean) * (x - &mean).transpose();
        }
        s_b += &mean * mean.transpose() * 40.0;
    }
    let best = fisher(chain.lda(), &s_w, &s_b);
    for _ in 0..100 {
        let w = DMatrix::from_fn(2, d, |_, _| rng.random_range(-1.0..1.0));
        assert!(best >= fisher(&w, &s_w, &s_b) - 1e-9);
    }
    let projected = apply_preprocess(&chain, &set).unwrap();
    assert_eq!(projected.dim(), 2);
    for k in 0..2 {
        assert!((chain.lda().row(k).norm() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn em_on_synthetic_corpus_produces_usable_model() {
    let spec = SynthSpec::with_random_covariances(6, 12);
    let c = synth_corpus(&spec).unwrap();
    let model = fit_plda_em(&c.ood, 10).unwrap();
    let truth = spec.phi_b.add(&spec.phi_w);
    let rel = model.total_cov().sub(&truth).frobenius_norm() / truth.frobenius_norm();
    assert!(rel < 0.15, "{rel}");
}
