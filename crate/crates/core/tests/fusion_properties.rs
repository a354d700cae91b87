use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use asvadapt::fusion::{fit_gaussian_backend, fuse_score, two_class_llr, FusionSample};
use asvadapt::protocol::TrialKey;

fn training_set(seed: u64) -> Vec<FusionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut out = Vec::new();
    for (key, m, rho) in [
        (TrialKey::Target, [1.5, 2.0], 0.3),
        (TrialKey::Nontarget, [1.0, -1.5], -0.2),
        (TrialKey::Spoof, [-2.0, 1.0], 0.5),
    ] {
        for _ in 0..300 {
            let z0: f64 = n.sample(&mut rng);
            let z1: f64 = n.sample(&mut rng);
            out.push(FusionSample {
                s_cm: m[0] + z0,
                s_asv: m[1] + rho * z0 + (1.0 - rho * rho).sqrt() * z1,
                key,
            });
        }
    }
    out
}

fn affine(s: &[FusionSample], a: [[f64; 2]; 2], b: [f64; 2]) -> Vec<FusionSample> {
    s.iter()
        .map(|x| {
            let [u, v] = apply(a, b, [x.s_cm, x.s_asv]);
            FusionSample { s_cm: u, s_asv: v, key: x.key }
        })
        .collect()
}

fn apply(a: [[f64; 2]; 2], b: [f64; 2], s: [f64; 2]) -> [f64; 2] {
    [a[0][0] * s[0] + a[0][1] * s[1] + b[0], a[1][0] * s[0] + a[1][1] * s[1] + b[1]]
}

#[test]
fn llr_invariant_under_affine_maps() {
    let train = training_set(31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    // general affine maps, without the diagonal loading
    let base = fit_gaussian_backend(&train, 0.5).unwrap().with_eps_reg(0.0).unwrap();
    let a = [[2.0, 0.7], [-0.3, 0.5]];
    let b = [4.0, -1.0];
    let mapped = fit_gaussian_backend(&affine(&train, a, b), 0.5).unwrap().with_eps_reg(0.0).unwrap();
    for _ in 0..100 {
        let s = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        let l0 = fuse_score(&base, s).unwrap();
        let l1 = fuse_score(&mapped, apply(a, b, s)).unwrap();
        assert!((l0 - l1).abs() < 1e-8, "{l0} vs {l1}");
    }
    // similarity maps keep the invariance with the default loading
    let base = fit_gaussian_backend(&train, 0.5).unwrap();
    let (c, s_) = (0.6f64.cos() * 3.0, 0.6f64.sin() * 3.0);
    let a = [[c, -s_], [s_, c]];
    let mapped = fit_gaussian_backend(&affine(&train, a, b), 0.5).unwrap();
    for _ in 0..100 {
        let s = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        let l0 = fuse_score(&base, s).unwrap();
        let l1 = fuse_score(&mapped, apply(a, b, s)).unwrap();
        assert!((l0 - l1).abs() < 1e-8, "{l0} vs {l1}");
    }
}

#[test]
fn alpha_near_one_is_two_class_llr() {
    let fitted = fit_gaussian_backend(&training_set(33), 0.5).unwrap();
    let b = fitted.with_mix_alpha(1.0 - 1e-12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..100 {
        let s = [rng.random_range(-1.0..3.0), rng.random_range(-2.0..3.0)];
        let fused = fuse_score(&b, s).unwrap();
        let two = two_class_llr(&b.target, &b.nontarget, b.eps_reg, s).unwrap();
        assert!((fused - two).abs() < 1e-6, "{fused} vs {two}");
    }
}

#[test]
fn extreme_scores_stay_finite() {
    let b = fit_gaussian_backend(&training_set(35), 0.5).unwrap();
    for s in [[1e6, 1e6], [-1e6, 1e6], [1e6, -1e6], [-1e6, -1e6], [0.0, 1e6], [1e6, 0.0]] {
        assert!(fuse_score(&b, s).unwrap().is_finite());
    }
}
