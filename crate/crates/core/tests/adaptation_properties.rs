use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use asvadapt::adaptation::{adapt, aplda_update, coral_adapt, coral_align, AdaptConfig, AdaptMethod, CoralPlusMode};
use asvadapt::linalg::{SymMatrix, DEFAULT_EPS_REG};
use asvadapt::plda::{fit_plda_em, PldaModel};
use asvadapt::protocol::{EmbeddingRecord, EmbeddingSet};
use asvadapt::synth::{random_spd, synth_corpus, SynthSpec};

fn rel_err(a: &SymMatrix, b: &SymMatrix) -> f64 {
    a.sub(b).frobenius_norm() / b.frobenius_norm()
}

#[test]
fn coral_with_matching_domains_is_plain_retraining() {
    let mut spec = SynthSpec::with_random_covariances(5, 21);
    spec.n_speakers = 80;
    let c = synth_corpus(&spec).unwrap();
    let (aligned, a) = coral_align(&c.ood, &c.ood, DEFAULT_EPS_REG).unwrap();
    assert!((a - DMatrix::identity(5, 5)).abs().max() < 1e-10);

    let model = fit_plda_em(&c.ood, 10).unwrap();
    let cfg = AdaptConfig::default().with_method(AdaptMethod::Coral);
    let adapted = coral_adapt(&model, &c.ood, &c.ood, &cfg, 10).unwrap();
    let plain = fit_plda_em(&c.ood, 10).unwrap();
    assert!((adapted.phi_b().matrix() - plain.phi_b().matrix()).abs().max() < 1e-8);
    assert!((adapted.phi_w().matrix() - plain.phi_w().matrix()).abs().max() < 1e-8);
    assert_eq!(aligned.len(), c.ood.len());
}

fn draw_from_model(model: &PldaModel, speakers: usize, utts: usize, seed: u64) -> EmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = model.dim();
    let lb = nalgebra::Cholesky::new(model.phi_b().matrix().clone()).unwrap().unpack();
    let lw = nalgebra::Cholesky::new(model.phi_w().matrix().clone()).unwrap().unpack();
    let gauss = |rng: &mut ChaCha8Rng| {
        DVector::from_fn(r, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
    };
    let mut set = EmbeddingSet::new(r);
    for s in 0..speakers {
        let y = model.mu() + &lb * gauss(&mut rng);
        for u in 0..utts {
            let x = &y + &lw * gauss(&mut rng);
            set.push(EmbeddingRecord::bonafide(format!("m{s}_{u}"), Some(&format!("m{s}")), x.as_slice().to_vec()))
                .unwrap();
        }
    }
    set
}

#[test]
fn in_distribution_adaptation_is_near_identity() {
    let mut spec = SynthSpec::with_random_covariances(8, 22);
    spec.n_speakers = 2000;
    spec.n_ind_spoofed = 0;
    let ood = synth_corpus(&spec).unwrap().ood;
    let model = fit_plda_em(&ood, 10).unwrap();
    let ind = draw_from_model(&model, 5000, 4, 25);
    assert_eq!(ind.len(), 20000);
    for method in [AdaptMethod::Coral, AdaptMethod::CoralPlus, AdaptMethod::Aplda] {
        for mode in [CoralPlusMode::Interp, CoralPlusMode::Uncertainty] {
            let cfg = AdaptConfig {
                coral_plus_mode: mode,
                ..AdaptConfig::default().with_method(method)
            };
            let out = adapt(&model, Some(&ood), &ind, &cfg, 10).unwrap();
            let eb = rel_err(out.phi_b(), model.phi_b());
            let ew = rel_err(out.phi_w(), model.phi_w());
            assert!(eb < 0.1 && ew < 0.1, "{method} {mode:?}: {eb} {ew}");
        }
    }
}

#[test]
fn aplda_excess_scales_linearly() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..10 {
        let phi_b = random_spd(5, 2.0, 0.3, &mut rng);
        let phi_w = random_spd(5, 1.0, 0.2, &mut rng);
        let s = random_spd(5, 6.0, 0.1, &mut rng);
        let (b1, w1) = aplda_update(&phi_b, &phi_w, &s, 0.4, 0.8).unwrap();
        for c in [1.0, 0.5, 0.25, 0.1] {
            let (bc, wc) = aplda_update(&phi_b, &phi_w, &s, 0.4 * c, 0.8 * c).unwrap();
            let want_b = (b1.matrix() - phi_b.matrix()) * c;
            let want_w = (w1.matrix() - phi_w.matrix()) * c;
            assert!(((bc.matrix() - phi_b.matrix()) - want_b).abs().max() < 1e-12);
            assert!(((wc.matrix() - phi_w.matrix()) - want_w).abs().max() < 1e-12);
        }
    }
}

#[test]
fn adapted_models_stay_valid() {
    let mut spec = SynthSpec::with_random_covariances(6, 24);
    spec.n_speakers = 60;
    let c = synth_corpus(&spec).unwrap();
    let model = fit_plda_em(&c.ood, 5).unwrap();
    let mixed = c.ind_bonafide.concat(&c.ind_spoofed).unwrap();
    for method in [AdaptMethod::Coral, AdaptMethod::CoralPlus, AdaptMethod::Aplda] {
        let cfg = AdaptConfig::pa().with_method(method);
        let out = adapt(&model, Some(&c.ood), &mixed, &cfg, 5).unwrap();
        assert!(out.diag_cache().is_some());
        assert_eq!(out.chain(), model.chain());
    }
    let bad = AdaptConfig {
        beta: 1.5,
        ..AdaptConfig::default()
    };
    assert!(adapt(&model, Some(&c.ood), &mixed, &bad, 5).unwrap_err().is_config());
}
