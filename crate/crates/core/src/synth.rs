//! Synthetic corpora drawn from the two-covariance model, with an optional
//! affine in-domain shift and spoof utterances pulled toward the identity of
//! the speaker they attack.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::fusion::CmScores;
use crate::linalg::SymMatrix;
use crate::protocol::{
    EmbeddingRecord, EmbeddingSet, EnrollMap, Trial, TrialCounts, TrialKey, TrialList,
    LA_EVAL_COUNTS,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub dim: usize,
    /// Out-of-domain training speakers.
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub phi_b: SymMatrix,
    pub phi_w: SymMatrix,
    /// In-domain data is mapped `x <- M x + b`.
    pub shift_matrix: Option<DMatrix<f64>>,
    pub shift_offset: Option<DVector<f64>>,
    pub spoof_pull: f64,
    pub spoof_noise_scale: f64,
    pub seed: u64,
    /// Unlabelled in-domain adaptation pool.
    pub n_ind_speakers: usize,
    pub ind_utts_per_speaker: usize,
    pub n_ind_spoofed: usize,
    pub n_attacks: usize,
    /// Evaluation speakers; each is enrolled as one model.
    pub n_eval_speakers: usize,
    pub enroll_utts: usize,
    pub trial_counts: TrialCounts,
    /// Distance between bonafide and spoof countermeasure score means, in
    /// units of their common standard deviation.
    pub cm_separation: f64,
}

impl SynthSpec {
    pub fn new(dim: usize, phi_b: SymMatrix, phi_w: SymMatrix, seed: u64) -> Self {
        Self {
            dim,
            n_speakers: 200,
            utts_per_speaker: 10,
            phi_b,
            phi_w,
            shift_matrix: None,
            shift_offset: None,
            spoof_pull: 0.8,
            spoof_noise_scale: 0.1,
            seed,
            n_ind_speakers: 50,
            ind_utts_per_speaker: 4,
            n_ind_spoofed: 200,
            n_attacks: 6,
            n_eval_speakers: 40,
            enroll_utts: 3,
            trial_counts: LA_EVAL_COUNTS.scaled_down(10),
            cm_separation: 2.0,
        }
    }

    /// Anisotropic, randomly rotated covariances: between-speaker eigenvalues
    /// from 4 down to 0.5, within-speaker from 1 down to 0.25.
    pub fn with_random_covariances(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
        let phi_b = random_spd(dim, 4.0, 0.5, &mut rng);
        let phi_w = random_spd(dim, 1.0, 0.25, &mut rng);
        Self::new(dim, phi_b, phi_w, seed)
    }

    pub fn with_shift(mut self, matrix: DMatrix<f64>, offset: DVector<f64>) -> Self {
        self.shift_matrix = Some(matrix);
        self.shift_offset = Some(offset);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return cfg("dim must be positive".into());
        }
        if self.phi_b.dim() != self.dim || self.phi_w.dim() != self.dim {
            return cfg(format!(
                "covariances are {}x{} and {}x{}, dim is {}",
                self.phi_b.dim(),
                self.phi_b.dim(),
                self.phi_w.dim(),
                self.phi_w.dim(),
                self.dim
            ));
        }
        if let Some(m) = &self.shift_matrix {
            if m.nrows() != self.dim || m.ncols() != self.dim {
                return cfg(format!("shift matrix must be {0}x{0}", self.dim));
            }
        }
        if let Some(b) = &self.shift_offset {
            if b.len() != self.dim {
                return cfg(format!("shift offset must have length {}", self.dim));
            }
        }
        if self.n_speakers < 2 || self.utts_per_speaker < 1 {
            return cfg("need at least 2 OOD speakers with 1 utterance each".into());
        }
        if !(0.0..=1.0).contains(&self.spoof_pull) {
            return cfg(format!("spoof_pull {} outside [0, 1]", self.spoof_pull));
        }
        if !(self.spoof_noise_scale > 0.0 && self.spoof_noise_scale.is_finite()) {
            return cfg(format!("spoof_noise_scale must be > 0, got {}", self.spoof_noise_scale));
        }
        if !(1..=99).contains(&self.n_attacks) {
            return cfg(format!("n_attacks must be in 1..=99, got {}", self.n_attacks));
        }
        if self.n_ind_spoofed > 0 && self.n_ind_speakers == 0 {
            return cfg("in-domain spoofs need in-domain speakers to attack".into());
        }
        if self.n_eval_speakers == 0 || self.enroll_utts == 0 {
            return cfg("need at least one evaluation speaker with one enrollment".into());
        }
        if self.trial_counts.target == 0 {
            return cfg("trial list needs target trials".into());
        }
        if self.trial_counts.nontarget > 0 && self.n_eval_speakers < 2 {
            return cfg("non-target trials need at least 2 evaluation speakers".into());
        }
        if !self.cm_separation.is_finite() {
            return cfg("cm_separation must be finite".into());
        }
        cholesky(&self.phi_b, "phi_b")?;
        cholesky(&self.phi_w, "phi_w")?;
        Ok(())
    }
}

/// Everything generated from one [`SynthSpec`].
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub ood: EmbeddingSet,
    pub ind_bonafide: EmbeddingSet,
    pub ind_spoofed: EmbeddingSet,
    pub enroll: EmbeddingSet,
    pub test: EmbeddingSet,
    pub enroll_map: EnrollMap,
    pub trials: TrialList,
    pub cm_scores: CmScores,
}

impl SynthCorpus {
    /// Enrollment and test vectors of the evaluation partition together.
    pub fn eval_set(&self) -> Result<EmbeddingSet> {
        self.enroll.concat(&self.test)
    }
}

fn cholesky(m: &SymMatrix, what: &str) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(m.matrix().clone())
        .map(|c| c.unpack())
        .ok_or_else(|| Error::Config(format!("{what} is not positive definite")))
}

fn std_normal(dim: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z
    })
}

/// Haar-distributed rotation via QR of a Gaussian matrix.
pub fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z
    });
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Rotated SPD matrix with log-spaced eigenvalues from `hi` down to `lo`.
pub fn random_spd(dim: usize, hi: f64, lo: f64, rng: &mut ChaCha8Rng) -> SymMatrix {
    let q = random_rotation(dim, rng);
    let eig: Vec<f64> = (0..dim)
        .map(|i| {
            let t = if dim == 1 { 0.0 } else { i as f64 / (dim - 1) as f64 };
            hi * (lo / hi).powf(t)
        })
        .collect();
    SymMatrix::from_diagonal(&eig).congruence(&q)
}

/// Anisotropic scaling along randomly rotated axes, `Q^T diag(s) Q`, with
/// per-axis factors log-uniform in `[1/max_scale, max_scale]`, plus a Gaussian
/// offset of standard deviation `offset_sd` per coordinate.
pub fn random_shift(
    dim: usize,
    max_scale: f64,
    offset_sd: f64,
    seed: u64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if !(max_scale >= 1.0 && offset_sd >= 0.0) {
        return Err(Error::Config(format!(
            "shift needs max_scale >= 1 and offset_sd >= 0, got {max_scale}, {offset_sd}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_rotation(dim, &mut rng);
    let ln_s = max_scale.ln();
    let scales = DVector::from_fn(dim, |_, _| (rng.random_range(-1.0..=1.0) * ln_s).exp());
    let m = q.transpose() * DMatrix::from_diagonal(&scales) * q;
    let offset = std_normal(dim, &mut rng) * offset_sd;
    Ok((m, offset))
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    rng: ChaCha8Rng,
    chol_b: DMatrix<f64>,
    chol_w: DMatrix<f64>,
}

impl Generator<'_> {
    fn identity(&mut self) -> DVector<f64> {
        &self.chol_b * std_normal(self.spec.dim, &mut self.rng)
    }

    fn within(&mut self) -> DVector<f64> {
        &self.chol_w * std_normal(self.spec.dim, &mut self.rng)
    }

    fn utterance(&mut self, y: &DVector<f64>) -> DVector<f64> {
        y + self.within()
    }

    fn spoof(&mut self, target: &DVector<f64>) -> DVector<f64> {
        let attacker = self.identity();
        let x_attacker = self.utterance(&attacker);
        let noise = self.within() * self.spec.spoof_noise_scale.sqrt();
        x_attacker * (1.0 - self.spec.spoof_pull) + target * self.spec.spoof_pull + noise
    }

    fn shifted(&self, x: DVector<f64>) -> Vec<f64> {
        let x = match &self.spec.shift_matrix {
            Some(m) => m * x,
            None => x,
        };
        let x = match &self.spec.shift_offset {
            Some(b) => x + b,
            None => x,
        };
        x.as_slice().to_vec()
    }
}

fn attack_id(k: usize) -> String {
    format!("A{:02}", k + 1)
}

/// Draws a full corpus. Out-of-domain speakers `S…`, in-domain adaptation
/// speakers `I…` and evaluation speakers `E…` are disjoint identities; the
/// shift applies to everything except the OOD set. Each spoof comes from a
/// fresh attacker identity. Trials are emitted targets first, then
/// non-targets, then spoofs, cycling over the enrolled models.
pub fn synth_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut g = Generator {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        chol_b: cholesky(&spec.phi_b, "phi_b")?,
        chol_w: cholesky(&spec.phi_w, "phi_w")?,
    };
    let d = spec.dim;

    let mut ood = EmbeddingSet::new(d);
    for s in 0..spec.n_speakers {
        let spk = format!("S{s:04}");
        let y = g.identity();
        for u in 0..spec.utts_per_speaker {
            let x = g.utterance(&y);
            ood.push(EmbeddingRecord::bonafide(
                format!("ood_{spk}_{u:03}"),
                Some(&spk),
                x.as_slice().to_vec(),
            ))?;
        }
    }

    let mut ind_bonafide = EmbeddingSet::new(d);
    let mut ind_ids = Vec::with_capacity(spec.n_ind_speakers);
    for s in 0..spec.n_ind_speakers {
        let spk = format!("I{s:04}");
        let y = g.identity();
        for u in 0..spec.ind_utts_per_speaker {
            let x = g.utterance(&y);
            ind_bonafide.push(EmbeddingRecord::bonafide(
                format!("ind_{spk}_{u:03}"),
                Some(&spk),
                g.shifted(x),
            ))?;
        }
        ind_ids.push((spk, y));
    }

    let mut ind_spoofed = EmbeddingSet::new(d);
    for i in 0..spec.n_ind_spoofed {
        let (spk, y) = &ind_ids[i % ind_ids.len()];
        let attack = attack_id(i % spec.n_attacks);
        let x = g.spoof(y);
        ind_spoofed.push(EmbeddingRecord::spoof(
            format!("spf_{spk}_{attack}_{i:05}"),
            Some(spk),
            &attack,
            g.shifted(x),
        ))?;
    }

    let mut enroll = EmbeddingSet::new(d);
    let mut enroll_map = EnrollMap::new();
    let mut models = Vec::with_capacity(spec.n_eval_speakers);
    for s in 0..spec.n_eval_speakers {
        let spk = format!("E{s:04}");
        let y = g.identity();
        for u in 0..spec.enroll_utts {
            let utt = format!("enr_{spk}_{u:02}");
            let x = g.utterance(&y);
            enroll.push(EmbeddingRecord::bonafide(utt.clone(), Some(&spk), g.shifted(x)))?;
            enroll_map.add(&spk, &utt)?;
        }
        models.push((spk, y));
    }

    let n_models = models.len();
    let bonafide_cm = Normal::new(0.5 * spec.cm_separation, 1.0).expect("unit sd");
    let spoof_cm = Normal::new(-0.5 * spec.cm_separation, 1.0).expect("unit sd");
    let mut test = EmbeddingSet::new(d);
    let mut trials = TrialList::new();
    let mut cm_scores = CmScores::new();
    let mut n_test = 0usize;
    let mut add_test = |g: &mut Generator,
                        speaker: &str,
                        model: &str,
                        key: TrialKey,
                        attack: Option<String>,
                        x: DVector<f64>|
     -> Result<()> {
        let utt = format!("tst_{n_test:06}");
        n_test += 1;
        let vec = g.shifted(x);
        let record = match &attack {
            Some(a) => EmbeddingRecord::spoof(utt.clone(), Some(speaker), a, vec),
            None => EmbeddingRecord::bonafide(utt.clone(), Some(speaker), vec),
        };
        test.push(record)?;
        let cm = if attack.is_some() {
            spoof_cm.sample(&mut g.rng)
        } else {
            bonafide_cm.sample(&mut g.rng)
        };
        cm_scores.push(&utt, cm)?;
        trials.push(Trial {
            model_id: model.to_string(),
            test_utt: utt,
            key,
            attack,
        })
    };

    for i in 0..spec.trial_counts.target {
        let (spk, y) = &models[i % n_models];
        let x = g.utterance(y);
        add_test(&mut g, spk, spk, TrialKey::Target, None, x)?;
    }
    for i in 0..spec.trial_counts.nontarget {
        let m = i % n_models;
        let other = (m + 1 + g.rng.random_range(0..n_models - 1)) % n_models;
        let (imp_spk, y) = &models[other];
        let x = g.utterance(y);
        add_test(&mut g, imp_spk, &models[m].0, TrialKey::Nontarget, None, x)?;
    }
    for i in 0..spec.trial_counts.spoof {
        let (spk, y) = &models[i % n_models];
        let x = g.spoof(y);
        let attack = attack_id(i % spec.n_attacks);
        add_test(&mut g, spk, spk, TrialKey::Spoof, Some(attack), x)?;
    }

    Ok(SynthCorpus {
        ood,
        ind_bonafide,
        ind_spoofed,
        enroll,
        test,
        enroll_map,
        trials,
        cm_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::compute_eer;
    use crate::linalg::estimate_mean_cov;
    use crate::plda::{enroll, PldaModel, PreprocessChain, Scorer};
    use crate::protocol::{write_embeddings, EmbeddingFormat};

    fn small_spec(seed: u64) -> SynthSpec {
        let mut spec = SynthSpec::with_random_covariances(4, seed);
        spec.n_speakers = 20;
        spec.utts_per_speaker = 3;
        spec.n_eval_speakers = 10;
        spec.trial_counts = TrialCounts::new(50, 80, 90);
        spec
    }

    fn true_eers(spec: &SynthSpec) -> (f64, f64) {
        let c = synth_corpus(spec).unwrap();
        let model = PldaModel::new(
            DVector::zeros(spec.dim),
            spec.phi_b.clone(),
            spec.phi_w.clone(),
            PreprocessChain::identity(spec.dim),
        )
        .unwrap();
        let scorer = Scorer::new(&model).unwrap();
        let stats: std::collections::HashMap<&str, _> = c
            .enroll_map
            .models()
            .iter()
            .map(|(m, utts)| {
                let v: Vec<&[f64]> = utts.iter().map(|u| c.enroll.get(u).unwrap().vector.as_slice()).collect();
                (m.as_str(), enroll(&model, &v, m).unwrap())
            })
            .collect();
        let (mut tar, mut non, mut spf) = (vec![], vec![], vec![]);
        for t in c.trials.trials() {
            let x = DVector::from_column_slice(&c.test.get(&t.test_utt).unwrap().vector);
            let s = scorer.score(&stats[t.model_id.as_str()], &x).unwrap();
            match t.key {
                TrialKey::Target => tar.push(s),
                TrialKey::Nontarget => non.push(s),
                TrialKey::Spoof => spf.push(s),
            }
        }
        (compute_eer(&tar, &non).unwrap().eer, compute_eer(&tar, &spf).unwrap().eer)
    }

    #[test]
    fn trial_structure() {
        let spec = small_spec(1);
        let c = synth_corpus(&spec).unwrap();
        assert_eq!(c.trials.counts(), spec.trial_counts);
        assert_eq!(c.test.len(), spec.trial_counts.total());
        assert_eq!(c.cm_scores.len(), c.test.len());
        assert_eq!(c.ood.len(), 60);
        assert_eq!(c.ind_spoofed.len(), spec.n_ind_spoofed);
        assert_eq!(c.trials.attacks(), vec!["A01", "A02", "A03", "A04", "A05", "A06"]);
        for t in c.trials.trials() {
            let rec = c.test.get(&t.test_utt).unwrap();
            let same = rec.speaker.as_deref() == Some(t.model_id.as_str());
            assert_eq!(same, t.key != TrialKey::Nontarget);
        }
    }

    #[test]
    fn deterministic_binary_output() {
        let spec = small_spec(5);
        let bytes = |c: &SynthCorpus| {
            let mut buf = Vec::new();
            write_embeddings(&c.ood, &mut buf, EmbeddingFormat::Binary).unwrap();
            write_embeddings(&c.test, &mut buf, EmbeddingFormat::Binary).unwrap();
            buf
        };
        let a = synth_corpus(&spec).unwrap();
        let b = synth_corpus(&spec).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
        assert_eq!(a.cm_scores, b.cm_scores);
        let c = synth_corpus(&small_spec(6)).unwrap();
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn unpulled_spoofs_look_like_impostors() {
        let mut spec = small_spec(3);
        spec.spoof_pull = 0.0;
        spec.trial_counts = TrialCounts::new(2000, 2000, 2000);
        let (non, spf) = true_eers(&spec);
        assert!((non - spf).abs() < 0.05, "{non} vs {spf}");
    }

    #[test]
    fn fully_pulled_spoofs_defeat_the_scorer() {
        let mut spec = small_spec(4);
        spec.spoof_pull = 1.0;
        spec.spoof_noise_scale = 0.01;
        spec.trial_counts = TrialCounts::new(1000, 100, 1000);
        let (_, spf) = true_eers(&spec);
        assert!(spf >= 0.45, "{spf}");
    }

    #[test]
    fn ood_total_covariance_converges() {
        let mut spec = SynthSpec::with_random_covariances(4, 9);
        spec.n_speakers = 2000;
        spec.utts_per_speaker = 10;
        let c = synth_corpus(&spec).unwrap();
        let (_, cov) = estimate_mean_cov(&c.ood.vectors()).unwrap();
        let total = spec.phi_b.add(&spec.phi_w);
        let rel = cov.sub(&total).frobenius_norm() / total.frobenius_norm();
        assert!(rel < 0.1, "{rel}");
    }

    #[test]
    fn inverse_shift_recovers_statistics() {
        let (m, b) = random_shift(4, 2.0, 1.0, 17).unwrap();
        let mut spec = SynthSpec::with_random_covariances(4, 9).with_shift(m.clone(), b.clone());
        spec.n_ind_speakers = 2000;
        spec.ind_utts_per_speaker = 10;
        let c = synth_corpus(&spec).unwrap();
        let inv = m.try_inverse().unwrap();
        let back: Vec<Vec<f64>> = c
            .ind_bonafide
            .iter()
            .map(|r| (&inv * (DVector::from_column_slice(&r.vector) - &b)).as_slice().to_vec())
            .collect();
        let (mean, cov) = estimate_mean_cov(&back).unwrap();
        let total = spec.phi_b.add(&spec.phi_w);
        assert!(cov.sub(&total).frobenius_norm() / total.frobenius_norm() < 0.1);
        assert!(mean.norm() < 0.2);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = small_spec(1);
        spec.spoof_pull = 1.5;
        assert!(synth_corpus(&spec).unwrap_err().is_config());
        let mut spec = small_spec(1);
        spec.n_eval_speakers = 1;
        assert!(synth_corpus(&spec).unwrap_err().is_config());
        let mut spec = small_spec(1);
        spec.phi_w = SymMatrix::zeros(4);
        assert!(synth_corpus(&spec).unwrap_err().is_config());
    }
}
