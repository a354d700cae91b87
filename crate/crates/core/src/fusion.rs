//! Gaussian back-end fusion of countermeasure and ASV scores. Each trial is
//! the 2-vector `[s_cm, s_asv]`; higher values of both mean more target-like.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ScoreFile;
use crate::linalg::{GaussianDensity, SymMatrix, DEFAULT_EPS_REG};
use crate::protocol::{TrialKey, TrialList};

pub const DEFAULT_MIX_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionSample {
    pub s_cm: f64,
    pub s_asv: f64,
    pub key: TrialKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGaussian {
    pub mean: [f64; 2],
    /// Maximum-likelihood covariance, row-major.
    pub cov: [[f64; 2]; 2],
}

impl ClassGaussian {
    pub fn new(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Self {
        Self { mean, cov }
    }

    fn fit(points: &[[f64; 2]]) -> Self {
        let n = points.len() as f64;
        let mut mean = [0.0; 2];
        for p in points {
            mean[0] += p[0];
            mean[1] += p[1];
        }
        mean[0] /= n;
        mean[1] /= n;
        let mut cov = [[0.0; 2]; 2];
        for p in points {
            let d = [p[0] - mean[0], p[1] - mean[1]];
            for (i, row) in cov.iter_mut().enumerate() {
                for (j, c) in row.iter_mut().enumerate() {
                    *c += d[i] * d[j];
                }
            }
        }
        for row in &mut cov {
            for c in row {
                *c /= n;
            }
        }
        cov[0][1] = 0.5 * (cov[0][1] + cov[1][0]);
        cov[1][0] = cov[0][1];
        Self { mean, cov }
    }

    fn density(&self, eps_reg: f64, label: &str) -> Result<GaussianDensity> {
        let cov = SymMatrix::from_rows(2, self.cov.as_flattened())?
            .regularized(eps_reg);
        GaussianDensity::new(DVector::from_column_slice(&self.mean), &cov).map_err(|e| match e {
            Error::Singular { eigenvalue, context } => {
                Error::singular(eigenvalue, format!("{label} class covariance: {context}"))
            }
            other => other,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBackend {
    pub target: ClassGaussian,
    pub nontarget: ClassGaussian,
    pub spoof: ClassGaussian,
    /// Prior weight of the non-target component within the negative class.
    pub mix_alpha: f64,
    /// Diagonal loading (relative to trace/2) applied to each covariance when scoring.
    pub eps_reg: f64,
}

impl GaussianBackend {
    pub fn new(
        target: ClassGaussian,
        nontarget: ClassGaussian,
        spoof: ClassGaussian,
        mix_alpha: f64,
    ) -> Result<Self> {
        let b = Self {
            target,
            nontarget,
            spoof,
            mix_alpha,
            eps_reg: DEFAULT_EPS_REG,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn with_eps_reg(mut self, eps_reg: f64) -> Result<Self> {
        self.eps_reg = eps_reg;
        self.validate()?;
        Ok(self)
    }

    pub fn with_mix_alpha(mut self, mix_alpha: f64) -> Result<Self> {
        self.mix_alpha = mix_alpha;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mix_alpha > 0.0 && self.mix_alpha < 1.0) {
            return Err(Error::Config(format!(
                "mix_alpha must lie in (0, 1), got {}",
                self.mix_alpha
            )));
        }
        if !(self.eps_reg >= 0.0 && self.eps_reg.is_finite()) {
            return Err(Error::Config(format!("eps_reg must be >= 0, got {}", self.eps_reg)));
        }
        let finite = [&self.target, &self.nontarget, &self.spoof]
            .iter()
            .all(|c| c.mean.iter().chain(c.cov.iter().flatten()).all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Numeric("backend parameters must be finite".into()));
        }
        Ok(())
    }

    /// Precomputes the three class densities for repeated scoring.
    pub fn scorer(&self) -> Result<FusionScorer> {
        self.validate()?;
        Ok(FusionScorer {
            target: self.target.density(self.eps_reg, "target")?,
            nontarget: self.nontarget.density(self.eps_reg, "nontarget")?,
            spoof: self.spoof.density(self.eps_reg, "spoof")?,
            log_alpha: self.mix_alpha.ln(),
            log_one_minus_alpha: (-self.mix_alpha).ln_1p(),
        })
    }
}

/// Immutable, thread-safe scoring form of a [`GaussianBackend`].
#[derive(Debug, Clone)]
pub struct FusionScorer {
    target: GaussianDensity,
    nontarget: GaussianDensity,
    spoof: GaussianDensity,
    log_alpha: f64,
    log_one_minus_alpha: f64,
}

impl FusionScorer {
    pub fn score(&self, s: [f64; 2]) -> Result<f64> {
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("fusion input {s:?} is not finite")));
        }
        let x = DVector::from_column_slice(&s);
        let lt = self.target.logpdf(&x)?;
        let a = self.log_alpha + self.nontarget.logpdf(&x)?;
        let b = self.log_one_minus_alpha + self.spoof.logpdf(&x)?;
        let hi = a.max(b);
        let lse = hi + ((a - hi).exp() + (b - hi).exp()).ln();
        Ok(lt - lse)
    }
}

/// Per-class ML fit; `mix_alpha` is stored as given.
pub fn fit_gaussian_backend(samples: &[FusionSample], mix_alpha: f64) -> Result<GaussianBackend> {
    let mut by_class: [Vec<[f64; 2]>; 3] = Default::default();
    for s in samples {
        if !(s.s_cm.is_finite() && s.s_asv.is_finite()) {
            return Err(Error::Numeric("non-finite fusion training score".into()));
        }
        let slot = match s.key {
            TrialKey::Target => 0,
            TrialKey::Nontarget => 1,
            TrialKey::Spoof => 2,
        };
        by_class[slot].push([s.s_cm, s.s_asv]);
    }
    for (points, name) in by_class.iter().zip(["target", "nontarget", "spoof"]) {
        if points.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "{name} class has {} fusion samples, need at least 2",
                points.len()
            )));
        }
    }
    GaussianBackend::new(
        ClassGaussian::fit(&by_class[0]),
        ClassGaussian::fit(&by_class[1]),
        ClassGaussian::fit(&by_class[2]),
        mix_alpha,
    )
}

pub fn fuse_score(backend: &GaussianBackend, s: [f64; 2]) -> Result<f64> {
    backend.scorer()?.score(s)
}

pub fn save_backend(backend: &GaussianBackend, path: &Path) -> Result<()> {
    write_backend(backend, File::create(path)?)
}

pub fn write_backend<W: Write>(backend: &GaussianBackend, mut out: W) -> Result<()> {
    let text = serde_json::to_string_pretty(backend).expect("backend is serializable");
    writeln!(out, "{text}")?;
    Ok(())
}

pub fn load_backend(path: &Path) -> Result<GaussianBackend> {
    read_backend(File::open(path)?)
}

pub fn read_backend<R: Read>(reader: R) -> Result<GaussianBackend> {
    let b: GaussianBackend =
        serde_json::from_reader(reader).map_err(|e| Error::parse("backend json", e.to_string()))?;
    b.validate()?;
    Ok(b)
}

/// Countermeasure scores keyed by test utterance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CmScores {
    entries: Vec<(String, f64)>,
    index: HashMap<String, usize>,
}

impl CmScores {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, test_utt: &str, score: f64) -> Result<()> {
        if !score.is_finite() {
            return Err(Error::Numeric(format!("CM score for {test_utt} is not finite")));
        }
        if self.index.contains_key(test_utt) {
            return Err(Error::Config(format!("duplicate CM score for {test_utt}")));
        }
        self.index.insert(test_utt.to_string(), self.entries.len());
        self.entries.push((test_utt.to_string(), score));
        Ok(())
    }

    pub fn get(&self, test_utt: &str) -> Option<f64> {
        self.index.get(test_utt).map(|&i| self.entries[i].1)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_cm_scores(path: &Path) -> Result<CmScores> {
    read_cm_scores(BufReader::new(File::open(path)?))
}

pub fn read_cm_scores<R: BufRead>(reader: R) -> Result<CmScores> {
    let mut cm = CmScores::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let loc = format!("line {}", i + 1);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::parse(loc, format!("expected 2 columns, found {}", fields.len())));
        }
        let score: f64 = fields[1]
            .parse()
            .map_err(|_| Error::parse(loc.clone(), format!("bad score '{}'", fields[1])))?;
        cm.push(fields[0], score).map_err(|e| Error::parse(loc, e.to_string()))?;
    }
    Ok(cm)
}

pub fn write_cm_scores<W: Write>(cm: &CmScores, mut out: W) -> Result<()> {
    for (utt, s) in &cm.entries {
        writeln!(out, "{utt}\t{s:?}")?;
    }
    Ok(())
}

fn join_error(missing: Vec<String>, count: usize) -> Error {
    Error::Join { count, missing }
}

/// Joins ASV scores, CM scores and trial keys into fusion training samples.
pub fn fusion_samples(asv: &ScoreFile, cm: &CmScores, trials: &TrialList) -> Result<Vec<FusionSample>> {
    let mut out = Vec::with_capacity(trials.len());
    let mut missing = Vec::new();
    let mut count = 0;
    for t in trials.trials() {
        match (asv.get(&t.model_id, &t.test_utt), cm.get(&t.test_utt)) {
            (Some(s_asv), Some(s_cm)) => out.push(FusionSample { s_cm, s_asv, key: t.key }),
            _ => {
                count += 1;
                if missing.len() < 10 {
                    missing.push(format!("({} {})", t.model_id, t.test_utt));
                }
            }
        }
    }
    if count > 0 {
        return Err(join_error(missing, count));
    }
    Ok(out)
}

/// Fused scores in the order of `asv`.
pub fn fuse_scores(backend: &GaussianBackend, asv: &ScoreFile, cm: &CmScores) -> Result<ScoreFile> {
    let scorer = backend.scorer()?;
    let mut missing = Vec::new();
    let mut count = 0;
    for e in asv.entries() {
        if cm.get(&e.test_utt).is_none() {
            count += 1;
            if missing.len() < 10 {
                missing.push(e.test_utt.clone());
            }
        }
    }
    if count > 0 {
        return Err(join_error(missing, count));
    }
    let mut out = ScoreFile::new();
    for e in asv.entries() {
        let s_cm = cm.get(&e.test_utt).expect("checked above");
        out.push(&e.model_id, &e.test_utt, scorer.score([s_cm, e.score])?)?;
    }
    Ok(out)
}

/// Two-class density ratio, used as the limit of the fusion LLR as
/// `mix_alpha -> 1`.
pub fn two_class_llr(target: &ClassGaussian, negative: &ClassGaussian, eps_reg: f64, s: [f64; 2]) -> Result<f64> {
    let x = DVector::from_column_slice(&s);
    Ok(target.density(eps_reg, "target")?.logpdf(&x)? - negative.density(eps_reg, "negative")?.logpdf(&x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn iso(mean: [f64; 2]) -> ClassGaussian {
        ClassGaussian::new(mean, [[1.0, 0.0], [0.0, 1.0]])
    }

    fn sample(key: TrialKey, s_cm: f64, s_asv: f64) -> FusionSample {
        FusionSample { s_cm, s_asv, key }
    }

    #[test]
    fn fit_two_points() {
        let samples = [
            sample(TrialKey::Target, 0.0, 0.0),
            sample(TrialKey::Target, 2.0, 2.0),
            sample(TrialKey::Nontarget, 0.0, 1.0),
            sample(TrialKey::Nontarget, 1.0, 0.0),
            sample(TrialKey::Spoof, 0.0, 1.0),
            sample(TrialKey::Spoof, 1.0, 3.0),
        ];
        let b = fit_gaussian_backend(&samples, 0.5).unwrap();
        assert_eq!(b.target.mean, [1.0, 1.0]);
        assert_eq!(b.target.cov, [[1.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn missing_class_is_insufficient_data() {
        let samples = [sample(TrialKey::Target, 0.0, 0.0), sample(TrialKey::Target, 1.0, 0.0)];
        match fit_gaussian_backend(&samples, 0.5) {
            Err(Error::InsufficientData(msg)) => assert!(msg.contains("nontarget")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identical_classes_zero_llr() {
        let g = ClassGaussian::new([0.3, -1.0], [[2.0, 0.5], [0.5, 1.0]]);
        let b = GaussianBackend::new(g.clone(), g.clone(), g, 0.3).unwrap();
        for s in [[0.0, 0.0], [5.0, -3.0], [-100.0, 40.0]] {
            assert!(fuse_score(&b, s).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_construction() {
        let b = GaussianBackend::new(iso([1.0, 1.0]), iso([-1.0, -1.0]), iso([1.0, -1.0]), 0.5).unwrap();
        assert!(fuse_score(&b, [0.0, 0.0]).unwrap().abs() < 1e-10);
    }

    #[test]
    fn no_overflow_far_out() {
        let b = GaussianBackend::new(iso([1.0, 1.0]), iso([-1.0, -1.0]), iso([1.0, -1.0]), 0.5).unwrap();
        for s in [[1e6, 1e6], [-1e6, 1e6], [1e6, -1e6], [-1e6, -1e6]] {
            assert!(fuse_score(&b, s).unwrap().is_finite());
        }
    }

    #[test]
    fn rejects_bad_alpha() {
        let g = iso([0.0, 0.0]);
        assert!(GaussianBackend::new(g.clone(), g.clone(), g.clone(), 1.0).is_err());
        assert!(GaussianBackend::new(g.clone(), g.clone(), g, 0.0).is_err());
    }

    #[test]
    fn singular_covariance() {
        let g = iso([0.0, 0.0]);
        let flat = ClassGaussian::new([0.0, 0.0], [[0.0, 0.0], [0.0, 0.0]]);
        let b = GaussianBackend::new(g.clone(), flat, g, 0.5).unwrap();
        match fuse_score(&b, [0.0, 0.0]) {
            Err(e) => assert!(e.is_numeric(), "{e:?}"),
            Ok(v) => panic!("expected singular error, got {v}"),
        }
    }

    #[test]
    fn recovers_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = Normal::new(0.0, 1.0).unwrap();
        let truth = [
            (TrialKey::Target, [2.0, 3.0], [1.0, 0.5]),
            (TrialKey::Nontarget, [1.5, -2.0], [0.7, 1.2]),
            (TrialKey::Spoof, [-3.0, 2.5], [1.5, 0.4]),
        ];
        let mut samples = Vec::new();
        for &(key, m, sd) in &truth {
            for _ in 0..5000 {
                let z0: f64 = n.sample(&mut rng);
                let z1: f64 = n.sample(&mut rng);
                // correlation 0.5 between the two coordinates
                let a = z0;
                let b = 0.5 * z0 + (0.75f64).sqrt() * z1;
                samples.push(sample(key, m[0] + sd[0] * a, m[1] + sd[1] * b));
            }
        }
        let fitted = fit_gaussian_backend(&samples, 0.5).unwrap();
        for (c, &(_, m, sd)) in [&fitted.target, &fitted.nontarget, &fitted.spoof].iter().zip(&truth) {
            let cov = [[sd[0] * sd[0], 0.5 * sd[0] * sd[1]], [0.5 * sd[0] * sd[1], sd[1] * sd[1]]];
            for i in 0..2 {
                assert!((c.mean[i] - m[i]).abs() < 0.1);
                for j in 0..2 {
                    assert!((c.cov[i][j] - cov[i][j]).abs() < 0.1);
                }
            }
        }
    }

    #[test]
    fn backend_json_round_trip() {
        let g = ClassGaussian::new([0.1, 0.2], [[1.0 / 3.0, 0.1], [0.1, 2.0]]);
        let b = GaussianBackend::new(g.clone(), iso([0.0, 0.0]), g, 0.25).unwrap();
        let mut buf = Vec::new();
        write_backend(&b, &mut buf).unwrap();
        assert_eq!(read_backend(buf.as_slice()).unwrap(), b);
    }

    #[test]
    fn cm_join() {
        let mut asv = ScoreFile::new();
        asv.push("m1", "u1", 1.0).unwrap();
        asv.push("m2", "u1", 2.0).unwrap();
        asv.push("m2", "u2", 0.0).unwrap();
        let cm = read_cm_scores("u1 0.5\n".as_bytes()).unwrap();
        let b = GaussianBackend::new(iso([1.0, 1.0]), iso([-1.0, -1.0]), iso([1.0, -1.0]), 0.5).unwrap();
        match fuse_scores(&b, &asv, &cm) {
            Err(Error::Join { count, .. }) => assert_eq!(count, 1),
            other => panic!("{other:?}"),
        }
        let cm = read_cm_scores("u1 0.5\nu2 -1\n".as_bytes()).unwrap();
        let fused = fuse_scores(&b, &asv, &cm).unwrap();
        assert_eq!(fused.len(), 3);
        assert_eq!(fused.entries()[1].model_id, "m2");
        let mut buf = Vec::new();
        write_cm_scores(&cm, &mut buf).unwrap();
        assert_eq!(read_cm_scores(buf.as_slice()).unwrap(), cm);
    }
}
