//! Two-covariance PLDA: preprocessing chain, EM training, enrollment and
//! log-likelihood-ratio scoring, plus the `PLDA1` model file format.
//!
//! Speaker identities are modelled as `y ~ N(mu, phi_b)` and utterances as
//! `x = y + e` with `e ~ N(0, phi_w)`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::binio::LeReader;
use crate::error::{Error, Result};
use crate::linalg::{simul_diag, GaussianDensity, SymMatrix, DEFAULT_EPS_REG};
use crate::eval::ScoreFile;
use crate::protocol::{EmbeddingSet, EnrollMap, Trial, TrialList};

const MODEL_MAGIC: &[u8; 5] = b"PLDA1";
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Default LDA output dimension.
pub const DEFAULT_LDA_DIM: usize = 150;
/// Default number of EM iterations.
pub const DEFAULT_EM_ITERS: usize = 10;

/// Centering, unit-length normalization and LDA projection, applied in that
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessChain {
    global_mean: DVector<f64>,
    /// `output_dim x input_dim`.
    lda: DMatrix<f64>,
    length_norm: bool,
}

impl PreprocessChain {
    pub fn new(global_mean: DVector<f64>, lda: DMatrix<f64>, length_norm: bool) -> Result<Self> {
        if lda.ncols() != global_mean.len() || lda.nrows() == 0 || lda.nrows() > lda.ncols() {
            return Err(Error::Shape(format!(
                "LDA matrix is {}x{} but mean has dimension {}",
                lda.nrows(),
                lda.ncols(),
                global_mean.len()
            )));
        }
        if global_mean.iter().chain(lda.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("preprocessing chain has non-finite entries".into()));
        }
        Ok(Self {
            global_mean,
            lda,
            length_norm,
        })
    }

    /// Pass-through chain: zero mean, identity projection, no normalization.
    pub fn identity(dim: usize) -> Self {
        Self {
            global_mean: DVector::zeros(dim),
            lda: DMatrix::identity(dim, dim),
            length_norm: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.lda.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.lda.nrows()
    }

    pub fn global_mean(&self) -> &DVector<f64> {
        &self.global_mean
    }

    pub fn lda(&self) -> &DMatrix<f64> {
        &self.lda
    }

    pub fn length_norm(&self) -> bool {
        self.length_norm
    }

    fn normalize(&self, x: &[f64], utt_id: &str) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "utterance '{utt_id}' has dimension {}, chain expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut centered = DVector::from_column_slice(x) - &self.global_mean;
        if self.length_norm {
            let norm = centered.norm();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::DegenerateVector {
                    utt_id: utt_id.to_string(),
                });
            }
            centered /= norm;
        }
        Ok(centered)
    }

    pub fn apply_vector(&self, x: &[f64], utt_id: &str) -> Result<DVector<f64>> {
        Ok(&self.lda * self.normalize(x, utt_id)?)
    }
}

/// Fits the preprocessing chain with the default ridge and length
/// normalization enabled.
pub fn fit_preprocess(embeddings: &EmbeddingSet, target_dim: usize) -> Result<PreprocessChain> {
    fit_preprocess_with(embeddings, target_dim, DEFAULT_EPS_REG, true)
}

/// LDA solves `S_b v = lambda S_w v` on centered (and optionally
/// length-normalized) data and keeps the `target_dim` leading directions.
/// Each projection row is a unit-norm eigenvector whose largest component is
/// positive.
pub fn fit_preprocess_with(
    embeddings: &EmbeddingSet,
    target_dim: usize,
    eps_reg: f64,
    length_norm: bool,
) -> Result<PreprocessChain> {
    let groups = embeddings.by_speaker()?;
    if groups.len() < target_dim + 1 {
        return Err(Error::InsufficientClasses {
            needed: target_dim + 1,
            found: groups.len(),
        });
    }
    let d = embeddings.dim();
    if target_dim == 0 || target_dim > d {
        return Err(Error::Shape(format!(
            "LDA dimension {target_dim} must be in 1..={d}"
        )));
    }
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::InsufficientData("LDA needs at least 2 utterances".into()));
    }

    let mut global_mean = DVector::zeros(d);
    for r in embeddings.iter() {
        global_mean += DVector::from_column_slice(&r.vector);
    }
    global_mean /= n as f64;

    let staging = PreprocessChain {
        global_mean: global_mean.clone(),
        lda: DMatrix::identity(d, d),
        length_norm,
    };
    let normalized: Vec<DVector<f64>> = embeddings
        .iter()
        .map(|r| staging.normalize(&r.vector, &r.utt_id))
        .collect::<Result<_>>()?;

    let overall = normalized.iter().fold(DVector::zeros(d), |acc, z| acc + z) / n as f64;
    let mut s_w = DMatrix::zeros(d, d);
    let mut s_b = DMatrix::zeros(d, d);
    for members in groups.values() {
        let mean = members
            .iter()
            .fold(DVector::zeros(d), |acc, &i| acc + &normalized[i])
            / members.len() as f64;
        for &i in members {
            let dev = &normalized[i] - &mean;
            s_w.ger(1.0, &dev, &dev, 1.0);
        }
        let dev = &mean - &overall;
        s_b.ger(members.len() as f64, &dev, &dev, 1.0);
    }
    let s_w = SymMatrix::symmetrize(s_w / n as f64).regularized(eps_reg);
    let s_b = SymMatrix::symmetrize(s_b / n as f64);

    let sd = simul_diag(&s_w, &s_b)?;
    let mut lda = DMatrix::zeros(target_dim, d);
    for k in 0..target_dim {
        let col = sd.b.column(k);
        let norm = col.norm();
        let mut pivot = 0;
        for i in 1..d {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let scale = if col[pivot] < 0.0 { -1.0 / norm } else { 1.0 / norm };
        for i in 0..d {
            lda[(k, i)] = col[i] * scale;
        }
    }
    PreprocessChain::new(global_mean, lda, length_norm)
}

/// Applies `chain` to every vector; labels are carried through.
pub fn apply_preprocess(chain: &PreprocessChain, embeddings: &EmbeddingSet) -> Result<EmbeddingSet> {
    if embeddings.dim() != chain.input_dim() {
        return Err(Error::Shape(format!(
            "embeddings have dimension {}, chain expects {}",
            embeddings.dim(),
            chain.input_dim()
        )));
    }
    embeddings.try_map_vectors(chain.output_dim(), |r| {
        Ok(chain.apply_vector(&r.vector, &r.utt_id)?.as_slice().to_vec())
    })
}

/// Congruence that diagonalizes both covariances:
/// `transform * phi_w * transform^T = I`, `transform * phi_b * transform^T = diag(psi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagCache {
    pub transform: DMatrix<f64>,
    pub psi: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    mu: DVector<f64>,
    phi_b: SymMatrix,
    phi_w: SymMatrix,
    chain: PreprocessChain,
    diag_cache: Option<DiagCache>,
}

impl PldaModel {
    /// Builds a model and its diagonalizing cache. `phi_w` must be SPD.
    pub fn new(
        mu: DVector<f64>,
        phi_b: SymMatrix,
        phi_w: SymMatrix,
        chain: PreprocessChain,
    ) -> Result<Self> {
        let r = mu.len();
        if r == 0 || phi_b.dim() != r || phi_w.dim() != r || chain.output_dim() != r {
            return Err(Error::Shape(format!(
                "model dimension mismatch: mu {r}, phi_b {}, phi_w {}, chain output {}",
                phi_b.dim(),
                phi_w.dim(),
                chain.output_dim()
            )));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("model mean is not finite".into()));
        }
        let mut model = Self {
            mu,
            phi_b,
            phi_w,
            chain,
            diag_cache: None,
        };
        model.recanonicalize()?;
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn phi_b(&self) -> &SymMatrix {
        &self.phi_b
    }

    pub fn phi_w(&self) -> &SymMatrix {
        &self.phi_w
    }

    pub fn total_cov(&self) -> SymMatrix {
        self.phi_b.add(&self.phi_w)
    }

    pub fn chain(&self) -> &PreprocessChain {
        &self.chain
    }

    pub fn diag_cache(&self) -> Option<&DiagCache> {
        self.diag_cache.as_ref()
    }

    /// Recomputes the diagonalizing cache from the current covariances.
    pub fn recanonicalize(&mut self) -> Result<()> {
        let sd = simul_diag(&self.phi_w, &self.phi_b)?;
        self.diag_cache = Some(DiagCache {
            transform: sd.b.transpose(),
            psi: sd.lambda,
        });
        Ok(())
    }

    pub fn with_chain(self, chain: PreprocessChain) -> Result<Self> {
        if chain.output_dim() != self.dim() {
            return Err(Error::Shape(format!(
                "chain output {} does not match model dimension {}",
                chain.output_dim(),
                self.dim()
            )));
        }
        Ok(Self { chain, ..self })
    }

    /// Same chain and mean, new covariances; the cache is rebuilt.
    pub fn with_covariances(&self, phi_b: SymMatrix, phi_w: SymMatrix) -> Result<Self> {
        Self::new(self.mu.clone(), phi_b, phi_w, self.chain.clone())
    }

    pub fn with_mean(&self, mu: DVector<f64>) -> Result<Self> {
        Self::new(mu, self.phi_b.clone(), self.phi_w.clone(), self.chain.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub iters: usize,
    pub eps_reg: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            iters: DEFAULT_EM_ITERS,
            eps_reg: DEFAULT_EPS_REG,
        }
    }
}

/// Trained model plus the observed-data log-likelihood before the first
/// iteration and after each one (`iters + 1` values).
#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: PldaModel,
    pub log_likelihood: Vec<f64>,
}

/// Per-speaker sufficient statistics, centered at the global mean.
struct SpeakerStats {
    dim: usize,
    n_total: usize,
    mu: DVector<f64>,
    /// (utterance count, centered speaker mean)
    speakers: Vec<(usize, DVector<f64>)>,
    /// Pooled within-speaker scatter (not normalized).
    within: DMatrix<f64>,
}

impl SpeakerStats {
    fn collect(set: &EmbeddingSet) -> Result<Self> {
        let groups = set.by_speaker()?;
        if groups.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "PLDA training needs at least 2 speakers, found {}",
                groups.len()
            )));
        }
        if groups.values().all(|m| m.len() < 2) {
            return Err(Error::InsufficientData(
                "every speaker has a single utterance; within-class scatter is degenerate".into(),
            ));
        }
        let d = set.dim();
        let n_total = set.len();
        let mut mu = DVector::zeros(d);
        for r in set.iter() {
            mu += DVector::from_column_slice(&r.vector);
        }
        mu /= n_total as f64;

        let mut speakers = Vec::with_capacity(groups.len());
        let mut within = DMatrix::zeros(d, d);
        for members in groups.values() {
            let mut mean = DVector::zeros(d);
            for &i in members {
                mean += DVector::from_column_slice(&set.records()[i].vector);
            }
            mean /= members.len() as f64;
            for &i in members {
                let dev = DVector::from_column_slice(&set.records()[i].vector) - &mean;
                within.ger(1.0, &dev, &dev, 1.0);
            }
            speakers.push((members.len(), mean - &mu));
        }
        Ok(Self {
            dim: d,
            n_total,
            mu,
            speakers,
            within: SymMatrix::symmetrize(within).into_matrix(),
        })
    }

    fn distinct_counts(&self) -> Vec<usize> {
        let mut counts: Vec<usize> = self.speakers.iter().map(|s| s.0).collect();
        counts.sort_unstable();
        counts.dedup();
        counts
    }

    fn moment_init(&self, eps_reg: f64) -> (SymMatrix, SymMatrix) {
        let d = self.dim;
        let mut between = DMatrix::zeros(d, d);
        for (_, m) in &self.speakers {
            between.ger(1.0, m, m, 1.0);
        }
        let phi_b = SymMatrix::symmetrize(between / self.speakers.len() as f64).regularized(eps_reg);
        let phi_w = SymMatrix::symmetrize(&self.within / self.n_total as f64).regularized(eps_reg);
        (phi_b, phi_w)
    }
}

fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::singular(f64::NAN, what.to_string()))
}

fn log_det(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Observed-data log-likelihood of the two-covariance model.
fn log_likelihood(stats: &SpeakerStats, phi_b: &SymMatrix, phi_w: &SymMatrix) -> Result<f64> {
    let d = stats.dim as f64;
    let w_chol = cholesky(phi_w.matrix(), "within-class covariance")?;
    let w_logdet = log_det(&w_chol);
    let within_term = w_chol.solve(&stats.within).trace();

    let mut ll = -0.5 * stats.n_total as f64 * d * LN_2PI - 0.5 * within_term;
    let mut by_count: BTreeMap<usize, (f64, Cholesky<f64, Dyn>)> = BTreeMap::new();
    for n in stats.distinct_counts() {
        let m = phi_w.matrix() + phi_b.matrix() * n as f64;
        let ch = cholesky(&m, "speaker-mean covariance")?;
        by_count.insert(n, (log_det(&ch), ch));
    }
    for (n, mean) in &stats.speakers {
        let (ld, ch) = &by_count[n];
        let nf = *n as f64;
        let quad = mean.dot(&ch.solve(mean));
        ll += -0.5 * ((nf - 1.0) * w_logdet + ld) - 0.5 * nf * quad;
    }
    Ok(ll)
}

fn em_step(stats: &SpeakerStats, phi_b: &SymMatrix, phi_w: &SymMatrix) -> Result<(SymMatrix, SymMatrix)> {
    let d = stats.dim;
    // Posterior of y - mu given n utterances with mean m:
    //   mean = phi_b (phi_b + phi_w/n)^-1 m
    //   cov  = phi_b - phi_b (phi_b + phi_w/n)^-1 phi_b
    let mut gains: BTreeMap<usize, (DMatrix<f64>, DMatrix<f64>)> = BTreeMap::new();
    for n in stats.distinct_counts() {
        let m = phi_b.matrix() + phi_w.matrix() / n as f64;
        let ch = cholesky(&m, "posterior covariance")?;
        let gain = ch.solve(phi_b.matrix()).transpose();
        let cov = phi_b.matrix() - &gain * phi_b.matrix();
        gains.insert(n, (gain, cov));
    }

    let mut acc_b = DMatrix::zeros(d, d);
    let mut acc_w = stats.within.clone();
    for (n, mean) in &stats.speakers {
        let (gain, cov) = &gains[n];
        let post = gain * mean;
        acc_b += cov;
        acc_b.ger(1.0, &post, &post, 1.0);
        let resid = mean - &post;
        let nf = *n as f64;
        acc_w += cov * nf;
        acc_w.ger(nf, &resid, &resid, 1.0);
    }
    let phi_b = SymMatrix::symmetrize(acc_b / stats.speakers.len() as f64);
    let phi_w = SymMatrix::symmetrize(acc_w / stats.n_total as f64);
    Ok((phi_b, phi_w))
}

/// Trains on already-preprocessed, speaker-labelled embeddings. The returned
/// model carries an identity chain; attach the real one with
/// [`PldaModel::with_chain`].
pub fn fit_plda_em(embeddings: &EmbeddingSet, iters: usize) -> Result<PldaModel> {
    let opts = EmOptions {
        iters,
        ..EmOptions::default()
    };
    Ok(fit_plda_em_traced(embeddings, &opts)?.model)
}

pub fn fit_plda_em_traced(embeddings: &EmbeddingSet, opts: &EmOptions) -> Result<EmFit> {
    let stats = SpeakerStats::collect(embeddings)?;
    let (mut phi_b, mut phi_w) = stats.moment_init(opts.eps_reg);
    let mut trace = Vec::with_capacity(opts.iters + 1);
    trace.push(log_likelihood(&stats, &phi_b, &phi_w)?);
    for _ in 0..opts.iters {
        let (b, w) = em_step(&stats, &phi_b, &phi_w)?;
        phi_b = b;
        phi_w = w;
        trace.push(log_likelihood(&stats, &phi_b, &phi_w)?);
    }
    let model = PldaModel::new(
        stats.mu.clone(),
        phi_b,
        phi_w,
        PreprocessChain::identity(stats.dim),
    )?;
    Ok(EmFit {
        model,
        log_likelihood: trace,
    })
}

/// Observed-data log-likelihood of `embeddings` under `model`'s covariances,
/// with the model mean replaced by the data mean.
pub fn data_log_likelihood(model: &PldaModel, embeddings: &EmbeddingSet) -> Result<f64> {
    let stats = SpeakerStats::collect(embeddings)?;
    log_likelihood(&stats, model.phi_b(), model.phi_w())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrollStat {
    pub model_id: String,
    pub mean_embedding: DVector<f64>,
    pub n_sessions: usize,
}

/// Averages preprocessed enrollment vectors.
pub fn enroll<V: AsRef<[f64]>>(model: &PldaModel, utterances: &[V], model_id: &str) -> Result<EnrollStat> {
    if utterances.is_empty() {
        return Err(Error::EmptyInput(format!(
            "model '{model_id}' has no enrollment utterances"
        )));
    }
    let r = model.dim();
    let mut mean = DVector::zeros(r);
    for u in utterances {
        let u = u.as_ref();
        if u.len() != r {
            return Err(Error::Shape(format!(
                "enrollment vector for '{model_id}' has dimension {}, model has {r}",
                u.len()
            )));
        }
        mean += DVector::from_column_slice(u);
    }
    mean /= utterances.len() as f64;
    Ok(EnrollStat {
        model_id: model_id.to_string(),
        mean_embedding: mean,
        n_sessions: utterances.len(),
    })
}

/// Stacked-Gaussian LLR: the enrollment/test pair under a shared identity
/// (`[[T, phi_b], [phi_b, T]]`) against independent identities
/// (`[[T, 0], [0, T]]`), where `T = phi_b + phi_w`.
pub fn score_trial(model: &PldaModel, enroll: &EnrollStat, test: &DVector<f64>) -> Result<f64> {
    let r = model.dim();
    if enroll.mean_embedding.len() != r || test.len() != r {
        return Err(Error::Shape(format!(
            "trial vectors have dimensions {} and {}, model has {r}",
            enroll.mean_embedding.len(),
            test.len()
        )));
    }
    let total = model.total_cov();
    let mut same = DMatrix::zeros(2 * r, 2 * r);
    let mut diff = DMatrix::zeros(2 * r, 2 * r);
    for (blk, m) in [(&mut same, true), (&mut diff, false)] {
        blk.view_mut((0, 0), (r, r)).copy_from(total.matrix());
        blk.view_mut((r, r), (r, r)).copy_from(total.matrix());
        if m {
            blk.view_mut((0, r), (r, r)).copy_from(model.phi_b().matrix());
            blk.view_mut((r, 0), (r, r)).copy_from(model.phi_b().matrix());
        }
    }
    let mean = DVector::from_iterator(2 * r, model.mu().iter().chain(model.mu().iter()).copied());
    let x = DVector::from_iterator(
        2 * r,
        enroll.mean_embedding.iter().chain(test.iter()).copied(),
    );
    let same = GaussianDensity::new(mean.clone(), &SymMatrix::symmetrize(same))?;
    let diff = GaussianDensity::new(mean, &SymMatrix::symmetrize(diff))?;
    Ok(same.logpdf(&x)? - diff.logpdf(&x)?)
}

/// Bulk scorer working in the jointly diagonalized space, where the LLR
/// separates into independent per-dimension 2x2 terms. Agrees with
/// [`score_trial`] to rounding.
#[derive(Debug, Clone)]
pub struct Scorer {
    mu: DVector<f64>,
    transform: DMatrix<f64>,
    /// Per dimension: (0.5 ln((1+psi)^2/(1+2psi)), 1+psi, psi, 1+2psi)
    terms: Vec<(f64, f64, f64, f64)>,
}

impl Scorer {
    pub fn new(model: &PldaModel) -> Result<Self> {
        let cache = match model.diag_cache() {
            Some(c) => c.clone(),
            None => {
                let mut m = model.clone();
                m.recanonicalize()?;
                m.diag_cache.expect("cache was just computed")
            }
        };
        let mut terms = Vec::with_capacity(cache.psi.len());
        for &psi in cache.psi.iter() {
            let one_psi = 1.0 + psi;
            let one_2psi = 1.0 + 2.0 * psi;
            if one_2psi <= 0.0 {
                return Err(Error::singular(psi, "between-class covariance is not PSD"));
            }
            let c = one_psi.ln() - 0.5 * one_2psi.ln();
            terms.push((c, one_psi, psi, one_2psi));
        }
        Ok(Self {
            mu: model.mu().clone(),
            transform: cache.transform,
            terms,
        })
    }

    pub fn project(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.mu.len() {
            return Err(Error::Shape(format!(
                "vector has dimension {}, model has {}",
                v.len(),
                self.mu.len()
            )));
        }
        Ok(&self.transform * (v - &self.mu))
    }

    /// LLR between two vectors already passed through [`Scorer::project`].
    pub fn score_projected(&self, e: &DVector<f64>, t: &DVector<f64>) -> f64 {
        let mut llr = 0.0;
        for (k, &(c, one_psi, psi, one_2psi)) in self.terms.iter().enumerate() {
            let (a, b) = (e[k], t[k]);
            let sq = a * a + b * b;
            llr += c - 0.5 * (one_psi * sq - 2.0 * psi * a * b) / one_2psi + 0.5 * sq / one_psi;
        }
        llr
    }

    pub fn score(&self, enroll: &EnrollStat, test: &DVector<f64>) -> Result<f64> {
        Ok(self.score_projected(&self.project(&enroll.mean_embedding)?, &self.project(test)?))
    }
}

fn put_f64s<W: Write>(out: &mut W, values: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn dim_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Config(format!("dimension {n} too large to serialize")))
}

pub fn write_model<W: Write>(model: &PldaModel, mut out: W) -> Result<()> {
    let r = model.dim();
    out.write_all(MODEL_MAGIC)?;
    out.write_all(&dim_u32(r)?.to_le_bytes())?;
    put_f64s(&mut out, model.mu.iter().copied())?;
    put_f64s(&mut out, model.phi_b.to_row_major())?;
    put_f64s(&mut out, model.phi_w.to_row_major())?;
    let chain = &model.chain;
    out.write_all(&dim_u32(chain.input_dim())?.to_le_bytes())?;
    put_f64s(&mut out, chain.global_mean.iter().copied())?;
    out.write_all(&dim_u32(chain.output_dim())?.to_le_bytes())?;
    for i in 0..chain.output_dim() {
        put_f64s(&mut out, chain.lda.row(i).iter().copied())?;
    }
    out.write_all(&[u8::from(chain.length_norm)])?;
    Ok(())
}

pub fn read_model<R: Read>(reader: R) -> Result<PldaModel> {
    let mut cur = LeReader::new(reader);
    let mut magic = [0u8; 5];
    cur.fill(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::parse("header", "bad magic, expected 'PLDA1'"));
    }
    let r = cur.u32()? as usize;
    if r == 0 {
        return Err(Error::parse("header", "model dimension must be positive"));
    }
    cur.location = "model mean".into();
    let mu = DVector::from_vec(cur.f64_vec(r)?);
    cur.location = "between-class covariance".into();
    let phi_b = SymMatrix::from_exact(DMatrix::from_row_slice(r, r, &cur.f64_vec(r * r)?))
        .map_err(|e| Error::parse("between-class covariance", e.to_string()))?;
    cur.location = "within-class covariance".into();
    let phi_w = SymMatrix::from_exact(DMatrix::from_row_slice(r, r, &cur.f64_vec(r * r)?))
        .map_err(|e| Error::parse("within-class covariance", e.to_string()))?;
    cur.location = "preprocessing chain".into();
    let d = cur.u32()? as usize;
    let mean = DVector::from_vec(cur.f64_vec(d)?);
    let r2 = cur.u32()? as usize;
    if r2 != r {
        return Err(Error::parse(
            "preprocessing chain",
            format!("chain output dimension {r2} does not match model dimension {r}"),
        ));
    }
    let lda = DMatrix::from_row_slice(r, d, &cur.f64_vec(r * d)?);
    let length_norm = match cur.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::parse("preprocessing chain", format!("bad length-norm flag {b}"))),
    };
    cur.expect_eof()?;
    let chain = PreprocessChain::new(mean, lda, length_norm)
        .map_err(|e| Error::parse("preprocessing chain", e.to_string()))?;
    PldaModel::new(mu, phi_b, phi_w, chain)
}

pub fn save_model(model: &PldaModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<PldaModel> {
    read_model(BufReader::new(File::open(path)?))
}

fn record_vector<'a>(set: &'a EmbeddingSet, utt_id: &str, missing: &mut Vec<String>) -> Option<&'a [f64]> {
    let found = set.get(utt_id).map(|r| r.vector.as_slice());
    if found.is_none() {
        missing.push(utt_id.to_string());
    }
    found
}

fn join_failure(missing: Vec<String>) -> Error {
    let count = missing.len();
    Error::Join {
        count,
        missing: missing.into_iter().take(10).collect(),
    }
}

/// Enrollment statistics for every model of `map`. Raw embeddings from `set`
/// pass through the model's chain before averaging.
pub fn enroll_models(model: &PldaModel, set: &EmbeddingSet, map: &EnrollMap) -> Result<Vec<EnrollStat>> {
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(map.len());
    for (model_id, utts) in map.models() {
        let mut vecs = Vec::with_capacity(utts.len());
        for u in utts {
            if let Some(v) = record_vector(set, u, &mut missing) {
                vecs.push(model.chain().apply_vector(v, u)?);
            }
        }
        if missing.is_empty() {
            out.push(enroll(model, &vecs.iter().map(|v| v.as_slice()).collect::<Vec<_>>(), model_id)?);
        }
    }
    if !missing.is_empty() {
        return Err(join_failure(missing));
    }
    Ok(out)
}

/// Projected enrollment and test vectors, ready for scoring any trial that
/// refers to them. Safe to share across threads.
#[derive(Debug, Clone)]
pub struct TrialScorer {
    scorer: Scorer,
    models: HashMap<String, DVector<f64>>,
    tests: HashMap<String, DVector<f64>>,
}

impl TrialScorer {
    /// Validates that every trial's model and test utterance is available.
    pub fn new(model: &PldaModel, stats: &[EnrollStat], test: &EmbeddingSet, trials: &TrialList) -> Result<Self> {
        let scorer = Scorer::new(model)?;
        let mut models = HashMap::with_capacity(stats.len());
        for st in stats {
            models.insert(st.model_id.clone(), scorer.project(&st.mean_embedding)?);
        }
        let mut missing = Vec::new();
        let mut tests = HashMap::new();
        for t in trials.trials() {
            if !models.contains_key(&t.model_id) {
                missing.push(format!("model {}", t.model_id));
            }
            if tests.contains_key(&t.test_utt) {
                continue;
            }
            if let Some(v) = record_vector(test, &t.test_utt, &mut missing) {
                let x = model.chain().apply_vector(v, &t.test_utt)?;
                tests.insert(t.test_utt.clone(), scorer.project(&x)?);
            }
        }
        if !missing.is_empty() {
            missing.dedup();
            return Err(join_failure(missing));
        }
        Ok(Self { scorer, models, tests })
    }

    pub fn score(&self, trial: &Trial) -> f64 {
        self.scorer.score_projected(&self.models[&trial.model_id], &self.tests[&trial.test_utt])
    }
}

/// Scores every trial in list order.
pub fn score_trials(model: &PldaModel, stats: &[EnrollStat], test: &EmbeddingSet, trials: &TrialList) -> Result<ScoreFile> {
    let ts = TrialScorer::new(model, stats, test, trials)?;
    let mut out = ScoreFile::new();
    for t in trials.trials() {
        out.push(&t.model_id, &t.test_utt, ts.score(t))?;
    }
    Ok(out)
}

/// Text layout: a `dim <r>` header, then one `model_id n_sessions v_1 .. v_r`
/// line per model.
pub fn write_enroll_stats<W: Write>(stats: &[EnrollStat], dim: usize, mut out: W) -> Result<()> {
    writeln!(out, "dim {dim}")?;
    for st in stats {
        if st.mean_embedding.len() != dim {
            return Err(Error::Shape(format!(
                "enrollment statistic '{}' has dimension {}, expected {dim}",
                st.model_id,
                st.mean_embedding.len()
            )));
        }
        write!(out, "{}\t{}", st.model_id, st.n_sessions)?;
        for v in st.mean_embedding.iter() {
            write!(out, "\t{v:?}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_enroll_stats<R: BufRead>(reader: R) -> Result<Vec<EnrollStat>> {
    let mut lines = reader.lines().enumerate();
    let dim = match lines.next() {
        Some((_, line)) => {
            let line = line?;
            let mut f = line.split_whitespace();
            match (f.next(), f.next().map(str::parse::<usize>), f.next()) {
                (Some("dim"), Some(Ok(d)), None) if d > 0 => d,
                _ => return Err(Error::parse("line 1", "expected header 'dim <r>'")),
            }
        }
        None => return Err(Error::EmptyInput("enrollment statistics file".into())),
    };
    let mut out: Vec<EnrollStat> = Vec::new();
    for (i, line) in lines {
        let line = line?;
        let loc = format!("line {}", i + 1);
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != dim + 2 {
            return Err(Error::parse(loc, format!("expected {} columns, found {}", dim + 2, f.len())));
        }
        let n_sessions: usize = f[1]
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::parse(&loc, format!("bad session count '{}'", f[1])))?;
        let mut v = Vec::with_capacity(dim);
        for tok in &f[2..] {
            match tok.parse::<f64>() {
                Ok(x) if x.is_finite() => v.push(x),
                _ => return Err(Error::parse(&loc, format!("bad value '{tok}'"))),
            }
        }
        if out.iter().any(|s| s.model_id == f[0]) {
            return Err(Error::parse(loc, format!("duplicate model '{}'", f[0])));
        }
        out.push(EnrollStat {
            model_id: f[0].to_string(),
            mean_embedding: DVector::from_vec(v),
            n_sessions,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::EmbeddingRecord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn labelled(points: &[(&str, &[f64])]) -> EmbeddingSet {
        let dim = points[0].1.len();
        let recs = points
            .iter()
            .enumerate()
            .map(|(i, (spk, v))| EmbeddingRecord::bonafide(format!("u{i}"), Some(spk), v.to_vec()))
            .collect();
        EmbeddingSet::from_records(dim, recs).unwrap()
    }

    fn one_dim_corpus(phi_b: f64, phi_w: f64, speakers: usize, utts: usize, seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spk_dist = Normal::new(0.0, phi_b.sqrt()).unwrap();
        let utt_dist = Normal::new(0.0, phi_w.sqrt()).unwrap();
        let mut set = EmbeddingSet::new(1);
        for s in 0..speakers {
            let y: f64 = spk_dist.sample(&mut rng);
            let spk = format!("s{s}");
            for u in 0..utts {
                let x = y + utt_dist.sample(&mut rng);
                set.push(EmbeddingRecord::bonafide(format!("s{s}u{u}"), Some(&spk), vec![x]))
                    .unwrap();
            }
        }
        set
    }

    fn random_corpus(dim: usize, speakers: usize, utts: usize, seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = EmbeddingSet::new(dim);
        for s in 0..speakers {
            let y: Vec<f64> = (0..dim).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            for u in 0..utts {
                let v = y.iter().map(|c| c + rng.sample::<f64, _>(StandardNormal)).collect();
                set.push(EmbeddingRecord::bonafide(format!("s{s}u{u}"), Some(&format!("s{s}")), v))
                    .unwrap();
            }
        }
        set
    }

    #[test]
    fn lda_finds_separating_axis() {
        let set = labelled(&[
            ("a", &[-1.0, 0.1]),
            ("a", &[-1.0, -0.1]),
            ("b", &[1.0, 0.1]),
            ("b", &[1.0, -0.1]),
        ]);
        let chain = fit_preprocess(&set, 1).unwrap();
        let row = chain.lda().row(0);
        assert!(row[1].abs() < 1e-6, "{row}");
        assert!((row[0].abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn lda_needs_enough_classes() {
        let set = random_corpus(200, 20, 2, 1);
        match fit_preprocess(&set, 150) {
            Err(Error::InsufficientClasses { needed, found }) => {
                assert_eq!((needed, found), (151, 20));
            }
            other => panic!("expected insufficient classes, got {other:?}"),
        }
        let small = random_corpus(3, 10, 2, 1);
        assert!(matches!(fit_preprocess(&small, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_chain_normalizes() {
        let chain = PreprocessChain::new(DVector::zeros(2), DMatrix::identity(2, 2), true).unwrap();
        let y = chain.apply_vector(&[3.0, 4.0], "u").unwrap();
        assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] - 0.8).abs() < 1e-15);
        match chain.apply_vector(&[0.0, 0.0], "zero") {
            Err(Error::DegenerateVector { utt_id }) => assert_eq!(utt_id, "zero"),
            other => panic!("expected degenerate vector, got {other:?}"),
        }
    }

    #[test]
    fn apply_preprocess_shapes_and_labels() {
        let set = random_corpus(6, 5, 2, 4);
        let chain = fit_preprocess(&set, 3).unwrap();
        let out = apply_preprocess(&chain, &set).unwrap();
        assert_eq!(out.dim(), 3);
        assert_eq!(out.len(), 10);
        for (a, b) in set.iter().zip(out.iter()) {
            assert_eq!(a.utt_id, b.utt_id);
            assert_eq!(a.speaker, b.speaker);
        }
        assert!(apply_preprocess(&chain, &random_corpus(5, 2, 2, 0)).is_err());
    }

    #[test]
    fn em_recovers_one_dim_model() {
        let set = one_dim_corpus(2.0, 1.0, 500, 10, 7);
        let model = fit_plda_em(&set, 20).unwrap();
        let b = model.phi_b().get(0, 0);
        let w = model.phi_w().get(0, 0);
        assert!((b - 2.0).abs() < 0.2, "phi_b = {b}");
        assert!((w - 1.0).abs() < 0.1, "phi_w = {w}");
    }

    #[test]
    fn zero_iterations_is_moment_init() {
        let set = labelled(&[("a", &[0.0]), ("a", &[2.0]), ("b", &[4.0]), ("b", &[6.0]), ("b", &[8.0])]);
        let opts = EmOptions { iters: 0, eps_reg: 0.0 };
        let fit = fit_plda_em_traced(&set, &opts).unwrap();
        // mean 4; speaker means 1 and 6 -> centered -3 and 2
        assert_eq!(fit.model.mu()[0], 4.0);
        assert_eq!(fit.model.phi_b().get(0, 0), (9.0 + 4.0) / 2.0);
        assert_eq!(fit.model.phi_w().get(0, 0), (1.0 + 1.0 + 4.0 + 0.0 + 4.0) / 5.0);
        assert_eq!(fit.log_likelihood.len(), 1);
    }

    #[test]
    fn singletons_are_rejected() {
        let set = labelled(&[("a", &[0.0]), ("b", &[1.0]), ("c", &[2.0])]);
        assert!(matches!(fit_plda_em(&set, 3), Err(Error::InsufficientData(_))));
        let one = labelled(&[("a", &[0.0]), ("a", &[1.0])]);
        assert!(matches!(fit_plda_em(&one, 3), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn em_is_monotone_with_unbalanced_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut set = EmbeddingSet::new(4);
        for s in 0..30 {
            let y: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for u in 0..(1 + s % 5) {
                let v = y.iter().map(|c| c + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
                set.push(EmbeddingRecord::bonafide(format!("{s}-{u}"), Some(&s.to_string()), v)).unwrap();
            }
        }
        let fit = fit_plda_em_traced(&set, &EmOptions { iters: 25, eps_reg: 1e-6 }).unwrap();
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{:?}", fit.log_likelihood);
        }
    }

    #[test]
    fn enrollment_averages() {
        let model = fit_plda_em(&random_corpus(2, 4, 3, 1), 2).unwrap();
        let e = enroll(&model, &[vec![1.0, 0.0], vec![0.0, 1.0]], "m").unwrap();
        assert_eq!(e.mean_embedding.as_slice(), &[0.5, 0.5]);
        assert_eq!(e.n_sessions, 2);
        let single = enroll(&model, &[vec![0.25, -3.0]], "m").unwrap();
        assert_eq!(single.mean_embedding.as_slice(), &[0.25, -3.0]);
        assert!(matches!(enroll::<Vec<f64>>(&model, &[], "m"), Err(Error::EmptyInput(_))));
    }

    fn scalar_model(mu: f64, b: f64, w: f64) -> PldaModel {
        PldaModel::new(
            DVector::from_element(1, mu),
            SymMatrix::from_diagonal(&[b]),
            SymMatrix::from_diagonal(&[w]),
            PreprocessChain::identity(1),
        )
        .unwrap()
    }

    #[test]
    fn scalar_llr_value() {
        let model = scalar_model(0.0, 1.0, 1.0);
        let e = enroll(&model, &[vec![0.0]], "m").unwrap();
        let llr = score_trial(&model, &e, &DVector::zeros(1)).unwrap();
        let hand = 0.5 * (4.0f64 / 3.0).ln();
        assert!((llr - hand).abs() < 1e-12);
        assert!((llr - 0.143_841).abs() < 1e-6);
        let fast = Scorer::new(&model).unwrap().score(&e, &DVector::zeros(1)).unwrap();
        assert!((fast - hand).abs() < 1e-12);
    }

    #[test]
    fn zero_between_class_gives_zero_llr() {
        let model = scalar_model(0.3, 0.0, 2.0);
        let scorer = Scorer::new(&model).unwrap();
        for (a, b) in [(0.0, 1.0), (-3.0, 2.5), (10.0, 10.0)] {
            let e = enroll(&model, &[vec![a]], "m").unwrap();
            let t = DVector::from_element(1, b);
            assert_eq!(score_trial(&model, &e, &t).unwrap(), 0.0);
            assert_eq!(scorer.score(&e, &t).unwrap(), 0.0);
        }
    }

    #[test]
    fn model_file_round_trip() {
        let set = random_corpus(5, 6, 4, 9);
        let chain = fit_preprocess(&set, 4).unwrap();
        let pre = apply_preprocess(&chain, &set).unwrap();
        let model = fit_plda_em(&pre, 3).unwrap().with_chain(chain).unwrap();
        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();
        assert_eq!(&buf[..5], b"PLDA1");
        let back = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, model);

        let mut bad = buf.clone();
        bad[4] = b'2';
        assert!(matches!(read_model(bad.as_slice()), Err(Error::Parse { .. })));
        for cut in [2, 9, 40, buf.len() - 1] {
            assert!(matches!(read_model(&buf[..cut]), Err(Error::Parse { .. })), "cut {cut}");
        }
        let mut long = buf.clone();
        long.push(7);
        assert!(read_model(long.as_slice()).is_err());
    }

    #[test]
    fn enroll_stats_round_trip() {
        let stats = vec![
            EnrollStat { model_id: "a".into(), mean_embedding: DVector::from_vec(vec![0.1, -2.5e-7]), n_sessions: 3 },
            EnrollStat { model_id: "b".into(), mean_embedding: DVector::from_vec(vec![1.0 / 3.0, 4.0]), n_sessions: 1 },
        ];
        let mut buf = Vec::new();
        write_enroll_stats(&stats, 2, &mut buf).unwrap();
        assert_eq!(read_enroll_stats(buf.as_slice()).unwrap(), stats);
        assert!(read_enroll_stats("dim 2\na 1 0.5\n".as_bytes()).is_err());
        assert!(read_enroll_stats("a 1 0.5 0.5\n".as_bytes()).is_err());
    }
}
