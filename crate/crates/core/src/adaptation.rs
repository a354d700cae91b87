//! Unsupervised adaptation of a trained PLDA model to a new domain.
//!
//! * CORAL re-colours the out-of-domain training embeddings to the in-domain
//!   covariance and re-trains.
//! * CORAL+ moves the model covariances towards their pseudo-in-domain
//!   counterparts, either by plain interpolation or by adding only the excess
//!   variance found after simultaneous diagonalization.
//! * APLDA whitens the in-domain total covariance with the model total
//!   covariance and adds the directions where in-domain variance is larger.
//!
//! All functions return a new model; the input is never modified.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{
    coral_transform, estimate_mean_cov, simul_diag, sym_eig, SymMatrix, DEFAULT_EPS_REG,
};
use crate::plda::{fit_plda_em_traced, EmOptions, PldaModel};
use crate::protocol::EmbeddingSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptMethod {
    Coral,
    CoralPlus,
    Aplda,
}

impl FromStr for AdaptMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coral" => Ok(Self::Coral),
            "coral+" | "coral_plus" | "coralplus" => Ok(Self::CoralPlus),
            "aplda" => Ok(Self::Aplda),
            other => Err(Error::Config(format!("unknown adaptation method '{other}'"))),
        }
    }
}

impl fmt::Display for AdaptMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Coral => "coral",
            Self::CoralPlus => "coral+",
            Self::Aplda => "aplda",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoralPlusMode {
    /// Linear interpolation towards the pseudo-in-domain covariance.
    Interp,
    /// Add only the pseudo-in-domain variance exceeding the original.
    #[default]
    Uncertainty,
}

impl FromStr for CoralPlusMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "interp" => Ok(Self::Interp),
            "uncertainty" => Ok(Self::Uncertainty),
            other => Err(Error::Config(format!("unknown CORAL+ mode '{other}'"))),
        }
    }
}

impl fmt::Display for CoralPlusMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Interp => "interp",
            Self::Uncertainty => "uncertainty",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptConfig {
    pub method: AdaptMethod,
    /// CORAL+ weight on the between-class covariance, in [0, 1].
    pub beta: f64,
    /// CORAL+ weight on the within-class covariance, in [0, 1].
    pub lambda_w: f64,
    /// APLDA scale on the between-class excess, >= 0.
    pub alpha_b: f64,
    /// APLDA scale on the within-class excess, >= 0.
    pub alpha_w: f64,
    pub coral_plus_mode: CoralPlusMode,
    /// Replace the model mean by the in-domain mean.
    pub update_mean: bool,
    /// Relative ridge applied to estimated covariances before fractional powers.
    pub eps_reg: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            method: AdaptMethod::Aplda,
            beta: 0.5,
            lambda_w: 0.5,
            alpha_b: 0.0,
            alpha_w: 0.25,
            coral_plus_mode: CoralPlusMode::default(),
            update_mean: true,
            eps_reg: DEFAULT_EPS_REG,
        }
    }
}

impl AdaptConfig {
    /// Logical-access scenario scales.
    pub fn la() -> Self {
        Self {
            alpha_w: 0.25,
            alpha_b: 0.0,
            ..Self::default()
        }
    }

    /// Physical-access scenario scales.
    pub fn pa() -> Self {
        Self {
            alpha_w: 0.9,
            alpha_b: 0.0,
            ..Self::default()
        }
    }

    pub fn with_method(self, method: AdaptMethod) -> Self {
        Self { method, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must be finite and >= 0")))
            }
        };
        unit("beta", self.beta)?;
        unit("lambda_w", self.lambda_w)?;
        nonneg("alpha_b", self.alpha_b)?;
        nonneg("alpha_w", self.alpha_w)?;
        nonneg("eps_reg", self.eps_reg)?;
        Ok(())
    }
}

fn check_space(model: &PldaModel, set: &EmbeddingSet, what: &str) -> Result<()> {
    if set.dim() != model.dim() {
        return Err(Error::Shape(format!(
            "{what} has dimension {}, model has {}",
            set.dim(),
            model.dim()
        )));
    }
    Ok(())
}

fn set_mean_cov(set: &EmbeddingSet, what: &str) -> Result<(DVector<f64>, SymMatrix)> {
    estimate_mean_cov(&set.vectors()).map_err(|e| match e {
        Error::InsufficientData(m) => Error::InsufficientData(format!("{what}: {m}")),
        other => other,
    })
}

fn finish(model: &PldaModel, phi_b: SymMatrix, phi_w: SymMatrix, ind_mean: Option<DVector<f64>>) -> Result<PldaModel> {
    let adapted = model.with_covariances(phi_b, phi_w)?;
    match ind_mean {
        Some(mu) => adapted.with_mean(mu),
        None => Ok(adapted),
    }
}

/// Maps every OOD embedding through `A = C_I^(1/2) C_o^(-1/2)` about the OOD
/// mean, so the result has the in-domain covariance. Returns the transformed
/// set and `A`.
pub fn coral_align(
    ood: &EmbeddingSet,
    ind: &EmbeddingSet,
    eps_reg: f64,
) -> Result<(EmbeddingSet, DMatrix<f64>)> {
    if ood.dim() != ind.dim() {
        return Err(Error::Shape(format!(
            "OOD dimension {} vs in-domain dimension {}",
            ood.dim(),
            ind.dim()
        )));
    }
    let (ood_mean, c_out) = set_mean_cov(ood, "OOD set")?;
    let (_, c_in) = set_mean_cov(ind, "in-domain set")?;
    let a = coral_transform(&c_in.regularized(eps_reg), &c_out.regularized(eps_reg))?;
    let aligned = ood.try_map_vectors(ood.dim(), |r| {
        let x = DVector::from_column_slice(&r.vector) - &ood_mean;
        Ok((&a * x + &ood_mean).as_slice().to_vec())
    })?;
    Ok((aligned, a))
}

/// CORAL: re-train on colour-aligned OOD embeddings (OOD speaker labels are
/// used for training).
pub fn coral_adapt(
    model: &PldaModel,
    ood: &EmbeddingSet,
    ind: &EmbeddingSet,
    cfg: &AdaptConfig,
    iters: usize,
) -> Result<PldaModel> {
    cfg.validate()?;
    check_space(model, ood, "OOD set")?;
    check_space(model, ind, "in-domain set")?;
    let (aligned, _) = coral_align(ood, ind, cfg.eps_reg)?;
    let fit = fit_plda_em_traced(
        &aligned,
        &EmOptions {
            iters,
            eps_reg: cfg.eps_reg,
        },
    )?;
    let retrained = fit.model.with_chain(model.chain().clone())?;
    if cfg.update_mean {
        let (ind_mean, _) = set_mean_cov(ind, "in-domain set")?;
        retrained.with_mean(ind_mean)
    } else {
        Ok(retrained)
    }
}

/// Model-space transformation `C_o^(-1/2) C_I^(1/2)`; the pseudo-in-domain
/// version of a covariance `phi` is `A^T phi A`.
pub fn coral_plus_matrix(c_in: &SymMatrix, c_out: &SymMatrix) -> Result<DMatrix<f64>> {
    Ok(coral_transform(c_in, c_out)?.transpose())
}

/// `a^T * phi * a`.
pub fn pseudo_in_domain(phi: &SymMatrix, a: &DMatrix<f64>) -> SymMatrix {
    phi.congruence(&a.transpose())
}

/// One CORAL+ covariance update with weight `w`.
pub fn coral_plus_update(
    phi: &SymMatrix,
    pseudo: &SymMatrix,
    w: f64,
    mode: CoralPlusMode,
) -> Result<SymMatrix> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Config(format!("interpolation weight {w} must lie in [0, 1]")));
    }
    if w == 0.0 {
        return Ok(phi.clone());
    }
    match mode {
        CoralPlusMode::Interp => {
            let m = phi.matrix() * (1.0 - w) + pseudo.matrix() * w;
            Ok(SymMatrix::symmetrize(m))
        }
        CoralPlusMode::Uncertainty => {
            let sd = simul_diag(phi, pseudo)?;
            let gain = sd.lambda.map(|l| 1.0 + w * (l - 1.0).max(0.0));
            let inv_t = sd.b_inv.transpose();
            let mut scaled = inv_t.clone();
            for (k, mut col) in scaled.column_iter_mut().enumerate() {
                col *= gain[k];
            }
            Ok(SymMatrix::symmetrize(scaled * inv_t.transpose()))
        }
    }
}

/// CORAL+: `ood_cov` is the total covariance of the OOD training set in
/// model space.
pub fn coral_plus_adapt(
    model: &PldaModel,
    ood_cov: &SymMatrix,
    ind: &EmbeddingSet,
    cfg: &AdaptConfig,
) -> Result<PldaModel> {
    cfg.validate()?;
    check_space(model, ind, "in-domain set")?;
    if ood_cov.dim() != model.dim() {
        return Err(Error::Shape(format!(
            "OOD covariance has dimension {}, model has {}",
            ood_cov.dim(),
            model.dim()
        )));
    }
    let (ind_mean, c_in) = set_mean_cov(ind, "in-domain set")?;
    let a = coral_plus_matrix(&c_in.regularized(cfg.eps_reg), &ood_cov.regularized(cfg.eps_reg))?;
    let phi_b = coral_plus_update(
        model.phi_b(),
        &pseudo_in_domain(model.phi_b(), &a),
        cfg.beta,
        cfg.coral_plus_mode,
    )?;
    let phi_w = coral_plus_update(
        model.phi_w(),
        &pseudo_in_domain(model.phi_w(), &a),
        cfg.lambda_w,
        cfg.coral_plus_mode,
    )?;
    finish(model, phi_b, phi_w, cfg.update_mean.then_some(ind_mean))
}

/// APLDA update given an in-domain total covariance `s`.
///
/// With `T = phi_b + phi_w`, `T^(-1/2) s T^(-1/2) = P diag(delta) P^T`; the
/// excess `X = T^(1/2) P diag(max(delta - 1, 0)) P^T T^(1/2)` is added to
/// `phi_w` scaled by `alpha_w` and to `phi_b` scaled by `alpha_b`.
pub fn aplda_update(
    phi_b: &SymMatrix,
    phi_w: &SymMatrix,
    s: &SymMatrix,
    alpha_b: f64,
    alpha_w: f64,
) -> Result<(SymMatrix, SymMatrix)> {
    if phi_b.dim() != s.dim() || phi_w.dim() != s.dim() {
        return Err(Error::Shape("APLDA covariance dimensions differ".into()));
    }
    if alpha_b == 0.0 && alpha_w == 0.0 {
        return Ok((phi_b.clone(), phi_w.clone()));
    }
    let excess = aplda_excess(phi_b, phi_w, s)?;
    let phi_w = SymMatrix::symmetrize(phi_w.matrix() + excess.matrix() * alpha_w);
    let phi_b = SymMatrix::symmetrize(phi_b.matrix() + excess.matrix() * alpha_b);
    Ok((phi_b, phi_w))
}

/// The unscaled excess term `X` of [`aplda_update`].
pub fn aplda_excess(phi_b: &SymMatrix, phi_w: &SymMatrix, s: &SymMatrix) -> Result<SymMatrix> {
    let total = phi_b.add(phi_w);
    let eig = sym_eig(&total)?;
    let floor = eig.min_value();
    if floor <= crate::linalg::EPS_EIG {
        return Err(Error::singular(floor, "APLDA total covariance"));
    }
    let scale = |f: fn(f64) -> f64| {
        let mut v = eig.vectors.clone();
        for (k, mut col) in v.column_iter_mut().enumerate() {
            col *= f(eig.values[k]);
        }
        SymMatrix::symmetrize(v * eig.vectors.transpose())
    };
    let inv_root = scale(|x| 1.0 / x.sqrt());
    let root = scale(f64::sqrt);
    let whitened = s.congruence(inv_root.matrix());
    let inner = sym_eig(&whitened)?;
    // No clipped direction: the excess is exactly S - T. All clipped: zero.
    if inner.values.iter().all(|&d| d >= 1.0) {
        return Ok(s.sub(&total));
    }
    if inner.values.iter().all(|&d| d <= 1.0) {
        return Ok(SymMatrix::zeros(s.dim()));
    }
    let mut dirs = root.matrix() * &inner.vectors;
    let projected = dirs.clone();
    for (k, mut col) in dirs.column_iter_mut().enumerate() {
        col *= (inner.values[k] - 1.0).max(0.0);
    }
    Ok(SymMatrix::symmetrize(dirs * projected.transpose()))
}

/// APLDA with the in-domain total covariance estimated about its own mean.
pub fn aplda_adapt(model: &PldaModel, ind: &EmbeddingSet, cfg: &AdaptConfig) -> Result<PldaModel> {
    cfg.validate()?;
    check_space(model, ind, "in-domain set")?;
    let (ind_mean, s) = set_mean_cov(ind, "in-domain set")?;
    let (phi_b, phi_w) = aplda_update(model.phi_b(), model.phi_w(), &s, cfg.alpha_b, cfg.alpha_w)?;
    finish(model, phi_b, phi_w, cfg.update_mean.then_some(ind_mean))
}

/// Dispatches on `cfg.method`. `ood` (preprocessed, speaker-labelled) is
/// required by CORAL and CORAL+.
pub fn adapt(
    model: &PldaModel,
    ood: Option<&EmbeddingSet>,
    ind: &EmbeddingSet,
    cfg: &AdaptConfig,
    em_iters: usize,
) -> Result<PldaModel> {
    let need_ood = || {
        ood.ok_or_else(|| Error::Config(format!("{} adaptation needs the OOD training set", cfg.method)))
    };
    match cfg.method {
        AdaptMethod::Coral => coral_adapt(model, need_ood()?, ind, cfg, em_iters),
        AdaptMethod::CoralPlus => {
            let ood = need_ood()?;
            check_space(model, ood, "OOD set")?;
            let (_, c_out) = set_mean_cov(ood, "OOD set")?;
            coral_plus_adapt(model, &c_out, ind, cfg)
        }
        AdaptMethod::Aplda => aplda_adapt(model, ind, cfg),
    }
}
