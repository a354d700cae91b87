//! Flat `key = value` run configuration.

use std::fs;
use std::path::Path;

use asvadapt::adaptation::{AdaptConfig, AdaptMethod, CoralPlusMode};
use asvadapt::linalg::DEFAULT_EPS_REG;
use asvadapt::plda::{DEFAULT_EM_ITERS, DEFAULT_LDA_DIM};
use asvadapt::fusion::DEFAULT_MIX_ALPHA;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// 0 keeps the input dimension (centering and length normalization only).
    pub lda_dim: usize,
    pub em_iters: usize,
    pub alpha_w: f64,
    pub alpha_b: f64,
    pub beta: f64,
    pub lambda_w: f64,
    pub coral_plus_mode: CoralPlusMode,
    pub mix_alpha: f64,
    pub seed: u64,
    pub eps_reg: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let a = AdaptConfig::default();
        Self {
            lda_dim: DEFAULT_LDA_DIM,
            em_iters: DEFAULT_EM_ITERS,
            alpha_w: a.alpha_w,
            alpha_b: a.alpha_b,
            beta: a.beta,
            lambda_w: a.lambda_w,
            coral_plus_mode: a.coral_plus_mode,
            mix_alpha: DEFAULT_MIX_ALPHA,
            seed: 0,
            eps_reg: DEFAULT_EPS_REG,
        }
    }
}

fn bad(key: &str, value: &str, why: &str) -> CliError {
    CliError::Usage(format!("config key '{key}': cannot use '{value}': {why}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| bad(key, value, "not a valid number"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "lda_dim" => self.lda_dim = num(key, value)?,
            "em_iters" => self.em_iters = num(key, value)?,
            "alpha_w" => self.alpha_w = num(key, value)?,
            "alpha_b" => self.alpha_b = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "lambda_w" => self.lambda_w = num(key, value)?,
            "coral_plus_mode" => {
                self.coral_plus_mode = value.parse().map_err(|e: asvadapt::Error| bad(key, value, &e.to_string()))?
            }
            "mix_alpha" => self.mix_alpha = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "eps_reg" => self.eps_reg = num(key, value)?,
            other => return Err(CliError::Usage(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected 'key = value'", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        let a = match preset {
            Preset::La => AdaptConfig::la(),
            Preset::Pa => AdaptConfig::pa(),
        };
        self.alpha_w = a.alpha_w;
        self.alpha_b = a.alpha_b;
    }

    pub fn adapt_config(&self, method: AdaptMethod) -> AdaptConfig {
        AdaptConfig {
            method,
            beta: self.beta,
            lambda_w: self.lambda_w,
            alpha_b: self.alpha_b,
            alpha_w: self.alpha_w,
            coral_plus_mode: self.coral_plus_mode,
            update_mean: true,
            eps_reg: self.eps_reg,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.adapt_config(AdaptMethod::Aplda)
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if self.em_iters == 0 {
            return Err(CliError::Usage("em_iters must be at least 1".into()));
        }
        if !(self.mix_alpha > 0.0 && self.mix_alpha < 1.0) {
            return Err(CliError::Usage(format!("mix_alpha = {} must lie in (0, 1)", self.mix_alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    La,
    Pa,
}
