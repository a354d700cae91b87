mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use asvadapt::adaptation::{AdaptMethod, CoralPlusMode};
use asvadapt::eval::ReportFormat;
use asvadapt::protocol::{EmbeddingFormat, SampleStrategy};

use config::{Preset, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(asvadapt::Error),
    /// A library error tied to one input file.
    File(PathBuf, asvadapt::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Lib(e) => e.fmt(f),
            CliError::File(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

impl From<asvadapt::Error> for CliError {
    fn from(e: asvadapt::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(e) | CliError::File(_, e) if e.is_config() => 1,
            CliError::Lib(e) | CliError::File(_, e) if e.is_numeric() => 3,
            CliError::Lib(_) | CliError::File(..) => 2,
        }
    }

    fn is_broken_pipe(&self) -> bool {
        matches!(self, CliError::Lib(asvadapt::Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe)
    }
}

#[derive(Debug, Parser)]
#[command(name = "asvadapt", version, about = "PLDA back-end adaptation and ASV/CM score fusion")]
struct Cli {
    #[command(flatten)]
    settings: Settings,
    #[command(subcommand)]
    command: Command,
}

/// Run settings. Later sources win: defaults, config file, preset, flags.
#[derive(Debug, Args)]
struct Settings {
    /// Flat `key = value` config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Scenario scales for APLDA
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    lda_dim: Option<usize>,
    #[arg(long, global = true)]
    em_iters: Option<usize>,
    #[arg(long, global = true)]
    alpha_w: Option<f64>,
    #[arg(long, global = true)]
    alpha_b: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    lambda_w: Option<f64>,
    #[arg(long, global = true)]
    coral_plus_mode: Option<CoralPlusMode>,
    #[arg(long, global = true)]
    mix_alpha: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    eps_reg: Option<f64>,
}

impl Settings {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = RunConfig::default();
        if let Some(path) = &self.config {
            c.apply_file(path)?;
        }
        if let Some(p) = self.preset {
            c.apply_preset(p);
        }
        macro_rules! over {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        over!(lda_dim, em_iters, alpha_w, alpha_b, beta, lambda_w, coral_plus_mode, mix_alpha, seed, eps_reg);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum AdaptData {
    Bonafide,
    #[value(name = "bonafide+spoof")]
    BonafideSpoof,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Breakdown {
    Attack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Scenario {
    La,
    Pa,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit LDA preprocessing and a two-covariance PLDA model on labelled OOD embeddings
    FitBackend {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a PLDA model to in-domain data
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = parse_method)]
        method: AdaptMethod,
        #[arg(long, value_enum, default_value = "bonafide")]
        data: AdaptData,
        /// In-domain bonafide embeddings
        #[arg(long)]
        ind_bonafide: PathBuf,
        /// In-domain spoofed embeddings, used with `--data bonafide+spoof`
        #[arg(long)]
        ind_spoof: Option<PathBuf>,
        /// OOD training embeddings, needed by coral and coral+
        #[arg(long)]
        ood: Option<PathBuf>,
        /// Keep the OOD model mean
        #[arg(long)]
        keep_mean: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build enrollment statistics for every model of an enrollment map
    Enroll {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        enroll_map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trial list
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        enroll_stats: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bonafide and spoofed EERs with confidence intervals
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, value_enum)]
        breakdown: Option<Breakdown>,
        #[arg(long, value_parser = parse_format, default_value = "tsv")]
        format: ReportFormat,
        /// Write the report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the Gaussian ASV/CM fusion back-end on a development split
    FuseFit {
        /// Keyed development trial list
        #[arg(long)]
        fusion_dev: PathBuf,
        #[arg(long)]
        asv_scores: PathBuf,
        #[arg(long)]
        cm_scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a fitted fusion back-end
    FuseApply {
        #[arg(long)]
        backend: PathBuf,
        #[arg(long)]
        asv_scores: PathBuf,
        #[arg(long)]
        cm_scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw an adaptation subset from bonafide and spoofed pools
    SampleAdaptSet {
        #[arg(long)]
        bonafide: PathBuf,
        #[arg(long)]
        spoof: PathBuf,
        /// bonafide, bonafide+spoof, per-spk, per-attack or per-both
        #[arg(long, value_parser = parse_strategy)]
        strategy: SampleStrategy,
        /// Total size of a balanced subset
        #[arg(long, default_value_t = 0)]
        budget: usize,
        #[arg(long, value_parser = parse_emb_format, default_value = "binary")]
        format: EmbeddingFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus
    Synth(SynthArgs),
    /// Print a PLDA model as text
    InspectModel {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    n_speakers: usize,
    #[arg(long, default_value_t = 10)]
    utts_per_speaker: usize,
    #[arg(long, default_value_t = 50)]
    n_ind_speakers: usize,
    #[arg(long, default_value_t = 4)]
    ind_utts_per_speaker: usize,
    #[arg(long, default_value_t = 200)]
    n_ind_spoofed: usize,
    #[arg(long, default_value_t = 6)]
    n_attacks: usize,
    #[arg(long, default_value_t = 40)]
    n_eval_speakers: usize,
    #[arg(long, default_value_t = 3)]
    enroll_utts: usize,
    /// Trial counts follow this scenario's evaluation ratios
    #[arg(long, value_enum, default_value = "la")]
    scenario: Scenario,
    /// Divide the scenario's trial counts by this factor
    #[arg(long, default_value_t = 10)]
    trial_scale: usize,
    /// Largest per-axis scale of the in-domain shift; 1 with a zero offset disables it
    #[arg(long, default_value_t = 2.0)]
    shift_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    shift_offset: f64,
    #[arg(long, default_value_t = 0.8)]
    spoof_pull: f64,
    #[arg(long, default_value_t = 0.1)]
    spoof_noise_scale: f64,
    #[arg(long, default_value_t = 2.0)]
    cm_separation: f64,
    #[arg(long, value_parser = parse_emb_format, default_value = "binary")]
    format: EmbeddingFormat,
}

fn parse_method(s: &str) -> Result<AdaptMethod, String> {
    s.parse().map_err(|e: asvadapt::Error| e.to_string())
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    s.parse().map_err(|e: asvadapt::Error| e.to_string())
}

fn parse_strategy(s: &str) -> Result<SampleStrategy, String> {
    s.parse().map_err(|e: asvadapt::Error| e.to_string())
}

fn parse_emb_format(s: &str) -> Result<EmbeddingFormat, String> {
    s.parse().map_err(|e: asvadapt::Error| e.to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = cli.settings.resolve()?;
    commands::dispatch(cli.command, &cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_broken_pipe() => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("asvadapt: error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn resolve(args: &[&str]) -> Result<RunConfig, CliError> {
        let cli = Cli::try_parse_from(args).unwrap();
        cli.settings.resolve()
    }

    #[test]
    fn later_sources_win() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "alpha_w = 0.5\nalpha_b = 0.3\nbeta = 0.2\nlda_dim = 12").unwrap();
        let path = f.path().to_str().unwrap();
        let c = resolve(&["asvadapt", "inspect-model", "--model", "m", "--config", path]).unwrap();
        assert_eq!((c.alpha_w, c.alpha_b, c.beta, c.lda_dim), (0.5, 0.3, 0.2, 12));
        let c = resolve(&["asvadapt", "inspect-model", "--model", "m", "--config", path, "--preset", "pa"]).unwrap();
        assert_eq!((c.alpha_w, c.alpha_b, c.beta), (0.9, 0.0, 0.2));
        let c = resolve(&[
            "asvadapt", "--preset", "pa", "inspect-model", "--model", "m", "--config", path, "--alpha-w", "0.1",
        ])
        .unwrap();
        assert_eq!((c.alpha_w, c.alpha_b), (0.1, 0.0));
        let err = resolve(&["asvadapt", "inspect-model", "--model", "m", "--mix-alpha", "1"]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
