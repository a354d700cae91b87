use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use tempfile::NamedTempFile;

use asvadapt::adaptation::{adapt, AdaptMethod};
use asvadapt::eval::{emit_breakdown_tsv, emit_report, evaluate, load_scores, write_scores, ScoreFile};
use asvadapt::fusion::{
    fit_gaussian_backend, fuse_scores, fusion_samples, load_backend, load_cm_scores, write_backend,
    write_cm_scores,
};
use asvadapt::plda::{
    apply_preprocess, enroll_models, fit_plda_em_traced, fit_preprocess_with, load_model, read_enroll_stats,
    write_enroll_stats, write_model, EmOptions, PldaModel, PreprocessChain, TrialScorer,
};
use asvadapt::protocol::{
    load_embeddings_auto, parse_enroll_map, parse_trials, sample_adaptation_set, write_embeddings,
    write_enroll_map, write_trials, EmbeddingSet, SamplePlan, LA_EVAL_COUNTS,
    PA_EVAL_COUNTS,
};
use asvadapt::synth::{random_shift, synth_corpus, SynthSpec};

use crate::config::RunConfig;
use crate::{AdaptData, CliError, Command, Scenario, SynthArgs};

/// Writes through a temporary file in the destination directory and renames
/// it into place only once `fill` succeeds.
fn write_atomic<F>(path: &Path, fill: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<&mut NamedTempFile>) -> Result<(), CliError>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(&mut tmp);
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| CliError::from(e.error))?;
    Ok(())
}

fn load_set(path: &Path) -> Result<EmbeddingSet, CliError> {
    load_embeddings_auto(path).map_err(|e| with_path(e, path))
}

fn with_path(e: asvadapt::Error, path: &Path) -> CliError {
    CliError::File(path.to_path_buf(), e)
}

pub fn dispatch(cmd: Command, cfg: &RunConfig) -> Result<(), CliError> {
    match cmd {
        Command::FitBackend { train, out } => fit_backend(&train, &out, cfg),
        Command::Adapt { model, method, data, ind_bonafide, ind_spoof, ood, keep_mean, out } => {
            let model = load_model(&model).map_err(|e| with_path(e, &model))?;
            let mut ind = load_set(&ind_bonafide)?;
            match (data, ind_spoof) {
                (AdaptData::BonafideSpoof, Some(p)) => ind = ind.concat(&load_set(&p)?)?,
                (AdaptData::BonafideSpoof, None) => {
                    return Err(CliError::Usage("--data bonafide+spoof needs --ind-spoof".into()))
                }
                (AdaptData::Bonafide, Some(_)) => {
                    return Err(CliError::Usage("--ind-spoof is only used with --data bonafide+spoof".into()))
                }
                (AdaptData::Bonafide, None) => {}
            }
            if method != AdaptMethod::Aplda && ood.is_none() {
                return Err(CliError::Usage(format!("--method {method} needs --ood")));
            }
            let ind = apply_preprocess(model.chain(), &ind)?;
            let ood = match ood {
                Some(p) => Some(apply_preprocess(model.chain(), &load_set(&p)?)?),
                None => None,
            };
            let mut ac = cfg.adapt_config(method);
            ac.update_mean = !keep_mean;
            let adapted = adapt(&model, ood.as_ref(), &ind, &ac, cfg.em_iters)?;
            eprintln!("adapted with {method} on {} in-domain utterances", ind.len());
            write_atomic(&out, |w| Ok(write_model(&adapted, w)?))
        }
        Command::Enroll { model, embeddings, enroll_map, out } => {
            let model = load_model(&model).map_err(|e| with_path(e, &model))?;
            let set = load_set(&embeddings)?;
            let map = parse_enroll_map(&enroll_map).map_err(|e| with_path(e, &enroll_map))?;
            let stats = enroll_models(&model, &set, &map)?;
            write_atomic(&out, |w| Ok(write_enroll_stats(&stats, model.dim(), w)?))
        }
        Command::Score { model, enroll_stats, test, trials, out } => {
            let model = load_model(&model).map_err(|e| with_path(e, &model))?;
            let stats = File::open(&enroll_stats)
                .map_err(asvadapt::Error::from)
                .and_then(|f| read_enroll_stats(BufReader::new(f)))
                .map_err(|e| with_path(e, &enroll_stats))?;
            let test = load_set(&test)?;
            let trials = parse_trials(&trials).map_err(|e| with_path(e, &trials))?;
            let scorer = TrialScorer::new(&model, &stats, &test, &trials)?;
            let values: Vec<f64> = trials.trials().par_iter().map(|t| scorer.score(t)).collect();
            let mut scores = ScoreFile::new();
            for (t, s) in trials.trials().iter().zip(values) {
                scores.push(&t.model_id, &t.test_utt, s)?;
            }
            write_atomic(&out, |w| Ok(write_scores(&scores, w)?))
        }
        Command::Evaluate { scores, trials, breakdown, format, out } => {
            let scores = load_scores(&scores).map_err(|e| with_path(e, &scores))?;
            let trials = parse_trials(&trials).map_err(|e| with_path(e, &trials))?;
            let report = evaluate(&scores, &trials)?;
            if report.unused_scores > 0 {
                eprintln!("warning: {} score(s) match no trial", report.unused_scores);
            }
            let text = match breakdown {
                Some(_) => emit_breakdown_tsv(&report),
                None => emit_report(&report, format),
            };
            match out {
                Some(p) => write_atomic(&p, |w| Ok(w.write_all(text.as_bytes())?)),
                None => Ok(io::stdout().write_all(text.as_bytes())?),
            }
        }
        Command::FuseFit { fusion_dev, asv_scores, cm_scores, out } => {
            let trials = parse_trials(&fusion_dev).map_err(|e| with_path(e, &fusion_dev))?;
            let asv = load_scores(&asv_scores).map_err(|e| with_path(e, &asv_scores))?;
            let cm = load_cm_scores(&cm_scores).map_err(|e| with_path(e, &cm_scores))?;
            let samples = fusion_samples(&asv, &cm, &trials)?;
            let backend = fit_gaussian_backend(&samples, cfg.mix_alpha)?.with_eps_reg(cfg.eps_reg)?;
            write_atomic(&out, |w| Ok(write_backend(&backend, w)?))
        }
        Command::FuseApply { backend, asv_scores, cm_scores, out } => {
            let backend = load_backend(&backend).map_err(|e| with_path(e, &backend))?;
            let asv = load_scores(&asv_scores).map_err(|e| with_path(e, &asv_scores))?;
            let cm = load_cm_scores(&cm_scores).map_err(|e| with_path(e, &cm_scores))?;
            let fused = fuse_scores(&backend, &asv, &cm)?;
            write_atomic(&out, |w| Ok(write_scores(&fused, w)?))
        }
        Command::SampleAdaptSet { bonafide, spoof, strategy, budget, format, out } => {
            let bona = load_set(&bonafide)?;
            let spoof = load_set(&spoof)?;
            let plan = SamplePlan { strategy, budget_m: budget, seed: cfg.seed };
            let set = sample_adaptation_set(&bona, &spoof, &plan)?;
            write_atomic(&out, |w| Ok(write_embeddings(&set, w, format)?))
        }
        Command::Synth(args) => synth(&args, cfg),
        Command::InspectModel { model } => {
            let model = load_model(&model).map_err(|e| with_path(e, &model))?;
            let mut out = io::stdout().lock();
            inspect(&model, &mut out)?;
            Ok(())
        }
    }
}

fn fit_backend(train: &Path, out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let set = load_set(train)?;
    let chain = if cfg.lda_dim == 0 {
        let d = set.dim();
        let mut mean = DVector::zeros(d);
        for r in set.iter() {
            mean += DVector::from_column_slice(&r.vector);
        }
        if !set.is_empty() {
            mean /= set.len() as f64;
        }
        PreprocessChain::new(mean, DMatrix::identity(d, d), true)?
    } else {
        fit_preprocess_with(&set, cfg.lda_dim, cfg.eps_reg, true)?
    };
    let projected = apply_preprocess(&chain, &set)?;
    let fit = fit_plda_em_traced(&projected, &EmOptions { iters: cfg.em_iters, eps_reg: cfg.eps_reg })?;
    if let Some(ll) = fit.log_likelihood.last() {
        eprintln!("trained r={} PLDA on {} utterances, log-likelihood {ll:.6}", chain.output_dim(), set.len());
    }
    let model = fit.model.with_chain(chain)?;
    write_atomic(out, |w| Ok(write_model(&model, w)?))
}

fn synth(a: &SynthArgs, cfg: &RunConfig) -> Result<(), CliError> {
    if a.trial_scale == 0 {
        return Err(CliError::Usage("--trial-scale must be at least 1".into()));
    }
    let mut spec = SynthSpec::with_random_covariances(a.dim, cfg.seed);
    spec.n_speakers = a.n_speakers;
    spec.utts_per_speaker = a.utts_per_speaker;
    spec.n_ind_speakers = a.n_ind_speakers;
    spec.ind_utts_per_speaker = a.ind_utts_per_speaker;
    spec.n_ind_spoofed = a.n_ind_spoofed;
    spec.n_attacks = a.n_attacks;
    spec.n_eval_speakers = a.n_eval_speakers;
    spec.enroll_utts = a.enroll_utts;
    spec.spoof_pull = a.spoof_pull;
    spec.spoof_noise_scale = a.spoof_noise_scale;
    spec.cm_separation = a.cm_separation;
    spec.trial_counts = match a.scenario {
        Scenario::La => LA_EVAL_COUNTS,
        Scenario::Pa => PA_EVAL_COUNTS,
    }
    .scaled_down(a.trial_scale);
    if a.shift_scale != 1.0 || a.shift_offset != 0.0 {
        let (m, b) = random_shift(a.dim, a.shift_scale, a.shift_offset, cfg.seed.wrapping_add(1))?;
        spec = spec.with_shift(m, b);
    }
    spec.validate()?;
    let c = synth_corpus(&spec)?;

    fs::create_dir_all(&a.out_dir)?;
    let dir = &a.out_dir;
    for (name, set) in [
        ("ood.emb", &c.ood),
        ("ind_bonafide.emb", &c.ind_bonafide),
        ("ind_spoofed.emb", &c.ind_spoofed),
        ("enroll.emb", &c.enroll),
        ("test.emb", &c.test),
    ] {
        write_atomic(&dir.join(name), |w| Ok(write_embeddings(set, w, a.format)?))?;
    }
    write_atomic(&dir.join("enroll.map"), |w| Ok(write_enroll_map(&c.enroll_map, w)?))?;
    write_atomic(&dir.join("trials.txt"), |w| Ok(write_trials(&c.trials, w)?))?;
    write_atomic(&dir.join("cm_scores.txt"), |w| Ok(write_cm_scores(&c.cm_scores, w)?))?;
    let counts = c.trials.counts();
    eprintln!(
        "wrote synthetic corpus to {} ({} target, {} nontarget, {} spoof trials)",
        dir.display(),
        counts.target,
        counts.nontarget,
        counts.spoof
    );
    Ok(())
}

fn put_row<W: Write>(out: &mut W, label: &str, values: impl Iterator<Item = f64>) -> io::Result<()> {
    write!(out, "{label}")?;
    for v in values {
        write!(out, "\t{v:?}")?;
    }
    writeln!(out)
}

fn inspect<W: Write>(model: &PldaModel, out: &mut W) -> io::Result<()> {
    let chain = model.chain();
    writeln!(out, "dim\t{}", model.dim())?;
    writeln!(out, "input_dim\t{}", chain.input_dim())?;
    writeln!(out, "length_norm\t{}", chain.length_norm())?;
    put_row(out, "mu", model.mu().iter().copied())?;
    for (name, m) in [("phi_b", model.phi_b()), ("phi_w", model.phi_w())] {
        for i in 0..model.dim() {
            put_row(out, &format!("{name}[{i}]"), m.matrix().row(i).iter().copied())?;
        }
    }
    if let Some(cache) = model.diag_cache() {
        put_row(out, "psi", cache.psi.iter().copied())?;
    }
    Ok(())
}
