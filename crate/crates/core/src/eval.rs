//! Equal error rate, parametric confidence intervals, and evaluation reports
//! over bonafide (target vs non-target) and spoofed (target vs spoof) trials.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{TrialKey, TrialList};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

const MAX_REPORTED_MISSING: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub model_id: String,
    pub test_utt: String,
    pub score: f64,
}

/// Per-trial scores keyed by `(model_id, test_utt)`.
#[derive(Debug, Clone, Default)]
pub struct ScoreFile {
    entries: Vec<ScoreEntry>,
    index: HashMap<(String, String), usize>,
}

impl PartialEq for ScoreFile {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl ScoreFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, model_id: &str, test_utt: &str, score: f64) -> Result<()> {
        if !score.is_finite() {
            return Err(Error::Numeric(format!(
                "score for ({model_id}, {test_utt}) is not finite"
            )));
        }
        let key = (model_id.to_string(), test_utt.to_string());
        if self.index.contains_key(&key) {
            return Err(Error::Config(format!(
                "duplicate score for ({model_id}, {test_utt})"
            )));
        }
        self.index.insert(key, self.entries.len());
        self.entries.push(ScoreEntry {
            model_id: model_id.to_string(),
            test_utt: test_utt.to_string(),
            score,
        });
        Ok(())
    }

    pub fn get(&self, model_id: &str, test_utt: &str) -> Option<f64> {
        self.index
            .get(&(model_id.to_string(), test_utt.to_string()))
            .map(|&i| self.entries[i].score)
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_scores(path: &Path) -> Result<ScoreFile> {
    read_scores(BufReader::new(File::open(path)?))
}

/// Reads `model_id test_utt score` rows.
pub fn read_scores<R: BufRead>(reader: R) -> Result<ScoreFile> {
    let mut scores = ScoreFile::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let loc = format!("line {}", i + 1);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::parse(loc, format!("expected 3 columns, found {}", fields.len())));
        }
        let score: f64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(loc.clone(), format!("bad score '{}'", fields[2])))?;
        scores
            .push(fields[0], fields[1], score)
            .map_err(|e| Error::parse(loc, e.to_string()))?;
    }
    Ok(scores)
}

pub fn write_scores<W: Write>(scores: &ScoreFile, mut out: W) -> Result<()> {
    for e in &scores.entries {
        writeln!(out, "{}\t{}\t{:?}", e.model_id, e.test_utt, e.score)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Counts of scores strictly below each query, for ascending sorted input.
struct Below<'a> {
    sorted: &'a [f64],
    pos: usize,
}

impl Below<'_> {
    fn advance(&mut self, v: f64) -> usize {
        while self.pos < self.sorted.len() && self.sorted[self.pos] < v {
            self.pos += 1;
        }
        self.pos
    }
}

/// EER by sweeping the threshold over every distinct pooled score (a score
/// `>= threshold` is accepted) and linearly interpolating between the two
/// operating points that bracket `FRR == FAR`. Beyond the highest score
/// everything is rejected.
pub fn compute_eer(target_scores: &[f64], impostor_scores: &[f64]) -> Result<Eer> {
    if target_scores.is_empty() || impostor_scores.is_empty() {
        return Err(Error::EmptyInput(format!(
            "EER needs both classes ({} target, {} impostor scores)",
            target_scores.len(),
            impostor_scores.len()
        )));
    }
    if target_scores.iter().chain(impostor_scores).any(|s| !s.is_finite()) {
        return Err(Error::Numeric("EER input contains non-finite scores".into()));
    }
    let mut tar = target_scores.to_vec();
    let mut imp = impostor_scores.to_vec();
    tar.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    let mut pooled: Vec<f64> = tar.iter().chain(&imp).copied().collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();

    let nt = tar.len() as f64;
    let ni = imp.len() as f64;
    let mut tar_below = Below { sorted: &tar, pos: 0 };
    let mut imp_below = Below { sorted: &imp, pos: 0 };

    // (threshold, frr, far); the sentinel past the top score rejects everything.
    let mut prev: Option<(f64, f64, f64)> = None;
    let points = pooled
        .iter()
        .map(|&v| {
            let frr = tar_below.advance(v) as f64 / nt;
            let far = (imp.len() - imp_below.advance(v)) as f64 / ni;
            (v, frr, far)
        })
        .chain(std::iter::once((f64::INFINITY, 1.0, 0.0)));
    for (thr, frr, far) in points {
        if frr - far >= 0.0 {
            let Some((p_thr, p_frr, p_far)) = prev else {
                return Ok(Eer { eer: frr, threshold: thr });
            };
            let d0 = p_frr - p_far;
            let d1 = frr - far;
            let t = -d0 / (d1 - d0);
            let eer = p_frr + t * (frr - p_frr);
            let threshold = if thr.is_finite() {
                p_thr + t * (thr - p_thr)
            } else {
                p_thr
            };
            return Ok(Eer { eer, threshold });
        }
        prev = Some((thr, frr, far));
    }
    unreachable!("the sentinel operating point always has FRR >= FAR")
}

/// Half-width `delta * Z` of the parametric 95% interval, where
/// `delta = 0.5 * sqrt(eer (1 - eer) (n+ + n-) / (n+ n-))`.
pub fn eer_confidence_interval(eer: f64, n_target: usize, n_impostor: usize) -> Result<f64> {
    if n_target < 1 || n_impostor < 1 {
        return Err(Error::Domain(format!(
            "confidence interval needs at least one trial per class ({n_target}, {n_impostor})"
        )));
    }
    if !(0.0..=1.0).contains(&eer) {
        return Err(Error::Domain(format!("EER {eer} outside [0, 1]")));
    }
    let (np, nn) = (n_target as f64, n_impostor as f64);
    let delta = 0.5 * (eer * (1.0 - eer) * (np + nn) / (np * nn)).sqrt();
    Ok(delta * Z_95)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    /// Half-width of the 95% interval, as a fraction (not percent).
    pub ci: f64,
    pub threshold: f64,
    pub n_target: usize,
    pub n_impostor: usize,
}

impl EerResult {
    pub fn compute(targets: &[f64], impostors: &[f64]) -> Result<Self> {
        let e = compute_eer(targets, impostors)?;
        Ok(Self {
            eer: e.eer,
            ci: eer_confidence_interval(e.eer, targets.len(), impostors.len())?,
            threshold: e.threshold,
            n_target: targets.len(),
            n_impostor: impostors.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Target vs zero-effort impostor trials.
    pub bonafide: Option<EerResult>,
    /// Target vs spoof trials.
    pub spoofed: Option<EerResult>,
    /// Target vs the spoof trials of one attack.
    pub per_attack: BTreeMap<String, EerResult>,
    /// Scores present in the score file but not referenced by any trial.
    pub unused_scores: usize,
}

impl EvalReport {
    pub fn eer_bonafide(&self) -> Option<f64> {
        self.bonafide.as_ref().map(|r| r.eer)
    }

    pub fn eer_spoofed(&self) -> Option<f64> {
        self.spoofed.as_ref().map(|r| r.eer)
    }
}

pub fn evaluate(scores: &ScoreFile, trials: &TrialList) -> Result<EvalReport> {
    let mut missing = Vec::new();
    let mut n_missing = 0;
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    let mut spoofs = Vec::new();
    let mut by_attack: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for t in trials.trials() {
        let Some(s) = scores.get(&t.model_id, &t.test_utt) else {
            n_missing += 1;
            if missing.len() < MAX_REPORTED_MISSING {
                missing.push(format!("({} {})", t.model_id, t.test_utt));
            }
            continue;
        };
        match t.key {
            TrialKey::Target => targets.push(s),
            TrialKey::Nontarget => nontargets.push(s),
            TrialKey::Spoof => {
                spoofs.push(s);
                let attack = t.attack.as_deref().expect("spoof trials carry an attack id");
                by_attack.entry(attack).or_default().push(s);
            }
        }
    }
    if n_missing > 0 {
        return Err(Error::Join {
            count: n_missing,
            missing,
        });
    }
    if targets.is_empty() {
        return Err(Error::Domain("trial list has no target trials".into()));
    }
    if nontargets.is_empty() && spoofs.is_empty() {
        return Err(Error::Domain("trial list has no impostor trials".into()));
    }
    let bonafide = (!nontargets.is_empty())
        .then(|| EerResult::compute(&targets, &nontargets))
        .transpose()?;
    let spoofed = (!spoofs.is_empty())
        .then(|| EerResult::compute(&targets, &spoofs))
        .transpose()?;
    let per_attack = by_attack
        .into_iter()
        .map(|(a, s)| Ok((a.to_string(), EerResult::compute(&targets, &s)?)))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        bonafide,
        spoofed,
        per_attack,
        unused_scores: scores.len().saturating_sub(trials.len()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Tsv,
    Markdown,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(Self::Tsv),
            "markdown" | "md" => Ok(Self::Markdown),
            "json" => Ok(Self::Json),
            other => Err(Error::Config(format!("unknown report format '{other}'"))),
        }
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn summary_rows(report: &EvalReport) -> Vec<(&'static str, &EerResult)> {
    let mut rows = Vec::new();
    if let Some(r) = &report.bonafide {
        rows.push(("bonafide", r));
    }
    if let Some(r) = &report.spoofed {
        rows.push(("spoofed", r));
    }
    rows
}

/// Per-attack table alone, as TSV.
pub fn emit_breakdown_tsv(report: &EvalReport) -> String {
    let mut out = String::from("attack\teer\tci\tn_target\tn_spoof\n");
    for (attack, r) in &report.per_attack {
        let _ = writeln!(
            out,
            "{attack}\t{}\t{}\t{}\t{}",
            pct(r.eer),
            pct(r.ci),
            r.n_target,
            r.n_impostor
        );
    }
    out
}

/// Serializes a report. EERs and interval half-widths are percentages with two
/// decimals in TSV and Markdown; JSON carries the raw fractions.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Tsv => {
            let mut out = String::from("condition\teer\tci\tn_target\tn_impostor\n");
            for (name, r) in summary_rows(report) {
                let _ = writeln!(
                    out,
                    "{name}\t{}\t{}\t{}\t{}",
                    pct(r.eer),
                    pct(r.ci),
                    r.n_target,
                    r.n_impostor
                );
            }
            if !report.per_attack.is_empty() {
                out.push('\n');
                out.push_str(&emit_breakdown_tsv(report));
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = String::from(
                "| Condition | EER (%) | 95% CI (±) | Targets | Impostors |\n|---|---:|---:|---:|---:|\n",
            );
            for (name, r) in summary_rows(report) {
                let _ = writeln!(
                    out,
                    "| {name} | {} | {} | {} | {} |",
                    pct(r.eer),
                    pct(r.ci),
                    r.n_target,
                    r.n_impostor
                );
            }
            if !report.per_attack.is_empty() {
                out.push_str(
                    "\n### Per-attack breakdown\n\n| Attack | EER (%) | 95% CI (±) | Targets | Spoofs |\n|---|---:|---:|---:|---:|\n",
                );
                for (attack, r) in &report.per_attack {
                    let _ = writeln!(
                        out,
                        "| {attack} | {} | {} | {} | {} |",
                        pct(r.eer),
                        pct(r.ci),
                        r.n_target,
                        r.n_impostor
                    );
                }
            }
            out
        }
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report is serializable");
            s.push('\n');
            s
        }
    }
}

pub fn report_from_json(text: &str) -> Result<EvalReport> {
    serde_json::from_str(text).map_err(|e| Error::parse("json report", e.to_string()))
}
