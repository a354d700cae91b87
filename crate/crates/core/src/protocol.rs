//! Embedding sets, trial lists and enrollment maps, together with their text
//! and binary file formats, and the adaptation-set sampling strategies.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::LeReader;
use crate::error::{Error, Result};

const EMB_MAGIC: &[u8; 4] = b"EMB1";

/// Trial counts of the ASVspoof 2019 protocols: (target, bonafide non-target,
/// spoofed non-target) per scenario and partition.
pub const LA_DEV_COUNTS: TrialCounts = TrialCounts::new(1484, 5768, 22296);
pub const LA_EVAL_COUNTS: TrialCounts = TrialCounts::new(5370, 33327, 63882);
pub const PA_DEV_COUNTS: TrialCounts = TrialCounts::new(2700, 14040, 24300);
pub const PA_EVAL_COUNTS: TrialCounts = TrialCounts::new(12960, 123930, 116640);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialCounts {
    pub target: usize,
    pub nontarget: usize,
    pub spoof: usize,
}

impl TrialCounts {
    pub const fn new(target: usize, nontarget: usize, spoof: usize) -> Self {
        Self {
            target,
            nontarget,
            spoof,
        }
    }

    /// Each count divided by `factor`, rounded to nearest, at least one.
    pub fn scaled_down(&self, factor: usize) -> Self {
        let f = |n: usize| ((n + factor / 2) / factor).max(1);
        Self::new(f(self.target), f(self.nontarget), f(self.spoof))
    }

    pub fn total(&self) -> usize {
        self.target + self.nontarget + self.spoof
    }
}

fn validate_id(id: &str, what: &str) -> Result<()> {
    if id.is_empty() || id == "-" || id.chars().any(char::is_whitespace) {
        return Err(Error::Config(format!(
            "{what} '{id}' must be non-empty, not '-', and free of whitespace"
        )));
    }
    if id.len() > u16::MAX as usize {
        return Err(Error::Config(format!("{what} is longer than 65535 bytes")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub utt_id: String,
    pub vector: Vec<f64>,
    pub speaker: Option<String>,
    pub attack: Option<String>,
    pub bonafide: bool,
}

impl EmbeddingRecord {
    pub fn bonafide(utt_id: impl Into<String>, speaker: Option<&str>, vector: Vec<f64>) -> Self {
        Self {
            utt_id: utt_id.into(),
            vector,
            speaker: speaker.map(str::to_string),
            attack: None,
            bonafide: true,
        }
    }

    pub fn spoof(
        utt_id: impl Into<String>,
        speaker: Option<&str>,
        attack: &str,
        vector: Vec<f64>,
    ) -> Self {
        Self {
            utt_id: utt_id.into(),
            vector,
            speaker: speaker.map(str::to_string),
            attack: Some(attack.to_string()),
            bonafide: false,
        }
    }
}

/// Fixed-dimension labelled vectors with unique utterance ids.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingSet {
    dim: usize,
    records: Vec<EmbeddingRecord>,
    index: HashMap<String, usize>,
}

impl PartialEq for EmbeddingSet {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.records == other.records
    }
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            records: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn from_records(dim: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        let mut set = Self::new(dim);
        set.records.reserve(records.len());
        for r in records {
            set.push(r)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, record: EmbeddingRecord) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Shape("embedding dimension must be positive".into()));
        }
        validate_id(&record.utt_id, "utterance id")?;
        if let Some(s) = &record.speaker {
            validate_id(s, "speaker id")?;
        }
        if let Some(a) = &record.attack {
            validate_id(a, "attack id")?;
            if record.bonafide {
                return Err(Error::Config(format!(
                    "utterance '{}' has attack '{a}' but is marked bonafide",
                    record.utt_id
                )));
            }
        }
        if record.vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "utterance '{}' has dimension {}, set has {}",
                record.utt_id,
                record.vector.len(),
                self.dim
            )));
        }
        if record.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "utterance '{}' has a non-finite value",
                record.utt_id
            )));
        }
        if self.index.contains_key(&record.utt_id) {
            return Err(Error::Config(format!(
                "duplicate utterance id '{}'",
                record.utt_id
            )));
        }
        self.index.insert(record.utt_id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn iter(&self) -> impl Iterator<Item = &EmbeddingRecord> {
        self.records.iter()
    }

    pub fn get(&self, utt_id: &str) -> Option<&EmbeddingRecord> {
        self.index.get(utt_id).map(|&i| &self.records[i])
    }

    pub fn vectors(&self) -> Vec<&[f64]> {
        self.records.iter().map(|r| r.vector.as_slice()).collect()
    }

    /// Record indices grouped by speaker label, in sorted speaker order.
    /// Fails if any record lacks a speaker label.
    pub fn by_speaker(&self) -> Result<BTreeMap<&str, Vec<usize>>> {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            let spk = r.speaker.as_deref().ok_or_else(|| {
                Error::Config(format!("utterance '{}' has no speaker label", r.utt_id))
            })?;
            groups.entry(spk).or_default().push(i);
        }
        Ok(groups)
    }

    /// Same labels, new vectors (possibly of a different dimension).
    pub fn try_map_vectors<F>(&self, out_dim: usize, mut f: F) -> Result<EmbeddingSet>
    where
        F: FnMut(&EmbeddingRecord) -> Result<Vec<f64>>,
    {
        let mut out = EmbeddingSet::new(out_dim);
        out.records.reserve(self.len());
        for r in &self.records {
            let vector = f(r)?;
            out.push(EmbeddingRecord {
                vector,
                ..r.clone()
            })?;
        }
        Ok(out)
    }

    /// Union of two sets; utterance ids must not collide.
    pub fn concat(&self, other: &EmbeddingSet) -> Result<EmbeddingSet> {
        if self.dim != other.dim {
            return Err(Error::Shape(format!(
                "cannot join sets of dimension {} and {}",
                self.dim, other.dim
            )));
        }
        let mut out = self.clone();
        for r in &other.records {
            out.push(r.clone())?;
        }
        Ok(out)
    }

    /// Subset by record index, in the order given.
    pub fn select(&self, indices: &[usize]) -> EmbeddingSet {
        let mut out = EmbeddingSet::new(self.dim);
        for &i in indices {
            let r = self.records[i].clone();
            out.index.insert(r.utt_id.clone(), out.records.len());
            out.records.push(r);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Text,
    Binary,
}

impl FromStr for EmbeddingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" => Ok(Self::Text),
            "binary" => Ok(Self::Binary),
            other => Err(Error::Config(format!("unknown embedding format '{other}'"))),
        }
    }
}

pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<EmbeddingSet> {
    let file = BufReader::new(File::open(path)?);
    match format {
        EmbeddingFormat::Text => read_embeddings_text(file),
        EmbeddingFormat::Binary => read_embeddings_binary(file),
    }
}

/// Loads either format, telling them apart by the binary magic.
pub fn load_embeddings_auto(path: &Path) -> Result<EmbeddingSet> {
    let mut head = [0u8; 4];
    let n = File::open(path)?.read(&mut head)?;
    if n == 4 && &head == EMB_MAGIC {
        load_embeddings(path, EmbeddingFormat::Binary)
    } else {
        load_embeddings(path, EmbeddingFormat::Text)
    }
}

pub fn write_embeddings<W: Write>(set: &EmbeddingSet, out: W, format: EmbeddingFormat) -> Result<()> {
    match format {
        EmbeddingFormat::Text => write_embeddings_text(set, out),
        EmbeddingFormat::Binary => write_embeddings_binary(set, out),
    }
}

pub fn save_embeddings(set: &EmbeddingSet, path: &Path, format: EmbeddingFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_embeddings(set, &mut w, format)?;
    w.flush()?;
    Ok(())
}

fn opt_label(field: &str) -> Option<String> {
    (field != "-").then(|| field.to_string())
}

pub fn read_embeddings_text<R: BufRead>(reader: R) -> Result<EmbeddingSet> {
    let mut lines = reader.lines().enumerate();
    let dim = match lines.next() {
        Some((_, line)) => {
            let line = line?;
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some("dim"), Some(d), None) => d
                    .parse::<usize>()
                    .ok()
                    .filter(|&d| d > 0)
                    .ok_or_else(|| Error::parse("line 1", format!("bad dimension '{d}'")))?,
                _ => return Err(Error::parse("line 1", "expected header 'dim <d>'")),
            }
        }
        None => return Err(Error::parse("line 1", "missing header 'dim <d>'")),
    };

    let mut set = EmbeddingSet::new(dim);
    for (i, line) in lines {
        let line = line?;
        let loc = format!("line {}", i + 1);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 + dim {
            return Err(Error::parse(
                loc,
                format!("expected {} fields, found {}", 4 + dim, fields.len()),
            ));
        }
        let bonafide = match fields[3] {
            "b" => true,
            "s" => false,
            other => return Err(Error::parse(loc, format!("expected 'b' or 's', found '{other}'"))),
        };
        let mut vector = Vec::with_capacity(dim);
        for tok in &fields[4..] {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(loc.clone(), format!("bad number '{tok}'")))?;
            if !v.is_finite() {
                return Err(Error::parse(loc, format!("non-finite value '{tok}'")));
            }
            vector.push(v);
        }
        let record = EmbeddingRecord {
            utt_id: fields[0].to_string(),
            vector,
            speaker: opt_label(fields[1]),
            attack: opt_label(fields[2]),
            bonafide,
        };
        set.push(record)
            .map_err(|e| Error::parse(loc, e.to_string()))?;
    }
    Ok(set)
}

fn write_embeddings_text<W: Write>(set: &EmbeddingSet, mut out: W) -> Result<()> {
    writeln!(out, "dim {}", set.dim)?;
    for r in &set.records {
        write!(
            out,
            "{} {} {} {}",
            r.utt_id,
            r.speaker.as_deref().unwrap_or("-"),
            r.attack.as_deref().unwrap_or("-"),
            if r.bonafide { "b" } else { "s" }
        )?;
        for v in &r.vector {
            write!(out, " {v:?}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_embeddings_binary<R: Read>(reader: R) -> Result<EmbeddingSet> {
    let mut cur = LeReader::new(reader);
    let mut magic = [0u8; 4];
    cur.fill(&mut magic)?;
    if &magic != EMB_MAGIC {
        return Err(Error::parse("header", "bad magic, expected 'EMB1'"));
    }
    let dim = cur.u32()? as usize;
    if dim == 0 {
        return Err(Error::parse("header", "dimension must be positive"));
    }
    let count = cur.u32()? as usize;
    let mut set = EmbeddingSet::new(dim);
    for i in 0..count {
        let loc = format!("record {i}");
        cur.location = loc.clone();
        let utt_id = cur
            .short_string()?
            .ok_or_else(|| Error::parse(loc.clone(), "empty utterance id"))?;
        let speaker = cur.short_string()?;
        let attack = cur.short_string()?;
        let bonafide = match cur.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::parse(loc, format!("bad bonafide flag {b}"))),
        };
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            let v = cur.f32()?;
            if !v.is_finite() {
                return Err(Error::parse(loc, "non-finite value"));
            }
            vector.push(v as f64);
        }
        set.push(EmbeddingRecord {
            utt_id,
            vector,
            speaker,
            attack,
            bonafide,
        })
        .map_err(|e| Error::parse(loc, e.to_string()))?;
    }
    cur.expect_eof()?;
    Ok(set)
}

fn write_embeddings_binary<W: Write>(set: &EmbeddingSet, mut out: W) -> Result<()> {
    let put_str = |out: &mut W, s: Option<&str>| -> Result<()> {
        let s = s.unwrap_or("");
        out.write_all(&(s.len() as u16).to_le_bytes())?;
        out.write_all(s.as_bytes())?;
        Ok(())
    };
    out.write_all(EMB_MAGIC)?;
    out.write_all(&(set.dim as u32).to_le_bytes())?;
    let count = u32::try_from(set.len())
        .map_err(|_| Error::Config("too many records for the binary format".into()))?;
    out.write_all(&count.to_le_bytes())?;
    for r in &set.records {
        put_str(&mut out, Some(&r.utt_id))?;
        put_str(&mut out, r.speaker.as_deref())?;
        put_str(&mut out, r.attack.as_deref())?;
        out.write_all(&[u8::from(r.bonafide)])?;
        for &v in &r.vector {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::Numeric(format!(
                    "utterance '{}' has a value outside f32 range",
                    r.utt_id
                )));
            }
            out.write_all(&f.to_le_bytes())?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrialKey {
    Target,
    Nontarget,
    Spoof,
}

impl TrialKey {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrialKey::Target => "target",
            TrialKey::Nontarget => "nontarget",
            TrialKey::Spoof => "spoof",
        }
    }
}

impl fmt::Display for TrialKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrialKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(TrialKey::Target),
            "nontarget" => Ok(TrialKey::Nontarget),
            "spoof" => Ok(TrialKey::Spoof),
            other => Err(Error::Config(format!("unknown trial key '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub model_id: String,
    pub test_utt: String,
    pub key: TrialKey,
    pub attack: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct TrialList {
    trials: Vec<Trial>,
    pairs: HashSet<(String, String)>,
}

impl PartialEq for TrialList {
    fn eq(&self, other: &Self) -> bool {
        self.trials == other.trials
    }
}

impl TrialList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, trial: Trial) -> Result<()> {
        validate_id(&trial.model_id, "model id")?;
        validate_id(&trial.test_utt, "test utterance")?;
        match (&trial.key, &trial.attack) {
            (TrialKey::Spoof, None) => {
                return Err(Error::Config("spoof trial without attack id".into()))
            }
            (TrialKey::Spoof, Some(a)) => validate_id(a, "attack id")?,
            (_, Some(a)) => {
                return Err(Error::Config(format!(
                    "{} trial carries attack id '{a}'",
                    trial.key
                )))
            }
            _ => {}
        }
        let pair = (trial.model_id.clone(), trial.test_utt.clone());
        if !self.pairs.insert(pair) {
            return Err(Error::Config(format!(
                "duplicate trial ({}, {})",
                trial.model_id, trial.test_utt
            )));
        }
        self.trials.push(trial);
        Ok(())
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn count(&self, key: TrialKey) -> usize {
        self.trials.iter().filter(|t| t.key == key).count()
    }

    pub fn count_attack(&self, attack: &str) -> usize {
        self.trials
            .iter()
            .filter(|t| t.attack.as_deref() == Some(attack))
            .count()
    }

    /// Distinct attack ids, sorted.
    pub fn attacks(&self) -> Vec<&str> {
        let set: std::collections::BTreeSet<&str> =
            self.trials.iter().filter_map(|t| t.attack.as_deref()).collect();
        set.into_iter().collect()
    }

    pub fn counts(&self) -> TrialCounts {
        TrialCounts::new(
            self.count(TrialKey::Target),
            self.count(TrialKey::Nontarget),
            self.count(TrialKey::Spoof),
        )
    }
}

pub fn parse_trials(path: &Path) -> Result<TrialList> {
    read_trials(BufReader::new(File::open(path)?))
}

/// Reads the trials TSV: `model_id test_utt key attack_id|-`.
pub fn read_trials<R: BufRead>(reader: R) -> Result<TrialList> {
    let mut list = TrialList::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let loc = format!("line {}", i + 1);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(loc, format!("expected 4 columns, found {}", fields.len())));
        }
        let key: TrialKey = fields[2]
            .parse()
            .map_err(|e: Error| Error::parse(loc.clone(), e.to_string()))?;
        list.push(Trial {
            model_id: fields[0].to_string(),
            test_utt: fields[1].to_string(),
            key,
            attack: opt_label(fields[3]),
        })
        .map_err(|e| Error::parse(loc, e.to_string()))?;
    }
    Ok(list)
}

pub fn write_trials<W: Write>(list: &TrialList, mut out: W) -> Result<()> {
    for t in &list.trials {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            t.model_id,
            t.test_utt,
            t.key,
            t.attack.as_deref().unwrap_or("-")
        )?;
    }
    Ok(())
}

/// Enrollment utterances per model. Models and utterances keep file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnrollMap {
    models: Vec<(String, Vec<String>)>,
}

impl EnrollMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, model_id: &str, utt_id: &str) -> Result<()> {
        validate_id(model_id, "model id")?;
        validate_id(utt_id, "utterance id")?;
        match self.models.iter_mut().find(|(m, _)| m == model_id) {
            Some((_, utts)) => {
                if utts.iter().any(|u| u == utt_id) {
                    return Err(Error::Config(format!(
                        "duplicate enrollment row ({model_id}, {utt_id})"
                    )));
                }
                utts.push(utt_id.to_string());
            }
            None => self
                .models
                .push((model_id.to_string(), vec![utt_id.to_string()])),
        }
        Ok(())
    }

    pub fn models(&self) -> &[(String, Vec<String>)] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

pub fn parse_enroll_map(path: &Path) -> Result<EnrollMap> {
    read_enroll_map(BufReader::new(File::open(path)?))
}

/// Reads `model_id utt_id` rows, one per enrollment utterance.
pub fn read_enroll_map<R: BufRead>(reader: R) -> Result<EnrollMap> {
    let mut map = EnrollMap::new();
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
        map.add(fields[0], fields[1])
            .map_err(|e| Error::parse(loc, e.to_string()))?;
    }
    Ok(map)
}

pub fn write_enroll_map<W: Write>(map: &EnrollMap, mut out: W) -> Result<()> {
    for (model, utts) in &map.models {
        for u in utts {
            writeln!(out, "{model}\t{u}")?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleStrategy {
    BonafideOnly,
    BonafidePlusSpoof,
    PerSpeaker,
    PerAttack,
    PerBoth,
}

impl SampleStrategy {
    pub fn is_balanced(&self) -> bool {
        matches!(
            self,
            SampleStrategy::PerSpeaker | SampleStrategy::PerAttack | SampleStrategy::PerBoth
        )
    }
}

impl FromStr for SampleStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bonafide" => Ok(Self::BonafideOnly),
            "bonafide+spoof" => Ok(Self::BonafidePlusSpoof),
            "per-spk" => Ok(Self::PerSpeaker),
            "per-attack" => Ok(Self::PerAttack),
            "per-both" => Ok(Self::PerBoth),
            other => Err(Error::Config(format!("unknown sampling strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplePlan {
    pub strategy: SampleStrategy,
    pub budget_m: usize,
    pub seed: u64,
}

/// Splits `total` over `cells` by floor division, handing the remainder out one
/// at a time to the leading cells.
pub fn allocate_quotas(total: usize, cells: usize) -> Vec<usize> {
    if cells == 0 {
        return Vec::new();
    }
    let base = total / cells;
    let extra = total % cells;
    (0..cells).map(|i| base + usize::from(i < extra)).collect()
}

fn label_of<'a>(r: &'a EmbeddingRecord, what: &str, field: Option<&'a String>) -> Result<&'a str> {
    field.map(String::as_str).ok_or_else(|| {
        Error::Config(format!("utterance '{}' has no {what} label", r.utt_id))
    })
}

fn sample_cells(
    set: &EmbeddingSet,
    cells: &BTreeMap<String, Vec<usize>>,
    total: usize,
    rng: &mut ChaCha8Rng,
    picked: &mut Vec<usize>,
) -> Result<()> {
    let quotas = allocate_quotas(total, cells.len());
    for ((cell, members), quota) in cells.iter().zip(quotas) {
        if quota > members.len() {
            return Err(Error::InfeasiblePlan {
                cell: cell.clone(),
                needed: quota,
                available: members.len(),
            });
        }
        let mut chosen: Vec<usize> = index::sample(rng, members.len(), quota)
            .into_iter()
            .map(|k| members[k])
            .collect();
        chosen.sort_unstable();
        picked.extend(chosen);
    }
    debug_assert!(picked.iter().all(|&i| i < set.len()));
    Ok(())
}

/// Builds an adaptation set from bonafide and spoofed pools according to `plan`.
///
/// Balanced strategies draw `m/2` bonafide utterances with a per-speaker quota
/// and `m/2` spoofed ones with a quota per speaker, per attack, or per
/// (speaker, attack) cell. Quotas that do not divide evenly give one extra
/// utterance to the first cells in sorted order.
pub fn sample_adaptation_set(
    bonafide: &EmbeddingSet,
    spoofed: &EmbeddingSet,
    plan: &SamplePlan,
) -> Result<EmbeddingSet> {
    match plan.strategy {
        SampleStrategy::BonafideOnly => return Ok(bonafide.clone()),
        SampleStrategy::BonafidePlusSpoof => return bonafide.concat(spoofed),
        _ => {}
    }
    if plan.budget_m == 0 || !plan.budget_m.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "balanced sampling needs a positive even budget, got {}",
            plan.budget_m
        )));
    }
    if bonafide.is_empty() || spoofed.is_empty() {
        return Err(Error::InsufficientData(
            "balanced sampling needs non-empty bonafide and spoofed sets".into(),
        ));
    }
    if bonafide.dim() != spoofed.dim() {
        return Err(Error::Shape(format!(
            "bonafide dimension {} vs spoofed dimension {}",
            bonafide.dim(),
            spoofed.dim()
        )));
    }
    let half = plan.budget_m / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);

    let mut bona_cells: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in bonafide.iter().enumerate() {
        let spk = label_of(r, "speaker", r.speaker.as_ref())?;
        bona_cells.entry(spk.to_string()).or_default().push(i);
    }
    let mut spoof_cells: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in spoofed.iter().enumerate() {
        let key = match plan.strategy {
            SampleStrategy::PerSpeaker => label_of(r, "speaker", r.speaker.as_ref())?.to_string(),
            SampleStrategy::PerAttack => label_of(r, "attack", r.attack.as_ref())?.to_string(),
            _ => format!(
                "{}/{}",
                label_of(r, "speaker", r.speaker.as_ref())?,
                label_of(r, "attack", r.attack.as_ref())?
            ),
        };
        spoof_cells.entry(key).or_default().push(i);
    }

    let mut bona_pick = Vec::with_capacity(half);
    sample_cells(bonafide, &bona_cells, half, &mut rng, &mut bona_pick)?;
    let mut spoof_pick = Vec::with_capacity(half);
    sample_cells(spoofed, &spoof_cells, half, &mut rng, &mut spoof_pick)?;

    bonafide.select(&bona_pick).concat(&spoofed.select(&spoof_pick))
}
