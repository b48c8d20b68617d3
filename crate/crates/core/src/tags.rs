//! Tag semantics: automatic key-filter rules, the curated key whitelist, and
//! semantic balancing of dominant key-value pairs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;

use indexmap::IndexSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{AlignedSample, SampleStatus};

/// Curated key list shipped with the crate, one key per line.
pub const BUILTIN_WHITELIST: &str = include_str!("../data/selected_keys.txt");

/// Aggregate statistics for one key across a corpus of observations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyStats {
    pub occurrences: u64,
    pub distinct_values: u64,
    /// True when no observed value contains an alphabetic character.
    pub all_values_character_free: bool,
}

/// Collect per-key stats from (key, value) observations. Order-independent.
pub fn collect_key_stats<I, K, V>(observations: I) -> BTreeMap<String, KeyStats>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut values: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for (k, v) in observations {
        let k = k.as_ref();
        *counts.entry(k.to_string()).or_default() += 1;
        values
            .entry(k.to_string())
            .or_default()
            .insert(v.as_ref().to_string());
    }
    counts
        .into_iter()
        .map(|(key, occurrences)| {
            let vals = &values[&key];
            let stats = KeyStats {
                occurrences,
                distinct_values: vals.len() as u64,
                all_values_character_free: vals
                    .iter()
                    .all(|v| !v.chars().any(|c| c.is_alphabetic())),
            };
            (key, stats)
        })
        .collect()
}

/// The three automatic key-rejection rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterRule {
    /// Key name contains "name" or "addr".
    NameOrAddr,
    /// Every observed value is free of alphabetic characters.
    CharacterFreeValues,
    /// Fewer than three distinct observed values.
    LowValueVariety,
}

impl fmt::Display for FilterRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FilterRule::NameOrAddr => "name-or-addr",
            FilterRule::CharacterFreeValues => "character-free-values",
            FilterRule::LowValueVariety => "low-value-variety",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyFilterReport {
    pub kept: Vec<String>,
    pub rejected: Vec<(String, Vec<FilterRule>)>,
}

/// Apply the automatic rules to a corpus of (key, value) observations.
/// A key is rejected iff any rule fires; every firing rule is attributed.
pub fn auto_filter_keys<I, K, V>(observations: I) -> KeyFilterReport
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let stats = collect_key_stats(observations);
    let mut report = KeyFilterReport {
        kept: Vec::new(),
        rejected: Vec::new(),
    };
    for (key, s) in stats {
        let mut rules = Vec::new();
        if key.contains("name") || key.contains("addr") {
            rules.push(FilterRule::NameOrAddr);
        }
        if s.all_values_character_free {
            rules.push(FilterRule::CharacterFreeValues);
        }
        if s.distinct_values < 3 {
            rules.push(FilterRule::LowValueVariety);
        }
        if rules.is_empty() {
            report.kept.push(key);
        } else {
            report.rejected.push((key, rules));
        }
    }
    report
}

#[derive(Debug)]
pub enum WhitelistError {
    Empty,
    ForbiddenKey(String),
    Io(io::Error),
}

impl fmt::Display for WhitelistError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WhitelistError::Empty => write!(f, "whitelist contains no keys"),
            WhitelistError::ForbiddenKey(k) => {
                write!(f, "whitelist key {k:?} contains \"name\" or \"addr\"")
            }
            WhitelistError::Io(e) => write!(f, "cannot read whitelist: {e}"),
        }
    }
}

impl std::error::Error for WhitelistError {}

impl From<io::Error> for WhitelistError {
    fn from(e: io::Error) -> Self {
        WhitelistError::Io(e)
    }
}

/// Ordered set of retained keys, loaded from a one-key-per-line file.
/// Lines starting with '#' are comments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyWhitelist {
    keys: IndexSet<String>,
}

impl KeyWhitelist {
    pub fn parse(text: &str) -> Result<Self, WhitelistError> {
        let mut keys = IndexSet::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            keys.insert(line.to_string());
        }
        if keys.is_empty() {
            return Err(WhitelistError::Empty);
        }
        for k in &keys {
            if k.contains("name") || k.contains("addr") {
                return Err(WhitelistError::ForbiddenKey(k.clone()));
            }
        }
        Ok(KeyWhitelist { keys })
    }

    pub fn from_reader<R: BufRead>(mut reader: R) -> Result<Self, WhitelistError> {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;
        KeyWhitelist::parse(&text)
    }

    pub fn from_file(path: &Path) -> Result<Self, WhitelistError> {
        KeyWhitelist::parse(&std::fs::read_to_string(path)?)
    }

    /// The curated list shipped with the crate.
    pub fn builtin() -> Self {
        KeyWhitelist::parse(BUILTIN_WHITELIST).expect("builtin whitelist is valid")
    }

    pub fn contains(&self, key: &str) -> bool {
        self.keys.contains(key)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.keys.iter().map(|s| s.as_str())
    }
}

/// Remove tags whose key is not whitelisted, drop features left without
/// tags, and stamp samples left without tagged features. Idempotent.
pub fn apply_whitelist(sample: &AlignedSample, wl: &KeyWhitelist) -> AlignedSample {
    let mut pruned = sample.clone();
    pruned.associated.retain_mut(|feature| {
        feature.tags.retain(|k, _| wl.contains(k));
        !feature.tags.is_empty()
    });
    if pruned.associated.is_empty() {
        pruned.status = SampleStatus::FilteredOut("no-semantic-tags".to_string());
    }
    pruned
}

/// Unique (key, value) pairs of one image; multiplicity within the image is
/// ignored.
pub fn dedup_pairs_per_image(sample: &AlignedSample) -> BTreeSet<(String, String)> {
    sample
        .associated
        .iter()
        .flat_map(|f| f.tags.iter().map(|(k, v)| (k.clone(), v.clone())))
        .collect()
}

/// Image-level occurrence count per (key, value) pair across a dataset.
pub type PairCountTable = BTreeMap<(String, String), u64>;

pub fn build_pair_counts(images: &[(i64, BTreeSet<(String, String)>)]) -> PairCountTable {
    let mut table = PairCountTable::new();
    for (_, pairs) in images {
        for pair in pairs {
            *table.entry(pair.clone()).or_default() += 1;
        }
    }
    table
}

#[derive(Debug)]
pub enum BalanceError {
    ThresholdZero,
}

impl fmt::Display for BalanceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BalanceError::ThresholdZero => write!(f, "balance threshold must be positive"),
        }
    }
}

impl std::error::Error for BalanceError {}

/// Per-image decision trail of one balancing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceAuditEntry {
    pub image_id: i64,
    pub phase1_removed: bool,
    /// Re-admission probability and drawn value, for phase-1 removals.
    pub phase2: Option<Phase2Draw>,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase2Draw {
    pub probability: f64,
    pub draw: f64,
    pub admitted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceOutcome {
    /// Retained image ids, ascending.
    pub retained: Vec<i64>,
    /// One entry per input image, ascending id.
    pub audit: Vec<BalanceAuditEntry>,
}

/// Two-phase semantic balancing.
///
/// Phase 1 removes every image whose pairs all have global count above `t`.
/// Phase 2 re-admits each removed image independently with probability
/// `min(1, t / max_pair_count)`, drawn from a generator seeded with
/// `seed ^ image_id` so draws are order-independent.
pub fn balance(
    images: &[(i64, BTreeSet<(String, String)>)],
    t: u64,
    seed: u64,
) -> Result<BalanceOutcome, BalanceError> {
    if t == 0 {
        return Err(BalanceError::ThresholdZero);
    }
    let counts = build_pair_counts(images);

    let mut sorted: Vec<&(i64, BTreeSet<(String, String)>)> = images.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);

    let mut outcome = BalanceOutcome {
        retained: Vec::new(),
        audit: Vec::new(),
    };
    for (id, pairs) in sorted {
        let has_rare_pair = pairs.iter().any(|p| counts[p] <= t);
        if has_rare_pair {
            outcome.retained.push(*id);
            outcome.audit.push(BalanceAuditEntry {
                image_id: *id,
                phase1_removed: false,
                phase2: None,
                retained: true,
            });
            continue;
        }
        // Phase 1 removal; the image has no pair at or below the threshold.
        // An image without pairs never re-admits (probability 0).
        let max_count = pairs.iter().map(|p| counts[p]).max().unwrap_or(u64::MAX);
        let probability = (t as f64 / max_count as f64).min(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (*id as u64));
        let draw: f64 = rng.gen_range(0.0..1.0);
        let admitted = draw < probability;
        if admitted {
            outcome.retained.push(*id);
        }
        outcome.audit.push(BalanceAuditEntry {
            image_id: *id,
            phase1_removed: true,
            phase2: Some(Phase2Draw {
                probability,
                draw,
                admitted,
            }),
            retained: admitted,
        });
    }
    Ok(outcome)
}

/// One line per image: id, phase-1 decision, phase-2 draw, final status.
pub fn write_audit_log<W: Write>(mut w: W, audit: &[BalanceAuditEntry]) -> io::Result<()> {
    for e in audit {
        let (p, draw) = match &e.phase2 {
            Some(d) => (format!("{:.6}", d.probability), format!("{:.6}", d.draw)),
            None => ("-".to_string(), "-".to_string()),
        };
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            e.image_id,
            if e.phase1_removed { "removed" } else { "kept" },
            p,
            draw,
            if e.retained { "retained" } else { "dropped" }
        )?;
    }
    Ok(())
}
