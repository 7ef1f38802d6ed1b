//! Entity-level annotations of generated texts.
//!
//! The automatic detector decides mentioned vs omitted by approximate string
//! matching of normalized entity surfaces against token windows of the text.
//! Distortions only come from manual annotation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::hash::Hash;

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{Decoding, GenerationRecord, RecordKey};
use crate::stats;

pub const DEFAULT_THRESHOLD: f64 = 0.85;
const NUMERIC_REL_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum AnnotateError {
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("label lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("label lists are empty")]
    Empty,
    #[error("record {record}: entity `{surface}` has more than one {origin} status")]
    DuplicateStatus { record: String, surface: String, origin: Source },
    #[error("record {record}: automatic annotation cannot mark `{surface}` as distorted")]
    AutoDistortion { record: String, surface: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Status {
    /// mentioned
    M,
    /// omitted
    O,
    /// distorted
    D,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::M => "M",
            Status::O => "O",
            Status::D => "D",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Auto,
    #[default]
    Manual,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Auto => "auto",
            Source::Manual => "manual",
        })
    }
}

impl std::str::FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(Source::Auto),
            "manual" => Ok(Source::Manual),
            _ => Err(format!("unknown annotation source `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityStatus {
    pub surface: String,
    pub status: Status,
    pub source: Source,
}

/// One line of the annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub graph_id: String,
    pub permutation_index: u32,
    pub decoding: Decoding,
    pub entities: Vec<EntityStatus>,
}

impl AnnotationRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            graph_id: self.graph_id.clone(),
            permutation_index: self.permutation_index,
        }
    }

    pub fn validate(&self) -> Result<(), AnnotateError> {
        let mut seen = HashSet::new();
        for e in &self.entities {
            if e.source == Source::Auto && e.status == Status::D {
                return Err(AnnotateError::AutoDistortion {
                    record: self.key().to_string(),
                    surface: e.surface.clone(),
                });
            }
            if !seen.insert((e.surface.as_str(), e.source)) {
                return Err(AnnotateError::DuplicateStatus {
                    record: self.key().to_string(),
                    surface: e.surface.clone(),
                    origin: e.source,
                });
            }
        }
        Ok(())
    }

    /// Statuses from one source, in record order.
    pub fn statuses(&self, source: Source) -> impl Iterator<Item = (&str, Status)> {
        self.entities
            .iter()
            .filter(move |e| e.source == source)
            .map(|e| (e.surface.as_str(), e.status))
    }

    pub fn has_source(&self, source: Source) -> bool {
        self.entities.iter().any(|e| e.source == source)
    }

    pub fn surfaces_with(&self, source: Source, status: Status) -> HashSet<&str> {
        self.statuses(source)
            .filter(|(_, s)| *s == status)
            .map(|(e, _)| e)
            .collect()
    }
}

fn strip_parentheticals(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut depth = 0usize;
    for c in s.chars() {
        match c {
            '(' => depth += 1,
            ')' if depth > 0 => depth -= 1,
            _ if depth == 0 => out.push(c),
            _ => {}
        }
    }
    out
}

/// Lowercased, accent-free tokens. Separators inside numbers (`2,691.0`,
/// `1703-05-27`) are kept.
fn tokens(s: &str) -> Vec<String> {
    let folded: Vec<char> = s
        .replace('_', " ")
        .nfd()
        .filter(|c| !is_combining_mark(*c))
        .flat_map(char::to_lowercase)
        .collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    for (i, &c) in folded.iter().enumerate() {
        let numeric_joint = matches!(c, '.' | ',' | '-')
            && i > 0
            && folded[i - 1].is_ascii_digit()
            && folded.get(i + 1).is_some_and(char::is_ascii_digit);
        if c.is_alphanumeric() || numeric_joint {
            cur.push(c);
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Entity normal form: underscores as spaces, parenthetical disambiguators
/// removed, accents stripped, case-folded.
pub fn normalize_entity(surface: &str) -> Vec<String> {
    let stripped = tokens(&strip_parentheticals(surface));
    if stripped.is_empty() {
        tokens(surface)
    } else {
        stripped
    }
}

pub fn levenshtein(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 − lev(a, b) / max(|a|, |b|)`, in characters.
pub fn similarity(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(&a, &b) as f64 / longest as f64
}

pub(crate) fn parse_number(token: &str) -> Option<f64> {
    let cleaned = token.replace(',', "");
    if !cleaned.chars().any(|c| c.is_ascii_digit()) {
        return None;
    }
    cleaned.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub(crate) fn parse_iso_date(token: &str) -> Option<NaiveDate> {
    let parts: Vec<&str> = token.split('-').collect();
    match parts.as_slice() {
        [y, m, d] if y.len() == 4 && m.len() == 2 && d.len() == 2 => {
            NaiveDate::from_ymd_opt(y.parse().ok()?, m.parse().ok()?, d.parse().ok()?)
        }
        _ => None,
    }
}

fn month_number(token: &str) -> Option<u32> {
    const MONTHS: [&str; 12] = [
        "january", "february", "march", "april", "may", "june", "july", "august", "september",
        "october", "november", "december",
    ];
    MONTHS
        .iter()
        .position(|m| *m == token || (token.len() >= 3 && m.starts_with(token) && token != "ma"))
        .map(|i| i as u32 + 1)
}

fn day_number(token: &str) -> Option<u32> {
    let digits = token
        .strip_suffix("st")
        .or_else(|| token.strip_suffix("nd"))
        .or_else(|| token.strip_suffix("rd"))
        .or_else(|| token.strip_suffix("th"))
        .unwrap_or(token);
    digits.parse().ok().filter(|d| (1..=31).contains(d))
}

/// Dates written in the text, as ISO tokens or `Month D Y` / `D Month Y`.
pub(crate) fn dates_in(text_tokens: &[String]) -> Vec<NaiveDate> {
    let mut out: Vec<NaiveDate> = text_tokens.iter().filter_map(|t| parse_iso_date(t)).collect();
    for w in text_tokens.windows(3) {
        let Ok(year) = w[2].parse::<i32>() else { continue };
        let md = match (month_number(&w[0]), day_number(&w[1])) {
            (Some(m), Some(d)) => Some((m, d)),
            _ => match (day_number(&w[0]), month_number(&w[1])) {
                (Some(d), Some(m)) => Some((m, d)),
                _ => None,
            },
        };
        if let Some(date) = md.and_then(|(m, d)| NaiveDate::from_ymd_opt(year, m, d)) {
            out.push(date);
        }
    }
    out
}

fn numbers_close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= NUMERIC_REL_TOL * a.abs().max(b.abs())
}

/// Approximate-match detector for entity mentions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MentionDetector {
    pub threshold: f64,
}

impl Default for MentionDetector {
    fn default() -> Self {
        MentionDetector { threshold: DEFAULT_THRESHOLD }
    }
}

impl MentionDetector {
    pub fn new(threshold: f64) -> Result<Self, AnnotateError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(AnnotateError::Threshold(threshold));
        }
        Ok(MentionDetector { threshold })
    }

    /// Best similarity between the entity and any token window of length
    /// `k − 1 ..= k + 1`, where `k` is the entity's token count.
    fn best_window_similarity(&self, entity: &[String], text: &[String]) -> f64 {
        let target = entity.join(" ");
        let target_len = target.chars().count();
        let k = entity.len();
        let mut best: f64 = 0.0;
        for width in k.saturating_sub(1).max(1)..=k + 1 {
            for w in text.windows(width) {
                let candidate = w.join(" ");
                let cand_len = candidate.chars().count();
                let longest = cand_len.max(target_len);
                // length difference alone bounds the similarity from above
                let bound = 1.0 - cand_len.abs_diff(target_len) as f64 / longest as f64;
                if bound <= best || bound < self.threshold {
                    continue;
                }
                best = best.max(similarity(&target, &candidate));
                if best >= 1.0 {
                    return best;
                }
            }
        }
        best
    }

    fn is_mentioned(&self, entity: &str, text: &[String]) -> bool {
        let norm = normalize_entity(entity);
        if norm.is_empty() {
            return false;
        }
        if let [single] = norm.as_slice() {
            if let Some(date) = parse_iso_date(single) {
                let found = dates_in(text).iter().any(|d| {
                    d.year() == date.year() && d.month() == date.month() && d.day() == date.day()
                });
                if found {
                    return true;
                }
            } else if let Some(value) = parse_number(single) {
                if text.iter().filter_map(|t| parse_number(t)).any(|v| numbers_close(v, value)) {
                    return true;
                }
            }
        }
        self.best_window_similarity(&norm, text) >= self.threshold
    }

    /// Mentioned (`M`) or omitted (`O`) for each entity, in input order.
    pub fn detect(&self, text: &str, entities: &[String]) -> Vec<(String, Status)> {
        let text_tokens = tokens(text);
        entities
            .iter()
            .map(|e| {
                let status = if !text_tokens.is_empty() && self.is_mentioned(e, &text_tokens) {
                    Status::M
                } else {
                    Status::O
                };
                (e.clone(), status)
            })
            .collect()
    }

    /// Automatic annotation of every record of a corpus.
    pub fn annotate_corpus(&self, records: &[GenerationRecord]) -> Vec<AnnotationRecord> {
        records
            .par_iter()
            .map(|r| AnnotationRecord {
                graph_id: r.graph_id.clone(),
                permutation_index: r.permutation_index,
                decoding: r.decoding,
                entities: self
                    .detect(&r.text, &r.graph().entities())
                    .into_iter()
                    .map(|(surface, status)| EntityStatus { surface, status, source: Source::Auto })
                    .collect(),
            })
            .collect()
    }
}

pub fn detect_mentions(
    text: &str,
    entities: &[String],
    threshold: f64,
) -> Result<Vec<(String, Status)>, AnnotateError> {
    Ok(MentionDetector::new(threshold)?.detect(text, entities))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

/// Set-overlap precision/recall/F1 of `auto` against `manual`; empty
/// denominators give 0.
pub fn annotation_prf<T: Eq + Hash>(auto: &HashSet<T>, manual: &HashSet<T>) -> Prf {
    let tp = auto.intersection(manual).count();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, auto.len());
    let recall = ratio(tp, manual.len());
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1, true_positives: tp, predicted: auto.len(), gold: manual.len() }
}

/// Automatic omissions against manual omissions, over records that carry
/// both sources. Manual distortions are not counted as omissions.
pub fn corpus_prf(records: &[AnnotationRecord]) -> Prf {
    let mut auto = HashSet::new();
    let mut manual = HashSet::new();
    for r in records.iter().filter(|r| r.has_source(Source::Auto) && r.has_source(Source::Manual)) {
        for (surface, status) in r.statuses(Source::Auto) {
            if status == Status::O {
                auto.insert((r.key(), r.decoding, surface.to_string()));
            }
        }
        for (surface, status) in r.statuses(Source::Manual) {
            if status == Status::O {
                manual.insert((r.key(), r.decoding, surface.to_string()));
            }
        }
    }
    annotation_prf(&auto, &manual)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub kappa: f64,
    pub observed_agreement: f64,
    pub expected_agreement: f64,
    /// Both annotators used one identical label throughout (p_e = 1).
    pub degenerate: bool,
}

/// Cohen's kappa over the three-way status labels.
pub fn cohens_kappa(a: &[Status], b: &[Status]) -> Result<Kappa, AnnotateError> {
    if a.len() != b.len() {
        return Err(AnnotateError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(AnnotateError::Empty);
    }
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let share = |labels: &[Status], s: Status| labels.iter().filter(|l| **l == s).count() as f64 / n;
    let expected: f64 = [Status::M, Status::O, Status::D]
        .iter()
        .map(|s| share(a, *s) * share(b, *s))
        .sum();
    if (1.0 - expected).abs() < 1e-15 {
        return Ok(Kappa { kappa: 1.0, observed_agreement: agree, expected_agreement: expected, degenerate: true });
    }
    Ok(Kappa {
        kappa: (agree - expected) / (1.0 - expected),
        observed_agreement: agree,
        expected_agreement: expected,
        degenerate: false,
    })
}

/// Pairs up the manual statuses two annotators gave to the same
/// (record, entity) and computes kappa over them.
pub fn kappa_between(
    first: &[AnnotationRecord],
    second: &[AnnotationRecord],
) -> Result<(Kappa, usize), AnnotateError> {
    let index: HashMap<(RecordKey, Decoding, &str), Status> = second
        .iter()
        .flat_map(|r| {
            r.statuses(Source::Manual)
                .map(move |(s, st)| ((r.key(), r.decoding, s), st))
        })
        .collect();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for r in first {
        for (surface, status) in r.statuses(Source::Manual) {
            if let Some(other) = index.get(&(r.key(), r.decoding, surface)) {
                a.push(status);
                b.push(*other);
            }
        }
    }
    Ok((cohens_kappa(&a, &b)?, a.len()))
}

pub fn iou<T: Eq + Hash>(a: &HashSet<T>, b: &HashSet<T>) -> Option<f64> {
    let union = a.union(b).count();
    if union == 0 {
        return None;
    }
    Some(a.intersection(b).count() as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextIou {
    pub key: RecordKey,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouPairReport {
    pub first: Decoding,
    pub second: Decoding,
    pub per_text: Vec<TextIou>,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    /// Texts where neither strategy had an entity with the selected status.
    pub excluded_empty: usize,
    /// Texts present under only one of the two strategies.
    pub missing: usize,
}

/// Per-text IoU of the entity sets carrying `status` between pairs of
/// decoding strategies. Texts with both sets empty are left out of the
/// mean and median.
pub fn decoding_iou(
    annotations: &[AnnotationRecord],
    source: Source,
    status: Status,
    pairs: &[(Decoding, Decoding)],
) -> Vec<IouPairReport> {
    let mut by_strategy: HashMap<Decoding, BTreeMap<RecordKey, HashSet<&str>>> = HashMap::new();
    for r in annotations.iter().filter(|r| r.has_source(source)) {
        by_strategy
            .entry(r.decoding)
            .or_default()
            .insert(r.key(), r.surfaces_with(source, status));
    }
    let empty = BTreeMap::new();
    pairs
        .iter()
        .map(|&(first, second)| {
            let a = by_strategy.get(&first).unwrap_or(&empty);
            let b = by_strategy.get(&second).unwrap_or(&empty);
            let mut per_text = Vec::new();
            let mut excluded_empty = 0;
            let mut missing = 0;
            for (key, set_a) in a {
                match b.get(key) {
                    None => missing += 1,
                    Some(set_b) => match iou(set_a, set_b) {
                        Some(v) => per_text.push(TextIou { key: key.clone(), iou: v }),
                        None => excluded_empty += 1,
                    },
                }
            }
            missing += b.keys().filter(|k| !a.contains_key(*k)).count();
            if missing > 0 {
                log::warn!("{first} vs {second}: {missing} texts present under only one strategy");
            }
            let values: Vec<f64> = per_text.iter().map(|t| t.iou).collect();
            IouPairReport {
                first,
                second,
                mean: (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64),
                median: stats::median(&values),
                per_text,
                excluded_empty,
                missing,
            }
        })
        .collect()
}
