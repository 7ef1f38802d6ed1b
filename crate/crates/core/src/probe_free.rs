//! Parameter-free probe: does replacing an omitted entity with `<unk>` move the
//! graph representation less than replacing a mentioned one?

use std::collections::HashMap;
use std::fmt::Write as _;

use log::warn;
use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{AnnotationRecord, Source, Status};
use crate::corpus::{GenerationRecord, RecordKey, Subset};
use crate::embed_store::{span_pool, BundleKey, BundleStore, EmbedError, PooledGraph, Variant};
use crate::stats::{chi2_gof, StatsError, TestResult};

pub const ALPHA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ProbeFreeError {
    #[error("zero-norm mean vector in {0}")]
    ZeroNorm(String),
    #[error("cannot compare graphs: {0}")]
    Incompatible(String),
    #[error("{record}: no bundle for {variant}")]
    MissingBundle { record: String, variant: String },
    #[error("{record}: no mentioned entities")]
    NoMentions { record: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Dimension,
    Token,
}

impl std::str::FromStr for Pooling {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dimension" | "dim" => Ok(Pooling::Dimension),
            "token" | "tok" => Ok(Pooling::Token),
            other => Err(format!("unknown pooling `{other}` (dimension|token)")),
        }
    }
}

/// Which entities play the role of o_j.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// manual O
    Omitted,
    /// manual D
    Distorted,
    /// auto O, which also absorbs any undetected distortion
    Auto,
}

impl Target {
    pub fn source(self) -> Source {
        match self {
            Target::Auto => Source::Auto,
            _ => Source::Manual,
        }
    }

    pub fn status(self) -> Status {
        match self {
            Target::Distorted => Status::D,
            _ => Status::O,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Target::Omitted => "O",
            Target::Distorted => "D",
            Target::Auto => "O∪(undetected D)",
        }
    }
}

impl std::str::FromStr for Target {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "o" | "omitted" => Ok(Target::Omitted),
            "d" | "distorted" => Ok(Target::Distorted),
            "auto" => Ok(Target::Auto),
            other => Err(format!("unknown target `{other}` (omitted|distorted|auto)")),
        }
    }
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>, what: &str) -> Result<f64, ProbeFreeError> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(ProbeFreeError::ZeroNorm(what.to_string()));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn graph_similarity(a: &PooledGraph, b: &PooledGraph, pooling: Pooling) -> Result<f64, ProbeFreeError> {
    match pooling {
        Pooling::Dimension => {
            if a.dim_mean.len() != b.dim_mean.len() {
                return Err(ProbeFreeError::Incompatible(format!(
                    "embedding widths {} and {}",
                    a.dim_mean.len(),
                    b.dim_mean.len()
                )));
            }
            cosine(&a.dim_mean, &b.dim_mean, "dimension mean")
        }
        Pooling::Token => {
            if !a.spans.same_structure(&b.spans) {
                return Err(ProbeFreeError::Incompatible("span structures differ".into()));
            }
            cosine(&a.tok_mean, &b.tok_mean, "token mean")
        }
    }
}

/// Arithmetic mean of the similarities between `base` and each variant.
pub fn mention_avg_similarity(
    base: &PooledGraph,
    variants: &[&PooledGraph],
    pooling: Pooling,
) -> Result<f64, ProbeFreeError> {
    if variants.is_empty() {
        return Err(ProbeFreeError::NoMentions { record: "graph".into() });
    }
    let mut sum = 0.0;
    for v in variants {
        sum += graph_similarity(base, v, pooling)?;
    }
    Ok(sum / variants.len() as f64)
}

/// Source of pooled bundles for the probes.
pub trait PooledSource: Sync {
    fn pooled(&self, key: &BundleKey) -> Result<Option<PooledGraph>, EmbedError>;
    fn keys(&self) -> Vec<BundleKey>;
}

impl PooledSource for HashMap<BundleKey, PooledGraph> {
    fn pooled(&self, key: &BundleKey) -> Result<Option<PooledGraph>, EmbedError> {
        Ok(self.get(key).cloned())
    }

    fn keys(&self) -> Vec<BundleKey> {
        HashMap::keys(self).cloned().collect()
    }
}

impl PooledSource for BundleStore {
    fn pooled(&self, key: &BundleKey) -> Result<Option<PooledGraph>, EmbedError> {
        match self.get(key) {
            None => Ok(None),
            Some(b) => span_pool(&b?).map(Some),
        }
    }

    fn keys(&self) -> Vec<BundleKey> {
        BundleStore::keys(self).cloned().collect()
    }
}

pub(crate) fn fetch(
    source: &dyn PooledSource,
    record: &RecordKey,
    variant: Variant,
    encoder_tag: &str,
) -> Result<PooledGraph, ProbeFreeError> {
    let key = BundleKey {
        graph_id: record.graph_id.clone(),
        permutation_index: record.permutation_index,
        variant,
        encoder_tag: encoder_tag.to_string(),
    };
    source.pooled(&key)?.ok_or_else(|| ProbeFreeError::MissingBundle {
        record: record.to_string(),
        variant: match &key.variant {
            Variant::Base => "the base graph".into(),
            Variant::Unk(e) => format!("<unk> variant of `{e}`"),
            Variant::Standalone(e) => format!("standalone `{e}`"),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCase {
    pub graph_id: String,
    pub permutation_index: u32,
    pub subset: Subset,
    pub pooling: Pooling,
    /// (o_j, sim(g, g\o_j))
    pub targets: Vec<(String, f64)>,
    /// (m_k, sim(g, g\m_k))
    pub mentioned: Vec<(String, f64)>,
    /// sim(g, g\M)
    pub mention_avg: f64,
    pub verdicts: Vec<bool>,
}

impl SimilarityCase {
    /// Builds a case from precomputed similarities.
    pub fn from_similarities(
        key: &RecordKey,
        subset: Subset,
        pooling: Pooling,
        targets: Vec<(String, f64)>,
        mentioned: Vec<(String, f64)>,
    ) -> Option<Self> {
        if targets.is_empty() || mentioned.is_empty() {
            return None;
        }
        let mention_avg = mentioned.iter().map(|m| m.1).sum::<f64>() / mentioned.len() as f64;
        let verdicts = targets.iter().map(|t| t.1 > mention_avg).collect();
        Some(SimilarityCase {
            graph_id: key.graph_id.clone(),
            permutation_index: key.permutation_index,
            subset,
            pooling,
            targets,
            mentioned,
            mention_avg,
            verdicts,
        })
    }
}

fn build_case(
    record: &GenerationRecord,
    ann: &AnnotationRecord,
    target: Target,
    encoder_tag: &str,
    source: &dyn PooledSource,
    pooling: Pooling,
) -> Result<Option<SimilarityCase>, ProbeFreeError> {
    let key = record.key();
    let entities: Vec<(&str, Status)> = ann.statuses(target.source()).collect();
    let targets: Vec<&str> = entities.iter().filter(|e| e.1 == target.status()).map(|e| e.0).collect();
    let mentioned: Vec<&str> = entities.iter().filter(|e| e.1 == Status::M).map(|e| e.0).collect();
    if targets.is_empty() || mentioned.is_empty() {
        return Ok(None);
    }
    let base = fetch(source, &key, Variant::Base, encoder_tag)?;
    let sims = |names: &[&str]| -> Result<Vec<(String, f64)>, ProbeFreeError> {
        names
            .iter()
            .map(|e| {
                let v = fetch(source, &key, Variant::Unk(e.to_string()), encoder_tag)?;
                Ok((e.to_string(), graph_similarity(&base, &v, pooling)?))
            })
            .collect()
    };
    Ok(SimilarityCase::from_similarities(&key, record.subset, pooling, sims(&targets)?, sims(&mentioned)?))
}

/// One case per annotated text having at least one target entity and one
/// mention. Annotations whose record is unknown are skipped.
pub fn build_cases(
    records: &[GenerationRecord],
    annotations: &[AnnotationRecord],
    target: Target,
    encoder_tag: &str,
    source: &dyn PooledSource,
    pooling: Pooling,
) -> Result<Vec<SimilarityCase>, ProbeFreeError> {
    let by_key: HashMap<RecordKey, &GenerationRecord> = records.iter().map(|r| (r.key(), r)).collect();
    let results: Vec<Result<Option<SimilarityCase>, ProbeFreeError>> = annotations
        .par_iter()
        .filter_map(|a| by_key.get(&a.key()).map(|r| (r, a)))
        .map(|(r, a)| build_case(r, a, target, encoder_tag, source, pooling))
        .collect();
    let mut cases = Vec::new();
    for r in results {
        if let Some(c) = r? {
            cases.push(c);
        }
    }
    Ok(cases)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionRow {
    /// subset name or "all"
    pub subset: String,
    pub n_cases: usize,
    pub n_verdicts: usize,
    pub proportion: f64,
    pub test: TestResult,
    pub significant: bool,
    /// significant and above one half
    pub distinguishes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionReport {
    pub target: String,
    pub pooling: Pooling,
    pub rows: Vec<ProportionRow>,
}

fn proportion_row(label: &str, cases: &[&SimilarityCase]) -> Result<ProportionRow, ProbeFreeError> {
    let n_true = cases.iter().flat_map(|c| &c.verdicts).filter(|v| **v).count() as u64;
    let n_verdicts = cases.iter().map(|c| c.verdicts.len()).sum::<usize>();
    let test = chi2_gof(n_true, n_verdicts as u64 - n_true)?;
    Ok(ProportionRow {
        subset: label.to_string(),
        n_cases: cases.len(),
        n_verdicts,
        proportion: n_true as f64 / n_verdicts as f64,
        test,
        significant: false,
        distinguishes: false,
    })
}

/// Per-subset rows followed by an "all" row. Empty subsets are skipped;
/// Bonferroni runs over the rows actually tested.
pub fn proportion_probe(
    cases: &[SimilarityCase],
    subsets: &[Subset],
    target: Target,
) -> Result<ProportionReport, ProbeFreeError> {
    let pooling = cases.first().map_or(Pooling::Dimension, |c| c.pooling);
    let mut rows = Vec::new();
    for s in subsets {
        let sel: Vec<&SimilarityCase> = cases.iter().filter(|c| c.subset == *s).collect();
        if sel.is_empty() {
            warn!("subset {s}: no cases, skipped");
            continue;
        }
        rows.push(proportion_row(s.as_str(), &sel)?);
    }
    let all: Vec<&SimilarityCase> = cases.iter().filter(|c| subsets.contains(&c.subset)).collect();
    if !all.is_empty() {
        rows.push(proportion_row("all", &all)?);
    }
    let m = rows.len();
    for r in &mut rows {
        r.test = r.test.with_bonferroni(m);
        r.significant = r.test.is_significant(ALPHA);
        r.distinguishes = r.significant && r.proportion > 0.5;
    }
    Ok(ProportionReport { target: target.label().to_string(), pooling, rows })
}

impl ProportionReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("subset\tn_cases\tproportion\tchi2\tp\tp_bonferroni\tsignificant\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.4}\t{:.4}\t{:.6e}\t{:.6e}\t{}",
                r.subset,
                r.n_cases,
                r.proportion,
                r.test.statistic,
                r.test.p_value,
                r.test.p_adjusted.unwrap_or(r.test.p_value),
                r.significant
            );
        }
        out
    }
}

/// Share of cases whose verdicts agree under both poolings, matched by
/// record and target entity.
pub fn verdict_agreement(a: &[SimilarityCase], b: &[SimilarityCase]) -> Option<f64> {
    let index: HashMap<(&str, u32, &str), bool> = b
        .iter()
        .flat_map(|c| {
            c.targets
                .iter()
                .zip(&c.verdicts)
                .map(move |(t, v)| ((c.graph_id.as_str(), c.permutation_index, t.0.as_str()), *v))
        })
        .collect();
    let mut total = 0usize;
    let mut same = 0usize;
    for c in a {
        for (t, v) in c.targets.iter().zip(&c.verdicts) {
            if let Some(w) = index.get(&(c.graph_id.as_str(), c.permutation_index, t.0.as_str())) {
                total += 1;
                same += usize::from(v == w);
            }
        }
    }
    (total > 0).then(|| same as f64 / total as f64)
}


#[cfg(test)]
mod synth_tests {
    use super::*;
    use crate::embed_store::{synth_corpus, SynthCorpusConfig};

    fn run(alpha: f64, pooling: Pooling) -> Vec<SimilarityCase> {
        let corpus =
            synth_corpus(&SynthCorpusConfig { n_graphs: 1000, dim: 64, alpha, max_triples: 4, seed: 7 }).unwrap();
        let tag = corpus.graphs[0].base.encoder_tag.clone();
        build_cases(&corpus.records, &corpus.annotations, Target::Omitted, &tag, &corpus.pooled().unwrap(), pooling)
            .unwrap()
    }

    fn all_proportion(cases: &[SimilarityCase]) -> f64 {
        proportion_probe(cases, &Subset::ALL, Target::Omitted).unwrap().rows.last().unwrap().proportion
    }

    #[test]
    fn proportion_falls_with_alpha() {
        let props: Vec<f64> = [0.0, 0.2, 0.5, 1.0].iter().map(|a| all_proportion(&run(*a, Pooling::Dimension))).collect();
        eprintln!("{props:?}");
        assert!(props.windows(2).all(|w| w[0] >= w[1]));
        assert!((0.45..=0.55).contains(&props[3]));
    }

    #[test]
    fn poolings_agree_on_strong_signal() {
        for alpha in [0.0, 0.2] {
            let agree = verdict_agreement(&run(alpha, Pooling::Dimension), &run(alpha, Pooling::Token)).unwrap();
            eprintln!("{alpha} {agree}");
            assert!(agree >= 0.8);
        }
    }
}
