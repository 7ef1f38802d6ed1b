//! Logistic regression on hand-crafted tripleset, entity and dataset features.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::annotate::{dates_in, normalize_entity, parse_iso_date, parse_number, AnnotationRecord};
use crate::corpus::{GenerationRecord, RdfGraph, RecordKey, Subset};
use crate::probe_mlp::Flavor;
use crate::stats::{Confusion, StatsError};

pub const TOP_CATEGORIES: usize = 50;
pub const OTHER: &str = "other";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("entity `{entity}` is not in graph {graph}")]
    NotInGraph { graph: String, entity: String },
    #[error("class {0} absent from the training split")]
    MissingClass(u8),
    #[error("need at least one example of each class, got {0} rows")]
    TooFew(usize),
    #[error("feature matrix has {got} columns, expected {expected}")]
    Width { expected: usize, got: usize },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticRole {
    /// only ever a subject
    Agent,
    /// only ever an object
    Patient,
    Bridge,
}

impl SemanticRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SemanticRole::Agent => "agent",
            SemanticRole::Patient => "patient",
            SemanticRole::Bridge => "bridge",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub n_triples: u32,
    pub category: String,
    /// index of the first unit (subject, property, object, ...) holding the entity
    pub first_occurrence_position: u32,
    pub n_occurrences: u32,
    pub semantic_role: SemanticRole,
    pub dbpedia_type: String,
    pub n_chars: u32,
    pub is_date: bool,
    pub is_number: bool,
    pub shape_case: String,
    pub shape_vc: String,
    pub train_frequency: u64,
}

pub const FEATURE_NAMES: [&str; 12] = [
    "n_triples",
    "category",
    "first_occurrence_position",
    "n_occurrences",
    "semantic_role",
    "dbpedia_type",
    "n_chars",
    "is_date",
    "is_number",
    "shape_case",
    "shape_vc",
    "train_frequency",
];

const NUMERIC: [&str; 7] =
    ["n_triples", "first_occurrence_position", "n_occurrences", "n_chars", "is_date", "is_number", "train_frequency"];
const CATEGORICAL: [&str; 5] = ["category", "semantic_role", "dbpedia_type", "shape_case", "shape_vc"];

impl FeatureVector {
    fn numeric(&self) -> [f64; 7] {
        [
            f64::from(self.n_triples),
            f64::from(self.first_occurrence_position),
            f64::from(self.n_occurrences),
            f64::from(self.n_chars),
            f64::from(u8::from(self.is_date)),
            f64::from(u8::from(self.is_number)),
            self.train_frequency as f64,
        ]
    }

    fn categorical(&self) -> [&str; 5] {
        [&self.category, self.semantic_role.as_str(), &self.dbpedia_type, &self.shape_case, &self.shape_vc]
    }
}

/// Corpus-level inputs to feature extraction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// graphs of the WebNLG training subset mentioning each entity surface
    pub train_frequency: HashMap<String, u64>,
    pub dbpedia_types: HashMap<String, String>,
}

impl CorpusStats {
    pub fn from_records(records: &[GenerationRecord], dbpedia_types: HashMap<String, String>) -> Self {
        let mut seen: HashSet<(&str, String)> = HashSet::new();
        let mut train_frequency: HashMap<String, u64> = HashMap::new();
        for r in records.iter().filter(|r| r.subset == Subset::WebnlgTrain) {
            for e in r.graph().entities() {
                if seen.insert((r.graph_id.as_str(), e.clone())) {
                    *train_frequency.entry(e).or_default() += 1;
                }
            }
        }
        CorpusStats { train_frequency, dbpedia_types }
    }
}

fn run_length(chars: impl Iterator<Item = char>) -> String {
    let mut out = String::new();
    for c in chars {
        if !out.ends_with(c) {
            out.push(c);
        }
    }
    out
}

/// U/L/D/O per character, runs collapsed.
pub fn shape_case(surface: &str) -> String {
    run_length(surface.chars().map(|c| {
        if c.is_uppercase() {
            'U'
        } else if c.is_lowercase() {
            'L'
        } else if c.is_numeric() {
            'D'
        } else {
            'O'
        }
    }))
}

/// V/C per letter (accents stripped), O otherwise, runs collapsed.
pub fn shape_vc(surface: &str) -> String {
    let base: String = surface.nfd().filter(|c| !unicode_normalization::char::is_combining_mark(*c)).collect();
    run_length(base.chars().map(|c| {
        if !c.is_alphabetic() {
            'O'
        } else if "aeiouAEIOU".contains(c) {
            'V'
        } else {
            'C'
        }
    }))
}

fn clean_surface(surface: &str) -> String {
    surface.trim_matches('"').replace('_', " ")
}

pub fn extract_features(graph: &RdfGraph, entity: &str, stats: &CorpusStats) -> Result<FeatureVector, FeatureError> {
    let mut first = None;
    let (mut as_subject, mut as_object) = (0u32, 0u32);
    for (i, t) in graph.triples.iter().enumerate() {
        if t.subject == entity {
            first.get_or_insert(3 * i);
            as_subject += 1;
        }
        if t.object == entity {
            first.get_or_insert(3 * i + 2);
            as_object += 1;
        }
    }
    let Some(first) = first else {
        return Err(FeatureError::NotInGraph { graph: graph.graph_id.clone(), entity: entity.to_string() });
    };
    let semantic_role = match (as_subject > 0, as_object > 0) {
        (true, false) => SemanticRole::Agent,
        (false, true) => SemanticRole::Patient,
        _ => SemanticRole::Bridge,
    };
    let clean = clean_surface(entity);
    let is_date = parse_iso_date(clean.trim()).is_some() || !dates_in(&normalize_entity(entity)).is_empty();
    Ok(FeatureVector {
        n_triples: graph.triples.len() as u32,
        category: graph.category.clone(),
        first_occurrence_position: first as u32,
        n_occurrences: as_subject + as_object,
        semantic_role,
        dbpedia_type: stats.dbpedia_types.get(entity).cloned().unwrap_or_else(|| "unknown".into()),
        n_chars: clean.chars().count() as u32,
        is_date,
        is_number: !is_date && parse_number(clean.trim()).is_some(),
        shape_case: shape_case(&clean),
        shape_vc: shape_vc(&clean),
        train_frequency: stats.train_frequency.get(entity).copied().unwrap_or(0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub graph_id: String,
    pub permutation_index: u32,
    pub entity: String,
    pub features: FeatureVector,
    /// 0 omitted/distorted, 1 mentioned
    pub label: u8,
}

/// One row per annotated (text, entity) under the flavor's labelling.
pub fn feature_table(
    records: &[GenerationRecord],
    annotations: &[AnnotationRecord],
    flavor: Flavor,
    stats: &CorpusStats,
) -> Result<Vec<FeatureRow>, FeatureError> {
    let by_key: HashMap<RecordKey, &GenerationRecord> = records.iter().map(|r| (r.key(), r)).collect();
    let mut rows = Vec::new();
    for a in annotations {
        let Some(record) = by_key.get(&a.key()) else { continue };
        let graph = record.graph();
        for (surface, status) in a.statuses(flavor.source()) {
            rows.push(FeatureRow {
                graph_id: a.graph_id.clone(),
                permutation_index: a.permutation_index,
                entity: surface.to_string(),
                features: extract_features(&graph, surface, stats)?,
                label: flavor.label(status),
            });
        }
    }
    Ok(rows)
}

pub fn feature_tsv(rows: &[FeatureRow]) -> String {
    let mut out = format!("graph_id\tpermutation_index\tentity\t{}\tlabel\n", FEATURE_NAMES.join("\t"));
    for r in rows {
        let f = &r.features;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.graph_id,
            r.permutation_index,
            r.entity,
            f.n_triples,
            f.category,
            f.first_occurrence_position,
            f.n_occurrences,
            f.semantic_role.as_str(),
            f.dbpedia_type,
            f.n_chars,
            f.is_date,
            f.is_number,
            f.shape_case,
            f.shape_vc,
            f.train_frequency,
            r.label
        );
    }
    out
}

/// Column standardization fitted on training rows. Constant columns keep
/// scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean: Vec<f64> = x.axis_iter(Axis(1)).map(|c| c.sum() / n).collect();
        let std = x
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(c, m)| {
                let s = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &mut Array2<f64>) {
        for (j, mut c) in x.axis_iter_mut(Axis(1)).enumerate() {
            c.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
    }
}

/// One-hot vocabularies and numeric scaling, fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    pub vocab: Vec<Vec<String>>,
    pub scale: Standardizer,
}

impl FeatureEncoder {
    pub fn fit(rows: &[&FeatureVector], top_k: usize) -> Self {
        let vocab = (0..CATEGORICAL.len())
            .map(|j| {
                let mut counts: HashMap<&str, usize> = HashMap::new();
                for r in rows {
                    *counts.entry(r.categorical()[j]).or_default() += 1;
                }
                let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
                ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
                ranked.into_iter().take(top_k).map(|(v, _)| v.to_string()).collect()
            })
            .collect();
        let numeric = Array2::from_shape_fn((rows.len(), NUMERIC.len()), |(i, j)| rows[i].numeric()[j]);
        FeatureEncoder { vocab, scale: Standardizer::fit(&numeric) }
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names: Vec<String> = NUMERIC.iter().map(|s| s.to_string()).collect();
        for (j, vocab) in self.vocab.iter().enumerate() {
            names.extend(vocab.iter().map(|v| format!("{}={v}", CATEGORICAL[j])));
            names.push(format!("{}={OTHER}", CATEGORICAL[j]));
        }
        names
    }

    pub fn transform(&self, rows: &[&FeatureVector]) -> Array2<f64> {
        let width = NUMERIC.len() + self.vocab.iter().map(|v| v.len() + 1).sum::<usize>();
        let mut numeric = Array2::from_shape_fn((rows.len(), NUMERIC.len()), |(i, j)| rows[i].numeric()[j]);
        self.scale.apply(&mut numeric);
        let mut x = Array2::zeros((rows.len(), width));
        for (i, r) in rows.iter().enumerate() {
            x.row_mut(i).slice_mut(ndarray::s![..NUMERIC.len()]).assign(&numeric.row(i));
            let mut offset = NUMERIC.len();
            for (j, vocab) in self.vocab.iter().enumerate() {
                let v = r.categorical()[j];
                let k = vocab.iter().position(|w| w == v).unwrap_or(vocab.len());
                x[[i, offset + k]] = 1.0;
                offset += vocab.len() + 1;
            }
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// stop once the largest gradient component falls below this
    pub tolerance: f64,
    pub l2: f64,
    pub train_share: f64,
    pub seeds: Vec<u64>,
    pub top_categories: usize,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        LogRegConfig {
            learning_rate: 0.1,
            max_iterations: 10_000,
            tolerance: 1e-6,
            l2: 0.0,
            train_share: 0.9,
            seeds: vec![0, 1, 2],
            top_categories: TOP_CATEGORIES,
        }
    }
}

/// Fitted model predicting P(label = 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogReg {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_gradient_norm: f64,
    pub final_loss: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn loss_and_grad(x: &Array2<f64>, y: &Array1<f64>, w: &Array1<f64>, b: f64, l2: f64) -> (f64, Array1<f64>, f64) {
    let n = y.len() as f64;
    let z = x.dot(w) + b;
    let loss = z
        .iter()
        .zip(y)
        .map(|(z, y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / n
        + 0.5 * l2 * w.dot(w);
    let resid: Array1<f64> = z.iter().zip(y).map(|(z, y)| sigmoid(*z) - y).collect();
    let gw = x.t().dot(&resid) / n + w * l2;
    (loss, gw, resid.sum() / n)
}

impl LogReg {
    /// Full-batch gradient descent from zero, halving the step whenever the
    /// loss goes up. Also returns the loss after each accepted step.
    pub fn fit(x: &Array2<f64>, labels: &[u8], config: &LogRegConfig) -> (Self, Vec<f64>) {
        let y: Array1<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        let mut w = Array1::zeros(x.ncols());
        let mut b = 0.0;
        let mut lr = config.learning_rate;
        let (mut loss, mut gw, mut gb) = loss_and_grad(x, &y, &w, b, config.l2);
        let mut curve = vec![loss];
        let mut iterations = 0;
        let grad_norm = |gw: &Array1<f64>, gb: f64| gw.iter().fold(gb.abs(), |m, g| m.max(g.abs()));
        while iterations < config.max_iterations && grad_norm(&gw, gb) >= config.tolerance {
            iterations += 1;
            let w_new = &w - &(&gw * lr);
            let b_new = b - lr * gb;
            let (l, g, gbn) = loss_and_grad(x, &y, &w_new, b_new, config.l2);
            if l > loss {
                lr *= 0.5;
                if lr < 1e-300 {
                    break;
                }
                continue;
            }
            (w, b, loss, gw, gb) = (w_new, b_new, l, g, gbn);
            curve.push(loss);
        }
        let norm = grad_norm(&gw, gb);
        let model = LogReg {
            weights: w.to_vec(),
            bias: b,
            iterations,
            converged: norm < config.tolerance,
            final_gradient_norm: norm,
            final_loss: loss,
        };
        (model, curve)
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<u8> {
        let w = Array1::from(self.weights.clone());
        (x.dot(&w) + self.bias).iter().map(|z| u8::from(*z >= 0.0)).collect()
    }
}

/// Stratified split of row indices: `share` of each class goes to train.
pub fn stratified_split(labels: &[u8], share: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let cut = (share * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub train_f1_class0: f64,
    pub test_f1_class0: f64,
    pub model: LogReg,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegReport {
    pub config: LogRegConfig,
    pub runs: Vec<SeedRun>,
    pub mean_train_f1_class0: f64,
    pub mean_test_f1_class0: f64,
    /// false when any run stopped at the iteration cap
    pub all_converged: bool,
}

fn f1_class0(model: &LogReg, x: &Array2<f64>, y: &[u8]) -> Result<f64, FeatureError> {
    Ok(Confusion::from_labels(&model.predict(x), y)?.f1(0))
}

fn run_seeds<F>(labels: &[u8], config: &LogRegConfig, encode: F) -> Result<LogRegReport, FeatureError>
where
    F: Fn(&[usize], &[usize]) -> (Array2<f64>, Array2<f64>, Vec<String>) + Sync,
{
    if labels.len() < 2 {
        return Err(FeatureError::TooFew(labels.len()));
    }
    let runs: Vec<Result<SeedRun, FeatureError>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let (train, test) = stratified_split(labels, config.train_share, seed);
            let ytr: Vec<u8> = train.iter().map(|&i| labels[i]).collect();
            let yte: Vec<u8> = test.iter().map(|&i| labels[i]).collect();
            for class in [0u8, 1] {
                if !ytr.contains(&class) {
                    return Err(FeatureError::MissingClass(class));
                }
            }
            let (xtr, xte, columns) = encode(&train, &test);
            let (model, _) = LogReg::fit(&xtr, &ytr, config);
            let test_f1 = if yte.is_empty() { f64::NAN } else { f1_class0(&model, &xte, &yte)? };
            Ok(SeedRun {
                seed,
                n_train: train.len(),
                n_test: test.len(),
                train_f1_class0: f1_class0(&model, &xtr, &ytr)?,
                test_f1_class0: test_f1,
                model,
                columns,
            })
        })
        .collect();
    let runs: Vec<SeedRun> = runs.into_iter().collect::<Result<_, _>>()?;
    let n = runs.len().max(1) as f64;
    Ok(LogRegReport {
        mean_train_f1_class0: runs.iter().map(|r| r.train_f1_class0).sum::<f64>() / n,
        mean_test_f1_class0: runs.iter().map(|r| r.test_f1_class0).sum::<f64>() / n,
        all_converged: runs.iter().all(|r| r.model.converged),
        config: config.clone(),
        runs,
    })
}

/// One-hot + standardized encoding fitted per seed on that seed's train rows.
pub fn train_logreg(rows: &[FeatureRow], config: &LogRegConfig) -> Result<LogRegReport, FeatureError> {
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    run_seeds(&labels, config, |train, test| {
        let pick = |idx: &[usize]| -> Vec<&FeatureVector> { idx.iter().map(|&i| &rows[i].features).collect() };
        let enc = FeatureEncoder::fit(&pick(train), config.top_categories);
        (enc.transform(&pick(train)), enc.transform(&pick(test)), enc.column_names())
    })
}

/// Purely numeric inputs, standardized with train statistics.
pub fn train_logreg_numeric(
    x: &Array2<f64>,
    labels: &[u8],
    names: &[String],
    config: &LogRegConfig,
) -> Result<LogRegReport, FeatureError> {
    if x.nrows() != labels.len() {
        return Err(StatsError::LengthMismatch(x.nrows(), labels.len()).into());
    }
    if names.len() != x.ncols() {
        return Err(FeatureError::Width { expected: names.len(), got: x.ncols() });
    }
    run_seeds(labels, config, |train, test| {
        let mut xtr = x.select(Axis(0), train);
        let mut xte = x.select(Axis(0), test);
        let s = Standardizer::fit(&xtr);
        s.apply(&mut xtr);
        s.apply(&mut xte);
        (xtr, xte, names.to_vec())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedWeight {
    pub feature: String,
    /// mean over seeds of the standardized coefficient
    pub coefficient: f64,
    pub sign: char,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub ranking: Vec<RankedWeight>,
    pub degenerate: bool,
}

/// Coefficients averaged over seeds by column name, ranked by magnitude.
pub fn feature_weights_report(report: &LogRegReport) -> WeightReport {
    let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
    for r in &report.runs {
        for (name, w) in r.columns.iter().zip(&r.model.weights) {
            *sums.entry(name).or_default() += w;
        }
    }
    let n = report.runs.len().max(1) as f64;
    let mut ranking: Vec<RankedWeight> = sums
        .into_iter()
        .filter(|(_, w)| *w != 0.0)
        .map(|(name, w)| RankedWeight {
            feature: name.to_string(),
            coefficient: w / n,
            sign: if w > 0.0 { '+' } else { '-' },
        })
        .collect();
    ranking.sort_by(|a, b| b.coefficient.abs().total_cmp(&a.coefficient.abs()).then(a.feature.cmp(&b.feature)));
    WeightReport { degenerate: ranking.is_empty(), ranking }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::{EntityStatus, Source, Status};
    use crate::corpus::tests::figure_one_graph;
    use crate::corpus::Triple;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn graph(triples: &[(&str, &str, &str)]) -> RdfGraph {
        RdfGraph::new(
            "g",
            triples.iter().map(|(s, p, o)| Triple::new(*s, *p, *o).unwrap()).collect(),
            Subset::Kelm,
            "",
        )
        .unwrap()
    }

    #[test]
    fn entity_features() {
        let g = graph(&[("A_b", "p", "1997"), ("1997", "q", "1997-03-02")]);
        let stats = CorpusStats::default();
        let year = extract_features(&g, "1997", &stats).unwrap();
        assert!(year.is_number && !year.is_date);
        assert_eq!(year.shape_case, "D");
        assert_eq!(year.semantic_role, SemanticRole::Bridge);
        assert_eq!(year.first_occurrence_position, 2);
        assert_eq!(year.n_occurrences, 2);
        assert_eq!(year.dbpedia_type, "unknown");

        let date = extract_features(&g, "1997-03-02", &stats).unwrap();
        assert!(date.is_date && !date.is_number);
        assert_eq!(date.semantic_role, SemanticRole::Patient);
        assert_eq!(date.shape_case, "DODOD");

        let a = extract_features(&g, "A_b", &stats).unwrap();
        assert_eq!(a.shape_case, "UOL");
        assert_eq!(a.shape_vc, "VOC");
        assert_eq!(a.n_chars, 3);
        assert_eq!(a.semantic_role, SemanticRole::Agent);

        assert!(matches!(extract_features(&g, "Z", &stats), Err(FeatureError::NotInGraph { .. })));
    }

    #[test]
    fn figure_graph_features() {
        let g = figure_one_graph();
        let stats = CorpusStats::default();
        let nurhan = extract_features(&g, "Nurhan_Atasoy", &stats).unwrap();
        // subject of four triples in that graph
        assert_eq!(nurhan.n_occurrences, 4);
        assert_eq!(nurhan.semantic_role, SemanticRole::Agent);
        assert_eq!(nurhan.first_occurrence_position, 0);
        assert_eq!(nurhan.n_triples, 5);
        assert_eq!(nurhan.category, "Scientist");
        let istanbul = extract_features(&g, "Istanbul", &stats).unwrap();
        assert_eq!(istanbul.semantic_role, SemanticRole::Bridge);
        assert_eq!(istanbul.first_occurrence_position, 3);
        let r = extract_features(&g, "Reşadiye", &stats).unwrap();
        assert_eq!(r.shape_vc, "CVCVCVCV");
        assert_eq!(r.shape_case, "UL");
        assert!(extract_features(&g, "2691.0", &stats).unwrap().is_number);
    }

    #[test]
    fn train_frequency_counts_graphs() {
        let mk = |id: &str, perm: u32, subset: Subset| GenerationRecord {
            graph_id: id.into(),
            permutation_index: perm,
            subset,
            category: String::new(),
            triples: vec![Triple::new("X", "p", "Y").unwrap(), Triple::new("X", "q", "Z").unwrap()],
            linearization: String::new(),
            decoding: crate::corpus::Decoding::Greedy,
            text: String::new(),
        };
        let records =
            vec![mk("a", 0, Subset::WebnlgTrain), mk("a", 1, Subset::WebnlgTrain), mk("b", 0, Subset::WebnlgTrain), mk("c", 0, Subset::Kelm)];
        let stats = CorpusStats::from_records(&records, HashMap::new());
        assert_eq!(stats.train_frequency["X"], 2);
        assert_eq!(stats.train_frequency["Z"], 2);
    }

    #[test]
    fn table_and_tsv() {
        let g = figure_one_graph();
        let record = GenerationRecord {
            graph_id: g.graph_id.clone(),
            permutation_index: 0,
            subset: g.subset,
            category: g.category.clone(),
            triples: g.triples.clone(),
            linearization: String::new(),
            decoding: crate::corpus::Decoding::Greedy,
            text: String::new(),
        };
        let ann = AnnotationRecord {
            graph_id: g.graph_id.clone(),
            permutation_index: 0,
            decoding: crate::corpus::Decoding::Greedy,
            entities: vec![
                EntityStatus { surface: "Turkey".into(), status: Status::O, source: Source::Manual },
                EntityStatus { surface: "Istanbul".into(), status: Status::D, source: Source::Manual },
                EntityStatus { surface: "Istanbul".into(), status: Status::M, source: Source::Auto },
            ],
        };
        let rows = feature_table(&[record], &[ann], Flavor::ManualO, &CorpusStats::default()).unwrap();
        assert_eq!(rows.iter().map(|r| r.label).collect::<Vec<_>>(), vec![0, 1]);
        let tsv = feature_tsv(&rows);
        assert_eq!(tsv.lines().next().unwrap().split('\t').count(), 16);
        assert_eq!(tsv.lines().count(), 3);
    }

    fn separable(n: usize, seed: u64) -> (Array2<f64>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<u8> = (0..n).map(|i| u8::from(i % 4 != 0)).collect();
        let x = Array2::from_shape_fn((n, 2), |(i, j)| {
            let noise: f64 = rng.random_range(-1.0..1.0);
            if j == 0 {
                if y[i] == 1 {
                    3.0 + noise
                } else {
                    -3.0 + noise
                }
            } else {
                5.0 * noise
            }
        });
        (x, y)
    }

    #[test]
    fn separable_reaches_perfect_f1() {
        let (x, y) = separable(400, 1);
        let names = vec!["a".to_string(), "b".to_string()];
        let r = train_logreg_numeric(&x, &y, &names, &LogRegConfig::default()).unwrap();
        assert_eq!(r.runs.len(), 3);
        assert!(r.mean_test_f1_class0 >= 0.99);
        let w = feature_weights_report(&r);
        assert_eq!(w.ranking[0].feature, "a");
        assert_eq!(w.ranking[0].sign, '+');
    }

    #[test]
    fn loss_is_monotone_and_converges() {
        let (x, y) = separable(200, 2);
        let mut noisy = y.clone();
        for i in (0..noisy.len()).step_by(7) {
            noisy[i] = 1 - noisy[i];
        }
        let mut xs = x.clone();
        Standardizer::fit(&x).apply(&mut xs);
        let (model, curve) = LogReg::fit(&xs, &noisy, &LogRegConfig::default());
        assert!(curve.windows(2).all(|w| w[1] <= w[0]));
        assert!(model.converged, "{model:?}");
        assert!(model.final_gradient_norm < 1e-6);
    }

    #[test]
    fn standardizer_moments() {
        let (x, _) = separable(300, 3);
        let mut z = x.clone();
        Standardizer::fit(&x).apply(&mut z);
        for c in z.axis_iter(Axis(1)) {
            let m = c.mean().unwrap();
            let s = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c.len() as f64).sqrt();
            assert!(m.abs() < 1e-9);
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicate_columns_get_equal_weights() {
        let (x, mut y) = separable(200, 4);
        y[0] = 1 - y[0];
        let dup = Array2::from_shape_fn((200, 3), |(i, j)| x[[i, if j == 2 { 0 } else { j }]]);
        let names: Vec<String> = ["a", "b", "a2"].iter().map(|s| s.to_string()).collect();
        let r = train_logreg_numeric(&dup, &y, &names, &LogRegConfig { l2: 1e-3, ..Default::default() }).unwrap();
        for run in &r.runs {
            assert_abs_diff_eq!(run.model.weights[0], run.model.weights[2], epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_weights_are_degenerate() {
        let report = LogRegReport {
            config: LogRegConfig::default(),
            runs: vec![SeedRun {
                seed: 0,
                n_train: 1,
                n_test: 0,
                train_f1_class0: 0.0,
                test_f1_class0: 0.0,
                model: LogReg {
                    weights: vec![0.0, 0.0],
                    bias: 0.0,
                    iterations: 0,
                    converged: true,
                    final_gradient_norm: 0.0,
                    final_loss: 0.0,
                },
                columns: vec!["a".into(), "b".into()],
            }],
            mean_train_f1_class0: 0.0,
            mean_test_f1_class0: 0.0,
            all_converged: true,
        };
        let w = feature_weights_report(&report);
        assert!(w.degenerate && w.ranking.is_empty());
    }

    #[test]
    fn stratified_split_keeps_class_shares() {
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i % 5 != 0)).collect();
        let (train, test) = stratified_split(&labels, 0.9, 3);
        assert_eq!(train.len() + test.len(), 100);
        assert_eq!(train.iter().filter(|&&i| labels[i] == 0).count(), 18);
        assert_eq!(test.iter().filter(|&&i| labels[i] == 0).count(), 2);
    }

    #[test]
    fn one_hot_encoding_with_other_bucket() {
        let g = figure_one_graph();
        let stats = CorpusStats::default();
        let feats: Vec<FeatureVector> =
            g.entities().iter().map(|e| extract_features(&g, e, &stats).unwrap()).collect();
        let refs: Vec<&FeatureVector> = feats.iter().collect();
        let enc = FeatureEncoder::fit(&refs, 1);
        let x = enc.transform(&refs);
        assert_eq!(x.ncols(), enc.column_names().len());
        assert_eq!(x.ncols(), 7 + 5 * 2);
        for row in x.rows() {
            assert_abs_diff_eq!(row.slice(ndarray::s![7..]).sum(), 5.0, epsilon = 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn affine_rescaling_keeps_predictions(seed in 0u64..500, a in 0.01f64..100.0, b in -50.0f64..50.0) {
            let (x, mut y) = separable(120, seed);
            y[1] = 1 - y[1];
            let names = vec!["a".to_string(), "b".to_string()];
            let cfg = LogRegConfig { max_iterations: 500, seeds: vec![seed], ..Default::default() };
            let mut scaled = x.clone();
            scaled.column_mut(1).mapv_inplace(|v| a * v + b);
            let r1 = train_logreg_numeric(&x, &y, &names, &cfg).unwrap();
            let r2 = train_logreg_numeric(&scaled, &y, &names, &cfg).unwrap();
            for (w1, w2) in r1.runs[0].model.weights.iter().zip(&r2.runs[0].model.weights) {
                prop_assert!((w1 - w2).abs() < 1e-6);
            }
            prop_assert_eq!(r1.runs[0].test_f1_class0, r2.runs[0].test_f1_class0);
        }
    }
}
