//! Grid search, controls and the follow-up analyses run on trained probes.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, train, Dataset, Metrics, Mlp, MlpConfig, MlpError, TrainReport};
use crate::stats::{mean_std, pearson, spearman, Correlation};

pub const GRID_BATCH_SIZES: [usize; 6] = [8, 16, 32, 64, 128, 256];
pub const GRID_LEARNING_RATES: [f64; 4] = [0.1, 0.01, 0.001, 0.0001];
pub const GRID_HIDDEN_SIZES: [usize; 5] = [1000, 500, 100, 50, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    /// used only for two-layer probes
    pub hidden_sizes: Vec<usize>,
    /// layers, decay, epochs, patience and seed come from here
    pub base: MlpConfig,
}

impl GridSpec {
    pub fn standard(base: MlpConfig) -> Self {
        GridSpec {
            batch_sizes: GRID_BATCH_SIZES.to_vec(),
            learning_rates: GRID_LEARNING_RATES.to_vec(),
            hidden_sizes: GRID_HIDDEN_SIZES.to_vec(),
            base,
        }
    }

    pub fn configs(&self) -> Vec<MlpConfig> {
        let hidden: Vec<usize> =
            if self.base.layers == 1 { vec![self.base.hidden_size] } else { self.hidden_sizes.clone() };
        let mut out = Vec::new();
        for &batch_size in &self.batch_sizes {
            for &learning_rate in &self.learning_rates {
                for &hidden_size in &hidden {
                    out.push(MlpConfig { batch_size, learning_rate, hidden_size, ..self.base.clone() });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub config: MlpConfig,
    pub report: Option<TrainReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: MlpConfig,
    pub best_report: TrainReport,
    pub runs: Vec<GridRun>,
}

/// Higher dev F1 wins; ties go to the lower learning rate, then the smaller
/// batch, then the smaller hidden layer.
fn better(a: &TrainReport, b: &TrainReport) -> bool {
    let by = a
        .dev_f1_class1
        .total_cmp(&b.dev_f1_class1)
        .then(b.config.learning_rate.total_cmp(&a.config.learning_rate))
        .then(b.config.batch_size.cmp(&a.config.batch_size))
        .then(b.config.hidden_size.cmp(&a.config.hidden_size));
    by == Ordering::Greater
}

/// Trains every grid point in parallel and selects by dev F1 of class 1.
/// Runs that fail are kept in the log with their error.
pub fn grid_search(spec: &GridSpec, train_set: &Dataset, dev: &Dataset) -> Result<(Mlp, GridResult), MlpError> {
    let runs: Vec<GridRun> = spec
        .configs()
        .into_par_iter()
        .map(|config| match train(&config, train_set, dev) {
            Ok((_, report)) => GridRun { config, report: Some(report), error: None },
            Err(e) => {
                warn!("grid run {} failed: {e}", config.name());
                GridRun { config, report: None, error: Some(e.to_string()) }
            }
        })
        .collect();
    let mut best: Option<&TrainReport> = None;
    for r in runs.iter().filter_map(|r| r.report.as_ref()) {
        if best.is_none_or(|b| better(r, b)) {
            best = Some(r);
        }
    }
    let Some(best) = best.cloned() else {
        let first = runs.iter().find_map(|r| r.error.clone()).unwrap_or_else(|| "empty grid".into());
        return Err(MlpError::Config(format!("no grid run succeeded: {first}")));
    };
    info!("grid best {} dev F1 {:.4}", best.config.name(), best.dev_f1_class1);
    // training is deterministic, so this reproduces the selected run
    let (model, _) = train(&best.config, train_set, dev)?;
    Ok((model, GridResult { best: best.config.clone(), best_report: best, runs }))
}

impl GridResult {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("layers\tbatch_size\tlearning_rate\thidden_size\tbest_epoch\tdev_f1_class1\terror\n");
        for r in &self.runs {
            let (epoch, f1) = r
                .report
                .as_ref()
                .map_or((String::new(), String::new()), |t| (t.best_epoch.to_string(), format!("{:.4}", t.dev_f1_class1)));
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.config.layers,
                r.config.batch_size,
                r.config.learning_rate,
                if r.config.layers == 1 { "-".to_string() } else { r.config.hidden_size.to_string() },
                epoch,
                f1,
                r.error.as_deref().unwrap_or("")
            );
        }
        out
    }
}

/// Trains, then evaluates on the test set.
pub fn train_and_test(
    config: &MlpConfig,
    train_set: &Dataset,
    dev: &Dataset,
    test: &Dataset,
) -> Result<(Mlp, TrainReport), MlpError> {
    let (model, mut report) = train(config, train_set, dev)?;
    report.test = Some(evaluate(&model, test)?);
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub probe: Metrics,
    pub control: Metrics,
    pub control_seed: u64,
    /// probe B.Acc minus control B.Acc
    pub selectivity: Option<f64>,
}

/// Shuffles the training labels (dev and test untouched).
pub fn shuffle_labels(data: &Dataset, seed: u64) -> Dataset {
    let mut out = data.clone();
    out.y.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// The same probe trained on shuffled training labels.
pub fn control_random_labels(
    config: &MlpConfig,
    train_set: &Dataset,
    dev: &Dataset,
    test: &Dataset,
    probe: &Metrics,
    seed: u64,
) -> Result<ControlReport, MlpError> {
    let shuffled = shuffle_labels(train_set, seed);
    let (_, report) = train_and_test(config, &shuffled, dev, test)?;
    let control = report.test.expect("set by train_and_test");
    let selectivity = probe.balanced_accuracy.zip(control.balanced_accuracy).map(|(p, c)| p - c);
    Ok(ControlReport { probe: probe.clone(), control, control_seed: seed, selectivity })
}

/// Train/dev/test sets built from one randomly initialised encoder.
#[derive(Debug, Clone)]
pub struct EncoderRun {
    pub encoder_tag: String,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// population standard deviation
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderControlReport {
    pub per_encoder: Vec<(String, Metrics)>,
    pub f1_class0: MeanStd,
    pub balanced_accuracy: MeanStd,
}

pub fn control_random_encoder(config: &MlpConfig, runs: &[EncoderRun]) -> Result<EncoderControlReport, MlpError> {
    if runs.len() < 2 {
        return Err(MlpError::TooFewSeeds(runs.len()));
    }
    let per_encoder: Vec<(String, Metrics)> = runs
        .iter()
        .map(|r| {
            let (_, report) = train_and_test(config, &r.train, &r.dev, &r.test)?;
            Ok((r.encoder_tag.clone(), report.test.expect("set by train_and_test")))
        })
        .collect::<Result<_, MlpError>>()?;
    let f1: Vec<f64> = per_encoder.iter().map(|(_, m)| m.f1_class0).collect();
    let bacc: Vec<f64> = per_encoder.iter().filter_map(|(_, m)| m.balanced_accuracy).collect();
    Ok(EncoderControlReport {
        f1_class0: MeanStd::of(&f1),
        balanced_accuracy: MeanStd::of(&bacc),
        per_encoder,
    })
}

/// Surfaces carrying both labels somewhere in `examples`.
pub fn mixed_label_surfaces(surfaces: &[String], labels: &[u8]) -> HashSet<String> {
    let mut seen: HashMap<&str, [bool; 2]> = HashMap::new();
    for (s, l) in surfaces.iter().zip(labels) {
        seen.entry(s.as_str()).or_default()[usize::from(*l)] = true;
    }
    seen.into_iter().filter(|(_, v)| v[0] && v[1]).map(|(s, _)| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardExampleReport {
    pub n_hard_surfaces: usize,
    pub n_test: usize,
    pub n_hard_test: usize,
    /// hard test examples over all test examples
    pub share: f64,
    pub empty: bool,
    pub metrics: Option<Metrics>,
}

/// Restricts the test set to entities whose surface occurs with both labels
/// anywhere in `corpus` (all splits of the flavor).
pub fn hard_examples_eval(model: &Mlp, test: &Dataset, corpus: &Dataset) -> Result<HardExampleReport, MlpError> {
    let hard = mixed_label_surfaces(&corpus.surfaces, &corpus.y);
    let rows: Vec<usize> = (0..test.len()).filter(|&i| hard.contains(&test.surfaces[i])).collect();
    let metrics = if rows.is_empty() { None } else { Some(evaluate(model, &test.select(&rows))?) };
    Ok(HardExampleReport {
        n_hard_surfaces: hard.len(),
        n_test: test.len(),
        n_hard_test: rows.len(),
        share: rows.len() as f64 / test.len().max(1) as f64,
        empty: rows.is_empty(),
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCorrelation {
    pub n: usize,
    /// on predicted labels
    pub spearman: Correlation,
    /// on P(class 0)
    pub pearson: Correlation,
}

pub fn correlate_probes(a: &Mlp, b: &Mlp, examples: &Dataset) -> Result<ProbeCorrelation, MlpError> {
    let labels = |m: &Mlp| -> Vec<f64> { m.predict(examples.x.view()).into_iter().map(f64::from).collect() };
    let p0 = |m: &Mlp| -> Vec<f64> { m.predict_proba(examples.x.view()).iter().map(|p| 1.0 - p).collect() };
    Ok(ProbeCorrelation {
        n: examples.len(),
        spearman: spearman(&labels(a), &labels(b))?,
        pearson: pearson(&p0(a), &p0(b))?,
    })
}

/// Metrics of a probe on another flavor's test set.
pub fn cross_transfer_eval(model: &Mlp, foreign_test: &Dataset) -> Result<Metrics, MlpError> {
    evaluate(model, foreign_test)
}

/// Table-like TSV of named metric rows: F1 of class 0 with balanced
/// accuracy, per subset and overall.
pub fn metrics_tsv(rows: &[(String, Metrics)]) -> String {
    let mut out = String::from("name\tsubset\tn\tn_class0\tf1_class0\tf1_class1\tbalanced_accuracy\n");
    let fmt_b = |b: Option<f64>| b.map_or("NA".to_string(), |v| format!("{v:.4}"));
    for (name, m) in rows {
        let mut lines: BTreeMap<&str, &Metrics> = m.per_subset.iter().map(|(k, v)| (k.as_str(), v)).collect();
        lines.insert("all", m);
        for (subset, v) in lines {
            let _ = writeln!(
                out,
                "{name}\t{subset}\t{}\t{}\t{:.4}\t{:.4}\t{}",
                v.n,
                v.n_class0,
                v.f1_class0,
                v.f1_class1,
                fmt_b(v.balanced_accuracy)
            );
        }
    }
    out
}
