//! Parametric probes: small networks trained to tell mentioned entities from
//! omitted or distorted ones, given the graph and entity embeddings.

mod analysis;
mod model_io;
mod net;

pub use analysis::*;
pub use model_io::{load_model, save_model, ModelHeader};
pub use net::{bce_with_logit, train, AdamW, AdamWParams, Dense, Mlp, MlpConfig, TrainReport};

use std::collections::{BTreeMap, HashMap};

use log::{info, warn};
use ndarray::{concatenate, Array1, Array2, Axis};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{AnnotationRecord, Source, Status};
use crate::corpus::{GenerationRecord, RecordKey, Split, SplitAssignment, Subset};
use crate::embed_store::{EmbedError, Variant};
use crate::probe_free::{fetch, PooledSource, ProbeFreeError};
use crate::stats::{Confusion, StatsError};

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("invalid probe configuration: {0}")]
    Config(String),
    #[error("class {class} absent from the {split} split")]
    MissingClass { split: &'static str, class: u8 },
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("feature width {got}, expected {expected}")]
    Width { expected: usize, got: usize },
    #[error("training diverged at epoch {epoch} with {config}")]
    Diverged { epoch: usize, config: String },
    #[error("graph {graph}: entity `{entity}` has no span in the base bundle")]
    MissingSpan { graph: String, entity: String },
    #[error("random-encoder control needs at least 2 encoder seeds, got {0}")]
    TooFewSeeds(usize),
    #[error("model file: {0}")]
    Model(String),
    #[error(transparent)]
    Bundle(#[from] ProbeFreeError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Which annotations define class 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flavor {
    ManualO,
    ManualD,
    ManualOD,
    Auto,
}

impl Flavor {
    pub const ALL: [Flavor; 4] = [Flavor::ManualO, Flavor::ManualD, Flavor::ManualOD, Flavor::Auto];

    pub fn source(self) -> Source {
        if self == Flavor::Auto {
            Source::Auto
        } else {
            Source::Manual
        }
    }

    pub fn label(self, status: Status) -> u8 {
        let negative = match self {
            Flavor::ManualO | Flavor::Auto => status == Status::O,
            Flavor::ManualD => status == Status::D,
            Flavor::ManualOD => status != Status::M,
        };
        u8::from(!negative)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Flavor::ManualO => "manual-o",
            Flavor::ManualD => "manual-d",
            Flavor::ManualOD => "manual-od",
            Flavor::Auto => "auto",
        }
    }
}

impl std::fmt::Display for Flavor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Flavor {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('+', "").as_str() {
            "manual-o" | "o" => Ok(Flavor::ManualO),
            "manual-d" | "d" => Ok(Flavor::ManualD),
            "manual-od" | "od" => Ok(Flavor::ManualOD),
            "auto" => Ok(Flavor::Auto),
            other => Err(format!("unknown flavor `{other}` (manual-o|manual-d|manual-od|auto)")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// graph dim_mean followed by the entity vector
    #[default]
    Concat,
    EntityOnly,
}

impl std::str::FromStr for FeatureMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concat" => Ok(FeatureMode::Concat),
            "entity-only" | "entity" => Ok(FeatureMode::EntityOnly),
            other => Err(format!("unknown feature mode `{other}` (concat|entity-only)")),
        }
    }
}

fn features(mode: FeatureMode, graph: &Array1<f64>, entity: &Array1<f64>) -> Vec<f64> {
    match mode {
        FeatureMode::Concat => graph.iter().chain(entity.iter()).copied().collect(),
        FeatureMode::EntityOnly => entity.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeExample {
    pub features: Vec<f64>,
    /// 0 omitted/distorted, 1 mentioned
    pub label: u8,
    pub entity_surface: String,
    pub graph_id: String,
    pub permutation_index: u32,
    pub subset: Subset,
}

/// Examples stacked into a matrix for training.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Vec<u8>,
    pub subsets: Vec<Subset>,
    pub surfaces: Vec<String>,
}

impl Dataset {
    pub fn from_examples(examples: &[ProbeExample]) -> Result<Self, MlpError> {
        let width = examples.first().map_or(0, |e| e.features.len());
        let mut flat = Vec::with_capacity(examples.len() * width);
        for e in examples {
            if e.features.len() != width {
                return Err(MlpError::Width { expected: width, got: e.features.len() });
            }
            if e.label > 1 {
                return Err(StatsError::NonBinaryLabel(e.label).into());
            }
            if e.features.iter().any(|v| !v.is_finite()) {
                return Err(MlpError::Config(format!(
                    "non-finite feature for `{}` in {}",
                    e.entity_surface, e.graph_id
                )));
            }
            flat.extend_from_slice(&e.features);
        }
        Ok(Dataset {
            x: Array2::from_shape_vec((examples.len(), width), flat).expect("shape checked"),
            y: examples.iter().map(|e| e.label).collect(),
            subsets: examples.iter().map(|e| e.subset).collect(),
            surfaces: examples.iter().map(|e| e.entity_surface.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn width(&self) -> usize {
        self.x.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            subsets: rows.iter().map(|&i| self.subsets[i]).collect(),
            surfaces: rows.iter().map(|&i| self.surfaces[i].clone()).collect(),
        }
    }

    pub fn class_share(&self, class: u8) -> f64 {
        self.y.iter().filter(|&&l| l == class).count() as f64 / self.len().max(1) as f64
    }
}

pub(crate) fn confusion(preds: &[u8], golds: &[u8]) -> Result<Confusion, MlpError> {
    Ok(Confusion::from_labels(preds, golds)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub n_class0: usize,
    pub f1_class0: f64,
    pub f1_class1: f64,
    /// absent when the gold labels hold a single class
    pub balanced_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_subset: BTreeMap<String, Metrics>,
}

impl Metrics {
    pub fn from_predictions(preds: &[u8], golds: &[u8]) -> Result<Self, MlpError> {
        let c = confusion(preds, golds)?;
        Ok(Metrics {
            n: golds.len(),
            n_class0: golds.iter().filter(|&&g| g == 0).count(),
            f1_class0: c.f1(0),
            f1_class1: c.f1(1),
            balanced_accuracy: c.balanced_accuracy().ok(),
            per_subset: BTreeMap::new(),
        })
    }
}

/// Metrics over the whole dataset and per subset.
pub fn evaluate(model: &Mlp, data: &Dataset) -> Result<Metrics, MlpError> {
    if data.is_empty() {
        return Err(MlpError::EmptySplit("evaluation"));
    }
    if data.width() != model.n_inputs() {
        return Err(MlpError::Width { expected: model.n_inputs(), got: data.width() });
    }
    let preds = model.predict(data.x.view());
    let mut m = Metrics::from_predictions(&preds, &data.y)?;
    let mut groups: BTreeMap<Subset, (Vec<u8>, Vec<u8>)> = BTreeMap::new();
    for ((p, g), s) in preds.iter().zip(&data.y).zip(&data.subsets) {
        let e = groups.entry(*s).or_default();
        e.0.push(*p);
        e.1.push(*g);
    }
    for (s, (p, g)) in groups {
        m.per_subset.insert(s.to_string(), Metrics::from_predictions(&p, &g)?);
    }
    Ok(m)
}

/// Records, their annotations and a bundle source, seen through one encoder.
pub struct ProbeCorpus<'a> {
    pub records: &'a [GenerationRecord],
    pub annotations: &'a [AnnotationRecord],
    pub bundles: &'a dyn PooledSource,
    pub encoder_tag: &'a str,
}

impl ProbeCorpus<'_> {
    fn selected(&self, flavor: Flavor, split: Option<(&SplitAssignment, Split)>) -> Vec<(&GenerationRecord, &AnnotationRecord)> {
        let by_key: HashMap<RecordKey, &GenerationRecord> = self.records.iter().map(|r| (r.key(), r)).collect();
        self.annotations
            .iter()
            .filter(|a| a.has_source(flavor.source()))
            .filter(|a| split.is_none_or(|(assign, which)| assign.get(&a.key()) == Some(which)))
            .filter_map(|a| by_key.get(&a.key()).map(|r| (*r, a)))
            .collect()
    }

    /// One example per annotated entity of every text in the split (or all
    /// texts when `split` is `None`).
    pub fn build_examples(
        &self,
        flavor: Flavor,
        split: Option<(&SplitAssignment, Split)>,
        mode: FeatureMode,
    ) -> Result<Vec<ProbeExample>, MlpError> {
        let selected = self.selected(flavor, split);
        let per_text: Vec<Result<Vec<ProbeExample>, MlpError>> = selected
            .par_iter()
            .map(|(record, ann)| {
                let key = record.key();
                let base = fetch(self.bundles, &key, Variant::Base, self.encoder_tag)?;
                ann.statuses(flavor.source())
                    .map(|(surface, status)| {
                        let entity = base.entity_vector(surface).ok_or_else(|| MlpError::MissingSpan {
                            graph: key.to_string(),
                            entity: surface.to_string(),
                        })?;
                        Ok(ProbeExample {
                            features: features(mode, &base.dim_mean, &entity),
                            label: flavor.label(status),
                            entity_surface: surface.to_string(),
                            graph_id: key.graph_id.clone(),
                            permutation_index: key.permutation_index,
                            subset: record.subset,
                        })
                    })
                    .collect()
            })
            .collect();
        let mut out = Vec::new();
        for r in per_text {
            out.extend(r?);
        }
        let relabelled = selected
            .iter()
            .flat_map(|(_, a)| a.statuses(flavor.source()))
            .filter(|(_, s)| match flavor {
                Flavor::ManualO => *s == Status::D,
                Flavor::ManualD => *s == Status::O,
                _ => false,
            })
            .count();
        if relabelled > 0 {
            info!("{flavor}: {relabelled} entities of the other negative status counted as class 1");
        }
        Ok(out)
    }

    /// Mentioned entities (class 1) against entities drawn from other graphs
    /// (class 0), all represented by their standalone embeddings.
    pub fn upper_bound_dataset(
        &self,
        flavor: Flavor,
        split: Option<(&SplitAssignment, Split)>,
        mode: FeatureMode,
        seed: u64,
    ) -> Result<Vec<ProbeExample>, MlpError> {
        let mut pool: BTreeMap<String, RecordKey> = BTreeMap::new();
        for k in self.bundles.keys() {
            if let (Variant::Standalone(e), true) = (&k.variant, k.encoder_tag == self.encoder_tag) {
                let key = RecordKey { graph_id: k.graph_id.clone(), permutation_index: k.permutation_index };
                pool.entry(e.clone())
                    .and_modify(|old| {
                        if key < *old {
                            *old = key.clone();
                        }
                    })
                    .or_insert(key);
            }
        }
        let pool: Vec<(String, RecordKey)> = pool.into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // sample sequentially for determinism, embed in parallel
        let mut plan = Vec::new();
        for (record, ann) in self.selected(flavor, split) {
            let graph = record.graph();
            let mentioned: Vec<&str> =
                ann.statuses(flavor.source()).filter(|(_, s)| *s == Status::M).map(|(e, _)| e).collect();
            let mut negatives = Vec::new();
            for _ in &mentioned {
                let pick = (0..100)
                    .filter_map(|_| pool.choose(&mut rng))
                    .find(|(e, _)| !graph.contains_entity(e));
                match pick {
                    Some(p) => negatives.push(p.clone()),
                    None => break,
                }
            }
            if negatives.len() < mentioned.len() {
                warn!("{}: entity pool too small to sample absent entities, skipped", record.key());
                continue;
            }
            plan.push((record, mentioned, negatives));
        }
        let per_graph: Vec<Result<Vec<ProbeExample>, MlpError>> = plan
            .par_iter()
            .map(|(record, mentioned, negatives)| {
                let key = record.key();
                let base = fetch(self.bundles, &key, Variant::Base, self.encoder_tag)?;
                let standalone = |surface: &str, at: &RecordKey| -> Result<Array1<f64>, MlpError> {
                    Ok(fetch(self.bundles, at, Variant::Standalone(surface.to_string()), self.encoder_tag)?.dim_mean)
                };
                let mut out = Vec::new();
                let candidates = mentioned
                    .iter()
                    .map(|e| (e.to_string(), key.clone(), 1u8))
                    .chain(negatives.iter().map(|(e, k)| (e.clone(), k.clone(), 0u8)));
                for (surface, at, label) in candidates {
                    out.push(ProbeExample {
                        features: features(mode, &base.dim_mean, &standalone(&surface, &at)?),
                        label,
                        entity_surface: surface,
                        graph_id: key.graph_id.clone(),
                        permutation_index: key.permutation_index,
                        subset: record.subset,
                    });
                }
                Ok(out)
            })
            .collect();
        let mut out = Vec::new();
        for r in per_graph {
            out.extend(r?);
        }
        Ok(out)
    }
}

/// Splits a flat example list by the record split assignment.
pub fn partition(examples: Vec<ProbeExample>, assignment: &SplitAssignment) -> BTreeMap<Split, Vec<ProbeExample>> {
    let mut out: BTreeMap<Split, Vec<ProbeExample>> = BTreeMap::new();
    for e in examples {
        let key = RecordKey { graph_id: e.graph_id.clone(), permutation_index: e.permutation_index };
        if let Some(s) = assignment.get(&key) {
            out.entry(s).or_default().push(e);
        }
    }
    out
}

/// Concatenates two datasets row-wise.
pub fn stack(a: &Dataset, b: &Dataset) -> Result<Dataset, MlpError> {
    if a.width() != b.width() {
        return Err(MlpError::Width { expected: a.width(), got: b.width() });
    }
    Ok(Dataset {
        x: concatenate(Axis(0), &[a.x.view(), b.x.view()]).expect("widths checked"),
        y: a.y.iter().chain(&b.y).copied().collect(),
        subsets: a.subsets.iter().chain(&b.subsets).copied().collect(),
        surfaces: a.surfaces.iter().chain(&b.surfaces).cloned().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::split_dataset;
    use crate::embed_store::{synth_corpus, SynthCorpusConfig};

    #[test]
    fn flavor_labels() {
        use Status::*;
        let row = |f: Flavor| [M, O, D].map(|s| f.label(s));
        assert_eq!(row(Flavor::ManualO), [1, 0, 1]);
        assert_eq!(row(Flavor::ManualD), [1, 1, 0]);
        assert_eq!(row(Flavor::ManualOD), [1, 0, 0]);
        assert_eq!(row(Flavor::Auto), [1, 0, 1]);
        assert_eq!("manual-o+d".parse::<Flavor>().unwrap(), Flavor::ManualOD);
        assert_eq!(Flavor::ManualOD.to_string(), "manual-od");
    }

    #[test]
    fn examples_per_entity() {
        let corpus = synth_corpus(&SynthCorpusConfig { n_graphs: 20, dim: 8, ..Default::default() }).unwrap();
        let pooled = corpus.pooled().unwrap();
        let pc = ProbeCorpus {
            records: &corpus.records,
            annotations: &corpus.annotations,
            bundles: &pooled,
            encoder_tag: &corpus.graphs[0].base.encoder_tag,
        };
        let all = pc.build_examples(Flavor::ManualOD, None, FeatureMode::Concat).unwrap();
        let expected: usize = corpus.graphs.iter().map(|g| g.labels.len()).sum();
        assert_eq!(all.len(), expected);
        assert_eq!(all.iter().filter(|e| e.label == 0).count(), 20);
        assert!(all.iter().all(|e| e.features.len() == 16));
        // the first graph has one triple, so two entities
        assert_eq!(all.iter().filter(|e| e.graph_id == "g00000").count(), 2);

        let only = pc.build_examples(Flavor::ManualOD, None, FeatureMode::EntityOnly).unwrap();
        assert_eq!(only[0].features, all[0].features[8..].to_vec());

        let (assign, _) = split_dataset(&corpus.annotations, Source::Manual, 1).unwrap();
        let train = pc.build_examples(Flavor::ManualOD, Some((&assign, Split::Train)), FeatureMode::Concat).unwrap();
        let parts = partition(all, &assign);
        assert_eq!(parts[&Split::Train], train);
    }

    #[test]
    fn missing_span_is_named() {
        let corpus = synth_corpus(&SynthCorpusConfig { n_graphs: 2, dim: 4, ..Default::default() }).unwrap();
        let pooled = corpus.pooled().unwrap();
        let mut anns = corpus.annotations.clone();
        anns[1].entities[0].surface = "Ghost".into();
        let pc = ProbeCorpus {
            records: &corpus.records,
            annotations: &anns,
            bundles: &pooled,
            encoder_tag: &corpus.graphs[0].base.encoder_tag,
        };
        let err = pc.build_examples(Flavor::ManualO, None, FeatureMode::Concat).unwrap_err();
        assert!(matches!(&err, MlpError::MissingSpan { entity, .. } if entity == "Ghost"), "{err}");
    }

    #[test]
    fn upper_bound_negatives_are_foreign() {
        let corpus = synth_corpus(&SynthCorpusConfig { n_graphs: 30, dim: 8, ..Default::default() }).unwrap();
        let pooled = corpus.pooled().unwrap();
        let pc = ProbeCorpus {
            records: &corpus.records,
            annotations: &corpus.annotations,
            bundles: &pooled,
            encoder_tag: &corpus.graphs[0].base.encoder_tag,
        };
        let ex = pc.upper_bound_dataset(Flavor::ManualO, None, FeatureMode::Concat, 4).unwrap();
        let graphs: HashMap<&str, &crate::corpus::RdfGraph> =
            corpus.graphs.iter().map(|g| (g.graph.graph_id.as_str(), &g.graph)).collect();
        let pos = ex.iter().filter(|e| e.label == 1).count();
        assert_eq!(pos, ex.len() - pos);
        for e in &ex {
            assert_eq!(graphs[e.graph_id.as_str()].contains_entity(&e.entity_surface), e.label == 1);
        }
        assert_eq!(ex, pc.upper_bound_dataset(Flavor::ManualO, None, FeatureMode::Concat, 4).unwrap());
    }
}
