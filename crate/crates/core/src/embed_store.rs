//! Embedding bundles: one encoder output matrix plus the span index that maps
//! its token rows onto the entities and properties of the linearized graph.
//!
//! On disk a bundle is two files sharing a basename:
//!
//! ```text
//! <name>.embx   b"EMBX0001" | rows: u32 LE | cols: u32 LE | rows·cols f32 LE, row-major
//! <name>.json   {graph_id, permutation_index, variant, encoder_tag, rows, cols, spans: [...]}
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotate::{AnnotationRecord, EntityStatus, Source, Status};
use crate::corpus::{linearize, Decoding, GenerationRecord, RdfGraph, Subset, Triple};

pub const MAGIC: &[u8; 8] = b"EMBX0001";
pub const MATRIX_EXT: &str = "embx";
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: invalid sidecar JSON: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },
    #[error("span {unit_id} is empty")]
    EmptySpan { unit_id: u32 },
    #[error("bundles have different unit structure ({0} vs {1} units)")]
    StructureMismatch(usize, usize),
    #[error("synthetic bundle: {0}")]
    Synth(String),
}

fn format_err(field: impl Into<String>, message: impl Into<String>) -> EmbedError {
    EmbedError::Format { field: field.into(), message: message.into() }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmbedError + '_ {
    move |source| EmbedError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Subject,
    Property,
    Object,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub unit_id: u32,
    pub role: Role,
    pub entity_surface: String,
    pub token_start: u32,
    /// exclusive
    pub token_end: u32,
}

impl Span {
    pub fn is_entity(&self) -> bool {
        self.role != Role::Property
    }
}

/// Spans of the graph's units (entities and properties) over token rows.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpanIndex(pub Vec<Span>);

impl SpanIndex {
    pub fn units(&self) -> &[Span] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Spans sorted, non-overlapping and inside `0..rows`; unit ids increasing.
    pub fn validate(&self, rows: usize) -> Result<(), EmbedError> {
        let mut prev_end = 0u32;
        let mut prev_id: Option<u32> = None;
        for (i, s) in self.0.iter().enumerate() {
            let field = |name: &str| format!("spans[{i}].{name}");
            if s.token_start > s.token_end {
                return Err(format_err(field("token_start"), "start after end"));
            }
            if s.token_end as usize > rows {
                return Err(format_err(
                    field("token_end"),
                    format!("end {} exceeds matrix rows {rows}", s.token_end),
                ));
            }
            if s.token_start < prev_end {
                return Err(format_err(field("token_start"), "spans overlap or are unsorted"));
            }
            if prev_id.is_some_and(|p| s.unit_id <= p) {
                return Err(format_err(field("unit_id"), "unit ids must increase"));
            }
            prev_end = s.token_end;
            prev_id = Some(s.unit_id);
        }
        Ok(())
    }

    /// Same number of units with the same ids and roles, position by position.
    pub fn same_structure(&self, other: &SpanIndex) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.unit_id == b.unit_id && a.role == b.role)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Base,
    /// The graph with this entity replaced by the unknown token.
    Unk(String),
    /// The entity encoded on its own.
    Standalone(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub graph_id: String,
    pub permutation_index: u32,
    pub variant: Variant,
    pub encoder_tag: String,
    pub matrix: Array2<f32>,
    pub spans: SpanIndex,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BundleKey {
    pub graph_id: String,
    pub permutation_index: u32,
    pub variant: Variant,
    pub encoder_tag: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    graph_id: String,
    permutation_index: u32,
    variant: Variant,
    encoder_tag: String,
    rows: u32,
    cols: u32,
    spans: SpanIndex,
}

impl EmbeddingBundle {
    pub fn key(&self) -> BundleKey {
        BundleKey {
            graph_id: self.graph_id.clone(),
            permutation_index: self.permutation_index,
            variant: self.variant.clone(),
            encoder_tag: self.encoder_tag.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if let Some(((r, c), _)) = self.matrix.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(format_err("matrix", format!("non-finite value at row {r}, column {c}")));
        }
        self.spans.validate(self.matrix.nrows())
    }
}

pub fn sidecar_path(matrix_path: &Path) -> PathBuf {
    matrix_path.with_extension("json")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EmbedError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn encode_matrix(matrix: &Array2<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + matrix.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(matrix.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(matrix.ncols() as u32).to_le_bytes());
    for v in matrix.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Array2<f32>, EmbedError> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err("header", format!("{} bytes, need {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(format_err("magic", "expected EMBX0001"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format_err("rows", "rows × cols overflows"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(format_err(
            "data",
            format!("{rows}×{cols} matrix needs {expected} bytes, file has {}", body.len()),
        ));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| format_err("data", e.to_string()))
}

pub fn write_matrix(path: &Path, matrix: &Array2<f32>) -> Result<(), EmbedError> {
    write_atomic(path, &encode_matrix(matrix))
}

pub fn read_matrix(path: &Path) -> Result<Array2<f32>, EmbedError> {
    decode_matrix(&fs::read(path).map_err(io_err(path))?)
}

/// Writes `<path>` (matrix) and its sidecar.
pub fn write_bundle(bundle: &EmbeddingBundle, path: &Path) -> Result<(), EmbedError> {
    bundle.validate()?;
    let sidecar = Sidecar {
        graph_id: bundle.graph_id.clone(),
        permutation_index: bundle.permutation_index,
        variant: bundle.variant.clone(),
        encoder_tag: bundle.encoder_tag.clone(),
        rows: bundle.matrix.nrows() as u32,
        cols: bundle.matrix.ncols() as u32,
        spans: bundle.spans.clone(),
    };
    let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    write_matrix(path, &bundle.matrix)?;
    write_atomic(&sidecar_path(path), &json)
}

fn read_sidecar(path: &Path) -> Result<Sidecar, EmbedError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| EmbedError::Json { path: path.to_path_buf(), source })
}

pub fn read_bundle(path: &Path) -> Result<EmbeddingBundle, EmbedError> {
    let sidecar = read_sidecar(&sidecar_path(path))?;
    let matrix = read_matrix(path)?;
    if matrix.nrows() != sidecar.rows as usize {
        return Err(format_err(
            "rows",
            format!("sidecar says {}, matrix has {}", sidecar.rows, matrix.nrows()),
        ));
    }
    if matrix.ncols() != sidecar.cols as usize {
        return Err(format_err(
            "cols",
            format!("sidecar says {}, matrix has {}", sidecar.cols, matrix.ncols()),
        ));
    }
    let bundle = EmbeddingBundle {
        graph_id: sidecar.graph_id,
        permutation_index: sidecar.permutation_index,
        variant: sidecar.variant,
        encoder_tag: sidecar.encoder_tag,
        matrix,
        spans: sidecar.spans,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Span-averaged view of a bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledGraph {
    pub spans: SpanIndex,
    /// N × d, one row per unit
    pub unit_matrix: Array2<f64>,
    /// mean over units, length d
    pub dim_mean: Array1<f64>,
    /// mean over dimensions, length N
    pub tok_mean: Array1<f64>,
}

impl PooledGraph {
    /// Mean of the pooled rows of every entity unit with this surface.
    pub fn entity_vector(&self, surface: &str) -> Option<Array1<f64>> {
        let rows: Vec<usize> = self
            .spans
            .units()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_entity() && s.entity_surface == surface)
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            return None;
        }
        let mut acc = Array1::zeros(self.unit_matrix.ncols());
        for &r in &rows {
            acc += &self.unit_matrix.row(r);
        }
        Some(acc / rows.len() as f64)
    }

    pub fn mean_of_all_rows(matrix: &Array2<f32>) -> Array1<f64> {
        matrix.mapv(f64::from).mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(matrix.ncols()))
    }
}

pub fn span_pool(bundle: &EmbeddingBundle) -> Result<PooledGraph, EmbedError> {
    let units = bundle.spans.units();
    let d = bundle.matrix.ncols();
    let mut unit_matrix = Array2::<f64>::zeros((units.len(), d));
    for (i, s) in units.iter().enumerate() {
        if s.token_start >= s.token_end {
            return Err(EmbedError::EmptySpan { unit_id: s.unit_id });
        }
        let (start, end) = (s.token_start as usize, s.token_end as usize);
        if end > bundle.matrix.nrows() {
            return Err(format_err("token_end", format!("span {} past row {}", s.unit_id, end)));
        }
        let mut row = unit_matrix.row_mut(i);
        for t in start..end {
            row.zip_mut_with(&bundle.matrix.row(t), |acc, v| *acc += f64::from(*v));
        }
        row /= (end - start) as f64;
    }
    let dim_mean = unit_matrix
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(d));
    let tok_mean = unit_matrix
        .mean_axis(Axis(1))
        .unwrap_or_else(|| Array1::zeros(units.len()));
    Ok(PooledGraph { spans: bundle.spans.clone(), unit_matrix, dim_mean, tok_mean })
}

/// Directory of bundles indexed by their sidecars.
#[derive(Debug, Clone)]
pub struct BundleStore {
    root: PathBuf,
    index: HashMap<BundleKey, PathBuf>,
}

impl BundleStore {
    /// Creates the directory if needed and indexes every sidecar in it.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, EmbedError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let mut index = HashMap::new();
        for entry in fs::read_dir(&root).map_err(io_err(&root))? {
            let path = entry.map_err(io_err(&root))?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let matrix_path = path.with_extension(MATRIX_EXT);
                if !matrix_path.exists() {
                    continue;
                }
                let s = read_sidecar(&path)?;
                let key = BundleKey {
                    graph_id: s.graph_id,
                    permutation_index: s.permutation_index,
                    variant: s.variant,
                    encoder_tag: s.encoder_tag,
                };
                index.insert(key, matrix_path);
            }
        }
        Ok(BundleStore { root, index })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, key: &BundleKey) -> bool {
        self.index.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &BundleKey> {
        self.index.keys()
    }

    pub fn encoder_tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = self.index.keys().map(|k| k.encoder_tag.clone()).collect();
        tags.sort();
        tags.dedup();
        tags
    }

    fn file_name(key: &BundleKey) -> String {
        let digest = Sha256::digest(serde_json::to_vec(key).expect("key serializes"));
        let hex: String = digest.iter().take(12).map(|b| format!("{b:02x}")).collect();
        format!("{hex}.{MATRIX_EXT}")
    }

    pub fn put(&mut self, bundle: &EmbeddingBundle) -> Result<PathBuf, EmbedError> {
        let key = bundle.key();
        let path = self.root.join(Self::file_name(&key));
        write_bundle(bundle, &path)?;
        self.index.insert(key, path.clone());
        Ok(path)
    }

    pub fn get(&self, key: &BundleKey) -> Option<Result<EmbeddingBundle, EmbedError>> {
        self.index.get(key).map(|p| read_bundle(p))
    }
}

/// Random unit vectors standing in for encoder outputs, with a shared
/// `<unk>` vector and controllable signal attenuation for chosen units.
#[derive(Debug, Clone)]
pub struct SynthGenerator {
    dim: usize,
    unk: Array1<f64>,
}

/// One synthetic graph: its base bundle, one `<unk>` variant per entity,
/// standalone entity bundles, and the gold status of every entity.
#[derive(Debug, Clone)]
pub struct SynthGraph {
    pub graph: RdfGraph,
    pub base: EmbeddingBundle,
    pub unk_variants: Vec<EmbeddingBundle>,
    pub standalone: Vec<EmbeddingBundle>,
    /// entity surface → 0 (weak) or 1 (strong)
    pub labels: Vec<(String, u8)>,
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

impl SynthGenerator {
    pub fn new(dim: usize, seed: u64) -> Result<Self, EmbedError> {
        if dim < 2 {
            return Err(EmbedError::Synth(format!("dimension {dim} < 2")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x756e_6b00);
        Ok(SynthGenerator { dim, unk: random_unit(&mut rng, dim) })
    }

    pub fn unk_vector(&self) -> &Array1<f64> {
        &self.unk
    }

    /// `n_units` must be a multiple of 3 (subject, property, object per
    /// triple); unit `i` sits on token row `i`.
    pub fn graph(
        &self,
        graph_id: &str,
        n_units: usize,
        alpha: f64,
        weak_unit_ids: &[usize],
        seed: u64,
    ) -> Result<SynthGraph, EmbedError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(EmbedError::Synth(format!("alpha {alpha} outside [0, 1]")));
        }
        if n_units == 0 || n_units % 3 != 0 || n_units / 3 > crate::corpus::MAX_TRIPLES {
            return Err(EmbedError::Synth(format!("{n_units} units is not 3 × (1..=7) triples")));
        }
        if let Some(bad) = weak_unit_ids.iter().find(|&&u| u >= n_units) {
            return Err(EmbedError::Synth(format!("weak unit {bad} out of range")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_triples = n_units / 3;
        let triples: Vec<Triple> = (0..n_triples)
            .map(|t| {
                Triple::new(format!("{graph_id}_s{t}"), format!("prop{t}"), format!("{graph_id}_o{t}"))
                    .expect("non-empty fields")
            })
            .collect();
        let graph = RdfGraph {
            graph_id: graph_id.to_string(),
            triples,
            subset: Subset::ALL[(seed % Subset::ALL.len() as u64) as usize],
            category: String::new(),
        };
        let spans = SpanIndex(
            graph
                .triples
                .iter()
                .flat_map(|t| {
                    [(Role::Subject, &t.subject), (Role::Property, &t.property), (Role::Object, &t.object)]
                })
                .enumerate()
                .map(|(i, (role, surface))| Span {
                    unit_id: i as u32,
                    role,
                    entity_surface: surface.clone(),
                    token_start: i as u32,
                    token_end: i as u32 + 1,
                })
                .collect(),
        );

        let clean: Vec<Array1<f64>> = (0..n_units).map(|_| random_unit(&mut rng, self.dim)).collect();
        let mut rows = clean.clone();
        for &w in weak_unit_ids {
            let mixed = &clean[w] * alpha + &self.unk * (1.0 - alpha);
            let norm = mixed.dot(&mixed).sqrt();
            rows[w] = if norm > 0.0 { mixed / norm } else { self.unk.clone() };
        }
        let to_matrix = |rows: &[Array1<f64>]| {
            Array2::from_shape_fn((rows.len(), self.dim), |(i, j)| rows[i][j] as f32)
        };
        let encoder_tag = format!("synth-d{}", self.dim);
        let bundle = |variant: Variant, matrix: Array2<f32>, spans: SpanIndex| EmbeddingBundle {
            graph_id: graph_id.to_string(),
            permutation_index: 0,
            variant,
            encoder_tag: encoder_tag.clone(),
            matrix,
            spans,
        };

        let base = bundle(Variant::Base, to_matrix(&rows), spans.clone());
        let mut unk_variants = Vec::new();
        let mut standalone = Vec::new();
        let mut labels = Vec::new();
        for (i, s) in spans.units().iter().enumerate().filter(|(_, s)| s.is_entity()) {
            let mut replaced = rows.clone();
            replaced[i] = self.unk.clone();
            let mut unk_spans = spans.clone();
            unk_spans.0[i].entity_surface = "<unk>".into();
            unk_variants.push(bundle(
                Variant::Unk(s.entity_surface.clone()),
                to_matrix(&replaced),
                unk_spans,
            ));
            standalone.push(bundle(
                Variant::Standalone(s.entity_surface.clone()),
                to_matrix(std::slice::from_ref(&clean[i])),
                SpanIndex(vec![Span {
                    unit_id: 0,
                    role: s.role,
                    entity_surface: s.entity_surface.clone(),
                    token_start: 0,
                    token_end: 1,
                }]),
            ));
            labels.push((s.entity_surface.clone(), u8::from(!weak_unit_ids.contains(&i))));
        }
        Ok(SynthGraph { graph, base, unk_variants, standalone, labels })
    }
}

/// Single synthetic graph with its own `<unk>` vector.
pub fn synth_bundle(
    n_units: usize,
    dim: usize,
    alpha: f64,
    weak_unit_ids: &[usize],
    seed: u64,
) -> Result<SynthGraph, EmbedError> {
    SynthGenerator::new(dim, seed)?.graph("synth", n_units, alpha, weak_unit_ids, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpusConfig {
    pub n_graphs: usize,
    pub dim: usize,
    pub alpha: f64,
    /// Graph sizes cycle through `1..=max_triples`.
    pub max_triples: usize,
    pub seed: u64,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        SynthCorpusConfig { n_graphs: 1000, dim: 64, alpha: 0.2, max_triples: 4, seed: 0 }
    }
}

/// A complete synthetic corpus: records, manual + auto annotations (one weak
/// entity per graph, labelled omitted) and every bundle.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub records: Vec<GenerationRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub graphs: Vec<SynthGraph>,
}

impl SynthCorpus {
    pub fn bundles(&self) -> impl Iterator<Item = &EmbeddingBundle> {
        self.graphs.iter().flat_map(|g| {
            std::iter::once(&g.base).chain(&g.unk_variants).chain(&g.standalone)
        })
    }

    /// In-memory lookup of pooled bundles, keyed like a [`BundleStore`].
    pub fn pooled(&self) -> Result<HashMap<BundleKey, PooledGraph>, EmbedError> {
        self.bundles().map(|b| Ok((b.key(), span_pool(b)?))).collect()
    }
}

pub fn synth_corpus(config: &SynthCorpusConfig) -> Result<SynthCorpus, EmbedError> {
    if config.max_triples == 0 {
        return Err(EmbedError::Synth("max_triples must be ≥ 1".into()));
    }
    let generator = SynthGenerator::new(config.dim, config.seed)?;
    let mut picker = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut corpus = SynthCorpus { records: Vec::new(), annotations: Vec::new(), graphs: Vec::new() };
    for g in 0..config.n_graphs {
        let n_triples = 1 + g % config.max_triples;
        let entity_units: Vec<usize> = (0..3 * n_triples).filter(|u| u % 3 != 1).collect();
        let weak = entity_units[picker.random_range(0..entity_units.len())];
        let graph_seed = config.seed.wrapping_mul(1_000_003).wrapping_add(g as u64);
        let sg = generator.graph(&format!("g{g:05}"), 3 * n_triples, config.alpha, &[weak], graph_seed)?;

        let order: Vec<usize> = (0..n_triples).collect();
        corpus.records.push(GenerationRecord {
            graph_id: sg.graph.graph_id.clone(),
            permutation_index: 0,
            subset: sg.graph.subset,
            category: String::new(),
            triples: sg.graph.triples.clone(),
            linearization: linearize(&sg.graph, &order).expect("identity order"),
            decoding: Decoding::Greedy,
            text: String::new(),
        });
        let entities = sg
            .labels
            .iter()
            .flat_map(|(surface, label)| {
                let status = if *label == 0 { Status::O } else { Status::M };
                [Source::Manual, Source::Auto].map(|source| EntityStatus {
                    surface: surface.clone(),
                    status,
                    source,
                })
            })
            .collect();
        corpus.annotations.push(AnnotationRecord {
            graph_id: sg.graph.graph_id.clone(),
            permutation_index: 0,
            decoding: Decoding::Greedy,
            entities,
        });
        corpus.graphs.push(sg);
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn span(unit_id: u32, role: Role, start: u32, end: u32) -> Span {
        Span { unit_id, role, entity_surface: format!("u{unit_id}"), token_start: start, token_end: end }
    }

    fn small_bundle() -> EmbeddingBundle {
        EmbeddingBundle {
            graph_id: "g".into(),
            permutation_index: 2,
            variant: Variant::Unk("Turkey".into()),
            encoder_tag: "bart-large".into(),
            matrix: array![[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0], [-1.5, 0.25, 1e-7, 9.0]],
            spans: SpanIndex(vec![
                span(0, Role::Subject, 0, 1),
                span(1, Role::Property, 1, 2),
                span(2, Role::Object, 2, 3),
            ]),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.embx");
        let b = small_bundle();
        write_bundle(&b, &path).unwrap();
        assert!(dir.path().join("b.json").exists());
        assert_eq!(read_bundle(&path).unwrap(), b);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"EMBX0001");
        assert_eq!(bytes.len(), 16 + 12 * 4);
        assert_eq!(&bytes[8..16], &[3, 0, 0, 0, 4, 0, 0, 0]);
    }

    #[test]
    fn truncated_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.embx");
        write_bundle(&small_bundle(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_bundle(&path), Err(EmbedError::Format { field, .. }) if field == "data"));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_bundle(&path), Err(EmbedError::Format { field, .. }) if field == "magic"));

        let mut nan = bytes.clone();
        nan[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, &nan).unwrap();
        assert!(matches!(read_bundle(&path), Err(EmbedError::Format { field, .. }) if field == "matrix"));
    }

    #[test]
    fn sidecar_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.embx");
        let mut b = small_bundle();
        write_bundle(&b, &path).unwrap();
        // rewrite the matrix with a different width
        write_matrix(&path, &Array2::zeros((3, 5))).unwrap();
        assert!(matches!(read_bundle(&path), Err(EmbedError::Format { field, .. }) if field == "cols"));

        b.spans.0[2].token_end = 4;
        assert!(matches!(
            write_bundle(&b, &path),
            Err(EmbedError::Format { field, .. }) if field == "spans[2].token_end"
        ));
    }

    #[test]
    fn span_validation() {
        let ok = SpanIndex(vec![span(0, Role::Subject, 0, 2), span(1, Role::Property, 3, 4)]);
        assert!(ok.validate(4).is_ok());
        let overlap = SpanIndex(vec![span(0, Role::Subject, 0, 2), span(1, Role::Property, 1, 3)]);
        assert!(overlap.validate(4).is_err());
        let ids = SpanIndex(vec![span(1, Role::Subject, 0, 1), span(1, Role::Property, 1, 2)]);
        assert!(ids.validate(4).is_err());
    }

    #[test]
    fn pooling_examples() {
        let b = small_bundle();
        let p = span_pool(&b).unwrap();
        assert_eq!(p.unit_matrix, b.matrix.mapv(f64::from));

        let mut two = small_bundle();
        two.matrix = array![[1.0, 2.0], [1.0, 2.0], [3.0, 3.0]];
        two.spans = SpanIndex(vec![span(0, Role::Subject, 0, 2), span(1, Role::Object, 2, 3)]);
        let p = span_pool(&two).unwrap();
        assert_eq!(p.unit_matrix.row(0), array![1.0, 2.0]);
        assert_eq!(p.dim_mean, array![2.0, 2.5]);
        assert_eq!(p.tok_mean, array![1.5, 3.0]);
        assert_eq!(p.entity_vector("u1").unwrap(), array![3.0, 3.0]);
        assert!(p.entity_vector("nope").is_none());

        two.spans.0[1].token_start = 2;
        two.spans.0[1].token_end = 2;
        assert!(matches!(span_pool(&two), Err(EmbedError::EmptySpan { unit_id: 1 })));
    }

    #[test]
    fn six_by_two_brute_force() {
        let m = array![[0.3, -1.0], [2.0, 0.5], [1.1, 1.1], [-4.0, 2.0], [0.0, 0.25], [9.0, -3.0]];
        let mut b = small_bundle();
        b.matrix = m.clone();
        b.spans = SpanIndex(vec![span(0, Role::Subject, 0, 3), span(1, Role::Object, 3, 6)]);
        let p = span_pool(&b).unwrap();
        for (u, rows) in [(0, 0..3), (1, 3..6)] {
            for c in 0..2 {
                let mut acc = 0.0f64;
                for r in rows.clone() {
                    acc += f64::from(m[[r, c]]);
                }
                assert_abs_diff_eq!(p.unit_matrix[[u, c]], acc / 3.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn store_indexes_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = BundleStore::open(dir.path()).unwrap();
        let b = small_bundle();
        store.put(&b).unwrap();
        let reopened = BundleStore::open(dir.path()).unwrap();
        assert_eq!(reopened.len(), 1);
        assert_eq!(reopened.get(&b.key()).unwrap().unwrap(), b);
        assert_eq!(reopened.encoder_tags(), vec!["bart-large".to_string()]);
    }

    #[test]
    fn synth_construction() {
        assert!(synth_bundle(9, 8, 1.5, &[0], 1).is_err());
        assert!(synth_bundle(9, 1, 0.5, &[0], 1).is_err());
        assert!(synth_bundle(8, 8, 0.5, &[0], 1).is_err());
        assert!(synth_bundle(9, 8, 0.5, &[9], 1).is_err());

        let g = synth_bundle(9, 16, 0.0, &[2], 3).unwrap();
        assert_eq!(g.unk_variants.len(), 6);
        assert_eq!(g.labels.iter().filter(|l| l.1 == 0).count(), 1);
        // alpha = 0: the weak unit already is <unk>, so its variant equals the base
        let weak = &g.labels.iter().find(|l| l.1 == 0).unwrap().0;
        let v = g.unk_variants.iter().find(|b| b.variant == Variant::Unk(weak.clone())).unwrap();
        assert_eq!(v.matrix, g.base.matrix);
        assert!(v.spans.same_structure(&g.base.spans));
        for b in std::iter::once(&g.base).chain(&g.unk_variants).chain(&g.standalone) {
            b.validate().unwrap();
        }
    }

    #[test]
    fn synth_corpus_is_deterministic() {
        let cfg = SynthCorpusConfig { n_graphs: 12, dim: 8, ..Default::default() };
        let a = synth_corpus(&cfg).unwrap();
        let b = synth_corpus(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.annotations, b.annotations);
        assert_eq!(a.graphs[5].base, b.graphs[5].base);
        for (r, ann) in a.records.iter().zip(&a.annotations) {
            ann.validate().unwrap();
            assert_eq!(
                ann.statuses(Source::Manual).count(),
                r.graph().entities().len()
            );
        }
    }

    fn random_bundle(rows: usize, cols: usize, seed: u64) -> EmbeddingBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matrix = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-5.0f32..5.0));
        let mut spans = Vec::new();
        let mut t = 0u32;
        let mut id = 0u32;
        while (t as usize) < rows {
            let len = rng.random_range(1..=3).min(rows as u32 - t);
            let role = [Role::Subject, Role::Property, Role::Object][(id % 3) as usize];
            spans.push(span(id, role, t, t + len));
            t += len + rng.random_range(0..2);
            id += 1;
        }
        EmbeddingBundle {
            graph_id: format!("g{seed}"),
            permutation_index: 0,
            variant: Variant::Base,
            encoder_tag: "test".into(),
            matrix,
            spans: SpanIndex(spans),
        }
    }

    proptest! {
        #[test]
        fn pooling_commutes_with_dimension_permutation(seed in any::<u64>(), rows in 1usize..12, cols in 2usize..8) {
            let b = random_bundle(rows, cols, seed);
            let mut perm: Vec<usize> = (0..cols).rev().collect();
            perm.rotate_left(seed as usize % cols);
            let mut permuted = b.clone();
            permuted.matrix = Array2::from_shape_fn((rows, cols), |(r, c)| b.matrix[[r, perm[c]]]);
            let p = span_pool(&b).unwrap();
            let q = span_pool(&permuted).unwrap();
            for c in 0..cols {
                prop_assert!((q.dim_mean[c] - p.dim_mean[perm[c]]).abs() < 1e-12);
            }
        }

        #[test]
        fn unk_variant_changes_only_its_span(seed in any::<u64>(), rows in 2usize..12) {
            let base = random_bundle(rows, 4, seed);
            let target = (seed as usize) % base.spans.len();
            let s = &base.spans.units()[target];
            let mut variant = base.clone();
            for t in s.token_start..s.token_end {
                variant.matrix.row_mut(t as usize).fill(0.5);
            }
            let pb = span_pool(&base).unwrap();
            let pv = span_pool(&variant).unwrap();
            // replacing the target unit's pooled row in base reproduces the variant's dim_mean
            let mut patched = pb.unit_matrix.clone();
            patched.row_mut(target).assign(&pv.unit_matrix.row(target));
            let expect = patched.mean_axis(Axis(0)).unwrap();
            for c in 0..4 {
                prop_assert!((expect[c] - pv.dim_mean[c]).abs() < 1e-12);
            }
        }

        #[test]
        fn read_write_identity(seed in any::<u64>(), rows in 1usize..10, cols in 1usize..10) {
            let b = random_bundle(rows, cols, seed);
            let bytes = encode_matrix(&b.matrix);
            prop_assert_eq!(decode_matrix(&bytes).unwrap(), b.matrix);
        }
    }
}
