//! Triplesets, linearization, permutation augmentation, text deduplication
//! and the train/dev/test split used by the probes.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{AnnotationRecord, Source, Status};

pub const MAX_TRIPLES: usize = 7;
pub const DEFAULT_MAX_PERMUTATIONS: usize = 6;
pub const MIN_SPLIT_RECORDS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("triple field `{0}` is empty")]
    EmptyField(&'static str),
    #[error("graph `{graph_id}` has {n} triples, expected 1..={MAX_TRIPLES}")]
    TripleCount { graph_id: String, n: usize },
    #[error("order of length {got} is not a permutation of {expected} triples")]
    PermutationLength { expected: usize, got: usize },
    #[error("order is not a permutation: index {0} repeated or out of range")]
    PermutationIndex(usize),
    #[error("only {0} records have an omission or distortion; at least {MIN_SPLIT_RECORDS} are needed to split")]
    TooFewForSplit(usize),
    #[error("max_perms must be at least 1")]
    ZeroPermutations,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[String; 3]", into = "[String; 3]")]
pub struct Triple {
    pub subject: String,
    pub property: String,
    pub object: String,
}

impl Triple {
    pub fn new(
        subject: impl Into<String>,
        property: impl Into<String>,
        object: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let t = Triple {
            subject: subject.into().trim().to_string(),
            property: property.into().trim().to_string(),
            object: object.into().trim().to_string(),
        };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.subject.trim().is_empty() {
            return Err(CorpusError::EmptyField("subject"));
        }
        if self.property.trim().is_empty() {
            return Err(CorpusError::EmptyField("property"));
        }
        if self.object.trim().is_empty() {
            return Err(CorpusError::EmptyField("object"));
        }
        Ok(())
    }

    pub fn fields(&self) -> [&str; 3] {
        [&self.subject, &self.property, &self.object]
    }
}

impl TryFrom<[String; 3]> for Triple {
    type Error = CorpusError;

    fn try_from([s, p, o]: [String; 3]) -> Result<Self, Self::Error> {
        Triple::new(s, p, o)
    }
}

impl From<Triple> for [String; 3] {
    fn from(t: Triple) -> Self {
        [t.subject, t.property, t.object]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subset {
    WebnlgTrain,
    WebnlgDev,
    WebnlgTestSeen,
    WebnlgTestUnseen,
    Kelm,
}

impl Subset {
    pub const ALL: [Subset; 5] = [
        Subset::WebnlgTrain,
        Subset::WebnlgDev,
        Subset::WebnlgTestSeen,
        Subset::WebnlgTestUnseen,
        Subset::Kelm,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Subset::WebnlgTrain => "webnlg-train",
            Subset::WebnlgDev => "webnlg-dev",
            Subset::WebnlgTestSeen => "webnlg-test-seen",
            Subset::WebnlgTestUnseen => "webnlg-test-unseen",
            Subset::Kelm => "kelm",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Subset::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown subset `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    Greedy,
    Beam,
    Topk,
    Topp,
}

impl Decoding {
    pub const ALL: [Decoding; 4] = [Decoding::Greedy, Decoding::Beam, Decoding::Topk, Decoding::Topp];

    pub fn as_str(&self) -> &'static str {
        match self {
            Decoding::Greedy => "greedy",
            Decoding::Beam => "beam",
            Decoding::Topk => "topk",
            Decoding::Topp => "topp",
        }
    }
}

impl fmt::Display for Decoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Decoding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Decoding::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown decoding strategy `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdfGraph {
    pub graph_id: String,
    pub triples: Vec<Triple>,
    pub subset: Subset,
    #[serde(default)]
    pub category: String,
}

impl RdfGraph {
    pub fn new(
        graph_id: impl Into<String>,
        triples: Vec<Triple>,
        subset: Subset,
        category: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let g = RdfGraph {
            graph_id: graph_id.into(),
            triples,
            subset,
            category: category.into(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let n = self.triples.len();
        if n == 0 || n > MAX_TRIPLES {
            return Err(CorpusError::TripleCount { graph_id: self.graph_id.clone(), n });
        }
        self.triples.iter().try_for_each(Triple::validate)
    }

    /// Distinct subject/object surfaces in first-occurrence order.
    pub fn entities(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for t in &self.triples {
            for e in [&t.subject, &t.object] {
                if seen.insert(e.as_str()) {
                    out.push(e.clone());
                }
            }
        }
        out
    }

    pub fn contains_entity(&self, surface: &str) -> bool {
        self.triples.iter().any(|t| t.subject == surface || t.object == surface)
    }
}

/// One line of the corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub graph_id: String,
    pub permutation_index: u32,
    pub subset: Subset,
    #[serde(default)]
    pub category: String,
    /// Triples in the permuted order used for this record.
    pub triples: Vec<Triple>,
    pub linearization: String,
    pub decoding: Decoding,
    #[serde(default)]
    pub text: String,
}

impl GenerationRecord {
    pub fn graph(&self) -> RdfGraph {
        RdfGraph {
            graph_id: self.graph_id.clone(),
            triples: self.triples.clone(),
            subset: self.subset,
            category: self.category.clone(),
        }
    }

    pub fn key(&self) -> RecordKey {
        RecordKey {
            graph_id: self.graph_id.clone(),
            permutation_index: self.permutation_index,
        }
    }
}

/// Identifies one (permuted graph, text) record.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordKey {
    pub graph_id: String,
    pub permutation_index: u32,
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.graph_id, self.permutation_index)
    }
}

fn check_permutation(order: &[usize], n: usize) -> Result<(), CorpusError> {
    if order.len() != n {
        return Err(CorpusError::PermutationLength { expected: n, got: order.len() });
    }
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || seen[i] {
            return Err(CorpusError::PermutationIndex(i));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Flattens the triples in `order` into `"s p o s p o …"`.
pub fn linearize(graph: &RdfGraph, order: &[usize]) -> Result<String, CorpusError> {
    check_permutation(order, graph.triples.len())?;
    Ok(order
        .iter()
        .flat_map(|&i| graph.triples[i].fields())
        .collect::<Vec<_>>()
        .join(" "))
}

/// Builds the record for one permutation of `graph`, with an empty text.
pub fn permuted_record(
    graph: &RdfGraph,
    order: &[usize],
    permutation_index: u32,
    decoding: Decoding,
) -> Result<GenerationRecord, CorpusError> {
    let linearization = linearize(graph, order)?;
    Ok(GenerationRecord {
        graph_id: graph.graph_id.clone(),
        permutation_index,
        subset: graph.subset,
        category: graph.category.clone(),
        triples: order.iter().map(|&i| graph.triples[i].clone()).collect(),
        linearization,
        decoding,
        text: String::new(),
    })
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

fn factorial_capped(n: usize, cap: usize) -> usize {
    let mut acc: usize = 1;
    for k in 2..=n {
        acc = acc.saturating_mul(k);
        if acc > cap {
            return acc;
        }
    }
    acc
}

/// Triple orders to generate texts for.
///
/// Graphs of 2 or 3 triples (or any graph with at most `max_perms`
/// orders) get every order, lexicographic, identity first. Larger graphs
/// get `max_perms` distinct orders: the identity plus Fisher–Yates
/// shuffles, with repeats rejected.
pub fn permute_augment(
    n_triples: usize,
    max_perms: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, CorpusError> {
    if max_perms == 0 {
        return Err(CorpusError::ZeroPermutations);
    }
    if n_triples <= 1 {
        return Ok(vec![(0..n_triples).collect()]);
    }
    let total = factorial_capped(n_triples, max_perms);
    if n_triples <= 3 || total <= max_perms {
        return Ok(all_permutations(n_triples));
    }
    let identity: Vec<usize> = (0..n_triples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<usize>> = HashSet::from([identity.clone()]);
    let mut out = vec![identity.clone()];
    while out.len() < max_perms {
        let mut candidate = identity.clone();
        candidate.shuffle(&mut rng);
        if seen.insert(candidate.clone()) {
            out.push(candidate);
        }
    }
    Ok(out)
}

/// Keeps, per graph and decoding strategy, one record for each distinct text
/// (the lowest permutation index wins). Input order is preserved.
pub fn dedupe_texts(records: &[GenerationRecord]) -> Vec<GenerationRecord> {
    let mut winner: HashMap<(&str, Decoding, &str), (u32, usize)> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        let key = (r.graph_id.as_str(), r.decoding, r.text.as_str());
        winner
            .entry(key)
            .and_modify(|w| {
                if r.permutation_index < w.0 {
                    *w = (r.permutation_index, i);
                }
            })
            .or_insert((r.permutation_index, i));
    }
    let keep: HashSet<usize> = winner.values().map(|w| w.1).collect();
    records
        .iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, r)| r.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// Split membership of every eligible record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub source: Source,
    pub assignments: BTreeMap<String, BTreeMap<u32, Split>>,
}

impl SplitAssignment {
    pub fn get(&self, key: &RecordKey) -> Option<Split> {
        self.assignments
            .get(&key.graph_id)
            .and_then(|m| m.get(&key.permutation_index))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.assignments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignments
            .values()
            .flat_map(BTreeMap::values)
            .filter(|s| **s == split)
            .count()
    }
}

/// Share of distinct omitted/distorted entity surfaces occurring in each split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub eligible_records: usize,
    pub counts: BTreeMap<Split, usize>,
    pub distinct_entities: usize,
    pub entity_share: BTreeMap<Split, f64>,
}

/// Target split sizes for `n` records: 70/15/15 rounded, remainder to test.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let train = (0.70 * n as f64).round() as usize;
    let dev = ((0.15 * n as f64).round() as usize).min(n - train);
    [train, dev, n - train - dev]
}

/// Assigns every record with at least one omitted or distorted entity (under
/// `source`) to train/dev/test, 70/15/15 by record count.
pub fn split_dataset(
    annotations: &[AnnotationRecord],
    source: Source,
    seed: u64,
) -> Result<(SplitAssignment, CoverageReport), CorpusError> {
    let mut eligible: BTreeMap<RecordKey, Vec<&str>> = BTreeMap::new();
    for a in annotations {
        let negatives: Vec<&str> = a
            .entities
            .iter()
            .filter(|e| e.source == source && e.status != Status::M)
            .map(|e| e.surface.as_str())
            .collect();
        if !negatives.is_empty() {
            eligible.entry(a.key()).or_default().extend(negatives);
        }
    }
    if eligible.len() < MIN_SPLIT_RECORDS {
        return Err(CorpusError::TooFewForSplit(eligible.len()));
    }

    let mut keys: Vec<&RecordKey> = eligible.keys().collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [n_train, n_dev, _] = split_sizes(keys.len());

    let mut assignment = SplitAssignment { seed, source, ..Default::default() };
    let mut entities_in: BTreeMap<Split, BTreeSet<&str>> = BTreeMap::new();
    for (i, key) in keys.iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
        assignment
            .assignments
            .entry(key.graph_id.clone())
            .or_default()
            .insert(key.permutation_index, split);
        entities_in.entry(split).or_default().extend(eligible[*key].iter().copied());
    }

    let all: BTreeSet<&str> = eligible.values().flatten().copied().collect();
    let report = CoverageReport {
        eligible_records: keys.len(),
        counts: Split::ALL.iter().map(|s| (*s, assignment.count(*s))).collect(),
        distinct_entities: all.len(),
        entity_share: Split::ALL
            .iter()
            .map(|s| {
                let n = entities_in.get(s).map_or(0, BTreeSet::len);
                (*s, n as f64 / all.len() as f64)
            })
            .collect(),
    };
    Ok((assignment, report))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::annotate::EntityStatus;
    use proptest::prelude::*;

    pub(crate) fn figure_one_graph() -> RdfGraph {
        let t = |s: &str, p: &str, o: &str| Triple::new(s, p, o).unwrap();
        RdfGraph::new(
            "fig1",
            vec![
                t("Nurhan_Atasoy", "award", "State_Award_for_Superior_Achievement"),
                t("Istanbul", "populationMetroDensity", "2691.0"),
                t("Nurhan_Atasoy", "residence", "Turkey"),
                t("Nurhan_Atasoy", "birthPlace", "Reşadiye"),
                t("Nurhan_Atasoy", "residence", "Istanbul"),
            ],
            Subset::WebnlgTrain,
            "Scientist",
        )
        .unwrap()
    }

    fn graph_of(n: usize) -> RdfGraph {
        let triples = (0..n)
            .map(|i| Triple::new(format!("s{i}"), format!("p{i}"), format!("o{i}")).unwrap())
            .collect();
        RdfGraph::new("g", triples, Subset::Kelm, "").unwrap()
    }

    #[test]
    fn triple_rejects_blank_fields() {
        assert_eq!(Triple::new("a", "  ", "b"), Err(CorpusError::EmptyField("property")));
        let t: Result<Triple, _> = serde_json::from_str(r#"["a","b",""]"#);
        assert!(t.is_err());
    }

    #[test]
    fn graph_size_bounds() {
        assert!(RdfGraph::new("g", vec![], Subset::Kelm, "").is_err());
        let eight: Vec<Triple> =
            (0..8).map(|i| Triple::new("a", "b", format!("c{i}")).unwrap()).collect();
        assert!(matches!(
            RdfGraph::new("g", eight, Subset::Kelm, ""),
            Err(CorpusError::TripleCount { n: 8, .. })
        ));
    }

    #[test]
    fn entities_are_deduplicated() {
        let g = figure_one_graph();
        assert_eq!(
            g.entities(),
            vec![
                "Nurhan_Atasoy",
                "State_Award_for_Superior_Achievement",
                "Istanbul",
                "2691.0",
                "Turkey",
                "Reşadiye"
            ]
        );
    }

    #[test]
    fn linearize_examples() {
        let g = graph_of(1);
        assert_eq!(linearize(&g, &[0]).unwrap(), "s0 p0 o0");
        let g = graph_of(2);
        assert_eq!(linearize(&g, &[1, 0]).unwrap(), "s1 p1 o1 s0 p0 o0");
        let fig = figure_one_graph();
        let lin = linearize(&fig, &[0, 1, 2, 3, 4]).unwrap();
        assert!(lin.starts_with("Nurhan_Atasoy award State_Award_for_Superior_Achievement"));
        assert!(lin.ends_with("Nurhan_Atasoy residence Istanbul"));
    }

    #[test]
    fn linearize_rejects_bad_orders() {
        let g = graph_of(3);
        assert_eq!(
            linearize(&g, &[0, 1]),
            Err(CorpusError::PermutationLength { expected: 3, got: 2 })
        );
        assert_eq!(linearize(&g, &[0, 1, 1]), Err(CorpusError::PermutationIndex(1)));
        assert_eq!(linearize(&g, &[0, 1, 3]), Err(CorpusError::PermutationIndex(3)));
    }

    #[test]
    fn permutation_counts() {
        assert_eq!(permute_augment(1, 6, 0).unwrap(), vec![vec![0]]);
        assert_eq!(permute_augment(2, 6, 0).unwrap(), vec![vec![0, 1], vec![1, 0]]);
        assert_eq!(permute_augment(3, 6, 0).unwrap().len(), 6);
        assert_eq!(permute_augment(3, 6, 0).unwrap()[0], vec![0, 1, 2]);
        assert_eq!(permute_augment(3, 0, 0), Err(CorpusError::ZeroPermutations));
    }

    #[test]
    fn sampled_permutations_are_stable() {
        let a = permute_augment(5, 6, 42).unwrap();
        let b = permute_augment(5, 6, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert_eq!(a[0], vec![0, 1, 2, 3, 4]);
        let distinct: HashSet<_> = a.iter().collect();
        assert_eq!(distinct.len(), 6);
        assert_ne!(a, permute_augment(5, 6, 43).unwrap());
    }

    fn rec(graph: &str, perm: u32, text: &str) -> GenerationRecord {
        let g = graph_of(2);
        let mut r = permuted_record(&g, &[0, 1], perm, Decoding::Greedy).unwrap();
        r.graph_id = graph.into();
        r.text = text.into();
        r
    }

    #[test]
    fn dedupe_examples() {
        assert_eq!(dedupe_texts(&[rec("g", 0, "x"), rec("g", 1, "x")]).len(), 1);
        assert_eq!(dedupe_texts(&[rec("g", 0, "x"), rec("g", 1, "y")]).len(), 2);
        // different graphs never collapse
        assert_eq!(dedupe_texts(&[rec("g", 0, "x"), rec("h", 0, "x")]).len(), 2);
        // lowest permutation index wins even when it comes later
        let out = dedupe_texts(&[rec("g", 3, "x"), rec("g", 1, "y"), rec("g", 2, "x")]);
        assert_eq!(
            out.iter().map(|r| r.permutation_index).collect::<Vec<_>>(),
            vec![1, 2]
        );
    }

    fn annotated(graph: &str, perm: u32, statuses: &[(&str, Status)]) -> AnnotationRecord {
        AnnotationRecord {
            graph_id: graph.into(),
            permutation_index: perm,
            decoding: Decoding::Greedy,
            entities: statuses
                .iter()
                .map(|(s, st)| EntityStatus {
                    surface: (*s).into(),
                    status: *st,
                    source: Source::Manual,
                })
                .collect(),
        }
    }

    fn hundred_records() -> Vec<AnnotationRecord> {
        let mut v: Vec<AnnotationRecord> = (0..100)
            .map(|i| {
                annotated(
                    &format!("g{i}"),
                    0,
                    &[(&format!("e{}", i % 37), Status::O), ("x", Status::M)],
                )
            })
            .collect();
        // ineligible: nothing omitted
        v.push(annotated("clean", 0, &[("x", Status::M)]));
        v
    }

    #[test]
    fn split_counts_and_determinism() {
        let data = hundred_records();
        let (a, report) = split_dataset(&data, Source::Manual, 7).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(report.counts[&Split::Train], 70);
        assert_eq!(report.counts[&Split::Dev], 15);
        assert_eq!(report.counts[&Split::Test], 15);
        assert_eq!(report.distinct_entities, 37);
        assert!(a.get(&RecordKey { graph_id: "clean".into(), permutation_index: 0 }).is_none());

        let (b, _) = split_dataset(&data, Source::Manual, 7).unwrap();
        assert_eq!(a, b);
        let (c, report_c) = split_dataset(&data, Source::Manual, 8).unwrap();
        assert_ne!(a.assignments, c.assignments);
        assert_eq!(report.counts, report_c.counts);
    }

    #[test]
    fn split_refuses_small_inputs() {
        let data: Vec<_> = (0..9).map(|i| annotated(&format!("g{i}"), 0, &[("e", Status::D)])).collect();
        assert_eq!(split_dataset(&data, Source::Manual, 0), Err(CorpusError::TooFewForSplit(9)));
        assert_eq!(
            split_dataset(&data, Source::Auto, 0),
            Err(CorpusError::TooFewForSplit(0))
        );
    }

    proptest! {
        #[test]
        fn augment_yields_valid_permutations(n in 1usize..=7, max in 1usize..10, seed in any::<u64>()) {
            let perms = permute_augment(n, max, seed).unwrap();
            let identity: Vec<usize> = (0..n).collect();
            prop_assert!(perms.contains(&identity));
            let distinct: HashSet<_> = perms.iter().collect();
            prop_assert_eq!(distinct.len(), perms.len());
            for p in &perms {
                let mut sorted = p.clone();
                sorted.sort_unstable();
                prop_assert_eq!(&sorted, &identity);
            }
            prop_assert_eq!(&perms, &permute_augment(n, max, seed).unwrap());
        }

        #[test]
        fn split_sizes_within_one(n in 10usize..5000) {
            let [a, b, c] = split_sizes(n);
            prop_assert_eq!(a + b + c, n);
            for (got, frac) in [(a, 0.70), (b, 0.15), (c, 0.15)] {
                prop_assert!((got as f64 - frac * n as f64).abs() <= 1.0);
            }
        }

        #[test]
        fn linearization_differs_iff_reordered(n in 2usize..=5, seed in any::<u64>()) {
            // duplicate triples make some reorderings invisible
            let mut triples: Vec<Triple> = (0..n)
                .map(|i| Triple::new(format!("s{i}"), "p", format!("o{i}")).unwrap())
                .collect();
            triples[n - 1] = triples[0].clone();
            let g = RdfGraph::new("g", triples, Subset::Kelm, "").unwrap();
            let perms = permute_augment(n, 24, seed).unwrap();
            for a in &perms {
                for b in &perms {
                    let same_seq = a.iter().zip(b).all(|(i, j)| g.triples[*i] == g.triples[*j]);
                    prop_assert_eq!(
                        linearize(&g, a).unwrap() == linearize(&g, b).unwrap(),
                        same_seq
                    );
                }
            }
        }
    }
}
