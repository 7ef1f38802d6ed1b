//! Corpus, annotation and regression subcommands.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use log::info;
use serde::Serialize;

use omiprobe::annotate::{
    corpus_prf, decoding_iou, kappa_between, AnnotationRecord, MentionDetector, Source, Status, DEFAULT_THRESHOLD,
};
use omiprobe::corpus::{
    dedupe_texts, permute_augment, permuted_record, Decoding, GenerationRecord, RdfGraph, Split,
    DEFAULT_MAX_PERMUTATIONS,
};
use omiprobe::embed_store::{synth_corpus, BundleStore, SynthCorpusConfig};
use omiprobe::feature_reg::{
    feature_table, feature_tsv, feature_weights_report, train_logreg, CorpusStats, LogRegConfig,
};
use omiprobe::probe_mlp::Flavor;

use crate::io::{read_json, read_jsonl, write_json, write_jsonl, write_text, Out};

#[derive(Args, Debug, Serialize)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["graphs", "corpus"]))]
pub struct AugmentArgs {
    /// RDF graphs, one JSON object per line
    #[arg(long)]
    pub graphs: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_PERMUTATIONS)]
    pub max_perms: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// decoding strategies to emit records for
    #[arg(long, value_delimiter = ',', default_value = "greedy")]
    pub decodings: Vec<Decoding>,
    /// generated corpus to deduplicate instead
    #[arg(long, requires = "dedupe")]
    pub corpus: Option<PathBuf>,
    #[arg(long, requires = "corpus")]
    pub dedupe: bool,
}

#[derive(Serialize)]
struct AugmentResult {
    mode: &'static str,
    n_input: usize,
    n_output: usize,
    output: PathBuf,
    per_graph: BTreeMap<String, usize>,
}

pub fn augment(args: &AugmentArgs, out: &Out) -> Result<()> {
    let (mode, n_input, records, name) = if let Some(path) = &args.corpus {
        let records: Vec<GenerationRecord> = read_jsonl(path)?;
        let kept = dedupe_texts(&records);
        ("dedupe", records.len(), kept, "corpus.dedup.jsonl")
    } else {
        let path = args.graphs.as_ref().expect("clap requires graphs or corpus");
        let graphs: Vec<RdfGraph> = read_jsonl(path)?;
        let mut records = Vec::new();
        for (i, g) in graphs.iter().enumerate() {
            g.validate().with_context(|| format!("{}:{}", path.display(), i + 1))?;
            let seed = args.seed.wrapping_add(i as u64);
            for (p, order) in permute_augment(g.triples.len(), args.max_perms, seed)?.iter().enumerate() {
                for d in &args.decodings {
                    records.push(permuted_record(g, order, p as u32, *d)?);
                }
            }
        }
        ("permute", graphs.len(), records, "corpus.jsonl")
    };
    let output = out.path(name);
    write_jsonl(&output, &records)?;
    let mut per_graph: BTreeMap<String, usize> = BTreeMap::new();
    for r in &records {
        *per_graph.entry(r.graph_id.clone()).or_default() += 1;
    }
    let mut tsv = String::from("graph_id\trecords\n");
    for (g, n) in &per_graph {
        let _ = writeln!(tsv, "{g}\t{n}");
    }
    let result = AugmentResult { mode, n_input, n_output: records.len(), output, per_graph };
    out.report("augment", args, &result, &tsv)
}

#[derive(Args, Debug, Serialize)]
pub struct AnnotateArgs {
    /// generated corpus with texts
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// manual annotations to merge with and score against
    #[arg(long)]
    pub annotations: Option<PathBuf>,
}

#[derive(Serialize)]
struct StatusCounts {
    mentioned: usize,
    omitted: usize,
    distorted: usize,
}

impl StatusCounts {
    fn of(records: &[AnnotationRecord], source: Source) -> Self {
        let mut c = StatusCounts { mentioned: 0, omitted: 0, distorted: 0 };
        for (_, s) in records.iter().flat_map(|r| r.statuses(source)) {
            match s {
                Status::M => c.mentioned += 1,
                Status::O => c.omitted += 1,
                Status::D => c.distorted += 1,
            }
        }
        c
    }
}

#[derive(Serialize)]
struct AnnotateResult {
    n_texts: usize,
    output: PathBuf,
    auto: StatusCounts,
    manual: Option<StatusCounts>,
    prf: Option<omiprobe::annotate::Prf>,
}

pub fn annotate(args: &AnnotateArgs, out: &Out) -> Result<()> {
    let records: Vec<GenerationRecord> = read_jsonl(&args.corpus)?;
    let detector = MentionDetector::new(args.threshold)?;
    let mut merged = detector.annotate_corpus(&records);
    let mut manual_counts = None;
    if let Some(path) = &args.annotations {
        let manual: Vec<AnnotationRecord> = read_jsonl(path)?;
        manual_counts = Some(StatusCounts::of(&manual, Source::Manual));
        let mut by_key: HashMap<_, AnnotationRecord> =
            manual.into_iter().map(|r| ((r.key(), r.decoding), r)).collect();
        for rec in &mut merged {
            if let Some(m) = by_key.remove(&(rec.key(), rec.decoding)) {
                let mut entities: Vec<_> = m.entities.into_iter().filter(|e| e.source == Source::Manual).collect();
                entities.append(&mut rec.entities);
                rec.entities = entities;
            }
        }
        // manual records without a generated text are kept as they are
        let mut rest: Vec<AnnotationRecord> = by_key.into_values().collect();
        rest.sort_by_key(|r| (r.key(), r.decoding));
        merged.extend(rest);
    }
    for r in &merged {
        r.validate()?;
    }
    let output = out.path("annotations.jsonl");
    write_jsonl(&output, &merged)?;
    let prf = manual_counts.is_some().then(|| corpus_prf(&merged));
    let auto = StatusCounts::of(&merged, Source::Auto);
    let mut tsv = String::from("source\tmentioned\tomitted\tdistorted\n");
    let _ = writeln!(tsv, "auto\t{}\t{}\t{}", auto.mentioned, auto.omitted, auto.distorted);
    if let Some(m) = &manual_counts {
        let _ = writeln!(tsv, "manual\t{}\t{}\t{}", m.mentioned, m.omitted, m.distorted);
    }
    if let Some(p) = &prf {
        let _ = writeln!(tsv, "\nprecision\trecall\tf1\n{:.4}\t{:.4}\t{:.4}", p.precision, p.recall, p.f1);
    }
    let result = AnnotateResult { n_texts: records.len(), output, auto, manual: manual_counts, prf };
    out.report("annotate", args, &result, &tsv)
}

#[derive(Args, Debug, Serialize)]
pub struct AgreementArgs {
    /// manual annotations of the first annotator
    #[arg(long)]
    pub first: PathBuf,
    #[arg(long)]
    pub second: PathBuf,
}

pub fn agreement(args: &AgreementArgs, out: &Out) -> Result<()> {
    let a: Vec<AnnotationRecord> = read_jsonl(&args.first)?;
    let b: Vec<AnnotationRecord> = read_jsonl(&args.second)?;
    let (kappa, n_pairs) = kappa_between(&a, &b)?;
    let tsv = format!(
        "n_pairs\tkappa\tobserved\texpected\tdegenerate\n{n_pairs}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
        kappa.kappa, kappa.observed_agreement, kappa.expected_agreement, kappa.degenerate
    );
    #[derive(Serialize)]
    struct R {
        n_pairs: usize,
        kappa: omiprobe::annotate::Kappa,
    }
    out.report("agreement", args, &R { n_pairs, kappa }, &tsv)
}

fn parse_status(s: &str) -> Result<Status, String> {
    match s {
        "M" | "m" => Ok(Status::M),
        "O" | "o" => Ok(Status::O),
        "D" | "d" => Ok(Status::D),
        other => Err(format!("unknown status `{other}` (M|O|D)")),
    }
}

fn parse_pair(s: &str) -> Result<(Decoding, Decoding), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected `first:second`, got `{s}`"))?;
    Ok((a.parse()?, b.parse()?))
}

#[derive(Args, Debug, Serialize)]
pub struct DecodingIouArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value = "manual")]
    pub source: Source,
    #[arg(long, default_value = "O", value_parser = parse_status)]
    pub status: Status,
    /// strategy pairs such as `greedy:beam`; all six pairs by default
    #[arg(long, value_delimiter = ',', value_parser = parse_pair)]
    pub pairs: Vec<(Decoding, Decoding)>,
}

pub fn decoding_iou_cmd(args: &DecodingIouArgs, out: &Out) -> Result<()> {
    let annotations: Vec<AnnotationRecord> = read_jsonl(&args.annotations)?;
    let mut pairs = args.pairs.clone();
    if pairs.is_empty() {
        for (i, a) in Decoding::ALL.iter().enumerate() {
            for b in &Decoding::ALL[i + 1..] {
                pairs.push((*a, *b));
            }
        }
    }
    let reports = decoding_iou(&annotations, args.source, args.status, &pairs);
    let na = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.4}"));
    let mut tsv = String::from("first\tsecond\tn_texts\tmean\tmedian\texcluded_empty\tmissing\n");
    for r in &reports {
        let _ = writeln!(
            tsv,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.first,
            r.second,
            r.per_text.len(),
            na(r.mean),
            na(r.median),
            r.excluded_empty,
            r.missing
        );
    }
    out.report("decoding-iou", args, &reports, &tsv)
}

#[derive(Args, Debug, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// annotation source deciding which records are eligible
    #[arg(long, default_value = "manual")]
    pub source: Source,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn split(args: &SplitArgs, out: &Out) -> Result<()> {
    let annotations: Vec<AnnotationRecord> = read_jsonl(&args.annotations)?;
    let (assignment, coverage) = omiprobe::corpus::split_dataset(&annotations, args.source, args.seed)?;
    write_json(&out.path("assignment.json"), &assignment)?;
    let mut tsv = String::from("split\trecords\tentity_share\n");
    for s in Split::ALL {
        let _ = writeln!(tsv, "{s}\t{}\t{:.4}", coverage.counts[&s], coverage.entity_share[&s]);
    }
    out.report("split", args, &coverage, &tsv)
}

#[derive(Args, Debug, Serialize)]
pub struct RegressArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value = "manual-od")]
    pub flavor: Flavor,
    /// JSON object mapping entity surfaces to DBpedia types
    #[arg(long)]
    pub dbpedia_types: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 0.0)]
    pub l2: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iterations: usize,
}

pub fn regress(args: &RegressArgs, out: &Out) -> Result<()> {
    let records: Vec<GenerationRecord> = read_jsonl(&args.corpus)?;
    let annotations: Vec<AnnotationRecord> = read_jsonl(&args.annotations)?;
    let types: HashMap<String, String> = match &args.dbpedia_types {
        Some(p) => read_json(p)?,
        None => HashMap::new(),
    };
    let stats = CorpusStats::from_records(&records, types);
    let rows = feature_table(&records, &annotations, args.flavor, &stats)?;
    if rows.is_empty() {
        bail!("no annotated entities under flavor {}", args.flavor);
    }
    write_text(&out.path("features.tsv"), &feature_tsv(&rows))?;
    let config = LogRegConfig {
        seeds: args.seeds.clone(),
        l2: args.l2,
        max_iterations: args.max_iterations,
        ..Default::default()
    };
    let report = train_logreg(&rows, &config)?;
    if !report.all_converged {
        log::warn!("logistic regression hit the iteration cap on some seeds");
    }
    let weights = feature_weights_report(&report);
    let mut tsv = String::from("rank\tfeature\tcoefficient\tsign\n");
    for (i, w) in weights.ranking.iter().enumerate() {
        let _ = writeln!(tsv, "{}\t{}\t{:.6}\t{}", i + 1, w.feature, w.coefficient, w.sign);
    }
    #[derive(Serialize)]
    struct R {
        n_rows: usize,
        mean_train_f1_class0: f64,
        mean_test_f1_class0: f64,
        all_converged: bool,
        weights: omiprobe::feature_reg::WeightReport,
        runs: Vec<omiprobe::feature_reg::SeedRun>,
    }
    let result = R {
        n_rows: rows.len(),
        mean_train_f1_class0: report.mean_train_f1_class0,
        mean_test_f1_class0: report.mean_test_f1_class0,
        all_converged: report.all_converged,
        weights,
        runs: report.runs,
    };
    out.report("regress", args, &result, &tsv)
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    pub graphs: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// share of the true signal kept in each omitted entity's rows
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f64,
    #[arg(long, default_value_t = 4)]
    pub max_triples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// bundle directory; `<out>/bundles` by default
    #[arg(long)]
    pub bundles_dir: Option<PathBuf>,
}

pub fn synth(args: &SynthArgs, out: &Out) -> Result<()> {
    if args.graphs == 0 {
        return Err(anyhow!("--graphs must be positive"));
    }
    let config = SynthCorpusConfig {
        n_graphs: args.graphs,
        dim: args.dim,
        alpha: args.alpha,
        max_triples: args.max_triples,
        seed: args.seed,
    };
    let corpus = synth_corpus(&config)?;
    write_jsonl(&out.path("corpus.jsonl"), &corpus.records)?;
    write_jsonl(&out.path("annotations.jsonl"), &corpus.annotations)?;
    let dir = args.bundles_dir.clone().unwrap_or_else(|| out.path("bundles"));
    let mut store = BundleStore::open(&dir)?;
    let mut n_bundles = 0usize;
    for b in corpus.bundles() {
        store.put(b)?;
        n_bundles += 1;
    }
    info!("{n_bundles} bundles in {}", dir.display());
    let encoder_tag = format!("synth-d{}", args.dim);
    let tsv = format!(
        "graphs\trecords\tbundles\tencoder_tag\n{}\t{}\t{n_bundles}\t{encoder_tag}\n",
        corpus.graphs.len(),
        corpus.records.len()
    );
    #[derive(Serialize)]
    struct R {
        n_graphs: usize,
        n_records: usize,
        n_bundles: usize,
        encoder_tag: String,
        bundles_dir: PathBuf,
    }
    let result = R {
        n_graphs: corpus.graphs.len(),
        n_records: corpus.records.len(),
        n_bundles,
        encoder_tag,
        bundles_dir: dir,
    };
    out.report("synth", args, &result, &tsv)
}
