//! Probe subcommands: parameter-free similarity probe, MLP probes and their
//! controls.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use log::info;
use serde::Serialize;

use omiprobe::annotate::AnnotationRecord;
use omiprobe::corpus::{split_dataset, GenerationRecord, Split, SplitAssignment, Subset};
use omiprobe::embed_store::BundleStore;
use omiprobe::probe_free::{build_cases, proportion_probe, Pooling, Target};
use omiprobe::probe_mlp::{
    control_random_encoder, control_random_labels, correlate_probes, cross_transfer_eval, evaluate, grid_search,
    hard_examples_eval, load_model, metrics_tsv, partition, save_model, train_and_test, Dataset, EncoderRun,
    FeatureMode, Flavor, GridSpec, Metrics, Mlp, MlpConfig, ModelHeader, ProbeCorpus, ProbeExample,
};

use crate::io::{read_json, read_jsonl, write_json, write_text, Out};

#[derive(Args, Debug, Serialize)]
pub struct DataArgs {
    /// generation records (JSONL)
    #[arg(long)]
    pub corpus: PathBuf,
    /// annotation records (JSONL)
    #[arg(long)]
    pub annotations: PathBuf,
    /// directory of embedding bundles
    #[arg(long)]
    pub bundles: PathBuf,
    /// encoder tag; optional when the directory holds a single encoder or a
    /// model fixes it
    #[arg(long)]
    pub encoder: Option<String>,
}

struct Loaded {
    records: Vec<GenerationRecord>,
    annotations: Vec<AnnotationRecord>,
    store: BundleStore,
    encoder: String,
}

impl Loaded {
    fn corpus(&self) -> ProbeCorpus<'_> {
        self.corpus_for(&self.encoder)
    }

    fn corpus_for<'a>(&'a self, encoder_tag: &'a str) -> ProbeCorpus<'a> {
        ProbeCorpus {
            records: &self.records,
            annotations: &self.annotations,
            bundles: &self.store,
            encoder_tag,
        }
    }
}

impl DataArgs {
    fn load(&self, model_tag: Option<&str>) -> Result<Loaded> {
        if !self.bundles.is_dir() {
            bail!("bundle directory {} does not exist", self.bundles.display());
        }
        let store = BundleStore::open(&self.bundles)?;
        let tags = store.encoder_tags();
        let encoder = match (&self.encoder, model_tag) {
            (Some(t), _) => t.clone(),
            (None, Some(t)) => t.to_string(),
            (None, None) if tags.len() == 1 => tags[0].clone(),
            (None, None) => bail!("{} holds encoders {tags:?}; choose one with --encoder", self.bundles.display()),
        };
        if !tags.contains(&encoder) {
            bail!("no bundles for encoder `{encoder}` in {}", self.bundles.display());
        }
        Ok(Loaded {
            records: read_jsonl(&self.corpus)?,
            annotations: read_jsonl(&self.annotations)?,
            store,
            encoder,
        })
    }
}

#[derive(Args, Debug, Serialize)]
pub struct SplitOpts {
    /// `assignment.json` written by `split`; computed from the annotations
    /// when absent
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

impl SplitOpts {
    fn assignment(&self, annotations: &[AnnotationRecord], flavor: Flavor) -> Result<SplitAssignment> {
        match &self.split {
            Some(p) => {
                let a: SplitAssignment = read_json(p)?;
                if a.source != flavor.source() {
                    log::warn!("split was drawn from {} annotations, flavor {flavor} uses {}", a.source, flavor.source());
                }
                Ok(a)
            }
            None => Ok(split_dataset(annotations, flavor.source(), self.split_seed)?.0),
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct MlpArgs {
    /// 1 or 2
    #[arg(long, default_value_t = 2)]
    pub layers: u8,
    #[arg(long, default_value_t = 100)]
    pub hidden_size: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl MlpArgs {
    fn config(&self) -> Result<MlpConfig> {
        let c = MlpConfig {
            layers: self.layers,
            hidden_size: self.hidden_size,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
        };
        c.validate()?;
        Ok(c)
    }
}

struct Splits {
    train: Dataset,
    dev: Dataset,
    test: Dataset,
}

fn dataset(parts: &BTreeMap<Split, Vec<ProbeExample>>, split: Split, flavor: Flavor) -> Result<Dataset> {
    let examples = parts.get(&split).map(Vec::as_slice).unwrap_or_default();
    if examples.is_empty() {
        bail!("no {split} examples under flavor {flavor}");
    }
    Ok(Dataset::from_examples(examples)?)
}

fn splits_from(parts: BTreeMap<Split, Vec<ProbeExample>>, flavor: Flavor) -> Result<Splits> {
    Ok(Splits {
        train: dataset(&parts, Split::Train, flavor)?,
        dev: dataset(&parts, Split::Dev, flavor)?,
        test: dataset(&parts, Split::Test, flavor)?,
    })
}

fn build_splits(corpus: &ProbeCorpus<'_>, flavor: Flavor, mode: FeatureMode, assign: &SplitAssignment) -> Result<Splits> {
    let examples = corpus.build_examples(flavor, None, mode)?;
    splits_from(partition(examples, assign), flavor)
}

fn load_probe(path: &Path) -> Result<(Mlp, ModelHeader)> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn flavor_target(flavor: Flavor) -> Result<Target> {
    match flavor {
        Flavor::ManualO => Ok(Target::Omitted),
        Flavor::ManualD => Ok(Target::Distorted),
        Flavor::Auto => Ok(Target::Auto),
        Flavor::ManualOD => bail!("the similarity probe takes one negative status; use manual-o or manual-d"),
    }
}

#[derive(Args, Debug, Serialize)]
pub struct ProbeCosineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "manual-o")]
    pub flavor: Flavor,
    #[arg(long, default_value = "dimension")]
    pub pooling: Pooling,
    /// subsets reported separately; all by default
    #[arg(long, value_delimiter = ',')]
    pub subsets: Vec<Subset>,
}

pub fn probe_cosine(args: &ProbeCosineArgs, out: &Out) -> Result<()> {
    let target = flavor_target(args.flavor)?;
    let data = args.data.load(None)?;
    let cases = build_cases(&data.records, &data.annotations, target, &data.encoder, &data.store, args.pooling)?;
    if cases.is_empty() {
        bail!("no text has both a {} entity and a mention", target.label());
    }
    let subsets = if args.subsets.is_empty() { Subset::ALL.to_vec() } else { args.subsets.clone() };
    let report = proportion_probe(&cases, &subsets, target)?;
    info!("{} cases", cases.len());
    out.report("probe-cosine", args, &report, &report.to_tsv())
}

#[derive(Args, Debug, Serialize)]
pub struct ProbeTrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitOpts,
    #[arg(long, default_value = "manual-od")]
    pub flavor: Flavor,
    #[command(flatten)]
    pub mlp: MlpArgs,
    #[arg(long, default_value = "concat")]
    pub feature_mode: FeatureMode,
    /// search batch size, learning rate and hidden size on the dev split
    #[arg(long)]
    pub grid: bool,
    /// model file name inside the output directory
    #[arg(long, default_value = "probe")]
    pub model_name: String,
}

pub fn probe_train(args: &ProbeTrainArgs, out: &Out) -> Result<()> {
    let base = args.mlp.config()?;
    let data = args.data.load(None)?;
    let assign = args.split.assignment(&data.annotations, args.flavor)?;
    let s = build_splits(&data.corpus(), args.flavor, args.feature_mode, &assign)?;
    info!("train {} / dev {} / test {} examples", s.train.len(), s.dev.len(), s.test.len());

    let (model, config, report, grid) = if args.grid {
        let (model, grid) = grid_search(&GridSpec::standard(base), &s.train, &s.dev)?;
        write_text(&out.path("probe-train.grid.tsv"), &grid.to_tsv())?;
        write_json(&out.path("probe-train.best-config.json"), &grid.best)?;
        let mut report = grid.best_report.clone();
        report.test = Some(evaluate(&model, &s.test)?);
        (model, grid.best.clone(), report, Some(grid))
    } else {
        let (model, report) = train_and_test(&base, &s.train, &s.dev, &s.test)?;
        (model, base, report, None)
    };
    let test = report.test.clone().expect("set by train_and_test");
    let model_path = out.path(&format!("{}.json", args.model_name));
    save_model(&model_path, &model, &config, args.feature_mode, &data.encoder)?;

    #[derive(Serialize)]
    struct R {
        encoder_tag: String,
        model: PathBuf,
        n_train: usize,
        n_dev: usize,
        n_test: usize,
        report: omiprobe::probe_mlp::TrainReport,
        grid: Option<omiprobe::probe_mlp::GridResult>,
    }
    let tsv = metrics_tsv(&[(format!("{} {}", args.flavor, config.name()), test)]);
    let result = R {
        encoder_tag: data.encoder.clone(),
        model: model_path,
        n_train: s.train.len(),
        n_dev: s.dev.len(),
        n_test: s.test.len(),
        report,
        grid,
    };
    out.report("probe-train", args, &result, &tsv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvalOn {
    Train,
    Dev,
    Test,
    All,
}

#[derive(Args, Debug, Serialize)]
pub struct ProbeEvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitOpts,
    #[arg(long, default_value = "manual-od")]
    pub flavor: Flavor,
    /// model header written by `probe-train`
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub on: EvalOn,
}

fn eval_set(data: &Loaded, split: &SplitOpts, flavor: Flavor, mode: FeatureMode, on: EvalOn) -> Result<Dataset> {
    let examples = data.corpus().build_examples(flavor, None, mode)?;
    if on == EvalOn::All {
        if examples.is_empty() {
            bail!("no examples under flavor {flavor}");
        }
        return Ok(Dataset::from_examples(&examples)?);
    }
    let assign = split.assignment(&data.annotations, flavor)?;
    let which = match on {
        EvalOn::Train => Split::Train,
        EvalOn::Dev => Split::Dev,
        _ => Split::Test,
    };
    dataset(&partition(examples, &assign), which, flavor)
}

pub fn probe_eval(args: &ProbeEvalArgs, out: &Out) -> Result<()> {
    let (model, header) = load_probe(&args.model)?;
    let data = args.data.load(Some(&header.encoder_tag))?;
    let set = eval_set(&data, &args.split, args.flavor, header.feature_mode, args.on)?;
    let metrics = evaluate(&model, &set)?;
    let tsv = metrics_tsv(&[(args.flavor.to_string(), metrics.clone())]);
    out.report("probe-eval", args, &metrics, &tsv)
}

#[derive(Args, Debug, Serialize)]
pub struct HardExamplesArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitOpts,
    #[arg(long, default_value = "manual-od")]
    pub flavor: Flavor,
    #[arg(long)]
    pub model: PathBuf,
}

pub fn hard_examples(args: &HardExamplesArgs, out: &Out) -> Result<()> {
    let (model, header) = load_probe(&args.model)?;
    let data = args.data.load(Some(&header.encoder_tag))?;
    let all = data.corpus().build_examples(args.flavor, None, header.feature_mode)?;
    if all.is_empty() {
        bail!("no examples under flavor {}", args.flavor);
    }
    let corpus = Dataset::from_examples(&all)?;
    let assign = args.split.assignment(&data.annotations, args.flavor)?;
    let test = dataset(&partition(all, &assign), Split::Test, args.flavor)?;
    let report = hard_examples_eval(&model, &test, &corpus)?;
    let mut tsv = format!(
        "hard_surfaces\tn_test\tn_hard_test\tshare\n{}\t{}\t{}\t{:.4}\n",
        report.n_hard_surfaces, report.n_test, report.n_hard_test, report.share
    );
    if let Some(m) = &report.metrics {
        tsv.push('\n');
        tsv.push_str(&metrics_tsv(&[("hard".to_string(), m.clone())]));
    }
    out.report("hard-examples", args, &report, &tsv)
}

#[derive(Args, Debug, Serialize)]
pub struct TransferArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitOpts,
    #[arg(long)]
    pub model: PathBuf,
    /// flavors whose test sets the model is applied to
    #[arg(long, value_delimiter = ',', default_value = "manual-o,manual-d,manual-od,auto")]
    pub flavors: Vec<Flavor>,
}

pub fn transfer(args: &TransferArgs, out: &Out) -> Result<()> {
    let (model, header) = load_probe(&args.model)?;
    let data = args.data.load(Some(&header.encoder_tag))?;
    let mut rows = Vec::new();
    for flavor in &args.flavors {
        let test = eval_set(&data, &args.split, *flavor, header.feature_mode, EvalOn::Test)?;
        rows.push((flavor.to_string(), cross_transfer_eval(&model, &test)?));
    }
    let tsv = metrics_tsv(&rows);
    let result: BTreeMap<String, Metrics> = rows.into_iter().collect();
    out.report("transfer", args, &result, &tsv)
}

#[derive(Args, Debug, Serialize)]
pub struct CorrelateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitOpts,
    #[arg(long, default_value = "manual-od")]
    pub flavor: Flavor,
    #[arg(long)]
    pub model_a: PathBuf,
    #[arg(long)]
    pub model_b: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub on: EvalOn,
}

pub fn correlate(args: &CorrelateArgs, out: &Out) -> Result<()> {
    let (a, ha) = load_probe(&args.model_a)?;
    let (b, hb) = load_probe(&args.model_b)?;
    if ha.encoder_tag != hb.encoder_tag || ha.feature_mode != hb.feature_mode {
        bail!("the two models were trained on different encoders or feature modes");
    }
    let data = args.data.load(Some(&ha.encoder_tag))?;
    let set = eval_set(&data, &args.split, args.flavor, ha.feature_mode, args.on)?;
    let r = correlate_probes(&a, &b, &set)?;
    let tsv = format!(
        "n\tspearman\tspearman_p\tpearson\tpearson_p\n{}\t{:.4}\t{:.6e}\t{:.4}\t{:.6e}\n",
        r.n, r.spearman.coefficient, r.spearman.p_value, r.pearson.coefficient, r.pearson.p_value
    );
    out.report("correlate", args, &r, &tsv)
}

#[derive(Args, Debug, Serialize)]
pub struct ControlLabelsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitOpts,
    #[arg(long, default_value = "manual-od")]
    pub flavor: Flavor,
    #[command(flatten)]
    pub mlp: MlpArgs,
    #[arg(long, default_value = "concat")]
    pub feature_mode: FeatureMode,
    /// seed of the training label shuffle
    #[arg(long, default_value_t = 1)]
    pub control_seed: u64,
}

pub fn control_labels(args: &ControlLabelsArgs, out: &Out) -> Result<()> {
    let config = args.mlp.config()?;
    let data = args.data.load(None)?;
    let assign = args.split.assignment(&data.annotations, args.flavor)?;
    let s = build_splits(&data.corpus(), args.flavor, args.feature_mode, &assign)?;
    let (_, probe) = train_and_test(&config, &s.train, &s.dev, &s.test)?;
    let probe = probe.test.expect("set by train_and_test");
    let report = control_random_labels(&config, &s.train, &s.dev, &s.test, &probe, args.control_seed)?;
    let mut tsv = metrics_tsv(&[("probe".into(), report.probe.clone()), ("control".into(), report.control.clone())]);
    let _ = write!(
        tsv,
        "\nselectivity\n{}\n",
        report.selectivity.map_or("NA".to_string(), |v| format!("{v:.4}"))
    );
    out.report("control-labels", args, &report, &tsv)
}

#[derive(Args, Debug, Serialize)]
pub struct ControlEncoderArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitOpts,
    #[arg(long, default_value = "manual-od")]
    pub flavor: Flavor,
    #[command(flatten)]
    pub mlp: MlpArgs,
    #[arg(long, default_value = "concat")]
    pub feature_mode: FeatureMode,
    /// encoder tags of the randomly initialised encoders
    #[arg(long, value_delimiter = ',', required = true)]
    pub encoders: Vec<String>,
}

pub fn control_encoder(args: &ControlEncoderArgs, out: &Out) -> Result<()> {
    let config = args.mlp.config()?;
    let data = args.data.load(args.encoders.first().map(String::as_str))?;
    let tags = data.store.encoder_tags();
    let assign = args.split.assignment(&data.annotations, args.flavor)?;
    let mut runs = Vec::new();
    for tag in &args.encoders {
        if !tags.contains(tag) {
            bail!("no bundles for encoder `{tag}` in {}", args.data.bundles.display());
        }
        let s = build_splits(&data.corpus_for(tag), args.flavor, args.feature_mode, &assign)?;
        runs.push(EncoderRun { encoder_tag: tag.clone(), train: s.train, dev: s.dev, test: s.test });
    }
    let report = control_random_encoder(&config, &runs)?;
    let mut tsv = metrics_tsv(&report.per_encoder);
    let _ = write!(
        tsv,
        "\nmeasure\tmean\tstd\nf1_class0\t{:.4}\t{:.4}\nbalanced_accuracy\t{:.4}\t{:.4}\n",
        report.f1_class0.mean, report.f1_class0.std, report.balanced_accuracy.mean, report.balanced_accuracy.std
    );
    out.report("control-encoder", args, &report, &tsv)
}

#[derive(Args, Debug, Serialize)]
pub struct UpperBoundArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitOpts,
    #[arg(long, default_value = "manual-od")]
    pub flavor: Flavor,
    #[command(flatten)]
    pub mlp: MlpArgs,
    #[arg(long, default_value = "concat")]
    pub feature_mode: FeatureMode,
    /// seed for drawing entities absent from each graph
    #[arg(long, default_value_t = 0)]
    pub sample_seed: u64,
}

pub fn upper_bound(args: &UpperBoundArgs, out: &Out) -> Result<()> {
    let config = args.mlp.config()?;
    let data = args.data.load(None)?;
    let assign = args.split.assignment(&data.annotations, args.flavor)?;
    let corpus = data.corpus();
    let mut parts = BTreeMap::new();
    for (i, split) in Split::ALL.into_iter().enumerate() {
        let seed = args.sample_seed.wrapping_add(i as u64);
        let examples = corpus.upper_bound_dataset(args.flavor, Some((&assign, split)), args.feature_mode, seed)?;
        parts.insert(split, examples);
    }
    let s = splits_from(parts, args.flavor)?;
    let (_, report) = train_and_test(&config, &s.train, &s.dev, &s.test)?;
    let test = report.test.clone().expect("set by train_and_test");
    let tsv = metrics_tsv(&[("upper-bound".into(), test)]);
    out.report("upper-bound", args, &report, &tsv)
}
