use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

mod config;
mod data_cmds;
mod io;
mod probe_cmds;

use data_cmds::*;
use probe_cmds::*;

/// Probing encoder representations of RDF graphs for entities the generated
/// text leaves out or distorts.
#[derive(Parser, Debug)]
#[command(name = "omiprobe", version)]
struct Cli {
    /// key = value file supplying defaults for any flag
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output directory
    #[arg(long, global = true, env = "OMIPROBE_OUT", default_value = "omiprobe-out")]
    out: PathBuf,
    /// more log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Expand graphs into permuted records, or deduplicate generated texts
    Augment(AugmentArgs),
    /// Detect mentions automatically, optionally merging manual annotations
    Annotate(AnnotateArgs),
    /// Cohen's kappa between two annotators
    Agreement(AgreementArgs),
    /// Overlap of omitted entities between decoding strategies
    DecodingIou(DecodingIouArgs),
    /// Train/dev/test assignment of records
    Split(SplitArgs),
    /// Parameter-free similarity probe
    ProbeCosine(ProbeCosineArgs),
    /// Train an MLP probe, optionally with a grid search
    ProbeTrain(ProbeTrainArgs),
    /// Evaluate a saved probe
    ProbeEval(ProbeEvalArgs),
    /// Probe against the same probe trained on shuffled labels
    ControlLabels(ControlLabelsArgs),
    /// Probes trained on randomly initialised encoders
    ControlEncoder(ControlEncoderArgs),
    /// Mentioned entities against entities absent from the graph
    UpperBound(UpperBoundArgs),
    /// Evaluate a probe on entities seen with both labels
    HardExamples(HardExamplesArgs),
    /// Agreement between two saved probes
    Correlate(CorrelateArgs),
    /// Apply a probe to the test sets of other flavors
    Transfer(TransferArgs),
    /// Logistic regression on surface and graph features
    Regress(RegressArgs),
    /// Write a synthetic corpus with planted signal
    Synth(SynthArgs),
}

fn run(cli: &Cli) -> Result<()> {
    let out = io::Out::new(&cli.out)?;
    match &cli.command {
        Cmd::Augment(a) => augment(a, &out),
        Cmd::Annotate(a) => annotate(a, &out),
        Cmd::Agreement(a) => agreement(a, &out),
        Cmd::DecodingIou(a) => decoding_iou_cmd(a, &out),
        Cmd::Split(a) => split(a, &out),
        Cmd::ProbeCosine(a) => probe_cosine(a, &out),
        Cmd::ProbeTrain(a) => probe_train(a, &out),
        Cmd::ProbeEval(a) => probe_eval(a, &out),
        Cmd::ControlLabels(a) => control_labels(a, &out),
        Cmd::ControlEncoder(a) => control_encoder(a, &out),
        Cmd::UpperBound(a) => upper_bound(a, &out),
        Cmd::HardExamples(a) => hard_examples(a, &out),
        Cmd::Correlate(a) => correlate(a, &out),
        Cmd::Transfer(a) => transfer(a, &out),
        Cmd::Regress(a) => regress(a, &out),
        Cmd::Synth(a) => synth(a, &out),
    }
}

fn parse() -> Result<Cli, ExitCode> {
    let args: Vec<String> = std::env::args().collect();
    let mut command = Cli::command();
    if let Some(path) = config::config_path(&args) {
        let applied = config::load(path.as_ref()).and_then(|values| config::apply(command, &values));
        command = match applied {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e:#}");
                return Err(ExitCode::from(2));
            }
        };
    }
    let matches = command.try_get_matches_from(&args).unwrap_or_else(|e| e.exit());
    Cli::from_arg_matches(&matches).map_err(|e| {
        let _ = e.print();
        ExitCode::from(2)
    })
}

fn main() -> ExitCode {
    let cli = match parse() {
        Ok(c) => c,
        Err(code) => return code,
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
