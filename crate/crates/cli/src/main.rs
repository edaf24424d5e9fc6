//! `hgvqa`: synthetic data, training, evaluation and graph dumps for the
//! hyper-graph VQA model.
//!
//! Exit status is 0 on success, 1 for bad arguments, configs or input
//! files, and 2 when a run fails part-way.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hypergraph_vqa::config::RunConfig;
use hypergraph_vqa::dataset::Dataset;
use hypergraph_vqa::report::MetricsReport;
use hypergraph_vqa::synth::{generate_splits, SynthSpec};
use hypergraph_vqa::train::{dump_graph, evaluate, load_data, prepare, train};
use hypergraph_vqa::{checkpoint, Error};

#[derive(Parser)]
#[command(name = "hgvqa", version, about = "Video QA over predicted situation hyper-graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic train/val pair as `train.json` and `val.json`.
    GenData(GenData),
    /// Train a model; writes `model.ckpt` and `report.json` under --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print (or write) its metrics report.
    Eval(EvalArgs),
    /// Print the predicted hyper-graph of one clip as JSON.
    DumpGraph(DumpArgs),
    /// Summarize one or more metrics reports.
    Report(ReportArgs),
}

/// Flags shared by commands that build a run configuration.
#[derive(Args)]
struct RunFlags {
    /// `key = value` or JSON config; toy defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `dotted.key=value` overrides, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunFlags {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut run = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::toy(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            run.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            run.seed = s;
        }
        run.validate()?;
        Ok(run)
    }
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    run: RunFlags,
    /// Synthetic preset (`toy` or `tiny`); overrides the config's spec.
    #[arg(long)]
    spec: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Directory holding `train.json` and `val.json` from gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file; defaults to the validation split named by the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    clip: String,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

/// An error plus the exit status it maps to.
struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = if error.is_validation() { 1 } else { 2 };
        Failure { code, error }
    }
}

fn gen_data(a: &GenData) -> Result<(), Failure> {
    let mut run = a.run.resolve()?;
    if let Some(name) = &a.spec {
        run.data.synth = SynthSpec::preset(name)?;
    }
    let (train, val) = generate_splits(run.seed, &run.data.synth, run.data.val_episodes)?;
    train.save(a.out.join("train.json"))?;
    val.save(a.out.join("val.json"))?;
    println!(
        "wrote {} train and {} val clips to {}",
        train.clips.len(),
        val.clips.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<(), Failure> {
    let mut run = a.run.resolve()?;
    if let Some(dir) = &a.data {
        run.data.train = Some(dir.join("train.json").to_string_lossy().into_owned());
        run.data.val = Some(dir.join("val.json").to_string_lossy().into_owned());
    }
    let (tr, va) = load_data(&run)?;
    let out = train::<f64>(&run, &tr, &va).map_err(|e| Failure { code: 2, error: e })?;
    checkpoint::save(&a.out.join("model.ckpt"), &out.run, &out.store)?;
    out.report.save(&a.out.join("report.json"))?;
    println!(
        "{} steps, val accuracy {:.3}, action mAP {:.3}, relation mAP {:.3}; wrote {}",
        out.steps,
        out.report.overall_accuracy,
        out.report.action_map,
        out.report.relation_map,
        a.out.display()
    );
    Ok(())
}

/// The checkpoint's run and model, plus the dataset to score them on.
fn restore(path: &Path, data: Option<&Path>) -> Result<(RunConfig, hypergraph_vqa::model::QaModel, hypergraph_vqa::ParamStore, Dataset), Failure> {
    let (run, model, store) = checkpoint::load::<f64>(path).map_err(|e| e.context(format!("checkpoint {}", path.display())))?;
    let mut ds = match data {
        Some(p) => Dataset::load(p)?,
        None => load_data(&run)?.1,
    };
    ds.truncate_sets(run.model.action_queries, run.model.relation_queries);
    run.model.clone().resolve(&ds)?;
    Ok((run, model, store, ds))
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(p) => hypergraph_vqa::report::write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<(), Failure> {
    let (run, model, store, ds) = restore(&a.checkpoint, a.data.as_deref())?;
    let data = prepare::<f64>(&ds, &run.model, run.data.noise_sigma)?;
    if data.num_questions() == 0 {
        return Err(Error::Report("dataset has no questions".into()).into());
    }
    let eval = evaluate(&model, &store, &data, run.map_variant).map_err(|e| Failure { code: 2, error: e })?;
    emit(&eval.report(&run, Vec::new())?.to_json()?, a.out.as_deref())
}

fn dump_cmd(a: &DumpArgs) -> Result<(), Failure> {
    let (run, model, store, ds) = restore(&a.checkpoint, a.data.as_deref())?;
    let data = prepare::<f64>(&ds, &run.model, run.data.noise_sigma)?;
    let clip = data
        .clip(&a.clip)
        .ok_or_else(|| Error::Config(format!("no clip {:?} in the dataset", a.clip)))?;
    let dump = dump_graph(&model, &store, clip, &ds.vocab).map_err(|e| Failure { code: 2, error: e })?;
    emit(&dump.to_json()?, a.out.as_deref())
}

fn report_cmd(a: &ReportArgs) -> Result<(), Failure> {
    for path in &a.reports {
        let r = MetricsReport::load(path)?;
        println!("{} (seed {})", path.display(), r.seed);
        println!("  accuracy      {:.4}", r.overall_accuracy);
        for (cat, c) in &r.per_category {
            println!("    {cat:<12}{:.4}  ({}/{})", c.accuracy, c.correct, c.total);
        }
        println!("  action mAP    {:.4}", r.action_map);
        println!("  relation mAP  {:.4}", r.relation_map);
        if let (Some(first), Some(last)) = (r.loss_curve.first(), r.loss_curve.last()) {
            println!("  loss          {:.4} at step {} -> {:.4} at step {}", first.loss, first.step, last.loss, last.step);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::DumpGraph(a) => dump_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
