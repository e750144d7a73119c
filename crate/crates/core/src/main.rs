use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use lcp::config::RunConfig;
use lcp::data::{generate_to, Dataset, DatasetManifest};
use lcp::detector::{load_checkpoint, save_checkpoint, train, DetectorConfig, HeadSpec, ModelGraph};
use lcp::metrics::evaluate;
use lcp::prune::{prune_model, GradientLedger};
use lcp::Error;

#[derive(Parser, Debug)]
#[command(name = "lcp", version, about = "Localization-aware channel pruning for a toy single-shot detector")]
struct Cli {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Flat `key = value` config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path (directory for gen-data and prune, file for train).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        /// Number of images.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the detector from scratch and write a checkpoint.
    Train(TrainArgs),
    /// Prune a trained checkpoint layer by layer.
    Prune(PruneArgs),
    /// Evaluate a checkpoint.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print the per-layer gradient shares of a pruning run.
    ReportGradients {
        /// A prune output directory or its ledger.json.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset scored after training.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Images per batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Regression loss weight.
    #[arg(long)]
    m: Option<f64>,
    /// IoU threshold for positive default boxes.
    #[arg(long)]
    match_threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct PruneArgs {
    /// Trained checkpoint to prune.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset used for scoring and fine-tuning.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset scored after pruning; adds an eval record to the report.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Fraction of channels removed per layer.
    #[arg(long)]
    eta: Option<f64>,
    /// Weight of the auxiliary localization-aware loss.
    #[arg(long)]
    alpha: Option<f64>,
    /// Regression loss weight.
    #[arg(long)]
    m: Option<f64>,
    /// Step size for refining retained channels.
    #[arg(long)]
    gamma: Option<f64>,
    /// Fine-tuning epochs after each pruned layer.
    #[arg(long)]
    epochs_per_layer: Option<usize>,
    /// IoU threshold for positive default boxes.
    #[arg(long)]
    match_threshold: Option<f64>,
    /// Reconstruction-only selection; same as `--alpha 0`.
    #[arg(long, conflicts_with = "alpha")]
    baseline: bool,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => Failure::Usage(m),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn flag<T: ToString>(cfg: &mut RunConfig, key: &str, v: &Option<T>) -> Outcome {
    if let Some(v) = v {
        cfg.set(key, &v.to_string())?;
    }
    Ok(())
}

fn path_flag(cfg: &mut RunConfig, key: &str, v: &Option<PathBuf>) -> Outcome {
    if let Some(p) = v {
        cfg.set(key, &p.display().to_string())?;
    }
    Ok(())
}

fn resolve(cli: &Cli) -> std::result::Result<(RunConfig, &'static str), Failure> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &cli.config {
        if !p.is_file() {
            return Err(Failure::Usage(format!("config file {} not found", p.display())));
        }
        cfg.apply_file(p)?;
    }
    flag(&mut cfg, "seed", &cli.seed)?;
    flag(&mut cfg, "threads", &cli.threads)?;
    path_flag(&mut cfg, "out", &cli.out)?;
    let name = match &cli.command {
        Command::GenData { count } => {
            flag(&mut cfg, "count", count)?;
            "gen-data"
        }
        Command::Train(a) => {
            path_flag(&mut cfg, "data", &a.data)?;
            path_flag(&mut cfg, "eval_data", &a.eval_data)?;
            flag(&mut cfg, "epochs", &a.epochs)?;
            flag(&mut cfg, "lr", &a.lr)?;
            flag(&mut cfg, "batch_size", &a.batch_size)?;
            flag(&mut cfg, "m", &a.m)?;
            flag(&mut cfg, "match_threshold", &a.match_threshold)?;
            "train"
        }
        Command::Prune(a) => {
            path_flag(&mut cfg, "model", &a.model)?;
            path_flag(&mut cfg, "data", &a.data)?;
            path_flag(&mut cfg, "eval_data", &a.eval_data)?;
            flag(&mut cfg, "eta", &a.eta)?;
            flag(&mut cfg, "alpha", &a.alpha)?;
            flag(&mut cfg, "m", &a.m)?;
            flag(&mut cfg, "gamma", &a.gamma)?;
            flag(&mut cfg, "epochs_per_layer", &a.epochs_per_layer)?;
            flag(&mut cfg, "match_threshold", &a.match_threshold)?;
            if a.baseline {
                cfg.set("alpha", "0")?;
            }
            "prune"
        }
        Command::Eval { model, data } => {
            path_flag(&mut cfg, "model", model)?;
            path_flag(&mut cfg, "data", data)?;
            "eval"
        }
        Command::ReportGradients { input } => {
            path_flag(&mut cfg, "input", input)?;
            "report-gradients"
        }
    };
    Ok((cfg, name))
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> std::result::Result<&'a Path, Failure> {
    v.as_deref().ok_or_else(|| Failure::Usage(format!("missing required --{flag}")))
}

fn existing<'a>(v: &'a Option<PathBuf>, flag: &str) -> std::result::Result<&'a Path, Failure> {
    let p = required(v, flag)?;
    if !p.exists() {
        return Err(Failure::Usage(format!("--{flag} {} does not exist", p.display())));
    }
    Ok(p)
}

fn load_data(v: &Option<PathBuf>, flag: &str) -> std::result::Result<Dataset, Failure> {
    Ok(Dataset::load(existing(v, flag)?)?)
}

fn load_model(v: &Option<PathBuf>) -> std::result::Result<ModelGraph, Failure> {
    Ok(load_checkpoint(existing(v, "model")?, &HeadSpec::default())?)
}

fn run(cfg: &RunConfig, command: &str) -> Outcome {
    if let Some(t) = cfg.threads {
        lcp::exec::set_threads(t)?;
    }
    print!("{}", cfg.echo(command));
    match command {
        "gen-data" => {
            let out = required(&cfg.out, "out")?;
            let manifest = DatasetManifest::new(cfg.seed, cfg.count);
            let ds = generate_to(&manifest, out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
        "train" => {
            let out = required(&cfg.out, "out")?.to_path_buf();
            let data = load_data(&cfg.data, "data")?;
            let eval_set = match &cfg.eval_data {
                Some(_) => Some(load_data(&cfg.eval_data, "eval-data")?),
                None => None,
            };
            let mut model = ModelGraph::new(&DetectorConfig::default(), cfg.seed)?;
            let report = match train(&mut model, &data, &cfg.train, eval_set.as_ref()) {
                Ok(r) => r,
                Err(e @ Error::NonFinite(_)) => {
                    save_checkpoint(&model, &out)?;
                    return Err(Failure::Runtime(format!(
                        "{e}; last finite checkpoint written to {}",
                        out.display()
                    )));
                }
                Err(e) => return Err(e.into()),
            };
            for e in &report.epochs {
                println!("{}", serde_json::to_string(e).map_err(Error::from)?);
            }
            if let Some(m) = report.final_map {
                println!("final mAP@0.5 = {m:.4}");
            }
            save_checkpoint(&model, &out)?;
            println!("wrote checkpoint {}", out.display());
        }
        "prune" => {
            let out = required(&cfg.out, "out")?.to_path_buf();
            let original = load_model(&cfg.model)?;
            let data = load_data(&cfg.data, "data")?;
            let eval_set = match &cfg.eval_data {
                Some(_) => Some(load_data(&cfg.eval_data, "eval-data")?),
                None => None,
            };
            cfg.prune.validate()?;
            fs::create_dir_all(&out).map_err(Error::from)?;
            fs::write(out.join("config.txt"), cfg.echo("prune")).map_err(Error::from)?;
            let mut model = original.clone();
            let outcome = match prune_model(&mut model, &original, &data, &cfg.prune, |r, _| {
                println!(
                    "layer {}: kept {}/{} joint loss {:.6} -> {:.6}",
                    r.layer, r.k, r.channels, r.joint_loss_pre, r.joint_loss_post
                );
            }) {
                Ok(o) => o,
                Err(e) => {
                    let p = out.join("last_consistent.lcpm");
                    save_checkpoint(&model, &p)?;
                    return Err(Failure::Runtime(format!("{e}; last consistent checkpoint: {}", p.display())));
                }
            };
            let mut report = outcome.to_jsonl()?;
            if let Some(ds) = &eval_set {
                let r = evaluate(&model, ds, &cfg.eval)?;
                let mut v = serde_json::to_value(&r).map_err(Error::from)?;
                v["record"] = "eval".into();
                report.push_str(&serde_json::to_string(&v).map_err(Error::from)?);
                report.push('\n');
                println!("pruned mAP@0.5 = {:.4}", r.map);
            }
            save_checkpoint(&model, &out.join("pruned.lcpm"))?;
            fs::write(out.join("report.jsonl"), report).map_err(Error::from)?;
            fs::write(
                out.join("ledger.json"),
                serde_json::to_string_pretty(&outcome.ledger).map_err(Error::from)?,
            )
            .map_err(Error::from)?;
            println!("mode {}; wrote {}", outcome.header.mode, out.display());
        }
        "eval" => {
            let model = load_model(&cfg.model)?;
            let data = load_data(&cfg.data, "data")?;
            let r = evaluate(&model, &data, &cfg.eval)?;
            let names = DatasetManifest::new(cfg.seed, 1).class_names;
            print!("{}", r.table(&names));
            let mut v = serde_json::to_value(&r).map_err(Error::from)?;
            v["record"] = "eval".into();
            let line = serde_json::to_string(&v).map_err(Error::from)?;
            println!("{line}");
            if let Some(out) = &cfg.out {
                fs::write(out, line + "\n").map_err(Error::from)?;
            }
        }
        "report-gradients" => {
            let input = existing(&cfg.input, "input")?;
            let path = if input.is_dir() { input.join("ledger.json") } else { input.to_path_buf() };
            let text = fs::read_to_string(&path).map_err(Error::from)?;
            let ledger: GradientLedger = serde_json::from_str(&text).map_err(Error::from)?;
            print!("{}", ledger.table());
        }
        _ => unreachable!("clap restricts commands"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = resolve(&cli).and_then(|(cfg, name)| run(&cfg, name));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}\n");
            let _ = Cli::command().print_help();
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
