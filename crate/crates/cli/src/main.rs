//! `declutter`: simulate, train, filter, eval and verify.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or runtime
//! error, 3 verification failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use declutter::config::{parse_key_values, RunConfig};
use declutter::manifest::{DatasetManifest, Split};
use declutter::net::LossKind;
use declutter::pipeline::{
    eval_to_file, filter_records, load_network, records_of, simulate_dataset, train_to_dir,
    ClassFilter, FilterMethod, MANIFEST_FILE,
};
use declutter::verify::{run_checks, Mutation};
use declutter::Error;

#[derive(Parser, Debug)]
#[command(
    name = "declutter",
    version,
    about = "Reverberation clutter simulation and filtering"
)]
struct Cli {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (report file for `eval`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate clean/cluttered/mask triplets and a manifest.
    Simulate(SimulateArgs),
    /// Train a filtering network on a manifest.
    Train(TrainArgs),
    /// Filter every (or one split's) cluttered input of a manifest.
    Filter(FilterArgs),
    /// Score predictions against the clean references.
    Eval(EvalArgs),
    /// Run the self-check suite.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// nf, rl, nfrl or all
    #[arg(long)]
    class: Option<String>,
    #[arg(long)]
    limit: Option<usize>,
    /// Fraction of records tagged for validation.
    #[arg(long)]
    holdout: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NetKind {
    #[value(name = "3d")]
    ThreeD,
    #[value(name = "2d")]
    TwoD,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest, or the directory holding `manifest.tsv`.
    #[arg(long)]
    manifest: PathBuf,
    /// rec, rec_adv or rec_prc
    #[arg(long)]
    loss: Option<String>,
    #[arg(long, value_enum)]
    net: Option<NetKind>,
    #[arg(long)]
    no_attention: bool,
    #[arg(long)]
    no_residual: bool,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct FilterArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Trained `model.wgt`; its `model.cfg` sidecar must sit next to it.
    #[arg(long, conflicts_with = "svd", required_unless_present = "svd")]
    weights: Option<PathBuf>,
    /// Use the SVD baseline instead of a network.
    #[arg(long)]
    svd: bool,
    #[arg(long, requires = "svd")]
    roi: Option<usize>,
    #[arg(long, requires = "svd")]
    drop: Option<usize>,
    /// Directory for per-scale attention maps.
    #[arg(long)]
    attention_out: Option<PathBuf>,
    /// train, val or test; all records when absent.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of `<id>.stsq` predictions.
    #[arg(long)]
    predictions: PathBuf,
    /// Report path; defaults to `--out`.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Inject {
    PoolTie,
    SsimK1,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Inject a known fault to confirm the suite detects it.
    #[arg(long, value_enum, hide = true)]
    inject: Option<Inject>,
}

enum Failure {
    Usage(String),
    Data(Error),
    Verification(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text =
            std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let kv = parse_key_values(&text).map_err(|e| usage(e.to_string()))?;
        cfg.apply(&kv).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    match &cli.command {
        Command::Simulate(a) => {
            if let Some(c) = &a.class {
                cfg.sim.class = c.parse::<ClassFilter>().map_err(|e| usage(e.to_string()))?;
            }
            if a.limit.is_some() {
                cfg.sim.limit = a.limit;
            }
            if let Some(h) = a.holdout {
                cfg.sim.holdout = h;
            }
        }
        Command::Train(a) => {
            if let Some(l) = &a.loss {
                let kind: LossKind = l.parse().map_err(|e: Error| usage(e.to_string()))?;
                let mut kv = std::collections::BTreeMap::new();
                kv.insert("train.loss".to_string(), kind.to_string());
                cfg.apply(&kv).map_err(|e| usage(e.to_string()))?;
            }
            if let Some(kind) = a.net {
                cfg.net.temporal_kernels = matches!(kind, NetKind::ThreeD);
            }
            if a.no_attention {
                cfg.net.use_attention = false;
            }
            if a.no_residual {
                cfg.net.use_residual_skip = false;
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
        }
        Command::Filter(a) => {
            if let Some(r) = a.roi {
                cfg.svd.roi = r;
            }
            if let Some(d) = a.drop {
                cfg.svd.drop_count = d;
            }
        }
        Command::Eval(_) | Command::Verify(_) => {}
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn read_manifest(path: &Path) -> Result<DatasetManifest, Failure> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    Ok(DatasetManifest::read(&file)?)
}

fn parse_split(s: &Option<String>) -> Result<Option<Split>, Failure> {
    s.as_deref()
        .map(|v| v.parse::<Split>().map_err(|e| usage(e.to_string())))
        .transpose()
}

fn out_dir(cli: &Cli) -> Result<&Path, Failure> {
    cli.out
        .as_deref()
        .ok_or_else(|| usage("--out is required for this subcommand"))
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<(), Failure> {
    if path.exists() && !force {
        return Err(Failure::Data(Error::Contract(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        ))));
    }
    Ok(())
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    let path = dir.join("config.txt");
    std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = resolve_config(cli)?;
    eprintln!("config digest: {}", cfg.digest());
    match &cli.command {
        Command::Simulate(_) => {
            let out = out_dir(cli)?;
            refuse_overwrite(&out.join(MANIFEST_FILE), cli.force)?;
            let m = simulate_dataset(&cfg.sim, cfg.seed, out)?;
            write_config(out, &cfg)?;
            let val = m.split(Split::Validation).count();
            println!(
                "wrote {} records ({} train, {val} val) to {}",
                m.records.len(),
                m.records.len() - val,
                out.display()
            );
        }
        Command::Train(a) => {
            let out = out_dir(cli)?;
            refuse_overwrite(&out.join(declutter::pipeline::WEIGHTS_FILE), cli.force)?;
            let m = read_manifest(&a.manifest)?;
            let (net, outcome) = train_to_dir(&m, &cfg.net, &cfg.train, out, |e| {
                eprintln!(
                    "epoch {:>3}  train {:.6}  val {:.6}  lr {:.0e}",
                    e.epoch, e.train_loss, e.val_loss, e.lr
                )
            })?;
            write_config(out, &cfg)?;
            println!(
                "best epoch {} (val {:.6}), {} parameters, weights in {}",
                outcome.best_epoch,
                outcome.best_val_loss,
                net.param_count(),
                out.display()
            );
        }
        Command::Filter(a) => {
            let out = out_dir(cli)?;
            let m = read_manifest(&a.manifest)?;
            let method = match &a.weights {
                Some(w) => FilterMethod::Net(Box::new(load_network(w)?)),
                None => FilterMethod::Svd(cfg.svd),
            };
            let split = parse_split(&a.split)?;
            let records = records_of(&m, split);
            let timings = filter_records(
                &m,
                records.iter().copied(),
                &method,
                out,
                a.attention_out.as_deref(),
            )?;
            let total: f64 = timings.iter().map(|t| t.seconds).sum();
            println!(
                "filtered {} sequences with {} in {total:.2} s",
                timings.len(),
                method.describe()
            );
        }
        Command::Eval(a) => {
            let report = a
                .report
                .as_deref()
                .or(cli.out.as_deref())
                .ok_or_else(|| usage("eval needs --report or --out"))?;
            let m = read_manifest(&a.manifest)?;
            let split = parse_split(&a.split)?;
            let records = records_of(&m, split);
            let rep = eval_to_file(
                &m,
                records.iter().copied(),
                &a.predictions,
                &cfg.ssim,
                &cfg.sim.geometry(),
                &cfg.sim.grids,
                report,
                cli.force,
            )?;
            for (class, metrics) in &rep.aggregates {
                let fmt = |k: &str| {
                    metrics
                        .get(k)
                        .map_or("-".to_string(), |v| format!("{:.4} ± {:.4}", v.mean, v.std))
                };
                println!(
                    "{class:<6} mare {}  ssim2d {}  ssim3d {}",
                    fmt("mare"),
                    fmt("ssim2d"),
                    fmt("ssim3d")
                );
            }
            println!("report written to {}", report.display());
        }
        Command::Verify(a) => {
            let mutation = match a.inject {
                None => Mutation::default(),
                Some(Inject::PoolTie) => Mutation {
                    pool_last_tie: true,
                    ..Mutation::default()
                },
                Some(Inject::SsimK1) => Mutation {
                    ssim_k1: Some(0.02),
                    ..Mutation::default()
                },
            };
            let results = run_checks(&mutation);
            for r in &results {
                let tag = if r.passed { "PASS" } else { "FAIL" };
                println!("{tag}  {:<28} {}", r.name, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!(
                "{} of {} checks passed",
                results.len() - failed,
                results.len()
            );
            if failed > 0 {
                return Err(Failure::Verification(failed));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(n)) => {
            eprintln!("{n} verification check(s) failed");
            ExitCode::from(3)
        }
    }
}
