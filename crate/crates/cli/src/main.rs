use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cloplab_core::diagnostics::lr_window;
use cloplab_core::dynamics::run_simulation;
use cloplab_core::prototypes::{PrototypeMode, PrototypeSet};
use cloplab_core::toy::run_toy;
use cloplab_core::verify::{run_suite, Suite};
use cloplab_core::{SimulationConfig, TrainConfig};

mod config;
mod failure;
mod output;
mod plot;

use config::{env_seed, require_out, Layers};
use failure::{Failure, Outcome};

#[derive(Parser, Debug)]
#[command(name = "cloplab", version, about = "Contrastive embedding collapse simulations and prototype-aligned toy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Full-batch descent on random embeddings; writes trajectory, spectra, PCA and summary files.
    Simulate(SimulateArgs),
    /// Learning-rate window around τ/2 for a given minimum raw norm and negative count.
    LrRange(LrRangeArgs),
    /// Generates a prototype set and reports its off-diagonal Gram statistics.
    Prototypes(PrototypeArgs),
    /// Trains the toy encoder on a synthetic mixture.
    TrainToy(TrainArgs),
    /// Runs a self-check suite and prints a JSON tally.
    Verify(VerifyArgs),
    /// Renders a CSV output as an SVG chart.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// JSON config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "n")]
    n_points: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// paired | merged
    #[arg(long)]
    pair_mode: Option<String>,
    /// infonce | repulsive | clop
    #[arg(long)]
    loss: Option<String>,
    /// pullback | sphere
    #[arg(long)]
    descent: Option<String>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    coincident_pairs: Option<bool>,
    #[arg(long)]
    record_every: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    prototype_mode: Option<String>,
    #[arg(long = "label-frac")]
    label_fraction: Option<f64>,
    #[arg(long)]
    classes: Option<usize>,
    /// cosine | neg_sq_euclidean | neg_l1
    #[arg(long)]
    similarity: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing run in the output directory.
    #[arg(long)]
    force: bool,
    /// Print the resolved config as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug)]
struct LrRangeArgs {
    #[arg(long)]
    tau: f64,
    #[arg(long)]
    sigma: f64,
    #[arg(long)]
    negatives: usize,
}

#[derive(Args, Debug)]
struct PrototypeArgs {
    #[arg(long)]
    k: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value = "orthonormal")]
    mode: PrototypeMode,
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the prototype JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// infonce | clop
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    within_std: Option<f64>,
    #[arg(long = "label-frac")]
    label_fraction: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "jitter")]
    jitter_std: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    prototype_mode: Option<String>,
    #[arg(long)]
    similarity: Option<String>,
    /// none | tanh
    #[arg(long)]
    nonlinearity: Option<String>,
    #[arg(long)]
    probe_epochs: Option<usize>,
    #[arg(long)]
    probe_lr: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    suite: Suite,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum)]
    kind: plot::PlotKind,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::LrRange(a) => lr_range(a),
        Command::Prototypes(a) => prototypes(a),
        Command::TrainToy(a) => train_toy(a),
        Command::Verify(a) => verify(a),
        Command::Plot(a) => plot::plot(&a.input, a.kind, &a.out),
    }
}

fn print_json(value: &impl serde::Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn simulation_config(a: &SimulateArgs) -> Outcome<(SimulationConfig, Option<PathBuf>)> {
    let mut l = Layers::from_file(a.config.as_deref())?;
    l.set("n_points", a.n_points);
    l.set("dim", a.dim);
    l.set("tau", a.tau);
    l.set("lr", a.lr);
    l.set("steps", a.steps);
    l.set("seed", a.seed);
    l.set("pair_mode", a.pair_mode.clone());
    l.set("loss", a.loss.clone());
    l.set("descent", a.descent.clone());
    l.set("init_scale", a.init_scale);
    l.set("coincident_pairs", a.coincident_pairs);
    l.set("record_every", a.record_every);
    l.set_nested("clop", "lambda", a.lambda)?;
    l.set_nested("clop", "prototype_mode", a.prototype_mode.clone())?;
    l.set_nested("clop", "label_fraction", a.label_fraction)?;
    l.set_nested("clop", "classes", a.classes)?;
    l.set_nested("clop", "similarity", a.similarity.clone())?;
    l.set_out(a.out.clone());
    l.seed_fallback()?;
    let (cfg, out): (SimulationConfig, _) = l.parse()?;
    cfg.validate()?;
    Ok((cfg, out))
}

fn simulate(a: SimulateArgs) -> Outcome {
    let (cfg, out) = simulation_config(&a)?;
    if a.print_config {
        return print_json(&cfg);
    }
    let dir = require_out(out)?;
    let summary_path = output::prepare_dir(&dir, "summary.json", a.force)?;
    let rec = run_simulation(&cfg)?;
    output::write_trajectory(&dir, &rec)?;
    let last = rec.last();
    output::write_json(
        &summary_path,
        &json!({
            "config": cfg,
            "final": last,
            "final_spectrum": rec.snapshots.last().map(|s| &s.spectrum),
            "collapsed": rec.collapsed(),
        }),
    )?;
    println!(
        "steps={} final_loss={} mean_norm={} effective_rank={} collapsed={}",
        last.step,
        output::num(last.loss),
        output::num(last.mean_norm),
        last.effective_rank,
        rec.collapsed()
    );
    Ok(())
}

fn lr_range(a: LrRangeArgs) -> Outcome {
    if !(a.tau > 0.0) || !(a.sigma > 0.0) || a.negatives == 0 {
        return Err(Failure::usage("--tau, --sigma and --negatives must all be positive"));
    }
    let w = lr_window(a.tau, a.sigma, a.negatives)?;
    print_json(&json!({ "eta_lo": w.eta_lo, "eta_hi": w.eta_hi, "midpoint": w.midpoint }))
}

fn prototypes(a: PrototypeArgs) -> Outcome {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let set = PrototypeSet::generate(a.mode, a.k, a.dim, seed)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    output::write_json(&a.out, &set)?;
    let s = set.off_diagonal_stats();
    print_json(&json!({
        "k": set.k(),
        "dim": set.dim(),
        "mode": set.mode(),
        "max_offdiag_abs": s.max_abs,
        "min_offdiag": s.min,
        "max_offdiag": s.max,
    }))
}

fn train_config(a: &TrainArgs) -> Outcome<(TrainConfig, Option<PathBuf>)> {
    let mut l = Layers::from_file(a.config.as_deref())?;
    l.set("loss", a.loss.clone());
    l.set("classes", a.classes);
    l.set("d_in", a.d_in);
    l.set("embed_dim", a.embed_dim);
    l.set("per_class", a.per_class);
    l.set("spread", a.spread);
    l.set("within_std", a.within_std);
    l.set("label_fraction", a.label_fraction);
    l.set("lambda", a.lambda);
    l.set("tau", a.tau);
    l.set("lr", a.lr);
    l.set("batch_size", a.batch_size);
    l.set("epochs", a.epochs);
    l.set("jitter_std", a.jitter_std);
    l.set("seed", a.seed);
    l.set("prototype_mode", a.prototype_mode.clone());
    l.set("similarity", a.similarity.clone());
    l.set("nonlinearity", a.nonlinearity.clone());
    l.set("probe_epochs", a.probe_epochs);
    l.set("probe_lr", a.probe_lr);
    l.set_out(a.out.clone());
    l.seed_fallback()?;
    let (cfg, out): (TrainConfig, _) = l.parse()?;
    cfg.validate()?;
    Ok((cfg, out))
}

fn train_toy(a: TrainArgs) -> Outcome {
    let (cfg, out) = train_config(&a)?;
    if a.print_config {
        return print_json(&cfg);
    }
    let dir = require_out(out)?;
    let report_path = output::prepare_dir(&dir, "report.json", a.force)?;
    let (_, report) = run_toy(&cfg)?;
    output::write_metrics(&dir.join("metrics.csv"), &report)?;
    output::write_json(&report_path, &report)?;
    let last = report.last();
    println!(
        "epochs={} loss={} eff_rank={} np_acc={} probe_acc={} mean_proto_cos={}",
        last.epoch,
        output::num(last.loss),
        last.eff_rank,
        output::num(last.np_acc),
        output::num(last.probe_acc),
        output::num(last.mean_proto_cos)
    );
    Ok(())
}

fn verify(a: VerifyArgs) -> Outcome {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let report = run_suite(a.suite, seed)?;
    print_json(&report)?;
    if report.all_passed() {
        Ok(())
    } else {
        Err(Failure::runtime(format!("{} of {} checks failed", report.failed, report.checks)))
    }
}
