use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dctps::alloc::{allocate_counts, SupportPlan};
use dctps::harness::checkpoint::atomic_write;
use dctps::harness::experiment::{prepare, run};
use dctps::harness::flops::flop_report;
use dctps::harness::{seeds, KeyValues, Method, TrainConfig};
use dctps::saliency::LayerReport;
use dctps::spectrum::{jacobian_spectrum, probe_input, SpectrumResult};
use dctps::Error;

#[derive(Parser)]
#[command(name = "dctps", version, about = "Sparse training with DCT-plus-sparse layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write manifest, metrics and checkpoints.
    Train(Common),
    /// Prune at initialization and write the mask and layer report.
    Prune(Common),
    /// Print the per-layer allocation of a support plan.
    Allocate(Common),
    /// Write the singular values of the input-output Jacobian at initialization.
    Spectrum(Common),
    /// Print per-layer multiply-add counts of one forward pass.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// Key-value config file; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    heuristic: Option<String>,
}

impl Common {
    fn config(&self) -> dctps::Result<TrainConfig> {
        let mut kv = match &self.config {
            Some(path) => KeyValues::load(path)?,
            None => KeyValues::default(),
        };
        if let Some(s) = self.seed {
            kv.set("seed", s.to_string());
        }
        if let Some(d) = self.density {
            kv.set("density", format!("{d:?}"));
        }
        if let Some(m) = &self.method {
            kv.set("method", m.as_str());
        }
        if let Some(h) = &self.heuristic {
            kv.set("heuristic", h.as_str());
        }
        TrainConfig::from_key_values(&kv)
    }
}

fn emit(out: Option<&Path>, name: &str, text: &str) -> dctps::Result<()> {
    if let Some(dir) = out {
        atomic_write(&dir.join(name), text.as_bytes())?;
    }
    print!("{text}");
    Ok(())
}

fn train(args: &Common) -> dctps::Result<()> {
    let cfg = args.config()?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    let result = run(&cfg, Some(&out))?;
    let o = &result.outcome;
    match (o.best_epoch, o.metrics.last()) {
        (Some(best), Some(last)) => println!(
            "best epoch {best} val_acc {:.4}; final epoch {} val_acc {:.4}; outputs in {}",
            o.metrics[best - 1].val_acc,
            last.epoch,
            last.val_acc,
            out.display()
        ),
        _ => println!("no epochs run; outputs in {}", out.display()),
    }
    Ok(())
}

fn prune(args: &Common) -> dctps::Result<()> {
    let cfg = args.config()?;
    if !matches!(cfg.method, Method::Snip | Method::Force | Method::Synflow) {
        return Err(Error::Config(format!("prune needs method snip, force or synflow, got {}", cfg.method)));
    }
    let prepared = prepare(&cfg)?;
    let mask = prepared.mask.as_ref().expect("pruning methods produce a mask");
    if let Some(dir) = &args.out {
        atomic_write(&dir.join("mask.txt"), mask.to_rle().as_bytes())?;
    }
    emit(args.out.as_deref(), "layer_report.csv", &mask.report().to_csv())
}

fn allocate(args: &Common) -> dctps::Result<()> {
    let cfg = args.config()?;
    let shapes = cfg.network_spec().layer_shapes()?;
    let plan = SupportPlan::with_density(shapes.clone(), cfg.density, cfg.heuristic, seeds::derive(cfg.seed, seeds::ALLOC))?;
    let (counts, _) = allocate_counts(&plan)?;
    let report = LayerReport {
        rows: shapes.into_iter().zip(counts).collect(),
    };
    emit(args.out.as_deref(), "allocation.csv", &report.to_csv())
}

fn spectrum(args: &Common) -> dctps::Result<()> {
    let cfg = args.config()?;
    let prepared = prepare(&cfg)?;
    let probe_seed = seeds::derive(cfg.seed, seeds::PROBE);
    let x = probe_input(&prepared.net, probe_seed);
    let result = SpectrumResult {
        values: jacobian_spectrum(&prepared.net, &x, cfg.spectrum_k)?,
        probe: format!("normal seed={probe_seed}"),
        label: format!("method={} density={:?} heuristic={}", cfg.method, cfg.density, cfg.heuristic),
    };
    emit(args.out.as_deref(), "spectrum.csv", &result.to_csv())
}

fn bench(args: &Common) -> dctps::Result<()> {
    let cfg = args.config()?;
    let prepared = prepare(&cfg)?;
    emit(args.out.as_deref(), "flops.csv", &flop_report(&prepared.net).to_csv())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::ZeroSaliency { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Prune(a) => prune(a),
        Command::Allocate(a) => allocate(a),
        Command::Spectrum(a) => spectrum(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
