use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stoic_core::baseline::ensemble_baseline;
use stoic_core::checkpoint::Checkpoint;
use stoic_core::config::RunConfig;
use stoic_core::data::{load_csv, load_matrix_csv, matrix_to_csv, synth_var, write_synthetic, SyntheticSpec};
use stoic_core::metrics::EvalReport;
use stoic_core::train::{
    evaluate, evaluate_test, graph_recovery_experiment, load_panel, log_csv, prepare, robustness_csv,
    robustness_experiment, train_with, EpochProgress,
};
use stoic_core::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "stoic", version, about = "Probabilistic multivariate forecasting with a learned series graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.stoic, train_log.csv and test metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on every window of a CSV panel.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a sparse VAR(1) panel with its ground-truth adjacency.
    Synth {
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 2000)]
        t: usize,
        #[arg(long, default_value_t = 0.2)]
        density: f64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 1.0)]
        coupling: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an ensemble of point forecasters and score its spread.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// CRPS under Gaussian input noise of increasing scale.
    Robustness {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.2")]
        rho: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Edge probabilities from sampled hard graphs.
    ExportGraph {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn write_report(dir: &Path, name: &str, report: &EvalReport) -> Result<()> {
    write(dir, "metrics.csv", &report.to_metrics_csv(name))?;
    write(dir, "reliability.csv", &report.to_reliability_csv())?;
    println!(
        "{name}: rmse {:.6} crps {:.6} confidence_score {:.4} windows {}",
        report.rmse, report.crps, report.confidence_score, report.windows
    );
    Ok(())
}

fn train(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (panel, _) = load_panel(&cfg)?;
    if cfg.data.is_empty() {
        if let Some(w) = cfg.synth.warning() {
            eprintln!("warning: {w}");
        }
    }
    let prep = prepare(&panel, &cfg)?;
    let run = train_with(&cfg, &prep, &mut |p: &EpochProgress<'_>| {
        let l = p.log;
        eprintln!(
            "epoch {:>4} loss {:.6} nll {:.6} kl_z {:.6} kl_g {:.6} valid_crps {:.6} best {}",
            l.epoch, l.total, l.nll, l.kl_latent, l.kl_graph, l.valid_crps, p.best_epoch
        );
    })?;
    fs::create_dir_all(out)?;
    run.checkpoint.save(&out.join("checkpoint.stoic"))?;
    write(out, "train_log.csv", &log_csv(&run.log))?;
    if let Some(e) = run.abort {
        // the best checkpoint so far is still on disk
        return Err(e);
    }
    println!(
        "best epoch {} of {}, valid crps {:.6}",
        run.checkpoint.best_epoch, run.checkpoint.epochs, run.checkpoint.best_valid_crps
    );
    write_report(out, "test", &evaluate_test(&run.checkpoint, &prep)?)
}

fn synth(spec: SyntheticSpec, out: &Path) -> Result<()> {
    spec.validate()?;
    if let Some(w) = spec.warning() {
        eprintln!("warning: {w}");
    }
    let (panel, adj) = synth_var(&spec)?;
    write_synthetic(out, &spec, &panel, &adj)?;
    println!("wrote {} series x {} steps to {}", panel.series(), panel.len(), out.display());
    Ok(())
}

fn baseline(config: &Path, k: usize, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (panel, _) = load_panel(&cfg)?;
    let prep = prepare(&panel, &cfg)?;
    let run = ensemble_baseline(&cfg, &prep, k)?;
    let mut members = String::from("seed,best_valid_mse,best_epoch\n");
    for (seed, mse, epoch) in &run.members {
        members.push_str(&format!("{seed},{mse:.17e},{epoch}\n"));
    }
    write(out, "members.csv", &members)?;
    write_report(out, "baseline", &run.report)
}

fn robustness(ckpt: &Path, data: &Path, rho: &[f64], out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let panel = load_csv(data)?;
    let rows = robustness_experiment(&ckpt, &panel, rho)?;
    for r in &rows {
        println!("rho {:<6} crps {:.6} increase {:+.3}%", r.rho, r.crps, r.pct_increase);
    }
    write(out, "robustness.csv", &robustness_csv(&rows))
}

fn export_graph(
    ckpt: &Path,
    data: &Path,
    reference: Option<&Path>,
    threshold: f64,
    samples: usize,
    out: &Path,
) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let panel = load_csv(data)?;
    let reference = reference.map(load_matrix_csv).transpose()?;
    if let Some((names, _)) = &reference {
        if names != &ckpt.series {
            return Err(Error::Data(format!(
                "reference columns {names:?} do not match checkpoint series {:?}",
                ckpt.series
            )));
        }
    }
    let g = graph_recovery_experiment(&ckpt, &panel, reference.as_ref().map(|r| &r.1), samples, threshold)?;
    write(out, "edgeprob.csv", &matrix_to_csv(&ckpt.series, &g.posterior.edge_prob))?;
    let mut edges = String::from("i,j,name_i,name_j,prob\n");
    for &(i, j, p) in &g.confident {
        edges.push_str(&format!("{i},{j},{},{},{p}\n", ckpt.series[i], ckpt.series[j]));
    }
    write(out, "confident_edges.csv", &edges)?;
    println!("{} confident edges (p > {threshold}) from {samples} samples", g.confident.len());
    if let Some(c) = g.correlation {
        write(out, "correlation.csv", &format!("correlation,degenerate\n{:.17e},{}\n", c.value, c.degenerate))?;
        println!("graph correlation {:.4}{}", c.value, if c.degenerate { " (degenerate)" } else { "" });
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => train(&config, &out),
        Command::Eval { ckpt, data, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let panel = load_csv(&data)?;
            write_report(&out, "eval", &evaluate(&ckpt, &panel)?)
        }
        Command::Synth {
            n,
            t,
            density,
            noise,
            coupling,
            seed,
            out,
        } => synth(
            SyntheticSpec {
                series: n,
                len: t,
                density,
                coupling,
                noise,
                seed,
            },
            &out,
        ),
        Command::Baseline { config, k, out } => baseline(&config, k, &out),
        Command::Robustness { ckpt, data, rho, out } => robustness(&ckpt, &data, &rho, &out),
        Command::ExportGraph {
            ckpt,
            data,
            reference,
            threshold,
            samples,
            out,
        } => export_graph(&ckpt, &data, reference.as_deref(), threshold, samples, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("E_USAGE: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
