//! `flowq` command line: data generation, training sweeps, the ablation
//! grid, cycle/energy simulation, batch inference, and report aggregation.
//! One JSON config file drives the experiment commands; artifacts land in a
//! run directory named by the config hash.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use flowq::datakit::{load_csv, write_csv};
use flowq::harness::{
    read_records_csv, run_ablation, run_training_sweep, summarize, write_records_csv,
    ExperimentConfig,
};
use flowq::hwsim::{report_for_model, DesignKind};
use flowq::intinfer::{int_forward, load_package};

#[derive(Parser)]
#[command(name = "flowq", version, about = "Quantized soft-sensor MLP toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic flow dataset as canonical CSV
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the (fold x run x variant x size) training sweep
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
    /// Run the {L,F}x{L,F} per-layer quantization ablation grid on fold 0
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
    /// Cycle/latency/energy report for a deployment package
    Simulate {
        #[arg(long)]
        package: PathBuf,
        #[arg(long, value_enum, default_value = "pipelined-linear")]
        design: DesignArg,
        #[arg(long)]
        power_mw: Option<f64>,
        #[arg(long, default_value_t = 100_000_000.0)]
        clock_hz: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stream a CSV of sensor rows through a package, writing de-normalized
    /// predictions
    Infer {
        #[arg(long)]
        package: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Aggregate a records CSV into a JSON summary
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum DesignArg {
    PipelinedLinear,
    FixedBaseline,
}

impl From<DesignArg> for DesignKind {
    fn from(d: DesignArg) -> Self {
        match d {
            DesignArg::PipelinedLinear => DesignKind::PipelinedLinear,
            DesignArg::FixedBaseline => DesignKind::FixedBaseline,
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let raw = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(out_dir: &Path, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = out_dir.join(cfg.config_hash());
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn main() {
    if let Err(err) = run() {
        let doc = serde_json::json!({ "error": format!("{err:#}") });
        eprintln!("{doc}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { config, out } => {
            let cfg = load_config(&config)?;
            let ds = cfg.load_dataset()?;
            write_csv(&ds, &out)?;
            println!("wrote {} rows x {} sensors to {}", ds.len(), ds.dim(), out.display());
        }
        Command::Train { config, out_dir } => {
            let cfg = load_config(&config)?;
            let dir = run_dir(&out_dir, &cfg)?;
            let packages = dir.join("packages");
            let records = run_training_sweep(&cfg, Some(&packages))?;
            let records_path = dir.join("records.csv");
            write_records_csv(&records, &records_path)?;
            let summary = summarize(&records)?;
            std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            println!("{} records -> {}", records.len(), records_path.display());
        }
        Command::Ablation { config, out_dir } => {
            let cfg = load_config(&config)?;
            let dir = run_dir(&out_dir, &cfg)?;
            let records = run_ablation(&cfg)?;
            let path = dir.join("ablation.csv");
            write_records_csv(&records, &path)?;
            println!("{} ablation records -> {}", records.len(), path.display());
        }
        Command::Simulate { package, design, power_mw, clock_hz, out } => {
            let qm = load_package(&package)?;
            let report = report_for_model(&qm, design.into(), clock_hz, power_mw);
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => std::fs::write(path, json)?,
                None => println!("{json}"),
            }
        }
        Command::Infer { package, input, output } => {
            let qm = load_package(&package)?;
            let d = qm.hidden.cols();
            let columns: Vec<String> = (0..d).map(|j| format!("sensor_{j}")).collect();
            let ds = load_csv(&input, &columns, "flow").or_else(|_| {
                // inputs-only files are accepted; reuse the last sensor as a
                // dummy target and ignore it
                load_csv(&input, &columns, &columns[d - 1])
            })?;
            if ds.dim() != d {
                anyhow::bail!("package expects {d} input columns, got {}", ds.dim());
            }
            let mut wtr = csv::Writer::from_path(&output)?;
            wtr.write_record(["prediction"])?;
            for row in &ds.inputs {
                let normalized: Vec<f64> = row
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let (lo, hi) = (qm.norm.input_min[j], qm.norm.input_max[j]);
                        if hi - lo == 0.0 { 0.0 } else { (v - lo) / (hi - lo) }
                    })
                    .collect();
                let (_, y) = int_forward(&qm, &normalized)?;
                let denorm = qm.norm.target_min + y * (qm.norm.target_max - qm.norm.target_min);
                wtr.write_record([denorm.to_string()])?;
            }
            wtr.flush()?;
            println!("wrote {} predictions to {}", ds.len(), output.display());
        }
        Command::Report { records, out } => {
            let recs = read_records_csv(&records)?;
            let summary = summarize(&recs)?;
            let json = serde_json::to_string_pretty(&summary)?;
            match out {
                Some(path) => std::fs::write(path, json)?,
                None => println!("{json}"),
            }
        }
    }
    Ok(())
}
