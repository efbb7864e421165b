mod config;
mod experiments;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use config::{parse_flag, parse_text, Experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "varlab", version, about = "Numerical experiments on discrete integral varifolds")]
#[command(after_help = config::key_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a model varifold.
    Generate(Common),
    /// Cylindrical and spherical excess at the origin.
    Excess(Common),
    /// Height bands in thin cylinders.
    Height(Common),
    /// Q-valued Lipschitz approximation and its estimates.
    Lipapprox(Common),
    /// Energy bounds of the Lipschitz approximant.
    Lipen(Common),
    /// Dyadic excess decay and one decay step.
    Decay(Common),
    /// Catenoid limit constants.
    Catenoid(Common),
    /// Stationarity validators.
    Validators(Common),
    /// Run the experiment named by the `experiment` key.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; falls back to VARLAB_THREADS, then all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Also write SVG plots derived from the CSV output.
    #[arg(long)]
    plot: bool,
    /// Override a configuration key.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    set: Vec<String>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VIOLATION: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let (experiment, common) = match cli.command {
        Command::Generate(c) => (Some(Experiment::Generate), c),
        Command::Excess(c) => (Some(Experiment::Excess), c),
        Command::Height(c) => (Some(Experiment::Height), c),
        Command::Lipapprox(c) => (Some(Experiment::Lipapprox), c),
        Command::Lipen(c) => (Some(Experiment::Lipen), c),
        Command::Decay(c) => (Some(Experiment::Decay), c),
        Command::Catenoid(c) => (Some(Experiment::CatenoidAsymptotics), c),
        Command::Validators(c) => (Some(Experiment::Validators), c),
        Command::Run(c) => (None, c),
    };
    match execute(experiment, &common) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(v)) => {
            eprintln!("violation: {v}");
            ExitCode::from(EXIT_VIOLATION)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("VARLAB_THREADS") {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("VARLAB_THREADS must be a positive integer, got `{s}`"))),
        Err(_) => Ok(None),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write(dir: &Path, name: &str, body: &[u8]) -> Result<(), Failure> {
    std::fs::write(dir.join(name), body).map_err(|e| Failure::Runtime(format!("writing {name}: {e}")))
}

/// Returns the violation message, if any.
fn execute(experiment: Option<Experiment>, common: &Common) -> Result<Option<String>, Failure> {
    let (file_entries, input) = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Usage(format!("reading {}: {e}", p.display())))?;
            let entries = parse_text(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            (entries, Some((p.clone(), sha256_hex(text.as_bytes()))))
        }
        None => (Vec::new(), None),
    };
    let flags = common
        .set
        .iter()
        .map(|s| parse_flag(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let cfg = ExperimentConfig::resolve(experiment, &file_entries, &flags).map_err(|e| Failure::Usage(e.to_string()))?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    match thread_count(common.threads)? {
        Some(0) => return Err(Failure::Usage("--threads must be positive".into())),
        Some(n) => pool = pool.num_threads(n),
        None => {}
    }
    let pool = pool.build().map_err(|e| Failure::Runtime(e.to_string()))?;
    let output = pool
        .install(|| experiments::run(&cfg))
        .map_err(|e| match e {
            varlab::Error::InvalidInput(_) | varlab::Error::Resolution { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        })?;

    let dir = &common.out;
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("creating {}: {e}", dir.display())))?;
    let mut outputs: Vec<(String, String)> = Vec::new();
    for a in &output.artifacts {
        write(dir, &a.name, &a.body)?;
        outputs.push((a.name.clone(), sha256_hex(&a.body)));
    }
    if common.plot {
        for p in &output.plots {
            let csv = std::fs::read_to_string(dir.join(&p.csv))
                .map_err(|e| Failure::Runtime(format!("reading {}: {e}", p.csv)))?;
            let pts = plot::columns(&csv, p.x, p.y).map_err(Failure::Runtime)?;
            let svg = plot::svg(&pts, p.x, p.y, p.log_y);
            let name = format!("{}.svg", p.csv.trim_end_matches(".csv"));
            write(dir, &name, svg.as_bytes())?;
            outputs.push((name, sha256_hex(svg.as_bytes())));
        }
    }
    outputs.sort();

    let config: serde_json::Map<String, Value> = cfg.entries().map(|(k, v)| (k.to_string(), json!(v))).collect();
    let manifest = json!({
        "tool": "varlab",
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": cfg.experiment().name(),
        "config": config,
        "inputs": input.iter().map(|(p, d)| json!({"path": p.display().to_string(), "sha256": d})).collect::<Vec<_>>(),
        "outputs": outputs.iter().map(|(p, d)| json!({"path": p, "sha256": d})).collect::<Vec<_>>(),
        "violation": output.violation,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::Runtime(e.to_string()))? + "\n";
    write(dir, "manifest.json", text.as_bytes())?;
    Ok(output.violation)
}
