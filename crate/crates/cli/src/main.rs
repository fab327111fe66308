use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pipelearn::sim::ScheduleMode;
use pipelearn_cli::{run, ExperimentSpec, Family, Scenario};

#[derive(Parser)]
#[command(name = "pipelearn", version, about = "Pipelined split-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Epoch time, idle time and throughput per mode and network preset.
    Efficiency(Common),
    /// Optimizer selections scored against the exhaustive simulation oracle.
    OptScore(Common),
    /// Split training against the federated reference, per epoch.
    Equivalence(Common),
    /// Lane intervals of one training iteration.
    Trace(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); a built-in configuration is used if absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Data seed; first profile seed of `opt-score`.
    #[arg(long)]
    seed: Option<u64>,
    /// Network preset: 4g, 4g+ or wifi. All presets if absent.
    #[arg(long)]
    preset: Option<String>,
    /// Schedule mode: pipelearn, pipelearn-seq, sfl or fl.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ScheduleMode>,
    /// Number of random profiles for `opt-score`.
    #[arg(long, default_value_t = 100)]
    profiles: usize,
    /// Profile family for `opt-score`: weak or mixed.
    #[arg(long, default_value = "weak", value_parser = parse_family)]
    family: Family,
    /// Exit with status 3 when the scenario's expectations fail.
    #[arg(long)]
    check: bool,
}

fn parse_mode(s: &str) -> Result<ScheduleMode, String> {
    ScheduleMode::parse(s).ok_or_else(|| format!("unknown mode {s:?}"))
}

fn parse_family(s: &str) -> Result<Family, String> {
    Family::parse(s).ok_or_else(|| format!("unknown family {s:?}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let (scenario, c) = match cli.command {
        Command::Efficiency(c) => (Scenario::Efficiency, c),
        Command::OptScore(c) => (Scenario::OptimizerScore, c),
        Command::Equivalence(c) => (Scenario::Equivalence, c),
        Command::Trace(c) => (Scenario::ScheduleTrace, c),
    };
    let spec = ExperimentSpec {
        scenario,
        config: c.config,
        out: c.out,
        seed: c.seed,
        preset: c.preset,
        mode: c.mode,
        profiles: c.profiles,
        family: c.family,
        check: c.check,
    };
    match run(&spec) {
        Ok(report) => {
            print!("{}", report.summary);
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
