//! `ace-ipsec`: runs the Base, DP, IKE-PSK and IKE-CPK setups and prints
//! per-step byte counts.

use std::path::PathBuf;
use std::process::ExitCode;

use ace_ipsec::config::Config;
use ace_ipsec::scenario::{self, Backend, Format, ScenarioName};
use clap::{ArgGroup, Parser, ValueEnum};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Base,
    Dp,
    IkePsk,
    IkeCpk,
}

impl From<ScenarioArg> for ScenarioName {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Base => ScenarioName::Base,
            ScenarioArg::Dp => ScenarioName::Dp,
            ScenarioArg::IkePsk => ScenarioName::IkePsk,
            ScenarioArg::IkeCpk => ScenarioName::IkeCpk,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Sim,
    Udp,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Table,
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "ace-ipsec", version, about = "Run ACE IPsec profile scenarios and report message sizes")]
#[command(group(ArgGroup::new("which").required(true).args(["scenario", "all"])))]
struct Args {
    /// Scenario to run; may be repeated.
    #[arg(long, value_enum)]
    scenario: Vec<ScenarioArg>,
    /// Run all four scenarios.
    #[arg(long)]
    all: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Per-fragment loss probability; overrides the config file.
    #[arg(long)]
    loss: Option<f64>,
    #[arg(long, default_value_t = 20)]
    repeats: u32,
    #[arg(long, value_enum, default_value = "sim")]
    backend: BackendArg,
    #[arg(long, value_enum, default_value = "table")]
    format: FormatArg,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn run(args: Args) -> Result<bool, scenario::ScenarioError> {
    let mut cfg = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(loss) = args.loss {
        cfg.network.loss = loss;
        cfg.validate()?;
    }
    let names: Vec<ScenarioName> = if args.all {
        ScenarioName::ALL.to_vec()
    } else {
        args.scenario.iter().map(|&s| s.into()).collect()
    };
    let backend = match args.backend {
        BackendArg::Sim => Backend::Sim,
        BackendArg::Udp => Backend::Udp,
    };
    let format = match args.format {
        FormatArg::Table => Format::Table,
        FormatArg::Json => Format::Json,
        FormatArg::Csv => Format::Csv,
    };
    let report = scenario::run_report(&cfg, &names, args.seed, args.repeats, backend)?;
    scenario::emit_report(&report, format, args.out.as_deref())?;
    Ok(report.all_succeeded())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
