use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fwspde::runner;
use fwspde::scenario::{parse_scenario, Experiment, ScenarioConfig};

#[derive(Parser)]
#[command(name = "fwspde", version, about = "Run small-noise SPDE experiments from JSON scenario files")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the scenario's `output`, then `out/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sampling loops.
    #[arg(long, env = "FWSPDE_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the structural validators and report every check.
    Validate(Common),
    /// Sample noisy trajectories.
    Simulate(Common),
    /// Solve the controlled deterministic equation.
    Skeleton(Common),
    /// Evaluate the rate function of a path.
    Rate(Common),
    /// Minimize the rate over a target set.
    Instanton(Common),
    /// Plain Monte Carlo event probability.
    Mc(Common),
    /// Importance-sampled event probability.
    Is(Common),
    /// Compare eps log p against the tube rate over an eps ladder.
    LdpCurve(Common),
    /// Uniformity sweep over initial conditions and controls.
    Sweep(Common),
    /// Exit times from a ball.
    Exit(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Validate(c) => ("validate", c),
            Command::Simulate(c) => ("simulate", c),
            Command::Skeleton(c) => ("skeleton", c),
            Command::Rate(c) => ("rate", c),
            Command::Instanton(c) => ("instanton", c),
            Command::Mc(c) => ("mc", c),
            Command::Is(c) => ("is", c),
            Command::LdpCurve(c) => ("ldp-curve", c),
            Command::Sweep(c) => ("sweep", c),
            Command::Exit(c) => ("exit", c),
        }
    }
}

fn load(common: &Common, wanted: &str) -> anyhow::Result<ScenarioConfig> {
    let text = std::fs::read_to_string(&common.config).with_context(|| format!("reading {}", common.config.display()))?;
    let mut cfg = parse_scenario(&text).with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if wanted == "validate" {
        cfg.experiment = Experiment::Validate;
    } else if cfg.experiment.name() != wanted {
        bail!(
            "{} describes a `{}` experiment, not `{wanted}`",
            common.config.display(),
            cfg.experiment.name()
        );
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let (wanted, common) = cli.command.parts();
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = load(common, wanted)?;
    let out = match (&common.out, &cfg.output) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => PathBuf::from(o),
        (None, None) => PathBuf::from("out").join(if cfg.name.is_empty() { wanted } else { cfg.name.as_str() }),
    };
    println!("config_hash {}", cfg.content_hash());
    let result = runner::run(&cfg, &out)?;
    for a in &result.artifacts {
        println!("wrote {}", a.display());
    }
    println!("wrote {}", result.summary.display());
    if wanted == "validate" {
        print!("{}", result.results["summary"].as_str().unwrap_or_default());
        if result.results["passed"] != serde_json::Value::Bool(true) {
            return Ok(ExitCode::FAILURE);
        }
    }
    Ok(ExitCode::SUCCESS)
}
