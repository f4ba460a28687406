use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sim_isac::experiments::{figure, FIGURE_IDS};
use sim_isac::optimizer::budget_from_channels;
use sim_isac::pipeline::{parse_stages, run, synth};
use sim_isac::scenario::{watts_to_dbm, ScenarioConfig};
use sim_isac::Result;

/// SIM-aided cognitive-radio ISAC: beam optimization, SIM training and
/// figure datasets.
#[derive(Parser)]
#[command(name = "sim-isac", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario TOML file; the built-in desk scenario when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Use the full-size reference parameters instead of the desk defaults.
    #[arg(long)]
    paper_scale: bool,
}

impl ScenarioArgs {
    fn load(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.scenario {
            Some(p) => ScenarioConfig::from_path(p)?,
            None => ScenarioConfig::default(),
        };
        if self.paper_scale {
            cfg = cfg.full_scale();
        }
        if let Some(seed) = self.seed {
            cfg.scene.rng_seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run pipeline stages and write artifacts plus manifest.json.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Output directory for artifacts.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of synth,budget,alternate,train,evaluate, or "all".
        #[arg(long, default_value = "all")]
        stages: String,
    },
    /// Produce the CSV dataset for one figure.
    Figure {
        /// One of the figure ids (see --help).
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(FIGURE_IDS))]
        id: String,
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Directory for the CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a scenario file and print derived quantities.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn validate(path: &Path) -> Result<bool> {
    let text = std::fs::read_to_string(path)?;
    let cfg = ScenarioConfig::parse_unchecked(&text)?;
    let violations = cfg.diagnostics();
    for v in &violations {
        println!("error: {}: {}", v.key, v.message);
    }
    if !violations.is_empty() {
        return Ok(false);
    }
    println!("scenario hash: {}", cfg.hash());
    println!("noise power per subcarrier: {:.6e} W ({:.3} dBm)", cfg.noise_power(), watts_to_dbm(cfg.noise_power()));
    let freqs: Vec<String> = (0..cfg.num_subcarriers()).map(|i| format!("{:.6e}", cfg.subcarrier_freq(i))).collect();
    println!("subcarrier frequencies (Hz): {}", freqs.join(", "));
    let channels = synth(&cfg)?;
    let mut ok = true;
    match budget_from_channels(&channels, &cfg) {
        Ok(b) => {
            for (i, e) in b.epsilon.iter().enumerate() {
                if *e > 0.0 {
                    println!("subcarrier {i}: interference budget {:.6e} W", e);
                } else {
                    println!("error: scene.kappa: interference budget on subcarrier {i} is {e:.3e} W, must be positive");
                    ok = false;
                }
            }
        }
        Err(e) => {
            println!("error: {e}");
            ok = false;
        }
    }
    if ok {
        println!("all checks passed");
    }
    Ok(ok)
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { scenario, out, stages } => {
            let cfg = scenario.load()?;
            let manifest = run(&cfg, &parse_stages(&stages)?, &out)?;
            for s in &manifest.stages {
                println!("{:<10} {:>9.3} s  {}", s.stage.name(), s.wall_clock_s, s.artifacts.join(", "));
            }
        }
        Command::Figure { id, scenario, out } => {
            let path = figure(&id, &scenario.load()?, &out)?;
            println!("{}", path.display());
        }
        Command::Validate { scenario } => {
            if !validate(&scenario)? {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
