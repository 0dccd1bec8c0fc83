use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use cecil::diagnostics::{gradcheck_suite, quantizer_selftest};
use cecil::fronthaul::{AccessMode, FronthaulModel};
use cecil::harness::{
    make_test_set, resolve_test_set, run_experiment, time_schemes, train_models, write_results, ChannelSweep,
    ExperimentConfig, ResultRow, Scheme, TrainedPolicy, UtilityName,
};
use cecil::{Error, Result};

#[derive(Parser)]
#[command(name = "cecil", version, about = "Cooperative cloud/edge power control for fog RANs")]
struct Cli {
    /// Log progress to stderr (`-v` info, `-vv` debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every learned model of a config into its checkpoint directory.
    Train(ConfigArgs),
    /// Evaluate one saved model on the config's test set.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Test channel, e.g. `perfect`, `snr=0dB`, `B=3,rounded`; defaults
        /// to the training channel.
        #[arg(long = "test-channel")]
        test_channel: Option<FronthaulModel>,
    },
    /// Run every enabled scheme at every sweep point and write the CSV.
    Sweep(ConfigArgs),
    /// Check that the stochastic quantizer is unbiased.
    QuantizerSelftest {
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        levels: Vec<u32>,
        /// Inputs per alphabet, evenly spaced over [0, C-1].
        #[arg(long, default_value_t = 50)]
        grid: usize,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        /// Largest allowed |mean - input| in standard errors.
        #[arg(long, default_value_t = 4.0)]
        max_z: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every layer type and the full pipeline.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Sample a test set and write it with its seed manifest.
    MakeTestset {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 10_000)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Median inference time of every enabled scheme on the test set.
    Time(ConfigArgs),
}

/// A config file plus per-field overrides. Without `--config` the defaults
/// apply and `--n` is required.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `srmax` or `eemax`.
    #[arg(long, value_parser = parse_utility)]
    utility: Option<UtilityName>,
    #[arg(long)]
    power_budget: Option<f64>,
    #[arg(long)]
    static_power: Option<f64>,
    /// `noma`, `oma` or both, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_access)]
    access: Option<Vec<AccessMode>>,
    /// M_U values, comma separated.
    #[arg(long, value_delimiter = ',')]
    uplink: Option<Vec<usize>>,
    #[arg(long)]
    downlink: Option<usize>,
    /// Sweep channel, repeatable: `perfect`, `snr=0dB`, `B=3`,
    /// `snr=10dB,gain=[0.1,1]`.
    #[arg(long)]
    channel: Option<Vec<FronthaulModel>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    test_seed: Option<u64>,
    #[arg(long)]
    test_set: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

fn parse_utility(s: &str) -> std::result::Result<UtilityName, String> {
    match s {
        "srmax" => Ok(UtilityName::Srmax),
        "eemax" => Ok(UtilityName::Eemax),
        _ => Err(format!("expected srmax or eemax, got {s:?}")),
    }
}

fn parse_access(s: &str) -> std::result::Result<AccessMode, String> {
    match s {
        "noma" => Ok(AccessMode::Noma),
        "oma" => Ok(AccessMode::Oma),
        _ => Err(format!("expected noma or oma, got {s:?}")),
    }
}

/// Repeated `--channel` values as a sweep.
fn channel_sweep(items: &[FronthaulModel]) -> Result<ChannelSweep> {
    let mut sweep = ChannelSweep {
        perfect: false,
        ..ChannelSweep::default()
    };
    for item in items {
        match *item {
            FronthaulModel::Perfect => sweep.perfect = true,
            FronthaulModel::AdditiveNoise { variance } => sweep.snr_db.push(cecil::fronthaul::variance_to_snr_db(variance)),
            FronthaulModel::AsymmetricNoisy {
                variance,
                gain_low,
                gain_high,
            } => {
                if sweep.asymmetric_gain.is_some_and(|g| g != [gain_low, gain_high]) {
                    return Err(Error::Config("all asymmetric channels of a sweep share one gain range".into()));
                }
                sweep.asymmetric_gain = Some([gain_low, gain_high]);
                sweep.snr_db.push(cecil::fronthaul::variance_to_snr_db(variance));
            }
            FronthaulModel::Quantized { levels } => sweep.bits.push(levels.trailing_zeros()),
            FronthaulModel::Rounded { .. } => {
                return Err(Error::Config(format!(
                    "{} is a test-only channel; use it with eval",
                    item.descriptor()
                )));
            }
        }
    }
    Ok(sweep)
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, self.n) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(n)) => ExperimentConfig::new(n),
            (None, None) => return Err(Error::Config("pass --config or --n".into())),
        };
        if let Some(n) = self.n {
            cfg.n = n;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.utility {
            cfg.utility = v;
        }
        if let Some(v) = self.power_budget {
            cfg.power_budget = v;
        }
        if let Some(v) = self.static_power {
            cfg.static_power = v;
        }
        if let Some(v) = &self.access {
            cfg.access = v.clone();
        }
        if let Some(v) = &self.uplink {
            cfg.uplink = v.clone();
        }
        if let Some(v) = self.downlink {
            cfg.downlink = Some(v);
        }
        if let Some(v) = &self.channel {
            cfg.channel = channel_sweep(v)?;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batches_per_epoch {
            cfg.train.batches_per_epoch = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = self.test_size {
            cfg.test_size = v;
        }
        if let Some(v) = self.test_seed {
            cfg.test_seed = v;
        }
        if let Some(v) = &self.test_set {
            cfg.test_set = Some(v.clone());
        }
        if let Some(v) = &self.output {
            cfg.output = Some(v.clone());
        }
        if let Some(v) = &self.checkpoint_dir {
            cfg.checkpoint_dir = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            for (name, curve) in train_models(&cfg)? {
                match curve {
                    Some(c) => println!(
                        "{name}: trained, validation utility {:.4} -> {:.4} (best epoch {})",
                        c.initial,
                        c.best(),
                        c.best_epoch
                    ),
                    None => println!("{name}: checkpoint already present"),
                }
            }
            Ok(true)
        }
        Command::Eval {
            config,
            model,
            test_channel,
        } => {
            let cfg = config.resolve()?;
            let mut trained = TrainedPolicy::load(&model)?;
            let label = trained.label();
            let (m_u, m_d) = trained.resource_blocks();
            let channel = match (test_channel, &trained) {
                (Some(c), _) => c,
                (None, TrainedPolicy::Cecil(m)) => m.config().channel.clone(),
                (None, _) => FronthaulModel::Perfect,
            };
            if trained.policy().ens() != cfg.n {
                return Err(Error::Config(format!(
                    "model has N = {}, config has N = {}",
                    trained.policy().ens(),
                    cfg.n
                )));
            }
            let states = resolve_test_set(&cfg)?;
            let kind = trained.policy().utility();
            let eval = Scheme::Learned {
                policy: trained.policy_mut(),
                channel: channel.clone(),
                seed: cfg.seed,
            }
            .evaluate(&states, kind, cfg.draws_per_sample)?;
            let row = ResultRow {
                scheme: label,
                n: cfg.n,
                m_u,
                m_d,
                channel: channel.descriptor(),
                mean_utility: eval.mean,
                std_error: eval.std_error,
                runtime_s: 0.0,
                seed: cfg.seed,
            };
            emit(&cfg, &[row])?;
            Ok(true)
        }
        Command::Sweep(args) => {
            let mut cfg = args.resolve()?;
            let output = cfg.output.take();
            let rows = run_experiment(&cfg)?;
            cfg.output = output;
            emit(&cfg, &rows)?;
            Ok(true)
        }
        Command::QuantizerSelftest {
            levels,
            grid,
            draws,
            max_z,
            seed,
        } => {
            if levels.iter().any(|&c| c < 2) || grid == 0 || draws < 2 {
                return Err(Error::Config("need C >= 2, grid >= 1 and draws >= 2".into()));
            }
            let checks = quantizer_selftest(&levels, grid, draws, seed);
            let failed = checks.iter().filter(|c| !c.passes(max_z)).count();
            for c in &levels {
                let worst = checks
                    .iter()
                    .filter(|k| k.levels == *c)
                    .map(|k| k.z_score())
                    .fold(0.0, f64::max);
                println!("C={c:<3} {grid} inputs x {draws} draws, worst |z| = {worst:.2}");
            }
            println!("{} of {} inputs within {max_z} standard errors", checks.len() - failed, checks.len());
            Ok(failed == 0)
        }
        Command::Gradcheck { tolerance, seed } => {
            let cases = gradcheck_suite(seed)?;
            let mut ok = true;
            for c in &cases {
                let pass = c.report.passes(tolerance);
                ok &= pass;
                let at = c.report.worst.as_ref().map_or(String::new(), |(n, i)| format!(" at {n}[{i}]"));
                println!(
                    "{} {:<45} max rel error {:.2e}{at}",
                    if pass { "ok  " } else { "FAIL" },
                    c.name,
                    c.report.max_rel_error
                );
            }
            Ok(ok)
        }
        Command::MakeTestset { n, size, seed, output } => {
            make_test_set(n, size, seed, &output)?;
            println!("wrote {size} states of size {n} to {}", output.display());
            Ok(true)
        }
        Command::Time(args) => {
            let cfg = args.resolve()?;
            let times = time_schemes(&cfg)?;
            let pgd = times.iter().find(|(s, _)| s == "pgd").map(|(_, t)| *t);
            println!("scheme,runtime_s,speedup_vs_pgd");
            for (scheme, t) in &times {
                let speedup = pgd.map_or(String::new(), |p| format!("{:.2}", p / t));
                println!("{scheme},{t:.6},{speedup}");
            }
            Ok(true)
        }
    }
}

/// Writes rows to the configured output file, or to stdout.
fn emit(cfg: &ExperimentConfig, rows: &[ResultRow]) -> Result<()> {
    match &cfg.output {
        Some(path) => {
            cecil::harness::save_results(path, rows)?;
            info!("wrote {} rows to {}", rows.len(), path.display());
            Ok(())
        }
        None => write_results(io::stdout().lock(), rows),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        // a self-check that ran but did not pass
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numeric { .. } => 3,
                _ => 2,
            })
        }
    }
}
