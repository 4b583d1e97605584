//! `nasf`: run searches, serve as a worker, and summarise run logs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use clap::{Parser, Subcommand, ValueEnum};
use nasf::analysis::{check_elitism, comparison_csv, format_g, generation_stats, stats_csv};
use nasf::comms::{self, in_process_group, Address, InitConfig, Role, MASTER_ENV};
use nasf::curator::DataSource;
use nasf::search::{run_experiment, serve_experiment};
use nasf::{Error, ExperimentConfig, Mode, Result, RunLog};

#[derive(Parser)]
#[command(name = "nasf", version, about = "Genetic neural architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a search and write its log.
    Run(RunArgs),
    /// Join a master and serve tasks until it shuts down.
    Worker {
        /// Master address as host:port.
        #[arg(long, env = MASTER_ENV)]
        master: String,
    },
    /// Per-generation statistics of run logs as CSV.
    Analyze {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Where the run log goes, one JSON record per line.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the mode in the config file.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Accept worker processes on host:port. Without it, distributed modes
    /// run their ranks as threads of this process.
    #[arg(long)]
    listen: Option<String>,
    /// Total number of ranks including this one. Defaults to 1 for local
    /// runs and 2 otherwise.
    #[arg(long)]
    world: Option<usize>,
    /// Overrides `data.source`.
    #[arg(long)]
    dataset: Option<Dataset>,
    /// Overrides `data.data_dir`.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dataset {
    Synthetic,
    Cifar10,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args),
        Command::Worker { master } => worker(&master),
        Command::Analyze { logs, out_dir } => analyze(&logs, &out_dir),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nasf: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if let Some(dataset) = args.dataset {
        cfg.data.source = match dataset {
            Dataset::Synthetic => DataSource::Synthetic,
            Dataset::Cifar10 => DataSource::Cifar10,
        };
    }
    if let Some(dir) = args.data_dir {
        cfg.data.data_dir = Some(dir);
    }
    cfg.validate()?;
    let world = args
        .world
        .unwrap_or(if cfg.mode == Mode::Local { 1 } else { 2 });
    if world == 0 {
        return Err(Error::Config("--world must be >= 1".into()));
    }
    if cfg.mode == Mode::Local && world != 1 {
        return Err(Error::Config("local mode runs on a single rank".into()));
    }
    if cfg.mode == Mode::DistPop && world < 2 {
        return Err(Error::Config("dist-pop needs --world >= 2".into()));
    }

    let data = cfg.data.load::<f64>()?;
    let log = match (&args.listen, cfg.mode) {
        (_, Mode::Local) => run_experiment(&cfg, &data, &mut nasf::Environment::solo())?,
        (Some(addr), _) => {
            eprintln!("waiting for {} worker(s) on {addr}", world - 1);
            let mut env = comms::init(InitConfig::new(
                Role::Master,
                Address::Tcp(addr.clone()),
                world,
            ))?;
            run_experiment(&cfg, &data, &mut env)?
        }
        (None, _) => {
            let mut envs = in_process_group(world, comms::default_timeout())?.into_iter();
            let mut root = envs.next().expect("world >= 1");
            let workers: Vec<_> = envs
                .map(|mut env| thread::spawn(move || serve_experiment(&mut env)))
                .collect();
            let log = run_experiment(&cfg, &data, &mut root);
            for w in workers {
                let served = w.join().expect("worker thread panicked");
                if log.is_ok() {
                    served?;
                }
            }
            log?
        }
    };
    let log = log.ok_or_else(|| Error::Protocol("rank 0 produced no run log".into()))?;
    log.write(&args.out)?;
    for g in &log.generations {
        let best = log
            .generation(g.generation)
            .map(|e| e.accuracy)
            .fold(0.0, f64::max);
        eprintln!(
            "generation {}: best accuracy {} in {} s",
            g.generation,
            format_g(best),
            format_g(g.wall_seconds)
        );
    }
    eprintln!(
        "{} evaluations written to {}",
        log.evaluations.len(),
        args.out.display()
    );
    Ok(())
}

fn worker(master: &str) -> Result<()> {
    let mut env = comms::init(InitConfig::new(
        Role::Worker,
        Address::Tcp(master.to_string()),
        0,
    ))?;
    let rank = env.rank();
    let handled = serve_experiment(&mut env)?;
    eprintln!("rank {rank}: served {handled} task(s)");
    Ok(())
}

fn analyze(logs: &[PathBuf], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut runs = Vec::with_capacity(logs.len());
    for path in logs {
        let log = RunLog::read(path)?;
        let stats = generation_stats(&log)
            .and_then(|s| check_elitism(&log, &s).map(|()| s))
            .map_err(|e| Error::Analysis(format!("{}: {e}", path.display())))?;
        let stem = path
            .file_stem()
            .map_or_else(|| "log".into(), |s| s.to_string_lossy().into_owned());
        let n = seen.entry(stem.clone()).or_default();
        *n += 1;
        let label = if *n == 1 { stem } else { format!("{stem}-{n}") };
        let csv = out_dir.join(format!("{label}.csv"));
        std::fs::write(&csv, stats_csv(&stats))?;
        eprintln!(
            "{}: {} generations -> {}",
            path.display(),
            stats.len(),
            csv.display()
        );
        runs.push((label, stats));
    }
    std::fs::write(out_dir.join("comparison.csv"), comparison_csv(&runs))?;
    Ok(())
}
