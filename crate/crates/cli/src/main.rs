use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dgcn_core::experiment::{SweepConfig, SweepKind};
use dgcn_core::topology::{forbidden_to_csv, read_forbidden_csv};
use dgcn_core::{
    design_mixing_admm, generate_synthetic, load_dataset, partition_bfs, report, run_experiment,
    write_dataset, AdmmOptions, DatasetSummary, Error, ExecMode, ExperimentConfig, ModelKind, Period, SbmSpec,
    SensorGridSpec, Summary, SyntheticSpec,
};

#[derive(Parser)]
#[command(name = "dgcn", version, about = "Distributed graph convolutional network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset directory and print its size.
    LoadCheck {
        dir: PathBuf,
        /// Require the counts of a known benchmark (citeseer, cora, pubmed).
        #[arg(long)]
        expect: Option<String>,
    },
    /// Write a synthetic dataset.
    Generate {
        #[arg(long, value_enum, default_value = "sbm")]
        kind: GenKind,
        /// TOML file with generator parameters (overrides --kind).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset across agents; writes assign.csv, forbidden.csv and boundary.csv.
    Partition {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        agents: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Design a sparse mixing matrix for a forbidden-link pattern.
    DesignTopology {
        /// 0/1 matrix, 1 where a link is not needed.
        #[arg(long)]
        forbidden: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
        #[arg(long, default_value_t = 5000)]
        max_iter: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the distributed model.
    Train(RunArgs),
    /// Train the centralized GCN and the graph-free network.
    Baseline(RunArgs),
    /// Run the sweep described in the config (or chosen with --kind).
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        kind: Option<SweepArg>,
    },
    /// Rebuild tables and plots from an output directory.
    Report { dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    Sbm,
    SensorGrid,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    SparseConnectivity,
    Order,
    ConsensusPeriod,
    Optimizer,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sequential,
    Parallel,
}

/// Experiment config plus command-line overrides; flags win over the file.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Positive integer or `never`.
    #[arg(long)]
    period: Option<Period>,
    #[arg(long)]
    eta0: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

impl RunArgs {
    fn load(&self) -> dgcn_core::Result<ExperimentConfig> {
        let mut c = ExperimentConfig::read(&self.config)?;
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(v) = &self.data_dir {
            c.data.directory = Some(v.clone());
            c.data.synthetic = None;
        }
        if let Some(v) = self.iterations {
            c.train.iterations = v;
        }
        if let Some(v) = self.seed {
            c.train.seed = v;
        }
        if let Some(v) = self.agents {
            c.agents = v;
        }
        if let Some(v) = self.repetitions {
            c.repetitions = v;
        }
        if let Some(v) = self.period {
            c.consensus_period = v;
        }
        if let Some(v) = self.eta0 {
            c.train.schedule.eta0 = v;
        }
        if let Some(v) = self.mode {
            c.mode = match v {
                ModeArg::Sequential => ExecMode::Sequential,
                ModeArg::Parallel => ExecMode::Parallel,
            };
        }
        Ok(c)
    }
}

/// 1 for bad or missing input, 2 for failures while running.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
        Error::Io { .. } | Error::NonFinite(_) | Error::Diverged { .. } | Error::StaleCache(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write(path: &Path, text: String) -> dgcn_core::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(command: Command) -> dgcn_core::Result<()> {
    match command {
        Command::LoadCheck { dir, expect } => {
            let summary = DatasetSummary::of(&load_dataset(&dir)?);
            println!("{summary}");
            if let Some(name) = summary.identify() {
                println!("matches {name}");
            }
            if let Some(name) = expect {
                summary.expect(&name)?;
            }
        }
        Command::Generate { kind, spec, seed, out } => {
            let mut spec = match spec {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })?;
                    toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
                }
                None => match kind {
                    GenKind::Sbm => SyntheticSpec::SbmClassification(SbmSpec::default()),
                    GenKind::SensorGrid => SyntheticSpec::SensorGridRegression(SensorGridSpec::default()),
                },
            };
            if let Some(seed) = seed {
                match &mut spec {
                    SyntheticSpec::SbmClassification(s) => s.seed = seed,
                    SyntheticSpec::SensorGridRegression(s) => s.seed = seed,
                }
            }
            let graph = generate_synthetic(&spec)?;
            write_dataset(&graph, &out)?;
            println!("{}", DatasetSummary::of(&graph));
        }
        Command::Partition { data, agents, seed, out } => {
            let graph = load_dataset(&data)?;
            let p = partition_bfs(&graph, agents, seed)?;
            let mut assign = String::from("node,agent\n");
            for (i, a) in p.assign.iter().enumerate() {
                writeln!(assign, "{i},{a}").unwrap();
            }
            let boundary: String = p
                .boundary
                .iter()
                .map(|row| row.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",") + "\n")
                .collect();
            write(&out.join("assign.csv"), assign)?;
            write(&out.join("forbidden.csv"), forbidden_to_csv(&p.forbidden))?;
            write(&out.join("boundary.csv"), boundary)?;
            for k in 0..agents {
                println!(
                    "agent {k}: nodes={} train={} neighbours={}",
                    p.agent_nodes[k].len(),
                    p.agent_train[k].len(),
                    p.boundary[k].iter().filter(|&&b| b > 0).count()
                );
            }
            println!("required links: {}", p.required_links().len());
        }
        Command::DesignTopology {
            forbidden,
            gamma,
            rho,
            max_iter,
            out,
        } => {
            let a = read_forbidden_csv(&forbidden)?;
            let d = design_mixing_admm(
                &a,
                AdmmOptions {
                    gamma,
                    rho,
                    max_iter,
                    ..AdmmOptions::default()
                },
            )?;
            d.mixing.write_csv(&out)?;
            println!(
                "iterations={} converged={} spectral_gap={:.6} links={} unneeded_links={:?}",
                d.state.iteration,
                d.state.converged,
                d.mixing.spectral_gap(),
                d.mixing.comm_edges().len(),
                d.unneeded_links
            );
        }
        Command::Train(args) => {
            let mut c = args.load()?;
            c.models = vec![ModelKind::Dgcn];
            c.sweep = None;
            execute(&c)?;
        }
        Command::Baseline(args) => {
            let mut c = args.load()?;
            c.models = vec![ModelKind::Gcn, ModelKind::Nn];
            c.sweep = None;
            execute(&c)?;
        }
        Command::Sweep { run, kind } => {
            let mut c = run.load()?;
            if let Some(kind) = kind {
                let kind = match kind {
                    SweepArg::SparseConnectivity => SweepKind::SparseConnectivity,
                    SweepArg::Order => SweepKind::Order,
                    SweepArg::ConsensusPeriod => SweepKind::ConsensusPeriod,
                    SweepArg::Optimizer => SweepKind::Optimizer,
                };
                let base = c.sweep.take().unwrap_or_default();
                c.sweep = Some(SweepConfig { kind, ..base });
            }
            if c.sweep.is_none() {
                return Err(Error::Config("no [sweep] section and no --kind given".into()));
            }
            execute(&c)?;
        }
        Command::Report { dir } => print_summary(&report(&dir)?),
    }
    Ok(())
}

fn execute(c: &ExperimentConfig) -> dgcn_core::Result<()> {
    let outcome = run_experiment(c)?;
    print_summary(&outcome.summary);
    for f in &outcome.failures {
        eprintln!("failed: {} {} rep {}: {}", f.variant, f.model.name(), f.repetition, f.error);
    }
    println!("wrote {}", outcome.output_dir.display());
    Ok(())
}

fn print_summary(s: &Summary) {
    println!(
        "{:<12} {:<5} {:>4} {:>22} {:>24} {:>12} {:>9}",
        "variant", "model", "reps", "final loss", "final metric", "msgs/iter", "survival"
    );
    for r in &s.rows {
        let metric = match (r.final_metric_mean, r.final_metric_std) {
            (Some(m), Some(sd)) => format!("{} {m:.4} ± {sd:.4}", r.metric),
            _ => "-".into(),
        };
        println!(
            "{:<12} {:<5} {:>4} {:>22} {:>24} {:>12} {:>9}",
            r.variant,
            r.model.name(),
            r.repetitions,
            format!("{:.4e} ± {:.1e}", r.final_loss_mean, r.final_loss_std),
            metric,
            r.messages_per_iteration,
            r.survival.map_or("-".into(), |s| format!("{s:.3}"))
        );
    }
}
