//! `mpmsim` — multiscale pleural tumour growth simulator.
//!
//! Subcommands: `run` (full simulation from a JSON config), `bench` (the
//! parallel-performance sweep), `mask-gen` (synthetic pleural mask to a
//! VMK1 file) and the hidden `worker` entry point used by process-mode
//! benchmarking.
//!
//! Exit codes: 0 success, 2 config error, 3 solver failure, 4 io failure.

use std::error::Error as StdError;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use mpmsim_core::engine::{worker_loop, WorkerContext};
use mpmsim_core::lattice::Lattice3D;
use mpmsim_core::partition::socket;
use mpmsim_core::perf::{self, SweepConfig, WorkerBackend};
use mpmsim_core::sim::{pleura, run_simulation, SimConfig, SimError};

#[derive(Parser)]
#[command(
    name = "mpmsim",
    version,
    about = "Multiscale pleural tumour growth simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation from a JSON config (defaults when omitted).
    Run(RunArgs),
    /// Benchmark the parallel PDE solver over domain sizes and worker
    /// counts; writes raw_times.csv and summary.csv.
    Bench(BenchArgs),
    /// Generate a synthetic pleural-shell mask as a VMK1 file.
    MaskGen(MaskGenArgs),
    /// Internal: solver worker process (spawned by process-mode runs).
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config path; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured worker count.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory for snapshots and handoff files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the configured RNG seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON config supplying solver and transport parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sweep worker counts 1..=p.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory for the CSVs.
    #[arg(long, default_value = "bench_out")]
    out: PathBuf,
    /// Unused by the sweep itself; accepted for interface uniformity.
    #[arg(long)]
    seed: Option<u64>,
    /// Cube edge lengths to benchmark.
    #[arg(long, value_delimiter = ',', default_value = "16,24,32")]
    domains: Vec<usize>,
    /// Timed steps per cell (one extra warm-up step is discarded).
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Host workers in separate processes connected over sockets instead
    /// of in-process threads.
    #[arg(long)]
    process_workers: bool,
}

#[derive(Args)]
struct MaskGenArgs {
    /// Destination VMK1 file.
    #[arg(long)]
    out: PathBuf,
    /// Lattice dims, e.g. 64,64,64.
    #[arg(long, value_delimiter = ',', default_value = "64,64,64")]
    dims: Vec<usize>,
    /// Inner shell radius in voxels.
    #[arg(long)]
    inner: f64,
    /// Outer shell radius in voxels.
    #[arg(long)]
    outer: f64,
    /// Shell center; domain midpoint when omitted.
    #[arg(long, value_delimiter = ',')]
    center: Option<Vec<f64>>,
}

#[derive(Args)]
struct WorkerArgs {
    /// Coordinator address, e.g. 127.0.0.1:45123.
    #[arg(long)]
    connect: SocketAddr,
    #[arg(long)]
    rank: usize,
    #[arg(long)]
    world: usize,
    /// Directory of the shared handoff files (shared-file mode only).
    #[arg(long)]
    handoff_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 30.0)]
    timeout_s: f64,
}

fn print_error_chain(err: &dyn StdError) {
    eprintln!("error: {err}");
    let mut source = err.source();
    while let Some(s) = source {
        eprintln!("  caused by: {s}");
        source = s.source();
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<SimConfig, SimError> {
    match path {
        None => Ok(SimConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            SimConfig::from_json(&text)
        }
    }
}

fn cmd_run(args: &RunArgs) -> Result<(), SimError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let artifacts = run_simulation(&cfg, &args.out)?;
    println!(
        "completed {} MCS: tumour voxels {} -> {}, {} PDE steps, {} snapshots under {}",
        artifacts.mcs_completed,
        artifacts.initial_tumour_voxels,
        artifacts.final_tumour_voxels,
        artifacts.solver_steps,
        artifacts.snapshots.len(),
        artifacts.out_dir.display()
    );
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<(), SimError> {
    let cfg = load_config(&args.config)?;
    let workers: Vec<usize> = match args.workers {
        Some(p) => (1..=p.max(1)).collect(),
        None => vec![1, 2, 4],
    };
    let sweep = SweepConfig {
        domains: args.domains.clone(),
        workers,
        steps: args.steps,
        dt: cfg.dt,
        species: cfg.species.clone(),
        gmres: cfg.gmres.clone(),
        timeout: Duration::from_secs_f64(cfg.comm_timeout_s),
    };
    let exe = std::env::current_exe()?;
    let make_cmd = move |p: usize, rank: usize, addr: &str| {
        let mut cmd = std::process::Command::new(&exe);
        cmd.args(["worker", "--connect", addr])
            .arg("--rank")
            .arg(rank.to_string())
            .arg("--world")
            .arg(p.to_string());
        cmd
    };
    let backend = if args.process_workers {
        WorkerBackend::Processes(&make_cmd)
    } else {
        WorkerBackend::Threads
    };
    let (records, raw, failures) = perf::run_sweep(&sweep, &backend).map_err(|e| match e {
        perf::PerfError::Io(io) => SimError::Io(io),
        other => SimError::Config(other.to_string()),
    })?;
    perf::write_sweep_csvs(&args.out, &records, &raw).map_err(|e| match e {
        perf::PerfError::Io(io) => SimError::Io(io),
        other => SimError::Config(other.to_string()),
    })?;
    println!("{}", perf::SUMMARY_CSV_HEADER);
    for r in &records {
        println!(
            "{},{},{:.6},{:.6},{:.3},{:.3},{:.3}",
            r.domain, r.p, r.t_serial_s, r.t_parallel_s, r.speedup, r.efficiency, r.load_imbalance
        );
    }
    for f in &failures {
        eprintln!("cell failed: {f}");
    }
    if !failures.is_empty() {
        return Err(SimError::Config(format!(
            "{} benchmark cells failed",
            failures.len()
        )));
    }
    println!("csv written to {}", args.out.display());
    Ok(())
}

fn cmd_mask_gen(args: &MaskGenArgs) -> Result<(), SimError> {
    if args.dims.len() != 3 || args.dims.contains(&0) {
        return Err(SimError::Config(format!(
            "--dims needs three positive values, got {:?}",
            args.dims
        )));
    }
    if args.center.as_ref().is_some_and(|c| c.len() != 3) {
        return Err(SimError::Config("--center needs three values".into()));
    }
    let lattice = Lattice3D::new(args.dims[0], args.dims[1], args.dims[2], 1.0);
    let center = args.center.as_ref().map(|c| [c[0], c[1], c[2]]);
    let mask = pleura::generate_synthetic_pleura(lattice, args.inner, args.outer, center)?;
    mask.write_vmk1_file(&args.out)?;
    println!(
        "wrote {} ({} of {} voxels in-mask)",
        args.out.display(),
        mask.count(),
        lattice.len()
    );
    Ok(())
}

fn cmd_worker(args: &WorkerArgs) -> Result<(), SimError> {
    let timeout = Duration::from_secs_f64(args.timeout_s);
    let transport = socket::worker_connect(args.connect, args.rank, args.world, timeout)
        .map_err(mpmsim_core::engine::EngineError::from)
        .map_err(SimError::Engine)?;
    let ctx = WorkerContext {
        handoff_dir: args.handoff_dir.clone(),
        timeout,
    };
    worker_loop(transport, ctx).map_err(SimError::Engine)
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Bench(args) => cmd_bench(args),
        Command::MaskGen(args) => cmd_mask_gen(args),
        Command::Worker(args) => cmd_worker(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            print_error_chain(&e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
