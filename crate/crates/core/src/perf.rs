//! Parallel-performance metrics and the benchmark sweep.
//!
//! Three derived quantities describe each (domain, worker-count) cell:
//! speedup `S_p = T_serial / T_parallel`, efficiency `E_p = S_p / p`, and
//! fractional load imbalance `f_l = max(t_i) / mean(t_i) - 1` over the
//! per-worker solve times. Per-step times cover the solve-only region
//! (assembly + GMRES, including halo traffic inside the solve); the first
//! step of every cell is a discarded warm-up and medians are used instead
//! of means to resist outliers.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::engine::{ProcessPool, SolverJob, StepInputs, StepResult, ThreadPool, WorkerContext};
use crate::fvm::SpeciesParams;
use crate::krylov::GmresConfig;
use crate::lattice::Lattice3D;

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("times must be positive")]
    NonPositiveTime,
    #[error("empty timing set")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Bench(String),
}

/// Per-worker solve wall times for one PDE step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTiming {
    pub per_worker_s: Vec<f64>,
    pub domain_dims: [usize; 3],
}

/// `S_p = T_serial / T_parallel`.
pub fn speedup(t_serial: f64, t_parallel: f64) -> Result<f64, PerfError> {
    if t_serial <= 0.0 || t_parallel <= 0.0 {
        return Err(PerfError::NonPositiveTime);
    }
    Ok(t_serial / t_parallel)
}

/// `E_p = S_p / p`.
pub fn efficiency(s_p: f64, p: usize) -> f64 {
    assert!(p >= 1);
    s_p / p as f64
}

/// `f_l = max(t_i) / mean(t_i) - 1`.
pub fn load_imbalance(times: &StepTiming) -> Result<f64, PerfError> {
    if times.per_worker_s.is_empty() {
        return Err(PerfError::Empty);
    }
    if times.per_worker_s.iter().any(|&t| t <= 0.0) {
        return Err(PerfError::NonPositiveTime);
    }
    let max = times
        .per_worker_s
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mean = times.per_worker_s.iter().sum::<f64>() / times.per_worker_s.len() as f64;
    Ok(max / mean - 1.0)
}

/// One benchmark observation.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    /// Cube edge length of the solve domain.
    pub domain: usize,
    pub p: usize,
    pub t_serial_s: f64,
    pub t_parallel_s: f64,
    pub speedup: f64,
    pub efficiency: f64,
    pub load_imbalance: f64,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    /// Cube edge lengths to benchmark.
    pub domains: Vec<usize>,
    /// Worker counts; 1 is added automatically when missing (the serial
    /// baseline every other cell is measured against).
    pub workers: Vec<usize>,
    /// Timed steps per cell, after one discarded warm-up step.
    pub steps: usize,
    pub dt: f64,
    pub species: SpeciesParams,
    pub gmres: GmresConfig,
    pub timeout: std::time::Duration,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            domains: vec![16, 24, 32],
            workers: vec![1, 2, 4],
            steps: 10,
            dt: 1.0,
            species: SpeciesParams::default(),
            gmres: GmresConfig::default(),
            timeout: crate::partition::DEFAULT_COMM_TIMEOUT,
        }
    }
}

/// How benchmark workers are hosted: in-process threads, or separate
/// message-passing processes spawned by the given command factory
/// `(p, rank, coordinator_addr) -> Command`.
pub enum WorkerBackend<'a> {
    Threads,
    #[allow(clippy::type_complexity)]
    Processes(&'a (dyn Fn(usize, usize, &str) -> std::process::Command + Sync)),
}

enum AnyPool {
    Threads(ThreadPool),
    Processes(ProcessPool),
}

impl AnyPool {
    fn build(
        backend: &WorkerBackend,
        p: usize,
        timeout: std::time::Duration,
    ) -> Result<Self, PerfError> {
        match backend {
            WorkerBackend::Threads => Ok(AnyPool::Threads(ThreadPool::new(
                p,
                WorkerContext {
                    handoff_dir: None,
                    timeout,
                },
            ))),
            WorkerBackend::Processes(make_cmd) => {
                let pool = ProcessPool::spawn(p, timeout, |rank, addr| make_cmd(p, rank, addr))
                    .map_err(|e| PerfError::Bench(e.to_string()))?;
                Ok(AnyPool::Processes(pool))
            }
        }
    }

    fn setup(&mut self, dims: [usize; 3], job: &SolverJob, scale: &[f64]) -> Result<(), PerfError> {
        match self {
            AnyPool::Threads(p) => p.setup(dims, job, scale),
            AnyPool::Processes(p) => p.setup(dims, job, scale),
        }
        .map_err(|e| PerfError::Bench(e.to_string()))
    }

    fn step(&mut self, inputs: &StepInputs) -> Result<StepResult, PerfError> {
        match self {
            AnyPool::Threads(p) => p.step(inputs),
            AnyPool::Processes(p) => p.step(inputs),
        }
        .map_err(|e| PerfError::Bench(e.to_string()))
    }

    fn shutdown(self) -> Result<(), PerfError> {
        match self {
            AnyPool::Threads(p) => p.shutdown(),
            AnyPool::Processes(p) => p.shutdown(),
        }
        .map_err(|e| PerfError::Bench(e.to_string()))
    }
}

/// Raw per-step observation row.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTime {
    pub domain: usize,
    pub p: usize,
    /// 0 is the discarded warm-up step.
    pub step: usize,
    pub worker: usize,
    pub t_solve_s: f64,
}

fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Synthetic tumour workload on a box: oxygen and nutrient start at the
/// far field, a central spherical blob consumes them and secretes
/// cytokines.
fn synthetic_inputs(
    dims: [usize; 3],
    species: &SpeciesParams,
) -> (crate::fvm::FieldSet, crate::fvm::BoxCoupling) {
    let lat = Lattice3D::new(dims[0], dims[1], dims[2], 1.0);
    let fields =
        crate::fvm::FieldSet::uniform(lat, species.oxygen.far_field, species.nutrient.far_field);
    let mut coupling = crate::fvm::BoxCoupling::zeros(lat);
    let c = [
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    ];
    let radius = (*dims.iter().min().unwrap() as f64 / 5.0).max(1.5);
    for idx in 0..lat.len() {
        let (i, j, k) = lat.coords(idx);
        let r2 = (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2);
        if r2 <= radius * radius {
            coupling.uptake_oxygen.values[idx] = 0.02;
            coupling.uptake_nutrient.values[idx] = 0.02;
            coupling.secretion_il6.values[idx] = 0.01;
            coupling.secretion_il8.values[idx] = 0.01;
        }
    }
    (fields, coupling)
}

/// Runs one (domain, p) cell: `steps + 1` solves on persistent workers,
/// the first discarded. Returns the timed per-step, per-worker times.
fn run_cell(
    n: usize,
    p: usize,
    cfg: &SweepConfig,
    backend: &WorkerBackend,
) -> Result<Vec<Vec<f64>>, PerfError> {
    let (mut fields, coupling) = synthetic_inputs([n, n, n], &cfg.species);
    let lat = fields.lattice();
    let job = SolverJob {
        species: cfg.species.clone(),
        gmres: cfg.gmres.clone(),
        h: lat.h,
    };
    let mut pool = AnyPool::build(backend, p, cfg.timeout)?;
    let scale = vec![1.0; lat.len()];
    pool.setup(lat.dims(), &job, &scale)?;
    let mut all_times = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..=cfg.steps {
        let inputs = StepInputs::from_fields(&fields, &coupling, cfg.dt);
        let result = pool.step(&inputs)?;
        all_times.push(result.timing.per_worker_s.clone());
        fields = result.into_field_set(lat);
    }
    pool.shutdown()?;
    Ok(all_times)
}

/// Sweep output: summary records, raw per-step times, and descriptions of
/// any cells that failed.
pub type SweepOutput = (Vec<BenchRecord>, Vec<RawTime>, Vec<String>);

/// Full sweep over domains and worker counts. Metrics for each cell are
/// computed against the p = 1 baseline of the same domain. Solver failures
/// in one cell are recorded and the sweep continues.
pub fn run_sweep(cfg: &SweepConfig, backend: &WorkerBackend) -> Result<SweepOutput, PerfError> {
    let mut workers = cfg.workers.clone();
    if !workers.contains(&1) {
        workers.push(1);
    }
    workers.sort_unstable();
    workers.dedup();
    let mut domains = cfg.domains.clone();
    domains.sort_unstable();
    domains.dedup();

    let mut records = Vec::new();
    let mut raw = Vec::new();
    let mut failures = Vec::new();
    for &n in &domains {
        let mut t_serial = None;
        for &p in &workers {
            let times = match run_cell(n, p, cfg, backend) {
                Ok(t) => t,
                Err(e) => {
                    failures.push(format!("domain {n}, p {p}: {e}"));
                    continue;
                }
            };
            for (step, ts) in times.iter().enumerate() {
                for (worker, &t) in ts.iter().enumerate() {
                    raw.push(RawTime {
                        domain: n,
                        p,
                        step,
                        worker,
                        t_solve_s: t,
                    });
                }
            }
            // per-step wall = slowest worker; medians over timed steps only
            let mut step_walls: Vec<f64> = times[1..]
                .iter()
                .map(|ts| ts.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let t_parallel = median(&mut step_walls);
            let worker_count = times[1].len();
            let per_worker_median: Vec<f64> = (0..worker_count)
                .map(|w| {
                    let mut col: Vec<f64> = times[1..].iter().map(|ts| ts[w]).collect();
                    median(&mut col)
                })
                .collect();
            if p == 1 {
                t_serial = Some(t_parallel);
            }
            let ts = t_serial.ok_or_else(|| {
                PerfError::Bench(format!("domain {n}: serial baseline missing before p={p}"))
            })?;
            let s_p = speedup(ts, t_parallel)?;
            let timing = StepTiming {
                per_worker_s: per_worker_median,
                domain_dims: [n, n, n],
            };
            records.push(BenchRecord {
                domain: n,
                p,
                t_serial_s: ts,
                t_parallel_s: t_parallel,
                speedup: s_p,
                efficiency: efficiency(s_p, p),
                load_imbalance: load_imbalance(&timing)?,
            });
        }
    }
    Ok((records, raw, failures))
}

pub const RAW_CSV_HEADER: &str = "domain,p,step,worker,t_solve_s";
pub const SUMMARY_CSV_HEADER: &str =
    "domain,p,T_serial_s,T_parallel_s,speedup,efficiency,load_imbalance";

pub fn write_raw_csv<W: Write>(mut w: W, rows: &[RawTime]) -> Result<(), PerfError> {
    writeln!(w, "{RAW_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.domain, r.p, r.step, r.worker, r.t_solve_s
        )?;
    }
    Ok(())
}

pub fn write_summary_csv<W: Write>(mut w: W, records: &[BenchRecord]) -> Result<(), PerfError> {
    writeln!(w, "{SUMMARY_CSV_HEADER}")?;
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| (r.domain, r.p));
    for r in sorted {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.domain, r.p, r.t_serial_s, r.t_parallel_s, r.speedup, r.efficiency, r.load_imbalance
        )?;
    }
    Ok(())
}

/// Writes `raw_times.csv` and `summary.csv` under `dir`.
pub fn write_sweep_csvs(
    dir: &Path,
    records: &[BenchRecord],
    raw: &[RawTime],
) -> Result<(), PerfError> {
    std::fs::create_dir_all(dir)?;
    let rawf = std::fs::File::create(dir.join("raw_times.csv"))?;
    write_raw_csv(std::io::BufWriter::new(rawf), raw)?;
    let sumf = std::fs::File::create(dir.join("summary.csv"))?;
    write_summary_csv(std::io::BufWriter::new(sumf), records)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn timing(ts: &[f64]) -> StepTiming {
        StepTiming {
            per_worker_s: ts.to_vec(),
            domain_dims: [8, 8, 8],
        }
    }

    #[test]
    fn speedup_examples() {
        assert_eq!(speedup(12.0, 6.0).unwrap(), 2.0);
        assert_eq!(speedup(3.5, 3.5).unwrap(), 1.0);
        // a parallel step 1.95x faster than serial reports exactly 1.95
        let t_serial = 8.0;
        assert_abs_diff_eq!(
            speedup(t_serial, t_serial / 1.95).unwrap(),
            1.95,
            epsilon = 1e-12
        );
        assert!(matches!(speedup(0.0, 1.0), Err(PerfError::NonPositiveTime)));
    }

    #[test]
    fn efficiency_examples() {
        assert_abs_diff_eq!(efficiency(1.95, 4), 0.4875, epsilon = 1e-15);
        assert_eq!(efficiency(1.0, 1), 1.0);
        assert_abs_diff_eq!(efficiency(1.2, 2), 0.6, epsilon = 1e-15);
    }

    #[test]
    fn load_imbalance_examples() {
        assert_eq!(load_imbalance(&timing(&[1.0, 1.0])).unwrap(), 0.0);
        assert_abs_diff_eq!(
            load_imbalance(&timing(&[2.0, 1.0, 1.0, 1.0])).unwrap(),
            0.6,
            epsilon = 1e-12
        );
        assert_eq!(load_imbalance(&timing(&[0.37])).unwrap(), 0.0);
        assert!(matches!(
            load_imbalance(&timing(&[1.0, 0.0])),
            Err(PerfError::NonPositiveTime)
        ));
    }

    #[test]
    fn imbalance_zero_iff_equal_times() {
        let f = load_imbalance(&timing(&[0.5, 0.5, 0.5])).unwrap();
        assert_eq!(f, 0.0);
        let f = load_imbalance(&timing(&[0.5, 0.5001, 0.5])).unwrap();
        assert!(f > 0.0);
    }

    #[test]
    fn csv_headers_are_pinned() {
        let mut raw = Vec::new();
        write_raw_csv(&mut raw, &[]).unwrap();
        assert!(raw.starts_with(b"domain,p,step,worker,t_solve_s\n"));
        let mut sum = Vec::new();
        write_summary_csv(&mut sum, &[]).unwrap();
        assert!(sum
            .starts_with(b"domain,p,T_serial_s,T_parallel_s,speedup,efficiency,load_imbalance\n"));
    }

    #[test]
    fn summary_rows_are_sorted_and_consistent() {
        let rec = |domain, p, ts, tp| {
            let s = speedup(ts, tp).unwrap();
            BenchRecord {
                domain,
                p,
                t_serial_s: ts,
                t_parallel_s: tp,
                speedup: s,
                efficiency: efficiency(s, p),
                load_imbalance: 0.0,
            }
        };
        let records = vec![
            rec(32, 4, 1.0, 0.6),
            rec(16, 1, 0.2, 0.2),
            rec(16, 2, 0.2, 0.15),
        ];
        let mut out = Vec::new();
        write_summary_csv(&mut out, &records).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[1].starts_with("16,1,"));
        assert!(lines[2].starts_with("16,2,"));
        assert!(lines[3].starts_with("32,4,"));
    }

    #[test]
    fn forced_imbalance_shows_up_in_f_l() {
        // counts (3,1) on a 4-plane extent: worker 0 owns three times the
        // planes of worker 1, so its solve time dominates the mean
        use crate::partition::SlabPartition;
        let dims = [48usize, 48, 4];
        let (mut fields, coupling) = synthetic_inputs(dims, &SpeciesParams::default());
        let lat = fields.lattice();
        let job = SolverJob {
            species: SpeciesParams::default(),
            gmres: GmresConfig::default(),
            h: 1.0,
        };
        let part = SlabPartition {
            axis: 2,
            starts: vec![0, 3],
            counts: vec![3, 1],
        };
        let mut pool = ThreadPool::new(2, WorkerContext::default());
        pool.setup_with_partition(lat.dims(), &job, &vec![1.0; lat.len()], part)
            .unwrap();
        let mut per_worker: Vec<Vec<f64>> = vec![Vec::new(); 2];
        for _ in 0..4 {
            let inputs = StepInputs::from_fields(&fields, &coupling, 1.0);
            let result = pool.step(&inputs).unwrap();
            for (w, &t) in result.timing.per_worker_s.iter().enumerate() {
                per_worker[w].push(t);
            }
            fields = result.into_field_set(lat);
        }
        pool.shutdown().unwrap();
        let medians: Vec<f64> = per_worker.iter_mut().map(|c| median(c)).collect();
        let timing = StepTiming {
            per_worker_s: medians,
            domain_dims: dims,
        };
        let f = load_imbalance(&timing).unwrap();
        assert!(f > 0.0, "f_l = {f} for a (3,1) split");
    }

    #[test]
    fn median_parallel_time_grows_with_domain() {
        let cfg = SweepConfig {
            domains: vec![16, 24, 32],
            workers: vec![1],
            steps: 3,
            ..Default::default()
        };
        let (records, _, failures) = run_sweep(&cfg, &WorkerBackend::Threads).unwrap();
        assert!(failures.is_empty());
        let times: Vec<f64> = records.iter().map(|r| r.t_parallel_s).collect();
        assert_eq!(times.len(), 3);
        assert!(times[0] <= times[1] && times[1] <= times[2], "{times:?}");
    }

    #[test]
    fn mini_sweep_baseline_identities() {
        let cfg = SweepConfig {
            domains: vec![12],
            workers: vec![1, 2],
            steps: 3,
            ..Default::default()
        };
        let (records, raw, failures) = run_sweep(&cfg, &WorkerBackend::Threads).unwrap();
        assert!(failures.is_empty(), "{failures:?}");
        assert_eq!(records.len(), 2);
        let base = &records[0];
        assert_eq!((base.domain, base.p), (12, 1));
        assert_eq!(base.speedup, 1.0);
        assert_eq!(base.efficiency, 1.0);
        assert_eq!(base.load_imbalance, 0.0);
        for r in &records {
            assert_abs_diff_eq!(r.efficiency, r.speedup / r.p as f64, epsilon = 1e-15);
            assert_abs_diff_eq!(r.speedup, r.t_serial_s / r.t_parallel_s, epsilon = 1e-15);
        }
        // raw rows: (steps+1) per worker per cell
        let p1_rows = raw.iter().filter(|r| r.p == 1).count();
        assert_eq!(p1_rows, 4);
        let p2_rows = raw.iter().filter(|r| r.p == 2).count();
        assert_eq!(p2_rows, 8);
        assert!(raw.iter().all(|r| r.t_solve_s > 0.0));
    }
}
