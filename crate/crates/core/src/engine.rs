//! Parallel execution of one PDE step across slab workers.
//!
//! Rank 0 is the driver's thread and also owns slab 0. Workers (threads or
//! separate processes, depending on the transport) sit in [`worker_loop`]
//! waiting for control messages:
//!
//! * `SETUP` re-partitions a new bounding box, carries per-species
//!   transport parameters and solver settings, and is followed by a
//!   ghost-extended scatter of the diffusivity-scale field;
//! * `STEP` scatters concentrations and coupling fields, runs the four
//!   species solves collectively, gathers results and per-worker solve
//!   times back to rank 0;
//! * `STEP_FILE` does the same except every worker reads its inputs from
//!   the shared handoff file and rank 0 returns results through a second
//!   file, reproducing the sequential-framework/parallel-solver file
//!   architecture so its overhead can be measured;
//! * `SHUTDOWN` ends the loop.
//!
//! Workers beyond the plane count of the current box idle until the next
//! `SETUP`. All numeric control payloads ride the same 16-byte-header f64
//! messages as field data, so the channel and socket transports run an
//! identical protocol.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::fvm::{self, BoxCoupling, FieldSet, FvmError, Species, SpeciesParams, SpeciesStepStats};
use crate::krylov::{GmresConfig, Preconditioner, SolveStats};
use crate::lattice::Lattice3D;
use crate::partition::{
    channel_mesh, gather_slab, longest_axis, partition_box, scatter_slab, socket, tag,
    ChannelTransport, CommError, LocalSlab, Message, SlabComm, SlabPartition, Transport,
    WorkerTopology, DEFAULT_COMM_TIMEOUT,
};
use crate::perf::StepTiming;
use crate::sim::handoff::{self, HandoffError};

const CTRL_SETUP: u32 = 100;
const CTRL_STEP: u32 = 101;
const CTRL_SHUTDOWN: u32 = 102;
const CTRL_STEP_FILE: u32 = 103;

fn conc_tag(s: usize) -> u32 {
    10 + s as u32
}
fn src_tag(s: usize) -> u32 {
    20 + s as u32
}
fn upt_tag(s: usize) -> u32 {
    30 + s as u32
}
fn result_tag(s: usize) -> u32 {
    40 + s as u32
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Fvm(#[from] FvmError),
    #[error(transparent)]
    Handoff(#[from] HandoffError),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("worker panicked")]
    WorkerPanic,
}

impl EngineError {
    /// True when the underlying cause is a solver convergence failure.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            EngineError::Fvm(FvmError::Solver(
                crate::krylov::KrylovError::SolverDiverged { .. }
            ))
        )
    }
}

/// Static per-run solver inputs shared by every worker.
#[derive(Debug, Clone)]
pub struct SolverJob {
    pub species: SpeciesParams,
    pub gmres: GmresConfig,
    pub h: f64,
}

/// Spawn-time worker context.
#[derive(Debug, Clone)]
pub struct WorkerContext {
    /// Directory holding the shared handoff files, for `STEP_FILE` mode.
    pub handoff_dir: Option<PathBuf>,
    pub timeout: Duration,
}

impl Default for WorkerContext {
    fn default() -> Self {
        Self {
            handoff_dir: None,
            timeout: DEFAULT_COMM_TIMEOUT,
        }
    }
}

/// One worker's decoded setup state.
struct WorkerSetup {
    box_dims: [usize; 3],
    h: f64,
    part: SlabPartition,
    slab: LocalSlab,
    topo: WorkerTopology,
    species: SpeciesParams,
    gmres: GmresConfig,
    /// Diffusivity multiplier in the extended (owned + ghost) layout.
    scale_ext: Vec<f64>,
}

fn encode_setup(job: &SolverJob, box_dims: [usize; 3], part: &SlabPartition) -> Vec<f64> {
    let p = part.workers();
    let mut v = Vec::with_capacity(6 + 2 * p + 16 + 5);
    v.extend(box_dims.iter().map(|&d| d as f64));
    v.push(job.h);
    v.push(p as f64);
    v.push(part.axis as f64);
    v.extend(part.starts.iter().map(|&s| s as f64));
    v.extend(part.counts.iter().map(|&c| c as f64));
    for s in Species::ALL {
        let tp = job.species.get(s);
        v.push(tp.diffusivity);
        v.push(tp.decay_rate);
        v.push(tp.far_field);
        v.push(match tp.bc_kind {
            fvm::BcKind::NeumannZero => 0.0,
            fvm::BcKind::DirichletFarField => 1.0,
        });
    }
    v.push(job.gmres.rel_tol);
    v.push(job.gmres.abs_tol);
    v.push(job.gmres.restart as f64);
    v.push(job.gmres.max_iters as f64);
    v.push(match job.gmres.precondition {
        Preconditioner::None => 0.0,
        Preconditioner::Jacobi => 1.0,
    });
    v
}

fn decode_setup(
    payload: &[f64],
) -> Result<([usize; 3], f64, SlabPartition, SpeciesParams, GmresConfig), EngineError> {
    let bad = |what: &str| EngineError::Protocol(format!("malformed setup payload: {what}"));
    if payload.len() < 6 {
        return Err(bad("too short"));
    }
    let box_dims = [
        payload[0] as usize,
        payload[1] as usize,
        payload[2] as usize,
    ];
    let h = payload[3];
    let p = payload[4] as usize;
    let axis = payload[5] as usize;
    if payload.len() != 6 + 2 * p + 16 + 5 || axis > 2 || p == 0 {
        return Err(bad("inconsistent sizes"));
    }
    let starts = payload[6..6 + p].iter().map(|&v| v as usize).collect();
    let counts = payload[6 + p..6 + 2 * p]
        .iter()
        .map(|&v| v as usize)
        .collect();
    let part = SlabPartition {
        axis,
        starts,
        counts,
    };
    let mut at = 6 + 2 * p;
    let mut read_tp = || {
        let tp = fvm::TransportParams {
            diffusivity: payload[at],
            decay_rate: payload[at + 1],
            far_field: payload[at + 2],
            bc_kind: if payload[at + 3] == 0.0 {
                fvm::BcKind::NeumannZero
            } else {
                fvm::BcKind::DirichletFarField
            },
        };
        at += 4;
        tp
    };
    let species = SpeciesParams {
        oxygen: read_tp(),
        nutrient: read_tp(),
        il6: read_tp(),
        il8: read_tp(),
    };
    let gmres = GmresConfig {
        rel_tol: payload[at],
        abs_tol: payload[at + 1],
        restart: payload[at + 2] as usize,
        max_iters: payload[at + 3] as usize,
        precondition: if payload[at + 4] == 0.0 {
            Preconditioner::None
        } else {
            Preconditioner::Jacobi
        },
    };
    Ok((box_dims, h, part, species, gmres))
}

/// Borrowed per-step inputs on the global box lattice (rank 0 side).
pub struct StepInputs<'a> {
    pub conc: [&'a [f64]; 4],
    pub source: [Option<&'a [f64]>; 4],
    pub uptake: [Option<&'a [f64]>; 4],
    pub dt: f64,
}

impl<'a> StepInputs<'a> {
    pub fn from_fields(fields: &'a FieldSet, coupling: &'a BoxCoupling, dt: f64) -> Self {
        let mut conc = [&[][..]; 4];
        let mut source = [None; 4];
        let mut uptake = [None; 4];
        for s in Species::ALL {
            conc[s.index()] = &fields.get(s).values[..];
            let (src, upt) = coupling.for_species(s);
            source[s.index()] = src;
            uptake[s.index()] = upt;
        }
        Self {
            conc,
            source,
            uptake,
            dt,
        }
    }
}

/// Gathered outcome of one parallel step.
pub struct StepResult {
    /// New concentrations on the global box lattice, clamped at zero.
    pub conc: [Vec<f64>; 4],
    pub stats: [SpeciesStepStats; 4],
    pub timing: StepTiming,
}

impl StepResult {
    pub fn into_field_set(self, lattice: Lattice3D) -> FieldSet {
        let [o, n, i6, i8] = self.conc;
        FieldSet {
            oxygen: crate::lattice::ScalarField::new(lattice, o),
            nutrient: crate::lattice::ScalarField::new(lattice, n),
            il6: crate::lattice::ScalarField::new(lattice, i6),
            il8: crate::lattice::ScalarField::new(lattice, i8),
        }
    }
}

/// New slab concentrations, per-species stats and the solve wall time.
type SpeciesSolves = ([Vec<f64>; 4], [SolveStats; 4], f64);

/// The timed solve region: assembly + GMRES for all four species on this
/// worker's slab, collectively with the other active workers.
fn solve_all_species<T: Transport>(
    t: &mut T,
    setup: &WorkerSetup,
    conc: &[Vec<f64>; 4],
    src: &[Vec<f64>; 4],
    upt: &[Vec<f64>; 4],
    dt: f64,
) -> Result<SpeciesSolves, EngineError> {
    let t0 = Instant::now();
    let mut results: Vec<Vec<f64>> = Vec::with_capacity(4);
    let mut stats: Vec<SolveStats> = Vec::with_capacity(4);
    for s in Species::ALL {
        let i = s.index();
        let mut comm = SlabComm::new(t, setup.slab, setup.topo, i as u32);
        let (x, st) = fvm::solve_species_slab(
            &conc[i],
            Some(&src[i]),
            Some(&upt[i]),
            setup.species.get(s),
            setup.h,
            dt,
            &setup.slab,
            Some(&setup.scale_ext),
            &setup.gmres,
            &mut comm,
        )?;
        results.push(x);
        stats.push(st);
    }
    // clamp to the clock's resolution so recorded times stay positive
    let secs = t0.elapsed().as_secs_f64().max(1e-9);
    let results: [Vec<f64>; 4] = results.try_into().expect("four species");
    let stats: [SolveStats; 4] = stats.try_into().expect("four species");
    Ok((results, stats, secs))
}

fn worker_step<T: Transport>(t: &mut T, setup: &WorkerSetup, dt: f64) -> Result<(), EngineError> {
    let mut conc: Vec<Vec<f64>> = Vec::with_capacity(4);
    let mut src: Vec<Vec<f64>> = Vec::with_capacity(4);
    let mut upt: Vec<Vec<f64>> = Vec::with_capacity(4);
    for s in 0..4 {
        conc.push(scatter_slab(
            t,
            &setup.part,
            setup.box_dims,
            conc_tag(s),
            None,
            false,
        )?);
        src.push(scatter_slab(
            t,
            &setup.part,
            setup.box_dims,
            src_tag(s),
            None,
            false,
        )?);
        upt.push(scatter_slab(
            t,
            &setup.part,
            setup.box_dims,
            upt_tag(s),
            None,
            false,
        )?);
    }
    let conc: [Vec<f64>; 4] = conc.try_into().expect("four species");
    let src: [Vec<f64>; 4] = src.try_into().expect("four species");
    let upt: [Vec<f64>; 4] = upt.try_into().expect("four species");
    finish_worker_step(t, setup, &conc, &src, &upt, dt)
}

fn finish_worker_step<T: Transport>(
    t: &mut T,
    setup: &WorkerSetup,
    conc: &[Vec<f64>; 4],
    src: &[Vec<f64>; 4],
    upt: &[Vec<f64>; 4],
    dt: f64,
) -> Result<(), EngineError> {
    let (results, _stats, secs) = solve_all_species(t, setup, conc, src, upt, dt)?;
    for s in 0..4 {
        gather_slab(t, &setup.part, setup.box_dims, result_tag(s), &results[s])?;
    }
    t.send(0, Message::new(tag::TIME, 0, vec![secs]))?;
    Ok(())
}

fn worker_step_file<T: Transport>(
    t: &mut T,
    setup: &WorkerSetup,
    dir: &Path,
    mcs: u64,
    dt: f64,
) -> Result<(), EngineError> {
    let inputs = handoff::read_inputs(dir, Some(mcs))?;
    let n = setup.box_dims[0] * setup.box_dims[1] * setup.box_dims[2];
    if inputs.conc[0].len() != n {
        return Err(EngineError::Protocol(format!(
            "handoff file holds {} voxels per block, box has {n}",
            inputs.conc[0].len()
        )));
    }
    let take = |global: &Vec<f64>| {
        crate::partition::extract_slab_values(
            global,
            setup.box_dims,
            setup.slab.axis,
            setup.slab.start,
            setup.slab.count,
        )
    };
    let conc: [Vec<f64>; 4] = std::array::from_fn(|s| take(&inputs.conc[s]));
    let src: [Vec<f64>; 4] = std::array::from_fn(|s| take(&inputs.source[s]));
    let upt: [Vec<f64>; 4] = std::array::from_fn(|s| take(&inputs.uptake[s]));
    finish_worker_step(t, setup, &conc, &src, &upt, dt)
}

/// Worker entry point; runs until `SHUTDOWN` or a failure.
///
/// The wait for the next control message is open-ended: the driver may
/// spend arbitrarily long in its sequential phase between solves. The
/// communication deadline applies inside collective operations only.
pub fn worker_loop<T: Transport>(mut t: T, ctx: WorkerContext) -> Result<(), EngineError> {
    let rank = t.rank();
    let mut setup: Option<WorkerSetup> = None;
    let mut active = false;
    loop {
        let msg = loop {
            match t.recv(0) {
                Ok(m) => break m,
                Err(CommError::Timeout(..)) => continue,
                Err(e) => return Err(e.into()),
            }
        };
        match msg.header.species {
            CTRL_SETUP => {
                let (box_dims, h, part, species, gmres) = decode_setup(&msg.payload)?;
                active = rank < part.workers();
                if active {
                    let slab = part.slab(box_dims, rank);
                    let topo = WorkerTopology {
                        rank,
                        p: part.workers(),
                    };
                    let scale_ext = scatter_slab(&mut t, &part, box_dims, tag::MASK, None, true)?;
                    setup = Some(WorkerSetup {
                        box_dims,
                        h,
                        part,
                        slab,
                        topo,
                        species,
                        gmres,
                        scale_ext,
                    });
                } else {
                    setup = None;
                }
            }
            CTRL_STEP => {
                if active {
                    let s = setup.as_ref().expect("active worker lost its setup");
                    worker_step(&mut t, s, msg.payload[0])?;
                }
            }
            CTRL_STEP_FILE => {
                if active {
                    let s = setup.as_ref().expect("active worker lost its setup");
                    let dir = ctx.handoff_dir.clone().ok_or_else(|| {
                        EngineError::Protocol("file step without a handoff dir".into())
                    })?;
                    worker_step_file(&mut t, s, &dir, msg.payload[1] as u64, msg.payload[0])?;
                }
            }
            CTRL_SHUTDOWN => return Ok(()),
            other => {
                return Err(EngineError::Protocol(format!(
                    "unexpected control tag {other}"
                )))
            }
        }
    }
}

fn rank0_setup<T: Transport>(
    t: &mut T,
    total_p: usize,
    box_dims: [usize; 3],
    job: &SolverJob,
    scale_global: &[f64],
    part: SlabPartition,
) -> Result<WorkerSetup, EngineError> {
    let payload = encode_setup(job, box_dims, &part);
    for r in 1..total_p {
        t.send(r, Message::new(CTRL_SETUP, 0, payload.clone()))?;
    }
    let slab = part.slab(box_dims, 0);
    let topo = WorkerTopology {
        rank: 0,
        p: part.workers(),
    };
    let scale_ext = scatter_slab(t, &part, box_dims, tag::MASK, Some(scale_global), true)?;
    Ok(WorkerSetup {
        box_dims,
        h: job.h,
        slab,
        topo,
        species: job.species.clone(),
        gmres: job.gmres.clone(),
        part,
        scale_ext,
    })
}

fn collect_results<T: Transport>(
    t: &mut T,
    setup: &WorkerSetup,
    results: [Vec<f64>; 4],
    stats: [SolveStats; 4],
    own_secs: f64,
) -> Result<StepResult, EngineError> {
    let mut conc_out: Vec<Vec<f64>> = Vec::with_capacity(4);
    let mut step_stats: Vec<SpeciesStepStats> = Vec::with_capacity(4);
    for (s, (local, solve)) in results.into_iter().zip(stats).enumerate() {
        let mut global = gather_slab(t, &setup.part, setup.box_dims, result_tag(s), &local)?
            .expect("rank 0 gathers the global field");
        let clamped = fvm::clamp_non_negative(&mut global);
        conc_out.push(global);
        step_stats.push(SpeciesStepStats { solve, clamped });
    }
    let mut times = vec![own_secs];
    for r in 1..setup.topo.p {
        let msg = t.recv(r)?;
        if msg.header.species != tag::TIME {
            return Err(EngineError::Protocol(format!(
                "expected worker time, got tag {}",
                msg.header.species
            )));
        }
        times.push(msg.payload[0]);
    }
    Ok(StepResult {
        conc: conc_out.try_into().expect("four species"),
        stats: step_stats.try_into().expect("four species"),
        timing: StepTiming {
            per_worker_s: times,
            domain_dims: setup.box_dims,
        },
    })
}

fn rank0_step<T: Transport>(
    t: &mut T,
    total_p: usize,
    setup: &WorkerSetup,
    zeros: &[f64],
    inputs: &StepInputs,
) -> Result<StepResult, EngineError> {
    for r in 1..total_p {
        t.send(r, Message::new(CTRL_STEP, 0, vec![inputs.dt]))?;
    }
    let dims = setup.box_dims;
    let mut conc: Vec<Vec<f64>> = Vec::with_capacity(4);
    let mut src: Vec<Vec<f64>> = Vec::with_capacity(4);
    let mut upt: Vec<Vec<f64>> = Vec::with_capacity(4);
    for s in 0..4 {
        conc.push(scatter_slab(
            t,
            &setup.part,
            dims,
            conc_tag(s),
            Some(inputs.conc[s]),
            false,
        )?);
        src.push(scatter_slab(
            t,
            &setup.part,
            dims,
            src_tag(s),
            Some(inputs.source[s].unwrap_or(zeros)),
            false,
        )?);
        upt.push(scatter_slab(
            t,
            &setup.part,
            dims,
            upt_tag(s),
            Some(inputs.uptake[s].unwrap_or(zeros)),
            false,
        )?);
    }
    let conc: [Vec<f64>; 4] = conc.try_into().expect("four species");
    let src: [Vec<f64>; 4] = src.try_into().expect("four species");
    let upt: [Vec<f64>; 4] = upt.try_into().expect("four species");
    let (results, stats, secs) = solve_all_species(t, setup, &conc, &src, &upt, inputs.dt)?;
    collect_results(t, setup, results, stats, secs)
}

fn rank0_step_file<T: Transport>(
    t: &mut T,
    total_p: usize,
    setup: &WorkerSetup,
    dir: &Path,
    mcs: u64,
    dt: f64,
) -> Result<StepResult, EngineError> {
    for r in 1..total_p {
        t.send(r, Message::new(CTRL_STEP_FILE, 0, vec![dt, mcs as f64]))?;
    }
    // rank 0 reads the shared file like every other worker
    let inputs = handoff::read_inputs(dir, Some(mcs))?;
    let take = |global: &Vec<f64>| {
        crate::partition::extract_slab_values(
            global,
            setup.box_dims,
            setup.slab.axis,
            setup.slab.start,
            setup.slab.count,
        )
    };
    let conc: [Vec<f64>; 4] = std::array::from_fn(|s| take(&inputs.conc[s]));
    let src: [Vec<f64>; 4] = std::array::from_fn(|s| take(&inputs.source[s]));
    let upt: [Vec<f64>; 4] = std::array::from_fn(|s| take(&inputs.uptake[s]));
    let (results, stats, secs) = solve_all_species(t, setup, &conc, &src, &upt, dt)?;
    let mut collected = collect_results(t, setup, results, stats, secs)?;
    // Updated concentrations return through the second shared file.
    handoff::write_outputs(
        dir,
        mcs,
        inputs.header.bbox,
        setup.h,
        setup.box_dims,
        &collected.conc,
    )?;
    let back = handoff::read_outputs(dir, Some(mcs), setup.box_dims)?;
    collected.conc = back;
    Ok(collected)
}

/// How worker ranks 1..p are hosted.
enum Backing {
    /// p == 1: rank 0 does everything.
    Solo,
    Threads(Vec<std::thread::JoinHandle<Result<(), EngineError>>>),
    Processes(Vec<std::process::Child>),
}

/// Rank-0 handle to a set of persistent solver workers.
pub struct SolverPool<T: Transport> {
    transport: T,
    total_p: usize,
    backing: Backing,
    setup: Option<WorkerSetup>,
    zeros: Vec<f64>,
    shutdown_sent: bool,
}

pub type ThreadPool = SolverPool<ChannelTransport>;
pub type ProcessPool = SolverPool<socket::SocketTransport>;

impl ThreadPool {
    /// Spawns `p - 1` worker threads; the calling thread is rank 0.
    pub fn new(p: usize, ctx: WorkerContext) -> Self {
        assert!(p >= 1);
        let mut mesh = channel_mesh(p, ctx.timeout);
        let root = mesh.remove(0);
        let handles: Vec<_> = mesh
            .into_iter()
            .map(|t| {
                let ctx = ctx.clone();
                std::thread::spawn(move || worker_loop(t, ctx))
            })
            .collect();
        let backing = if p == 1 {
            Backing::Solo
        } else {
            Backing::Threads(handles)
        };
        SolverPool {
            transport: root,
            total_p: p,
            backing,
            setup: None,
            zeros: Vec::new(),
            shutdown_sent: false,
        }
    }
}

impl ProcessPool {
    /// Spawns `p - 1` worker processes. `make_cmd(rank, coordinator_addr)`
    /// must produce a command that ends up calling [`worker_loop`] over
    /// [`socket::worker_connect`] with that rank.
    pub fn spawn<F>(p: usize, timeout: Duration, mut make_cmd: F) -> Result<Self, EngineError>
    where
        F: FnMut(usize, &str) -> std::process::Command,
    {
        assert!(p >= 1);
        let (listener, addr) = socket::coordinator_listen()?;
        let addr_str = addr.to_string();
        let mut children = Vec::with_capacity(p.saturating_sub(1));
        for rank in 1..p {
            let child = make_cmd(rank, &addr_str).spawn().map_err(CommError::Io)?;
            children.push(child);
        }
        let root = socket::coordinator_accept(&listener, p, timeout)?;
        let backing = if p == 1 {
            Backing::Solo
        } else {
            Backing::Processes(children)
        };
        Ok(SolverPool {
            transport: root,
            total_p: p,
            backing,
            setup: None,
            zeros: Vec::new(),
            shutdown_sent: false,
        })
    }
}

impl<T: Transport> SolverPool<T> {
    /// Wraps an already-connected rank-0 transport whose peers are running
    /// [`worker_loop`] elsewhere.
    pub fn from_transport(transport: T) -> Self {
        let total_p = transport.size();
        SolverPool {
            transport,
            total_p,
            backing: Backing::Solo,
            setup: None,
            zeros: Vec::new(),
            shutdown_sent: false,
        }
    }

    pub fn workers(&self) -> usize {
        self.total_p
    }

    /// Workers actually solving under the current partition.
    pub fn active_workers(&self) -> usize {
        self.setup.as_ref().map_or(0, |s| s.topo.p)
    }

    /// (Re-)partitions a bounding box across the pool. Worker counts in
    /// excess of the box's plane count idle until the next setup.
    pub fn setup(
        &mut self,
        box_dims: [usize; 3],
        job: &SolverJob,
        scale_global: &[f64],
    ) -> Result<(), EngineError> {
        let axis = longest_axis(box_dims);
        let extent = box_dims[axis];
        let active_p = if self.total_p > extent {
            log::warn!(
                "{} workers for a {extent}-plane box; {} will idle",
                self.total_p,
                self.total_p - extent
            );
            extent
        } else {
            self.total_p
        };
        let part = partition_box(box_dims, active_p).expect("active_p was capped at the extent");
        self.setup_with_partition(box_dims, job, scale_global, part)
    }

    /// Setup with an explicit (possibly unbalanced) partition.
    pub fn setup_with_partition(
        &mut self,
        box_dims: [usize; 3],
        job: &SolverJob,
        scale_global: &[f64],
        part: SlabPartition,
    ) -> Result<(), EngineError> {
        let n = box_dims[0] * box_dims[1] * box_dims[2];
        if part.workers() > self.total_p {
            return Err(EngineError::Protocol(format!(
                "partition names {} workers, pool has {}",
                part.workers(),
                self.total_p
            )));
        }
        if scale_global.len() != n {
            return Err(EngineError::Protocol(format!(
                "scale field holds {} voxels, box has {n}",
                scale_global.len()
            )));
        }
        self.zeros = vec![0.0; n];
        self.setup = Some(rank0_setup(
            &mut self.transport,
            self.total_p,
            box_dims,
            job,
            scale_global,
            part,
        )?);
        Ok(())
    }

    /// One in-process step: scatter, collective solve, gather.
    pub fn step(&mut self, inputs: &StepInputs) -> Result<StepResult, EngineError> {
        let setup = self
            .setup
            .as_ref()
            .ok_or_else(|| EngineError::Protocol("step before setup".into()))?;
        rank0_step(
            &mut self.transport,
            self.total_p,
            setup,
            &self.zeros,
            inputs,
        )
    }

    /// One shared-file step: inputs must already sit in `dir`'s handoff
    /// file tagged with `mcs`; results come back through the output file.
    pub fn step_via_file(
        &mut self,
        dir: &Path,
        mcs: u64,
        dt: f64,
    ) -> Result<StepResult, EngineError> {
        let setup = self
            .setup
            .as_ref()
            .ok_or_else(|| EngineError::Protocol("step before setup".into()))?;
        rank0_step_file(&mut self.transport, self.total_p, setup, dir, mcs, dt)
    }

    fn send_shutdown(&mut self) {
        if !self.shutdown_sent {
            for r in 1..self.total_p {
                let _ = self
                    .transport
                    .send(r, Message::new(CTRL_SHUTDOWN, 0, Vec::new()));
            }
            self.shutdown_sent = true;
        }
    }

    /// Stops the workers and reaps them.
    pub fn shutdown(mut self) -> Result<(), EngineError> {
        self.send_shutdown();
        match std::mem::replace(&mut self.backing, Backing::Solo) {
            Backing::Solo => Ok(()),
            Backing::Threads(handles) => {
                for h in handles {
                    h.join().map_err(|_| EngineError::WorkerPanic)??;
                }
                Ok(())
            }
            Backing::Processes(mut children) => {
                for c in &mut children {
                    c.wait().map_err(CommError::Io)?;
                }
                Ok(())
            }
        }
    }
}

impl<T: Transport> Drop for SolverPool<T> {
    fn drop(&mut self) {
        self.send_shutdown();
        match std::mem::replace(&mut self.backing, Backing::Solo) {
            Backing::Solo => {}
            Backing::Threads(handles) => {
                for h in handles {
                    let _ = h.join();
                }
            }
            Backing::Processes(mut children) => {
                for c in &mut children {
                    // workers exit on shutdown or when the sockets close
                    let deadline = Instant::now() + Duration::from_secs(2);
                    loop {
                        match c.try_wait() {
                            Ok(Some(_)) => break,
                            Ok(None) if Instant::now() < deadline => {
                                std::thread::sleep(Duration::from_millis(20));
                            }
                            _ => {
                                let _ = c.kill();
                                let _ = c.wait();
                                break;
                            }
                        }
                    }
                }
            }
        }
    }
}
