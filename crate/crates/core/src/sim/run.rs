//! The MCS loop: CPM dynamics, bounding-box tracking, coupling fields, the
//! parallel PDE solve and snapshot emission.

use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cpm::{self, CPMState};
use crate::engine::{SolverJob, StepInputs, StepResult, ThreadPool, WorkerContext};
use crate::fvm::{BoxCoupling, FieldSet, Species};
use crate::lattice::{
    compute_bounding_box, embed_subfield, extract_subfield, should_retrack, BoundingBox, Lattice3D,
    ScalarField, VoxelMask,
};
use crate::sim::{
    handoff, pleura, snapshot, HandoffMode, MaskSource, SeedRegion, SimConfig, SimError,
};

#[derive(Debug)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub initial_tumour_voxels: usize,
    pub final_tumour_voxels: usize,
    pub mcs_completed: u64,
    /// MCS labels of the emitted snapshots, including the initial one.
    pub snapshots: Vec<u64>,
    pub solver_steps: u64,
    pub total_clamped: u64,
}

fn phase<T>(mcs: u64, name: &'static str, r: Result<T, SimError>) -> Result<T, SimError> {
    r.map_err(|e| SimError::Phase {
        mcs,
        phase: name,
        source: Box::new(e),
    })
}

pub fn load_mask(cfg: &SimConfig) -> Result<VoxelMask, SimError> {
    let lattice = Lattice3D::new(cfg.dims[0], cfg.dims[1], cfg.dims[2], cfg.h);
    match &cfg.mask {
        MaskSource::Full => Ok(VoxelMask::all_true(lattice)),
        MaskSource::Synthetic {
            inner_radius,
            outer_radius,
            center,
        } => pleura::generate_synthetic_pleura(lattice, *inner_radius, *outer_radius, *center),
        MaskSource::File { path } => {
            let mask = VoxelMask::read_vmk1_file(path, cfg.h)?;
            if mask.lattice.dims() != cfg.dims {
                return Err(SimError::Config(format!(
                    "mask file dims {:?} do not match config dims {:?}",
                    mask.lattice.dims(),
                    cfg.dims
                )));
            }
            Ok(mask)
        }
    }
}

/// Seed region from the config, or a small region around the in-mask voxel
/// closest to the domain center.
fn resolve_seed_region(cfg: &SimConfig, mask: &VoxelMask) -> Result<BoundingBox, SimError> {
    if let Some(SeedRegion { lo, hi }) = cfg.seed_region {
        return Ok(BoundingBox::new(lo, hi, 0));
    }
    let lat = mask.lattice;
    let center = [
        (lat.nx as f64 - 1.0) / 2.0,
        (lat.ny as f64 - 1.0) / 2.0,
        (lat.nz as f64 - 1.0) / 2.0,
    ];
    let mut best: Option<(f64, (usize, usize, usize))> = None;
    for idx in 0..lat.len() {
        if !mask.bits[idx] {
            continue;
        }
        let (i, j, k) = lat.coords(idx);
        let d2 = (i as f64 - center[0]).powi(2)
            + (j as f64 - center[1]).powi(2)
            + (k as f64 - center[2]).powi(2);
        if best.is_none_or(|(bd, _)| d2 < bd) {
            best = Some((d2, (i, j, k)));
        }
    }
    let (_, (i, j, k)) =
        best.ok_or_else(|| SimError::Config("mask has no in-mask voxels".into()))?;
    let r = 2usize;
    let lo = [
        i.saturating_sub(r),
        j.saturating_sub(r),
        k.saturating_sub(r),
    ];
    let hi = [
        (i + r).min(lat.nx - 1),
        (j + r).min(lat.ny - 1),
        (k + r).min(lat.nz - 1),
    ];
    Ok(BoundingBox::new(lo, hi, 0))
}

/// Diffusivity multiplier inside the box: 1 in-mask, the configured scale
/// outside.
fn scale_field_in_box(mask: &VoxelMask, bbox: &BoundingBox, outside_scale: f64) -> Vec<f64> {
    let d = bbox.dims();
    let mut out = Vec::with_capacity(d[0] * d[1] * d[2]);
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                let inside = mask.get(bbox.lo[0] + i, bbox.lo[1] + j, bbox.lo[2] + k);
                out.push(if inside { 1.0 } else { outside_scale });
            }
        }
    }
    out
}

fn mask01_in_box(mask: &VoxelMask, bbox: &BoundingBox) -> Vec<f64> {
    let d = bbox.dims();
    let mut out = Vec::with_capacity(d[0] * d[1] * d[2]);
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                out.push(f64::from(mask.get(
                    bbox.lo[0] + i,
                    bbox.lo[1] + j,
                    bbox.lo[2] + k,
                )));
            }
        }
    }
    out
}

fn extract_field_set(global: &GlobalFields, bbox: &BoundingBox) -> Result<FieldSet, SimError> {
    Ok(FieldSet {
        oxygen: extract_subfield(&global.oxygen, bbox)?,
        nutrient: extract_subfield(&global.nutrient, bbox)?,
        il6: extract_subfield(&global.il6, bbox)?,
        il8: extract_subfield(&global.il8, bbox)?,
    })
}

struct GlobalFields {
    oxygen: ScalarField,
    nutrient: ScalarField,
    il6: ScalarField,
    il8: ScalarField,
}

impl GlobalFields {
    fn embed(&mut self, fields: &FieldSet, bbox: &BoundingBox) -> Result<(), SimError> {
        embed_subfield(&mut self.oxygen, &fields.oxygen, bbox)?;
        embed_subfield(&mut self.nutrient, &fields.nutrient, bbox)?;
        embed_subfield(&mut self.il6, &fields.il6, bbox)?;
        embed_subfield(&mut self.il8, &fields.il8, bbox)?;
        Ok(())
    }
}

fn coupling_in_box(
    state: &CPMState,
    params: &cpm::CPMParams,
    bbox: &BoundingBox,
) -> Result<BoxCoupling, SimError> {
    let full = cpm::coupling_fields(state, params);
    Ok(BoxCoupling {
        uptake_oxygen: extract_subfield(&full.uptake_oxygen, bbox)?,
        uptake_nutrient: extract_subfield(&full.uptake_nutrient, bbox)?,
        secretion_il6: extract_subfield(&full.secretion_il6, bbox)?,
        secretion_il8: extract_subfield(&full.secretion_il8, bbox)?,
    })
}

/// Runs the configured simulation, writing snapshots (and, in shared-file
/// mode, the handoff files) under `out_dir`.
pub fn run_simulation(cfg: &SimConfig, out_dir: &Path) -> Result<RunArtifacts, SimError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let mask = load_mask(cfg)?;
    let seed_region = resolve_seed_region(cfg, &mask)?;
    let mut state = cpm::initialize_cells(&mask, &seed_region, cfg.n_cells, cfg.seed)?;
    let initial_tumour_voxels = state.tumour_voxel_count();

    let lattice = mask.lattice;
    let mut global = GlobalFields {
        oxygen: ScalarField::constant(lattice, cfg.species.oxygen.far_field),
        nutrient: ScalarField::constant(lattice, cfg.species.nutrient.far_field),
        il6: ScalarField::zeros(lattice),
        il8: ScalarField::zeros(lattice),
    };

    let handoff_dir = out_dir.join("handoff");
    let ctx = WorkerContext {
        handoff_dir: matches!(cfg.handoff_mode, HandoffMode::SharedFile)
            .then(|| handoff_dir.clone()),
        timeout: Duration::from_secs_f64(cfg.comm_timeout_s),
    };
    if ctx.handoff_dir.is_some() {
        std::fs::create_dir_all(&handoff_dir)?;
    }
    let job = SolverJob {
        species: cfg.species.clone(),
        gmres: cfg.gmres.clone(),
        h: cfg.h,
    };
    let mut pool = ThreadPool::new(cfg.workers, ctx);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut snapshots = Vec::new();
    let mut bbox = compute_bounding_box(&state, cfg.margin)?;
    let initial_fields = extract_field_set(&global, &bbox)?;
    snapshot::write_snapshot(out_dir, 0, &initial_fields, &state, &bbox)?;
    snapshots.push(0);
    if !cpm::audit(&state) {
        return Err(SimError::AuditFailed(0));
    }

    let mut fields_box: Option<FieldSet> = None;
    let mut solver_steps = 0u64;
    let mut total_clamped = 0u64;

    for mcs in 0..cfg.total_mcs {
        if should_retrack(mcs, cfg.retrack_interval) {
            bbox = phase(
                mcs,
                "retrack",
                compute_bounding_box(&state, cfg.margin).map_err(SimError::from),
            )?;
            fields_box = Some(phase(mcs, "retrack", extract_field_set(&global, &bbox))?);
            let scale = scale_field_in_box(&mask, &bbox, cfg.outside_mask_diffusion_scale);
            phase(
                mcs,
                "partition",
                pool.setup(bbox.dims(), &job, &scale)
                    .map_err(SimError::from),
            )?;
        }

        cpm::mcs_step(&mut state, &cfg.cpm, &mut rng);
        cpm::grow_and_divide(&mut state, &cfg.cpm, &global.oxygen);

        if mcs % cfg.pde_interval == 0 {
            let coupling = phase(mcs, "coupling", coupling_in_box(&state, &cfg.cpm, &bbox))?;
            let fields = fields_box
                .as_ref()
                .expect("retrack precedes the first solve");
            let result: StepResult = match cfg.handoff_mode {
                HandoffMode::InProcess => {
                    let inputs = StepInputs::from_fields(fields, &coupling, cfg.dt);
                    phase(mcs, "pde_step", pool.step(&inputs).map_err(SimError::from))?
                }
                HandoffMode::SharedFile => {
                    let mask01 = mask01_in_box(&mask, &bbox);
                    phase(
                        mcs,
                        "handoff_write",
                        handoff::write_inputs(&handoff_dir, mcs, bbox, fields, &coupling, &mask01)
                            .map_err(SimError::from),
                    )?;
                    phase(
                        mcs,
                        "pde_step",
                        pool.step_via_file(&handoff_dir, mcs, cfg.dt)
                            .map_err(SimError::from),
                    )?
                }
            };
            solver_steps += 1;
            total_clamped += result.stats.iter().map(|s| s.clamped as u64).sum::<u64>();
            for s in Species::ALL {
                if !result.stats[s.index()].solve.converged {
                    return Err(SimError::Phase {
                        mcs,
                        phase: "pde_step",
                        source: Box::new(SimError::Config(format!(
                            "{} solve did not converge",
                            s.name()
                        ))),
                    });
                }
            }
            let box_lat = Lattice3D::new(bbox.dims()[0], bbox.dims()[1], bbox.dims()[2], cfg.h);
            let new_fields = result.into_field_set(box_lat);
            phase(mcs, "embed", global.embed(&new_fields, &bbox))?;
            fields_box = Some(new_fields);
        }

        let label = mcs + 1;
        if label % cfg.snapshot_interval == 0 {
            let fields = extract_field_set(&global, &bbox)?;
            phase(
                mcs,
                "snapshot",
                snapshot::write_snapshot(out_dir, label, &fields, &state, &bbox).map(|_| ()),
            )?;
            snapshots.push(label);
            if !cpm::audit(&state) {
                return Err(SimError::AuditFailed(label));
            }
        }
    }

    pool.shutdown().map_err(SimError::from)?;
    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        initial_tumour_voxels,
        final_tumour_voxels: state.tumour_voxel_count(),
        mcs_completed: cfg.total_mcs,
        snapshots,
        solver_steps,
        total_clamped,
    })
}
