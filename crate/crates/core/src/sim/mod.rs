//! Simulation driver: configuration, synthetic geometry, snapshots, the
//! shared-file handoff and the MCS loop coupling the CPM to the parallel
//! PDE solve.

pub mod handoff;
pub mod pleura;
pub mod run;
pub mod snapshot;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpm::{CPMParams, CpmError};
use crate::engine::EngineError;
use crate::fvm::SpeciesParams;
use crate::krylov::GmresConfig;
use crate::lattice::LatticeError;

pub use run::{run_simulation, RunArtifacts};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config error: {0}")]
    Config(String),
    #[error("degenerate shell: inner radius {inner} must satisfy 0 < inner < outer ({outer})")]
    DegenerateShell { inner: f64, outer: f64 },
    #[error("mcs {mcs}, phase {phase}: {source}")]
    Phase {
        mcs: u64,
        phase: &'static str,
        #[source]
        source: Box<SimError>,
    },
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Cpm(#[from] CpmError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Handoff(#[from] handoff::HandoffError),
    #[error("audit failed at mcs {0}: cell records inconsistent with the lattice")]
    AuditFailed(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SimError {
    /// Process exit code: 0 success, 2 config, 3 solver, 4 io.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::Config(_) | SimError::DegenerateShell { .. } => 2,
            SimError::Phase { source, .. } => source.exit_code(),
            SimError::Io(_) | SimError::Json(_) | SimError::Handoff(_) => 4,
            SimError::Lattice(LatticeError::Io(_))
            | SimError::Lattice(LatticeError::BadMaskFile(_)) => 4,
            SimError::Engine(EngineError::Handoff(_)) => 4,
            _ => 3,
        }
    }
}

/// Where the pleural mask comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// VMK1 file.
    File { path: PathBuf },
    /// Concentric spherical shell; radii in voxel units, center defaults
    /// to the domain midpoint.
    Synthetic {
        inner_radius: f64,
        outer_radius: f64,
        center: Option<[f64; 3]>,
    },
    /// Whole domain available.
    Full,
}

/// Tumour seed placement; omitted, a small region around the in-mask voxel
/// closest to the domain center is used.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SeedRegion {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandoffMode {
    /// Direct scatter/gather between the driver and the workers.
    InProcess,
    /// Fields round-trip through shared files every step, reproducing the
    /// sequential-framework / parallel-solver split.
    SharedFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dims: [usize; 3],
    pub h: f64,
    pub mask: MaskSource,
    pub cpm: CPMParams,
    pub species: SpeciesParams,
    pub dt: f64,
    /// Bounding-box margin in voxels.
    pub margin: usize,
    /// MCS between bounding-box recomputations.
    pub retrack_interval: u64,
    pub workers: usize,
    pub gmres: GmresConfig,
    pub total_mcs: u64,
    pub snapshot_interval: u64,
    pub seed: u64,
    pub handoff_mode: HandoffMode,
    /// Diffusivity multiplier for voxels outside the pleural mask.
    pub outside_mask_diffusion_scale: f64,
    pub seed_region: Option<SeedRegion>,
    pub n_cells: usize,
    /// PDE solves run every this many MCS.
    pub pde_interval: u64,
    pub comm_timeout_s: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            h: 1.0,
            mask: MaskSource::Synthetic {
                inner_radius: 8.0,
                outer_radius: 15.0,
                center: None,
            },
            cpm: CPMParams::default(),
            species: SpeciesParams::default(),
            dt: 1.0,
            margin: 5,
            retrack_interval: 50,
            workers: 2,
            gmres: GmresConfig::default(),
            total_mcs: 200,
            snapshot_interval: 50,
            seed: 42,
            handoff_mode: HandoffMode::InProcess,
            outside_mask_diffusion_scale: 0.05,
            seed_region: None,
            n_cells: 1,
            pde_interval: 1,
            comm_timeout_s: 30.0,
        }
    }
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: SimConfig =
            serde_json::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let err = |m: String| Err(SimError::Config(m));
        if self.dims.contains(&0) {
            return err(format!("dims must be positive, got {:?}", self.dims));
        }
        if self.h <= 0.0 {
            return err(format!("h must be positive, got {}", self.h));
        }
        if self.dt <= 0.0 {
            return err(format!("dt must be positive, got {}", self.dt));
        }
        if self.workers < 1 {
            return err("workers must be >= 1".into());
        }
        if self.retrack_interval < 1 || self.pde_interval < 1 || self.snapshot_interval < 1 {
            return err("retrack_interval, pde_interval and snapshot_interval must be >= 1".into());
        }
        if self.n_cells < 1 {
            return err("n_cells must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.outside_mask_diffusion_scale) {
            return err(format!(
                "outside_mask_diffusion_scale must lie in [0, 1], got {}",
                self.outside_mask_diffusion_scale
            ));
        }
        if self.comm_timeout_s <= 0.0 {
            return err("comm_timeout_s must be positive".into());
        }
        if let Some(r) = &self.seed_region {
            for a in 0..3 {
                if r.lo[a] > r.hi[a] || r.hi[a] >= self.dims[a] {
                    return err(format!(
                        "seed_region {r:?} does not fit dims {:?}",
                        self.dims
                    ));
                }
            }
        }
        if let MaskSource::Synthetic {
            inner_radius,
            outer_radius,
            ..
        } = self.mask
        {
            if !(inner_radius > 0.0 && inner_radius < outer_radius) {
                return Err(SimError::DegenerateShell {
                    inner: inner_radius,
                    outer: outer_radius,
                });
            }
        }
        self.cpm.validate().map_err(SimError::Config)?;
        self.species.validate().map_err(SimError::Config)?;
        self.gmres.validate().map_err(SimError::Config)?;
        Ok(())
    }
}
