//! Finite-volume discretization of the transport equations on the
//! bounding-box sub-lattice.
//!
//! Each species obeys `dC/dt = D lap(C) - mu C + source - uptake`. One
//! first-order implicit Euler step assembles the 7-point-stencil system
//!
//! ```text
//! (I/dt - D L + mu I) C^{n+1} = C^n/dt + source - uptake
//! ```
//!
//! in compressed-row form. Zero-flux faces drop the missing-neighbour
//! contribution; far-field Dirichlet faces keep the diagonal term and fold
//! `D * far_field / h^2` into the right-hand side. Voxels outside the
//! pleural mask are not removed from the stencil; their diffusivity is
//! scaled down instead, which keeps the matrix structured and symmetric
//! (face diffusivities are harmonic means of the two adjacent voxels).
//!
//! Assembly is slab-aware: given a [`LocalSlab`] it produces only that
//! slab's rows, with columns referencing ghost-plane unknowns.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::krylov::{gmres_solve, GmresConfig, SolveStats, SolverComm};
use crate::lattice::{Lattice3D, ScalarField};
use crate::partition::LocalSlab;

#[derive(Debug, Error)]
pub enum FvmError {
    #[error("dt must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error(transparent)]
    Solver(#[from] crate::krylov::KrylovError),
}

/// Boundary condition applied at box faces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BcKind {
    NeumannZero,
    DirichletFarField,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransportParams {
    pub diffusivity: f64,
    pub decay_rate: f64,
    /// Dirichlet baseline outside the box; ignored for zero-flux faces.
    pub far_field: f64,
    pub bc_kind: BcKind,
}

impl Default for TransportParams {
    fn default() -> Self {
        Self {
            diffusivity: 1.0,
            decay_rate: 0.0,
            far_field: 1.0,
            bc_kind: BcKind::DirichletFarField,
        }
    }
}

impl TransportParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.diffusivity <= 0.0 {
            return Err("diffusivity must be > 0".into());
        }
        if self.decay_rate < 0.0 || self.far_field < 0.0 {
            return Err("decay_rate and far_field must be >= 0".into());
        }
        Ok(())
    }
}

/// The four transported species, in wire order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Species {
    Oxygen = 0,
    Nutrient = 1,
    Il6 = 2,
    Il8 = 3,
}

impl Species {
    pub const ALL: [Species; 4] = [
        Species::Oxygen,
        Species::Nutrient,
        Species::Il6,
        Species::Il8,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Species::Oxygen => "oxygen",
            Species::Nutrient => "nutrient",
            Species::Il6 => "il6",
            Species::Il8 => "il8",
        }
    }
}

/// Transport parameters for all four species.
///
/// The defaults are uncalibrated: oxygen and nutrient diffuse against a
/// far-field supply (vasculature outside the box), cytokines decay with
/// zero-flux walls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeciesParams {
    pub oxygen: TransportParams,
    pub nutrient: TransportParams,
    pub il6: TransportParams,
    pub il8: TransportParams,
}

impl Default for SpeciesParams {
    fn default() -> Self {
        let cytokine = TransportParams {
            diffusivity: 0.5,
            decay_rate: 0.1,
            far_field: 0.0,
            bc_kind: BcKind::NeumannZero,
        };
        Self {
            oxygen: TransportParams::default(),
            nutrient: TransportParams::default(),
            il6: cytokine,
            il8: cytokine,
        }
    }
}

impl SpeciesParams {
    pub fn get(&self, s: Species) -> &TransportParams {
        match s {
            Species::Oxygen => &self.oxygen,
            Species::Nutrient => &self.nutrient,
            Species::Il6 => &self.il6,
            Species::Il8 => &self.il8,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for s in Species::ALL {
            self.get(s)
                .validate()
                .map_err(|e| format!("{}: {e}", s.name()))?;
        }
        Ok(())
    }
}

/// Sparse 7-point-stencil system for one implicit Euler step: CSR rows for
/// the owned voxels, columns over owned + ghost unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl LinearSystem {
    /// `y = A x` without allocating; `x` spans the column space.
    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols);
        debug_assert_eq!(y.len(), self.n_rows);
        for row in 0..self.n_rows {
            let mut acc = 0.0;
            for nz in self.row_offsets[row]..self.row_offsets[row + 1] {
                acc += self.values[nz] * x[self.col_indices[nz]];
            }
            y[row] = acc;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, FvmError> {
        if x.len() != self.n_cols {
            return Err(FvmError::DimMismatch(format!(
                "operator expects {} columns, got {}",
                self.n_cols,
                x.len()
            )));
        }
        let mut y = vec![0.0; self.n_rows];
        self.apply_into(x, &mut y);
        Ok(y)
    }
}

fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

/// Assembles one implicit Euler step for one species over `slab`'s rows.
///
/// `conc`, `source` and `uptake` hold the slab's owned voxels;
/// `diff_scale`, when given, is a per-voxel diffusivity multiplier in the
/// extended layout (owned + ghost planes) so face coefficients across slab
/// boundaries see the neighbour's medium.
#[allow(clippy::too_many_arguments)]
pub fn assemble_step(
    conc: &[f64],
    source: Option<&[f64]>,
    uptake: Option<&[f64]>,
    params: &TransportParams,
    h: f64,
    dt: f64,
    slab: &LocalSlab,
    diff_scale: Option<&[f64]>,
) -> Result<LinearSystem, FvmError> {
    if dt <= 0.0 {
        return Err(FvmError::NonPositiveDt(dt));
    }
    let n = slab.n_local();
    let nc = slab.n_cols();
    if conc.len() != n {
        return Err(FvmError::DimMismatch(format!(
            "conc has {} values, slab owns {n}",
            conc.len()
        )));
    }
    for (name, f) in [("source", source), ("uptake", uptake)] {
        if let Some(f) = f {
            if f.len() != n {
                return Err(FvmError::DimMismatch(format!(
                    "{name} has {} values, slab owns {n}",
                    f.len()
                )));
            }
        }
    }
    if let Some(sc) = diff_scale {
        if sc.len() != nc {
            return Err(FvmError::DimMismatch(format!(
                "diff_scale has {} values, extended layout holds {nc}",
                sc.len()
            )));
        }
    }

    let inv_h2 = 1.0 / (h * h);
    let scale_at = |col: usize| diff_scale.map_or(1.0, |sc| sc[col]);
    let ld = slab.local_dims();
    let bd = slab.box_dims;

    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut col_indices = Vec::with_capacity(7 * n);
    let mut values = Vec::with_capacity(7 * n);
    let mut rhs = vec![0.0; n];
    row_offsets.push(0);

    for lk in 0..ld[2] {
        for lj in 0..ld[1] {
            for li in 0..ld[0] {
                let local = [li, lj, lk];
                let row = slab.local_index(local);
                let mut coords = local;
                coords[slab.axis] += slab.start;

                let d_here = params.diffusivity * scale_at(row);
                let mut diag = 1.0 / dt + params.decay_rate;
                rhs[row] = conc[row] / dt + source.map_or(0.0, |s| s[row])
                    - uptake.map_or(0.0, |u| u[row]);

                let diag_slot = values.len();
                col_indices.push(row);
                values.push(0.0);

                for axis in 0..3 {
                    for dir in [-1isize, 1] {
                        let c = coords[axis] as isize + dir;
                        if c < 0 || c as usize >= bd[axis] {
                            // box face
                            match params.bc_kind {
                                BcKind::NeumannZero => {}
                                BcKind::DirichletFarField => {
                                    diag += d_here * inv_h2;
                                    rhs[row] += d_here * params.far_field * inv_h2;
                                }
                            }
                            continue;
                        }
                        let mut nb = coords;
                        nb[axis] = c as usize;
                        let col = slab
                            .column_of(nb)
                            .expect("in-box neighbour must be owned or ghost");
                        let d_face = harmonic_mean(d_here, params.diffusivity * scale_at(col));
                        diag += d_face * inv_h2;
                        col_indices.push(col);
                        values.push(-d_face * inv_h2);
                    }
                }
                values[diag_slot] = diag;
                row_offsets.push(values.len());
            }
        }
    }

    Ok(LinearSystem {
        n_rows: n,
        n_cols: nc,
        row_offsets,
        col_indices,
        values,
        rhs,
    })
}

/// Assembles and solves one species on one slab. `conc` doubles as the
/// initial guess. Returns the owned part of the new concentration,
/// unclamped.
#[allow(clippy::too_many_arguments)]
pub fn solve_species_slab<C: SolverComm>(
    conc: &[f64],
    source: Option<&[f64]>,
    uptake: Option<&[f64]>,
    params: &TransportParams,
    h: f64,
    dt: f64,
    slab: &LocalSlab,
    diff_scale: Option<&[f64]>,
    gmres: &GmresConfig,
    comm: &mut C,
) -> Result<(Vec<f64>, SolveStats), FvmError> {
    let sys = assemble_step(conc, source, uptake, params, h, dt, slab, diff_scale)?;
    let (x, stats) = gmres_solve(&sys, conc, gmres, comm)?;
    Ok((x, stats))
}

/// The four concentration fields on one bounding-box sub-lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSet {
    pub oxygen: ScalarField,
    pub nutrient: ScalarField,
    pub il6: ScalarField,
    pub il8: ScalarField,
}

impl FieldSet {
    pub fn uniform(lattice: Lattice3D, oxygen: f64, nutrient: f64) -> Self {
        Self {
            oxygen: ScalarField::constant(lattice, oxygen),
            nutrient: ScalarField::constant(lattice, nutrient),
            il6: ScalarField::zeros(lattice),
            il8: ScalarField::zeros(lattice),
        }
    }

    pub fn lattice(&self) -> Lattice3D {
        self.oxygen.lattice
    }

    pub fn get(&self, s: Species) -> &ScalarField {
        match s {
            Species::Oxygen => &self.oxygen,
            Species::Nutrient => &self.nutrient,
            Species::Il6 => &self.il6,
            Species::Il8 => &self.il8,
        }
    }

    pub fn get_mut(&mut self, s: Species) -> &mut ScalarField {
        match s {
            Species::Oxygen => &mut self.oxygen,
            Species::Nutrient => &mut self.nutrient,
            Species::Il6 => &mut self.il6,
            Species::Il8 => &mut self.il8,
        }
    }
}

/// Per-voxel source and uptake rates on the box sub-lattice, species by
/// species: tumour oxygen/nutrient consumption and cytokine secretion.
#[derive(Debug, Clone)]
pub struct BoxCoupling {
    pub uptake_oxygen: ScalarField,
    pub uptake_nutrient: ScalarField,
    pub secretion_il6: ScalarField,
    pub secretion_il8: ScalarField,
}

impl BoxCoupling {
    pub fn zeros(lattice: Lattice3D) -> Self {
        Self {
            uptake_oxygen: ScalarField::zeros(lattice),
            uptake_nutrient: ScalarField::zeros(lattice),
            secretion_il6: ScalarField::zeros(lattice),
            secretion_il8: ScalarField::zeros(lattice),
        }
    }

    /// (source, uptake) pair feeding one species' right-hand side.
    pub fn for_species(&self, s: Species) -> (Option<&[f64]>, Option<&[f64]>) {
        match s {
            Species::Oxygen => (None, Some(&self.uptake_oxygen.values)),
            Species::Nutrient => (None, Some(&self.uptake_nutrient.values)),
            Species::Il6 => (Some(&self.secretion_il6.values), None),
            Species::Il8 => (Some(&self.secretion_il8.values), None),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesStepStats {
    pub solve: SolveStats,
    /// Voxels clamped to zero after the solve.
    pub clamped: usize,
}

/// Serial whole-box step: all four species assembled and solved
/// independently, results clamped at zero from below.
pub fn step_species(
    fields: &FieldSet,
    species: &SpeciesParams,
    coupling: &BoxCoupling,
    dt: f64,
    gmres: &GmresConfig,
    diff_scale: Option<&[f64]>,
) -> Result<(FieldSet, [SpeciesStepStats; 4]), FvmError> {
    let lat = fields.lattice();
    let slab = LocalSlab::whole(lat.dims());
    let mut out = fields.clone();
    let mut stats = Vec::with_capacity(4);
    for s in Species::ALL {
        let (source, uptake) = coupling.for_species(s);
        let (mut x, solve) = solve_species_slab(
            &fields.get(s).values,
            source,
            uptake,
            species.get(s),
            lat.h,
            dt,
            &slab,
            diff_scale,
            gmres,
            &mut crate::krylov::SerialComm,
        )?;
        let clamped = clamp_non_negative(&mut x);
        out.get_mut(s).values = x;
        stats.push(SpeciesStepStats { solve, clamped });
    }
    let stats: [SpeciesStepStats; 4] = stats.try_into().expect("four species");
    Ok((out, stats))
}

/// Zeroes negative entries, returning how many were clamped.
pub fn clamp_non_negative(values: &mut [f64]) -> usize {
    let mut clamped = 0;
    for v in values.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
            clamped += 1;
        }
    }
    clamped
}
