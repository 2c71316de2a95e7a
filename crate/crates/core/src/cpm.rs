//! Cellular Potts Model engine.
//!
//! Cells are sets of voxels sharing an id on the `sigma` lattice (0 =
//! medium), evolving by Metropolis-accepted boundary copies that minimize
//!
//! ```text
//! H = sum_<a,b> J(tau_a, tau_b) * (1 - delta_{sigma_a sigma_b})
//!   + lambda_V * sum_cells (v - V_t)^2
//! ```
//!
//! with a 6-neighbourhood for both contact energy and flip-candidate
//! selection. Tumour voxels are hard-confined to the pleural mask: a copy
//! that would place a tumour id outside the mask is rejected outright.
//!
//! All default parameter values are uncalibrated model choices, not
//! measured biology.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{BoundingBox, Lattice3D, ScalarField, VoxelMask};

#[derive(Debug, Error)]
pub enum CpmError {
    #[error("seed region holds {available} in-mask voxels, need {needed}")]
    RegionTooSmall { available: usize, needed: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    Medium,
    Tumour,
}

/// Per-cell bookkeeping; `volume` mirrors the voxel count on the lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub id: u32,
    pub kind: CellKind,
    pub volume: usize,
    pub target_volume: f64,
    pub alive: bool,
}

/// Type-pair contact energies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adhesion {
    pub tumour_tumour: f64,
    pub tumour_medium: f64,
    pub medium_medium: f64,
}

impl Adhesion {
    #[inline]
    pub fn j(&self, a: CellKind, b: CellKind) -> f64 {
        match (a, b) {
            (CellKind::Tumour, CellKind::Tumour) => self.tumour_tumour,
            (CellKind::Medium, CellKind::Medium) => self.medium_medium,
            _ => self.tumour_medium,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CPMParams {
    pub adhesion: Adhesion,
    pub lambda_volume: f64,
    pub temperature: f64,
    /// Target-volume increment per MCS while oxygenated.
    pub growth_rate: f64,
    /// Division threshold in voxels.
    pub mitosis_volume: usize,
    pub uptake_oxygen: f64,
    pub uptake_nutrient: f64,
    pub secretion_il6: f64,
    pub secretion_il8: f64,
    /// Mean oxygen below this halts target-volume growth.
    pub hypoxia_threshold: f64,
}

impl Default for CPMParams {
    fn default() -> Self {
        Self {
            adhesion: Adhesion {
                tumour_tumour: 4.0,
                tumour_medium: 8.0,
                medium_medium: 0.0,
            },
            lambda_volume: 2.0,
            temperature: 10.0,
            growth_rate: 1.0,
            mitosis_volume: 32,
            uptake_oxygen: 0.02,
            uptake_nutrient: 0.02,
            secretion_il6: 0.01,
            secretion_il8: 0.01,
            hypoxia_threshold: 0.05,
        }
    }
}

impl CPMParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.temperature <= 0.0 {
            return Err("cpm temperature must be > 0".into());
        }
        if self.mitosis_volume < 2 {
            return Err("mitosis_volume must be >= 2".into());
        }
        for (name, v) in [
            ("lambda_volume", self.lambda_volume),
            ("growth_rate", self.growth_rate),
            ("uptake_oxygen", self.uptake_oxygen),
            ("uptake_nutrient", self.uptake_nutrient),
            ("secretion_il6", self.secretion_il6),
            ("secretion_il8", self.secretion_il8),
            ("hypoxia_threshold", self.hypoxia_threshold),
        ] {
            if v < 0.0 {
                return Err(format!("cpm {name} must be >= 0"));
            }
        }
        Ok(())
    }
}

/// Voxel-to-cell-id lattice plus per-cell records and the MCS counter.
#[derive(Debug, Clone)]
pub struct CPMState {
    pub lattice: Lattice3D,
    /// Cell id per voxel, 0 = medium.
    pub sigma: Vec<u32>,
    pub cells: BTreeMap<u32, CellRecord>,
    pub mcs: u64,
    pub pleural_mask: VoxelMask,
    next_id: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlipStats {
    pub attempted: u64,
    pub accepted: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DivisionEvent {
    pub mcs: u64,
    pub parent: u32,
    pub child: u32,
}

impl CPMState {
    pub fn empty(lattice: Lattice3D, pleural_mask: VoxelMask) -> Self {
        assert_eq!(pleural_mask.lattice.dims(), lattice.dims());
        let n = lattice.len();
        Self {
            lattice,
            sigma: vec![0; n],
            cells: BTreeMap::new(),
            mcs: 0,
            pleural_mask,
            next_id: 1,
        }
    }

    /// Assigns voxel `(i, j, k)` to `id`, keeping volumes and records
    /// consistent. Used by seeding and tests.
    pub fn place_voxel(&mut self, i: usize, j: usize, k: usize, id: u32) {
        let idx = self.lattice.index(i, j, k);
        let old = self.sigma[idx];
        if old == id {
            return;
        }
        if old != 0 {
            let rec = self
                .cells
                .get_mut(&old)
                .expect("voxel holds unknown cell id");
            rec.volume -= 1;
            if rec.volume == 0 {
                rec.alive = false;
            }
        }
        if id != 0 {
            let rec = self.cells.entry(id).or_insert(CellRecord {
                id,
                kind: CellKind::Tumour,
                volume: 0,
                target_volume: 1.0,
                alive: true,
            });
            rec.volume += 1;
            rec.alive = true;
            self.next_id = self.next_id.max(id + 1);
        }
        self.sigma[idx] = id;
    }

    #[inline]
    pub fn kind_of(&self, id: u32) -> CellKind {
        if id == 0 {
            CellKind::Medium
        } else {
            self.cells
                .get(&id)
                .map(|c| c.kind)
                .unwrap_or(CellKind::Medium)
        }
    }

    pub fn tumour_voxel_count(&self) -> usize {
        self.sigma.iter().filter(|&&s| s != 0).count()
    }

    pub fn live_cells(&self) -> impl Iterator<Item = &CellRecord> {
        self.cells.values().filter(|c| c.alive && c.volume > 0)
    }

    fn fresh_id(&mut self) -> u32 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }
}

/// Voxels a seeded cell tries to claim around its anchor. Small seeds are
/// unstable under boundary-energy dynamics (detached voxels erode at any
/// temperature), so seeds grow into compact blobs where space permits.
const SEED_BLOB_VOLUME: usize = 27;

/// Places `n_cells` compact cells at distinct in-mask voxels inside
/// `seed_region`: one anchor voxel each, then each cell claims free
/// neighbouring voxels breadth-first up to [`SEED_BLOB_VOLUME`]. Initial
/// target volumes equal the placed volumes. Deterministic for a fixed
/// `rng_seed`.
pub fn initialize_cells(
    mask: &VoxelMask,
    seed_region: &BoundingBox,
    n_cells: usize,
    rng_seed: u64,
) -> Result<CPMState, CpmError> {
    assert!(n_cells >= 1);
    let lat = mask.lattice;
    let region_hi = [
        seed_region.hi[0].min(lat.nx - 1),
        seed_region.hi[1].min(lat.ny - 1),
        seed_region.hi[2].min(lat.nz - 1),
    ];
    let in_region = |i: usize, j: usize, k: usize| {
        i >= seed_region.lo[0]
            && i <= region_hi[0]
            && j >= seed_region.lo[1]
            && j <= region_hi[1]
            && k >= seed_region.lo[2]
            && k <= region_hi[2]
    };
    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    for k in seed_region.lo[2]..=region_hi[2] {
        for j in seed_region.lo[1]..=region_hi[1] {
            for i in seed_region.lo[0]..=region_hi[0] {
                if mask.get(i, j, k) {
                    candidates.push((i, j, k));
                }
            }
        }
    }
    if candidates.len() < n_cells {
        return Err(CpmError::RegionTooSmall {
            available: candidates.len(),
            needed: n_cells,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    // Fisher-Yates prefix: pick n_cells distinct anchors.
    for slot in 0..n_cells {
        let pick = rng.gen_range(slot..candidates.len());
        candidates.swap(slot, pick);
    }
    let mut state = CPMState::empty(lat, mask.clone());
    for (c, &(i, j, k)) in candidates[..n_cells].iter().enumerate() {
        state.place_voxel(i, j, k, c as u32 + 1);
    }
    // Grow each anchor into a blob over still-free in-mask region voxels.
    for c in 0..n_cells {
        let id = c as u32 + 1;
        let anchor = candidates[c];
        let mut queue = std::collections::VecDeque::from([anchor]);
        let mut volume = 1;
        while volume < SEED_BLOB_VOLUME {
            let Some((i, j, k)) = queue.pop_front() else {
                break;
            };
            for (ni, nj, nk) in lat.face_neighbours(i, j, k) {
                if volume >= SEED_BLOB_VOLUME {
                    break;
                }
                if in_region(ni, nj, nk)
                    && mask.get(ni, nj, nk)
                    && state.sigma[lat.index(ni, nj, nk)] == 0
                {
                    state.place_voxel(ni, nj, nk, id);
                    queue.push_back((ni, nj, nk));
                    volume += 1;
                }
            }
        }
    }
    for rec in state.cells.values_mut() {
        rec.target_volume = rec.volume as f64;
    }
    Ok(state)
}

/// Energy change of hypothetically copying `candidate_id` onto `voxel`.
/// Pure function; the state is not modified.
pub fn delta_hamiltonian(
    state: &CPMState,
    params: &CPMParams,
    voxel: usize,
    candidate_id: u32,
) -> f64 {
    let src = state.sigma[voxel];
    if src == candidate_id {
        return 0.0;
    }
    let src_kind = state.kind_of(src);
    let cand_kind = state.kind_of(candidate_id);
    let (i, j, k) = state.lattice.coords(voxel);

    let mut dh = 0.0;
    for (ni, nj, nk) in state.lattice.face_neighbours(i, j, k) {
        let n_id = state.sigma[state.lattice.index(ni, nj, nk)];
        let n_kind = state.kind_of(n_id);
        if src != n_id {
            dh -= params.adhesion.j(src_kind, n_kind);
        }
        if candidate_id != n_id {
            dh += params.adhesion.j(cand_kind, n_kind);
        }
    }

    let lam = params.lambda_volume;
    if src != 0 {
        let c = &state.cells[&src];
        let v = c.volume as f64;
        let t = c.target_volume;
        dh += lam * ((v - 1.0 - t).powi(2) - (v - t).powi(2));
    }
    if candidate_id != 0 {
        let c = &state.cells[&candidate_id];
        let v = c.volume as f64;
        let t = c.target_volume;
        dh += lam * ((v + 1.0 - t).powi(2) - (v - t).powi(2));
    }
    dh
}

/// Metropolis criterion: accept when `dh <= 0`, else with probability
/// `exp(-dh / t)`. Draws from `rng` only in the uphill case.
#[inline]
pub fn metropolis_accept<R: Rng>(dh: f64, temperature: f64, rng: &mut R) -> bool {
    dh <= 0.0 || rng.gen::<f64>() < (-dh / temperature).exp()
}

/// One Monte Carlo Step: `nx*ny*nz` random copy attempts.
pub fn mcs_step<R: Rng>(state: &mut CPMState, params: &CPMParams, rng: &mut R) -> FlipStats {
    let n = state.lattice.len();
    let mut stats = FlipStats::default();
    for _ in 0..n {
        stats.attempted += 1;
        let idx = rng.gen_range(0..n);
        let (i, j, k) = state.lattice.coords(idx);
        // Random one of the 6 face directions; attempts pointing outside
        // the lattice are wasted, keeping per-attempt RNG use uniform.
        let dir = rng.gen_range(0..6usize);
        let axis = dir / 2;
        let step: isize = if dir % 2 == 0 { -1 } else { 1 };
        let mut nb = [i as isize, j as isize, k as isize];
        nb[axis] += step;
        let dims = state.lattice.dims();
        if nb[axis] < 0 || nb[axis] as usize >= dims[axis] {
            continue;
        }
        let nb_idx = state
            .lattice
            .index(nb[0] as usize, nb[1] as usize, nb[2] as usize);
        let candidate = state.sigma[nb_idx];
        let src = state.sigma[idx];
        if candidate == src {
            continue;
        }
        // Hard confinement: tumour ids may not enter out-of-mask voxels.
        if candidate != 0 && !state.pleural_mask.bits[idx] {
            continue;
        }
        let dh = delta_hamiltonian(state, params, idx, candidate);
        if metropolis_accept(dh, params.temperature, rng) {
            apply_flip(state, idx, candidate);
            stats.accepted += 1;
        }
    }
    state.mcs += 1;
    stats
}

fn apply_flip(state: &mut CPMState, voxel: usize, candidate: u32) {
    let src = state.sigma[voxel];
    if src != 0 {
        let rec = state.cells.get_mut(&src).expect("flip from unknown id");
        rec.volume -= 1;
        if rec.volume == 0 {
            rec.alive = false;
        }
    }
    if candidate != 0 {
        state
            .cells
            .get_mut(&candidate)
            .expect("flip to unknown id")
            .volume += 1;
    }
    state.sigma[voxel] = candidate;
}

/// Oxygen-gated target-volume growth followed by mitosis of every cell at
/// or above the division threshold. Division splits the cell across the
/// plane through its centroid normal to the longest principal axis
/// (largest per-axis voxel variance, ties broken x then y then z).
pub fn grow_and_divide(
    state: &mut CPMState,
    params: &CPMParams,
    oxygen: &ScalarField,
) -> Vec<DivisionEvent> {
    assert_eq!(
        oxygen.lattice.dims(),
        state.lattice.dims(),
        "oxygen field must live on the CPM lattice"
    );

    // Voxel lists per live cell, one sigma scan.
    let mut voxels: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (idx, &id) in state.sigma.iter().enumerate() {
        if id != 0 {
            voxels.entry(id).or_default().push(idx);
        }
    }

    for (&id, vox) in &voxels {
        let mean_o2: f64 = vox.iter().map(|&v| oxygen.values[v]).sum::<f64>() / vox.len() as f64;
        if mean_o2 >= params.hypoxia_threshold {
            state.cells.get_mut(&id).unwrap().target_volume += params.growth_rate;
        }
    }

    let mut events = Vec::new();
    for (&id, vox) in &voxels {
        if vox.len() < params.mitosis_volume.max(2) {
            continue;
        }
        let coords: Vec<[f64; 3]> = vox
            .iter()
            .map(|&v| {
                let (i, j, k) = state.lattice.coords(v);
                [i as f64, j as f64, k as f64]
            })
            .collect();
        let n = coords.len() as f64;
        let centroid = [
            coords.iter().map(|c| c[0]).sum::<f64>() / n,
            coords.iter().map(|c| c[1]).sum::<f64>() / n,
            coords.iter().map(|c| c[2]).sum::<f64>() / n,
        ];
        let mut split_axis = 0;
        let mut best_var = -1.0;
        for axis in 0..3 {
            let var: f64 = coords
                .iter()
                .map(|c| (c[axis] - centroid[axis]).powi(2))
                .sum();
            if var > best_var {
                best_var = var;
                split_axis = axis;
            }
        }
        if best_var <= 0.0 {
            continue; // degenerate: all voxels share every coordinate
        }
        let child_voxels: Vec<usize> = vox
            .iter()
            .zip(&coords)
            .filter(|(_, c)| c[split_axis] > centroid[split_axis])
            .map(|(&v, _)| v)
            .collect();
        if child_voxels.is_empty() || child_voxels.len() == vox.len() {
            continue;
        }
        let child_id = state.fresh_id();
        let parent_tv = state.cells[&id].target_volume;
        let child_tv = (parent_tv / 2.0).round().max(1.0);
        for &v in &child_voxels {
            state.sigma[v] = child_id;
        }
        {
            let parent = state.cells.get_mut(&id).unwrap();
            parent.volume -= child_voxels.len();
            parent.target_volume = child_tv;
        }
        state.cells.insert(
            child_id,
            CellRecord {
                id: child_id,
                kind: CellKind::Tumour,
                volume: child_voxels.len(),
                target_volume: child_tv,
                alive: true,
            },
        );
        events.push(DivisionEvent {
            mcs: state.mcs,
            parent: id,
            child: child_id,
        });
    }
    events
}

/// Per-voxel PDE coupling terms: uptake and secretion rates at tumour
/// voxels, zero elsewhere.
#[derive(Debug, Clone)]
pub struct CouplingFields {
    pub uptake_oxygen: ScalarField,
    pub uptake_nutrient: ScalarField,
    pub secretion_il6: ScalarField,
    pub secretion_il8: ScalarField,
}

pub fn coupling_fields(state: &CPMState, params: &CPMParams) -> CouplingFields {
    let lat = state.lattice;
    let mut out = CouplingFields {
        uptake_oxygen: ScalarField::zeros(lat),
        uptake_nutrient: ScalarField::zeros(lat),
        secretion_il6: ScalarField::zeros(lat),
        secretion_il8: ScalarField::zeros(lat),
    };
    for (idx, &id) in state.sigma.iter().enumerate() {
        if id != 0 {
            out.uptake_oxygen.values[idx] = params.uptake_oxygen;
            out.uptake_nutrient.values[idx] = params.uptake_nutrient;
            out.secretion_il6.values[idx] = params.secretion_il6;
            out.secretion_il8.values[idx] = params.secretion_il8;
        }
    }
    out
}

/// Consistency check: stored volumes match voxel counts, every nonzero id
/// has a live record, and no tumour voxel escapes the pleural mask.
pub fn audit(state: &CPMState) -> bool {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for (idx, &id) in state.sigma.iter().enumerate() {
        if id == 0 {
            continue;
        }
        match state.cells.get(&id) {
            Some(rec) if rec.alive => {}
            _ => return false,
        }
        if !state.pleural_mask.bits[idx] {
            return false;
        }
        *counts.entry(id).or_insert(0) += 1;
    }
    for (id, rec) in &state.cells {
        if rec.volume != counts.get(id).copied().unwrap_or(0) {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn full_mask(n: usize) -> VoxelMask {
        VoxelMask::all_true(Lattice3D::cube(n, 1.0))
    }

    fn region(n: usize) -> BoundingBox {
        BoundingBox::new([0, 0, 0], [n - 1, n - 1, n - 1], 0)
    }

    /// Whole-lattice Hamiltonian recomputed from sigma alone: volumes are
    /// counted fresh, so this is independent of the incremental
    /// bookkeeping in `CPMState`.
    fn total_energy(state: &CPMState, params: &CPMParams) -> f64 {
        let lat = state.lattice;
        let mut h = 0.0;
        for k in 0..lat.nz {
            for j in 0..lat.ny {
                for i in 0..lat.nx {
                    let a = state.sigma[lat.index(i, j, k)];
                    // each unordered pair once: +x, +y, +z neighbours
                    for (ni, nj, nk) in [(i + 1, j, k), (i, j + 1, k), (i, j, k + 1)] {
                        if !lat.contains(ni, nj, nk) {
                            continue;
                        }
                        let b = state.sigma[lat.index(ni, nj, nk)];
                        if a != b {
                            h += params.adhesion.j(state.kind_of(a), state.kind_of(b));
                        }
                    }
                }
            }
        }
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &id in &state.sigma {
            if id != 0 {
                *counts.entry(id).or_insert(0) += 1;
            }
        }
        for (id, rec) in &state.cells {
            let v = counts.get(id).copied().unwrap_or(0) as f64;
            h += params.lambda_volume * (v - rec.target_volume).powi(2);
        }
        h
    }

    fn random_state(rng: &mut ChaCha8Rng, n: usize, n_ids: u32) -> CPMState {
        let mut state = CPMState::empty(Lattice3D::cube(n, 1.0), full_mask(n));
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let id = rng.gen_range(0..=n_ids);
                    if id != 0 {
                        state.place_voxel(i, j, k, id);
                    }
                }
            }
        }
        for rec in state.cells.values_mut() {
            rec.target_volume = rng.gen_range(1..20) as f64;
        }
        state
    }

    #[test]
    fn initialize_single_cell() {
        let mask = full_mask(4);
        let state = initialize_cells(&mask, &region(4), 1, 7).unwrap();
        assert_eq!(state.live_cells().count(), 1);
        assert!(state.live_cells().next().unwrap().volume >= 1);
        assert!(audit(&state));
    }

    #[test]
    fn initialize_fills_tight_region() {
        // 10 in-mask voxels, 10 cells: every voxel occupied, distinct ids.
        let lat = Lattice3D::new(10, 1, 1, 1.0);
        let mask = VoxelMask::all_true(lat);
        let reg = BoundingBox::new([0, 0, 0], [9, 0, 0], 0);
        let state = initialize_cells(&mask, &reg, 10, 3).unwrap();
        let mut ids: Vec<u32> = state.sigma.clone();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        assert!(!ids.contains(&0));
    }

    #[test]
    fn initialize_rejects_crowded_region() {
        let lat = Lattice3D::new(3, 1, 1, 1.0);
        let mask = VoxelMask::all_true(lat);
        let reg = BoundingBox::new([0, 0, 0], [2, 0, 0], 0);
        assert!(matches!(
            initialize_cells(&mask, &reg, 4, 0),
            Err(CpmError::RegionTooSmall {
                available: 3,
                needed: 4
            })
        ));
    }

    #[test]
    fn initialize_is_deterministic() {
        let mask = full_mask(6);
        let a = initialize_cells(&mask, &region(6), 5, 99).unwrap();
        let b = initialize_cells(&mask, &region(6), 5, 99).unwrap();
        assert_eq!(a.sigma, b.sigma);
    }

    #[test]
    fn own_id_copy_is_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = random_state(&mut rng, 4, 3);
        let params = CPMParams::default();
        for voxel in 0..state.lattice.len() {
            assert_eq!(
                delta_hamiltonian(&state, &params, voxel, state.sigma[voxel]),
                0.0
            );
        }
    }

    #[test]
    fn volume_term_hand_case() {
        // Isolated 1-voxel cell (v=1, V_t=1, lambda=2) overwritten by
        // medium: adhesion is unchanged-free only if J terms cancel, so
        // isolate the volume term with all-zero adhesion.
        let mut state = CPMState::empty(Lattice3D::cube(3, 1.0), full_mask(3));
        state.place_voxel(1, 1, 1, 1);
        let mut params = CPMParams::default();
        params.adhesion = Adhesion {
            tumour_tumour: 0.0,
            tumour_medium: 0.0,
            medium_medium: 0.0,
        };
        params.lambda_volume = 2.0;
        let voxel = state.lattice.index(1, 1, 1);
        assert_eq!(delta_hamiltonian(&state, &params, voxel, 0), 2.0);
    }

    #[test]
    fn checkerboard_adhesion_matches_energy_oracle() {
        // Two-id checkerboard, J(T,M)=16: flipping one voxel changes the
        // adhesion energy by 16 * (change in unlike contacts).
        let n = 4;
        let mut state = CPMState::empty(Lattice3D::cube(n, 1.0), full_mask(n));
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    if (i + j + k) % 2 == 0 {
                        state.place_voxel(i, j, k, 1);
                    }
                }
            }
        }
        let mut params = CPMParams::default();
        params.adhesion = Adhesion {
            tumour_tumour: 0.0,
            tumour_medium: 16.0,
            medium_medium: 0.0,
        };
        params.lambda_volume = 0.0;
        let voxel = state.lattice.index(1, 1, 1);
        let dh = delta_hamiltonian(&state, &params, voxel, 1);
        let before = total_energy(&state, &params);
        let mut after_state = state.clone();
        apply_flip(&mut after_state, voxel, 1);
        let after = total_energy(&after_state, &params);
        assert_abs_diff_eq!(dh, after - before, epsilon = 1e-12);
        // interior voxel flips 6 unlike contacts to like
        assert_abs_diff_eq!(dh, -6.0 * 16.0, epsilon = 1e-12);
    }

    #[test]
    fn delta_hamiltonian_matches_energy_oracle_on_random_flips() {
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let params = CPMParams::default();
        let mut checked = 0;
        while checked < 1000 {
            let n = rng.gen_range(2..=6);
            let state = random_state(&mut rng, n, 4);
            for _ in 0..20 {
                let voxel = rng.gen_range(0..state.lattice.len());
                let mut candidate = rng.gen_range(0..=4u32);
                if candidate != 0 && !state.cells.contains_key(&candidate) {
                    candidate = 0;
                }
                let dh = delta_hamiltonian(&state, &params, voxel, candidate);
                let mut flipped = state.clone();
                if flipped.sigma[voxel] != candidate {
                    apply_flip(&mut flipped, voxel, candidate);
                }
                let oracle = total_energy(&flipped, &params) - total_energy(&state, &params);
                assert_abs_diff_eq!(dh, oracle, epsilon = 1e-12);
                checked += 1;
            }
        }
    }

    #[test]
    fn metropolis_acceptance_rate_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let trials = 100_000;
        let accepted = (0..trials)
            .filter(|_| metropolis_accept(1.0, 1.0, &mut rng))
            .count();
        let rate = accepted as f64 / trials as f64;
        assert!((rate - (-1.0f64).exp()).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn near_zero_temperature_rejects_uphill_moves() {
        // A single compact cell at its target volume is an energy minimum
        // for these parameters; at T -> 0+ every accepted move must have
        // dh <= 0, so energy never rises.
        let mut state = CPMState::empty(Lattice3D::cube(5, 1.0), full_mask(5));
        for (i, j, k) in [
            (2, 2, 2),
            (3, 2, 2),
            (2, 3, 2),
            (3, 3, 2),
            (2, 2, 3),
            (3, 2, 3),
            (2, 3, 3),
            (3, 3, 3),
        ] {
            state.place_voxel(i, j, k, 1);
        }
        state.cells.get_mut(&1).unwrap().target_volume = 8.0;
        let mut params = CPMParams::default();
        params.temperature = 1e-9;
        let e0 = total_energy(&state, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            mcs_step(&mut state, &params, &mut rng);
            assert!(total_energy(&state, &params) <= e0 + 1e-9);
        }
    }

    #[test]
    fn tumour_stays_inside_mask() {
        // Mask covers only the left half; seed against the mask edge.
        let lat = Lattice3D::cube(8, 1.0);
        let bits: Vec<bool> = (0..lat.len()).map(|idx| lat.coords(idx).0 < 4).collect();
        let mask = VoxelMask::new(lat, bits);
        let mut state = CPMState::empty(lat, mask);
        state.place_voxel(3, 4, 4, 1);
        state.cells.get_mut(&1).unwrap().target_volume = 40.0;
        let params = CPMParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            mcs_step(&mut state, &params, &mut rng);
            assert!(audit(&state), "audit failed at mcs {}", state.mcs);
        }
        assert!(state.tumour_voxel_count() > 0);
    }

    #[test]
    fn mcs_step_is_deterministic() {
        let params = CPMParams::default();
        let run = || {
            let mask = full_mask(6);
            let mut state = initialize_cells(&mask, &region(6), 3, 8).unwrap();
            for c in state.cells.values_mut() {
                c.target_volume = 10.0;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            for _ in 0..30 {
                mcs_step(&mut state, &params, &mut rng);
            }
            state.sigma
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn voxel_conservation_through_dynamics() {
        let mask = full_mask(6);
        let mut state = initialize_cells(&mask, &region(6), 4, 9).unwrap();
        for c in state.cells.values_mut() {
            c.target_volume = 12.0;
        }
        let params = CPMParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let total = state.lattice.len();
        for _ in 0..50 {
            mcs_step(&mut state, &params, &mut rng);
            let cell_voxels: usize = state.cells.values().map(|c| c.volume).sum();
            let medium = state.sigma.iter().filter(|&&s| s == 0).count();
            assert_eq!(cell_voxels + medium, total);
        }
    }

    #[test]
    fn hypoxia_halts_growth() {
        let mask = full_mask(4);
        let mut state = initialize_cells(&mask, &region(4), 1, 1).unwrap();
        let params = CPMParams {
            hypoxia_threshold: 0.1,
            ..Default::default()
        };
        let o2 = ScalarField::zeros(state.lattice);
        let before = state.cells[&1].target_volume;
        let events = grow_and_divide(&mut state, &params, &o2);
        assert!(events.is_empty());
        assert_eq!(state.cells[&1].target_volume, before);
    }

    #[test]
    fn division_conserves_voxels() {
        let mut state = CPMState::empty(Lattice3D::cube(6, 1.0), full_mask(6));
        for (i, j, k) in [
            (2, 2, 2),
            (3, 2, 2),
            (2, 3, 2),
            (3, 3, 2),
            (2, 2, 3),
            (3, 2, 3),
            (2, 3, 3),
            (3, 3, 3),
        ] {
            state.place_voxel(i, j, k, 1);
        }
        state.cells.get_mut(&1).unwrap().target_volume = 8.0;
        let params = CPMParams {
            mitosis_volume: 8,
            growth_rate: 0.0,
            ..Default::default()
        };
        let o2 = ScalarField::constant(state.lattice, 1.0);
        let events = grow_and_divide(&mut state, &params, &o2);
        assert_eq!(events.len(), 1);
        let child = events[0].child;
        assert_eq!(state.cells[&1].volume + state.cells[&child].volume, 8);
        assert!(audit(&state));
    }

    #[test]
    fn rod_cell_splits_across_its_long_axis() {
        let mut state = CPMState::empty(
            Lattice3D::new(8, 3, 3, 1.0),
            VoxelMask::all_true(Lattice3D::new(8, 3, 3, 1.0)),
        );
        for i in 0..4 {
            state.place_voxel(i, 1, 1, 1);
        }
        state.cells.get_mut(&1).unwrap().target_volume = 4.0;
        let params = CPMParams {
            mitosis_volume: 4,
            growth_rate: 0.0,
            ..Default::default()
        };
        let o2 = ScalarField::constant(state.lattice, 1.0);
        let events = grow_and_divide(&mut state, &params, &o2);
        assert_eq!(events.len(), 1);
        let child = events[0].child;
        // centroid x = 1.5: parent keeps x in {0,1}, child takes {2,3}
        assert_eq!(state.cells[&1].volume, 2);
        assert_eq!(state.cells[&child].volume, 2);
        assert_eq!(state.sigma[state.lattice.index(0, 1, 1)], 1);
        assert_eq!(state.sigma[state.lattice.index(1, 1, 1)], 1);
        assert_eq!(state.sigma[state.lattice.index(2, 1, 1)], child);
        assert_eq!(state.sigma[state.lattice.index(3, 1, 1)], child);
    }

    #[test]
    fn division_halves_target_volume_rounded() {
        let mut state = CPMState::empty(
            Lattice3D::new(8, 3, 3, 1.0),
            VoxelMask::all_true(Lattice3D::new(8, 3, 3, 1.0)),
        );
        for i in 0..4 {
            state.place_voxel(i, 1, 1, 1);
        }
        state.cells.get_mut(&1).unwrap().target_volume = 7.0;
        let params = CPMParams {
            mitosis_volume: 4,
            growth_rate: 0.0,
            hypoxia_threshold: 2.0,
            ..Default::default()
        };
        let o2 = ScalarField::zeros(state.lattice);
        let events = grow_and_divide(&mut state, &params, &o2);
        assert_eq!(state.cells[&1].target_volume, 4.0);
        assert_eq!(state.cells[&events[0].child].target_volume, 4.0);
    }

    #[test]
    fn coupling_fields_zero_without_tumour() {
        let state = CPMState::empty(Lattice3D::cube(4, 1.0), full_mask(4));
        let fields = coupling_fields(&state, &CPMParams::default());
        assert_eq!(fields.uptake_oxygen.sum(), 0.0);
        assert_eq!(fields.uptake_nutrient.sum(), 0.0);
        assert_eq!(fields.secretion_il6.sum(), 0.0);
        assert_eq!(fields.secretion_il8.sum(), 0.0);
    }

    #[test]
    fn coupling_fields_counting() {
        let mut state = CPMState::empty(Lattice3D::cube(4, 1.0), full_mask(4));
        for i in 0..5 {
            state.place_voxel(i % 4, i / 4, 0, 1);
        }
        let params = CPMParams {
            uptake_oxygen: 0.2,
            ..Default::default()
        };
        let fields = coupling_fields(&state, &params);
        assert_abs_diff_eq!(fields.uptake_oxygen.sum(), 1.0, epsilon = 1e-15);
        // medium-only region stays zero
        assert_eq!(fields.uptake_oxygen.get(3, 3, 3), 0.0);
    }

    #[test]
    fn audit_detects_corruption() {
        let mask = full_mask(4);
        let mut state = initialize_cells(&mask, &region(4), 2, 5).unwrap();
        assert!(audit(&state));
        state.cells.get_mut(&1).unwrap().volume += 1;
        assert!(!audit(&state));
    }

    #[test]
    fn audit_holds_after_many_random_steps() {
        let mask = full_mask(6);
        let mut state = initialize_cells(&mask, &region(6), 3, 21).unwrap();
        for c in state.cells.values_mut() {
            c.target_volume = 15.0;
        }
        let params = CPMParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..500 {
            mcs_step(&mut state, &params, &mut rng);
        }
        assert!(audit(&state));
    }
}
