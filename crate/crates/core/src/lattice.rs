//! Structured 3D lattice, voxel masks, scalar fields and bounding-box
//! tracking.
//!
//! Voxels are addressed by `(i, j, k)` with `i` the fastest-varying index:
//! `linear = i + nx * (j + ny * k)`. Every file format and the slab
//! partitioner rely on this ordering.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpm::CPMState;

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("state contains no tumour voxels")]
    NoTumourCells,
    #[error("bounding box {0:?}..{1:?} exceeds lattice dims {2:?}")]
    BoxOutOfBounds([usize; 3], [usize; 3], [usize; 3]),
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimMismatch {
        expected: [usize; 3],
        got: [usize; 3],
    },
    #[error("{0}")]
    BadMaskFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Uniform structured 3D lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lattice3D {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Voxel edge length.
    pub h: f64,
}

impl Lattice3D {
    pub fn new(nx: usize, ny: usize, nz: usize, h: f64) -> Self {
        assert!(nx >= 1 && ny >= 1 && nz >= 1, "lattice dims must be >= 1");
        assert!(h > 0.0, "voxel edge length must be positive");
        Self { nx, ny, nz, h }
    }

    pub fn cube(n: usize, h: f64) -> Self {
        Self::new(n, n, n, h)
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Linear index of voxel `(i, j, k)`, x-fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny && k < self.nz);
        i + self.nx * (j + self.ny * k)
    }

    /// Inverse of [`Lattice3D::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        debug_assert!(idx < self.len());
        let i = idx % self.nx;
        let j = (idx / self.nx) % self.ny;
        let k = idx / (self.nx * self.ny);
        (i, j, k)
    }

    pub fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        i < self.nx && j < self.ny && k < self.nz
    }

    /// The six face neighbours of `(i, j, k)` that lie inside the lattice.
    pub fn face_neighbours(
        &self,
        i: usize,
        j: usize,
        k: usize,
    ) -> impl Iterator<Item = (usize, usize, usize)> {
        let dims = [self.nx, self.ny, self.nz];
        let base = [i, j, k];
        (0..3).flat_map(move |axis| {
            [-1isize, 1].into_iter().filter_map(move |dir| {
                let c = base[axis] as isize + dir;
                if c < 0 || c as usize >= dims[axis] {
                    return None;
                }
                let mut nb = base;
                nb[axis] = c as usize;
                Some((nb[0], nb[1], nb[2]))
            })
        })
    }
}

/// Boolean voxel mask (true = inside the pleural space).
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMask {
    pub lattice: Lattice3D,
    pub bits: Vec<bool>,
}

impl VoxelMask {
    pub fn new(lattice: Lattice3D, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), lattice.len(), "mask length must match lattice");
        Self { lattice, bits }
    }

    pub fn all_true(lattice: Lattice3D) -> Self {
        let n = lattice.len();
        Self {
            lattice,
            bits: vec![true; n],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.bits[self.lattice.index(i, j, k)]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Writes the mask in VMK1 format: a text header `VMK1 <nx> <ny> <nz>\n`
    /// followed by one byte per voxel (0 or 1), x-fastest.
    pub fn write_vmk1<W: Write>(&self, mut w: W) -> Result<(), LatticeError> {
        writeln!(
            w,
            "VMK1 {} {} {}",
            self.lattice.nx, self.lattice.ny, self.lattice.nz
        )?;
        let bytes: Vec<u8> = self.bits.iter().map(|&b| b as u8).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_vmk1<R: Read>(r: R, h: f64) -> Result<Self, LatticeError> {
        let mut reader = BufReader::new(r);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "VMK1" {
            return Err(LatticeError::BadMaskFile(format!(
                "bad VMK1 header: {header:?}"
            )));
        }
        let dims: Vec<usize> = parts[1..]
            .iter()
            .map(|s| s.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| LatticeError::BadMaskFile(format!("bad VMK1 dims: {e}")))?;
        if dims.contains(&0) {
            return Err(LatticeError::BadMaskFile(
                "VMK1 dims must be positive".into(),
            ));
        }
        let lattice = Lattice3D::new(dims[0], dims[1], dims[2], h);
        let mut bytes = vec![0u8; lattice.len()];
        reader.read_exact(&mut bytes)?;
        let mut bits = Vec::with_capacity(bytes.len());
        for (pos, b) in bytes.iter().enumerate() {
            match b {
                0 => bits.push(false),
                1 => bits.push(true),
                other => {
                    return Err(LatticeError::BadMaskFile(format!(
                        "voxel byte at offset {pos} is {other}, expected 0 or 1"
                    )))
                }
            }
        }
        Ok(Self { lattice, bits })
    }

    pub fn write_vmk1_file<P: AsRef<Path>>(&self, path: P) -> Result<(), LatticeError> {
        let f = std::fs::File::create(path)?;
        self.write_vmk1(std::io::BufWriter::new(f))
    }

    pub fn read_vmk1_file<P: AsRef<Path>>(path: P, h: f64) -> Result<Self, LatticeError> {
        let f = std::fs::File::open(path)?;
        Self::read_vmk1(f, h)
    }
}

/// One non-negative concentration value per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub lattice: Lattice3D,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(lattice: Lattice3D, values: Vec<f64>) -> Self {
        assert_eq!(
            values.len(),
            lattice.len(),
            "field length must match lattice"
        );
        Self { lattice, values }
    }

    pub fn constant(lattice: Lattice3D, value: f64) -> Self {
        let n = lattice.len();
        Self {
            lattice,
            values: vec![value; n],
        }
    }

    pub fn zeros(lattice: Lattice3D) -> Self {
        Self::constant(lattice, 0.0)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.lattice.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.lattice.index(i, j, k);
        self.values[idx] = v;
    }

    /// Total of all voxel values (mass up to the constant factor h^3).
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Inclusive voxel-index extents of the tracked region of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub margin: usize,
}

impl BoundingBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3], margin: usize) -> Self {
        assert!(
            lo[0] <= hi[0] && lo[1] <= hi[1] && lo[2] <= hi[2],
            "box lo must not exceed hi"
        );
        Self { lo, hi, margin }
    }

    /// Extent (inclusive) along each axis.
    pub fn dims(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0] + 1,
            self.hi[1] - self.lo[1] + 1,
            self.hi[2] - self.lo[2] + 1,
        ]
    }

    pub fn len(&self) -> usize {
        let d = self.dims();
        d[0] * d[1] * d[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        let c = [i, j, k];
        (0..3).all(|a| self.lo[a] <= c[a] && c[a] <= self.hi[a])
    }

    /// Whole-domain box with zero margin.
    pub fn full(lattice: &Lattice3D) -> Self {
        Self {
            lo: [0, 0, 0],
            hi: [lattice.nx - 1, lattice.ny - 1, lattice.nz - 1],
            margin: 0,
        }
    }

    fn fits(&self, lattice: &Lattice3D) -> bool {
        self.hi[0] < lattice.nx && self.hi[1] < lattice.ny && self.hi[2] < lattice.nz
    }
}

/// Componentwise min/max over all tumour voxels, expanded by `margin` on
/// every face and clipped to the lattice extents.
pub fn compute_bounding_box(state: &CPMState, margin: usize) -> Result<BoundingBox, LatticeError> {
    let lat = state.lattice;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut found = false;
    for (idx, &id) in state.sigma.iter().enumerate() {
        if id == 0 {
            continue;
        }
        found = true;
        let (i, j, k) = lat.coords(idx);
        let c = [i, j, k];
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    if !found {
        return Err(LatticeError::NoTumourCells);
    }
    let dims = lat.dims();
    for a in 0..3 {
        lo[a] = lo[a].saturating_sub(margin);
        hi[a] = (hi[a] + margin).min(dims[a] - 1);
    }
    Ok(BoundingBox { lo, hi, margin })
}

/// True iff the bounding box should be recomputed at this MCS.
pub fn should_retrack(mcs: u64, interval: u64) -> bool {
    assert!(interval >= 1, "retrack interval must be >= 1");
    mcs % interval == 0
}

/// Copies the voxels inside `bbox` out of `field` into a field on the
/// box-sized sub-lattice. Voxel `(a, b, c)` of the result equals source
/// voxel `lo + (a, b, c)`.
pub fn extract_subfield(
    field: &ScalarField,
    bbox: &BoundingBox,
) -> Result<ScalarField, LatticeError> {
    if !bbox.fits(&field.lattice) {
        return Err(LatticeError::BoxOutOfBounds(
            bbox.lo,
            bbox.hi,
            field.lattice.dims(),
        ));
    }
    let d = bbox.dims();
    let sub_lat = Lattice3D::new(d[0], d[1], d[2], field.lattice.h);
    let mut values = Vec::with_capacity(sub_lat.len());
    for k in 0..d[2] {
        for j in 0..d[1] {
            let src_row = field
                .lattice
                .index(bbox.lo[0], bbox.lo[1] + j, bbox.lo[2] + k);
            values.extend_from_slice(&field.values[src_row..src_row + d[0]]);
        }
    }
    Ok(ScalarField::new(sub_lat, values))
}

/// Overwrites the voxels of `target` inside `bbox` with `sub`; everything
/// outside the box is left untouched.
pub fn embed_subfield(
    target: &mut ScalarField,
    sub: &ScalarField,
    bbox: &BoundingBox,
) -> Result<(), LatticeError> {
    let d = bbox.dims();
    if sub.lattice.dims() != d {
        return Err(LatticeError::DimMismatch {
            expected: d,
            got: sub.lattice.dims(),
        });
    }
    if !bbox.fits(&target.lattice) {
        return Err(LatticeError::BoxOutOfBounds(
            bbox.lo,
            bbox.hi,
            target.lattice.dims(),
        ));
    }
    for k in 0..d[2] {
        for j in 0..d[1] {
            let dst_row = target
                .lattice
                .index(bbox.lo[0], bbox.lo[1] + j, bbox.lo[2] + k);
            let src_row = sub.lattice.index(0, j, k);
            target.values[dst_row..dst_row + d[0]]
                .copy_from_slice(&sub.values[src_row..src_row + d[0]]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpm;
    use proptest::prelude::*;

    fn state_with_tumour_voxels(n: usize, voxels: &[(usize, usize, usize)]) -> CPMState {
        let lat = Lattice3D::cube(n, 1.0);
        let mask = VoxelMask::all_true(lat);
        let mut state = cpm::CPMState::empty(lat, mask);
        for (c, &(i, j, k)) in voxels.iter().enumerate() {
            state.place_voxel(i, j, k, c as u32 + 1);
        }
        state
    }

    // Independent of compute_bounding_box: triple-loop scan per axis.
    fn brute_force_box(state: &CPMState, margin: usize) -> Option<BoundingBox> {
        let lat = state.lattice;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for k in 0..lat.nz {
            for j in 0..lat.ny {
                for i in 0..lat.nx {
                    if state.sigma[lat.index(i, j, k)] != 0 {
                        any = true;
                        lo[0] = lo[0].min(i);
                        lo[1] = lo[1].min(j);
                        lo[2] = lo[2].min(k);
                        hi[0] = hi[0].max(i);
                        hi[1] = hi[1].max(j);
                        hi[2] = hi[2].max(k);
                    }
                }
            }
        }
        if !any {
            return None;
        }
        let dims = lat.dims();
        for a in 0..3 {
            lo[a] = lo[a].saturating_sub(margin);
            hi[a] = (hi[a] + margin).min(dims[a] - 1);
        }
        Some(BoundingBox { lo, hi, margin })
    }

    #[test]
    fn bounding_box_two_voxels_with_margin() {
        let state = state_with_tumour_voxels(20, &[(3, 4, 5), (7, 4, 9)]);
        let b = compute_bounding_box(&state, 2).unwrap();
        assert_eq!(b.lo, [1, 2, 3]);
        assert_eq!(b.hi, [9, 6, 11]);
    }

    #[test]
    fn bounding_box_clips_at_domain_boundary() {
        let state = state_with_tumour_voxels(10, &[(0, 0, 0)]);
        let b = compute_bounding_box(&state, 3).unwrap();
        assert_eq!(b.lo, [0, 0, 0]);
        assert_eq!(b.hi, [3, 3, 3]);
    }

    #[test]
    fn bounding_box_full_domain_identity() {
        let lat = Lattice3D::cube(5, 1.0);
        let mask = VoxelMask::all_true(lat);
        let mut state = cpm::CPMState::empty(lat, mask);
        for idx in 0..lat.len() {
            let (i, j, k) = lat.coords(idx);
            state.place_voxel(i, j, k, 1);
        }
        let b = compute_bounding_box(&state, 0).unwrap();
        assert_eq!(b.lo, [0, 0, 0]);
        assert_eq!(b.hi, [4, 4, 4]);
    }

    #[test]
    fn bounding_box_requires_tumour() {
        let lat = Lattice3D::cube(4, 1.0);
        let state = cpm::CPMState::empty(lat, VoxelMask::all_true(lat));
        assert!(matches!(
            compute_bounding_box(&state, 0),
            Err(LatticeError::NoTumourCells)
        ));
    }

    #[test]
    fn bounding_box_matches_brute_force_on_random_states() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let n = rng.gen_range(2..=16);
            let margin = rng.gen_range(0..4);
            let count = rng.gen_range(1..=8);
            let voxels: Vec<_> = (0..count)
                .map(|_| {
                    (
                        rng.gen_range(0..n),
                        rng.gen_range(0..n),
                        rng.gen_range(0..n),
                    )
                })
                .collect();
            let state = state_with_tumour_voxels(n, &voxels);
            let got = compute_bounding_box(&state, margin).unwrap();
            let want = brute_force_box(&state, margin).unwrap();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn growing_tumour_never_shrinks_box() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(4..=16);
            let voxels: Vec<_> = (0..rng.gen_range(1..=5))
                .map(|_| {
                    (
                        rng.gen_range(0..n),
                        rng.gen_range(0..n),
                        rng.gen_range(0..n),
                    )
                })
                .collect();
            let mut state = state_with_tumour_voxels(n, &voxels);
            let before = compute_bounding_box(&state, 2).unwrap();
            for _ in 0..rng.gen_range(1..=4) {
                state.place_voxel(
                    rng.gen_range(0..n),
                    rng.gen_range(0..n),
                    rng.gen_range(0..n),
                    99,
                );
            }
            let after = compute_bounding_box(&state, 2).unwrap();
            for a in 0..3 {
                assert!(after.lo[a] <= before.lo[a]);
                assert!(after.hi[a] >= before.hi[a]);
            }
        }
    }

    #[test]
    fn retrack_schedule() {
        assert!(should_retrack(50, 50));
        assert!(!should_retrack(49, 50));
        assert!(should_retrack(0, 50));
    }

    #[test]
    fn extract_constant_subfield() {
        let lat = Lattice3D::cube(6, 1.0);
        let f = ScalarField::constant(lat, 2.5);
        let b = BoundingBox::new([1, 2, 0], [4, 5, 3], 0);
        let sub = extract_subfield(&f, &b).unwrap();
        assert_eq!(sub.lattice.dims(), [4, 4, 4]);
        assert!(sub.values.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn extract_linear_ramp() {
        let lat = Lattice3D::cube(10, 1.0);
        let mut f = ScalarField::zeros(lat);
        for idx in 0..lat.len() {
            let (i, _, _) = lat.coords(idx);
            f.values[idx] = i as f64;
        }
        let b = BoundingBox::new([2, 0, 0], [4, 0, 0], 0);
        let sub = extract_subfield(&f, &b).unwrap();
        assert_eq!(sub.values, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn extract_full_domain_is_identity() {
        let lat = Lattice3D::new(3, 4, 5, 1.0);
        let f = ScalarField::new(lat, (0..lat.len()).map(|i| i as f64).collect());
        let sub = extract_subfield(&f, &BoundingBox::full(&lat)).unwrap();
        assert_eq!(sub.values, f.values);
    }

    #[test]
    fn extract_out_of_bounds_box() {
        let lat = Lattice3D::cube(4, 1.0);
        let f = ScalarField::zeros(lat);
        let b = BoundingBox::new([0, 0, 0], [4, 3, 3], 0);
        assert!(matches!(
            extract_subfield(&f, &b),
            Err(LatticeError::BoxOutOfBounds(..))
        ));
    }

    #[test]
    fn embed_counts_overwritten_voxels() {
        let lat = Lattice3D::cube(5, 1.0);
        let mut target = ScalarField::zeros(lat);
        let b = BoundingBox::new([1, 1, 1], [2, 2, 2], 0);
        let sub = ScalarField::constant(Lattice3D::cube(2, 1.0), 1.0);
        embed_subfield(&mut target, &sub, &b).unwrap();
        assert_eq!(target.values.iter().filter(|&&v| v == 1.0).count(), 8);
        assert_eq!(target.sum(), 8.0);
    }

    #[test]
    fn embed_dim_mismatch() {
        let lat = Lattice3D::cube(5, 1.0);
        let mut target = ScalarField::zeros(lat);
        let b = BoundingBox::new([1, 1, 1], [2, 2, 2], 0);
        let sub = ScalarField::zeros(Lattice3D::cube(3, 1.0));
        assert!(matches!(
            embed_subfield(&mut target, &sub, &b),
            Err(LatticeError::DimMismatch { .. })
        ));
    }

    #[test]
    fn vmk1_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let lat = Lattice3D::new(7, 5, 3, 1.0);
        let bits: Vec<bool> = (0..lat.len()).map(|_| rng.gen_bool(0.4)).collect();
        let mask = VoxelMask::new(lat, bits);
        let mut buf = Vec::new();
        mask.write_vmk1(&mut buf).unwrap();
        assert!(buf.starts_with(b"VMK1 7 5 3\n"));
        let back = VoxelMask::read_vmk1(&buf[..], 1.0).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn vmk1_rejects_garbage() {
        assert!(VoxelMask::read_vmk1(&b"VMK2 1 1 1\nx"[..], 1.0).is_err());
        assert!(VoxelMask::read_vmk1(&b"VMK1 2 1 1\n\x05\x00"[..], 1.0).is_err());
        assert!(VoxelMask::read_vmk1(&b"VMK1 2 1 1\n\x01"[..], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn linear_index_is_bijective(nx in 1usize..8, ny in 1usize..8, nz in 1usize..8) {
            let lat = Lattice3D::new(nx, ny, nz, 1.0);
            let mut seen = vec![false; lat.len()];
            for k in 0..nz {
                for j in 0..ny {
                    for i in 0..nx {
                        let idx = lat.index(i, j, k);
                        prop_assert!(!seen[idx]);
                        seen[idx] = true;
                        prop_assert_eq!(lat.coords(idx), (i, j, k));
                    }
                }
            }
            prop_assert!(seen.into_iter().all(|s| s));
        }

        #[test]
        fn extract_embed_round_trip(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let lat = Lattice3D::new(
                rng.gen_range(2..7),
                rng.gen_range(2..7),
                rng.gen_range(2..7),
                1.0,
            );
            let f = ScalarField::new(lat, (0..lat.len()).map(|_| rng.gen::<f64>()).collect());
            let lo = [
                rng.gen_range(0..lat.nx),
                rng.gen_range(0..lat.ny),
                rng.gen_range(0..lat.nz),
            ];
            let hi = [
                rng.gen_range(lo[0]..lat.nx),
                rng.gen_range(lo[1]..lat.ny),
                rng.gen_range(lo[2]..lat.nz),
            ];
            let b = BoundingBox::new(lo, hi, 0);
            let sub = extract_subfield(&f, &b).unwrap();
            let mut copy = f.clone();
            embed_subfield(&mut copy, &sub, &b).unwrap();
            prop_assert_eq!(copy.values, f.values);
        }
    }
}
