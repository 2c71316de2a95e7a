//! Synthetic pleural geometry: the region between two concentric spheres
//! stands in for the space between the parietal and visceral pleura.

use crate::lattice::{Lattice3D, VoxelMask};
use crate::sim::SimError;

/// Mask is true where `inner_radius <= |voxel - center| <= outer_radius`,
/// distances in voxel-index units.
pub fn generate_synthetic_pleura(
    lattice: Lattice3D,
    inner_radius: f64,
    outer_radius: f64,
    center: Option<[f64; 3]>,
) -> Result<VoxelMask, SimError> {
    if !(inner_radius > 0.0 && inner_radius < outer_radius) {
        return Err(SimError::DegenerateShell {
            inner: inner_radius,
            outer: outer_radius,
        });
    }
    let c = center.unwrap_or([
        (lattice.nx as f64 - 1.0) / 2.0,
        (lattice.ny as f64 - 1.0) / 2.0,
        (lattice.nz as f64 - 1.0) / 2.0,
    ]);
    let r2_lo = inner_radius * inner_radius;
    let r2_hi = outer_radius * outer_radius;
    let mut bits = Vec::with_capacity(lattice.len());
    for idx in 0..lattice.len() {
        let (i, j, k) = lattice.coords(idx);
        let r2 = (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2);
        bits.push(r2 >= r2_lo && r2 <= r2_hi);
    }
    Ok(VoxelMask::new(lattice, bits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thin_shell_around_center_of_5_cubed() {
        let lat = Lattice3D::cube(5, 1.0);
        let mask = generate_synthetic_pleura(lat, 0.5, 1.5, None).unwrap();
        // center (2,2,2) is inside the inner sphere
        assert!(!mask.get(2, 2, 2));
        for (i, j, k) in [
            (1, 2, 2),
            (3, 2, 2),
            (2, 1, 2),
            (2, 3, 2),
            (2, 2, 1),
            (2, 2, 3),
        ] {
            assert!(
                mask.get(i, j, k),
                "face neighbour ({i},{j},{k}) should be in-mask"
            );
        }
        // independent distance check over every voxel
        for idx in 0..lat.len() {
            let (i, j, k) = lat.coords(idx);
            let d =
                ((i as f64 - 2.0).powi(2) + (j as f64 - 2.0).powi(2) + (k as f64 - 2.0).powi(2))
                    .sqrt();
            assert_eq!(
                mask.bits[idx],
                (0.5..=1.5).contains(&d),
                "voxel ({i},{j},{k}) at distance {d}"
            );
        }
    }

    #[test]
    fn huge_outer_radius_covers_all_but_center() {
        let lat = Lattice3D::cube(7, 1.0);
        let mask = generate_synthetic_pleura(lat, 0.1, 100.0, None).unwrap();
        assert_eq!(mask.count(), lat.len() - 1);
        assert!(!mask.get(3, 3, 3));
    }

    #[test]
    fn centered_shell_is_symmetric_under_axis_permutation() {
        let lat = Lattice3D::cube(9, 1.0);
        let mask = generate_synthetic_pleura(lat, 2.0, 4.0, None).unwrap();
        for k in 0..9 {
            for j in 0..9 {
                for i in 0..9 {
                    let v = mask.get(i, j, k);
                    assert_eq!(v, mask.get(j, i, k));
                    assert_eq!(v, mask.get(k, j, i));
                    assert_eq!(v, mask.get(i, k, j));
                }
            }
        }
    }

    #[test]
    fn rejects_degenerate_shells() {
        let lat = Lattice3D::cube(4, 1.0);
        assert!(matches!(
            generate_synthetic_pleura(lat, 2.0, 1.0, None),
            Err(SimError::DegenerateShell { .. })
        ));
        assert!(matches!(
            generate_synthetic_pleura(lat, 0.0, 1.0, None),
            Err(SimError::DegenerateShell { .. })
        ));
    }
}
