//! Snapshot artifacts: normalized mid-box concentration slices, the cell
//! census and the box extents. Filenames embed the MCS.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::cpm::{CPMState, CellKind};
use crate::fvm::{FieldSet, Species};
use crate::lattice::{BoundingBox, ScalarField};
use crate::sim::SimError;

pub const CENSUS_HEADER: &str = "mcs,cell_id,kind,volume,target_volume";

/// The mid-box z slice of a field, values normalized to the slice maximum
/// (an all-zero slice stays zero). Row j holds columns i = 0..nx.
pub fn normalized_mid_slice(field: &ScalarField) -> Vec<Vec<f64>> {
    let lat = field.lattice;
    let k_mid = (lat.nz - 1) / 2;
    let mut max = 0.0f64;
    for j in 0..lat.ny {
        for i in 0..lat.nx {
            max = max.max(field.get(i, j, k_mid));
        }
    }
    let mut rows = Vec::with_capacity(lat.ny);
    for j in 0..lat.ny {
        let mut row = Vec::with_capacity(lat.nx);
        for i in 0..lat.nx {
            let v = field.get(i, j, k_mid);
            row.push(if max > 0.0 { v / max } else { 0.0 });
        }
        rows.push(row);
    }
    rows
}

fn write_slice_csv(path: &Path, field: &ScalarField) -> Result<(), SimError> {
    let rows = normalized_mid_slice(field);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

fn write_census_csv(path: &Path, state: &CPMState) -> Result<(), SimError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{CENSUS_HEADER}")?;
    for cell in state.live_cells() {
        let kind = match cell.kind {
            CellKind::Tumour => "Tumour",
            CellKind::Medium => "Medium",
        };
        writeln!(
            w,
            "{},{},{},{},{}",
            state.mcs, cell.id, kind, cell.volume, cell.target_volume
        )?;
    }
    Ok(())
}

/// Writes the per-species slice CSVs, the cell census CSV and the box
/// extents JSON; returns the created paths.
pub fn write_snapshot(
    dir: &Path,
    mcs: u64,
    fields: &FieldSet,
    state: &CPMState,
    bbox: &BoundingBox,
) -> Result<Vec<PathBuf>, SimError> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for s in Species::ALL {
        let path = dir.join(format!("slice_{}_mcs{}.csv", s.name(), mcs));
        write_slice_csv(&path, fields.get(s))?;
        paths.push(path);
    }
    let census = dir.join(format!("census_mcs{}.csv", mcs));
    write_census_csv(&census, state)?;
    paths.push(census);

    let box_path = dir.join(format!("box_mcs{}.json", mcs));
    let json = serde_json::json!({
        "mcs": mcs,
        "lo": bbox.lo,
        "hi": bbox.hi,
        "margin": bbox.margin,
    });
    std::fs::write(&box_path, serde_json::to_string_pretty(&json)?)?;
    paths.push(box_path);
    Ok(paths)
}
