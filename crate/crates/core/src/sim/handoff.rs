//! Shared-file handoff between the sequential driver and the parallel
//! solver workers.
//!
//! One file per direction: a single JSON header line followed by raw
//! little-endian f64 blocks, x-fastest voxel order, one block per named
//! field. The header's MCS tag guards against a stale file being consumed
//! by either side. Read-back equals write bit-exactly.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fvm::{BoxCoupling, FieldSet, Species};
use crate::lattice::BoundingBox;

pub const MAGIC: &str = "MPMH1";
pub const INPUT_FILE: &str = "handoff_in.bin";
pub const OUTPUT_FILE: &str = "handoff_out.bin";

#[derive(Debug, Error)]
pub enum HandoffError {
    #[error("stale handoff file: expected mcs {expected}, found {found}")]
    StaleFile { expected: u64, found: u64 },
    #[error("malformed handoff file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HandoffHeader {
    pub magic: String,
    pub mcs: u64,
    pub bbox: BoundingBox,
    pub dims: [usize; 3],
    pub h: f64,
    pub blocks: Vec<String>,
}

pub fn input_path(dir: &Path) -> PathBuf {
    dir.join(INPUT_FILE)
}

pub fn output_path(dir: &Path) -> PathBuf {
    dir.join(OUTPUT_FILE)
}

/// Writes header + blocks to `path`.
pub fn write_blocks(
    path: &Path,
    mcs: u64,
    bbox: BoundingBox,
    dims: [usize; 3],
    h: f64,
    blocks: &[(&str, &[f64])],
) -> Result<(), HandoffError> {
    let n = dims[0] * dims[1] * dims[2];
    for (name, data) in blocks {
        if data.len() != n {
            return Err(HandoffError::Malformed(format!(
                "block {name} holds {} values, dims {dims:?} need {n}",
                data.len()
            )));
        }
    }
    let header = HandoffHeader {
        magic: MAGIC.to_string(),
        mcs,
        bbox,
        dims,
        h,
        blocks: blocks.iter().map(|(name, _)| name.to_string()).collect(),
    };
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut bytes = Vec::with_capacity(n * 8);
    for (_, data) in blocks {
        bytes.clear();
        for v in *data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads header + blocks; errors with `StaleFile` when the MCS tag does
/// not match `expected_mcs`.
pub fn read_blocks(
    path: &Path,
    expected_mcs: Option<u64>,
) -> Result<(HandoffHeader, Vec<Vec<f64>>), HandoffError> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: HandoffHeader = serde_json::from_str(line.trim_end())?;
    if header.magic != MAGIC {
        return Err(HandoffError::Malformed(format!(
            "bad magic {:?}",
            header.magic
        )));
    }
    if let Some(expected) = expected_mcs {
        if header.mcs != expected {
            return Err(HandoffError::StaleFile {
                expected,
                found: header.mcs,
            });
        }
    }
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let mut blocks = Vec::with_capacity(header.blocks.len());
    let mut bytes = vec![0u8; n * 8];
    for name in &header.blocks {
        r.read_exact(&mut bytes)
            .map_err(|e| HandoffError::Malformed(format!("block {name} truncated: {e}")))?;
        blocks.push(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    Ok((header, blocks))
}

const INPUT_BLOCKS: [&str; 13] = [
    "oxygen",
    "nutrient",
    "il6",
    "il8",
    "source_oxygen",
    "source_nutrient",
    "source_il6",
    "source_il8",
    "uptake_oxygen",
    "uptake_nutrient",
    "uptake_il6",
    "uptake_il8",
    "mask",
];

#[derive(Debug)]
pub struct HandoffInputs {
    pub header: HandoffHeader,
    pub conc: [Vec<f64>; 4],
    pub source: [Vec<f64>; 4],
    pub uptake: [Vec<f64>; 4],
    pub mask01: Vec<f64>,
}

/// Serializes the solver's per-step inputs: concentrations, coupling
/// fields and the pleural mask inside the box.
pub fn write_inputs(
    dir: &Path,
    mcs: u64,
    bbox: BoundingBox,
    fields: &FieldSet,
    coupling: &BoxCoupling,
    mask01: &[f64],
) -> Result<PathBuf, HandoffError> {
    let lat = fields.lattice();
    let n = lat.len();
    let zeros = vec![0.0; n];
    let mut named: Vec<(&str, &[f64])> = Vec::with_capacity(13);
    for s in Species::ALL {
        named.push((INPUT_BLOCKS[s.index()], &fields.get(s).values));
    }
    for s in Species::ALL {
        let (src, _) = coupling.for_species(s);
        named.push((INPUT_BLOCKS[4 + s.index()], src.unwrap_or(&zeros)));
    }
    for s in Species::ALL {
        let (_, upt) = coupling.for_species(s);
        named.push((INPUT_BLOCKS[8 + s.index()], upt.unwrap_or(&zeros)));
    }
    named.push(("mask", mask01));
    let path = input_path(dir);
    write_blocks(&path, mcs, bbox, lat.dims(), lat.h, &named)?;
    Ok(path)
}

pub fn read_inputs(dir: &Path, expected_mcs: Option<u64>) -> Result<HandoffInputs, HandoffError> {
    let (header, mut blocks) = read_blocks(&input_path(dir), expected_mcs)?;
    if header.blocks != INPUT_BLOCKS {
        return Err(HandoffError::Malformed(format!(
            "unexpected input blocks {:?}",
            header.blocks
        )));
    }
    let mask01 = blocks.pop().unwrap();
    let mut take4 = |offset: usize| -> [Vec<f64>; 4] {
        std::array::from_fn(|i| std::mem::take(&mut blocks[offset + i]))
    };
    let conc = take4(0);
    let source = take4(4);
    let uptake = take4(8);
    Ok(HandoffInputs {
        header,
        conc,
        source,
        uptake,
        mask01,
    })
}

/// Serializes the solved concentrations back for the driver.
pub fn write_outputs(
    dir: &Path,
    mcs: u64,
    bbox: BoundingBox,
    h: f64,
    dims: [usize; 3],
    conc: &[Vec<f64>; 4],
) -> Result<(), HandoffError> {
    let named: Vec<(&str, &[f64])> = Species::ALL
        .iter()
        .map(|s| (INPUT_BLOCKS[s.index()], &conc[s.index()][..]))
        .collect();
    write_blocks(&output_path(dir), mcs, bbox, dims, h, &named)
}

pub fn read_outputs(
    dir: &Path,
    expected_mcs: Option<u64>,
    dims: [usize; 3],
) -> Result<[Vec<f64>; 4], HandoffError> {
    let (header, blocks) = read_blocks(&output_path(dir), expected_mcs)?;
    if header.dims != dims {
        return Err(HandoffError::Malformed(format!(
            "output dims {:?} do not match box {dims:?}",
            header.dims
        )));
    }
    if blocks.len() != 4 {
        return Err(HandoffError::Malformed(format!(
            "expected 4 output blocks, got {}",
            blocks.len()
        )));
    }
    let mut it = blocks.into_iter();
    Ok(std::array::from_fn(|_| it.next().unwrap()))
}
