//! File formats: binary and CSV fields, mask and density CSVs, and the
//! directory layout of a persisted solution.
//!
//! Binary field layout (little endian):
//!
//! ```text
//! "FLAB" | u32 version | u8 mode | 3 reserved | u32 N | u32 ndims | u64 dims[ndims]
//!        | f64 a | f64 L | f64 z_grading | f64 payload[prod(dims)]
//! ```
//!
//! The payload is in storage order (row major, `z` fastest).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::potential::{CoincidenceSet, NeumannDensity};
use crate::weighted_grid::{build_grid, Field, GridMode, GridSpec, WeightedGrid};

pub const FIELD_MAGIC: &[u8; 4] = b"FLAB";
pub const FIELD_VERSION: u32 = 1;

fn mode_byte(mode: GridMode) -> u8 {
    match mode {
        GridMode::FullTensor => 0,
        GridMode::Axisymmetric => 1,
    }
}

pub fn write_field_bin(path: &Path, field: &Field) -> Result<()> {
    let grid = field.grid();
    let spec = grid.spec();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FIELD_MAGIC)?;
    w.write_all(&FIELD_VERSION.to_le_bytes())?;
    w.write_all(&[mode_byte(spec.mode), 0, 0, 0])?;
    w.write_all(&(spec.dimension as u32).to_le_bytes())?;
    w.write_all(&(grid.ndim() as u32).to_le_bytes())?;
    for &d in grid.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for x in [spec.weight_a, spec.half_extent, spec.z_grading] {
        w.write_all(&x.to_le_bytes())?;
    }
    for v in field.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_array<const K: usize>(r: &mut impl Read) -> Result<[u8; K]> {
    let mut buf = [0u8; K];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Reads a field and rebuilds its grid.
pub fn read_field_bin(path: &Path) -> Result<Field> {
    let mut r = BufReader::new(File::open(path)?);
    if &read_array::<4>(&mut r)? != FIELD_MAGIC {
        return Err(Error::InvalidInput(format!("{} is not a field file", path.display())));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != FIELD_VERSION {
        return Err(Error::InvalidInput(format!("unsupported field version {version}")));
    }
    let mode = match read_array::<4>(&mut r)?[0] {
        0 => GridMode::FullTensor,
        1 => GridMode::Axisymmetric,
        m => return Err(Error::InvalidInput(format!("unknown grid mode byte {m}"))),
    };
    let dimension = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let ndims = u32::from_le_bytes(read_array(&mut r)?) as usize;
    if ndims == 0 || ndims > 8 {
        return Err(Error::InvalidInput(format!("implausible axis count {ndims}")));
    }
    let dims = (0..ndims)
        .map(|_| Ok(u64::from_le_bytes(read_array(&mut r)?) as usize))
        .collect::<Result<Vec<_>>>()?;
    let a = f64::from_le_bytes(read_array(&mut r)?);
    let l = f64::from_le_bytes(read_array(&mut r)?);
    let z_grading = f64::from_le_bytes(read_array(&mut r)?);
    let n = match mode {
        GridMode::FullTensor => dims[0],
        GridMode::Axisymmetric => 2 * dims[0] - 1,
    };
    let spec = GridSpec { z_grading, ..GridSpec::new(dimension, l, n, a, mode) };
    let grid = build_grid(spec)?;
    if grid.dims() != dims.as_slice() {
        return Err(Error::InvalidInput(format!("header dims {dims:?} do not match the grid {:?}", grid.dims())));
    }
    let mut values = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        values.push(f64::from_le_bytes(read_array(&mut r)?));
    }
    Field::from_values(&grid, values)
}

fn coord_headers(grid: &WeightedGrid) -> Vec<String> {
    match grid.mode() {
        GridMode::Axisymmetric => vec!["r".into(), "z".into()],
        GridMode::FullTensor => (1..=grid.dimension()).map(|i| format!("x{i}")).chain(["z".to_string()]).collect(),
    }
}

/// One row per node: grid coordinates and value.
pub fn write_field_csv(path: &Path, field: &Field) -> Result<()> {
    let grid = field.grid();
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = coord_headers(grid);
    header.push("value".into());
    w.write_record(&header).map_err(csv_err)?;
    for (node, v) in field.values().iter().enumerate() {
        let mut row: Vec<String> = grid.node_coords(node).iter().map(|c| format!("{c:e}")).collect();
        row.push(format!("{v:e}"));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

fn thin_headers(grid: &WeightedGrid) -> Vec<String> {
    let mut h = coord_headers(grid);
    h.pop();
    h
}

/// Every thin-plane node with a 0/1 contact flag.
pub fn write_mask_csv(path: &Path, mask: &CoincidenceSet) -> Result<()> {
    let grid = mask.grid();
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = thin_headers(grid);
    header.push("contact".into());
    w.write_record(&header).map_err(csv_err)?;
    for (k, &m) in mask.mask().iter().enumerate() {
        let mut row: Vec<String> = grid.thin_coords(k).iter().map(|c| format!("{c:e}")).collect();
        row.push(if m { "1" } else { "0" }.into());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads flags written by [`write_mask_csv`] for the given grid.
pub fn read_mask_csv(path: &Path, grid: &Arc<WeightedGrid>) -> Result<CoincidenceSet> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut mask = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let flag = rec.get(rec.len() - 1).unwrap_or("");
        mask.push(match flag.trim() {
            "1" => true,
            "0" => false,
            other => return Err(Error::InvalidInput(format!("bad contact flag {other:?}"))),
        });
    }
    if mask.len() != grid.thin_nodes().len() {
        return Err(Error::DimensionMismatch { expected: grid.thin_nodes().len(), found: mask.len() });
    }
    Ok(CoincidenceSet::new(grid, mask))
}

/// Masked nodes with coordinates, density and cell area.
pub fn write_density_csv(path: &Path, density: &NeumannDensity, mask: &CoincidenceSet) -> Result<()> {
    let grid = mask.grid();
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = thin_headers(grid);
    header.extend(["lambda".to_string(), "cell_area".to_string()]);
    w.write_record(&header).map_err(csv_err)?;
    for (&k, &l) in density.nodes.iter().zip(&density.lambda) {
        let mut row: Vec<String> = grid.thin_coords(k).iter().map(|c| format!("{c:e}")).collect();
        row.push(format!("{l:e}"));
        row.push(format!("{:e}", mask.cell_areas()[k]));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// `u` and the contact set read back from a persisted solution directory.
pub struct PersistedSolution {
    pub u: Field,
    pub v: Field,
    pub mask: CoincidenceSet,
}

/// Writes `u.bin`, `v.bin`, `mask.csv` and `lambda.csv` into `dir`.
pub fn save_fields(dir: &Path, u: &Field, v: &Field, mask: &CoincidenceSet, density: &NeumannDensity) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_field_bin(&dir.join("u.bin"), u)?;
    write_field_bin(&dir.join("v.bin"), v)?;
    write_mask_csv(&dir.join("mask.csv"), mask)?;
    write_density_csv(&dir.join("lambda.csv"), density, mask)?;
    Ok(())
}

pub fn load_fields(dir: &Path) -> Result<PersistedSolution> {
    let u = read_field_bin(&dir.join("u.bin"))?;
    let v = read_field_bin(&dir.join("v.bin"))?;
    if u.grid().spec() != v.grid().spec() {
        return Err(Error::InvalidInput("u.bin and v.bin live on different grids".into()));
    }
    let mask = read_mask_csv(&dir.join("mask.csv"), u.grid())?;
    Ok(PersistedSolution { u, v, mask })
}
