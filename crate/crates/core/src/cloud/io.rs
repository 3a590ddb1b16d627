//! Point-cloud files.
//!
//! Binary layout: `PTCL` magic, `u32` point count, `u32` fields per
//! point, then row-major little-endian `f32` values.

use std::io::{Read, Write};

use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"PTCL";

pub fn write_points<W: Write>(mut w: W, rows: &Tensor) -> Result<()> {
    if rows.ndim() != 2 {
        return Err(Error::ShapeMismatch(format!("expected N×F rows, got {:?}", rows.shape())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&(rows.shape()[0] as u32).to_le_bytes())?;
    w.write_all(&(rows.shape()[1] as u32).to_le_bytes())?;
    for &v in rows.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_points<R: Read>(mut r: R) -> Result<Tensor> {
    let mut header = [0u8; 12];
    r.read_exact(&mut header)?;
    if &header[..4] != MAGIC {
        return Err(Error::Format("not a point-cloud file".into()));
    }
    let n = u32::from_le_bytes([header[4], header[5], header[6], header[7]]) as usize;
    let f = u32::from_le_bytes([header[8], header[9], header[10], header[11]]) as usize;
    let mut body = vec![0u8; n * f * 4];
    r.read_exact(&mut body)?;
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(vec![n, f], data)
}

/// Reads comma-separated rows of numbers; a non-numeric first line is
/// treated as a header.
pub fn read_points_csv<R: Read>(r: R) -> Result<Tensor> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(r);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if line == 0 => continue,
            Err(e) => return Err(Error::Parse(format!("line {}: {e}", line + 1))),
        }
    }
    let cols = rows.first().map_or(3, Vec::len);
    Tensor::from_rows(&rows, cols)
}
