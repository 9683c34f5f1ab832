//! Binary PGM (P5, maxval 255) slice export.

use std::path::Path;

use tvsr_core::volume::{window_to_gray, Axis, Volume};

use crate::error::{write_file, Result};

pub fn encode_pgm(rows: usize, cols: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// The windowed slice as PGM bytes.
pub fn slice_pgm(v: &Volume, axis: Axis, index: usize, window: (f32, f32)) -> Result<Vec<u8>> {
    let plane = v.plane(axis, index)?;
    let gray = window_to_gray(&plane.data, v.unit(), window.0, window.1);
    Ok(encode_pgm(plane.rows, plane.cols, &gray))
}

pub fn export_slice_pgm(v: &Volume, axis: Axis, index: usize, window: (f32, f32), path: &Path) -> Result<()> {
    write_file(path, &slice_pgm(v, axis, index, window)?)
}

pub fn parse_axis(s: &str) -> Option<Axis> {
    match s {
        "axial" => Some(Axis::Axial),
        "coronal" => Some(Axis::Coronal),
        "sagittal" => Some(Axis::Sagittal),
        _ => None,
    }
}
