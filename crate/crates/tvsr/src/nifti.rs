//! Read-only NIfTI-1 ingestion: uncompressed, little-endian, 3-D, int16 or
//! float32. Orientation matrices are ignored and axes taken as stored
//! (x fastest, then y, then z).

use std::path::Path;

use tvsr_core::volume::{Spacing, Unit, Volume};

use crate::container::Reader;
use crate::error::{read_file, Result};

pub const HEADER_SIZE: usize = 348;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

fn i16_at(b: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([b[at], b[at + 1]])
}

fn f32_at(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn decode_nifti1(path: &Path, bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader::new(path, bytes);
    let hdr = r.take(HEADER_SIZE, "header")?;
    let sizeof_hdr = i32::from_le_bytes(hdr[..4].try_into().unwrap());
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(r.fail(0, format!("sizeof_hdr is {sizeof_hdr}, expected 348 (big-endian files are unsupported)")));
    }
    if &hdr[344..348] != b"n+1\0" {
        return Err(r.fail(344, "magic is not \"n+1\\0\""));
    }
    let ndim = i16_at(hdr, 40);
    let extra: Vec<i16> = (4..=7).map(|k| i16_at(hdr, 40 + 2 * k)).collect();
    if !(3..=7).contains(&ndim) || extra.iter().take(ndim as usize - 3).any(|&n| n > 1) {
        return Err(r.fail(40, format!("only 3-D volumes are supported (dim[0] = {ndim})")));
    }
    let nx = i16_at(hdr, 42);
    let ny = i16_at(hdr, 44);
    let nz = i16_at(hdr, 46);
    if nx < 1 || ny < 1 || nz < 1 {
        return Err(r.fail(42, format!("non-positive extents {nx}×{ny}×{nz}")));
    }
    let datatype = i16_at(hdr, 70);
    let width = match datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(r.fail(70, format!("unsupported datatype code {other}"))),
    };
    let pixdim: Vec<f32> = (1..=3).map(|k| f32_at(hdr, 76 + 4 * k)).collect();
    if pixdim.iter().any(|p| !(p.abs() > 0.0)) {
        return Err(r.fail(80, format!("invalid pixdim {pixdim:?}")));
    }
    let vox_offset = f32_at(hdr, 108);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(r.fail(108, format!("invalid vox_offset {vox_offset}")));
    }
    let slope = f32_at(hdr, 112);
    let inter = f32_at(hdr, 116);
    let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
    let n = nx * ny * nz;
    r.pos = vox_offset as usize;
    let raw = r.take(n * width, "voxel data")?;
    let mut vox: Vec<f32> = match datatype {
        DT_INT16 => raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f32).collect(),
        _ => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    if slope != 0.0 && slope.is_finite() {
        vox.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    let spacing = Spacing { z: pixdim[2].abs(), y: pixdim[1].abs(), x: pixdim[0].abs() };
    Volume::new((nz, ny, nx), spacing, Unit::Hu, vox).map_err(|e| r.fail(0, e.to_string()))
}

pub fn read_nifti1(path: &Path) -> Result<Volume> {
    decode_nifti1(path, &read_file(path)?)
}

/// Minimal NIfTI-1 writer for fixtures: `voxels` in z-major order, x fastest.
pub fn encode_nifti1(
    dims: (usize, usize, usize),
    spacing: Spacing,
    datatype: i16,
    slope: f32,
    inter: f32,
    voxels: &[f32],
) -> Vec<u8> {
    let mut h = vec![0u8; HEADER_SIZE + 4];
    let put = |h: &mut [u8], at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);
    put(&mut h, 0, &(HEADER_SIZE as i32).to_le_bytes());
    let (nz, ny, nx) = dims;
    for (k, v) in [3, nx, ny, nz, 1, 1, 1, 1].into_iter().enumerate() {
        put(&mut h, 40 + 2 * k, &(v as i16).to_le_bytes());
    }
    put(&mut h, 70, &datatype.to_le_bytes());
    put(&mut h, 72, &(if datatype == DT_INT16 { 16i16 } else { 32 }).to_le_bytes());
    for (k, v) in [1.0, spacing.x, spacing.y, spacing.z].into_iter().enumerate() {
        put(&mut h, 76 + 4 * k, &f32::to_le_bytes(v));
    }
    put(&mut h, 108, &352f32.to_le_bytes());
    put(&mut h, 112, &slope.to_le_bytes());
    put(&mut h, 116, &inter.to_le_bytes());
    put(&mut h, 344, b"n+1\0");
    for &v in voxels {
        if datatype == DT_INT16 {
            h.extend_from_slice(&(v as i16).to_le_bytes());
        } else {
            h.extend_from_slice(&v.to_le_bytes());
        }
    }
    h
}
