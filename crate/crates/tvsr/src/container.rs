//! Native volume container: a 32-byte little-endian header followed by the
//! voxels as f32, z-major then row-major per slice.
//!
//! ```text
//! 0  "TVSR"        4  u16 version    6  u32 D, H, W
//! 18 f32 z, y, x   30 u8 unit        31 u8 dtype (0 = f32)
//! ```

use std::path::Path;

use tvsr_core::volume::{Spacing, Unit, Volume};

use crate::error::{read_file, write_file, Error, Result};

pub const MAGIC: &[u8; 4] = b"TVSR";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;

fn unit_code(unit: Unit) -> u8 {
    match unit {
        Unit::Hu => 0,
        Unit::Normalized => 1,
    }
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let (d, h, w) = v.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.voxels().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for n in [d, h, w] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for s in [v.spacing.z, v.spacing.y, v.spacing.x] {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(unit_code(v.unit()));
    out.push(0);
    for x in v.voxels() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Cursor over a byte buffer that reports failures with their byte offset.
pub(crate) struct Reader<'a> {
    pub path: &'a Path,
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    pub fn fail(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::format(self.path, offset as u64, detail)
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(
                self.bytes.len(),
                format!("truncated {what}: need {n} bytes at {}, file has {}", self.pos, self.bytes.len()),
            )),
        }
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.fail(self.pos, "size overflow"))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_volume(path: &Path, bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader::new(path, bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic, expected \"TVSR\""));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let dims = (r.u32("depth")? as usize, r.u32("height")? as usize, r.u32("width")? as usize);
    let (z, y, x) = (r.f32("spacing")?, r.f32("spacing")?, r.f32("spacing")?);
    let unit = match r.u8("unit")? {
        0 => Unit::Hu,
        1 => Unit::Normalized,
        u => return Err(r.fail(30, format!("unknown unit flag {u}"))),
    };
    let dtype = r.u8("dtype")?;
    if dtype != 0 {
        return Err(r.fail(31, format!("unknown payload dtype {dtype}")));
    }
    let n = dims.0.checked_mul(dims.1).and_then(|n| n.checked_mul(dims.2));
    let n = n.ok_or_else(|| r.fail(6, "dimension product overflows"))?;
    let expected = n.checked_mul(4).and_then(|p| p.checked_add(HEADER_LEN));
    if expected != Some(bytes.len()) {
        return Err(r.fail(
            bytes.len().min(HEADER_LEN + 4 * n),
            format!("payload length {} does not match dims {dims:?}", bytes.len() - HEADER_LEN),
        ));
    }
    let voxels = r.f32s(n, "payload")?;
    Volume::new(dims, Spacing { z, y, x }, unit, voxels).map_err(|e| r.fail(6, e.to_string()))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(path, &read_file(path)?)
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    write_file(path, &encode_volume(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn sample() -> Volume {
        let vox = (0..4 * 5 * 6).map(|i| (i as f32 * 0.37).sin()).collect();
        Volume::new((4, 5, 6), Spacing { z: 5.0, y: 0.7, x: 0.65 }, Unit::Hu, vox).unwrap()
    }

    #[test]
    fn header_layout() {
        let b = encode_volume(&sample());
        assert_eq!(&b[..4], b"TVSR");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u32::from_le_bytes(b[6..10].try_into().unwrap()), 4);
        assert_eq!(f32::from_le_bytes(b[18..22].try_into().unwrap()), 5.0);
        assert_eq!(f32::from_le_bytes(b[26..30].try_into().unwrap()), 0.65);
        assert_eq!((b[30], b[31]), (0, 0));
        assert_eq!(b.len(), 32 + 4 * 120);
    }

    #[test]
    fn decode_inverts_encode() {
        let v = sample();
        assert_eq!(decode_volume(&PathBuf::from("x"), &encode_volume(&v)).unwrap(), v);
    }

    #[test]
    fn errors_carry_offsets() {
        let p = PathBuf::from("x");
        let mut b = encode_volume(&sample());
        b[31] = 3;
        assert!(matches!(decode_volume(&p, &b), Err(Error::Format { offset: 31, .. })));
        let b = encode_volume(&sample());
        let e = decode_volume(&p, &b[..100]).unwrap_err();
        assert!(matches!(e, Error::Format { offset: 100, .. }), "{e}");
        let e = decode_volume(&p, &b[..10]).unwrap_err();
        assert!(matches!(e, Error::Format { .. }), "{e}");
        let mut b = b.clone();
        b[0] = b'X';
        assert!(matches!(decode_volume(&p, &b), Err(Error::Format { offset: 0, .. })));
    }
}
