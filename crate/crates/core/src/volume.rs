//! CT volumes: a `D × H × W` voxel grid stored z-major, row-major per slice.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower end of the intensity range mapped onto `[0, 1]`.
pub const HU_MIN: f32 = -1024.0;
/// Upper end of the intensity range mapped onto `[0, 1]`.
pub const HU_MAX: f32 = 2048.0;
const HU_RANGE: f32 = HU_MAX - HU_MIN;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unit {
    Hu,
    Normalized,
}

/// Voxel spacing in millimetres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spacing {
    pub z: f32,
    pub y: f32,
    pub x: f32,
}

impl Spacing {
    pub fn new(z: f32, in_plane: f32) -> Self {
        Self { z, y: in_plane, x: in_plane }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Axial,
    Coronal,
    Sagittal,
}

/// A 2-D cut through a volume, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    depth: usize,
    height: usize,
    width: usize,
    pub spacing: Spacing,
    unit: Unit,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: (usize, usize, usize), spacing: Spacing, unit: Unit, voxels: Vec<f32>) -> Result<Self> {
        let (d, h, w) = dims;
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::dimension("volume", format!("empty dims {dims:?}")));
        }
        if voxels.len() != d * h * w {
            return Err(Error::dimension(
                "volume",
                format!("{dims:?} needs {} voxels, got {}", d * h * w, voxels.len()),
            ));
        }
        if !(spacing.z > 0.0 && spacing.y > 0.0 && spacing.x > 0.0) {
            return Err(Error::contract(format!("spacing must be positive, got {spacing:?}")));
        }
        if unit == Unit::Normalized && voxels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("normalized volume has voxels outside [0, 1]"));
        }
        Ok(Self { depth: d, height: h, width: w, spacing, unit, voxels })
    }

    pub fn filled(dims: (usize, usize, usize), spacing: Spacing, unit: Unit, value: f32) -> Result<Self> {
        Self::new(dims, spacing, unit, alloc::vec![value; dims.0 * dims.1 * dims.2])
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.voxels[(d * self.height + h) * self.width + w]
    }

    pub fn axial(&self, d: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.voxels[d * n..(d + 1) * n]
    }

    /// Maps HU onto `[0, 1]` via `clamp((x + 1024) / 3072, 0, 1)`.
    pub fn normalize_hu(&self) -> Result<Volume> {
        if self.unit != Unit::Hu {
            return Err(Error::contract("volume is already normalized"));
        }
        let voxels = self.voxels.iter().map(|&x| normalize_value(x)).collect();
        Ok(Volume { voxels, unit: Unit::Normalized, ..self.clone_meta() })
    }

    /// Inverse of [`Volume::normalize_hu`] on the unclamped range.
    pub fn to_hu(&self) -> Volume {
        match self.unit {
            Unit::Hu => self.clone(),
            Unit::Normalized => Volume {
                voxels: self.voxels.iter().map(|&x| denormalize_value(x)).collect(),
                unit: Unit::Hu,
                ..self.clone_meta()
            },
        }
    }

    fn clone_meta(&self) -> Volume {
        Volume {
            depth: self.depth,
            height: self.height,
            width: self.width,
            spacing: self.spacing,
            unit: self.unit,
            voxels: Vec::new(),
        }
    }

    /// Copy of the sub-block starting at `origin` with extents `size`.
    pub fn crop(&self, origin: (usize, usize, usize), size: (usize, usize, usize)) -> Result<Volume> {
        let (d0, h0, w0) = origin;
        let (dn, hn, wn) = size;
        if d0 + dn > self.depth || h0 + hn > self.height || w0 + wn > self.width {
            return Err(Error::contract(format!(
                "crop {origin:?}+{size:?} exceeds volume {:?}",
                self.dims()
            )));
        }
        let mut voxels = Vec::with_capacity(dn * hn * wn);
        for d in d0..d0 + dn {
            for h in h0..h0 + hn {
                let row = (d * self.height + h) * self.width;
                voxels.extend_from_slice(&self.voxels[row + w0..row + w0 + wn]);
            }
        }
        Volume::new(size, self.spacing, self.unit, voxels)
    }

    /// Mirror along the width axis.
    pub fn flip_width(&self) -> Volume {
        let mut voxels = self.voxels.clone();
        for row in voxels.chunks_exact_mut(self.width) {
            row.reverse();
        }
        Volume { voxels, ..self.clone_meta() }
    }

    /// Voxels as a `[1, D, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, self.depth, self.height, self.width], self.voxels.clone()).unwrap()
    }

    /// The 2-D cut at `index` along `axis`: axial gives `H × W`, coronal
    /// (fixed row) `D × W`, sagittal (fixed column) `D × H`.
    pub fn plane(&self, axis: Axis, index: usize) -> Result<Plane> {
        let extent = match axis {
            Axis::Axial => self.depth,
            Axis::Coronal => self.height,
            Axis::Sagittal => self.width,
        };
        if index >= extent {
            return Err(Error::contract(format!("{axis:?} index {index} out of range 0..{extent}")));
        }
        Ok(match axis {
            Axis::Axial => Plane { rows: self.height, cols: self.width, data: self.axial(index).to_vec() },
            Axis::Coronal => {
                let mut data = Vec::with_capacity(self.depth * self.width);
                for d in 0..self.depth {
                    let row = (d * self.height + index) * self.width;
                    data.extend_from_slice(&self.voxels[row..row + self.width]);
                }
                Plane { rows: self.depth, cols: self.width, data }
            }
            Axis::Sagittal => {
                let mut data = Vec::with_capacity(self.depth * self.height);
                for d in 0..self.depth {
                    for h in 0..self.height {
                        data.push(self.get(d, h, index));
                    }
                }
                Plane { rows: self.depth, cols: self.height, data }
            }
        })
    }
}

#[inline]
pub fn normalize_value(hu: f32) -> f32 {
    ((hu - HU_MIN) / HU_RANGE).clamp(0.0, 1.0)
}

#[inline]
pub fn denormalize_value(x: f32) -> f32 {
    x * HU_RANGE + HU_MIN
}

/// Linear display windowing to 8-bit gray. Normalized input is mapped back to
/// HU first; values outside `center ± width/2` clip.
pub fn window_to_gray(values: &[f32], unit: Unit, center: f32, width: f32) -> Vec<u8> {
    let lo = center - width / 2.0;
    values
        .iter()
        .map(|&v| {
            let hu = match unit {
                Unit::Hu => v,
                Unit::Normalized => denormalize_value(v),
            };
            let t = ((hu - lo) / width).clamp(0.0, 1.0);
            libm::roundf(t * 255.0) as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ramp(dims: (usize, usize, usize)) -> Volume {
        let n = dims.0 * dims.1 * dims.2;
        Volume::new(dims, Spacing::new(5.0, 0.7), Unit::Hu, (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn normalization_anchor_points() {
        let v = Volume::new((1, 1, 4), Spacing::new(1.0, 1.0), Unit::Hu, vec![-1024.0, 2048.0, 512.0, -2000.0])
            .unwrap();
        let n = v.normalize_hu().unwrap();
        assert_eq!(n.voxels(), &[0.0, 1.0, 0.5, 0.0]);
        assert_eq!(n.unit(), Unit::Normalized);
        assert!(matches!(n.normalize_hu(), Err(Error::Contract(_))));
    }

    #[test]
    fn normalization_is_monotone() {
        let xs: Vec<f32> = (-3000..3000).step_by(7).map(|x| x as f32).collect();
        let ys: Vec<f32> = xs.iter().map(|&x| normalize_value(x)).collect();
        assert!(ys.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn rejects_bad_volumes() {
        assert!(Volume::new((0, 1, 1), Spacing::new(1.0, 1.0), Unit::Hu, vec![]).is_err());
        assert!(Volume::new((1, 1, 2), Spacing::new(1.0, 1.0), Unit::Hu, vec![0.0]).is_err());
        assert!(Volume::new((1, 1, 1), Spacing::new(0.0, 1.0), Unit::Hu, vec![0.0]).is_err());
        assert!(Volume::new((1, 1, 1), Spacing::new(1.0, 1.0), Unit::Normalized, vec![1.5]).is_err());
    }

    #[test]
    fn plane_geometry() {
        let v = ramp((3, 4, 5));
        let a = v.plane(Axis::Axial, 0).unwrap();
        assert_eq!((a.rows, a.cols), (4, 5));
        let c = v.plane(Axis::Coronal, 2).unwrap();
        assert_eq!((c.rows, c.cols), (3, 5));
        let s = v.plane(Axis::Sagittal, 1).unwrap();
        assert_eq!((s.rows, s.cols), (3, 4));
        assert!(v.plane(Axis::Axial, 3).is_err());
    }

    #[test]
    fn coronal_equals_row_gather_of_axials() {
        let v = ramp((3, 4, 5));
        for r in 0..4 {
            let c = v.plane(Axis::Coronal, r).unwrap();
            for d in 0..3 {
                let axial = v.plane(Axis::Axial, d).unwrap();
                assert_eq!(&c.data[d * 5..(d + 1) * 5], &axial.data[r * 5..(r + 1) * 5]);
            }
        }
    }

    #[test]
    fn windowing_composes_with_denormalization() {
        let hu = [-975.0f32, -450.0, 150.0, 400.0];
        let norm: Vec<f32> = hu.iter().map(|&x| normalize_value(x)).collect();
        let direct = window_to_gray(&hu, Unit::Hu, -600.0, 1500.0);
        let via = window_to_gray(&norm, Unit::Normalized, -600.0, 1500.0);
        assert_eq!(direct, vec![64, 153, 255, 255]);
        assert_eq!(via, direct);
        assert_eq!(window_to_gray(&[-2000.0], Unit::Hu, -600.0, 1500.0), vec![0]);
    }

    #[test]
    fn crop_and_flip() {
        let v = ramp((2, 3, 4));
        let c = v.crop((1, 1, 1), (1, 2, 2)).unwrap();
        assert_eq!(c.voxels(), &[17.0, 18.0, 21.0, 22.0]);
        let f = v.flip_width();
        assert_eq!(&f.voxels()[..4], &[3.0, 2.0, 1.0, 0.0]);
        assert_eq!(f.flip_width(), v);
        assert!(v.crop((1, 0, 0), (2, 1, 1)).is_err());
    }
}
