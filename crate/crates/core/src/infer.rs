//! Sliding-window inference over whole volumes.
//!
//! Depth windows overlap by one thick slice; in-plane tiles do not overlap.
//! When an extent is not covered exactly, one extra window aligned to the end
//! is added. Overlapping predictions are averaged.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{predict, TvsrnParams};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::volume::{Spacing, Unit, Volume};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlidePlan {
    pub dims: (usize, usize, usize),
    pub window: (usize, usize, usize),
    pub scale: usize,
    pub depth_starts: Vec<usize>,
    pub row_starts: Vec<usize>,
    pub col_starts: Vec<usize>,
    /// Windows covering each thin depth.
    pub depth_coverage: Vec<u32>,
    pub row_coverage: Vec<u32>,
    pub col_coverage: Vec<u32>,
}

/// Starts `0, step, 2·step, …` that fit, plus an end-aligned start when the
/// last window stops short of `extent`.
pub fn starts(extent: usize, window: usize, step: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut s = 0;
    while s + window <= extent {
        out.push(s);
        s += step;
    }
    if out.last().map_or(true, |&l| l + window != extent) {
        out.push(extent - window);
    }
    out
}

fn axis_coverage(extent: usize, window: usize, starts: &[usize]) -> Vec<u32> {
    let mut cov = vec![0u32; extent];
    for &s in starts {
        cov[s..s + window].iter_mut().for_each(|c| *c += 1);
    }
    cov
}

/// Tile geometry for a thick volume of `dims` and a model cube `window`.
pub fn plan_slide(dims: (usize, usize, usize), window: (usize, usize, usize), scale: usize) -> Result<SlidePlan> {
    let (d, h, w) = dims;
    let (dc, hc, wc) = window;
    if dc < 2 || hc == 0 || wc == 0 || scale == 0 {
        return Err(Error::config(format!("window {window:?} / scale {scale} invalid")));
    }
    if d < dc || h < hc || w < wc {
        return Err(Error::contract(format!("volume {dims:?} is smaller than window {window:?}")));
    }
    let depth_starts = starts(d, dc, dc - 1);
    let row_starts = starts(h, hc, hc);
    let col_starts = starts(w, wc, wc);
    let thin_d = (d - 1) * scale + 1;
    let thin_window = (dc - 1) * scale + 1;
    let thin_starts: Vec<usize> = depth_starts.iter().map(|&s| s * scale).collect();
    Ok(SlidePlan {
        dims,
        window,
        scale,
        depth_coverage: axis_coverage(thin_d, thin_window, &thin_starts),
        row_coverage: axis_coverage(h, hc, &row_starts),
        col_coverage: axis_coverage(w, wc, &col_starts),
        depth_starts,
        row_starts,
        col_starts,
    })
}

/// Origin of one inference tile in thick coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tile {
    pub d0: usize,
    pub h0: usize,
    pub w0: usize,
}

impl SlidePlan {
    pub fn out_dims(&self) -> (usize, usize, usize) {
        ((self.dims.0 - 1) * self.scale + 1, self.dims.1, self.dims.2)
    }

    pub fn thin_window(&self) -> usize {
        (self.window.0 - 1) * self.scale + 1
    }

    /// Tiles in processing order: depth-major, then rows, then columns.
    pub fn tiles(&self) -> Vec<Tile> {
        let mut out = Vec::new();
        for &d0 in &self.depth_starts {
            for &h0 in &self.row_starts {
                for &w0 in &self.col_starts {
                    out.push(Tile { d0, h0, w0 });
                }
            }
        }
        out
    }

    /// Number of tiles covering thin voxel `(d, h, w)`.
    pub fn coverage(&self, d: usize, h: usize, w: usize) -> u32 {
        self.depth_coverage[d] * self.row_coverage[h] * self.col_coverage[w]
    }

    /// The model input for `tile`, `[1, Dc, Hc, Wc]`.
    pub fn input(&self, thick: &Volume, tile: Tile) -> Result<Tensor<f32>> {
        let (dc, hc, wc) = self.window;
        let cube = thick.crop((tile.d0, tile.h0, tile.w0), self.window)?;
        Tensor::from_vec(&[1, dc, hc, wc], cube.into_voxels())
    }
}

/// Running sums and counts over the thin output grid.
pub struct Accumulator {
    plan: SlidePlan,
    sums: Vec<f64>,
    counts: Vec<u32>,
}

impl Accumulator {
    pub fn new(plan: &SlidePlan) -> Self {
        let (d, h, w) = plan.out_dims();
        Self { plan: plan.clone(), sums: vec![0.0; d * h * w], counts: vec![0; d * h * w] }
    }

    /// Adds a `[D'c, Hc, Wc]` prediction for `tile`.
    pub fn add(&mut self, tile: Tile, pred: &Tensor<f32>) -> Result<()> {
        let (_, hc, wc) = self.plan.window;
        let dt = self.plan.thin_window();
        if pred.shape() != [dt, hc, wc] {
            return Err(Error::dimension("accumulate", format!("prediction {:?}, expected {:?}", pred.shape(), [dt, hc, wc])));
        }
        let (_, h, w) = self.plan.out_dims();
        let z0 = tile.d0 * self.plan.scale;
        let p = pred.data();
        for z in 0..dt {
            for y in 0..hc {
                let dst = ((z0 + z) * h + tile.h0 + y) * w + tile.w0;
                let src = (z * hc + y) * wc;
                for x in 0..wc {
                    self.sums[dst + x] += p[src + x] as f64;
                    self.counts[dst + x] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Per-voxel means clamped to `[0, 1]`.
    pub fn finish(self, spacing: Spacing) -> Result<Volume> {
        if let Some(i) = self.counts.iter().position(|&c| c == 0) {
            return Err(Error::contract(format!("thin voxel {i} received no prediction")));
        }
        let vox = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(&s, &c)| ((s / c as f64) as f32).clamp(0.0, 1.0))
            .collect();
        Volume::new(self.plan.out_dims(), spacing, Unit::Normalized, vox)
    }
}

/// Output spacing: through-plane spacing divided by the scale.
pub fn thin_spacing(thick: &Volume, scale: usize) -> Spacing {
    Spacing { z: thick.spacing.z / scale as f32, ..thick.spacing }
}

/// Runs `model` on every tile in plan order and assembles the thin volume.
pub fn infer_with<F>(thick: &Volume, plan: &SlidePlan, mut model: F) -> Result<Volume>
where
    F: FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
{
    if thick.unit() != Unit::Normalized {
        return Err(Error::contract("inference input must be normalized"));
    }
    if thick.dims() != plan.dims {
        return Err(Error::dimension("infer", format!("volume {:?} vs plan {:?}", thick.dims(), plan.dims)));
    }
    let mut acc = Accumulator::new(plan);
    for tile in plan.tiles() {
        let pred = model(&plan.input(thick, tile)?)?;
        acc.add(tile, &pred)?;
    }
    acc.finish(thin_spacing(thick, plan.scale))
}

/// Full-volume TVSRN inference with the model's own depth and a given
/// in-plane tile.
pub fn infer_volume(
    thick: &Volume,
    store: &ParamStore<f32>,
    params: &TvsrnParams,
    tile_hw: (usize, usize),
) -> Result<Volume> {
    let cfg = &params.config;
    let plan = plan_slide(thick.dims(), (cfg.depth, tile_hw.0, tile_hw.1), cfg.scale)?;
    infer_with(thick, &plan, |x| predict(store, params, x))
}
