//! Sliding-window inference with tiles predicted on the rayon pool.
//! Predictions are merged in plan order, so the output does not depend on
//! the number of threads.

use rayon::prelude::*;
use tvsr_core::infer::{plan_slide, thin_spacing, Accumulator, SlidePlan};
use tvsr_core::model::{predict, TvsrnParams};
use tvsr_core::volume::{Unit, Volume};
use tvsr_core::ParamStore;

use crate::error::{Error, Result};

pub fn infer_parallel(thick: &Volume, plan: &SlidePlan, store: &ParamStore<f32>, params: &TvsrnParams) -> Result<Volume> {
    if thick.unit() != Unit::Normalized {
        return Err(Error::Data("inference input must be normalized".into()));
    }
    let tiles = plan.tiles();
    let preds: Vec<_> = tiles
        .par_iter()
        .map(|&t| predict(store, params, &plan.input(thick, t)?))
        .collect::<Result<_, _>>()?;
    let mut acc = Accumulator::new(plan);
    for (t, p) in tiles.into_iter().zip(&preds) {
        acc.add(t, p)?;
    }
    Ok(acc.finish(thin_spacing(thick, plan.scale))?)
}

/// Window for a model and volume: `tile` if given, else the model depth and
/// in-plane extents capped at 64 and at the volume size.
pub fn window_for(params: &TvsrnParams, thick: &Volume, tile: Option<(usize, usize, usize)>) -> (usize, usize, usize) {
    tile.unwrap_or((params.config.depth, thick.height().min(64), thick.width().min(64)))
}

pub fn infer_file_volume(
    thick: &Volume,
    store: &ParamStore<f32>,
    params: &TvsrnParams,
    tile: Option<(usize, usize, usize)>,
) -> Result<Volume> {
    let thick = match thick.unit() {
        Unit::Hu => thick.normalize_hu()?,
        Unit::Normalized => thick.clone(),
    };
    let window = window_for(params, &thick, tile);
    if window.0 != params.config.depth {
        return Err(Error::Usage(format!(
            "tile depth {} must equal the model input depth {}",
            window.0, params.config.depth
        )));
    }
    let plan = plan_slide(thick.dims(), window, params.config.scale)?;
    infer_parallel(&thick, &plan, store, params)
}
