//! Cube sampling, the L1 objective, Adam, and the training loop.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{forward, TvsrnParams};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::volume::{Unit, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    /// Thick cube extents (Dc, Hc, Wc).
    pub cube: (usize, usize, usize),
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub random_crop: bool,
    pub hflip: bool,
    /// Checkpoint interval in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 1,
            steps: 1000,
            seed: 0,
            cube: (4, 64, 64),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            random_crop: true,
            hflip: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || self.batch == 0 {
            return Err(Error::config(format!("lr {} / batch {} invalid", self.lr, self.batch)));
        }
        if self.cube.0 < 2 || self.cube.1 == 0 || self.cube.2 == 0 {
            return Err(Error::config(format!("cube {:?} invalid", self.cube)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

/// Crop origin of one training sample, in thick-volume coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub d0: usize,
    pub h0: usize,
    pub w0: usize,
    pub flip: bool,
}

/// Cuts the aligned cube pair at `crop`:
/// `lr = thick[d0 .. d0+Dc]`, `hr = thin[scale·d0 .. scale·d0 + (Dc−1)·scale + 1]`,
/// both over the same in-plane window, both mirrored when `crop.flip`.
pub fn extract_pair(
    thick: &Volume,
    thin: &Volume,
    cube: (usize, usize, usize),
    scale: usize,
    crop: Crop,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (dc, hc, wc) = cube;
    let dh = (dc - 1) * scale + 1;
    let lr = thick.crop((crop.d0, crop.h0, crop.w0), (dc, hc, wc))?;
    let hr = thin.crop((crop.d0 * scale, crop.h0, crop.w0), (dh, hc, wc))?;
    let (lr, hr) = if crop.flip { (lr.flip_width(), hr.flip_width()) } else { (lr, hr) };
    Ok((
        Tensor::from_vec(&[1, dc, hc, wc], lr.into_voxels())?,
        Tensor::from_vec(&[dh, hc, wc], hr.into_voxels())?,
    ))
}

fn check_pair(thick: &Volume, thin: &Volume, cube: (usize, usize, usize), scale: usize) -> Result<()> {
    if thick.unit() != Unit::Normalized || thin.unit() != Unit::Normalized {
        return Err(Error::contract("training volumes must be normalized"));
    }
    let (d, h, w) = thick.dims();
    let (td, th, tw) = thin.dims();
    if (th, tw) != (h, w) {
        return Err(Error::contract(format!("in-plane mismatch: thick {:?} thin {:?}", thick.dims(), thin.dims())));
    }
    if td < (d - 1) * scale + 1 {
        return Err(Error::contract(format!(
            "thin depth {td} shorter than (D − 1)·scale + 1 = {}",
            (d - 1) * scale + 1
        )));
    }
    if cube.0 > d || cube.1 > h || cube.2 > w {
        return Err(Error::contract(format!("cube {cube:?} exceeds volume {:?}", thick.dims())));
    }
    Ok(())
}

/// Draws a random aligned cube pair; crop origins are uniform over valid
/// positions and the flip is a fair coin.
pub fn sample_pair<R: Rng + ?Sized>(
    thick: &Volume,
    thin: &Volume,
    cfg: &TrainConfig,
    scale: usize,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    check_pair(thick, thin, cfg.cube, scale)?;
    let (d, h, w) = thick.dims();
    let (dc, hc, wc) = cfg.cube;
    let crop = if cfg.random_crop {
        Crop {
            d0: rng.random_range(0..=d - dc),
            h0: rng.random_range(0..=h - hc),
            w0: rng.random_range(0..=w - wc),
            flip: false,
        }
    } else {
        Crop { d0: 0, h0: 0, w0: 0, flip: false }
    };
    let crop = Crop { flip: cfg.hflip && rng.random_bool(0.5), ..crop };
    extract_pair(thick, thin, cfg.cube, scale, crop)
}

/// Mean absolute error over all elements.
pub fn l1_value<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dimension(
            "l1",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let s: f64 = pred.data().iter().zip(target.data()).map(|(&p, &t)| (p - t).abs().as_f64()).sum();
    Ok(s / pred.len() as f64)
}

/// Adam with bias correction. Moments are indexed like the parameter store,
/// so a tensor referenced from several places still gets one update.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { lr, beta1, beta2, eps, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn from_config(store: &ParamStore<f32>, cfg: &TrainConfig) -> Self {
        Self::new(store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    }

    /// One update with `grads[i]` belonging to parameter `i`.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Tensor<f32>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::contract(format!(
                "{} gradients / {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        let step = (self.lr / c1) as f32;
        let c2 = c2 as f32;
        let eps = self.eps as f32;
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[i].data();
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let vhat = v[j] / c2;
                p[j] -= step * m[j] / (libm::sqrtf(vhat) + eps);
            }
        }
        Ok(())
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub adam: Adam,
    pub losses: Vec<f32>,
}

/// A model, its weights and its optimizer state.
pub struct Trainer {
    pub params: TvsrnParams,
    pub store: ParamStore<f32>,
    pub cfg: TrainConfig,
    pub state: TrainState,
}

/// Random stream for one step, derived from the run seed and the step index
/// so a resumed run draws the same samples as an uninterrupted one.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

impl Trainer {
    pub fn new(params: TvsrnParams, store: ParamStore<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::from_config(&store, &cfg);
        Ok(Self { params, store, cfg, state: TrainState { step: 0, adam, losses: Vec::new() } })
    }

    /// Rebuilds a trainer from saved weights and optimizer state.
    pub fn resume(params: TvsrnParams, store: ParamStore<f32>, cfg: TrainConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if state.adam.m.len() != store.len()
            || state.adam.m.iter().zip(store.iter()).any(|(m, (_, _, p))| m.shape() != p.shape())
        {
            return Err(Error::contract("optimizer moments do not match the parameters"));
        }
        Ok(Self { params, store, cfg, state })
    }

    /// Loss and gradients for one cube pair, without updating anything.
    pub fn loss_and_grads(&self, lr: &Tensor<f32>, hr: &Tensor<f32>) -> Result<(f32, Vec<Tensor<f32>>)> {
        let mut tape = Tape::with_params(&self.store);
        let x = tape.constant(lr.clone());
        let y = forward(&mut tape, x, &self.params)?;
        let target = tape.constant(hr.clone());
        let loss = tape.l1_loss(y, target)?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?.into_param_grads(&self.store);
        Ok((value, grads))
    }

    /// Sample, forward, L1, backward, Adam. Returns the batch-mean loss.
    pub fn step(&mut self, pairs: &[(Volume, Volume)]) -> Result<f32> {
        if pairs.is_empty() {
            return Err(Error::contract("training needs at least one volume pair"));
        }
        let step = self.state.step;
        let mut rng = step_rng(self.cfg.seed, step);
        let mut total = 0.0f32;
        let mut acc: Option<Vec<Tensor<f32>>> = None;
        for _ in 0..self.cfg.batch {
            let (thick, thin) = &pairs[rng.random_range(0..pairs.len())];
            let (lr, hr) = sample_pair(thick, thin, &self.cfg, self.params.config.scale, &mut rng)?;
            let (loss, grads) = self.loss_and_grads(&lr, &hr)?;
            total += loss;
            match &mut acc {
                None => acc = Some(grads),
                Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        let mut grads = acc.unwrap();
        let inv = 1.0 / self.cfg.batch as f32;
        if self.cfg.batch > 1 {
            grads.iter_mut().for_each(|g| g.scale_in_place(inv));
        }
        let loss = total * inv;
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, detail: format!("loss = {loss}") });
        }
        if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| g.data().iter().any(|x| !x.is_finite())) {
            let name = self.store.name(self.store.ids().nth(i).unwrap());
            return Err(Error::NonFinite { step, detail: format!("gradient of {name}") });
        }
        self.state.adam.step(&mut self.store, &grads)?;
        self.state.step += 1;
        self.state.losses.push(loss);
        Ok(loss)
    }

    /// Runs until `cfg.steps` total steps. `on_checkpoint` fires every
    /// `checkpoint_every` steps and once at the end.
    pub fn train(
        &mut self,
        pairs: &[(Volume, Volume)],
        mut on_step: impl FnMut(u64, f32),
        mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.state.step < self.cfg.steps {
            let loss = self.step(pairs)?;
            on_step(self.state.step, loss);
            let every = self.cfg.checkpoint_every;
            if every > 0 && self.state.step % every == 0 && self.state.step < self.cfg.steps {
                on_checkpoint(self)?;
            }
        }
        on_checkpoint(self)
    }
}

/// Trailing moving average of `xs` with window `k`.
pub fn moving_average(xs: &[f32], k: usize) -> Vec<f64> {
    if k == 0 || xs.len() < k {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(xs.len() - k + 1);
    let mut s: f64 = xs[..k].iter().map(|&x| x as f64).sum();
    out.push(s / k as f64);
    for i in k..xs.len() {
        s += xs[i] as f64 - xs[i - k] as f64;
        out.push(s / k as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TvsrnConfig, Variant};
    use crate::params::ParamStore;
    use crate::volume::Spacing;
    use alloc::vec;

    fn ramp_pair(d: usize, scale: usize, h: usize, w: usize) -> (Volume, Volume) {
        let dt = (d - 1) * scale + 1;
        let thin: Vec<f32> = (0..dt * h * w)
            .map(|i| {
                let (z, r) = (i / (h * w), i % (h * w));
                ((z as f32) * 0.01 + (r % w) as f32 * 0.001).min(1.0)
            })
            .collect();
        let thin = Volume::new((dt, h, w), Spacing::new(1.0, 0.7), Unit::Normalized, thin).unwrap();
        let mut thick = Vec::new();
        for k in 0..d {
            thick.extend_from_slice(thin.axial(k * scale));
        }
        let thick = Volume::new((d, h, w), Spacing::new(scale as f32, 0.7), Unit::Normalized, thick).unwrap();
        (thick, thin)
    }

    #[test]
    fn hr_cube_starts_at_scaled_depth() {
        let (thick, thin) = ramp_pair(6, 5, 8, 8);
        let (lr, hr) = extract_pair(&thick, &thin, (4, 4, 4), 5, Crop { d0: 0, h0: 0, w0: 0, flip: false }).unwrap();
        assert_eq!(hr.shape(), &[16, 4, 4]);
        assert_eq!(lr.shape(), &[1, 4, 4, 4]);
        for k in 0..4 {
            assert_eq!(hr.at(&[5 * k, 1, 2]), lr.at(&[0, k, 1, 2]));
        }
        let (lr, hr) = extract_pair(&thick, &thin, (4, 4, 4), 5, Crop { d0: 2, h0: 3, w0: 1, flip: true }).unwrap();
        for k in 0..4 {
            for x in 0..4 {
                assert_eq!(hr.at(&[5 * k, 0, x]), lr.at(&[0, k, 0, x]));
            }
        }
        assert_eq!(lr.at(&[0, 0, 0, 0]), thick.get(2, 3, 4));
    }

    #[test]
    fn sampled_pairs_stay_aligned() {
        let (thick, thin) = ramp_pair(6, 5, 10, 12);
        let cfg = TrainConfig { cube: (4, 4, 4), ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (lr, hr) = sample_pair(&thick, &thin, &cfg, 5, &mut rng).unwrap();
            for k in 0..4 {
                for i in 0..16 {
                    assert_eq!(hr.data()[5 * k * 16 + i], lr.data()[k * 16 + i]);
                }
            }
        }
        let too_big = TrainConfig { cube: (4, 11, 4), ..cfg };
        assert!(matches!(sample_pair(&thick, &thin, &too_big, 5, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_volumes_give_constant_cubes() {
        let thick = Volume::filled((5, 9, 9), Spacing::new(5.0, 1.0), Unit::Normalized, 0.3).unwrap();
        let thin = Volume::filled((21, 9, 9), Spacing::new(1.0, 1.0), Unit::Normalized, 0.3).unwrap();
        let cfg = TrainConfig { cube: (4, 8, 8), ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (lr, hr) = sample_pair(&thick, &thin, &cfg, 5, &mut rng).unwrap();
        assert!(lr.data().iter().chain(hr.data()).all(|&v| v == 0.3));
    }

    #[test]
    fn l1_examples() {
        let a = Tensor::<f32>::from_fn(&[2, 3, 3], |i| i as f32 * 0.1);
        assert_eq!(l1_value(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.5);
        assert!((l1_value(&b, &a).unwrap() - 0.5).abs() < 1e-6);
    }

    fn scalar_store(w: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(w));
        s
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [0.3f32, -7.0, 1e-3] {
            let mut store = scalar_store(1.0);
            let mut adam = Adam::new(&store, 1e-2, 0.9, 0.999, 1e-8);
            adam.step(&mut store, &[Tensor::scalar(g)]).unwrap();
            let dw = store.get(store.ids().next().unwrap()).data()[0] - 1.0;
            assert!((dw + 1e-2 * g.signum()).abs() < 1e-5, "{dw}");
        }
    }

    #[test]
    fn adam_zero_gradient_and_zero_lr() {
        let mut store = scalar_store(2.0);
        let mut adam = Adam::new(&store, 1e-2, 0.9, 0.999, 1e-8);
        adam.step(&mut store, &[Tensor::scalar(1.0)]).unwrap();
        let after_one = store.clone();
        let m1 = adam.m[0].data()[0];
        adam.step(&mut store, &[Tensor::scalar(0.0)]).unwrap();
        assert!(adam.m[0].data()[0].abs() < m1.abs());
        assert!(store != after_one);
        let mut frozen = scalar_store(2.0);
        let before = frozen.clone();
        let mut adam = Adam::new(&frozen, 0.0, 0.9, 0.999, 1e-8);
        adam.step(&mut frozen, &[Tensor::scalar(3.0)]).unwrap();
        assert_eq!(frozen, before);
        let mut store = scalar_store(2.0);
        let mut adam = Adam::new(&store, 1e-2, 0.9, 0.999, 1e-8);
        adam.step(&mut store, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(store, scalar_store(2.0));
    }

    fn tiny_trainer(seed: u64) -> Trainer {
        let mc = TvsrnConfig { channels: 2, n_enc: 2, scale: 5, depth: 4, variant: Variant::Full, ..TvsrnConfig::default() };
        let (p, s) = TvsrnParams::init(&mc, seed).unwrap();
        let cfg = TrainConfig { lr: 1e-3, cube: (4, 8, 8), steps: 4, seed, ..TrainConfig::default() };
        Trainer::new(p, s, cfg).unwrap()
    }

    #[test]
    fn shared_tab_layers_update_once() {
        let mut t = tiny_trainer(1);
        let pairs = vec![ramp_pair(5, 5, 10, 10)];
        let before = t.store.clone();
        t.step(&pairs).unwrap();
        let tab = t.params.fims[0].tab.as_ref().unwrap()[0].0.qkv_w;
        let delta: Vec<f32> =
            t.store.get(tab).data().iter().zip(before.get(tab).data()).map(|(a, b)| a - b).collect();
        assert!(delta.iter().any(|&d| d != 0.0));
        // A second update with the same gradients is the negative control:
        // it moves the tensor further than the single-update run.
        let mut doubled = before.clone();
        let mut adam = Adam::from_config(&doubled, &t.cfg);
        let mut rng = step_rng(t.cfg.seed, 0);
        let (thick, thin) = &pairs[rng.random_range(0..1)];
        let (lr, hr) = sample_pair(thick, thin, &t.cfg, 5, &mut rng).unwrap();
        let fresh = Trainer::new(t.params.clone(), before.clone(), t.cfg.clone()).unwrap();
        let (_, grads) = fresh.loss_and_grads(&lr, &hr).unwrap();
        adam.step(&mut doubled, &grads).unwrap();
        assert_eq!(doubled.get(tab), t.store.get(tab));
        let mut extra = Adam::from_config(&doubled, &t.cfg);
        extra.step(&mut doubled, &grads).unwrap();
        assert_ne!(doubled.get(tab), t.store.get(tab));
        assert_eq!(t.store.find("fims.0.tab.coronal.0.qkv.weight"), None);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let pairs = vec![ramp_pair(5, 5, 10, 10)];
        let mut a = tiny_trainer(3);
        a.train(&pairs, |_, _| {}, |_| Ok(())).unwrap();
        let mut b = tiny_trainer(3);
        b.cfg.steps = 2;
        b.train(&pairs, |_, _| {}, |_| Ok(())).unwrap();
        let saved = (b.params.clone(), b.store.clone(), b.state.clone());
        let mut cfg = b.cfg.clone();
        cfg.steps = 4;
        let mut c = Trainer::resume(saved.0, saved.1, cfg, saved.2).unwrap();
        c.train(&pairs, |_, _| {}, |_| Ok(())).unwrap();
        assert_eq!(a.state.losses, c.state.losses);
        assert_eq!(a.store, c.store);
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let mut t = tiny_trainer(0);
        t.store.get_mut(t.params.embed_w).data_mut()[0] = f32::NAN;
        let err = t.step(&[ramp_pair(5, 5, 10, 10)]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 0, .. }), "{err}");
        assert_eq!(t.state.step, 0);
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }
}
