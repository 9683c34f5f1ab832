//! Swin transformer layer (STL): windowed multi-head self-attention with a
//! learned relative position bias, pre-norm residual wiring and a GELU MLP.
//!
//! Tokens are laid out channels-last as `[B, Gy, Gx, c]`. A [`WindowPlan`]
//! precomputes how tokens map into `wy × wx` windows, including right/bottom
//! zero padding and the cyclic shift used by every second layer. Token pairs
//! that only share a shifted window because of wrap-around are masked with
//! `-inf` before the softmax.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var, ZERO_BLOCK};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StlConfig {
    pub channels: usize,
    /// Window extent along the (y, x) token axes.
    pub window: (usize, usize),
    pub heads: usize,
    pub mlp_ratio: f64,
    pub shifted: bool,
}

/// Default head count: one head per 16 channels, at least one.
pub fn default_heads(channels: usize) -> usize {
    heads_for(channels, 16)
}

/// `max(1, channels / per_head)`, lowered to the nearest divisor of
/// `channels` when it does not split evenly.
pub fn heads_for(channels: usize, per_head: usize) -> usize {
    let mut h = (channels / per_head.max(1)).max(1);
    while h > 1 && channels % h != 0 {
        h -= 1;
    }
    h
}

impl StlConfig {
    pub fn new(channels: usize, window: (usize, usize), shifted: bool) -> Self {
        Self { channels, window, heads: default_heads(channels), mlp_ratio: 4.0, shifted }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::config(format!(
                "{} channels cannot be split over {} heads",
                self.channels, self.heads
            )));
        }
        if self.window.0 == 0 || self.window.1 == 0 {
            return Err(Error::config("window extents must be positive"));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden() == 0 {
            return Err(Error::config(format!("mlp ratio {} gives no hidden units", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        libm::round(self.channels as f64 * self.mlp_ratio) as usize
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.0 * self.window.1
    }

    pub fn bias_rows(&self) -> usize {
        (2 * self.window.0 - 1) * (2 * self.window.1 - 1)
    }

    pub fn shift(&self) -> (usize, usize) {
        if self.shifted {
            (self.window.0 / 2, self.window.1 / 2)
        } else {
            (0, 0)
        }
    }

    /// Closed-form scalar count of one layer's parameters.
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let r = self.hidden();
        let qkv = 3 * c * c + 3 * c;
        let proj = c * c + c;
        let norms = 2 * 2 * c;
        let mlp = c * r + r + r * c + c;
        qkv + proj + norms + mlp + self.bias_rows() * self.heads
    }
}

/// Parameter handles of one STL.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StlParams {
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub norm1_g: ParamId,
    pub norm1_b: ParamId,
    pub norm2_g: ParamId,
    pub norm2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub rel_bias: ParamId,
}

impl StlParams {
    /// Registers a freshly initialized layer under `prefix`: truncated normal
    /// weights (σ = 0.02), zero biases and bias table, unit norm scales.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &StlConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let r = cfg.hidden();
        let name = |s: &str| -> String { format!("{prefix}.{s}") };
        Ok(Self {
            qkv_w: store.add(name("qkv.weight"), trunc_normal(&[c, 3 * c], INIT_STD, rng)),
            qkv_b: store.add(name("qkv.bias"), Tensor::zeros(&[3 * c])),
            proj_w: store.add(name("proj.weight"), trunc_normal(&[c, c], INIT_STD, rng)),
            proj_b: store.add(name("proj.bias"), Tensor::zeros(&[c])),
            norm1_g: store.add(name("norm1.weight"), Tensor::ones(&[c])),
            norm1_b: store.add(name("norm1.bias"), Tensor::zeros(&[c])),
            norm2_g: store.add(name("norm2.weight"), Tensor::ones(&[c])),
            norm2_b: store.add(name("norm2.bias"), Tensor::zeros(&[c])),
            fc1_w: store.add(name("mlp.fc1.weight"), trunc_normal(&[c, r], INIT_STD, rng)),
            fc1_b: store.add(name("mlp.fc1.bias"), Tensor::zeros(&[r])),
            fc2_w: store.add(name("mlp.fc2.weight"), trunc_normal(&[r, c], INIT_STD, rng)),
            fc2_b: store.add(name("mlp.fc2.bias"), Tensor::zeros(&[c])),
            rel_bias: store.add(name("rel_bias"), Tensor::zeros(&[cfg.bias_rows(), cfg.heads])),
        })
    }

    pub fn ids(&self) -> [ParamId; 13] {
        [
            self.qkv_w,
            self.qkv_b,
            self.proj_w,
            self.proj_b,
            self.norm1_g,
            self.norm1_b,
            self.norm2_g,
            self.norm2_b,
            self.fc1_w,
            self.fc1_b,
            self.fc2_w,
            self.fc2_b,
            self.rel_bias,
        ]
    }

    /// Number of stored scalars behind this layer's handles.
    pub fn count_params<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.ids().iter().map(|&id| store.get(id).len()).sum()
    }
}

/// Row of the relative-bias table for each ordered token pair of a window.
pub fn relative_index(window: (usize, usize)) -> Vec<u32> {
    let (wy, wx) = window;
    let t = wy * wx;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / wx, i % wx);
        for j in 0..t {
            let (yj, xj) = (j / wx, j % wx);
            let dy = yi + wy - 1 - yj;
            let dx = xi + wx - 1 - xj;
            idx.push((dy * (2 * wx - 1) + dx) as u32);
        }
    }
    idx
}

/// Geometry of one window partition of a `Gy × Gx` token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPlan {
    pub grid: (usize, usize),
    pub window: (usize, usize),
    pub shift: (usize, usize),
    pub padded: (usize, usize),
    /// For each window slot (window-major), the grid token it reads, or
    /// [`ZERO_BLOCK`] for padding.
    pub slots: Vec<u32>,
    /// For each grid token, the window slot that holds it.
    pub token_slot: Vec<u32>,
    /// Wrap-around region label per slot; only set when shifted.
    labels: Option<Vec<u8>>,
}

impl WindowPlan {
    pub fn new(grid: (usize, usize), window: (usize, usize), shift: (usize, usize)) -> Result<Self> {
        let (gy, gx) = grid;
        let (wy, wx) = window;
        if gy == 0 || gx == 0 || wy == 0 || wx == 0 {
            return Err(Error::dimension("window_plan", format!("grid {grid:?} window {window:?}")));
        }
        let py = gy.div_ceil(wy) * wy;
        let px = gx.div_ceil(wx) * wx;
        let (sy, sx) = (shift.0 % py, shift.1 % px);
        let (ny, nx) = (py / wy, px / wx);
        let t = wy * wx;
        let mut slots = vec![ZERO_BLOCK; ny * nx * t];
        let mut token_slot = vec![0u32; gy * gx];
        let shifted = sy != 0 || sx != 0;
        let mut labels = if shifted { Some(vec![0u8; ny * nx * t]) } else { None };
        for wi in 0..ny {
            for wj in 0..nx {
                for ty in 0..wy {
                    for tx in 0..wx {
                        let slot = ((wi * nx + wj) * t + ty * wx + tx) as usize;
                        let (yr, xr) = (wi * wy + ty, wj * wx + tx);
                        let (y, x) = ((yr + sy) % py, (xr + sx) % px);
                        if y < gy && x < gx {
                            slots[slot] = (y * gx + x) as u32;
                            token_slot[y * gx + x] = slot as u32;
                        }
                        if let Some(l) = labels.as_mut() {
                            let wrap_y = (yr + sy >= py) as u8;
                            let wrap_x = (xr + sx >= px) as u8;
                            l[slot] = wrap_y * 2 + wrap_x;
                        }
                    }
                }
            }
        }
        Ok(Self { grid, window, shift: (sy, sx), padded: (py, px), slots, token_slot, labels })
    }

    pub fn num_windows(&self) -> usize {
        (self.padded.0 / self.window.0) * (self.padded.1 / self.window.1)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.0 * self.window.1
    }

    /// Additive attention mask `[nW, T, T]`: zero where two slots come from
    /// the same side of every wrap boundary, `-inf` otherwise. `None` for
    /// unshifted plans.
    pub fn attention_mask<T: Scalar>(&self) -> Option<Tensor<T>> {
        let labels = self.labels.as_ref()?;
        let t = self.tokens_per_window();
        let nw = self.num_windows();
        let mut data = vec![T::zero(); nw * t * t];
        for w in 0..nw {
            let l = &labels[w * t..(w + 1) * t];
            for i in 0..t {
                for j in 0..t {
                    if l[i] != l[j] {
                        data[(w * t + i) * t + j] = T::neg_infinity();
                    }
                }
            }
        }
        Some(Tensor::from_vec(&[nw, t, t], data).unwrap())
    }
}

/// `[B, Gy, Gx, c]` → `[B·nW, wy·wx, c]`.
pub fn partition_windows<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, plan: &WindowPlan) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || (s[1], s[2]) != plan.grid {
        return Err(Error::dimension(
            "partition_windows",
            format!("tensor {s:?} does not match grid {:?}", plan.grid),
        ));
    }
    let (b, c) = (s[0], s[3]);
    let per = plan.grid.0 * plan.grid.1;
    let mut index = Vec::with_capacity(b * plan.slots.len());
    for bi in 0..b {
        index.extend(plan.slots.iter().map(|&i| if i == ZERO_BLOCK { i } else { i + (bi * per) as u32 }));
    }
    let t = plan.tokens_per_window();
    tape.gather(x, Arc::from(index), c, &[b * plan.num_windows(), t, c])
}

/// Inverse of [`partition_windows`]: `[B·nW, wy·wx, c]` → `[B, Gy, Gx, c]`,
/// dropping padding slots.
pub fn merge_windows<T: Scalar>(tape: &mut Tape<'_, T>, windows: Var, plan: &WindowPlan) -> Result<Var> {
    let s = tape.shape(windows).to_vec();
    let per = plan.slots.len();
    if s.len() != 3 || s[1] != plan.tokens_per_window() || (s[0] * s[1]) % per != 0 {
        return Err(Error::dimension(
            "merge_windows",
            format!("windows {s:?} do not match plan with {} windows", plan.num_windows()),
        ));
    }
    let b = s[0] * s[1] / per;
    let c = s[2];
    let mut index = Vec::with_capacity(b * plan.token_slot.len());
    for bi in 0..b {
        index.extend(plan.token_slot.iter().map(|&k| k + (bi * per) as u32));
    }
    tape.gather(windows, Arc::from(index), c, &[b, plan.grid.0, plan.grid.1, c])
}

/// Multi-head attention inside each window. Returns the projected output and
/// the attention weights `[B·nW, h, T, T]`.
pub fn window_attention_with_weights<T: Scalar>(
    tape: &mut Tape<'_, T>,
    tokens: Var,
    params: &StlParams,
    cfg: &StlConfig,
    mask: Option<&Tensor<T>>,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let s = tape.shape(tokens).to_vec();
    let (c, h) = (cfg.channels, cfg.heads);
    let t = cfg.tokens_per_window();
    if s.len() != 3 || s[1] != t || s[2] != c {
        return Err(Error::dimension(
            "window_attention",
            format!("tokens {s:?} do not match window {:?} with {c} channels", cfg.window),
        ));
    }
    let bw = s[0];
    let d = cfg.head_dim();

    let (qw, qb) = (tape.param(params.qkv_w), tape.param(params.qkv_b));
    let qkv = tape.linear(tokens, qw, Some(qb))?;
    let qkv = tape.reshape(qkv, &[bw, t, 3, h, d])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let pick = |tape: &mut Tape<'_, T>, k: usize| -> Result<Var> {
        let part = tape.slice(qkv, 0, k, 1)?;
        tape.reshape(part, &[bw, h, t, d])
    };
    let q = pick(tape, 0)?;
    let k = pick(tape, 1)?;
    let v = pick(tape, 2)?;
    let q = tape.scale(q, T::one() / T::of(d as f64).sqrt());
    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let mut logits = tape.matmul(q, kt)?;

    let table = tape.param(params.rel_bias);
    let rel = relative_index(cfg.window);
    let mut bias_index = Vec::with_capacity(h * t * t);
    for head in 0..h {
        bias_index.extend(rel.iter().map(|&r| r * h as u32 + head as u32));
    }
    let bias = tape.gather(table, Arc::from(bias_index), 1, &[h, t, t])?;

    match mask {
        Some(m) => {
            let nw = m.shape()[0];
            if m.shape() != [nw, t, t] || bw % nw != 0 {
                return Err(Error::dimension(
                    "window_attention",
                    format!("mask {:?} does not fit {bw} windows of {t} tokens", m.shape()),
                ));
            }
            let mut expanded = Vec::with_capacity(nw * h * t * t);
            for w in 0..nw {
                let plane = &m.data()[w * t * t..(w + 1) * t * t];
                for _ in 0..h {
                    expanded.extend_from_slice(plane);
                }
            }
            let mask = tape.constant(Tensor::from_vec(&[nw, h, t, t], expanded)?);
            let combined = tape.add_suffix(mask, bias)?;
            let grouped = tape.reshape(logits, &[bw / nw, nw, h, t, t])?;
            let grouped = tape.add_suffix(grouped, combined)?;
            logits = tape.reshape(grouped, &[bw, h, t, t])?;
        }
        None => logits = tape.add_suffix(logits, bias)?,
    }
    let attn = tape.softmax(logits);
    let out = tape.matmul(attn, v)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[bw, t, c])?;
    let (pw, pb) = (tape.param(params.proj_w), tape.param(params.proj_b));
    let out = tape.linear(out, pw, Some(pb))?;
    Ok((out, attn))
}

pub fn window_attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    tokens: Var,
    params: &StlParams,
    cfg: &StlConfig,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    window_attention_with_weights(tape, tokens, params, cfg, mask).map(|(out, _)| out)
}

/// One STL over `[B, Gy, Gx, c]`:
/// `x + Attn(LN(x))`, then `· + MLP(LN(·))`.
pub fn stl_forward<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, params: &StlParams, cfg: &StlConfig) -> Result<Var> {
    cfg.validate()?;
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[3] != cfg.channels {
        return Err(Error::dimension(
            "stl_forward",
            format!("input {s:?} is not [B, Gy, Gx, {}]", cfg.channels),
        ));
    }
    let plan = WindowPlan::new((s[1], s[2]), cfg.window, cfg.shift())?;
    let mask = plan.attention_mask::<T>();

    let (g1, b1) = (tape.param(params.norm1_g), tape.param(params.norm1_b));
    let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
    let windows = partition_windows(tape, h, &plan)?;
    let attended = window_attention(tape, windows, params, cfg, mask.as_ref())?;
    let merged = merge_windows(tape, attended, &plan)?;
    let x = tape.add(x, merged)?;

    let (g2, b2) = (tape.param(params.norm2_g), tape.param(params.norm2_b));
    let h = tape.layer_norm(x, g2, b2, LN_EPS)?;
    let (w1, bb1) = (tape.param(params.fc1_w), tape.param(params.fc1_b));
    let h = tape.linear(h, w1, Some(bb1))?;
    let h = tape.gelu(h);
    let (w2, bb2) = (tape.param(params.fc2_w), tape.param(params.fc2_b));
    let h = tape.linear(h, w2, Some(bb2))?;
    tape.add(x, h)
}

/// Registers `n` layers alternating regular and shifted windows.
pub fn init_stack<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    n: usize,
    channels: usize,
    window: (usize, usize),
    heads: usize,
    mlp_ratio: f64,
    rng: &mut R,
) -> Result<Vec<(StlParams, StlConfig)>> {
    (0..n)
        .map(|i| {
            let cfg = StlConfig { channels, window, heads, mlp_ratio, shifted: i % 2 == 1 };
            StlParams::init(store, &format!("{prefix}.{i}"), &cfg, rng).map(|p| (p, cfg))
        })
        .collect()
}

/// Runs a stack built by [`init_stack`].
pub fn stack_forward<T: Scalar>(tape: &mut Tape<'_, T>, mut x: Var, stack: &[(StlParams, StlConfig)]) -> Result<Var> {
    for (p, cfg) in stack {
        x = stl_forward(tape, x, p, cfg)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn head_counts() {
        assert_eq!(default_heads(32), 2);
        assert_eq!(default_heads(128), 8);
        assert_eq!(default_heads(8), 1);
        assert_eq!(default_heads(39), 1);
        assert_eq!(heads_for(60, 16), 3);
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn window_counts() {
        let p = WindowPlan::new((16, 16), (8, 8), (0, 0)).unwrap();
        assert_eq!(p.num_windows(), 4);
        assert_eq!(p.tokens_per_window(), 64);
        let p = WindowPlan::new((16, 16), (8, 8), (4, 4)).unwrap();
        assert_eq!(p.num_windows(), 4);
        assert!(p.attention_mask::<f32>().is_some());
        let p = WindowPlan::new((10, 10), (8, 8), (0, 0)).unwrap();
        assert_eq!(p.padded, (16, 16));
        assert_eq!(p.num_windows(), 4);
    }

    #[test]
    fn every_token_in_exactly_one_window() {
        for &(grid, shift) in &[((16, 16), (0, 0)), ((10, 12), (4, 4)), ((3, 9), (2, 4))] {
            let p = WindowPlan::new(grid, (4, 8), shift).unwrap();
            let mut seen = vec![0; grid.0 * grid.1];
            for &s in &p.slots {
                if s != ZERO_BLOCK {
                    seen[s as usize] += 1;
                }
            }
            assert!(seen.iter().all(|&n| n == 1), "{grid:?} {shift:?}");
        }
    }

    #[test]
    fn relative_index_covers_table() {
        let idx = relative_index((4, 8));
        let mut hit = vec![false; 7 * 15];
        for &i in &idx {
            hit[i as usize] = true;
        }
        assert!(hit.iter().all(|&h| h));
        // Diagonal maps to the zero offset row.
        assert_eq!(idx[0], (3 * 15 + 7) as u32);
    }

    #[test]
    fn single_token_window_attends_to_itself() {
        let cfg = StlConfig::new(4, (1, 1), false);
        let mut store = ParamStore::<f64>::new();
        let p = StlParams::init(&mut store, "l", &cfg, &mut rng()).unwrap();
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::from_fn(&[3, 1, 4], |i| i as f64 * 0.1));
        let (out, attn) = window_attention_with_weights(&mut tape, x, &p, &cfg, None).unwrap();
        assert!(tape.value(attn).data().iter().all(|&w| w == 1.0));
        // proj(v) computed by hand.
        let xv = tape.value(x).clone();
        let qkv = store.get(p.qkv_w);
        let pw = store.get(p.proj_w);
        for b in 0..3 {
            let mut v = [0.0; 4];
            for j in 0..4 {
                for i in 0..4 {
                    v[j] += xv.data()[b * 4 + i] * qkv.data()[i * 12 + 8 + j];
                }
            }
            for j in 0..4 {
                let e: f64 = (0..4).map(|i| v[i] * pw.data()[i * 4 + j]).sum();
                assert!((tape.value(out).data()[b * 4 + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_qkv_gives_uniform_attention() {
        let cfg = StlConfig::new(4, (2, 2), false);
        let mut store = ParamStore::<f64>::new();
        let p = StlParams::init(&mut store, "l", &cfg, &mut rng()).unwrap();
        *store.get_mut(p.qkv_w) = Tensor::zeros(&[4, 12]);
        *store.get_mut(p.qkv_b) = Tensor::from_fn(&[12], |i| i as f64);
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::from_fn(&[2, 4, 4], |i| (i as f64).sin()));
        let (out, attn) = window_attention_with_weights(&mut tape, x, &p, &cfg, None).unwrap();
        assert!(tape.value(attn).data().iter().all(|&w| (w - 0.25).abs() < 1e-15));
        // v rows are all the bias slice [8..12]; output is proj of that.
        let pw = store.get(p.proj_w);
        let o = tape.value(out).data();
        for row in 0..8 {
            for j in 0..4 {
                let e: f64 = (0..4).map(|i| (8 + i) as f64 * pw.data()[i * 4 + j]).sum();
                assert!((o[row * 4 + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_pairs_get_no_weight() {
        let cfg = StlConfig::new(2, (2, 2), false);
        let mut store = ParamStore::<f64>::new();
        let p = StlParams::init(&mut store, "l", &cfg, &mut rng()).unwrap();
        let mut mask = Tensor::<f64>::zeros(&[1, 4, 4]);
        mask.data_mut()[1] = f64::NEG_INFINITY;
        let mut tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::from_fn(&[1, 4, 2], |i| i as f64));
        let (_, attn) = window_attention_with_weights(&mut tape, x, &p, &cfg, Some(&mask)).unwrap();
        let a = tape.value(attn).data();
        assert!(a[1] < 1e-6);
        for row in a.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_head_mismatch() {
        let cfg = StlConfig { channels: 6, window: (2, 2), heads: 4, mlp_ratio: 4.0, shifted: false };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn stl_preserves_shape() {
        for &(gy, gx) in &[(8, 8), (16, 16), (10, 12)] {
            for shifted in [false, true] {
                let cfg = StlConfig::new(8, (8, 8), shifted);
                let mut store = ParamStore::<f32>::new();
                let p = StlParams::init(&mut store, "l", &cfg, &mut rng()).unwrap();
                let mut tape = Tape::with_params(&store);
                let x = tape.constant(Tensor::from_fn(&[2, gy, gx, 8], |i| (i as f32 * 0.01).cos()));
                let y = stl_forward(&mut tape, x, &p, &cfg).unwrap();
                assert_eq!(tape.shape(y), &[2, gy, gx, 8]);
            }
        }
    }

    #[test]
    fn parameter_count_matches_storage() {
        let cfg = StlConfig { channels: 8, window: (4, 8), heads: 1, mlp_ratio: 4.0, shifted: false };
        let mut store = ParamStore::<f32>::new();
        let p = StlParams::init(&mut store, "l", &cfg, &mut rng()).unwrap();
        assert_eq!(cfg.param_count(), p.count_params(&store));
        assert_eq!(store.scalar_count(), p.count_params(&store));
    }
}
