//! The TVSRN network.
//!
//! ```text
//! x [1, D, H, W]
//!   → Linear Embedding (1 → C per voxel)          F_s [C, D, H, W]
//!   → reshape to C·D channels over the (H, W) grid, N STLs, reshape back
//!   → insert mask tokens at missing depths        X_d [C, D', H, W]
//!   → M × FIM: TAB, then 4 axial STLs over C·D' channels
//!   → Linear Projection (C → 1 per voxel)         Ŷ  [D', H, W]
//! ```
//!
//! with `D' = (D − 1)·scale + 1`. The TAB runs the same four STLs on a
//! sagittal view (batch over W, grid (D', H)) and a coronal view (batch over
//! H, grid (D', W)) and adds both back onto its input.
//!
//! Two ablations are selectable through [`Variant`]: `NoTab` drops the TAB
//! from every FIM; `EncoderOnly` drops the decoder and upsamples the encoder
//! output with a pointwise linear map followed by [`subpixel_depth`].

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, uniform, ParamId, ParamStore};
use crate::swin::{init_stack, stack_forward, StlConfig, StlParams};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoTab,
    EncoderOnly,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTab => "no_tab",
            Variant::EncoderOnly => "encoder_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Variant::Full),
            "no_tab" => Some(Variant::NoTab),
            "encoder_only" => Some(Variant::EncoderOnly),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TvsrnConfig {
    /// Embedding channels C.
    pub channels: usize,
    /// Encoder STL count N.
    pub n_enc: usize,
    /// Feature Interaction Module count M.
    pub m_fim: usize,
    /// Through-plane upsampling factor.
    pub scale: usize,
    /// Input (thick) depth D.
    pub depth: usize,
    pub window_xy: usize,
    pub window_z: usize,
    pub mlp_ratio: f64,
    /// Channels per attention head; heads = max(1, channels / head_channels),
    /// lowered to a divisor of the channel count.
    pub head_channels: usize,
    pub variant: Variant,
}

impl Default for TvsrnConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            n_enc: 4,
            m_fim: 1,
            scale: 5,
            depth: 4,
            window_xy: 8,
            window_z: 4,
            mlp_ratio: 4.0,
            head_channels: 16,
            variant: Variant::Full,
        }
    }
}

impl TvsrnConfig {
    /// Defaults for a variant. The encoder-only ablation widens the encoder
    /// to N = 8, C = 32.
    pub fn for_variant(variant: Variant) -> Self {
        let base = Self { variant, ..Self::default() };
        match variant {
            Variant::EncoderOnly => Self { n_enc: 8, channels: 32, ..base },
            _ => base,
        }
    }

    pub fn out_depth(&self) -> usize {
        (self.depth - 1) * self.scale + 1
    }

    pub fn heads(&self, channels: usize) -> usize {
        crate::swin::heads_for(channels, self.head_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("channels must be positive"));
        }
        if self.n_enc == 0 || self.n_enc % 2 != 0 {
            return Err(Error::config(format!(
                "encoder STL count {} must be a positive even number (regular/shifted pairs)",
                self.n_enc
            )));
        }
        if self.scale < 2 {
            return Err(Error::config(format!("scale {} must be at least 2", self.scale)));
        }
        if self.depth < 2 {
            return Err(Error::config(format!("input depth {} must be at least 2", self.depth)));
        }
        if self.window_xy == 0 || self.window_z == 0 {
            return Err(Error::config("window extents must be positive"));
        }
        if self.variant != Variant::EncoderOnly && self.m_fim == 0 {
            return Err(Error::config("decoder needs at least one FIM"));
        }
        Ok(())
    }

    fn stl(&self, channels: usize, window: (usize, usize), shifted: bool) -> StlConfig {
        StlConfig { channels, window, heads: self.heads(channels), mlp_ratio: self.mlp_ratio, shifted }
    }

    fn encoder_stl(&self) -> StlConfig {
        self.stl(self.channels * self.depth, (self.window_xy, self.window_xy), false)
    }

    fn tab_stl(&self) -> StlConfig {
        self.stl(self.channels, (self.window_z, self.window_xy), false)
    }

    fn axial_stl(&self) -> StlConfig {
        self.stl(self.channels * self.out_depth(), (self.window_xy, self.window_xy), false)
    }

    /// Parameter counts per block, derived from the configuration alone.
    pub fn param_summary(&self) -> Vec<(String, usize)> {
        let c = self.channels;
        let mut rows = vec![(String::from("embed"), 2 * c)];
        rows.push((String::from("encoder"), self.n_enc * self.encoder_stl().param_count()));
        match self.variant {
            Variant::EncoderOnly => {
                rows.push((String::from("upsample"), c * self.scale + self.scale));
            }
            _ => {
                rows.push((String::from("mask_tokens"), (self.scale - 1) * c));
                for m in 0..self.m_fim {
                    if self.variant == Variant::Full {
                        rows.push((format!("fim{m}.tab"), 4 * self.tab_stl().param_count()));
                    }
                    rows.push((format!("fim{m}.axial"), 4 * self.axial_stl().param_count()));
                }
                rows.push((String::from("projection"), c + 1));
            }
        }
        rows
    }

    pub fn param_count(&self) -> usize {
        self.param_summary().iter().map(|(_, n)| n).sum()
    }
}

pub type Stack = Vec<(StlParams, StlConfig)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Fim {
    /// Four STLs shared by the sagittal and coronal branches.
    pub tab: Option<Stack>,
    pub axial: Stack,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Projection { w: ParamId, b: ParamId },
    Upsample { w: ParamId, b: ParamId },
}

/// Parameter layout of a TVSRN instance.
#[derive(Clone, Debug, PartialEq)]
pub struct TvsrnParams {
    pub config: TvsrnConfig,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub encoder: Stack,
    pub mask_tokens: Option<ParamId>,
    pub fims: Vec<Fim>,
    pub head: Head,
}

fn linear_default<T: Scalar, R: rand::Rng>(fan_in: usize, shape: &[usize], rng: &mut R) -> Tensor<T> {
    uniform(shape, 1.0 / libm::sqrt(fan_in as f64), rng)
}

impl TvsrnParams {
    /// Builds the layout and a freshly initialized store.
    pub fn init<T: Scalar>(config: &TvsrnConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let embed_w = store.add("embed.weight", linear_default(1, &[1, c], &mut rng));
        let embed_b = store.add("embed.bias", linear_default(1, &[c], &mut rng));
        let enc_cfg = config.encoder_stl();
        let encoder = init_stack(
            &mut store,
            "encoder",
            config.n_enc,
            enc_cfg.channels,
            enc_cfg.window,
            enc_cfg.heads,
            config.mlp_ratio,
            &mut rng,
        )?;
        let (mask_tokens, fims, head) = if config.variant == Variant::EncoderOnly {
            let s = config.scale;
            let w = store.add("upsample.weight", linear_default(c, &[c, s], &mut rng));
            let b = store.add("upsample.bias", linear_default(c, &[s], &mut rng));
            (None, Vec::new(), Head::Upsample { w, b })
        } else {
            let tokens = store.add("mask_tokens", trunc_normal(&[config.scale - 1, c], 0.02, &mut rng));
            let mut fims = Vec::with_capacity(config.m_fim);
            for m in 0..config.m_fim {
                let tab = if config.variant == Variant::Full {
                    let t = config.tab_stl();
                    Some(init_stack(
                        &mut store,
                        &format!("fims.{m}.tab.sagittal"),
                        4,
                        t.channels,
                        t.window,
                        t.heads,
                        config.mlp_ratio,
                        &mut rng,
                    )?)
                } else {
                    None
                };
                let a = config.axial_stl();
                let axial = init_stack(
                    &mut store,
                    &format!("fims.{m}.axial"),
                    4,
                    a.channels,
                    a.window,
                    a.heads,
                    config.mlp_ratio,
                    &mut rng,
                )?;
                fims.push(Fim { tab, axial });
            }
            let w = store.add("proj.weight", linear_default(c, &[c, 1], &mut rng));
            let b = store.add("proj.bias", linear_default(c, &[1], &mut rng));
            (Some(tokens), fims, Head::Projection { w, b })
        };
        let params = Self { config: config.clone(), embed_w, embed_b, encoder, mask_tokens, fims, head };
        debug_assert_eq!(store.scalar_count(), config.param_count());
        Ok((params, store))
    }

    /// Every parameter handle exactly once (shared TAB layers included once).
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed_w, self.embed_b];
        let stack_ids = |s: &Stack, ids: &mut Vec<ParamId>| {
            for (p, _) in s {
                ids.extend_from_slice(&p.ids());
            }
        };
        stack_ids(&self.encoder, &mut ids);
        ids.extend(self.mask_tokens);
        for f in &self.fims {
            if let Some(t) = &f.tab {
                stack_ids(t, &mut ids);
            }
            stack_ids(&f.axial, &mut ids);
        }
        match self.head {
            Head::Projection { w, b } | Head::Upsample { w, b } => ids.extend_from_slice(&[w, b]),
        }
        ids
    }

    /// Sum of stored scalars over every parameter leaf.
    pub fn count_params_total<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.ids().iter().map(|&id| store.get(id).len()).sum()
    }
}

fn expect_shape(op: &'static str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::Dimension { op, detail: format!("expected {want:?}, got {got:?}") });
    }
    Ok(())
}

/// `[1, D, H, W]` → `[C, D, H, W]`.
pub fn encode<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, params: &TvsrnParams) -> Result<Var> {
    let cfg = &params.config;
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[0] != 1 || s[1] != cfg.depth {
        return Err(Error::dimension(
            "encode",
            format!("input {s:?} is not [1, {}, H, W]", cfg.depth),
        ));
    }
    let (d, h, w, c) = (s[1], s[2], s[3], cfg.channels);
    let x = tape.reshape(x, &[d, h, w, 1])?;
    let (ew, eb) = (tape.param(params.embed_w), tape.param(params.embed_b));
    let fs = tape.linear(x, ew, Some(eb))?;
    let f0 = tape.permute(fs, &[1, 2, 3, 0])?;
    let f0 = tape.reshape(f0, &[1, h, w, c * d])?;
    let fnn = stack_forward(tape, f0, &params.encoder)?;
    let out = tape.reshape(fnn, &[h, w, c, d])?;
    tape.permute(out, &[2, 3, 0, 1])
}

/// `[C, D, H, W]` → `[C, D', H, W]`: encoder slice `k` lands on depth
/// `k·scale`; depth offset `o ∈ 1..scale` between them carries mask token `o`.
pub fn insert_mask_tokens<T: Scalar>(tape: &mut Tape<'_, T>, enc: Var, params: &TvsrnParams) -> Result<Var> {
    let cfg = &params.config;
    let tokens = params
        .mask_tokens
        .ok_or_else(|| Error::config("variant has no mask tokens"))?;
    let s = tape.shape(enc).to_vec();
    if s.len() != 4 || s[0] != cfg.channels || s[1] < 2 {
        return Err(Error::dimension("insert_mask_tokens", format!("encoder output {s:?}")));
    }
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let scale = cfg.scale;
    let dp = (d - 1) * scale + 1;
    let hw = h * w;
    let flat_enc = tape.reshape(enc, &[c * d * hw])?;
    let tok = tape.param(tokens);
    let flat_tok = tape.reshape(tok, &[(scale - 1) * c])?;
    let src = tape.concat(&[flat_enc, flat_tok], 0)?;
    let base = c * d * hw;
    let mut index = Vec::with_capacity(c * dp * hw);
    for ch in 0..c {
        for z in 0..dp {
            let off = z % scale;
            if off == 0 {
                let start = (ch * d + z / scale) * hw;
                index.extend((start..start + hw).map(|i| i as u32));
            } else {
                let t = (base + (off - 1) * c + ch) as u32;
                index.extend(core::iter::repeat(t).take(hw));
            }
        }
    }
    tape.gather(src, Arc::from(index), 1, &[c, dp, h, w])
}

const SAGITTAL: [usize; 4] = [3, 1, 2, 0];
const CORONAL: [usize; 4] = [2, 1, 3, 0];

/// Sagittal view `[W, D', H, C]` of a `[C, D', H, W]` feature map.
pub fn to_sagittal<T: Scalar>(tape: &mut Tape<'_, T>, z: Var) -> Result<Var> {
    tape.permute(z, &SAGITTAL)
}

/// Coronal view `[H, D', W, C]` of a `[C, D', H, W]` feature map.
pub fn to_coronal<T: Scalar>(tape: &mut Tape<'_, T>, z: Var) -> Result<Var> {
    tape.permute(z, &CORONAL)
}

pub fn from_sagittal<T: Scalar>(tape: &mut Tape<'_, T>, v: Var) -> Result<Var> {
    tape.permute(v, &crate::tensor::inverse_permutation(&SAGITTAL))
}

pub fn from_coronal<T: Scalar>(tape: &mut Tape<'_, T>, v: Var) -> Result<Var> {
    tape.permute(v, &crate::tensor::inverse_permutation(&CORONAL))
}

/// Through-plane Attention Block: `z + P_re^sag(b_sag) + P_re^cor(b_cor)` with
/// one set of four STLs serving both branches. Each branch contributes what
/// its STL stack adds to the permuted input, `STL⁴(P z) − P z`, so a TAB with
/// all-zero weights is the identity.
pub fn tab_forward<T: Scalar>(tape: &mut Tape<'_, T>, z: Var, tab: &[(StlParams, StlConfig)]) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    if s.len() != 4 {
        return Err(Error::dimension("tab_forward", format!("input {s:?} is not [C, D', H, W]")));
    }
    let sag0 = to_sagittal(tape, z)?;
    let sag = stack_forward(tape, sag0, tab)?;
    let sag = tape.sub(sag, sag0)?;
    let sag = from_sagittal(tape, sag)?;
    let cor0 = to_coronal(tape, z)?;
    let cor = stack_forward(tape, cor0, tab)?;
    let cor = tape.sub(cor, cor0)?;
    let cor = from_coronal(tape, cor)?;
    let out = tape.add(z, sag)?;
    tape.add(out, cor)
}

/// M Feature Interaction Modules over `[C, D', H, W]`.
pub fn decode<T: Scalar>(tape: &mut Tape<'_, T>, mut x: Var, params: &TvsrnParams) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let cfg = &params.config;
    if s.len() != 4 || s[0] != cfg.channels {
        return Err(Error::dimension("decode", format!("input {s:?}")));
    }
    let (c, dp, h, w) = (s[0], s[1], s[2], s[3]);
    for fim in &params.fims {
        if let Some(tab) = &fim.tab {
            x = tab_forward(tape, x, tab)?;
        }
        let a = tape.permute(x, &[2, 3, 0, 1])?;
        let a = tape.reshape(a, &[1, h, w, c * dp])?;
        let a = stack_forward(tape, a, &fim.axial)?;
        let a = tape.reshape(a, &[h, w, c, dp])?;
        x = tape.permute(a, &[2, 3, 0, 1])?;
    }
    Ok(x)
}

/// Channel-to-depth rearrangement without trimming:
/// `[C·s, D, H, W]` → `[C, D·s, H, W]`, channel `k·s + r` at depth `d` going
/// to depth `d·s + r`.
pub fn depth_shuffle<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, scale: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::dimension("depth_shuffle", format!("input {s:?} is not [C, D, H, W]")));
    }
    if scale == 0 || s[0] % scale != 0 {
        return Err(Error::config(format!("{} channels not divisible by scale {scale}", s[0])));
    }
    let (cin, d, h, w) = (s[0], s[1], s[2], s[3]);
    let cout = cin / scale;
    let mut index = Vec::with_capacity(cout * d * scale);
    for k in 0..cout {
        for z in 0..d * scale {
            let (src_d, r) = (z / scale, z % scale);
            index.push(((k * scale + r) * d + src_d) as u32);
        }
    }
    tape.gather(x, Arc::from(index), h * w, &[cout, d * scale, h, w])
}

/// [`depth_shuffle`] followed by trimming the trailing `scale − 1` depths, so
/// the output depth is `(D − 1)·scale + 1`.
pub fn subpixel_depth<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, scale: usize) -> Result<Var> {
    let shuffled = depth_shuffle(tape, x, scale)?;
    let d = tape.shape(x)[1];
    tape.slice(shuffled, 1, 0, (d - 1) * scale + 1)
}

/// `[1, D, H, W]` → `[D', H, W]`.
pub fn forward<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, params: &TvsrnParams) -> Result<Var> {
    let cfg = &params.config;
    let enc = encode(tape, x, params)?;
    let (c, d, h, w) = {
        let s = tape.shape(enc);
        (s[0], s[1], s[2], s[3])
    };
    let dp = cfg.out_depth();
    let y = match params.head {
        Head::Upsample { w: uw, b: ub } => {
            let e = tape.permute(enc, &[1, 2, 3, 0])?;
            let (uw, ub) = (tape.param(uw), tape.param(ub));
            let up = tape.linear(e, uw, Some(ub))?;
            let up = tape.permute(up, &[3, 0, 1, 2])?;
            let y = subpixel_depth(tape, up, cfg.scale)?;
            tape.reshape(y, &[dp, h, w])?
        }
        Head::Projection { w: pw, b: pb } => {
            let z = insert_mask_tokens(tape, enc, params)?;
            let z = decode(tape, z, params)?;
            let z = tape.permute(z, &[1, 2, 3, 0])?;
            let (pw, pb) = (tape.param(pw), tape.param(pb));
            let y = tape.linear(z, pw, Some(pb))?;
            tape.reshape(y, &[dp, h, w])?
        }
    };
    debug_assert_eq!(c, cfg.channels);
    debug_assert_eq!(d, cfg.depth);
    expect_shape("forward", tape.shape(y), &[dp, h, w])?;
    Ok(y)
}

/// Single forward pass on a plain tensor.
pub fn predict<T: Scalar>(store: &ParamStore<T>, params: &TvsrnParams, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::with_params(store);
    let xv = tape.constant(x.clone());
    let y = forward(&mut tape, xv, params)?;
    Ok(tape.value(y).clone())
}
