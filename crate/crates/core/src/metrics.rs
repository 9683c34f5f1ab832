//! PSNR, SSIM, the one-sided Wilcoxon signed-rank test and slice-pair
//! analysis.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::volume::{Unit, Volume};

fn same_dims(op: &'static str, a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dimension(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `10·log10(max² / MSE)`; `+∞` when the inputs are identical.
pub fn psnr_slices(a: &[f32], b: &[f32], max_val: f64) -> f64 {
    let se: f64 = a.iter().zip(b).map(|(&x, &y)| {
        let d = x as f64 - y as f64;
        d * d
    }).sum();
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * libm::log10(max_val * max_val / mse)
    }
}

/// PSNR over every voxel.
pub fn psnr(a: &Volume, b: &Volume, max_val: f64) -> Result<f64> {
    same_dims("psnr", a, b)?;
    Ok(psnr_slices(a.voxels(), b.voxels(), max_val))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as i32;
    for (i, t) in k.iter_mut().enumerate() {
        let x = (i as i32 - r) as f64;
        *t = libm::exp(-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|t| *t /= s);
    k
}

/// Index into `0..n` under half-sample symmetric reflection
/// (`… b a | a b c … | c b …`).
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

fn filter2d(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * x[y * w + reflect(xx as isize + k as isize - r, w)];
            }
            rows[y * w + xx] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * rows[reflect(y as isize + k as isize - r, h) * w + xx];
            }
            out[y * w + xx] = acc;
        }
    }
    out
}

/// Mean SSIM of one `h × w` slice pair (dynamic range 1).
pub fn ssim_slice(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!("SSIM needs slices of at least 11×11, got {h}×{w}")));
    }
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::dimension("ssim", format!("slice buffers do not match {h}×{w}")));
    }
    let taps = ssim_taps();
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter2d(&a, h, w, &taps);
    let mu_b = filter2d(&b, h, w, &taps);
    let aa = filter2d(&prod(&a, &a), h, w, &taps);
    let bb = filter2d(&prod(&b, &b), h, w, &taps);
    let ab = filter2d(&prod(&a, &b), h, w, &taps);
    let mut total = 0.0;
    for i in 0..h * w {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        total += num / den;
    }
    Ok(total / (h * w) as f64)
}

/// Mean over axial slices of the per-slice SSIM.
pub fn ssim(a: &Volume, b: &Volume) -> Result<f64> {
    same_dims("ssim", a, b)?;
    let (d, h, w) = a.dims();
    let mut s = 0.0;
    for z in 0..d {
        s += ssim_slice(a.axial(z), b.axial(z), h, w)?;
    }
    Ok(s / d as f64)
}

/// Ranks of `|x|` starting at 1, ties sharing the mean rank.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].abs().total_cmp(&values[j].abs()));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]].abs() == values[order[i]].abs() {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Largest sample handled by exact enumeration.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Null distribution of `W+` for the given ranks: `(w, probability)` for
/// every reachable value, ascending. Ranks may be half-integers.
pub fn wilcoxon_exact_distribution(ranks: &[f64]) -> Vec<(f64, f64)> {
    let doubled: Vec<usize> = ranks.iter().map(|&r| libm::round(2.0 * r) as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let total = libm::pow(2.0, ranks.len() as f64);
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0.0)
        .map(|(s, &c)| (s as f64 / 2.0, c / total))
        .collect()
}

fn nonzero(diffs: &[f64]) -> Result<Vec<f64>> {
    let d: Vec<f64> = diffs.iter().copied().filter(|&x| x != 0.0).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::UndefinedTest(String::from("differences must be finite")));
    }
    if d.is_empty() {
        return Err(Error::UndefinedTest(String::from("all differences are zero")));
    }
    if d.len() < 5 {
        return Err(Error::UndefinedTest(format!("{} non-zero differences; at least 5 needed", d.len())));
    }
    Ok(d)
}

fn w_plus(d: &[f64], ranks: &[f64]) -> f64 {
    d.iter().zip(ranks).filter(|(&x, _)| x > 0.0).map(|(_, &r)| r).sum()
}

/// Exact one-sided p-value `P(W+ ≥ observed)`.
pub fn wilcoxon_exact(diffs: &[f64]) -> Result<f64> {
    let d = nonzero(diffs)?;
    let ranks = mid_ranks(&d);
    let w = w_plus(&d, &ranks);
    Ok(wilcoxon_exact_distribution(&ranks)
        .iter()
        .filter(|(v, _)| *v >= w - 1e-9)
        .map(|(_, p)| p)
        .sum::<f64>()
        .min(1.0))
}

/// Normal approximation with tie and continuity correction.
pub fn wilcoxon_normal(diffs: &[f64]) -> Result<f64> {
    let d = nonzero(diffs)?;
    let ranks = mid_ranks(&d);
    let w = w_plus(&d, &ranks);
    let n = d.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie / 48.0;
    if var <= 0.0 {
        return Err(Error::UndefinedTest(String::from("zero variance")));
    }
    let z = (w - mean - 0.5) / libm::sqrt(var);
    Ok(0.5 * libm::erfc(z / core::f64::consts::SQRT_2))
}

/// One-sided Wilcoxon signed-rank test of `median(diffs) > 0`: exact up to
/// 25 non-zero differences, normal approximation beyond.
pub fn wilcoxon_one_sided(diffs: &[f64]) -> Result<f64> {
    let n = nonzero(diffs)?.len();
    if n <= WILCOXON_EXACT_MAX {
        wilcoxon_exact(diffs)
    } else {
        wilcoxon_normal(diffs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairCategory {
    Match,
    Near,
    Far,
}

impl PairCategory {
    pub fn offset(self) -> usize {
        match self {
            PairCategory::Match => 0,
            PairCategory::Near => 1,
            PairCategory::Far => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PairCategory::Match => "match",
            PairCategory::Near => "near",
            PairCategory::Far => "far",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryScore {
    pub category: PairCategory,
    pub pairs: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlicePairTable {
    pub rows: Vec<CategoryScore>,
    /// Categories left out, with the reason.
    pub omitted: Vec<(PairCategory, String)>,
}

impl SlicePairTable {
    pub fn get(&self, c: PairCategory) -> Option<&CategoryScore> {
        self.rows.iter().find(|r| r.category == c)
    }
}

/// Thin slice indices paired with thick slice `i` for a category.
pub fn category_pairs(thick_depth: usize, thin_depth: usize, scale: usize, c: PairCategory) -> Vec<(usize, usize)> {
    let off = c.offset();
    let mut out = Vec::new();
    for i in 0..thick_depth {
        let m = scale * i;
        if off == 0 {
            if m < thin_depth {
                out.push((m, i));
            }
            continue;
        }
        if m >= off {
            out.push((m - off, i));
        }
        if m + off < thin_depth && m < thin_depth {
            out.push((m + off, i));
        }
    }
    out
}

/// Average PSNR/SSIM of thin/thick slice pairs at 0, 1 and 2 thin slices
/// from spatial alignment. Far is omitted for scale < 5.
pub fn slice_pair_analysis(thin: &Volume, thick: &Volume, scale: usize) -> Result<SlicePairTable> {
    if thin.unit() != Unit::Normalized || thick.unit() != Unit::Normalized {
        return Err(Error::contract("slice-pair analysis needs normalized volumes"));
    }
    let (dt, h, w) = thin.dims();
    let (dk, hk, wk) = thick.dims();
    if (h, w) != (hk, wk) {
        return Err(Error::dimension("slice_pair_analysis", format!("{:?} vs {:?}", thin.dims(), thick.dims())));
    }
    if scale < 2 || (dk - 1) * scale >= dt {
        return Err(Error::contract(format!("thick depth {dk} and scale {scale} exceed thin depth {dt}")));
    }
    let mut rows = Vec::new();
    let mut omitted = Vec::new();
    for c in [PairCategory::Match, PairCategory::Near, PairCategory::Far] {
        if c == PairCategory::Far && scale < 5 {
            omitted.push((c, format!("far pairs are closer to the next thick slice when scale {scale} < 5")));
            continue;
        }
        let pairs = category_pairs(dk, dt, scale, c);
        let (mut p, mut s) = (0.0, 0.0);
        for &(t, k) in &pairs {
            p += psnr_slices(thin.axial(t), thick.axial(k), 1.0);
            s += ssim_slice(thin.axial(t), thick.axial(k), h, w)?;
        }
        let n = pairs.len() as f64;
        rows.push(CategoryScore { category: c, pairs: pairs.len(), psnr: p / n, ssim: s / n });
    }
    Ok(SlicePairTable { rows, omitted })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if !mean.is_finite() {
            return Self { mean, std: f64::NAN };
        }
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, std: libm::sqrt(var) }
    }

    /// `mean ± std` to three decimals.
    pub fn display(&self) -> String {
        format!("{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    /// `"A vs B"`; the alternative is that A scores higher.
    pub label: String,
    pub cases: usize,
    pub p_psnr: f64,
    pub p_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub rows: Vec<CaseRow>,
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub comparisons: Vec<Comparison>,
}

impl MetricReport {
    pub fn new(method: impl Into<String>, rows: Vec<CaseRow>) -> Self {
        let p: Vec<f64> = rows.iter().map(|r| r.psnr).collect();
        let s: Vec<f64> = rows.iter().map(|r| r.ssim).collect();
        Self { method: method.into(), psnr: MeanStd::of(&p), ssim: MeanStd::of(&s), rows, comparisons: Vec::new() }
    }

    /// Wilcoxon comparison of this report (A) against `other` (B) on the
    /// cases both share, matched by id.
    pub fn compare(&self, other: &MetricReport) -> Result<Comparison> {
        let mut dp = Vec::new();
        let mut ds = Vec::new();
        for r in &self.rows {
            if let Some(o) = other.rows.iter().find(|o| o.id == r.id) {
                dp.push(r.psnr - o.psnr);
                ds.push(r.ssim - o.ssim);
            }
        }
        Ok(Comparison {
            label: format!("{} vs {}", self.method, other.method),
            cases: dp.len(),
            p_psnr: wilcoxon_one_sided(&dp)?,
            p_ssim: wilcoxon_one_sided(&ds)?,
        })
    }
}

/// PSNR and SSIM of a prediction against its reference.
pub fn evaluate_case(id: impl Into<String>, pred: &Volume, truth: &Volume) -> Result<CaseRow> {
    if pred.unit() != Unit::Normalized || truth.unit() != Unit::Normalized {
        return Err(Error::contract("metrics are computed on normalized volumes"));
    }
    Ok(CaseRow { id: id.into(), psnr: psnr(pred, truth, 1.0)?, ssim: ssim(pred, truth)? })
}
