//! Synthetic CT-like phantoms and thick-slice degradation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{Spacing, Unit, Volume, HU_MAX, HU_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    Ellipsoid,
    Tube,
    Plate,
}

pub const AIR_HU: f32 = -1000.0;
pub const SOFT_TISSUE_HU: (f32, f32) = (0.0, 80.0);
pub const BONE_HU: (f32, f32) = (300.0, 1200.0);

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    /// Thin volume extents (D', H, W).
    pub dims: (usize, usize, usize),
    pub seed: u64,
    pub primitives: usize,
    pub kinds: Vec<PrimitiveKind>,
    pub background: f32,
    /// Gaussian blur σ in voxels; 0 disables blurring.
    pub blur_sigma: f32,
    pub spacing_xy: f32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: (41, 64, 64),
            seed: 0,
            primitives: 12,
            kinds: vec![PrimitiveKind::Ellipsoid, PrimitiveKind::Tube, PrimitiveKind::Plate],
            background: AIR_HU,
            blur_sigma: 1.5,
            spacing_xy: 0.7,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: PrimitiveKind,
    center: [f32; 3],
    /// Ellipsoid radii, or (radius, half-thickness, unused) for tubes and plates.
    size: [f32; 3],
    dir: [f32; 3],
    value: f32,
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    loop {
        let v = [rng.random_range(-1.0f32..1.0), rng.random_range(-1.0f32..1.0), rng.random_range(-1.0f32..1.0)];
        let n = libm::sqrtf(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        if n > 0.1 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn dot(a: [f32; 3], b: [f32; 3]) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Shape {
    fn random<R: Rng + ?Sized>(kind: PrimitiveKind, dims: (usize, usize, usize), rng: &mut R) -> Self {
        let ext = [dims.0 as f32, dims.1 as f32, dims.2 as f32];
        let center = [
            rng.random_range(0.15..0.85) * ext[0],
            rng.random_range(0.15..0.85) * ext[1],
            rng.random_range(0.15..0.85) * ext[2],
        ];
        let inplane = ext[1].min(ext[2]);
        let (size, value) = match kind {
            PrimitiveKind::Ellipsoid => (
                [
                    rng.random_range(0.15..0.45) * ext[0],
                    rng.random_range(0.08..0.3) * ext[1],
                    rng.random_range(0.08..0.3) * ext[2],
                ],
                if rng.random_bool(0.25) {
                    AIR_HU
                } else {
                    rng.random_range(SOFT_TISSUE_HU.0..=SOFT_TISSUE_HU.1)
                },
            ),
            PrimitiveKind::Tube => (
                [rng.random_range(0.03..0.1) * inplane, 0.0, 0.0],
                if rng.random_bool(0.3) {
                    rng.random_range(BONE_HU.0..=BONE_HU.1)
                } else {
                    rng.random_range(SOFT_TISSUE_HU.0..=SOFT_TISSUE_HU.1)
                },
            ),
            PrimitiveKind::Plate => (
                [rng.random_range(0.15..0.35) * inplane, rng.random_range(0.8..2.0), 0.0],
                rng.random_range(BONE_HU.0..=BONE_HU.1),
            ),
        };
        Self { kind, center, size, dir: unit_vector(rng), value }
    }

    fn contains(&self, p: [f32; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        match self.kind {
            PrimitiveKind::Ellipsoid => {
                let q = [d[0] / self.size[0], d[1] / self.size[1], d[2] / self.size[2]];
                dot(q, q) <= 1.0
            }
            PrimitiveKind::Tube => {
                let along = dot(d, self.dir);
                dot(d, d) - along * along <= self.size[0] * self.size[0]
            }
            PrimitiveKind::Plate => {
                let along = dot(d, self.dir);
                along.abs() <= self.size[1] && dot(d, d) - along * along <= self.size[0] * self.size[0]
            }
        }
    }
}

/// Normalized 1-D Gaussian taps with radius ⌈3σ⌉.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = libm::ceilf(3.0 * sigma) as i32;
    let mut k: Vec<f32> = (-r..=r).map(|i| libm::expf(-((i * i) as f32) / (2.0 * sigma * sigma))).collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable convolution along one axis (0 = depth, 1 = rows, 2 = cols) with
/// clamp-to-edge boundaries.
pub fn blur_axis(data: &mut [f32], dims: (usize, usize, usize), axis: usize, kernel: &[f32]) {
    let (d, h, w) = dims;
    let (n, stride) = match axis {
        0 => (d, h * w),
        1 => (h, w),
        _ => (w, 1),
    };
    let r = (kernel.len() / 2) as isize;
    let mut line = vec![0.0f32; n];
    for start in 0..d * h * w {
        let pos = (start / stride) % n;
        if pos != 0 {
            continue;
        }
        for (i, l) in line.iter_mut().enumerate() {
            *l = data[start + i * stride];
        }
        for i in 0..n {
            let mut acc = 0.0f32;
            for (k, &tap) in kernel.iter().enumerate() {
                let j = (i as isize + k as isize - r).clamp(0, n as isize - 1) as usize;
                acc += tap * line[j];
            }
            data[start + i * stride] = acc;
        }
    }
}

pub fn gaussian_blur(data: &mut [f32], dims: (usize, usize, usize), sigma: f32) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    for axis in 0..3 {
        blur_axis(data, dims, axis, &k);
    }
}

/// A thin (1 mm) phantom in HU.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<Volume> {
    let (d, h, w) = spec.dims;
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::config(format!("phantom dims {:?} must be positive", spec.dims)));
    }
    if spec.primitives > 0 && spec.kinds.is_empty() {
        return Err(Error::config("phantom needs at least one primitive kind"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shapes: Vec<Shape> = (0..spec.primitives)
        .map(|_| {
            let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
            Shape::random(kind, spec.dims, &mut rng)
        })
        .collect();
    let mut vox = vec![spec.background; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f32 + 0.5, y as f32 + 0.5, x as f32 + 0.5];
                if let Some(s) = shapes.iter().rev().find(|s| s.contains(p)) {
                    vox[(z * h + y) * w + x] = s.value;
                }
            }
        }
    }
    gaussian_blur(&mut vox, spec.dims, spec.blur_sigma);
    vox.iter_mut().for_each(|v| *v = v.clamp(HU_MIN, HU_MAX));
    Volume::new(spec.dims, Spacing::new(1.0, spec.spacing_xy), Unit::Hu, vox)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DegradeMode {
    /// Centered slab mean over `scale` thin slices, truncated at the edges.
    Average,
    /// Every `scale`-th thin slice.
    Decimate,
}

/// Thick volume whose slice `i` sits at thin slice `scale·i`.
pub fn degrade_to_thick(thin: &Volume, scale: usize, mode: DegradeMode) -> Result<Volume> {
    let (dt, h, w) = thin.dims();
    if scale == 0 || dt < scale + 1 {
        return Err(Error::contract(format!("thin depth {dt} too small for scale {scale}")));
    }
    let d = (dt - 1) / scale + 1;
    let n = h * w;
    let mut vox = Vec::with_capacity(d * n);
    for i in 0..d {
        let c = scale * i;
        match mode {
            DegradeMode::Decimate => vox.extend_from_slice(thin.axial(c)),
            DegradeMode::Average => {
                let half = scale / 2;
                let lo = c.saturating_sub(half);
                let hi = (c + half).min(dt - 1);
                let mut acc = vec![0.0f64; n];
                for z in lo..=hi {
                    for (a, &v) in acc.iter_mut().zip(thin.axial(z)) {
                        *a += v as f64;
                    }
                }
                let k = (hi - lo + 1) as f64;
                vox.extend(acc.iter().map(|&a| (a / k) as f32));
            }
        }
    }
    let spacing = Spacing { z: thin.spacing.z * scale as f32, ..thin.spacing };
    Volume::new((d, h, w), spacing, thin.unit(), vox)
}

/// Stand-in for a genuinely acquired thick series: z-blur, slab averaging and
/// additive Gaussian noise (HU), clamped back into range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Acquisition {
    pub z_blur: f32,
    pub noise_hu: f32,
}

impl Default for Acquisition {
    fn default() -> Self {
        Self { z_blur: 1.0, noise_hu: 20.0 }
    }
}

pub fn simulate_acquisition(thin: &Volume, scale: usize, acq: Acquisition, seed: u64) -> Result<Volume> {
    if thin.unit() != Unit::Hu {
        return Err(Error::contract("acquisition is simulated in HU"));
    }
    let mut vox = thin.voxels().to_vec();
    if acq.z_blur > 0.0 {
        blur_axis(&mut vox, thin.dims(), 0, &gaussian_kernel(acq.z_blur));
    }
    let blurred = Volume::new(thin.dims(), thin.spacing, Unit::Hu, vox)?;
    let thick = degrade_to_thick(&blurred, scale, DegradeMode::Average)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, acq.noise_hu.max(0.0)).map_err(|e| Error::config(format!("{e}")))?;
    let dims = thick.dims();
    let spacing = thick.spacing;
    let mut vox = thick.into_voxels();
    if acq.noise_hu > 0.0 {
        vox.iter_mut().for_each(|v| *v = (*v + noise.sample(&mut rng)).clamp(HU_MIN, HU_MAX));
    }
    Volume::new(dims, spacing, Unit::Hu, vox)
}

/// One synthetic case, all in HU: the thin target, a simulated acquired thick
/// series, and the decimated pseudo-thick series.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: usize,
    pub thin: Volume,
    pub real_thick: Volume,
    pub pseudo_thick: Volume,
}

/// Seed of case `id` under run seed `seed`; independent of generation order.
pub fn case_seed(seed: u64, id: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64 + 1);
    rng.random()
}

pub fn gen_case(spec: &PhantomSpec, scale: usize, acq: Acquisition, id: usize) -> Result<Case> {
    let s = case_seed(spec.seed, id);
    let thin = gen_phantom(&PhantomSpec { seed: s, ..spec.clone() })?;
    let real_thick = simulate_acquisition(&thin, scale, acq, s ^ 0x5eed)?;
    let pseudo_thick = degrade_to_thick(&thin, scale, DegradeMode::Decimate)?;
    Ok(Case { id, thin, real_thick, pseudo_thick })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Seeded assignment of `n` cases to splits with exact counts.
pub fn assign_splits(counts: (usize, usize, usize), seed: u64) -> Vec<Split> {
    let (tr, va, te) = counts;
    let mut labels: Vec<Split> = core::iter::repeat(Split::Train)
        .take(tr)
        .chain(core::iter::repeat(Split::Validation).take(va))
        .chain(core::iter::repeat(Split::Test).take(te))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..labels.len()).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    labels
}
