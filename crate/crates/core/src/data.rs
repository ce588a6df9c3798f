//! Synthetic paired images: a sharp "anatomy-like" target and a blurred,
//! contrast-squeezed, noisy input. Also augmentation and the on-disk dataset
//! layout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use rayon::prelude::*;

use crate::config::Document;
use crate::error::{Error, Result};
use crate::io::{load_ten, save_ten};
use crate::objectives::psnr;
use crate::rng::{mix_seed, seeded, SeededRng};
use crate::tensor::Tensor;

/// Accepted PSNR between input and target, in dB.
pub const PSNR_RANGE_DB: (f64, f64) = (15.0, 35.0);
/// Degradation draws per target before a new target is drawn.
const DEGRADE_ATTEMPTS: u64 = 16;
const TARGET_ATTEMPTS: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradeSpec {
    pub blur_sigma: (f64, f64),
    /// Contrast factor `g` in `0.5 + (x - 0.5) g`.
    pub gamma: (f64, f64),
    pub noise_sigma: (f64, f64),
}

impl Default for DegradeSpec {
    fn default() -> Self {
        Self { blur_sigma: (1.0, 2.0), gamma: (0.6, 0.9), noise_sigma: (0.01, 0.03) }
    }
}

impl DegradeSpec {
    /// No blur, unit contrast, no noise.
    pub fn identity() -> Self {
        Self { blur_sigma: (0.0, 0.0), gamma: (1.0, 1.0), noise_sigma: (0.0, 0.0) }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi;
        if !ok(self.blur_sigma) || !ok(self.gamma) || !ok(self.noise_sigma) || self.gamma.0 <= 0.0 {
            return Err(Error::Config(format!("degradation ranges must be non-negative and ordered: {self:?}")));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut SeededRng) -> DegradeParams {
        let draw = |rng: &mut SeededRng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        DegradeParams {
            blur_sigma: draw(rng, self.blur_sigma),
            gamma: draw(rng, self.gamma),
            noise_sigma: draw(rng, self.noise_sigma),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradeParams {
    pub blur_sigma: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMeta {
    /// Seed of the draw that was accepted.
    pub seed: u64,
    pub degrade: DegradeParams,
    pub psnr_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    /// `[1, H, W]` in `[0, 1]`.
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub meta: SampleMeta,
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// `[1, h, w]` image: smooth background, 5 to 12 soft ellipses and a few thin
/// bright or dark curves.
pub fn synth_target(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = seeded(seed);
    let side = h.min(w) as f64;
    let mut img = vec![0.0f64; h * w];

    let base = rng.random_range(0.2..0.4);
    let (gy, gx) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let (fy, fx, phase) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.0..6.3));
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (y as f64 / h as f64, x as f64 / w as f64);
            img[y * w + x] = base + gy * u + gx * v + 0.05 * (fy * 6.3 * u + fx * 6.3 * v + phase).sin();
        }
    }

    let n_ellipses = rng.random_range(5..=12);
    for _ in 0..n_ellipses {
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let (ry, rx) = (rng.random_range(0.08..0.3) * side, rng.random_range(0.08..0.3) * side);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let amp = rng.random_range(-0.35..0.5);
        // Edge width in pixels.
        let soft = rng.random_range(0.5..2.0);
        let (s, c) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let (a, b) = ((c * dx + s * dy) / rx, (c * dy - s * dx) / ry);
                let r = (a * a + b * b).sqrt();
                let px = (r - 1.0) * rx.min(ry);
                img[y * w + x] += amp * (1.0 - smoothstep(-soft, soft, px));
            }
        }
    }

    let n_curves = rng.random_range(1..=3);
    for _ in 0..n_curves {
        let p: Vec<(f64, f64)> =
            (0..3).map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64))).collect();
        let level = if rng.random_bool(0.5) { 0.95 } else { 0.05 };
        let width = rng.random_range(0.6..1.2);
        let pts: Vec<(f64, f64)> = (0..=200)
            .map(|i| {
                let t = i as f64 / 200.0;
                let (a, b, c) = ((1.0 - t) * (1.0 - t), 2.0 * t * (1.0 - t), t * t);
                (a * p[0].0 + b * p[1].0 + c * p[2].0, a * p[0].1 + b * p[1].1 + c * p[2].1)
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let d2 = pts
                    .iter()
                    .map(|&(py, px)| (py - y as f64).powi(2) + (px - x as f64).powi(2))
                    .fold(f64::INFINITY, f64::min);
                let cover = (1.0 - d2.sqrt() / (width + 0.5)).clamp(0.0, 1.0);
                let v = &mut img[y * w + x];
                *v += cover * (level - *v);
            }
        }
    }

    Tensor::from_fn(&[1, h, w], |i| img[i].clamp(0.0, 1.0) as f32)
}

/// Separable Gaussian blur of every channel of `[C, H, W]` with replicated edges.
pub fn gaussian_blur(x: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    let (c, h, w) = x.dims3()?;
    if sigma < 1e-6 {
        return Ok(x.clone());
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let src = x.data();
    let mut tmp = vec![0.0f64; src.len()];
    let mut out = vec![0.0f32; src.len()];
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    for ch in 0..c {
        let plane = ch * h * w;
        for y in 0..h {
            for xx in 0..w {
                tmp[plane + y * w + xx] = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * src[plane + y * w + clampi(xx as isize + j as isize - r, w)] as f64)
                    .sum();
            }
        }
        for y in 0..h {
            for xx in 0..w {
                out[plane + y * w + xx] = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * tmp[plane + clampi(y as isize + j as isize - r, h) * w + xx])
                    .sum::<f64>() as f32;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Blur, contrast squeeze about 0.5, additive Gaussian noise, clamp.
pub fn degrade_with(target: &Tensor<f32>, p: &DegradeParams, rng: &mut SeededRng) -> Result<Tensor<f32>> {
    let blurred = gaussian_blur(target, p.blur_sigma)?;
    let noise = Normal::new(0.0, p.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let src = blurred.data();
    Ok(Tensor::from_fn(blurred.shape(), |i| {
        let n = if p.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        ((0.5 + (src[i] as f64 - 0.5) * p.gamma + n).clamp(0.0, 1.0)) as f32
    }))
}

/// Samples degradation parameters from `spec` and applies them.
pub fn degrade(target: &Tensor<f32>, spec: &DegradeSpec, seed: u64) -> Result<(Tensor<f32>, DegradeParams)> {
    spec.validate()?;
    let mut rng = seeded(seed);
    let p = spec.sample(&mut rng);
    Ok((degrade_with(target, &p, &mut rng)?, p))
}

/// A pair whose input/target PSNR lies in [`PSNR_RANGE_DB`]. Degradations are
/// redrawn first, then the target.
pub fn make_pair(seed: u64, h: usize, w: usize, spec: &DegradeSpec) -> Result<PairedSample> {
    spec.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::dim("make_pair", format!("empty image {h}x{w}")));
    }
    for t in 0..TARGET_ATTEMPTS {
        let target = synth_target(mix_seed(seed, t), h, w);
        for a in 0..DEGRADE_ATTEMPTS {
            let s = mix_seed(mix_seed(seed, t), a + 1);
            let (input, degrade) = degrade(&target, spec, s)?;
            let db = psnr(&input, &target)?;
            if (PSNR_RANGE_DB.0..=PSNR_RANGE_DB.1).contains(&db) {
                return Ok(PairedSample { input, target, meta: SampleMeta { seed: s, degrade, psnr_db: db } });
            }
        }
    }
    Err(Error::Config(format!(
        "no degradation within {PSNR_RANGE_DB:?} dB after {} draws; check the degradation ranges",
        TARGET_ATTEMPTS * DEGRADE_ATTEMPTS
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn seed(self, base: u64) -> u64 {
        mix_seed(base, self as u64 + 1)
    }
}

/// Per-sample seeds depend only on `(seed, split, index)`, so parallel and
/// serial generation agree.
pub fn generate_split(
    seed: u64,
    split: Split,
    count: usize,
    h: usize,
    w: usize,
    spec: &DegradeSpec,
) -> Result<Vec<PairedSample>> {
    let base = split.seed(seed);
    (0..count).into_par_iter().map(|i| make_pair(mix_seed(base, i as u64), h, w, spec)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub train: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub degrade: DegradeSpec,
}

fn range(r: (f64, f64)) -> String {
    format!("{},{}", r.0, r.1)
}

/// Writes `{split}/{i}_in.ten`, `{split}/{i}_gt.ten` and `manifest.txt`.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec) -> Result<()> {
    let mut manifest = String::new();
    let _ = writeln!(manifest, "[dataset]");
    let _ = writeln!(manifest, "train = {}", spec.train);
    let _ = writeln!(manifest, "test = {}", spec.test);
    let _ = writeln!(manifest, "height = {}", spec.height);
    let _ = writeln!(manifest, "width = {}", spec.width);
    let _ = writeln!(manifest, "seed = {}", spec.seed);
    let _ = writeln!(manifest, "blur_sigma = {}", range(spec.degrade.blur_sigma));
    let _ = writeln!(manifest, "gamma = {}", range(spec.degrade.gamma));
    let _ = writeln!(manifest, "noise_sigma = {}", range(spec.degrade.noise_sigma));
    let _ = writeln!(manifest, "psnr_range_db = {}", range(PSNR_RANGE_DB));
    for (split, n) in [(Split::Train, spec.train), (Split::Test, spec.test)] {
        let samples = generate_split(spec.seed, split, n, spec.height, spec.width, &spec.degrade)?;
        let sub = dir.join(split.name());
        let _ = writeln!(manifest, "\n[{}]", split.name());
        let _ = writeln!(manifest, "# index = seed blur_sigma gamma noise_sigma psnr_db");
        for (i, s) in samples.iter().enumerate() {
            save_ten(sub.join(format!("{i}_in.ten")), &s.input)?;
            save_ten(sub.join(format!("{i}_gt.ten")), &s.target)?;
            let d = &s.meta.degrade;
            let _ = writeln!(
                manifest,
                "{i} = {} {:.6} {:.6} {:.6} {:.4}",
                s.meta.seed, d.blur_sigma, d.gamma, d.noise_sigma, s.meta.psnr_db
            );
        }
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

/// `(input, target)` tensors of one split, each `[1, H, W]`.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub inputs: Vec<Tensor<f32>>,
    pub targets: Vec<Tensor<f32>>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn from_samples(samples: &[PairedSample]) -> Self {
        Self {
            inputs: samples.iter().map(|s| s.input.clone()).collect(),
            targets: samples.iter().map(|s| s.target.clone()).collect(),
        }
    }
}

pub fn load_split(dir: &Path, split: Split) -> Result<SplitData> {
    let manifest = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let doc = Document::parse(&text)?;
    let n: usize = doc
        .section("dataset")
        .get(split.name())
        .ok_or_else(|| Error::Parse { path: manifest.clone(), msg: format!("missing `{}` count", split.name()) })?
        .parse()
        .map_err(|e| Error::Parse { path: manifest.clone(), msg: format!("{e}") })?;
    let path = |i: usize, kind: &str| -> PathBuf { dir.join(split.name()).join(format!("{i}_{kind}.ten")) };
    let mut data = SplitData { inputs: Vec::with_capacity(n), targets: Vec::with_capacity(n) };
    for i in 0..n {
        let input: Tensor<f32> = load_ten(path(i, "in"))?;
        let target: Tensor<f32> = load_ten(path(i, "gt"))?;
        input.same_shape("load_split", &target)?;
        input.dims3()?;
        data.inputs.push(input);
        data.targets.push(target);
    }
    Ok(data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentOptions {
    /// Square crop side; 0 keeps the full image.
    pub crop: usize,
    pub flip: bool,
    pub rotate: bool,
    pub mixup_prob: f64,
    pub mixup_alpha: f64,
}

impl AugmentOptions {
    pub fn none() -> Self {
        Self { crop: 0, flip: false, rotate: false, mixup_prob: 0.0, mixup_alpha: 0.2 }
    }
}

/// One draw of the geometric transforms, applied identically to input and target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Geometry {
    /// Top-left corner and side of the crop.
    pub crop: Option<(usize, usize, usize)>,
    pub flip_h: bool,
    pub flip_v: bool,
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
}

impl Geometry {
    pub fn sample(rng: &mut SeededRng, opts: &AugmentOptions, h: usize, w: usize) -> Result<Self> {
        let crop = match opts.crop {
            0 => None,
            s if s > h || s > w => {
                return Err(Error::dim("augment", format!("crop {s} exceeds image {h}x{w}")));
            }
            s => Some((rng.random_range(0..=h - s), rng.random_range(0..=w - s), s)),
        };
        let flip_h = opts.flip && rng.random_bool(0.5);
        let flip_v = opts.flip && rng.random_bool(0.5);
        let quarter_turns = if opts.rotate { rng.random_range(0..4u8) } else { 0 };
        Ok(Self { crop, flip_h, flip_v, quarter_turns })
    }

    /// Applies crop, flips, then rotation to `[C, H, W]`.
    pub fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (c, h, w) = x.dims3()?;
        let (y0, x0, ch, cw) = match self.crop {
            Some((y0, x0, s)) => (y0, x0, s, s),
            None => (0, 0, h, w),
        };
        if y0 + ch > h || x0 + cw > w {
            return Err(Error::dim("augment", "crop outside the image"));
        }
        let turns = self.quarter_turns % 4;
        let (oh, ow) = if turns % 2 == 1 { (cw, ch) } else { (ch, cw) };
        let src = x.data();
        Ok(Tensor::from_fn(&[c, oh, ow], |i| {
            let (k, r, q) = (i / (oh * ow), (i / ow) % oh, i % ow);
            // Undo the rotation, then the flips, to find the source pixel.
            let (mut y, mut xx) = match turns {
                0 => (r, q),
                1 => (q, cw - 1 - r),
                2 => (ch - 1 - r, cw - 1 - q),
                _ => (ch - 1 - q, r),
            };
            if self.flip_v {
                y = ch - 1 - y;
            }
            if self.flip_h {
                xx = cw - 1 - xx;
            }
            src[k * h * w + (y0 + y) * w + x0 + xx]
        }))
    }
}

/// `lambda * a + (1 - lambda) * b` on both images.
pub fn mixup(
    a: (&Tensor<f32>, &Tensor<f32>),
    b: (&Tensor<f32>, &Tensor<f32>),
    lambda: f32,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mix = |p: &Tensor<f32>, q: &Tensor<f32>| -> Result<Tensor<f32>> {
        p.same_shape("mixup", q)?;
        Ok(p.zip_map(q, |u, v| lambda * u + (1.0 - lambda) * v))
    };
    Ok((mix(a.0, b.0)?, mix(a.1, b.1)?))
}

/// Optional mixup with `partner`, then one geometric draw for both images.
pub fn augment(
    pair: (&Tensor<f32>, &Tensor<f32>),
    partner: Option<(&Tensor<f32>, &Tensor<f32>)>,
    opts: &AugmentOptions,
    rng: &mut SeededRng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (mut input, mut target) = (pair.0.clone(), pair.1.clone());
    if let Some(other) = partner {
        if opts.mixup_prob > 0.0 && rng.random_bool(opts.mixup_prob.min(1.0)) {
            let beta = Beta::new(opts.mixup_alpha, opts.mixup_alpha).map_err(|e| Error::Config(e.to_string()))?;
            let lambda = beta.sample(rng) as f32;
            (input, target) = mixup((&input, &target), other, lambda)?;
        }
    }
    let (_, h, w) = input.dims3()?;
    let geo = Geometry::sample(rng, opts, h, w)?;
    Ok((geo.apply(&input)?, geo.apply(&target)?))
}
