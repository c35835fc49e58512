//! Synthetic real/fake corpus, perturbations and the on-disk split format.
//!
//! Reals are 1/f-spectrum noise fields with random colour statistics. Fakes are
//! a real base image plus one additive artifact field shared by all channels.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::spectra::{ifft2, C64};
use crate::tensor::{derived_rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Generator {
    Real,
    /// Cosine grid with `period` pixels along both axes.
    Grid { period: f64, amp: f64 },
    /// Alternating-sign cells of side `period / 2`.
    Checker { period: usize, amp: f64 },
    /// Smooth random field with Gaussian spectrum of width `sigma` bins.
    LowFreq { sigma: f64, amp: f64 },
    /// Concentric cosine rings at `freq` cycles per pixel.
    Ring { freq: f64, amp: f64 },
}

impl Generator {
    pub fn label(&self) -> f64 {
        match self {
            Generator::Real => 0.0,
            _ => 1.0,
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Generator::Real => "real",
            Generator::Grid { .. } => "grid",
            Generator::Checker { .. } => "checker",
            Generator::LowFreq { .. } => "lowfreq",
            Generator::Ring { .. } => "ring",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match *self {
            Generator::Grid { period, .. } if period.is_nan() || period <= 1.0 => {
                bad(format!("grid period {period} must exceed 1"))
            }
            Generator::Checker { period, .. } if period < 2 || period % 2 != 0 => {
                bad(format!("checker period {period} must be even and >= 2"))
            }
            Generator::LowFreq { sigma, .. } if sigma.is_nan() || sigma <= 0.0 => {
                bad(format!("lowfreq sigma {sigma} must be positive"))
            }
            Generator::Ring { freq, .. } if freq.is_nan() || freq <= 0.0 || freq > 0.5 => {
                bad(format!("ring frequency {freq} must be in (0, 0.5]"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Generator::Real => write!(f, "real"),
            Generator::Grid { period, amp } => write!(f, "grid({period},{amp})"),
            Generator::Checker { period, amp } => write!(f, "checker({period},{amp})"),
            Generator::LowFreq { sigma, amp } => write!(f, "lowfreq({sigma},{amp})"),
            Generator::Ring { freq, amp } => write!(f, "ring({freq},{amp})"),
        }
    }
}

impl FromStr for Generator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "real" {
            return Ok(Generator::Real);
        }
        let unknown = || Error::Parse(format!("unknown generator `{s}`"));
        let (name, rest) = s.split_once('(').ok_or_else(unknown)?;
        let args = rest.strip_suffix(')').ok_or_else(unknown)?;
        let nums = args
            .split(',')
            .map(|a| a.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Parse(format!("bad generator arguments in `{s}`")))?;
        if nums.len() != 2 {
            return Err(Error::Parse(format!("`{s}` needs two arguments")));
        }
        let (a, amp) = (nums[0], nums[1]);
        let g = match name.trim() {
            "grid" => Generator::Grid { period: a, amp },
            "checker" => {
                if a.fract() != 0.0 || a < 0.0 {
                    return Err(Error::Parse(format!("checker period `{a}` must be an integer")));
                }
                Generator::Checker {
                    period: a as usize,
                    amp,
                }
            }
            "lowfreq" | "lowfreq-boost" => Generator::LowFreq { sigma: a, amp },
            "ring" => Generator::Ring { freq: a, amp },
            _ => return Err(unknown()),
        };
        g.validate()?;
        Ok(g)
    }
}

/// Image geometry shared by every item of a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub size: usize,
    pub channels: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            size: 64,
            channels: 3,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 || !self.size.is_power_of_two() {
            return Err(Error::Config(format!(
                "image size {} must be a power of two >= 8",
                self.size
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("zero channels".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.size * self.size
    }
}

fn signed_bin(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Zero-mean, unit-variance random field whose amplitude spectrum is `shape(|f|)`
/// (frequency in bins); the DC bin is left empty.
fn spectral_field(n: usize, rng: &mut impl Rng, shape: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut buf = vec![C64::default(); n * n];
    for ky in 0..n {
        for kx in 0..n {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            let f = signed_bin(kx, n).hypot(signed_bin(ky, n));
            if f > 0.0 {
                buf[ky * n + kx] = C64::new(re, im) * shape(f);
            }
        }
    }
    ifft2(&mut buf, n).expect("power-of-two size checked by caller");
    let mut v: Vec<f64> = buf.into_iter().map(|z| z.re).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    let sd = var.sqrt().max(1e-300);
    v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
    v
}

/// Natural-statistics stand-in: 1/f amplitude (1/f² power), random tint and contrast.
pub fn gen_real(spec: &SyntheticSpec, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let n = spec.size;
    let mut rng = derived_rng(seed, "real");
    let shared = spectral_field(n, &mut rng, |f| 1.0 / f);
    let contrast = rng.gen_range(0.06..0.14);
    let mut data = Vec::with_capacity(spec.pixels());
    for _ in 0..spec.channels {
        let own = spectral_field(n, &mut rng, |f| 1.0 / f);
        let mean = rng.gen_range(0.35..0.65);
        let mix = (0.85f64.powi(2) + 0.15f64.powi(2)).sqrt();
        data.extend(
            shared
                .iter()
                .zip(&own)
                .map(|(s, o)| (mean + contrast * (0.85 * s + 0.15 * o) / mix).clamp(0.0, 1.0)),
        );
    }
    Tensor::new(vec![spec.channels, n, n], data)
}

/// Additive artifact field for one fake, `n × n`, before clipping.
pub fn artifact_field(n: usize, generator: &Generator, seed: u64) -> Result<Vec<f64>> {
    generator.validate()?;
    let mut rng = derived_rng(seed, "artifact");
    let coords = (0..n * n).map(|i| ((i % n) as f64, (i / n) as f64));
    Ok(match *generator {
        Generator::Real => vec![0.0; n * n],
        Generator::Grid { period, amp } => {
            let px = rng.gen_range(0.0..2.0 * PI);
            let py = rng.gen_range(0.0..2.0 * PI);
            let w = 2.0 * PI / period;
            coords
                .map(|(x, y)| amp * 0.5 * ((w * x + px).cos() + (w * y + py).cos()))
                .collect()
        }
        Generator::Checker { period, amp } => {
            let cell = period / 2;
            let ox = rng.gen_range(0..period);
            let oy = rng.gen_range(0..period);
            coords
                .map(|(x, y)| {
                    let par = (x as usize + ox) / cell + (y as usize + oy) / cell;
                    if par.is_multiple_of(2) {
                        amp
                    } else {
                        -amp
                    }
                })
                .collect()
        }
        Generator::LowFreq { sigma, amp } => {
            let f = spectral_field(n, &mut rng, |f| (-f * f / (2.0 * sigma * sigma)).exp());
            f.into_iter().map(|v| amp * v).collect()
        }
        Generator::Ring { freq, amp } => {
            let c = n as f64 / 2.0;
            let j = n as f64 / 8.0;
            let cx = c + rng.gen_range(-j..=j);
            let cy = c + rng.gen_range(-j..=j);
            let ph = rng.gen_range(0.0..2.0 * PI);
            coords
                .map(|(x, y)| amp * (2.0 * PI * freq * (x - cx).hypot(y - cy) + ph).cos())
                .collect()
        }
    })
}

/// Real base for `seed` plus the generator's artifact, clipped to `[0, 1]`.
pub fn gen_fake(spec: &SyntheticSpec, generator: &Generator, seed: u64) -> Result<Tensor> {
    let mut img = gen_real(spec, seed)?;
    if *generator == Generator::Real {
        return Ok(img);
    }
    let n = spec.size;
    let field = artifact_field(n, generator, seed)?;
    for plane in img.data_mut().chunks_mut(n * n) {
        plane
            .iter_mut()
            .zip(&field)
            .for_each(|(p, a)| *p = (*p + a).clamp(0.0, 1.0));
    }
    Ok(img)
}

pub fn render(spec: &SyntheticSpec, generator: &Generator, seed: u64) -> Result<Tensor> {
    match generator {
        Generator::Real => gen_real(spec, seed),
        g => gen_fake(spec, g, seed),
    }
}

fn planes(image: &Tensor, op: &str) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() < 2 {
        return Err(Error::InvalidShape(format!("{op} needs at least 2 dims, got {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Normalised 1-D Gaussian taps for radius `⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur over the trailing two dims with reflect padding.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::Contract(format!("blur sigma {sigma} is negative")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let (h, w) = planes(image, "gaussian_blur")?;
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut out = image.clone();
    let mut tmp = vec![0.0; h * w];
    for plane in out.data_mut().chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * plane[y * w + reflect(x as isize + j as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    Ok(out)
}

const LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16.,
    24., 40., 57., 69., 56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109.,
    103., 77., 24., 35., 55., 64., 81., 104., 113., 92., 49., 64., 78., 87., 103., 121., 120.,
    101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Luminance quantisation table after the usual quality scaling.
pub fn quant_table(quality: u32) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Contract(format!("jpeg quality {quality} outside 1..=100")));
    }
    let scale = if quality < 50 {
        5000 / quality
    } else {
        200 - 2 * quality
    } as f64;
    let mut t = [0.0; 64];
    for (o, base) in t.iter_mut().zip(LUMA_TABLE) {
        *o = ((base * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    Ok(t)
}

fn dct_matrix() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (k, row) in m.iter_mut().enumerate() {
        let c = if k == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
        for (x, v) in row.iter_mut().enumerate() {
            *v = c * ((2 * x + 1) as f64 * k as f64 * PI / 16.0).cos();
        }
    }
    m
}

/// Block-DCT quantisation round trip on each plane. The DC coefficient is kept
/// exact so flat regions keep their level; output is rounded to 8 bits.
pub fn jpeg_like(image: &Tensor, quality: u32) -> Result<Tensor> {
    let table = quant_table(quality)?;
    let (h, w) = planes(image, "jpeg_like")?;
    let m = dct_matrix();
    let mut out = image.clone();
    let mut block = [0.0f64; 64];
    let mut tmp = [0.0f64; 64];
    for plane in out.data_mut().chunks_mut(h * w) {
        let src = plane.to_vec();
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for y in 0..8 {
                    for x in 0..8 {
                        let (sy, sx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                        block[y * 8 + x] = src[sy * w + sx] * 255.0 - 128.0;
                    }
                }
                // rows then columns: C = M·X·Mᵀ
                for y in 0..8 {
                    for k in 0..8 {
                        tmp[y * 8 + k] = (0..8).map(|x| m[k][x] * block[y * 8 + x]).sum();
                    }
                }
                for k in 0..8 {
                    for l in 0..8 {
                        block[l * 8 + k] = (0..8).map(|y| m[l][y] * tmp[y * 8 + k]).sum();
                    }
                }
                for i in 1..64 {
                    block[i] = (block[i] / table[i]).round() * table[i];
                }
                for k in 0..8 {
                    for y in 0..8 {
                        tmp[y * 8 + k] = (0..8).map(|l| m[l][y] * block[l * 8 + k]).sum();
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        block[y * 8 + x] = (0..8).map(|k| m[k][x] * tmp[y * 8 + k]).sum();
                    }
                }
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        let level = (block[y * 8 + x] + 128.0).round().clamp(0.0, 255.0);
                        plane[(by + y) * w + bx + x] = level / 255.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Training-time perturbation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub p: f64,
    pub blur_sigma_max: f64,
    pub jpeg_quality_min: u32,
    pub jpeg_quality_max: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p: 0.1,
            blur_sigma_max: 3.0,
            jpeg_quality_min: 30,
            jpeg_quality_max: 100,
        }
    }
}

/// What [`augment`] did to one image.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Applied {
    pub blur: Option<f64>,
    pub jpeg: Option<u32>,
}

/// Independently per image: blur with probability `p`, then compress with probability `p`.
/// Consumes a fixed number of draws per image.
pub fn augment(images: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<(Tensor, Vec<Applied>)> {
    if !(0.0..=1.0).contains(&cfg.p) {
        return Err(Error::Config(format!("augmentation probability {} outside [0, 1]", cfg.p)));
    }
    if cfg.jpeg_quality_min > cfg.jpeg_quality_max {
        return Err(Error::Config("jpeg quality range is empty".into()));
    }
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape(format!("augment expects [B×C×H×W], got {s:?}")));
    }
    let per = s[1] * s[2] * s[3];
    let mut out = images.clone();
    let mut applied = Vec::with_capacity(s[0]);
    for chunk in out.data_mut().chunks_mut(per) {
        let do_blur = rng.gen::<f64>() < cfg.p;
        let sigma = rng.gen::<f64>() * cfg.blur_sigma_max;
        let do_jpeg = rng.gen::<f64>() < cfg.p;
        let q = rng.gen_range(cfg.jpeg_quality_min..=cfg.jpeg_quality_max);
        let mut a = Applied::default();
        if do_blur || do_jpeg {
            let mut img = Tensor::new(s[1..].to_vec(), chunk.to_vec())?;
            if do_blur {
                img = gaussian_blur(&img, sigma)?;
                a.blur = Some(sigma);
            }
            if do_jpeg {
                img = jpeg_like(&img, q)?;
                a.jpeg = Some(q);
            }
            chunk.copy_from_slice(img.data());
        }
        applied.push(a);
    }
    Ok((out, applied))
}

/// Test-time perturbation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perturbation {
    Blur(f64),
    Jpeg(u32),
}

impl Perturbation {
    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        match *self {
            Perturbation::Blur(s) => gaussian_blur(images, s),
            Perturbation::Jpeg(q) => jpeg_like(images, q),
        }
    }

    /// Blur σ = 1..4 then quality 90..30.
    pub fn sweep() -> Vec<Perturbation> {
        let blur = (1..=4).map(|s| Perturbation::Blur(s as f64));
        let jpeg = (3..=9).rev().map(|q| Perturbation::Jpeg(q * 10));
        blur.chain(jpeg).collect()
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::Blur(s) => write!(f, "blur={s}"),
            Perturbation::Jpeg(q) => write!(f, "jpeg={q}"),
        }
    }
}

impl FromStr for Perturbation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad perturbation `{s}` (use blur=<sigma> or jpeg=<quality>)"));
        match s.trim().split_once('=') {
            Some(("blur", v)) => Ok(Perturbation::Blur(v.parse().map_err(|_| bad())?)),
            Some(("jpeg", v)) => Ok(Perturbation::Jpeg(v.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

/// A batch of images with labels and provenance.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B×C×H×W]` in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<f64>,
    pub provenance: Vec<(Generator, u64)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Item {
    pub generator: Generator,
    pub seed: u64,
}

impl Item {
    pub fn label(&self) -> f64 {
        self.generator.label()
    }
}

/// One split: items plus their 8-bit pixels.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: SyntheticSpec,
    pub items: Vec<Item>,
    pixels: Vec<Vec<u8>>,
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn render_u8(spec: &SyntheticSpec, item: &Item) -> Result<Vec<u8>> {
    Ok(render(spec, &item.generator, item.seed)?
        .data()
        .iter()
        .map(|&v| to_u8(v))
        .collect())
}

impl Corpus {
    pub fn from_items(spec: SyntheticSpec, items: Vec<Item>) -> Result<Self> {
        spec.validate()?;
        #[cfg(feature = "parallel")]
        let pixels = {
            use rayon::prelude::*;
            items.par_iter().map(|it| render_u8(&spec, it)).collect::<Result<Vec<_>>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let pixels = items.iter().map(|it| render_u8(&spec, it)).collect::<Result<Vec<_>>>()?;
        Ok(Corpus { spec, items, pixels })
    }

    /// `count` items alternating real and fake, fakes cycling through `fakes`.
    /// Item seeds come from `(seed, name)` so differently named splits do not share bases.
    pub fn build(spec: SyntheticSpec, name: &str, count: usize, fakes: &[Generator], seed: u64) -> Result<Self> {
        if fakes.is_empty() || fakes.contains(&Generator::Real) {
            return Err(Error::Config(format!("split `{name}` needs at least one fake generator")));
        }
        let mut rng = derived_rng(seed, &format!("split:{name}"));
        let items = (0..count)
            .map(|i| Item {
                generator: if i % 2 == 0 {
                    Generator::Real
                } else {
                    fakes[(i / 2) % fakes.len()]
                },
                seed: rng.gen(),
            })
            .collect();
        Self::from_items(spec, items)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.items.iter().map(Item::label).collect()
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        &self.pixels[i]
    }

    pub fn image(&self, i: usize) -> Result<Tensor> {
        let n = self.spec.size;
        Tensor::new(
            vec![self.spec.channels, n, n],
            self.pixels[i].iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    /// Stack the selected items into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let n = self.spec.size;
        let mut data = Vec::with_capacity(indices.len() * self.spec.pixels());
        for &i in indices {
            data.extend(self.pixels[i].iter().map(|&b| b as f64 / 255.0));
        }
        Ok(Batch {
            images: Tensor::new(vec![indices.len(), self.spec.channels, n, n], data)?,
            labels: indices.iter().map(|&i| self.items[i].label()).collect(),
            provenance: indices
                .iter()
                .map(|&i| (self.items[i].generator, self.items[i].seed))
                .collect(),
        })
    }

    pub fn generators(&self) -> Vec<Generator> {
        let mut seen: Vec<Generator> = Vec::new();
        for it in &self.items {
            if !seen.contains(&it.generator) {
                seen.push(it.generator);
            }
        }
        seen
    }

    /// First `count` items.
    pub fn truncated(&self, count: usize) -> Corpus {
        let k = count.min(self.len());
        Corpus {
            spec: self.spec,
            items: self.items[..k].to_vec(),
            pixels: self.pixels[..k].to_vec(),
        }
    }

    /// Items matching `keep`, in order.
    pub fn filter(&self, keep: impl Fn(&Item) -> bool) -> Corpus {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.items[i])).collect();
        Corpus {
            spec: self.spec,
            items: idx.iter().map(|&i| self.items[i]).collect(),
            pixels: idx.iter().map(|&i| self.pixels[i].clone()).collect(),
        }
    }

    /// Write `<dir>/NNNNN.ppm` files and `<dir>/manifest.tsv`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n = self.spec.size;
        let mut manifest = String::from("path\tlabel\tgenerator_id\tseed\n");
        for (i, (item, px)) in self.items.iter().zip(&self.pixels).enumerate() {
            let name = format!("{i:05}.ppm");
            let path = dir.join(&name);
            let (magic, body) = match self.spec.channels {
                1 => ("P5", px.clone()),
                3 => ("P6", interleave(px, n * n)),
                c => {
                    return Err(Error::Config(format!("{c}-channel images have no PPM form")));
                }
            };
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(format!("{magic}\n{n} {n}\n255\n").as_bytes())
                .and_then(|_| f.write_all(&body))
                .map_err(|e| Error::io(&path, e))?;
            manifest.push_str(&format!("{name}\t{}\t{}\t{}\n", item.label(), item.generator, item.seed));
        }
        let mpath = dir.join("manifest.tsv");
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
    }

    /// Load a split written by [`Corpus::write_dir`].
    pub fn read_dir(dir: &Path) -> Result<Corpus> {
        Self::read_manifest(&dir.join("manifest.tsv"))
    }

    /// Load a manifest; image paths are relative to its directory.
    pub fn read_manifest(mpath: &Path) -> Result<Corpus> {
        let dir = mpath.parent().unwrap_or(Path::new("."));
        let text = fs::read_to_string(mpath).map_err(|e| Error::io(mpath, e))?;
        let mut items = Vec::new();
        let mut pixels = Vec::new();
        let mut spec: Option<SyntheticSpec> = None;
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::Parse(format!("{}:{}: expected 4 columns", mpath.display(), ln + 1)));
            }
            let generator: Generator = cols[2].parse()?;
            let seed: u64 = cols[3]
                .parse()
                .map_err(|_| Error::Parse(format!("{}:{}: bad seed", mpath.display(), ln + 1)))?;
            let label: f64 = cols[1]
                .parse()
                .map_err(|_| Error::Parse(format!("{}:{}: bad label", mpath.display(), ln + 1)))?;
            if label != generator.label() {
                return Err(Error::Parse(format!(
                    "{}:{}: label {label} contradicts generator {generator}",
                    mpath.display(),
                    ln + 1
                )));
            }
            let (s, px) = read_pnm(&dir.join(cols[0]))?;
            match spec {
                None => spec = Some(s),
                Some(prev) if prev != s => {
                    return Err(Error::Parse(format!("{}: mixed image sizes", dir.display())));
                }
                _ => {}
            }
            items.push(Item { generator, seed });
            pixels.push(px);
        }
        let spec = spec.ok_or_else(|| Error::Parse(format!("{}: empty manifest", mpath.display())))?;
        Ok(Corpus { spec, items, pixels })
    }
}

/// Planar `[C×HW]` to interleaved RGB.
fn interleave(px: &[u8], hw: usize) -> Vec<u8> {
    (0..hw).flat_map(|i| (0..3).map(move |c| px[c * hw + i])).collect()
}

fn read_pnm(path: &Path) -> Result<(SyntheticSpec, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Parse(format!("{}: {m}", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("not a binary PGM/PPM")),
    };
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    if w != h || fields[3] != "255" {
        return Err(bad("expected a square 8-bit image"));
    }
    let body = bytes.get(pos..pos + channels * w * h).ok_or_else(|| bad("truncated pixels"))?;
    let px = if channels == 1 {
        body.to_vec()
    } else {
        (0..3).flat_map(|c| (0..w * h).map(move |i| body[i * 3 + c])).collect()
    };
    Ok((SyntheticSpec { size: w, channels }, px))
}

/// Train/val/test plan with test generators held out of training.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    pub spec: SyntheticSpec,
    pub train_fakes: Vec<Generator>,
    pub test_fakes: Vec<Generator>,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

pub struct Splits {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        let train: BTreeSet<String> = self.train_fakes.iter().map(|g| g.to_string()).collect();
        if let Some(g) = self.test_fakes.iter().find(|g| train.contains(&g.to_string())) {
            return Err(Error::Config(format!("test generator {g} also appears in training")));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Splits> {
        self.validate()?;
        Ok(Splits {
            train: Corpus::build(self.spec, "train", self.train_count, &self.train_fakes, self.seed)?,
            val: Corpus::build(self.spec, "val", self.val_count, &self.train_fakes, self.seed)?,
            test: Corpus::build(self.spec, "test", self.test_count, &self.test_fakes, self.seed)?,
        })
    }
}
