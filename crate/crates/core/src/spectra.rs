//! Averaged log-magnitude spectra of high-pass residuals.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type C64 = Complex<f64>;

fn check_pow2(n: usize, what: &str) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::InvalidShape(format!("{what} size {n} is not a power of two")));
    }
    Ok(())
}

/// In-place 1-D forward transform (unnormalised).
pub fn fft(buf: &mut [C64]) -> Result<()> {
    check_pow2(buf.len(), "fft")?;
    FftPlanner::new().plan_fft_forward(buf.len()).process(buf);
    Ok(())
}

fn fft2_dir(data: &mut [C64], n: usize, inverse: bool) -> Result<()> {
    check_pow2(n, "fft2")?;
    if data.len() != n * n {
        return Err(Error::shape("fft2", &[data.len()], &[n * n]));
    }
    let mut planner = FftPlanner::new();
    let plan = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    plan.process(data);
    let mut col = vec![C64::default(); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = data[y * n + x];
        }
        plan.process(&mut col);
        for y in 0..n {
            data[y * n + x] = col[y];
        }
    }
    if inverse {
        let s = 1.0 / (n * n) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
    Ok(())
}

/// Forward 2-D transform of a square row-major grid.
pub fn fft2(data: &mut [C64], n: usize) -> Result<()> {
    fft2_dir(data, n, false)
}

/// Inverse 2-D transform, normalised by `1/n²`.
pub fn ifft2(data: &mut [C64], n: usize) -> Result<()> {
    fft2_dir(data, n, true)
}

/// Channel mean of a `[C×H×W]` image as a flat `H·W` grid.
pub fn grayscale(image: &Tensor) -> Result<(Vec<f64>, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::InvalidShape(format!("expected square [C×H×W] image, got {s:?}")));
    }
    let (c, n) = (s[0], s[1]);
    let mut out = vec![0.0; n * n];
    for plane in image.data().chunks(n * n) {
        out.iter_mut().zip(plane).for_each(|(o, v)| *o += v / c as f64);
    }
    Ok((out, n))
}

/// Low-pass estimate subtracted to form the residual.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HighPass {
    Median3,
    Gaussian(f64),
}

impl fmt::Display for HighPass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HighPass::Median3 => write!(f, "median3"),
            HighPass::Gaussian(s) => write!(f, "gaussian({s})"),
        }
    }
}

impl FromStr for HighPass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "median3" || s == "median" {
            return Ok(HighPass::Median3);
        }
        if let Some(inner) = s.strip_prefix("gaussian(").and_then(|r| r.strip_suffix(')')) {
            let sigma: f64 = inner
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad gaussian sigma `{inner}`")))?;
            return Ok(HighPass::Gaussian(sigma));
        }
        Err(Error::Parse(format!("unknown high-pass filter `{s}`")))
    }
}

/// `img − median3×3(img)` with replicated borders.
pub fn median_residual(img: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    let clamp = |v: isize| v.clamp(0, n as isize - 1) as usize;
    let mut win = [0.0f64; 9];
    for y in 0..n {
        for x in 0..n {
            let mut k = 0;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    win[k] = img[clamp(y as isize + dy) * n + clamp(x as isize + dx)];
                    k += 1;
                }
            }
            win.sort_by(f64::total_cmp);
            out[y * n + x] = img[y * n + x] - win[4];
        }
    }
    out
}

/// Residual with the mean removed.
pub fn highpass(img: &[f64], n: usize, filter: HighPass) -> Result<Vec<f64>> {
    if img.len() != n * n {
        return Err(Error::shape("highpass", &[img.len()], &[n * n]));
    }
    let mut r = match filter {
        HighPass::Median3 => median_residual(img, n),
        HighPass::Gaussian(sigma) => {
            let t = Tensor::new(vec![1, n, n], img.to_vec())?;
            let low = crate::forge::gaussian_blur(&t, sigma)?;
            img.iter().zip(low.data()).map(|(a, b)| a - b).collect()
        }
    };
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    r.iter_mut().for_each(|v| *v -= mean);
    Ok(r)
}

/// DC-centred grid of averaged `log(1 + |F|)` values.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumMap {
    pub size: usize,
    pub values: Vec<f64>,
    pub count: usize,
    pub filter: HighPass,
}

impl SpectrumMap {
    /// Value at signed frequency `(u, v)` (horizontal, vertical) relative to DC.
    pub fn at(&self, u: isize, v: isize) -> f64 {
        let n = self.size as isize;
        let c = n / 2;
        let x = (c + u).rem_euclid(n) as usize;
        let y = (c + v).rem_euclid(n) as usize;
        self.values[y * self.size + x]
    }

    /// Magnitude at `(u, v)` over the median magnitude of a `(2·radius+1)²` window
    /// around it, excluding the centre bin. Magnitudes are recovered from the
    /// averaged log values, so this is a ratio of geometric means.
    pub fn peak_to_background(&self, u: isize, v: isize, radius: isize) -> f64 {
        let mut bg: Vec<f64> = Vec::new();
        for dv in -radius..=radius {
            for du in -radius..=radius {
                if du != 0 || dv != 0 {
                    bg.push(self.at(u + du, v + dv).exp_m1());
                }
            }
        }
        bg.sort_by(f64::total_cmp);
        self.at(u, v).exp_m1() / bg[bg.len() / 2]
    }
}

/// Log-magnitude spectrum of one image's residual, in FFT (uncentred) order.
pub fn log_spectrum(image: &Tensor, filter: HighPass) -> Result<Vec<f64>> {
    let (gray, n) = grayscale(image)?;
    check_pow2(n, "spectrum")?;
    let r = highpass(&gray, n, filter)?;
    let mut buf: Vec<C64> = r.into_iter().map(|v| C64::new(v, 0.0)).collect();
    fft2(&mut buf, n)?;
    Ok(buf.into_iter().map(|z| z.norm().ln_1p()).collect())
}

fn pairwise_sum(maps: &[Vec<f64>]) -> Vec<f64> {
    match maps.len() {
        1 => maps[0].clone(),
        k => {
            let (l, r) = maps.split_at(k / 2);
            let mut a = pairwise_sum(l);
            a.iter_mut().zip(pairwise_sum(r)).for_each(|(x, y)| *x += y);
            a
        }
    }
}

/// Quadrant swap so DC lands at `(n/2, n/2)`.
pub fn fftshift(values: &[f64], n: usize) -> Vec<f64> {
    let h = n / 2;
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[((y + h) % n) * n + (x + h) % n] = values[y * n + x];
        }
    }
    out
}

pub fn avg_fft_spectrum(images: &[Tensor], filter: HighPass) -> Result<SpectrumMap> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("spectrum of an empty image set".into()))?;
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::shape("avg_fft_spectrum", im.shape(), first.shape()));
        }
    }
    let n = first.shape().last().copied().unwrap_or(0);
    let maps = images
        .iter()
        .map(|im| log_spectrum(im, filter))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = pairwise_sum(&maps);
    let k = images.len() as f64;
    sum.iter_mut().for_each(|v| *v /= k);
    Ok(SpectrumMap {
        size: n,
        values: fftshift(&sum, n),
        count: images.len(),
        filter,
    })
}

/// Write `<stem>.pgm` (min-max scaled to 8 bits) and `<stem>.csv`. Returns both paths.
pub fn export_spectrum(map: &SpectrumMap, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let pgm = stem.with_extension("pgm");
    let csv = stem.with_extension("csv");
    let lo = map.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut bytes = format!("P5 {} {} 255\n", map.size, map.size).into_bytes();
    bytes.extend(map.values.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            128
        }
    }));
    fs::write(&pgm, bytes).map_err(|e| Error::io(&pgm, e))?;

    let mut text = format!("# filter={} count={}\n", map.filter, map.count);
    for row in map.values.chunks(map.size) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(&csv, text).map_err(|e| Error::io(&csv, e))?;
    Ok((pgm, csv))
}

/// Read the CSV written by [`export_spectrum`].
pub fn read_spectrum_csv(path: &Path) -> Result<SpectrumMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut filter = HighPass::Median3;
    let mut count = 1;
    let mut values = Vec::new();
    let mut rows = 0;
    for line in text.lines() {
        if let Some(meta) = line.strip_prefix('#') {
            for kv in meta.split_whitespace() {
                match kv.split_once('=') {
                    Some(("filter", v)) => filter = v.parse()?,
                    Some(("count", v)) => {
                        count = v.parse().map_err(|_| Error::Parse(format!("bad count `{v}`")))?
                    }
                    _ => {}
                }
            }
            continue;
        }
        for cell in line.split(',') {
            values.push(
                cell.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad spectrum value `{cell}`")))?,
            );
        }
        rows += 1;
    }
    if values.len() != rows * rows {
        return Err(Error::Parse(format!("{}: not a square grid", path.display())));
    }
    Ok(SpectrumMap {
        size: rows,
        values,
        count,
        filter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_zero_residual() {
        let img = vec![0.4; 64];
        assert!(median_residual(&img, 8).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bright_pixel_survives_residual() {
        let mut img = vec![0.0; 64];
        img[3 * 8 + 4] = 1.0;
        let r = median_residual(&img, 8);
        assert_eq!(r[3 * 8 + 4], 1.0);
        let h = highpass(&img, 8, HighPass::Median3).unwrap();
        assert!((h[3 * 8 + 4] - (1.0 - 1.0 / 64.0)).abs() < 1e-12);
        assert!(h.iter().sum::<f64>().abs() < 1e-6);
    }

    #[test]
    fn ramp_residual_energy_is_small() {
        let n = 32;
        let img: Vec<f64> = (0..n * n).map(|i| ((i % n) + (i / n)) as f64 / (2 * n) as f64).collect();
        let r = median_residual(&img, n);
        let e_r: f64 = r.iter().map(|v| v * v).sum();
        let e_i: f64 = img.iter().map(|v| v * v).sum();
        assert!(e_r < 0.01 * e_i);
    }

    #[test]
    fn non_power_of_two_rejected() {
        let mut b = vec![C64::default(); 6];
        assert!(fft(&mut b).is_err());
        let t = Tensor::zeros(vec![1, 6, 6]);
        assert!(log_spectrum(&t, HighPass::Median3).is_err());
    }

    #[test]
    fn filter_labels_round_trip() {
        for f in [HighPass::Median3, HighPass::Gaussian(1.5)] {
            assert_eq!(f.to_string().parse::<HighPass>().unwrap(), f);
        }
    }
}
