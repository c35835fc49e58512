//! Browser bindings over the molex core. Each export has a plain Rust twin
//! returning `Result<_, String>` so the logic is testable off the browser.

use molex::forge::{render, Generator, SyntheticSpec};
use molex::mole::{load_balance_loss, route, BlockSet, MoleConfig, Router};
use molex::spectra::{avg_fft_spectrum, HighPass};
use molex::tensor::Tensor;
use molex::vit::{count_trainable, Preset, ViTConfig};
use wasm_bindgen::prelude::*;

fn msg(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Averaged log spectrum of `count` images plus the first image, both as RGBA.
#[wasm_bindgen]
pub struct SpectrumView {
    size: usize,
    spectrum: Vec<u8>,
    sample: Vec<u8>,
    peak: f64,
}

#[wasm_bindgen]
impl SpectrumView {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    #[wasm_bindgen(getter)]
    pub fn spectrum(&self) -> Vec<u8> {
        self.spectrum.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn sample(&self) -> Vec<u8> {
        self.sample.clone()
    }

    /// Brightest non-DC bin over the median bin, in magnitude.
    #[wasm_bindgen(getter)]
    pub fn peak(&self) -> f64 {
        self.peak
    }
}

fn gray_rgba(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    values
        .iter()
        .flat_map(|v| {
            let g = (255.0 * (v - lo) / span).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

pub fn spectrum_view(generator: &str, seed: u64, count: usize, size: usize, filter: &str) -> Result<SpectrumView, String> {
    let generator: Generator = generator.parse().map_err(msg)?;
    let filter: HighPass = filter.parse().map_err(msg)?;
    let spec = SyntheticSpec { size, channels: 3 };
    spec.validate().map_err(msg)?;
    if count == 0 || count > 256 {
        return Err("count must be in 1..=256".into());
    }
    let images = (0..count as u64)
        .map(|i| render(&spec, &generator, seed + i))
        .collect::<molex::Result<Vec<Tensor>>>()
        .map_err(msg)?;
    let map = avg_fft_spectrum(&images, filter).map_err(msg)?;
    let shifted = molex::spectra::fftshift(&map.values, size);
    let mut sorted: Vec<f64> = map.values.iter().map(|v| v.exp_m1()).collect();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let c = size / 2;
    let peak = shifted
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != c * size + c)
        .map(|(_, v)| v.exp_m1())
        .fold(0.0, f64::max)
        / median.max(f64::MIN_POSITIVE);
    let first = &images[0];
    let hw = size * size;
    let sample = (0..hw)
        .flat_map(|i| {
            let px = |ch: usize| (first.data()[ch * hw + i] * 255.0).round() as u8;
            [px(0), px(1), px(2), 255]
        })
        .collect();
    Ok(SpectrumView {
        size,
        spectrum: gray_rgba(&shifted),
        sample,
        peak,
    })
}

#[wasm_bindgen]
pub fn spectrum(generator: &str, seed: u32, count: u32, size: u32, filter: &str) -> Result<SpectrumView, JsError> {
    spectrum_view(generator, seed as u64, count as usize, size as usize, filter).map_err(|e| JsError::new(&e))
}

/// Dispatch fractions, mean gate probabilities and the balance penalty for one routing.
#[wasm_bindgen]
pub struct RouterView {
    fractions: Vec<f64>,
    gates: Vec<f64>,
    penalty: f64,
}

#[wasm_bindgen]
impl RouterView {
    #[wasm_bindgen(getter)]
    pub fn fractions(&self) -> Vec<f64> {
        self.fractions.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn gates(&self) -> Vec<f64> {
        self.gates.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn penalty(&self) -> f64 {
        self.penalty
    }
}

/// Route `tokens` synthetic tokens (a shared direction plus `spread`-scaled noise)
/// through a random router whose first row is pulled toward the shared
/// direction by `bias`.
pub fn router_view(tokens: usize, experts: usize, spread: f64, bias: f64, seed: u64) -> Result<RouterView, String> {
    const D: usize = 16;
    if tokens == 0 || experts == 0 || experts > 16 {
        return Err("need at least one token and 1..=16 experts".into());
    }
    let common = Tensor::randn(vec![D], 1.0, seed, "common");
    let noise = Tensor::randn(vec![tokens, D], spread.max(0.0), seed, "noise");
    let x: Vec<f64> = noise
        .data()
        .chunks(D)
        .flat_map(|row| row.iter().zip(common.data()).map(|(n, c)| n + c).collect::<Vec<_>>())
        .collect();
    let x = Tensor::new(vec![tokens, D], x).map_err(msg)?;
    let mut w = Tensor::randn(vec![experts, D], 1.0 / (D as f64).sqrt(), seed, "router");
    let norm2: f64 = common.data().iter().map(|v| v * v).sum();
    for (wv, c) in w.data_mut()[..D].iter_mut().zip(common.data()) {
        *wv += bias * c / norm2;
    }
    let r = route(&x, &Router { weight: w }).map_err(msg)?;
    let stats = molex::mole::RoutingStats::from_probs(r.probs.data(), experts);
    let penalty = load_balance_loss(&stats, experts).map_err(msg)?;
    Ok(RouterView {
        fractions: stats.f,
        gates: stats.p,
        penalty,
    })
}

#[wasm_bindgen]
pub fn explore_router(tokens: u32, experts: u32, spread: f64, bias: f64, seed: u32) -> Result<RouterView, JsError> {
    router_view(tokens as usize, experts as usize, spread, bias, seed as u64).map_err(|e| JsError::new(&e))
}

/// Tab-separated count report for one adapter layout.
pub fn param_report(
    preset: &str,
    blocks: &str,
    shared_rank: usize,
    expert_ranks: &str,
    use_shared: bool,
    use_separate: bool,
) -> Result<String, String> {
    let preset: Preset = preset.parse().map_err(msg)?;
    let vit = ViTConfig::preset(preset);
    let expert_ranks = expert_ranks
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| format!("bad rank `{s}`")))
        .collect::<Result<Vec<_>, _>>()?;
    let m = MoleConfig {
        blocks: blocks.parse::<BlockSet>().map_err(msg)?,
        shared_rank,
        expert_ranks,
        use_shared,
        use_separate,
        ..MoleConfig::default()
    };
    m.validate().map_err(msg)?;
    let r = count_trainable(&vit, Some(&m)).map_err(msg)?;
    let per_block = m.params_per_block(vit.embed_dim);
    Ok(format!(
        "trainable\t{}\nper adapted block\t{per_block}\nhead\t{}\nfrozen backbone\t{}\ntrainable / frozen\t{:.3}%\n",
        r.trainable,
        vit.head_dim() + 1,
        r.frozen,
        r.percentage
    ))
}

#[wasm_bindgen]
pub fn count_params(
    preset: &str,
    blocks: &str,
    shared_rank: u32,
    expert_ranks: &str,
    use_shared: bool,
    use_separate: bool,
) -> Result<String, JsError> {
    param_report(preset, blocks, shared_rank as usize, expert_ranks, use_shared, use_separate).map_err(|e| JsError::new(&e))
}
