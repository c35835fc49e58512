use molex::forge::{gen_fake, gen_real, Generator, SyntheticSpec};
use molex::spectra::{
    avg_fft_spectrum, export_spectrum, fft, fft2, highpass, read_spectrum_csv, HighPass, SpectrumMap, C64,
};
use molex::tensor::derived_rng;
use molex::Tensor;
use rand::Rng;

fn naive_dft(x: &[C64]) -> Vec<C64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, v)| {
                    let ang = -2.0 * std::f64::consts::PI * (k * t % n) as f64 / n as f64;
                    v * C64::new(ang.cos(), ang.sin())
                })
                .sum()
        })
        .collect()
}

fn random_signal(n: usize, seed: u64) -> Vec<C64> {
    let mut rng = derived_rng(seed, "signal");
    (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
}

#[test]
fn fft_matches_naive_dft() {
    for n in [1, 2, 4, 8, 16, 32, 64] {
        let x = random_signal(n, n as u64);
        let mut y = x.clone();
        fft(&mut y).unwrap();
        for (a, b) in y.iter().zip(naive_dft(&x)) {
            assert!((a - b).norm() < 1e-9, "n={n}");
        }
    }
}

#[test]
fn fft2_matches_separable_naive_dft() {
    let n = 16;
    let x = random_signal(n * n, 5);
    let mut rows: Vec<C64> = x.chunks(n).flat_map(naive_dft).collect();
    for c in 0..n {
        let col: Vec<C64> = (0..n).map(|r| rows[r * n + c]).collect();
        for (r, v) in naive_dft(&col).into_iter().enumerate() {
            rows[r * n + c] = v;
        }
    }
    let mut y = x.clone();
    fft2(&mut y, n).unwrap();
    for (a, b) in y.iter().zip(&rows) {
        assert!((a - b).norm() < 1e-9);
    }
}

#[test]
fn parseval_holds() {
    for n in [8, 32, 64] {
        let x = random_signal(n, 100 + n as u64);
        let mut y = x.clone();
        fft(&mut y).unwrap();
        let et: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let ef: f64 = y.iter().map(|v| v.norm_sqr()).sum::<f64>() / n as f64;
        assert!((et - ef).abs() < 1e-9 * et.max(1.0));
    }
}

fn dominant_bins(map: &SpectrumMap, k: usize) -> Vec<(isize, isize)> {
    let n = map.size as isize;
    let mut idx: Vec<usize> = (0..map.values.len()).collect();
    idx.sort_by(|&a, &b| map.values[b].total_cmp(&map.values[a]));
    idx.into_iter()
        .take(k)
        .map(|i| ((i as isize % n) - n / 2, (i as isize / n) - n / 2))
        .collect()
}

fn sinusoid(n: usize, p: usize) -> Tensor {
    let img: Vec<f64> = (0..n * n)
        .map(|i| 0.5 + 0.3 * (2.0 * std::f64::consts::PI * (i % n) as f64 / p as f64).cos())
        .collect();
    Tensor::new(vec![1, n, n], img).unwrap()
}

/// The median residual is nonlinear, so only p = 4 (where it reproduces the
/// input) is a pure tone under it; the Gaussian residual is linear for every p.
#[test]
fn sinusoid_gives_two_horizontal_peaks() {
    let n = 64;
    let cases = [(4, HighPass::Median3), (4, HighPass::Gaussian(1.0)), (8, HighPass::Gaussian(1.0)), (16, HighPass::Gaussian(1.0))];
    for (p, filter) in cases {
        let map = avg_fft_spectrum(&[sinusoid(n, p)], filter).unwrap();
        let mut top = dominant_bins(&map, 2);
        top.sort();
        let f = (n / p) as isize;
        assert_eq!(top, vec![(-f, 0), (f, 0)], "period {p} {filter}");
    }
}

#[test]
fn median_residual_of_period_eight_keeps_odd_harmonics() {
    let map = avg_fft_spectrum(&[sinusoid(64, 8)], HighPass::Median3).unwrap();
    assert!((map.at(8, 0) - map.at(-8, 0)).abs() < 1e-9);
    assert!(map.at(24, 0) > 0.8 * map.at(8, 0));
}

#[test]
fn white_noise_spectrum_is_flat() {
    let n = 64;
    let imgs: Vec<Tensor> = (0..64)
        .map(|s| {
            let mut rng = derived_rng(s, "white");
            Tensor::new(vec![1, n, n], (0..n * n).map(|_| rng.gen::<f64>()).collect()).unwrap()
        })
        .collect();
    let map = avg_fft_spectrum(&imgs, HighPass::Median3).unwrap();
    let mut v = map.values.clone();
    v.sort_by(f64::total_cmp);
    let ratio = v[v.len() - 1] / v[v.len() / 2];
    assert!(ratio < 3.0, "max/median {ratio}");
}

#[test]
fn mismatched_sizes_rejected() {
    let a = Tensor::zeros(vec![1, 8, 8]);
    let b = Tensor::zeros(vec![1, 16, 16]);
    assert!(avg_fft_spectrum(&[a, b], HighPass::Median3).is_err());
    assert!(avg_fft_spectrum(&[], HighPass::Median3).is_err());
}

#[test]
fn highpass_is_zero_mean() {
    let img = gen_real(&SyntheticSpec { size: 32, channels: 1 }, 4).unwrap();
    for f in [HighPass::Median3, HighPass::Gaussian(1.0)] {
        let r = highpass(img.data(), 32, f).unwrap();
        assert!((r.iter().sum::<f64>() / r.len() as f64).abs() < 1e-6);
    }
}

#[test]
fn grid_fakes_stand_out_and_reals_do_not() {
    let spec = SyntheticSpec::default();
    let grid: Generator = "grid(4,0.1)".parse().unwrap();
    let fakes: Vec<Tensor> = (0..64).map(|s| gen_fake(&spec, &grid, s).unwrap()).collect();
    let reals: Vec<Tensor> = (0..64).map(|s| gen_real(&spec, 1000 + s).unwrap()).collect();
    let mf = avg_fft_spectrum(&fakes, HighPass::Median3).unwrap();
    let mr = avg_fft_spectrum(&reals, HighPass::Median3).unwrap();
    let q = (spec.size / 4) as isize;
    for (u, v) in [(q, 0), (-q, 0), (0, q), (0, -q)] {
        let f = mf.peak_to_background(u, v, 3);
        let r = mr.peak_to_background(u, v, 3);
        assert!(f >= 5.0, "fake ratio {f} at ({u},{v})");
        assert!(r < 2.0, "real ratio {r} at ({u},{v})");
    }
}

#[test]
fn export_formats() {
    let dir = tempfile::tempdir().unwrap();
    let flat = SpectrumMap {
        size: 64,
        values: vec![1.25; 64 * 64],
        count: 3,
        filter: HighPass::Median3,
    };
    let (pgm, _) = export_spectrum(&flat, &dir.path().join("flat")).unwrap();
    let bytes = std::fs::read(pgm).unwrap();
    let header = b"P5 64 64 255\n";
    assert!(bytes.starts_with(header));
    let body = &bytes[header.len()..];
    assert_eq!(body.len(), 64 * 64);
    assert!(body.iter().all(|&b| b == body[0]));

    let imgs: Vec<Tensor> = (0..3).map(|s| gen_real(&SyntheticSpec::default(), s).unwrap()).collect();
    let map = avg_fft_spectrum(&imgs, HighPass::Gaussian(1.5)).unwrap();
    let (_, csv) = export_spectrum(&map, &dir.path().join("real")).unwrap();
    let back = read_spectrum_csv(&csv).unwrap();
    assert_eq!((back.size, back.count, back.filter), (map.size, map.count, map.filter));
    for (a, b) in back.values.iter().zip(&map.values) {
        assert!((a - b).abs() < 1e-9);
    }
    let missing = dir.path().join("no/such/dir/x");
    let err = export_spectrum(&map, &missing).unwrap_err().to_string();
    assert!(err.contains("no/such/dir"));
}
