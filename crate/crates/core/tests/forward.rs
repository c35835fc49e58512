//! Forward-pass contracts of the backbone and the MoLE bypass.

use molex::mole::{
    self, load_balance_loss, mole_mlp_forward, BlockSet, FrozenMlp, GateMode, LoraExpert, MoleConfig, MoleLayer,
    Router, RoutingStats,
};
use molex::params::ParamStore;
use molex::tensor::derived_rng;
use molex::vit::{self, Preset, ViTConfig};
use molex::Tensor;
use rand::Rng;

fn tiny() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        ..ViTConfig::preset(Preset::Toy16)
    }
}

fn images(cfg: &ViTConfig, batch: usize, seed: u64) -> Tensor {
    let shape = vec![batch, cfg.channels, cfg.image_size, cfg.image_size];
    let t = Tensor::randn(shape.clone(), 0.3, seed, "images");
    Tensor::new(shape, t.data().iter().map(|v| v + 0.5).collect()).unwrap()
}

#[test]
fn zero_weights_give_zero_features() {
    let cfg = tiny();
    let mut store = vit::init_backbone(&cfg, 1).unwrap();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        let keep_one = n.ends_with("ln_pre.weight")
            || n.ends_with("ln_post.weight")
            || n.ends_with("ln_1.weight")
            || n.ends_with("ln_2.weight");
        let t = store.get_mut(&n).unwrap();
        let fill = if keep_one { 1.0 } else { 0.0 };
        t.data_mut().iter_mut().for_each(|v| *v = fill);
    }
    let (feat, stats) = vit::vit_forward(&cfg, &store, &images(&cfg, 2, 3), None).unwrap();
    assert_eq!(feat.shape(), &[2, 16]);
    assert!(feat.data().iter().all(|&v| v == 0.0), "{:?}", feat.data());
    assert!(stats.is_empty());
}

#[test]
fn zero_b_adapters_are_bitwise_transparent() {
    let cfg = ViTConfig::preset(Preset::Toy16);
    let base = vit::init_backbone(&cfg, 5).unwrap();
    let x = images(&cfg, 3, 9);
    let (plain, _) = vit::vit_forward(&cfg, &base, &x, None).unwrap();
    for blocks in [BlockSet::Last(1), BlockSet::All] {
        let m = MoleConfig {
            blocks,
            ..MoleConfig::default()
        };
        let mut store = base.clone();
        mole::init_adapters(&mut store, &cfg, &m, 11).unwrap();
        let (adapted, stats) = vit::vit_forward(&cfg, &store, &x, Some(&m)).unwrap();
        let same = plain.data().iter().zip(adapted.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "adapted forward drifted with B = 0");
        assert!(!stats.is_empty());
        for s in &stats {
            assert_eq!(s.tokens, 3 * cfg.num_tokens());
            assert!((s.f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((s.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            // zero router: uniform gates, every token to expert 0
            assert_eq!(s.f[0], 1.0);
        }
    }
}

#[test]
fn adapter_outside_depth_is_rejected() {
    let cfg = ViTConfig::preset(Preset::Toy16);
    let mut store = vit::init_backbone(&cfg, 5).unwrap();
    let m = MoleConfig {
        blocks: BlockSet::List(vec![cfg.depth]),
        ..MoleConfig::default()
    };
    assert!(mole::init_adapters(&mut store, &cfg, &m, 1).is_err());
    assert!(vit::vit_forward(&cfg, &store, &images(&cfg, 1, 1), Some(&m)).is_err());
}

#[test]
fn wrong_image_size_is_rejected() {
    let cfg = ViTConfig::preset(Preset::Toy16);
    let store = vit::init_backbone(&cfg, 5).unwrap();
    let small = images(&tiny(), 1, 1);
    assert!(vit::vit_forward(&cfg, &store, &small, None).is_err());
}

/// Moving patch (i, j) to (j, i) and swapping the matching positional rows
/// only relabels tokens, which attention cannot see.
#[test]
fn patch_permutation_with_positions_keeps_cls() {
    let cfg = ViTConfig::preset(Preset::Toy16);
    let store = vit::init_backbone(&cfg, 21).unwrap();
    let x = images(&cfg, 2, 4);
    let (n, p, g) = (cfg.image_size, cfg.patch_size, cfg.grid());
    let mut xt = x.clone();
    for b in 0..2 {
        for c in 0..cfg.channels {
            for y in 0..n {
                for xx in 0..n {
                    // transpose the patch grid, keep in-patch layout
                    let (py, px, iy, ix) = (y / p, xx / p, y % p, xx % p);
                    let src = ((b * cfg.channels + c) * n + y) * n + xx;
                    let dst = ((b * cfg.channels + c) * n + px * p + iy) * n + py * p + ix;
                    xt.data_mut()[dst] = x.data()[src];
                }
            }
        }
    }
    let mut permuted = store.clone();
    let d = cfg.embed_dim;
    let pos = store.get("backbone.positional_embedding").unwrap().clone();
    let dst = permuted.get_mut("backbone.positional_embedding").unwrap();
    for py in 0..g {
        for px in 0..g {
            let from = 1 + py * g + px;
            let to = 1 + px * g + py;
            dst.data_mut()[to * d..(to + 1) * d].copy_from_slice(&pos.data()[from * d..(from + 1) * d]);
        }
    }
    let (a, _) = vit::vit_forward(&cfg, &store, &x, None).unwrap();
    let (b, _) = vit::vit_forward(&cfg, &permuted, &xt, None).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-10, "{u} vs {v}");
    }
}

fn mlp(d: usize, hidden: usize, seed: u64) -> FrozenMlp {
    FrozenMlp {
        fc_weight: Tensor::randn(vec![hidden, d], 0.5, seed, "fc"),
        fc_bias: Tensor::randn(vec![hidden], 0.1, seed, "fcb"),
        proj_weight: Tensor::randn(vec![d, hidden], 0.5, seed, "proj"),
        proj_bias: Tensor::randn(vec![d], 0.1, seed, "projb"),
    }
}

fn frozen_only(x: &Tensor, m: &FrozenMlp) -> Tensor {
    let layer = MoleLayer {
        shared: None,
        experts: vec![LoraExpert::new(Tensor::zeros(vec![1, x.shape()[1]]), Tensor::zeros(vec![x.shape()[1], 1]), 1.0).unwrap()],
        router: Router {
            weight: Tensor::zeros(vec![1, x.shape()[1]]),
        },
        gate: GateMode::Weighted,
    };
    mole_mlp_forward(x, m, &layer).unwrap().0
}

#[test]
fn zero_b_bypass_is_bitwise_frozen_mlp() {
    let d = 6;
    let x = Tensor::randn(vec![5, d], 1.0, 2, "x");
    let m = mlp(d, 12, 3);
    let layer = MoleLayer {
        shared: Some(LoraExpert::new(Tensor::randn(vec![2, d], 1.0, 1, "sa"), Tensor::zeros(vec![d, 2]), 2.0).unwrap()),
        experts: [1usize, 2, 3]
            .iter()
            .map(|&r| LoraExpert::new(Tensor::randn(vec![r, d], 1.0, r as u64, "ea"), Tensor::zeros(vec![d, r]), r as f64).unwrap())
            .collect(),
        router: Router {
            weight: Tensor::randn(vec![3, d], 1.0, 4, "w"),
        },
        gate: GateMode::Weighted,
    };
    let (h, stats) = mole_mlp_forward(&x, &m, &layer).unwrap();
    let base = frozen_only(&x, &m);
    assert!(h.data().iter().zip(base.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(stats.tokens, 5);
    assert_eq!(stats.assignments.len(), 5);
}

/// One token, d = 2, everything rank 1. Router logits [0, 0, ln(0.7/0.15)]
/// make expert 2 win with gate exactly 0.7.
#[test]
fn hand_evaluated_bypass() {
    let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let m = mlp(2, 4, 8);
    let z = (0.7f64 / 0.15).ln();
    let router = Router {
        weight: Tensor::new(vec![3, 2], vec![0.0, 0.0, 0.0, 0.0, z, 0.0]).unwrap(),
    };
    let shared = LoraExpert::new(
        Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(),
        Tensor::new(vec![2, 1], vec![0.5, -1.0]).unwrap(),
        2.0,
    )
    .unwrap();
    let e = |a: [f64; 2], b: [f64; 2]| {
        LoraExpert::new(Tensor::new(vec![1, 2], a.to_vec()).unwrap(), Tensor::new(vec![2, 1], b.to_vec()).unwrap(), 1.0)
            .unwrap()
    };
    let layer = MoleLayer {
        shared: Some(shared),
        experts: vec![e([9.0, 9.0], [9.0, 9.0]), e([-9.0, 1.0], [3.0, 3.0]), e([0.0, 1.0], [1.0, 4.0])],
        router,
        gate: GateMode::Weighted,
    };
    let (h, stats) = mole_mlp_forward(&x, &m, &layer).unwrap();
    assert_eq!(stats.assignments, vec![2]);
    assert!((stats.gates[0] - 0.7).abs() < 1e-12);
    // shared: scale 2, a·x = 3, b = (0.5, −1) → (3, −6)
    // expert 2: a·x = 2, b = (1, 4) → (2, 8), times gate 0.7 → (1.4, 5.6)
    let want = [3.0 + 1.4, -6.0 + 5.6];
    let base = frozen_only(&x, &m);
    for c in 0..2 {
        let delta = h.data()[c] - base.data()[c];
        assert!((delta - want[c]).abs() < 1e-12, "{delta} vs {}", want[c]);
    }
}

#[test]
fn one_expert_per_token() {
    let d = 5;
    let x = Tensor::randn(vec![40, d], 1.0, 12, "x");
    let m = mlp(d, 8, 1);
    let base = frozen_only(&x, &m);
    // experts with disjoint output coordinates reveal which one fired
    let experts: Vec<LoraExpert> = (0..3)
        .map(|j| {
            let mut b = vec![0.0; d];
            b[j] = 1.0;
            LoraExpert::new(Tensor::new(vec![1, d], vec![1.0; d]).unwrap(), Tensor::new(vec![d, 1], b).unwrap(), 1.0).unwrap()
        })
        .collect();
    let layer = MoleLayer {
        shared: None,
        experts,
        router: Router {
            weight: Tensor::randn(vec![3, d], 2.0, 5, "w"),
        },
        gate: GateMode::Weighted,
    };
    let (h, stats) = mole_mlp_forward(&x, &m, &layer).unwrap();
    for t in 0..40 {
        let sum: f64 = x.data()[t * d..(t + 1) * d].iter().sum();
        let fired: Vec<usize> = (0..3)
            .filter(|&j| (h.data()[t * d + j] - base.data()[t * d + j]).abs() > 1e-12)
            .collect();
        if sum.abs() > 1e-9 {
            assert_eq!(fired, vec![stats.assignments[t]], "token {t}");
        }
    }
}

/// Top-1 routing with honest gates can still score under 1: the argmax
/// fractions and the mean probabilities need not line up.
#[test]
fn balance_loss_can_dip_below_uniform() {
    let probs = [1.0, 0.0, 0.49, 0.51, 0.49, 0.51];
    let stats = RoutingStats::from_probs(&probs, 2);
    let lb = load_balance_loss(&stats, 2).unwrap();
    // f = (1/3, 2/3), P = (0.66, 0.34)
    assert!((lb - 2.0 * (0.66 / 3.0 + 2.0 * 0.34 / 3.0)).abs() < 1e-12);
    assert!(lb < 1.0);
}

#[test]
fn balance_loss_stays_within_zero_and_n() {
    let mut rng = derived_rng(77, "lb");
    for _ in 0..2000 {
        let n = rng.gen_range(1..=6);
        let t = rng.gen_range(1..=30);
        let sharp = rng.gen_range(0.0..6.0);
        let probs: Vec<f64> = (0..t)
            .flat_map(|_| {
                let z: Vec<f64> = (0..n).map(|_| sharp * rng.gen::<f64>()).collect();
                let s: f64 = z.iter().map(|v| v.exp()).sum();
                z.into_iter().map(move |v| v.exp() / s)
            })
            .collect();
        let stats = RoutingStats::from_probs(&probs, n);
        let lb = load_balance_loss(&stats, n).unwrap();
        assert!((0.0..=n as f64 + 1e-12).contains(&lb), "lb {lb} with n {n}, t {t}");
        // a single expert or a uniform split is exactly balanced
        if n == 1 || stats.f.iter().all(|&f| (f - 1.0 / n as f64).abs() < 1e-12) {
            assert!((lb - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn adapter_names_follow_the_archive_scheme() {
    let cfg = ViTConfig::preset(Preset::Toy16);
    let mut store = ParamStore::new();
    let m = MoleConfig {
        blocks: BlockSet::Last(1),
        ..MoleConfig::default()
    };
    mole::init_adapters(&mut store, &cfg, &m, 3).unwrap();
    let mut names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
    names.sort();
    assert_eq!(
        names,
        vec![
            "head.bias",
            "head.weight",
            "mole.block1.expert0.A",
            "mole.block1.expert0.B",
            "mole.block1.expert1.A",
            "mole.block1.expert1.B",
            "mole.block1.expert2.A",
            "mole.block1.expert2.B",
            "mole.block1.router.W",
            "mole.block1.shared.A",
            "mole.block1.shared.B",
        ]
    );
    let a = store.get("mole.block1.expert2.A").unwrap();
    assert_eq!(a.shape(), &[16, 16]);
    let var = a.data().iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
    assert!((var - 1.0 / 16.0).abs() < 0.03, "A variance {var}");
    assert!(store.get("mole.block1.expert2.B").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(store.get("mole.block1.router.W").unwrap().data().iter().all(|&v| v == 0.0));
}
