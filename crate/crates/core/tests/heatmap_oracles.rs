use gradmine::heatmap::{hue_constrained_map, sensitivity_map};
use gradmine::net::{HeatmapMode, LayerSpec, Network, NetworkSpec, ParamStore, Precision};
use gradmine::ops::{BiasMode, Phase};
use gradmine::{QNorm, Rng, Tensor4};

fn linear(mode: HeatmapMode) -> (Network, ParamStore<f64>, [f64; 3]) {
    let net = Network::build(&NetworkSpec {
        input: (7, 5, 3),
        precision: Precision::F64,
        heatmap: mode,
        layers: vec![LayerSpec::Dense { units: 1 }],
    })
    .unwrap();
    let w = [0.8, -1.7, 0.25];
    let mut store = ParamStore::<f64>::zeros(&net);
    let p = store.layer_mut(0).unwrap();
    for x in 0..7 {
        for y in 0..5 {
            for c in 0..3 {
                p.weights.set(x, y, c, 0, w[c]);
            }
        }
    }
    p.bias.data_mut()[0] = 0.4;
    (net, store, w)
}

#[test]
fn linear_sensitivity_is_weight_norm() {
    let (net, store, w) = linear(HeatmapMode::Plain);
    let mut rng = Rng::new(3);
    let x = Tensor4::from_fn(net.input_dims(1), |_, _, _, _| rng.uniform(-1.0, 1.0));
    let cases = [
        (QNorm::Infinity, 1.7),
        (QNorm::Finite(1), 0.8 + 1.7 + 0.25),
        (QNorm::Finite(2), (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt()),
        (QNorm::Finite(3), (w.iter().map(|v: &f64| v.abs().powi(3)).sum::<f64>()).cbrt()),
    ];
    for (q, want) in cases {
        let map = sensitivity_map(&net, &store, &x, q, "lin").unwrap();
        for &v in map.values() {
            assert!((v - want).abs() <= 1e-10, "q {q}: {v} vs {want}");
        }
    }
}

#[test]
fn linear_hue_map_is_channel_contraction() {
    let (net, store, w) = linear(HeatmapMode::Hue);
    let mut rng = Rng::new(4);
    let x = Tensor4::from_fn(net.input_dims(1), |_, _, _, _| rng.uniform(-1.0, 1.0));
    let map = hue_constrained_map(&net, &store, &x, "lin").unwrap();
    for px in 0..7 {
        for py in 0..5 {
            let want = (0..3).map(|c| w[c] * x.at(0, px, py, c)).sum::<f64>().abs();
            assert!((map.at(px, py) - want).abs() <= 1e-10);
        }
    }
}

fn tiny() -> (Network, ParamStore<f64>, Tensor4<f64>) {
    let net = Network::build(&NetworkSpec {
        input: (8, 8, 3),
        precision: Precision::F64,
        heatmap: HeatmapMode::Hue,
        layers: vec![
            LayerSpec::Conv { filters: 4, window: (3, 3), stride: 1, out: None, bias: BiasMode::Untied },
            LayerSpec::LeakyRelu { alpha: 0.33 },
            LayerSpec::MaxPool { window: (2, 2), stride: 2, out: None },
            LayerSpec::Conv { filters: 3, window: (2, 2), stride: 1, out: None, bias: BiasMode::Tied },
            LayerSpec::LeakyRelu { alpha: 0.33 },
            LayerSpec::Dense { units: 1 },
        ],
    })
    .unwrap();
    let mut store = ParamStore::<f64>::init(&net, 8);
    let mut rng = Rng::new(9);
    for l in [0, 3, 5] {
        for b in store.layer_mut(l).unwrap().bias.data_mut() {
            *b = rng.uniform(-0.2, 0.2);
        }
    }
    let x = Tensor4::from_fn(net.input_dims(1), |_, _, _, _| rng.uniform(-1.0, 1.0));
    (net, store, x)
}

/// `f` at `x`, or `None` when a rectifier or pooling decision differs from `x0`'s.
fn eval(net: &Network, store: &ParamStore<f64>, x: &Tensor4<f64>, x0: &Tensor4<f64>) -> Option<f64> {
    let (p, t) = net.forward_pass(store, x, &mut Phase::Inference).unwrap();
    let (_, t0) = net.forward_pass(store, x0, &mut Phase::Inference).unwrap();
    t.caches().iter().zip(t0.caches()).all(|(a, b)| a.same_branches(b)).then_some(p[0])
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn sensitivity_matches_finite_differences() {
    let (net, store, x) = tiny();
    let h = 1e-6;
    for q in [QNorm::Infinity, QNorm::Finite(1), QNorm::Finite(2)] {
        let map = sensitivity_map(&net, &store, &x, q, "t").unwrap();
        let mut compared = 0;
        for px in 0..8 {
            for py in 0..8 {
                let mut parts = Vec::new();
                for c in 0..3 {
                    let mut xp = x.clone();
                    xp.set(0, px, py, c, x.at(0, px, py, c) + h);
                    let mut xm = x.clone();
                    xm.set(0, px, py, c, x.at(0, px, py, c) - h);
                    if let (Some(a), Some(b)) = (eval(&net, &store, &xp, &x), eval(&net, &store, &xm, &x)) {
                        parts.push((a - b) / (2.0 * h));
                    }
                }
                if parts.len() < 3 {
                    continue;
                }
                let fd = q.norm(&parts);
                let e = rel(map.at(px, py), fd);
                assert!(e < 1e-5, "q {q} pixel ({px},{py}): {} vs {fd}", map.at(px, py));
                compared += 1;
            }
        }
        assert!(compared >= 60, "{compared}");
    }
}

#[test]
fn hue_map_matches_mask_finite_differences() {
    let (net, store, x) = tiny();
    let map = hue_constrained_map(&net, &store, &x, "t").unwrap();
    let h = 1e-6;
    let mut compared = 0;
    for px in 0..8 {
        for py in 0..8 {
            // m_{x,y} = 1 ± h scales every channel of that pixel
            let scaled = |k: f64| {
                let mut t = x.clone();
                for c in 0..3 {
                    t.set(0, px, py, c, k * x.at(0, px, py, c));
                }
                t
            };
            let (Some(a), Some(b)) = (eval(&net, &store, &scaled(1.0 + h), &x), eval(&net, &store, &scaled(1.0 - h), &x))
            else {
                continue;
            };
            let fd = ((a - b) / (2.0 * h)).abs();
            assert!(rel(map.at(px, py), fd) < 1e-5, "({px},{py}): {} vs {fd}", map.at(px, py));
            compared += 1;
        }
    }
    assert!(compared >= 60, "{compared}");
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

    #[test]
    fn maps_are_nonnegative_with_mass_matching_values(seed in proptest::prelude::any::<u64>(), qi in 0usize..4) {
        let (net, store, _) = tiny();
        let mut rng = Rng::new(seed);
        let x = Tensor4::from_fn(net.input_dims(1), |_, _, _, _| rng.uniform(-2.0, 2.0));
        let q = [QNorm::Infinity, QNorm::Finite(1), QNorm::Finite(2), QNorm::Finite(5)][qi];
        for map in [sensitivity_map(&net, &store, &x, q, "p").unwrap(), hue_constrained_map(&net, &store, &x, "p").unwrap()] {
            proptest::prop_assert!(map.values().iter().all(|&v| v >= 0.0));
            proptest::prop_assert_eq!(map.mass(), map.values().iter().sum::<f64>());
        }
    }
}
