use std::sync::Arc;

use hypernoise::generators::{make_generator, GeneratorConfig, GeneratorVariant};
use hypernoise::numcore::{self, Activation, Bindings, Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Plain nested-loop forward pass over weights regenerated from the seed:
/// Gaussian `[out, in]` scaled by `1/sqrt(in)`, then biases with std
/// `bias_std`, layer by layer.
fn oracle_mlp(dims: &[usize], seed: u64, bias_std: f64, x: &[f64], sigmoid_out: bool) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = x.to_vec();
    for i in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[i], dims[i + 1]);
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * (1.0 / (fan_in as f64).sqrt())
            })
            .collect();
        let b: Vec<f64> = (0..fan_out)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * bias_std
            })
            .collect();
        let last = i + 2 == dims.len();
        h = (0..fan_out)
            .map(|o| {
                let mut acc = 0.0;
                for j in 0..fan_in {
                    acc += h[j] * w[o * fan_in + j];
                }
                let pre = acc + b[o];
                if last {
                    pre
                } else {
                    pre.tanh()
                }
            })
            .collect();
    }
    if sigmoid_out {
        h.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
    } else {
        h
    }
}

#[test]
fn mlp_matches_independent_oracle_bit_for_bit() {
    let g = make_generator(&GeneratorConfig::mlp(3, vec![7, 5], 4), 42).unwrap();
    let mut rng = numcore::rng(9);
    for _ in 0..50 {
        let x = numcore::standard_normal(&mut rng, 1, 3).into_data();
        let got = g.generate(&Tensor::vector(x.clone()), None, 1).unwrap();
        let want = oracle_mlp(&[3, 7, 5, 4], 42, 1.0, &x, false);
        assert_eq!(got.data(), want.as_slice());
    }
}

#[test]
fn decoder_matches_oracle_and_stays_in_unit_box() {
    let g = make_generator(&GeneratorConfig::image_decoder(4, vec![6], 2, 2), 5).unwrap();
    assert_eq!(g.output_dim(), 12);
    assert_eq!(g.variant(), GeneratorVariant::ImageDecoder { height: 2, width: 2 });
    let x = numcore::standard_normal(&mut numcore::rng(1), 200, 4);
    let y = g.generate(&x, None, 1).unwrap();
    assert!(y.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    let want = oracle_mlp(&[4, 6, 12], 5, 1.0, x.row(0), true);
    let got = y.row(0);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
    }
}

#[test]
fn multistep_follows_damped_mixing_schedule() {
    let mut cfg = GeneratorConfig::mlp(2, vec![4], 2);
    cfg.multistep_mix = 0.3;
    cfg.multistep_damping = 0.6;
    let g = make_generator(&cfg, 8).unwrap();
    let x = Tensor::vector(vec![0.7, -1.2]);
    let one = |s: f64| g.generate(&x.scale(s), None, 1).unwrap().into_data();
    let mut state = one(1.0);
    for k in 1..4 {
        let fresh = one(0.6f64.powi(k));
        state = state.iter().zip(&fresh).map(|(s, f)| 0.7 * s + 0.3 * f).collect();
    }
    let got = g.generate(&x, None, 4).unwrap();
    for (a, b) in got.data().iter().zip(&state) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn graph_build_agrees_with_direct_generation() {
    let g = make_generator(&GeneratorConfig::mlp(3, vec![6], 2).with_condition(2), 3).unwrap();
    let x = numcore::standard_normal(&mut numcore::rng(2), 5, 3);
    let c = numcore::standard_normal(&mut numcore::rng(3), 5, 2);
    for steps in 1..=3 {
        let mut graph = Graph::new();
        let xn = graph.input("x", false);
        let cn = graph.input("c", false);
        g.build_graph(&mut graph, xn, Some(cn), steps, None).unwrap();
        let mut b = Bindings::new();
        b.insert("x", &x);
        b.insert("c", &c);
        let via_graph = graph.forward(&b).unwrap();
        let direct = g.generate(&x, Some(&c), steps).unwrap();
        assert!(via_graph.sub(&direct).unwrap().max_abs() < 1e-14);
    }
}

#[test]
fn seeds_and_hashes() {
    let cfg = GeneratorConfig::mlp(3, vec![4], 2);
    let a = make_generator(&cfg, 1).unwrap();
    let b = make_generator(&cfg, 1).unwrap();
    let c = make_generator(&cfg, 2).unwrap();
    assert_eq!(a.spec_hash(), b.spec_hash());
    assert_ne!(a.spec_hash(), c.spec_hash());
    assert_eq!(a.weights_checksum(), a.spec_hash());
    assert_eq!(a.layers()[0].activation, Activation::Tanh);
}

#[test]
fn conditional_generator_rejects_missing_condition() {
    let g = Arc::new(make_generator(&GeneratorConfig::mlp(2, vec![4], 2).with_condition(1), 0).unwrap());
    assert!(g.generate(&Tensor::vector(vec![0.0, 0.0]), None, 1).is_err());
    assert!(g.generate(&Tensor::vector(vec![0.0, 0.0]), Some(&Tensor::vector(vec![1.0, 2.0])), 1).is_err());
}

#[test]
fn bad_configs_rejected() {
    let mut cfg = GeneratorConfig::mlp(2, vec![4], 2);
    cfg.variant = "diffusion".into();
    assert!(make_generator(&cfg, 0).is_err());
    assert!(make_generator(&GeneratorConfig::mlp(2, vec![0], 2), 0).is_err());
    assert!(make_generator(&GeneratorConfig::affine(2, 2).with_condition(1), 0).is_err());
}

proptest! {
    #[test]
    fn affine_is_exactly_ax_plus_b(
        a in prop::collection::vec(-3.0f64..3.0, 6),
        b in prop::collection::vec(-3.0f64..3.0, 2),
        x in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let rows = vec![a[0..3].to_vec(), a[3..6].to_vec()];
        let g = make_generator(&GeneratorConfig::affine_explicit(rows.clone(), b.clone()), 0).unwrap();
        let y = g.generate(&Tensor::vector(x.clone()), None, 1).unwrap();
        for i in 0..2 {
            let want: f64 = rows[i].iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + b[i];
            prop_assert!((y.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_rows_are_independent(seed in 0u64..1000, n in 1usize..6) {
        let g = make_generator(&GeneratorConfig::mlp(2, vec![5], 3), seed).unwrap();
        let x = numcore::standard_normal(&mut numcore::rng(seed + 1), n, 2);
        let batch = g.generate(&x, None, 2).unwrap();
        for i in 0..n {
            let single = g.generate(&Tensor::vector(x.row(i).to_vec()), None, 2).unwrap();
            prop_assert_eq!(single.data(), batch.row(i));
        }
    }
}
