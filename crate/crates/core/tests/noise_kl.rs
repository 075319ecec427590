//! Noise-space KL: the exact Jacobian formula, its squared-norm
//! approximation and Gaussian closed forms.

use std::sync::Arc;

use hypernoise::generators::{make_generator, GeneratorConfig};
use hypernoise::hypernet::{init_hypernet, AdapterSlot, NoiseHypernetwork};
use hypernoise::numcore::{self, Tensor};
use hypernoise::objectives::{exact_noise_kl, hypernoise_loss, theorem_bound};
use hypernoise::oracles::gaussian_kl;
use hypernoise::rewards::Reward;
use hypernoise::Error;

fn affine_hypernet(d: usize, seed: u64) -> NoiseHypernetwork {
    let g = Arc::new(make_generator(&GeneratorConfig::affine(d, d), seed).unwrap());
    init_hypernet(&g, d, d as f64, seed).unwrap()
}

#[test]
fn constant_shift_kl_is_half_squared_norm() {
    let c = vec![0.3, -1.2, 0.5, 2.0];
    let mut hn = affine_hypernet(4, 1);
    hn.set_head_bias(Tensor::vector(c.clone())).unwrap();
    let x = numcore::standard_normal(&mut numcore::rng(2), 500, 4);
    let kl = exact_noise_kl(&hn, &x, None).unwrap();
    let half: f64 = 0.5 * c.iter().map(|v| v * v).sum::<f64>();
    assert!((kl.exact_kl - kl.l2_term).abs() <= 1e-10);
    assert!((kl.exact_kl - half).abs() <= 1e-10);
    let i = Tensor::identity(4);
    let closed = gaussian_kl(&c, &i, &[0.0; 4], &i).unwrap();
    assert!((closed - half).abs() <= 1e-12);
}

/// For `f(x) = Mx + μ` the modulated law is `N(μ, (I+M)(I+M)ᵀ)`, whose KL to
/// `N(0, I)` is `½‖M‖²_F + ½‖μ‖² + Tr M − log|det(I+M)|`.
#[test]
fn linear_residual_matches_gaussian_closed_form() {
    let d = 3;
    let mut hn = affine_hypernet(d, 4);
    hn.randomize_adapters(0.3, 5);
    let mu = vec![0.2, -0.1, 0.4];
    hn.set_head_bias(Tensor::vector(mu.clone())).unwrap();
    let m = hn.adapter(AdapterSlot::Head).delta_weight();
    let t = Tensor::identity(d).add(&m).unwrap();
    let closed = gaussian_kl(&mu, &t.matmul_t(&t).unwrap(), &[0.0; 3], &Tensor::identity(d)).unwrap();

    let n = 20_000;
    let x = numcore::standard_normal(&mut numcore::rng(6), n, d);
    let kl = exact_noise_kl(&hn, &x, None).unwrap();
    // trace and log-determinant are constant in x
    assert!((kl.trace_term - m.trace()).abs() < 1e-12);
    let analytic_l2 = 0.5 * (m.frobenius_norm().powi(2) + mu.iter().map(|v| v * v).sum::<f64>());
    let exact_with_analytic_l2 = analytic_l2 + kl.trace_term - kl.logdet_term;
    assert!((exact_with_analytic_l2 - closed).abs() < 1e-10, "{exact_with_analytic_l2} vs {closed}");
    // the Monte-Carlo squared norm within a few standard errors
    let delta = hn.perturbation(&x, None).unwrap();
    let per: Vec<f64> = (0..n).map(|i| 0.5 * delta.row(i).iter().map(|v| v * v).sum::<f64>()).collect();
    let mean = per.iter().sum::<f64>() / n as f64;
    let sd = (per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!((kl.l2_term - analytic_l2).abs() < 4.0 * sd / (n as f64).sqrt());
}

#[test]
fn approximation_gap_within_bound_on_random_networks() {
    let d = 6;
    let g = Arc::new(make_generator(&GeneratorConfig::mlp(d, vec![12], d), 7).unwrap());
    for (k, l) in [0.05, 0.1, 0.3, 0.5].into_iter().enumerate() {
        for net in 0..5u64 {
            let mut hn = init_hypernet(&g, 2, 4.0, 100 * k as u64 + net).unwrap();
            hn.randomize_adapters(0.5, 1000 + net);
            hn.rescale_to_lipschitz(l).unwrap();
            let x = numcore::standard_normal(&mut numcore::rng(net), 200, d);
            let kl = exact_noise_kl(&hn, &x, None).unwrap();
            let bound = theorem_bound(d, kl.lipschitz_used).unwrap();
            assert_eq!(kl.bound, Some(bound));
            assert!(kl.approx_error.abs() <= bound, "L={l}: {} > {bound}", kl.approx_error);
            assert!(kl.max_abs_error_term <= bound);
        }
    }
}

#[test]
fn singular_jacobian_names_the_sample() {
    let d = 2;
    let mut hn = affine_hypernet(d, 9);
    // I + M = 0 at every point
    let head = hn.adapter_mut(AdapterSlot::Head);
    head.set_down(Tensor::identity(d)).unwrap();
    head.set_up(Tensor::identity(d).scale(-1.0)).unwrap();
    let x = numcore::standard_normal(&mut numcore::rng(1), 3, d);
    match exact_noise_kl(&hn, &x, None) {
        Err(Error::Singular(Some(which))) => assert_eq!(which, "sample 0"),
        other => panic!("expected a singular-matrix error, got {other:?}"),
    }
}

#[test]
fn loss_at_initialization_is_negative_scaled_reward() {
    let g = Arc::new(make_generator(&GeneratorConfig::mlp(3, vec![5], 2), 3).unwrap());
    let hn = init_hypernet(&g, 2, 4.0, 0).unwrap();
    let r = Reward::linear(vec![1.0, -2.0]);
    let x = numcore::standard_normal(&mut numcore::rng(4), 16, 3);
    let alpha = 0.5;
    let (lb, _) = hypernoise_loss(&hn, &r, &x, None, alpha).unwrap();
    let mean_r = r.evaluate_batch(&g.generate(&x, None, 1).unwrap()).unwrap().iter().sum::<f64>() / 16.0;
    assert_eq!(lb.l2_term, 0.0);
    assert!((lb.total + mean_r / alpha).abs() < 1e-12);
}

#[test]
fn too_large_latent_dimension_refused() {
    let g = Arc::new(make_generator(&GeneratorConfig::affine(65, 65), 0).unwrap());
    let hn = init_hypernet(&g, 1, 2.0, 0).unwrap();
    let x = numcore::standard_normal(&mut numcore::rng(0), 2, 65);
    assert!(matches!(exact_noise_kl(&hn, &x, None), Err(Error::Domain(_))));
}
