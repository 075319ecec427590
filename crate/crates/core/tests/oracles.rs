use std::sync::Arc;

use hypernoise::generators::{make_generator, GeneratorConfig};
use hypernoise::hypernet::init_hypernet;
use hypernoise::numcore::{self, Tensor};
use hypernoise::oracles::{
    dpi_check, gaussian_kl, kl_knn, kl_knn_whitened, pushforward_check, sample_tilted_noise, stein_check,
    CheckStatus, Envelope, KlMethod, LinearField, TiltKind, TiltMethod, VectorField, Z_TOLERANCE,
};
use hypernoise::rewards::Reward;
use hypernoise::{Error, Result};
use proptest::prelude::*;

fn gaussian(n: usize, mean: &[f64], chol: &[Vec<f64>], seed: u64) -> Tensor {
    let d = mean.len();
    let z = numcore::standard_normal(&mut numcore::rng(seed), n, d);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..d).map(|a| mean[a] + (0..d).map(|b| chol[a][b] * z.row(i)[b]).sum::<f64>()).collect())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn tilted_noise_mean_on_affine_linear_problem() {
    let a = vec![vec![1.0, 0.5], vec![-0.5, 2.0]];
    let g = make_generator(&GeneratorConfig::affine_explicit(a.clone(), vec![0.1, -0.2]), 0).unwrap();
    let c = [0.6, -0.3];
    let r = Reward::linear(c.to_vec());
    for alpha in [1.0, 2.0] {
        // Aᵀc/α by hand
        let want: Vec<f64> = (0..2).map(|j| (a[0][j] * c[0] + a[1][j] * c[1]) / alpha).collect();
        for method in [TiltMethod::Rejection(Envelope::Pilot(4096)), TiltMethod::Snis] {
            let set = sample_tilted_noise(&g, &r, alpha, 4000, 3, method, None).unwrap();
            let se = 1.0 / set.ess.sqrt();
            for (got, want) in set.weighted_mean().iter().zip(&want) {
                assert!((got - want).abs() <= Z_TOLERANCE * se, "{method:?} alpha {alpha}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn rejection_and_reweighting_agree_on_bounded_reward() {
    let g = make_generator(&GeneratorConfig::image_decoder(3, vec![8], 2, 2), 4).unwrap();
    let r = Reward::redness(2.0);
    let rej = sample_tilted_noise(&g, &r, 0.5, 4000, 1, TiltMethod::Rejection(Envelope::FromReward), None).unwrap();
    assert_eq!(rej.method, TiltKind::Rejection);
    assert_eq!(rej.samples.rows(), 4000);
    assert!(rej.acceptance_rate.unwrap() > 0.0);
    let snis = sample_tilted_noise(&g, &r, 0.5, 20_000, 2, TiltMethod::Snis, None).unwrap();
    let se = (1.0 / rej.ess + 1.0 / snis.ess).sqrt();
    for (a, b) in rej.weighted_mean().iter().zip(snis.weighted_mean()) {
        assert!((a - b).abs() <= Z_TOLERANCE * se, "{a} vs {b}");
    }
}

#[test]
fn unbounded_reward_needs_an_envelope() {
    let g = make_generator(&GeneratorConfig::affine(2, 2), 0).unwrap();
    let r = Reward::linear(vec![1.0, 1.0]);
    let err = sample_tilted_noise(&g, &r, 1.0, 10, 0, TiltMethod::Rejection(Envelope::FromReward), None);
    assert!(matches!(err, Err(Error::UnboundedReward)));
    assert!(sample_tilted_noise(&g, &r, 0.0, 10, 0, TiltMethod::Snis, None).is_err());
}

#[test]
fn knn_recovers_unit_gaussian_shift() {
    let p = gaussian(5000, &[0.0], &[vec![1.0]], 1);
    let q = gaussian(5000, &[1.0], &[vec![1.0]], 2);
    let kl = kl_knn(&p, &q, 5).unwrap();
    assert!((kl - 0.5).abs() < 0.05, "{kl}");
    let same = kl_knn(&p, &gaussian(5000, &[0.0], &[vec![1.0]], 3), 5).unwrap();
    assert!(same.abs() < 0.05, "{same}");
}

#[test]
fn whitened_knn_matches_closed_form_on_anisotropic_gaussians() {
    // q covers p; the estimator is biased low when p puts mass where q has none
    let lp = vec![vec![1.0, 0.0], vec![0.4, 0.5]];
    let lq = vec![vec![1.5, 0.0], vec![0.2, 0.8]];
    let (mp, mq) = ([0.3, -0.1], [0.0, 0.2]);
    let p = gaussian(6000, &mp, &lp, 4);
    let q = gaussian(6000, &mq, &lq, 5);
    let cov = |l: &Vec<Vec<f64>>| {
        let m = Tensor::from_rows(l).unwrap();
        m.matmul_t(&m).unwrap()
    };
    let exact = gaussian_kl(&mp, &cov(&lp), &mq, &cov(&lq)).unwrap();
    let est = kl_knn_whitened(&p, &q, 5).unwrap();
    assert!((est - exact).abs() < 0.05 * (1.0 + exact), "{est} vs {exact}");
}

#[test]
fn gaussian_kl_rejects_non_positive_definite() {
    let s = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
    assert!(matches!(gaussian_kl(&[0.0, 0.0], &s, &[0.0, 0.0], &Tensor::identity(2)), Err(Error::Singular(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn whitened_knn_invariant_under_invertible_affine_maps(
        m in prop::collection::vec(-2.0f64..2.0, 4),
        shift in prop::collection::vec(-3.0f64..3.0, 2),
        seed in 0u64..1000,
    ) {
        let mm = Tensor::from_rows(&[m[0..2].to_vec(), m[2..4].to_vec()]).unwrap();
        let det = m[0] * m[3] - m[1] * m[2];
        prop_assume!(det.abs() > 0.2);
        let p = gaussian(300, &[0.5, 0.0], &[vec![1.0, 0.0], vec![0.3, 0.8]], seed);
        let q = gaussian(300, &[0.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]], seed + 1);
        let map = |x: &Tensor| x.matmul_t(&mm).unwrap().add_row(&Tensor::vector(shift.clone())).unwrap();
        let before = kl_knn_whitened(&p, &q, 3).unwrap();
        let after = kl_knn_whitened(&map(&p), &map(&q), 3).unwrap();
        prop_assert!((before - after).abs() < 1e-8, "{} vs {}", before, after);
    }
}

#[test]
fn stein_identity_for_linear_field() {
    let w = Tensor::from_rows(&[vec![0.5, -1.0, 0.0], vec![0.2, 1.5, 0.3], vec![0.0, 0.4, -0.7]]).unwrap();
    let res = stein_check(&LinearField(w.clone()), 100_000, 9).unwrap();
    assert_eq!(res.status, CheckStatus::Pass);
    assert!((res.rhs - w.trace()).abs() < 1e-10);
    assert!((res.lhs - res.rhs).abs() <= Z_TOLERANCE * res.se);
    assert!(res.se <= res.pooled_se * (1.0 + 1e-12));
}

/// A field that lies about its Jacobian trace.
struct WrongTrace(LinearField);

impl VectorField for WrongTrace {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        self.0.eval(x)
    }
    fn jacobian_traces(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.0.jacobian_traces(x)?.into_iter().map(|t| t + 0.1).collect())
    }
}

#[test]
fn stein_check_catches_a_wrong_trace() {
    let w = Tensor::from_rows(&[vec![0.5, -1.0], vec![0.2, 1.5]]).unwrap();
    let res = stein_check(&WrongTrace(LinearField(w)), 100_000, 9).unwrap();
    assert_eq!(res.status, CheckStatus::Fail);
}

#[test]
fn stein_identity_for_trained_style_hypernetwork() {
    let g = Arc::new(make_generator(&GeneratorConfig::mlp(4, vec![16], 4), 1).unwrap());
    let mut hn = init_hypernet(&g, 2, 4.0, 2).unwrap();
    hn.randomize_adapters(0.5, 3);
    hn.rescale_to_lipschitz(0.8).unwrap();
    let res = stein_check(&hn, 100_000, 4).unwrap();
    assert_eq!(res.status, CheckStatus::Pass, "{res:?}");
}

#[test]
fn pushforward_routes_agree_with_closed_form() {
    let g = make_generator(&GeneratorConfig::affine(2, 2), 6).unwrap();
    let rep = pushforward_check(&g, &Reward::linear(vec![0.5, -0.25]), 1.0, 20_000, 1, None).unwrap();
    assert!(rep.analytic.is_some());
    assert_eq!(rep.status, CheckStatus::Pass, "max z {}", rep.max_z);
    let dec = make_generator(&GeneratorConfig::image_decoder(4, vec![16], 2, 2), 7).unwrap();
    let rep = pushforward_check(&dec, &Reward::redness(2.0), 1.0, 20_000, 2, None).unwrap();
    assert!(rep.analytic.is_none());
    assert_eq!(rep.status, CheckStatus::Pass, "max z {}", rep.max_z);
    assert!(pushforward_check(&dec, &Reward::redness(2.0), 1.0, 10, 2, None).is_err());
}

/// Shift `c` in noise, projection `y = x_1`: the noise KL is `½‖c‖²`, the
/// output KL `½c_1²`, so the margin is `½(c_2² + c_3²)`.
#[test]
fn dpi_margin_under_projection() {
    let g = Arc::new(make_generator(&GeneratorConfig::affine_explicit(vec![vec![1.0, 0.0, 0.0]], vec![0.0]), 0).unwrap());
    let mut hn = init_hypernet(&g, 1, 2.0, 0).unwrap();
    hn.set_head_bias(Tensor::vector(vec![0.4, -0.6, 0.8])).unwrap();
    let res = dpi_check(&hn, 1000, 0, 5).unwrap();
    assert_eq!(res.method, KlMethod::ClosedForm);
    assert!((res.kl_noise - 0.5 * (0.16 + 0.36 + 0.64)).abs() < 1e-12);
    assert!((res.kl_output - 0.5 * 0.16).abs() < 1e-12);
    assert!((res.margin - 0.5 * (0.36 + 0.64)).abs() < 1e-12);
    assert_eq!(res.status, CheckStatus::Pass);
}

#[test]
fn dpi_holds_under_knn_for_small_networks() {
    let g = Arc::new(make_generator(&GeneratorConfig::mlp(2, vec![8], 2), 3).unwrap());
    let mut hn = init_hypernet(&g, 1, 2.0, 1).unwrap();
    hn.randomize_adapters(0.6, 2);
    hn.set_head_bias(Tensor::vector(vec![0.4, 0.4])).unwrap();
    let res = dpi_check(&hn, 10_000, 5, 5).unwrap();
    assert_eq!(res.method, KlMethod::Knn);
    assert!(res.margin >= -res.tolerance, "{res:?}");
}
