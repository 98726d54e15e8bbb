use std::sync::Arc;

use mckean::coefficients::{CoefficientModel, Constant, MeanFieldOu, ModelFlags, ScalarInteraction, ScalarTerm};
use mckean::estimators::compare::{compare_fd, FdTarget};
use mckean::estimators::density::{estimate_density, scalar_grid};
use mckean::estimators::pde::{estimate_u, pde_residual, Route};
use mckean::estimators::{
  estimate_derivative_of_payoff, estimate_dmu, estimate_dx, estimate_dx_fixed_point, estimate_expectation, EstimatorResult, McConfig, Payoff, Problem,
  ScalarPayoff,
};
use mckean::oracles::{gaussian_oracle, mf_ou_oracle};
use mckean::simulator::{InitialLaw, TimeGrid};
use mckean::{Error, Mat};

const B: f64 = 0.2;
const S0: f64 = 0.8;

fn constant(t: f64, steps: usize, x: f64) -> Problem {
  let model: Arc<dyn CoefficientModel> = Arc::new(Constant::scalar(B, S0));
  Problem::new(model, TimeGrid::new(t, steps).unwrap(), 8, InitialLaw::Dirac(Mat::scalar(x)), Mat::scalar(x), t).unwrap()
}

fn ou(horizon: f64, steps: usize, m: usize, initial: InitialLaw, x: f64, t: f64) -> Problem {
  let model: Arc<dyn CoefficientModel> = Arc::new(MeanFieldOu::new(1.0, 0.5).unwrap());
  Problem::new(model, TimeGrid::new(horizon, steps).unwrap(), m, initial, Mat::scalar(x), t).unwrap()
}

fn gauss0() -> InitialLaw {
  InitialLaw::Gaussian { mean: Mat::scalar(0.0), std: 1.0 }
}

fn within(r: &EstimatorResult, target: f64, k: f64, slack: f64) {
  assert!((r.value - target).abs() <= k * r.stderr + slack, "{} = {} ± {} vs {target}", r.estimator, r.value, r.stderr);
}

fn sin() -> Payoff {
  Payoff::scalar(ScalarPayoff::Sin)
}

#[test]
fn expectation_of_constant_and_linear_payoffs() {
  let p = constant(1.0, 16, 0.3);
  let one = estimate_expectation(&p, &Payoff::scalar(ScalarPayoff::Polynomial(vec![1.0])), &McConfig::new(2000, 1)).unwrap();
  assert_eq!((one.value, one.stderr), (1.0, 0.0));
  let lin = estimate_expectation(&p, &Payoff::scalar(ScalarPayoff::Identity), &McConfig::new(20_000, 2)).unwrap();
  within(&lin, gaussian_oracle(B, S0, 1.0, 0.3).unwrap().expect_identity(), 3.0, 0.0);
}

#[test]
fn ou_second_moment_from_a_point_mass() {
  let x = 0.6;
  let p = ou(1.0, 64, 1000, InitialLaw::Dirac(Mat::scalar(x)), x, 1.0);
  let r = estimate_expectation(&p, &Payoff::scalar(ScalarPayoff::Square), &McConfig::new(40_000, 3)).unwrap();
  within(&r, mf_ou_oracle(1.0, 0.5, 1.0, x, x).unwrap().second_moment(), 3.0, 0.02);
}

#[test]
fn bismut_elworthy_li_on_constant_model() {
  let p = constant(1.0, 32, 0.3);
  let g = gaussian_oracle(B, S0, 1.0, 0.3).unwrap();
  let r = estimate_dx(&p, &[0], &sin(), &McConfig::new(40_000, 4)).unwrap();
  within(&r, g.dx_expect_sin(), 3.0, 0.0);
  let zero = estimate_dx(&p, &[0], &Payoff::scalar(ScalarPayoff::Polynomial(vec![1.0])), &McConfig::new(20_000, 5)).unwrap();
  within(&zero, 0.0, 4.0, 0.0);
}

#[test]
fn second_order_dx_of_square_is_two() {
  let p = constant(1.0, 32, 0.3);
  let r = estimate_dx(&p, &[0, 0], &Payoff::scalar(ScalarPayoff::Square), &McConfig::new(40_000, 6)).unwrap();
  within(&r, 2.0, 3.0, 0.0);
  assert!(matches!(estimate_dx(&p, &[0, 0, 0], &sin(), &McConfig::new(10, 6)), Err(Error::OrderExceeded { .. })));
}

#[test]
fn payoff_derivative_weights() {
  let p = constant(1.0, 32, 0.3);
  let g = gaussian_oracle(B, S0, 1.0, 0.3).unwrap();
  let w = estimate_derivative_of_payoff(&p, &[0], &sin(), &McConfig::new(40_000, 7)).unwrap();
  let direct = estimate_expectation(&p, &Payoff::scalar(ScalarPayoff::Polynomial(vec![0.0])), &McConfig::new(10, 7)).unwrap();
  assert_eq!(direct.value, 0.0);
  // Direct MC of cos(X) on independent samples.
  let cos_mc = estimate_expectation(&p.with_x(Mat::scalar(0.3 + std::f64::consts::FRAC_PI_2)).unwrap(), &sin(), &McConfig::new(40_000, 8)).unwrap();
  let combined = (w.stderr.powi(2) + cos_mc.stderr.powi(2)).sqrt();
  assert!((w.value - cos_mc.value).abs() <= 4.0 * combined, "{} vs {}", w.value, cos_mc.value);
  within(&w, g.dx_expect_sin(), 3.0, 0.0);

  let step = estimate_derivative_of_payoff(&p, &[0], &Payoff::scalar(ScalarPayoff::PositivePart), &McConfig::new(40_000, 9)).unwrap();
  within(&step, g.tail(0.0), 3.0, 0.0);
  let c = estimate_derivative_of_payoff(&p, &[0], &Payoff::scalar(ScalarPayoff::Polynomial(vec![2.5])), &McConfig::new(20_000, 10)).unwrap();
  within(&c, 0.0, 4.0, 0.0);
}

#[test]
fn measure_derivative_without_measure_dependence_vanishes() {
  let model: Arc<dyn CoefficientModel> = Arc::new(Constant::scalar(B, S0));
  let p = Problem::new(model, TimeGrid::new(1.0, 16).unwrap(), 32, gauss0(), Mat::scalar(0.1), 1.0).unwrap();
  let rs = estimate_dmu(&p, 0, &sin(), &[Mat::scalar(-0.5), Mat::scalar(0.5)], &McConfig::new(5000, 11)).unwrap();
  for r in rs {
    assert!(r.value.abs() <= 4.0 * r.stderr + 1e-12, "{}", r.value);
  }
}

#[test]
fn scalar_interaction_measure_derivative() {
  // dX = (X + m)dt + dB with m the law mean: m_t = m₀e^{2t} and
  // 𝔼X_t = x e^t + m₀(e^{2t} − e^t), so ∂_μ𝔼X_t(v) = e^{2t} − e^t.
  let flags = ModelFlags { bounded_coefficients: false, declared_uniformly_elliptic: true, ellipticity_floor: 1.0 };
  let model: Arc<dyn CoefficientModel> =
    Arc::new(ScalarInteraction::new(vec![ScalarTerm { cx: 1.0, cm: 1.0, ..ScalarTerm::constant(0.0) }, ScalarTerm::constant(1.0)], flags).unwrap());
  let t = 0.1;
  let p = Problem::new(model, TimeGrid::new(t, 32).unwrap(), 500, gauss0(), Mat::scalar(0.2), t).unwrap();
  let target = (2.0 * t).exp() - t.exp();
  let rs = estimate_dmu(&p, 0, &Payoff::scalar(ScalarPayoff::Identity), &[Mat::scalar(0.0), Mat::scalar(1.0)], &McConfig::new(20_000, 12)).unwrap();
  for r in &rs {
    within(r, target, 3.0, 0.01);
  }
  assert!((target - t).abs() < 0.02);
}

#[test]
fn fixed_point_derivative() {
  let x = 0.4;
  let p = ou(1.0, 64, 500, InitialLaw::Dirac(Mat::scalar(x)), x, 1.0);
  let r = estimate_dx_fixed_point(&p, &[0], &Payoff::scalar(ScalarPayoff::Identity), &McConfig::new(20_000, 13)).unwrap();
  within(&r, mf_ou_oracle(1.0, 0.5, 1.0, x, x).unwrap().total_fixed_point_dx(), 3.0, 0.02);

  // Without measure dependence the total derivative is the plain one.
  let c = constant(1.0, 32, 0.3);
  let cfg = McConfig::new(5000, 14);
  let a = estimate_dx_fixed_point(&c, &[0], &sin(), &cfg).unwrap();
  let b = estimate_dx(&c, &[0], &sin(), &cfg).unwrap();
  assert!((a.value - b.value).abs() <= 1e-9 * (1.0 + b.value.abs()), "{} vs {}", a.value, b.value);
}

#[test]
fn fixed_point_bound_shape_is_stable_in_t() {
  // |estimate|·√t/(‖f‖∞(1+|x|)⁴) over t ∈ {T, T/2, T/4}.
  let x = 0.4;
  let p = ou(1.0, 64, 200, InitialLaw::Dirac(Mat::scalar(x)), x, 1.0);
  let cs: Vec<f64> = [1.0, 0.5, 0.25]
    .iter()
    .map(|&t| {
      let r = estimate_dx_fixed_point(&p.with_t(t).unwrap(), &[0], &sin(), &McConfig::new(10_000, 15)).unwrap();
      r.value.abs() * t.sqrt() / (1.0 + x).powi(4)
    })
    .collect();
  let (lo, hi) = cs.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &c| (a.min(c), b.max(c)));
  assert!(hi / lo <= 3.0, "{cs:?}");
}

#[test]
fn density_normalization_and_x_derivative() {
  let x = 0.3;
  let p = constant(1.0, 32, x);
  let g = gaussian_oracle(B, S0, 1.0, x).unwrap();
  let (mu, s) = (g.mean(), g.variance().sqrt());
  let z = scalar_grid(mu - 6.0 * s, mu + 6.0 * s, 121).unwrap();
  let d = estimate_density(&p, &z, false, true, &McConfig::new(50_000, 16)).unwrap();
  let dz = z[1][0] - z[0][0];
  let mass: f64 = d.p.value.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dz).sum();
  assert!((0.98..=1.02).contains(&mass), "{mass}");
  let dx = d.dp_dx.as_ref().unwrap();
  for (k, zk) in z.iter().enumerate() {
    assert!((dx.value[k] - g.density_dx(zk[0])).abs() <= 4.0 * dx.stderr[k] + 0.01, "z={} {} vs {}", zk[0], dx.value[k], g.density_dx(zk[0]));
  }
  assert_eq!(d.csv_rows().len(), 121);
}

#[test]
fn density_order_cap() {
  let model: Arc<dyn CoefficientModel> = Arc::new(Constant::new(Mat::zeros(2, 1), Mat::identity(2)).unwrap());
  let p = Problem::new(model, TimeGrid::new(1.0, 8).unwrap(), 4, InitialLaw::Dirac(Mat::zeros(2, 1)), Mat::zeros(2, 1), 1.0).unwrap();
  let z = vec![Mat::zeros(2, 1)];
  assert!(matches!(estimate_density(&p, &z, true, false, &McConfig::new(10, 1)), Err(Error::OrderExceeded { .. })));
}

#[test]
fn centred_mean_by_both_routes() {
  let (x, t) = (0.7, 1.0);
  let p = ou(1.0, 64, 1000, gauss0(), x, t);
  let law0 = p.initial.sample(p.particles, 17);
  let m = law0.mean()[0];
  let o = mf_ou_oracle(1.0, 0.5, t, x, m).unwrap();
  let vs = [Mat::scalar(-0.5), Mat::scalar(0.5)];
  let cfg = McConfig::new(20_000, 17);
  for route in [Route::A, Route::B] {
    let u = estimate_u(&p, &Payoff::CentredMean, &vs, route, false, &cfg).unwrap();
    within(&u.u, o.u_centred(), 3.0, 0.02);
    within(&u.dx[0], o.du_centred_dx(), 3.0, 0.02);
    for r in &u.dmu {
      within(&r[0], o.dmu_u_centred(), 3.0, 0.02);
    }
  }
}

#[test]
fn law_free_payoff_has_no_measure_derivative() {
  let p = ou(1.0, 32, 200, gauss0(), 0.2, 1.0);
  // MeanFieldOu couples through the drift, so use a payoff with ∂_μg = 0 on a
  // model without measure dependence.
  let model: Arc<dyn CoefficientModel> = Arc::new(Constant::scalar(B, S0));
  let p = Problem { model, ..p };
  let u = estimate_u(&p, &Payoff::scalar(ScalarPayoff::Identity), &[Mat::scalar(0.3)], Route::A, false, &McConfig::new(5000, 18)).unwrap();
  assert!(u.dmu[0][0].value.abs() <= 4.0 * u.dmu[0][0].stderr + 1e-12);
}

#[test]
fn non_differentiable_payoff_is_refused() {
  let p = ou(1.0, 16, 50, gauss0(), 0.0, 1.0);
  for route in [Route::A, Route::B] {
    assert!(matches!(estimate_u(&p, &Payoff::AbsMean, &[Mat::scalar(0.0)], route, false, &McConfig::new(10, 1)), Err(Error::ClassMismatch(_))));
  }
}

#[test]
fn pde_residual_constant_model() {
  let model: Arc<dyn CoefficientModel> = Arc::new(Constant::scalar(B, S0));
  let p = Problem::new(model, TimeGrid::new(1.0, 64).unwrap(), 8, InitialLaw::Dirac(Mat::scalar(0.3)), Mat::scalar(0.3), 0.5).unwrap();
  let r = pde_residual(&p, &Payoff::scalar(ScalarPayoff::Identity), None, 4, &McConfig::new(10_000, 19)).unwrap();
  assert!(r.residual.value.abs() <= 4.0 * (r.residual.stderr + 0.01), "{}", r.csv_row());
  assert!((r.dt.0 - B).abs() <= 4.0 * r.dt.1 + 1e-9);
}

#[test]
fn pde_residual_heat_equation() {
  // U = e^{−t/2} sin x solves ∂_tU = ½∂²ₓU.
  let model: Arc<dyn CoefficientModel> = Arc::new(Constant::scalar(0.0, 1.0));
  let p = Problem::new(model, TimeGrid::new(1.0, 64).unwrap(), 8, InitialLaw::Dirac(Mat::scalar(0.4)), Mat::scalar(0.4), 0.5).unwrap();
  let r = pde_residual(&p, &sin(), None, 4, &McConfig::new(20_000, 20)).unwrap();
  assert!(r.residual.value.abs() <= 4.0 * (r.residual.stderr + 0.02), "{}", r.csv_row());
  let dt = -0.5 * (-0.25f64).exp() * 0.4f64.sin();
  assert!((r.dt.0 - dt).abs() <= 4.0 * r.dt.1 + 0.01);
}

#[test]
fn finite_differences_agree_with_weights() {
  let p = constant(1.0, 32, 0.3);
  let rows = compare_fd(&p, &sin(), FdTarget::Dx(0), &[1e-2, 1.0], true, &McConfig::new(20_000, 21)).unwrap();
  assert!(rows[0].z.abs() <= 4.0, "{:?}", rows[0]);
  // sin(1) ≈ 0.84: the bump-1 quotient is biased by 16%.
  assert!(rows[1].z.abs() > 4.0, "{:?}", rows[1]);

  let o = ou(1.0, 32, 300, gauss0(), 0.3, 1.0);
  let rows = compare_fd(&o, &Payoff::scalar(ScalarPayoff::Identity), FdTarget::MeasureShift(0), &[0.05], true, &McConfig::new(4000, 22)).unwrap();
  let target = mf_ou_oracle(1.0, 0.5, 1.0, 0.3, 0.0).unwrap().lions();
  assert!((rows[0].fd - target).abs() <= 4.0 * rows[0].fd_stderr + 0.02, "{:?}", rows[0]);
  assert!((rows[0].weight - target).abs() <= 4.0 * rows[0].weight_stderr + 0.02, "{:?}", rows[0]);
}

#[test]
fn stderr_halves_when_samples_quadruple() {
  let p = constant(1.0, 16, 0.3);
  let f = Payoff::scalar(ScalarPayoff::Square);
  let a = estimate_expectation(&p, &f, &McConfig::new(10_000, 23)).unwrap();
  let b = estimate_expectation(&p, &f, &McConfig::new(40_000, 24)).unwrap();
  let ratio = a.stderr / b.stderr;
  assert!((1.6..=2.4).contains(&ratio), "{ratio}");
}

#[test]
fn estimates_are_linear_in_the_payoff() {
  let p = constant(1.0, 16, 0.3);
  let cfg = McConfig::new(3000, 25);
  let f = estimate_dx(&p, &[0], &sin(), &cfg).unwrap();
  let g = estimate_dx(&p, &[0], &Payoff::scalar(ScalarPayoff::Square), &cfg).unwrap();
  let sum = Payoff::Sum(Box::new(Payoff::Scaled(2.0, Box::new(sin()))), Box::new(Payoff::scalar(ScalarPayoff::Square)));
  let h = estimate_dx(&p, &[0], &sum, &cfg).unwrap();
  assert!((h.value - (2.0 * f.value + g.value)).abs() <= 1e-10 * (1.0 + h.value.abs()));
}

#[test]
fn smoke_matrix_of_models_and_estimators() {
  let flags = ModelFlags { bounded_coefficients: true, declared_uniformly_elliptic: true, ellipticity_floor: 0.81 };
  let models: Vec<Arc<dyn CoefficientModel>> = vec![
    Arc::new(Constant::scalar(0.1, 1.0)),
    Arc::new(MeanFieldOu::new(1.0, 0.5).unwrap()),
    Arc::new(ScalarInteraction::new(vec![ScalarTerm::constant(0.0), ScalarTerm { csin: 0.1, ..ScalarTerm::constant(1.0) }], flags).unwrap()),
  ];
  let cfg = McConfig::new(200, 26);
  for model in models {
    let p = Problem::new(model, TimeGrid::new(1.0, 8).unwrap(), 16, gauss0(), Mat::scalar(0.2), 1.0).unwrap();
    let f = sin();
    let rs = [
      estimate_expectation(&p, &f, &cfg).unwrap(),
      estimate_dx(&p, &[0], &f, &cfg).unwrap(),
      estimate_dx(&p, &[0, 0], &f, &cfg).unwrap(),
      estimate_derivative_of_payoff(&p, &[0], &f, &cfg).unwrap(),
      estimate_dx_fixed_point(&p, &[0], &f, &cfg).unwrap(),
      estimate_dmu(&p, 0, &f, &[Mat::scalar(0.0)], &cfg).unwrap().remove(0),
    ];
    for r in rs {
      assert!(r.value.is_finite() && r.stderr.is_finite(), "{}", r.csv_row());
      assert_eq!(r.n_samples + r.diagnostics.rejected, 200);
    }
  }
}
