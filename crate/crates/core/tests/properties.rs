use std::sync::Arc;

use mckean::coefficients::{CoefficientModel, Constant};
use mckean::estimators::density::scalar_grid;
use mckean::estimators::{estimate_expectation, McConfig, Payoff, Problem, ScalarPayoff};
use mckean::simulator::{simulate_particles, streams, BrownianDriver, InitialLaw, TimeGrid};
use mckean::tangents::CarrierSetup;
use mckean::weights::{skorohod, SkorohodIntegrand, WeightContext, WeightExpr};
use mckean::Mat;
use proptest::prelude::*;

proptest! {
  #![proptest_config(ProptestConfig::with_cases(48))]

  #[test]
  fn skorohod_is_linear_in_adapted_integrands(
    inc in prop::collection::vec(-1.0f64..1.0, 6),
    u in prop::collection::vec(-2.0f64..2.0, 6),
    w in prop::collection::vec(-2.0f64..2.0, 6),
    a in -3.0f64..3.0,
  ) {
    let m = |v: &[f64]| v.iter().map(|&x| Mat::scalar(x)).collect::<Vec<_>>();
    let (inc, u, w) = (m(&inc), m(&u), m(&w));
    let mix: Vec<Mat> = u.iter().zip(&w).map(|(p, q)| p.scale(a) + *q).collect();
    let d = |v: &[Mat]| skorohod(&SkorohodIntegrand { u: v, f: 1.0, field: None, random: false }, &inc, 0.1).unwrap();
    prop_assert!((d(&mix) - (a * d(&u) + d(&w))).abs() < 1e-12);
  }

  #[test]
  fn first_weight_of_constant_model_is_scaled_brownian_endpoint(s0 in 0.2f64..3.0, t in 0.05f64..2.0, seed in 0u64..1000) {
    let model = Constant::scalar(0.3, s0);
    let grid = TimeGrid::new(t, 8).unwrap();
    let law = simulate_particles(&model, &InitialLaw::Dirac(Mat::scalar(0.0)), 2, &grid, &BrownianDriver::new(seed, streams::LAW, 1)).unwrap();
    let setup = CarrierSetup::new(&model, &law, &[], 8).unwrap();
    let inc = BrownianDriver::new(seed, streams::SAMPLE, 1).increments(0, 8, grid.step());
    let bt: f64 = inc.iter().map(|d| d[0]).sum();
    let ctx = WeightContext { setup, x0: Mat::scalar(0.1), increments: &inc, aux_increments: &[], fixed_x: None, shifts: &[] };
    for e in [WeightExpr::i1(0, WeightExpr::One), WeightExpr::i2(0, WeightExpr::One), WeightExpr::i3(0, WeightExpr::One)] {
      let w = ctx.evaluate(&e).unwrap().value;
      prop_assert!((w - bt / (s0 * t.sqrt())).abs() < 1e-10 * (1.0 + w.abs()));
    }
  }

  #[test]
  fn scalar_grids_are_increasing_and_hit_both_ends(lo in -10.0f64..10.0, width in 0.1f64..10.0, count in 2usize..200) {
    let g = scalar_grid(lo, lo + width, count).unwrap();
    prop_assert_eq!(g.len(), count);
    prop_assert_eq!(g[0][0], lo);
    prop_assert_eq!(g[count - 1][0], lo + width);
    prop_assert!(g.windows(2).all(|w| w[1][0] > w[0][0]));
  }

  #[test]
  fn estimates_do_not_depend_on_batching(batch in 1usize..64, seed in 0u64..1000) {
    let model: Arc<dyn CoefficientModel> = Arc::new(Constant::scalar(0.0, 1.0));
    let p = Problem::new(model, TimeGrid::new(1.0, 4).unwrap(), 4, InitialLaw::Dirac(Mat::scalar(0.0)), Mat::scalar(0.0), 1.0).unwrap();
    let f = Payoff::scalar(ScalarPayoff::Sin);
    let a = estimate_expectation(&p, &f, &McConfig::new(100, seed)).unwrap();
    let b = estimate_expectation(&p, &f, &McConfig { batch_size: batch, ..McConfig::new(100, seed) }).unwrap();
    prop_assert!((a.value - b.value).abs() < 1e-12);
    prop_assert!((a.stderr - b.stderr).abs() < 1e-12);
  }
}
