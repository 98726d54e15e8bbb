//! Finite-difference cross-checks of the weight estimators, and the probe
//! showing that `θ ↦ |∫y d[X_t^θ]|` has no derivative at centred laws.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::measures::EmpiricalMeasure;
use crate::simulator::{simulate_decoupled_from, streams, InitialLaw};

use super::pde::{estimate_dmu_averaged, translated_initial};
use super::{estimate_dx, run, splitmix, McConfig, Payoff, Problem, SampleOut, Terminal, Welford};

/// Which derivative is compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdTarget {
  /// `∂_{x_i} 𝔼[f(X_t)]`.
  Dx(usize),
  /// Derivative along a translation of the initial law by `e_i`, compared to
  /// `∫ (∂_μ𝔼[f(X_t)])_i(v) θ(dv)`.
  MeasureShift(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdRow {
  pub bump: f64,
  pub fd: f64,
  pub fd_stderr: f64,
  pub weight: f64,
  pub weight_stderr: f64,
  /// `(weight − fd) / √(se_w² + se_fd²)`.
  pub z: f64,
}

impl FdRow {
  pub const CSV_HEADER: &'static str = "bump,fd,fd_stderr,weight,weight_stderr,z";

  pub fn csv_row(&self) -> String {
    format!("{},{},{},{},{},{}", self.bump, self.fd, self.fd_stderr, self.weight, self.weight_stderr, self.z)
  }
}

/// `v` points used for the averaged measure derivative.
pub const MEASURE_SHIFT_V_POINTS: usize = 256;

/// Central differences with bump `b` against the weight estimator. With
/// `common_random_numbers` both legs share the law and sample seeds and the
/// quotient is averaged per sample; otherwise the legs use different seeds.
pub fn compare_fd(problem: &Problem, payoff: &Payoff, target: FdTarget, bumps: &[f64], common_random_numbers: bool, cfg: &McConfig) -> Result<Vec<FdRow>> {
  if bumps.is_empty() {
    return Err(Error::InvalidArgument("no bump sizes".into()));
  }
  if bumps.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
    return Err(Error::InvalidArgument("bump sizes must be positive".into()));
  }
  let nn = problem.dim();
  let i = match target {
    FdTarget::Dx(i) | FdTarget::MeasureShift(i) => i,
  };
  if i >= nn {
    return Err(Error::Dimension(format!("direction {i} out of range for N={nn}")));
  }
  let weight = match target {
    FdTarget::Dx(i) => estimate_dx(problem, &[i], payoff, cfg)?,
    FdTarget::MeasureShift(i) => estimate_dmu_averaged(problem, payoff, i, MEASURE_SHIFT_V_POINTS, cfg)?,
  };
  bumps
    .iter()
    .map(|&b| {
      let mut e = Mat::zeros(nn, 1);
      e[i] = b;
      let (plus, minus) = match target {
        FdTarget::Dx(_) => (problem.with_x(problem.x + e)?, problem.with_x(problem.x - e)?),
        FdTarget::MeasureShift(_) => {
          let shift = |c: Mat| problem.with_initial(translated_initial(&problem.initial, &c, problem.particles, cfg.seed));
          (shift(e)?, shift(-e)?)
        }
      };
      let (fd, se) = if common_random_numbers {
        crn_quotient(&plus, &minus, payoff, b, cfg)?
      } else {
        let a = super::estimate_expectation(&plus, payoff, cfg)?;
        let other = McConfig { seed: splitmix(cfg.seed), ..*cfg };
        let c = super::estimate_expectation(&minus, payoff, &other)?;
        ((a.value - c.value) / (2.0 * b), (a.stderr.powi(2) + c.stderr.powi(2)).sqrt() / (2.0 * b))
      };
      let combined = (se * se + weight.stderr * weight.stderr).sqrt();
      let diff = weight.value - fd;
      Ok(FdRow { bump: b, fd, fd_stderr: se, weight: weight.value, weight_stderr: weight.stderr, z: if diff == 0.0 { 0.0 } else { diff / combined } })
    })
    .collect()
}

/// Per-sample `[f(X⁺) − f(X⁻)]/(2b)` with shared law and sample seeds.
fn crn_quotient(plus: &Problem, minus: &Problem, payoff: &Payoff, b: f64, cfg: &McConfig) -> Result<(f64, f64)> {
  let n = plus.steps()?;
  let model = plus.model.as_ref();
  let stats = run(
    cfg,
    1,
    |seed| {
      let lp = plus.simulate_law(seed)?;
      let lm = minus.simulate_law(seed)?;
      let (mp, mm) = (lp.cloud(n).mean()[0], lm.cloud(n).mean()[0]);
      Ok((lp, lm, mp, mm))
    },
    |(lp, lm, mp, mm), s| {
      let inc = plus.sample_increments(cfg.seed, streams::SAMPLE, s, n);
      let xp = simulate_decoupled_from(model, &plus.x, lp, 0, &inc)?;
      let xm = simulate_decoupled_from(model, &minus.x, lm, 0, &inc)?;
      let fp = payoff.value(xp.terminal(), &Terminal { cloud: lp.cloud(n), mean0: *mp });
      let fm = payoff.value(xm.terminal(), &Terminal { cloud: lm.cloud(n), mean0: *mm });
      Ok(SampleOut::plain(vec![(fp - fm) / (2.0 * b)]))
    },
  )?;
  Ok((stats.stats[0].mean, stats.stderr(0)))
}

/// Outcome of [`non_differentiability_probe`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
  pub h: f64,
  /// Mean one-sided quotient with bump `+h`.
  pub q_plus: f64,
  /// Mean one-sided quotient with bump `−h/2`.
  pub q_minus_half: f64,
  /// Largest standard error of the two means over the replicates.
  pub noise_floor: f64,
  pub replicates: usize,
}

impl ProbeReport {
  /// `|q₊ − q₋| / noise floor`.
  pub fn separation(&self) -> f64 {
    let d = (self.q_plus - self.q_minus_half).abs();
    if self.noise_floor == 0.0 {
      if d == 0.0 {
        0.0
      } else {
        f64::INFINITY
      }
    } else {
      d / self.noise_floor
    }
  }
}

/// One-sided quotients of `b ↦ g([X_t^{θ+b}])` at `b = h` and `b = −h/2`, with
/// the initial cloud recentred to mean zero and the same noise on both sides.
/// For a differentiable `g` both quotients approach the same limit.
pub fn non_differentiability_probe(problem: &Problem, payoff: &Payoff, h: f64, replicates: usize, seed: u64) -> Result<ProbeReport> {
  if !(h > 0.0 && h.is_finite()) || replicates < 2 {
    return Err(Error::InvalidArgument("probe needs h > 0 and at least two replicates".into()));
  }
  let n = problem.steps()?;
  let nn = problem.dim();
  let model = problem.model.as_ref();
  let mut qp = Welford::default();
  let mut qm = Welford::default();
  for r in 0..replicates {
    let rs = splitmix(seed ^ (r as u64));
    let cloud = problem.initial.sample(problem.particles, rs);
    let centred = cloud.translated(&-cloud.mean());
    let value = |b: f64| -> Result<f64> {
      let mut c = Mat::zeros(nn, 1);
      c[0] = b;
      let p = problem.with_initial(InitialLaw::Cloud(centred.translated(&c)))?;
      let law = p.simulate_law(rs)?;
      let inc = p.sample_increments(rs, streams::SAMPLE, 0, n);
      let path = simulate_decoupled_from(model, &p.x, &law, 0, &inc)?;
      let cl: &EmpiricalMeasure = law.cloud(n);
      Ok(payoff.value(path.terminal(), &Terminal::new(cl)))
    };
    let base = value(0.0)?;
    qp.push((value(h)? - base) / h);
    qm.push((value(-h / 2.0)? - base) / (-h / 2.0));
  }
  Ok(ProbeReport { h, q_plus: qp.mean, q_minus_half: qm.mean, noise_floor: qp.stderr().max(qm.stderr()), replicates })
}
