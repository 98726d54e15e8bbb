//! Closed-form reference values, each with an independent deterministic
//! integration on a fine grid.
//!
//! * Constant coefficients: `X_t = x + bt + σ₀B_t ~ N(x + bt, σ₀²t)`.
//! * Mean-field OU, `dX = a(𝔼X − X)dt + σ₀dB`: the mean solves `m' = a(m − m) = 0`,
//!   so `X_t = m + (x − m)e^{−at} + σ₀∫₀ᵗ e^{−a(t−s)}dB_s` for the decoupled flow
//!   started at `x` against a law with mean `m`.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

fn normal(mean: f64, sd: f64) -> Normal {
  Normal::new(mean, sd).expect("positive standard deviation")
}

/// `N(x + bt, σ₀²t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianOracle {
  pub b: f64,
  pub sigma: f64,
  pub t: f64,
  pub x: f64,
}

pub fn gaussian_oracle(b: f64, sigma: f64, t: f64, x: f64) -> Result<GaussianOracle> {
  if !(sigma > 0.0 && t > 0.0) {
    return Err(Error::InvalidArgument(format!("need σ₀ > 0 and t > 0, got σ₀={sigma}, t={t}")));
  }
  Ok(GaussianOracle { b, sigma, t, x })
}

impl GaussianOracle {
  pub fn mean(&self) -> f64 {
    self.x + self.b * self.t
  }

  pub fn variance(&self) -> f64 {
    self.sigma * self.sigma * self.t
  }

  fn dist(&self) -> Normal {
    normal(self.mean(), self.variance().sqrt())
  }

  pub fn density(&self, z: f64) -> f64 {
    self.dist().pdf(z)
  }

  /// `∂_x p = −∂_z p`.
  pub fn density_dx(&self, z: f64) -> f64 {
    (z - self.mean()) / self.variance() * self.density(z)
  }

  pub fn density_dz(&self, z: f64) -> f64 {
    -self.density_dx(z)
  }

  /// `P(X_t > z)`.
  pub fn tail(&self, z: f64) -> f64 {
    self.dist().sf(z)
  }

  pub fn expect_identity(&self) -> f64 {
    self.mean()
  }

  pub fn expect_square(&self) -> f64 {
    self.mean().powi(2) + self.variance()
  }

  /// `e^{−σ₀²t/2} sin(x + bt)`.
  pub fn expect_sin(&self) -> f64 {
    (-self.variance() / 2.0).exp() * self.mean().sin()
  }

  pub fn dx_expect_sin(&self) -> f64 {
    (-self.variance() / 2.0).exp() * self.mean().cos()
  }

  /// `𝔼[X⁺] = μΦ(μ/s) + sφ(μ/s)`.
  pub fn expect_positive_part(&self) -> f64 {
    let (mu, s) = (self.mean(), self.variance().sqrt());
    let std = normal(0.0, 1.0);
    mu * std.cdf(mu / s) + s * std.pdf(mu / s)
  }
}

/// Mean-field OU quantities for the flow from `x` against a law with mean `m`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MfOuOracle {
  pub a: f64,
  pub sigma: f64,
  pub t: f64,
  pub x: f64,
  pub m: f64,
}

pub fn mf_ou_oracle(a: f64, sigma: f64, t: f64, x: f64, m: f64) -> Result<MfOuOracle> {
  if !(a > 0.0 && sigma > 0.0 && t >= 0.0) {
    return Err(Error::InvalidArgument(format!("need a > 0, σ₀ > 0, t ≥ 0, got a={a}, σ₀={sigma}, t={t}")));
  }
  Ok(MfOuOracle { a, sigma, t, x, m })
}

impl MfOuOracle {
  fn decay(&self) -> f64 {
    (-self.a * self.t).exp()
  }

  pub fn mean(&self) -> f64 {
    self.m + (self.x - self.m) * self.decay()
  }

  /// `σ₀²(1 − e^{−2at})/(2a)`.
  pub fn variance(&self) -> f64 {
    self.sigma * self.sigma * -(-2.0 * self.a * self.t).exp_m1() / (2.0 * self.a)
  }

  pub fn second_moment(&self) -> f64 {
    self.mean().powi(2) + self.variance()
  }

  pub fn density(&self, z: f64) -> f64 {
    normal(self.mean(), self.variance().sqrt()).pdf(z)
  }

  /// `∂ₓ𝔼[X_t^{x,[θ]}] = e^{−at}`.
  pub fn dx_mean(&self) -> f64 {
    self.decay()
  }

  /// `∂_μ𝔼[X_t^{x,[θ]}](v) = 1 − e^{−at}` for every `v`.
  pub fn lions(&self) -> f64 {
    -(-self.a * self.t).exp_m1()
  }

  /// `∂ₓ𝔼[X_t^{x,δ_x}] = 1`.
  pub fn total_fixed_point_dx(&self) -> f64 {
    1.0
  }

  /// `U = 𝔼[X_t − ∫y d[X_t^θ]] = (x − m)e^{−at}`.
  pub fn u_centred(&self) -> f64 {
    (self.x - self.m) * self.decay()
  }

  pub fn du_centred_dx(&self) -> f64 {
    self.decay()
  }

  /// `∂_μU(v) = (1 − e^{−at}) − 1`.
  pub fn dmu_u_centred(&self) -> f64 {
    -self.decay()
  }

  /// `∂_tU`.
  pub fn dt_u_centred(&self) -> f64 {
    -self.a * self.u_centred()
  }
}

/// Moments and tangents of the mean-field OU flow by RK4 on the linear ODEs
/// `m_x' = a(m − m_x)`, `v' = −2av + σ₀²`, `j' = −aj`, `ℓ' = a(1 − ℓ)`
/// (decoupled mean, variance, `∂ₓ` of the mean and the Lions derivative).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuOdeSolution {
  pub mean: f64,
  pub variance: f64,
  pub dx_mean: f64,
  pub lions: f64,
}

pub fn mf_ou_ode(a: f64, sigma: f64, t: f64, x: f64, m: f64, step: f64) -> OuOdeSolution {
  let rhs = |y: [f64; 4]| [a * (m - y[0]), -2.0 * a * y[1] + sigma * sigma, -a * y[2], a * (1.0 - y[3])];
  let y = rk4(rhs, [x, 0.0, 1.0, 0.0], t, step);
  OuOdeSolution { mean: y[0], variance: y[1], dx_mean: y[2], lions: y[3] }
}

/// Mean and variance of the constant-coefficient flow by RK4 on `μ' = b`, `v' = σ₀²`.
pub fn gaussian_ode(b: f64, sigma: f64, t: f64, x: f64, step: f64) -> (f64, f64) {
  let y = rk4(|_| [b, sigma * sigma], [x, 0.0], t, step);
  (y[0], y[1])
}

fn rk4<const K: usize>(f: impl Fn([f64; K]) -> [f64; K], y0: [f64; K], t: f64, step: f64) -> [f64; K] {
  let n = (t / step).ceil().max(1.0) as usize;
  let h = t / n as f64;
  let add = |y: [f64; K], k: [f64; K], s: f64| {
    let mut o = y;
    for i in 0..K {
      o[i] += s * k[i];
    }
    o
  };
  let mut y = y0;
  for _ in 0..n {
    let k1 = f(y);
    let k2 = f(add(y, k1, h / 2.0));
    let k3 = f(add(y, k2, h / 2.0));
    let k4 = f(add(y, k3, h));
    for i in 0..K {
      y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
  }
  y
}

/// Composite Simpson rule with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
  let n = n + n % 2;
  let h = (hi - lo) / n as f64;
  let mut s = f(lo) + f(hi);
  for k in 1..n {
    s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(lo + k as f64 * h);
  }
  s * h / 3.0
}
