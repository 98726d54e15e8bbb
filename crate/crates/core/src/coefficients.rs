//! Coefficient fields `V₀,…,V_d : ℝᴺ×𝒫₂(ℝᴺ) → ℝᴺ` and their derivatives.
//!
//! Index `i = 0` is the drift and `i = 1..=d` are the columns of `σ`. Models
//! supply `∂ₓV_i` and the Lions derivative `∂_μV_i(x,μ,v)` analytically. The
//! directional second derivatives have finite-difference defaults and are
//! overridden analytically by the built-in families.

use std::fmt::Debug;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::measures::EmpiricalMeasure;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelFlags {
  pub bounded_coefficients: bool,
  pub declared_uniformly_elliptic: bool,
  /// Lower bound `ε` of `σσᵀ`; meaningful only when ellipticity is declared.
  pub ellipticity_floor: f64,
}

/// A measure argument: the particle cloud plus model-specific summary statistics
/// computed once, so that coefficient evaluations do not rescan the cloud.
#[derive(Clone, Debug)]
pub struct Law {
  cloud: EmpiricalMeasure,
  stats: Vec<f64>,
}

impl Law {
  pub fn new(model: &dyn CoefficientModel, cloud: EmpiricalMeasure) -> Self {
    let stats = model.law_stats(&cloud);
    Law { cloud, stats }
  }

  #[inline]
  pub fn cloud(&self) -> &EmpiricalMeasure {
    &self.cloud
  }

  #[inline]
  pub fn stats(&self) -> &[f64] {
    &self.stats
  }
}

/// Coefficient interface consumed by the simulator, tangents and weights.
pub trait CoefficientModel: Send + Sync + Debug {
  fn dim_state(&self) -> usize;
  fn dim_noise(&self) -> usize;
  fn flags(&self) -> ModelFlags;

  /// Summary statistics of a cloud reused by every evaluation against it.
  fn law_stats(&self, _cloud: &EmpiricalMeasure) -> Vec<f64> {
    Vec::new()
  }

  /// `V_i(x, μ)` as an `N×1` column.
  fn field(&self, i: usize, x: &Mat, law: &Law) -> Mat;

  /// `∂ₓV_i(x, μ)`, `N×N`.
  fn field_dx(&self, i: usize, x: &Mat, law: &Law) -> Mat;

  /// `∂_μV_i(x, μ, v)`, `N×N`; entry `(a, b)` is the sensitivity of component
  /// `a` to moving mass at `v` in direction `b`.
  fn field_dmu(&self, i: usize, x: &Mat, law: &Law, v: &Mat) -> Mat;

  /// Directional derivative of `∂ₓV_i` along `w`.
  fn field_dx_dir(&self, i: usize, x: &Mat, law: &Law, w: &Mat) -> Mat {
    central_difference(x, w, |y| self.field_dx(i, y, law))
  }

  /// Directional derivative in `x` of `∂_μV_i(·, μ, v)` along `w`.
  fn field_dmu_dx_dir(&self, i: usize, x: &Mat, law: &Law, v: &Mat, w: &Mat) -> Mat {
    central_difference(x, w, |y| self.field_dmu(i, y, law, v))
  }

  /// Factorization `∂_μV_i(x,μ,v) = A_i(x,μ)·∇φ_i(v)ᵀ`, when available.
  fn lions_factors(&self) -> Option<&dyn LionsFactors> {
    None
  }
}

/// Separable Lions derivative of scalar-interaction models.
pub trait LionsFactors: Send + Sync {
  /// `A_i(x, μ)`, `N×1`.
  fn left(&self, i: usize, x: &Mat, law: &Law) -> Mat;
  /// Directional derivative of `A_i` in `x` along `w`.
  fn left_dx_dir(&self, i: usize, x: &Mat, law: &Law, w: &Mat) -> Mat;
  /// `∇φ_i(v)`, `N×1`.
  fn right(&self, i: usize, v: &Mat) -> Mat;
}

fn central_difference(x: &Mat, w: &Mat, f: impl Fn(&Mat) -> Mat) -> Mat {
  let wn = w.norm();
  if wn == 0.0 {
    return f(x).scale(0.0);
  }
  let eps = 1e-5 * (1.0 + x.norm()) / wn;
  let mut xp = *x;
  xp.axpy(eps, w);
  let mut xm = *x;
  xm.axpy(-eps, w);
  (f(&xp) - f(&xm)).scale(0.5 / eps)
}

/// `σ(x, μ)`, the `N×d` matrix with columns `V₁..V_d`.
pub fn sigma(model: &dyn CoefficientModel, x: &Mat, law: &Law) -> Mat {
  let (n, d) = (model.dim_state(), model.dim_noise());
  let mut s = Mat::zeros(n, d);
  for i in 1..=d {
    s.set_column(i - 1, &model.field(i, x, law));
  }
  s
}

/// Every block of the coefficient model at one point.
#[derive(Clone, Debug)]
pub struct CoefficientEval {
  pub drift: Mat,
  pub diffusion: Mat,
  /// `∂ₓV_i` for `i = 0..=d`.
  pub dx: Vec<Mat>,
  /// `∂_μV_i(x, μ, v)` for `i = 0..=d`, when a `v` was requested.
  pub dmu: Option<Vec<Mat>>,
}

/// Evaluates every requested block at the same `(x, μ)`.
pub fn eval_all(
  model: &dyn CoefficientModel,
  x: &Mat,
  law: &Law,
  dmu_at: Option<&Mat>,
) -> Result<CoefficientEval> {
  let d = model.dim_noise();
  let bad = |field: usize| Error::ModelEvaluation { field, x: x.as_slice().to_vec() };
  let drift = model.field(0, x, law);
  if !drift.is_finite() {
    return Err(bad(0));
  }
  let diffusion = sigma(model, x, law);
  if !diffusion.is_finite() {
    return Err(bad(1));
  }
  let mut dx = Vec::with_capacity(d + 1);
  for i in 0..=d {
    let m = model.field_dx(i, x, law);
    if !m.is_finite() {
      return Err(bad(i));
    }
    dx.push(m);
  }
  let dmu = match dmu_at {
    None => None,
    Some(v) => {
      let mut out = Vec::with_capacity(d + 1);
      for i in 0..=d {
        let m = model.field_dmu(i, x, law, v);
        if !m.is_finite() {
          return Err(bad(i));
        }
        out.push(m);
      }
      Some(out)
    }
  };
  Ok(CoefficientEval { drift, diffusion, dx, dmu })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EllipticityReport {
  /// Smallest eigenvalue of `σσᵀ` over the probes.
  pub min_eigenvalue: f64,
  pub floor: f64,
  pub violated: bool,
}

/// Smallest eigenvalue of `σσᵀ(x, μ)`.
pub fn min_eigenvalue_sigma(model: &dyn CoefficientModel, x: &Mat, law: &Law) -> f64 {
  let s = sigma(model, x, law);
  let a = s * s.transpose();
  let n = a.rows();
  let m = DMatrix::from_row_slice(n, n, a.as_slice());
  SymmetricEigen::new(m).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Spot-check of uniform ellipticity at the given probe points.
pub fn check_ellipticity(model: &dyn CoefficientModel, probes: &[(Mat, &Law)]) -> EllipticityReport {
  let min_eigenvalue = probes
    .iter()
    .map(|(x, law)| min_eigenvalue_sigma(model, x, law))
    .fold(f64::INFINITY, f64::min);
  let flags = model.flags();
  let floor = if flags.declared_uniformly_elliptic { flags.ellipticity_floor } else { 0.0 };
  EllipticityReport {
    min_eigenvalue,
    floor,
    violated: flags.declared_uniformly_elliptic && min_eigenvalue < floor,
  }
}

/// One-particle Lions probe: move particle `j` by `h·e` and return the change of
/// `V_i(x, ·)` divided by `h/M`. Converges to `∂_μV_i(x, μ, θ_j)·e`.
pub fn lions_probe(
  model: &dyn CoefficientModel,
  i: usize,
  x: &Mat,
  cloud: &EmpiricalMeasure,
  j: usize,
  e: &Mat,
  h: f64,
) -> Mat {
  let base = Law::new(model, cloud.clone());
  let mut p = cloud.point(j);
  p.axpy(h, e);
  let moved = Law::new(model, cloud.with_point(j, &p));
  (model.field(i, x, &moved) - model.field(i, x, &base)).scale(cloud.len() as f64 / h)
}

// ---------------------------------------------------------------------------
// Built-in families
// ---------------------------------------------------------------------------

/// `V₀ = b`, `σ = σ₀`, no dependence on state or measure.
#[derive(Clone, Debug)]
pub struct Constant {
  b: Mat,
  sigma: Mat,
}

impl Constant {
  pub fn new(b: Mat, sigma: Mat) -> Result<Self> {
    if b.cols() != 1 || sigma.rows() != b.rows() || sigma.cols() == 0 {
      return Err(Error::Dimension(format!(
        "constant model needs b: N×1 and sigma: N×d, got {}x{} and {}x{}",
        b.rows(),
        b.cols(),
        sigma.rows(),
        sigma.cols()
      )));
    }
    Ok(Constant { b, sigma })
  }

  pub fn scalar(b: f64, sigma: f64) -> Self {
    Constant { b: Mat::scalar(b), sigma: Mat::scalar(sigma) }
  }
}

impl CoefficientModel for Constant {
  fn dim_state(&self) -> usize {
    self.b.rows()
  }
  fn dim_noise(&self) -> usize {
    self.sigma.cols()
  }
  fn flags(&self) -> ModelFlags {
    let s = self.sigma * self.sigma.transpose();
    let n = s.rows();
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, s.as_slice()))
      .eigenvalues
      .iter()
      .copied()
      .fold(f64::INFINITY, f64::min);
    ModelFlags {
      bounded_coefficients: true,
      declared_uniformly_elliptic: eig > 0.0,
      ellipticity_floor: eig.max(0.0),
    }
  }
  fn field(&self, i: usize, _x: &Mat, _law: &Law) -> Mat {
    if i == 0 {
      self.b
    } else {
      self.sigma.column(i - 1)
    }
  }
  fn field_dx(&self, _i: usize, _x: &Mat, _law: &Law) -> Mat {
    Mat::zeros(self.dim_state(), self.dim_state())
  }
  fn field_dmu(&self, _i: usize, _x: &Mat, _law: &Law, _v: &Mat) -> Mat {
    Mat::zeros(self.dim_state(), self.dim_state())
  }
  fn field_dx_dir(&self, _i: usize, _x: &Mat, _law: &Law, _w: &Mat) -> Mat {
    Mat::zeros(self.dim_state(), self.dim_state())
  }
  fn field_dmu_dx_dir(&self, _i: usize, _x: &Mat, _law: &Law, _v: &Mat, _w: &Mat) -> Mat {
    Mat::zeros(self.dim_state(), self.dim_state())
  }
}

/// Mean-field Ornstein-Uhlenbeck: `V₀ = a(∫y dμ − x)`, `V₁ = σ₀`, `N = d = 1`.
#[derive(Clone, Debug)]
pub struct MeanFieldOu {
  pub a: f64,
  pub sigma: f64,
}

impl MeanFieldOu {
  pub fn new(a: f64, sigma: f64) -> Result<Self> {
    if !(a > 0.0 && sigma > 0.0 && a.is_finite() && sigma.is_finite()) {
      return Err(Error::InvalidArgument(format!("mean_field_ou needs a>0, sigma>0; got a={a}, sigma={sigma}")));
    }
    Ok(MeanFieldOu { a, sigma })
  }
}

impl CoefficientModel for MeanFieldOu {
  fn dim_state(&self) -> usize {
    1
  }
  fn dim_noise(&self) -> usize {
    1
  }
  fn flags(&self) -> ModelFlags {
    ModelFlags {
      bounded_coefficients: false,
      declared_uniformly_elliptic: true,
      ellipticity_floor: self.sigma * self.sigma,
    }
  }
  fn law_stats(&self, cloud: &EmpiricalMeasure) -> Vec<f64> {
    vec![cloud.mean()[0]]
  }
  fn field(&self, i: usize, x: &Mat, law: &Law) -> Mat {
    match i {
      0 => Mat::scalar(self.a * (law.stats()[0] - x[0])),
      _ => Mat::scalar(self.sigma),
    }
  }
  fn field_dx(&self, i: usize, _x: &Mat, _law: &Law) -> Mat {
    Mat::scalar(if i == 0 { -self.a } else { 0.0 })
  }
  fn field_dmu(&self, i: usize, _x: &Mat, _law: &Law, _v: &Mat) -> Mat {
    Mat::scalar(if i == 0 { self.a } else { 0.0 })
  }
  fn field_dx_dir(&self, _i: usize, _x: &Mat, _law: &Law, _w: &Mat) -> Mat {
    Mat::scalar(0.0)
  }
  fn field_dmu_dx_dir(&self, _i: usize, _x: &Mat, _law: &Law, _v: &Mat, _w: &Mat) -> Mat {
    Mat::scalar(0.0)
  }
  fn lions_factors(&self) -> Option<&dyn LionsFactors> {
    Some(self)
  }
}

impl LionsFactors for MeanFieldOu {
  fn left(&self, i: usize, _x: &Mat, _law: &Law) -> Mat {
    Mat::scalar(if i == 0 { self.a } else { 0.0 })
  }
  fn left_dx_dir(&self, _i: usize, _x: &Mat, _law: &Law, _w: &Mat) -> Mat {
    Mat::scalar(0.0)
  }
  fn right(&self, _i: usize, _v: &Mat) -> Mat {
    Mat::scalar(1.0)
  }
}

/// Feature `φ` integrated against the measure in scalar-interaction models.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Feature {
  Identity,
  Square,
  Sin,
  Tanh,
}

impl Feature {
  pub fn value(self, y: f64) -> f64 {
    match self {
      Feature::Identity => y,
      Feature::Square => y * y,
      Feature::Sin => y.sin(),
      Feature::Tanh => y.tanh(),
    }
  }

  pub fn derivative(self, y: f64) -> f64 {
    match self {
      Feature::Identity => 1.0,
      Feature::Square => 2.0 * y,
      Feature::Sin => y.cos(),
      Feature::Tanh => 1.0 - y.tanh().powi(2),
    }
  }

  pub fn parse(name: &str) -> Option<Self> {
    match name {
      "identity" => Some(Feature::Identity),
      "square" => Some(Feature::Square),
      "sin" => Some(Feature::Sin),
      "tanh" => Some(Feature::Tanh),
      _ => None,
    }
  }
}

/// One coefficient `V(x, μ) = U(x, ∫φ dμ)` with
/// `U(x, m) = c0 + cx·x + cm·m + cxm·x·m + csin·sin x` (`N = 1`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarTerm {
  pub c0: f64,
  pub cx: f64,
  pub cm: f64,
  pub cxm: f64,
  pub csin: f64,
  pub phi: Feature,
}

impl ScalarTerm {
  pub fn constant(c0: f64) -> Self {
    ScalarTerm { c0, cx: 0.0, cm: 0.0, cxm: 0.0, csin: 0.0, phi: Feature::Identity }
  }

  fn u(&self, x: f64, m: f64) -> f64 {
    self.c0 + self.cx * x + self.cm * m + self.cxm * x * m + self.csin * x.sin()
  }
  fn u_x(&self, x: f64, m: f64) -> f64 {
    self.cx + self.cxm * m + self.csin * x.cos()
  }
  fn u_xx(&self, x: f64) -> f64 {
    -self.csin * x.sin()
  }
  fn u_m(&self, x: f64) -> f64 {
    self.cm + self.cxm * x
  }
}

/// Scalar-interaction family `V_i(x, μ) = U_i(x, ∫φ_i dμ)`, one-dimensional.
#[derive(Clone, Debug)]
pub struct ScalarInteraction {
  terms: Vec<ScalarTerm>,
  flags: ModelFlags,
}

impl ScalarInteraction {
  /// `terms[0]` is the drift, `terms[1..]` the diffusion columns.
  pub fn new(terms: Vec<ScalarTerm>, flags: ModelFlags) -> Result<Self> {
    if terms.len() < 2 {
      return Err(Error::Dimension("scalar_interaction needs a drift and at least one diffusion term".into()));
    }
    Ok(ScalarInteraction { terms, flags })
  }
}

impl CoefficientModel for ScalarInteraction {
  fn dim_state(&self) -> usize {
    1
  }
  fn dim_noise(&self) -> usize {
    self.terms.len() - 1
  }
  fn flags(&self) -> ModelFlags {
    self.flags
  }
  fn law_stats(&self, cloud: &EmpiricalMeasure) -> Vec<f64> {
    self.terms.iter().map(|t| cloud.integrate(|y| t.phi.value(y[0]))).collect()
  }
  fn field(&self, i: usize, x: &Mat, law: &Law) -> Mat {
    Mat::scalar(self.terms[i].u(x[0], law.stats()[i]))
  }
  fn field_dx(&self, i: usize, x: &Mat, law: &Law) -> Mat {
    Mat::scalar(self.terms[i].u_x(x[0], law.stats()[i]))
  }
  fn field_dmu(&self, i: usize, x: &Mat, _law: &Law, v: &Mat) -> Mat {
    let t = &self.terms[i];
    Mat::scalar(t.u_m(x[0]) * t.phi.derivative(v[0]))
  }
  fn field_dx_dir(&self, i: usize, x: &Mat, _law: &Law, w: &Mat) -> Mat {
    Mat::scalar(self.terms[i].u_xx(x[0]) * w[0])
  }
  fn field_dmu_dx_dir(&self, i: usize, _x: &Mat, _law: &Law, v: &Mat, w: &Mat) -> Mat {
    let t = &self.terms[i];
    Mat::scalar(t.cxm * t.phi.derivative(v[0]) * w[0])
  }
  fn lions_factors(&self) -> Option<&dyn LionsFactors> {
    Some(self)
  }
}

impl LionsFactors for ScalarInteraction {
  fn left(&self, i: usize, x: &Mat, _law: &Law) -> Mat {
    Mat::scalar(self.terms[i].u_m(x[0]))
  }
  fn left_dx_dir(&self, i: usize, _x: &Mat, _law: &Law, w: &Mat) -> Mat {
    Mat::scalar(self.terms[i].cxm * w[0])
  }
  fn right(&self, i: usize, v: &Mat) -> Mat {
    Mat::scalar(self.terms[i].phi.derivative(v[0]))
  }
}

/// Pair kernel `W(x, y) = c0 + cx·x + cy·y + cxy·x·y + csin·sin(y − x)` (`N = 1`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairKernel {
  pub c0: f64,
  pub cx: f64,
  pub cy: f64,
  pub cxy: f64,
  pub csin: f64,
}

/// First-order interaction family `V_i(x, μ) = ∫W_i(x, y) dμ(y)`, one-dimensional.
#[derive(Clone, Debug)]
pub struct FirstOrder {
  kernels: Vec<PairKernel>,
  flags: ModelFlags,
}

impl FirstOrder {
  pub fn new(kernels: Vec<PairKernel>, flags: ModelFlags) -> Result<Self> {
    if kernels.len() < 2 {
      return Err(Error::Dimension("first_order needs a drift and at least one diffusion kernel".into()));
    }
    Ok(FirstOrder { kernels, flags })
  }
}

// Stats: [∫y, ∫sin y, ∫cos y]; sin(y − x) = sin y cos x − cos y sin x.
impl CoefficientModel for FirstOrder {
  fn dim_state(&self) -> usize {
    1
  }
  fn dim_noise(&self) -> usize {
    self.kernels.len() - 1
  }
  fn flags(&self) -> ModelFlags {
    self.flags
  }
  fn law_stats(&self, cloud: &EmpiricalMeasure) -> Vec<f64> {
    vec![
      cloud.integrate(|y| y[0]),
      cloud.integrate(|y| y[0].sin()),
      cloud.integrate(|y| y[0].cos()),
    ]
  }
  fn field(&self, i: usize, x: &Mat, law: &Law) -> Mat {
    let k = &self.kernels[i];
    let (m, s, c) = (law.stats()[0], law.stats()[1], law.stats()[2]);
    let x = x[0];
    Mat::scalar(k.c0 + k.cx * x + k.cy * m + k.cxy * x * m + k.csin * (s * x.cos() - c * x.sin()))
  }
  fn field_dx(&self, i: usize, x: &Mat, law: &Law) -> Mat {
    let k = &self.kernels[i];
    let (m, s, c) = (law.stats()[0], law.stats()[1], law.stats()[2]);
    let x = x[0];
    Mat::scalar(k.cx + k.cxy * m - k.csin * (s * x.sin() + c * x.cos()))
  }
  fn field_dmu(&self, i: usize, x: &Mat, _law: &Law, v: &Mat) -> Mat {
    let k = &self.kernels[i];
    Mat::scalar(k.cy + k.cxy * x[0] + k.csin * (v[0] - x[0]).cos())
  }
  fn field_dx_dir(&self, i: usize, x: &Mat, law: &Law, w: &Mat) -> Mat {
    let k = &self.kernels[i];
    let (s, c) = (law.stats()[1], law.stats()[2]);
    let x = x[0];
    Mat::scalar(k.csin * (c * x.sin() - s * x.cos()) * w[0])
  }
  fn field_dmu_dx_dir(&self, i: usize, x: &Mat, _law: &Law, v: &Mat, w: &Mat) -> Mat {
    let k = &self.kernels[i];
    Mat::scalar((k.cxy + k.csin * (v[0] - x[0]).sin()) * w[0])
  }
}
