//! Integration-by-parts weights built from a [`Carrier`].
//!
//! Every operator reduces to the discrete Skorohod integral
//! `δ(F·u) = F·Σ_k u_k·ΔB_k − Σ_k ⟨D_kF, u_k⟩ h`, where `D_k` differentiates
//! with respect to the increment `ΔB_k`. For `u = u^j` (column `j` of
//! `U_k = σ⁺_k J_k`), the correction `Σ_k ⟨D_kF, u^j_k⟩ h` is the directional
//! derivative of `F` along the increment perturbation `η_k = u^j_k h`; it is
//! computed by forward-mode tangents when `F` is a carrier quantity and by a
//! central difference of rebuilt carriers when `F` is itself a weight.

use std::cell::OnceCell;
use std::fmt;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::tangents::{Carrier, CarrierSetup, CarrierTangent, Direction};

/// Total integration-by-parts order supported.
pub const MAX_ORDER: usize = 2;

/// Adapted direction `u` times an anticipating scalar `F` with its field `D_kF`.
#[derive(Clone, Copy, Debug)]
pub struct SkorohodIntegrand<'a> {
  /// `u_k`, `d×1`, for `k < n`; `u_k` may only depend on `ΔB_j` with `j < k`.
  pub u: &'a [Mat],
  pub f: f64,
  /// `D_kF`, `d×1`, for `k < n`.
  pub field: Option<&'a [Mat]>,
  /// `F` depends on the increments.
  pub random: bool,
}

/// `δ(F·u)` with the left-point sum.
pub fn skorohod(integrand: &SkorohodIntegrand<'_>, increments: &[Mat], h: f64) -> Result<f64> {
  let u = integrand.u;
  if u.len() > increments.len() {
    return Err(Error::Dimension(format!("{} integrand nodes but {} increments", u.len(), increments.len())));
  }
  let ito: f64 = u.iter().zip(increments).map(|(uk, db)| uk.dot(db)).sum();
  let mut out = integrand.f * ito;
  match (integrand.random, integrand.field) {
    (true, None) => return Err(Error::MissingField),
    (_, Some(field)) => {
      if field.len() < u.len() {
        return Err(Error::Dimension("Malliavin field shorter than the integrand".into()));
      }
      out -= h * u.iter().zip(field).map(|(uk, dk)| uk.dot(dk)).sum::<f64>();
    }
    (false, None) => {}
  }
  Ok(out)
}

/// Weight expression tree. Indices are zero-based state coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightExpr {
  One,
  /// `I¹_{(i)}(Ψ) = t^{-1/2} δ(Ψ·u^i)`.
  I1(usize, Box<WeightExpr>),
  /// `I²_{(i)}(Ψ) = Σ_j I¹_{(j)}((J_t⁻¹)_{ji}Ψ)`.
  I2(usize, Box<WeightExpr>),
  /// `I³_{(i)}(Ψ) = I¹_{(i)}(Ψ) + √t ∂_{x_i}Ψ`.
  I3(usize, Box<WeightExpr>),
  /// `𝓘¹_{(i)}(Ψ)(v) = Σ_j I¹_{(j)}((J_t⁻¹L_t(v))_{ji}Ψ)`.
  CalI1(usize, Mat, Box<WeightExpr>),
  /// `𝓘³_{(i)}(Ψ)(v) = 𝓘¹_{(i)}(Ψ)(v) + √t (∂_μΨ)_i(v)`.
  CalI3(usize, Mat, Box<WeightExpr>),
  /// `J_{(i)}(Ψ) = I³_{(i)}(Ψ) + 𝓘³_{(i)}(Ψ)` at `[θ] = δ_x`, `v = x`.
  J(usize, Box<WeightExpr>),
}

impl WeightExpr {
  pub fn order(&self) -> usize {
    match self {
      WeightExpr::One => 0,
      WeightExpr::I1(_, p) | WeightExpr::I2(_, p) | WeightExpr::I3(_, p) | WeightExpr::J(_, p) => 1 + p.order(),
      WeightExpr::CalI1(_, _, p) | WeightExpr::CalI3(_, _, p) => 1 + p.order(),
    }
  }

  pub fn i1(i: usize, inner: WeightExpr) -> Self {
    WeightExpr::I1(i, Box::new(inner))
  }
  pub fn i2(i: usize, inner: WeightExpr) -> Self {
    WeightExpr::I2(i, Box::new(inner))
  }
  pub fn i3(i: usize, inner: WeightExpr) -> Self {
    WeightExpr::I3(i, Box::new(inner))
  }
  pub fn cal_i1(i: usize, v: Mat, inner: WeightExpr) -> Self {
    WeightExpr::CalI1(i, v, Box::new(inner))
  }
  pub fn cal_i3(i: usize, v: Mat, inner: WeightExpr) -> Self {
    WeightExpr::CalI3(i, v, Box::new(inner))
  }
  pub fn j(i: usize, inner: WeightExpr) -> Self {
    WeightExpr::J(i, Box::new(inner))
  }

  /// Applies `op` for each index of `alpha` in order, innermost first.
  pub fn nested(alpha: &[usize], inner: WeightExpr, op: fn(usize, WeightExpr) -> WeightExpr) -> Self {
    alpha.iter().fold(inner, |acc, &i| op(i, acc))
  }

  fn tag(&self) -> &'static str {
    match self {
      WeightExpr::One => "1",
      WeightExpr::I1(..) => "I1",
      WeightExpr::I2(..) => "I2",
      WeightExpr::I3(..) => "I3",
      WeightExpr::CalI1(..) => "calI1",
      WeightExpr::CalI3(..) => "calI3",
      WeightExpr::J(..) => "J",
    }
  }

  /// `Ψ ∈ {I¹_{(i)}(1), I³_{(i)}(1)}`, whose derivatives are exact carrier tangents.
  fn simple_index(&self) -> Option<usize> {
    match self {
      WeightExpr::I1(i, p) | WeightExpr::I3(i, p) if **p == WeightExpr::One => Some(*i),
      _ => None,
    }
  }
}

impl fmt::Display for WeightExpr {
  fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match self {
      WeightExpr::One => write!(f, "1"),
      WeightExpr::I1(i, p) | WeightExpr::I2(i, p) | WeightExpr::I3(i, p) | WeightExpr::J(i, p) => {
        write!(f, "{}_{}({})", self.tag(), i + 1, p)
      }
      WeightExpr::CalI1(i, v, p) | WeightExpr::CalI3(i, v, p) => write!(f, "{}_{}[v={:?}]({})", self.tag(), i + 1, v.as_slice(), p),
    }
  }
}

/// One sample of a weight.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightRealization {
  pub value: f64,
  pub order: usize,
  pub tag: String,
  pub t: f64,
}

/// Setups at `x ± ε e_i` whose laws start at `δ_{x±εe_i}` (same seeds), used
/// for total derivatives inside `J`.
#[derive(Clone, Copy)]
pub struct FixedPointShift<'a> {
  pub eps: f64,
  pub plus: CarrierSetup<'a>,
  pub minus: CarrierSetup<'a>,
}

/// Everything needed to evaluate weights on one sample.
#[derive(Clone, Copy)]
pub struct WeightContext<'a> {
  pub setup: CarrierSetup<'a>,
  pub x0: Mat,
  pub increments: &'a [Mat],
  pub aux_increments: &'a [Vec<Mat>],
  /// The fixed point `x` of `[θ] = δ_x`, required by `J`.
  pub fixed_x: Option<Mat>,
  /// One shift per coordinate, required by `J` with a non-unit inner weight.
  pub shifts: &'a [FixedPointShift<'a>],
}

impl<'a> WeightContext<'a> {
  pub fn build(&self) -> Result<Carrier> {
    self.setup.build(&self.x0, self.increments, self.aux_increments)
  }

  /// Evaluates `expr` on this sample, building the carrier.
  pub fn evaluate(&self, expr: &WeightExpr) -> Result<WeightRealization> {
    let c = self.build()?;
    self.evaluate_on(expr, &c)
  }

  /// Evaluates `expr` on an already built carrier of this context.
  pub fn evaluate_on(&self, expr: &WeightExpr, c: &Carrier) -> Result<WeightRealization> {
    let order = expr.order();
    if order > MAX_ORDER {
      return Err(Error::OrderExceeded { requested: order, cap: MAX_ORDER });
    }
    let value = Eval::new(self, c).value(expr)?;
    if !value.is_finite() {
      return Err(Error::SingularJacobian { condition: c.condition });
    }
    Ok(WeightRealization { value, order, tag: expr.to_string(), t: c.t() })
  }
}

struct Eval<'c, 'a> {
  ctx: &'c WeightContext<'a>,
  c: &'c Carrier,
  along_u: OnceCell<Vec<CarrierTangent>>,
}

impl<'c, 'a> Eval<'c, 'a> {
  fn new(ctx: &'c WeightContext<'a>, c: &'c Carrier) -> Self {
    Eval { ctx, c, along_u: OnceCell::new() }
  }

  fn dims(&self) -> usize {
    self.ctx.setup.model.dim_state()
  }

  /// `η^{(j)}_k = u^j_k h`.
  fn eta(&self, j: usize) -> Vec<Mat> {
    self.c.u.iter().map(|uk| uk.column(j).scale(self.c.h)).collect()
  }

  fn tangents_u(&self) -> &[CarrierTangent] {
    self.along_u.get_or_init(|| {
      (0..self.dims())
        .map(|j| {
          let eta = self.eta(j);
          self.ctx.setup.tangent(self.c, Direction { xi: None, eta: Some(&eta) })
        })
        .collect()
    })
  }

  fn value(&self, e: &WeightExpr) -> Result<f64> {
    let c = self.c;
    let rt = c.t().sqrt();
    match e {
      WeightExpr::One => Ok(1.0),
      WeightExpr::I1(i, p) => {
        let psi = self.value(p)?;
        Ok((psi * c.s[*i] - self.pairing(p, *i)?) / rt)
      }
      WeightExpr::I2(i, p) => self.contracted(p, |j| (c.jinv[(j, *i)], self.tangents_u()[j].djinv[(j, *i)])),
      WeightExpr::CalI1(i, v, p) => {
        let vi = self.ctx.setup.lions_index(v)?;
        self.cal_i1(*i, vi, p)
      }
      WeightExpr::I3(i, p) => {
        let first = self.value(&WeightExpr::I1(*i, p.clone()))?;
        Ok(first + rt * self.dx(p, *i)?)
      }
      WeightExpr::CalI3(i, v, p) => {
        if **p != WeightExpr::One {
          return Err(Error::Unsupported(format!(
            "measure derivative of the inner weight {p} is only available through J"
          )));
        }
        let vi = self.ctx.setup.lions_index(v)?;
        self.cal_i1(*i, vi, p)
      }
      WeightExpr::J(i, p) => {
        let x = self.ctx.fixed_x.ok_or_else(|| Error::InvalidArgument("J needs a fixed-point context".into()))?;
        let vi = self.ctx.setup.lions_index(&x)?;
        let first = self.value(&WeightExpr::I1(*i, p.clone()))?;
        let second = self.cal_i1(*i, vi, p)?;
        Ok(first + second + rt * self.total_dx(p, *i)?)
      }
    }
  }

  fn cal_i1(&self, i: usize, vi: usize, p: &WeightExpr) -> Result<f64> {
    let c = self.c;
    let l = &c.lions[vi][c.n_steps()];
    let m = &c.jinv * l;
    self.contracted(p, |j| {
      let t = &self.tangents_u()[j];
      let dm = &t.djinv * l + c.jinv * t.dlions[vi];
      (m[(j, i)], dm[(j, i)])
    })
  }

  /// `Σ_j I¹_{(j)}(c_j Ψ)` where `coef(j) = (c_j, ⟨Dc_j, u^j⟩)`.
  fn contracted(&self, p: &WeightExpr, coef: impl Fn(usize) -> (f64, f64)) -> Result<f64> {
    let c = self.c;
    let psi = self.value(p)?;
    let mut out = 0.0;
    for j in 0..self.dims() {
      let (cj, dcj) = coef(j);
      let dpsi = if *p == WeightExpr::One || cj == 0.0 { 0.0 } else { self.pairing(p, j)? };
      out += cj * psi * c.s[j] - dcj * psi - cj * dpsi;
    }
    Ok(out / c.t().sqrt())
  }

  /// `Σ_k ⟨D_kΨ, u^j_k⟩ h`.
  fn pairing(&self, p: &WeightExpr, j: usize) -> Result<f64> {
    if *p == WeightExpr::One {
      return Ok(0.0);
    }
    if let Some(i) = p.simple_index() {
      return Ok(self.tangents_u()[j].ds[i] / self.c.t().sqrt());
    }
    let eta = self.eta(j);
    let scale = eta.iter().map(Mat::max_abs).fold(0.0, f64::max);
    if scale == 0.0 {
      return Ok(0.0);
    }
    let eps = 1e-4 * self.c.h.sqrt() / scale;
    let shifted = |s: f64| -> Result<f64> {
      let inc: Vec<Mat> = self.ctx.increments.iter().zip(&eta).map(|(b, e)| *b + e.scale(s)).chain(self.ctx.increments[eta.len()..].iter().copied()).collect();
      let ctx = WeightContext { increments: &inc, ..*self.ctx };
      let c = ctx.build()?;
      Eval::new(&ctx, &c).value(p)
    };
    Ok((shifted(eps)? - shifted(-eps)?) / (2.0 * eps))
  }

  /// `∂_{x_i}Ψ` with the law held fixed.
  fn dx(&self, p: &WeightExpr, i: usize) -> Result<f64> {
    if *p == WeightExpr::One {
      return Ok(0.0);
    }
    let n = self.dims();
    if let Some(j) = p.simple_index() {
      let mut xi = Mat::zeros(n, 1);
      xi[i] = 1.0;
      let t = self.ctx.setup.tangent(self.c, Direction { xi: Some(&xi), eta: None });
      return Ok(t.ds[j] / self.c.t().sqrt());
    }
    let eps = 1e-4 * (1.0 + self.ctx.x0.max_abs());
    let shifted = |s: f64| -> Result<f64> {
      let mut x0 = self.ctx.x0;
      x0[i] += s;
      let ctx = WeightContext { x0, ..*self.ctx };
      let c = ctx.build()?;
      Eval::new(&ctx, &c).value(p)
    };
    Ok((shifted(eps)? - shifted(-eps)?) / (2.0 * eps))
  }

  /// `d/dx_i Ψ(t, x, δ_x)`: the law is re-simulated from `δ_{x±ε}`.
  fn total_dx(&self, p: &WeightExpr, i: usize) -> Result<f64> {
    if *p == WeightExpr::One {
      return Ok(0.0);
    }
    let sh = self
      .ctx
      .shifts
      .get(i)
      .ok_or_else(|| Error::InvalidArgument("J with an inner weight needs shifted fixed-point laws".into()))?;
    let x = self.ctx.fixed_x.ok_or_else(|| Error::InvalidArgument("J needs a fixed-point context".into()))?;
    let eval = |setup: CarrierSetup<'a>, s: f64| -> Result<f64> {
      let mut xs = x;
      xs[i] += s;
      let mut x0 = self.ctx.x0;
      x0[i] += s;
      let ctx = WeightContext { setup, x0, fixed_x: Some(xs), ..*self.ctx };
      let c = ctx.build()?;
      Eval::new(&ctx, &c).value(p)
    };
    Ok((eval(sh.plus, sh.eps)? - eval(sh.minus, -sh.eps)?) / (2.0 * sh.eps))
  }
}

#[cfg(test)]
mod tests {
  use super::*;
  use crate::coefficients::{Constant, MeanFieldOu};
  use crate::simulator::{simulate_particles, streams, BrownianDriver, InitialLaw, ParticleSystemPaths, TimeGrid};
  use crate::tangents::{propagate_lions, LionsMode, LionsTangentSystem};

  fn law(model: &dyn crate::coefficients::CoefficientModel, t: f64, n: usize) -> ParticleSystemPaths {
    let g = TimeGrid::new(t, n).unwrap();
    simulate_particles(model, &InitialLaw::Dirac(Mat::scalar(0.0)), 4, &g, &BrownianDriver::new(1, streams::LAW, 1)).unwrap()
  }

  #[test]
  fn skorohod_examples() {
    let inc: Vec<Mat> = [0.3, -0.1, 0.5].iter().map(|&v| Mat::scalar(v)).collect();
    let ones = vec![Mat::scalar(1.0); 3];
    let bt: f64 = 0.7;
    let plain = SkorohodIntegrand { u: &ones, f: 1.0, field: None, random: false };
    assert!((skorohod(&plain, &inc, 0.25).unwrap() - bt).abs() < 1e-15);
    // F = B_t with D_kF = 1: B_t² − t.
    let field = vec![Mat::scalar(1.0); 3];
    let prod = SkorohodIntegrand { u: &ones, f: bt, field: Some(&field), random: true };
    assert!((skorohod(&prod, &inc, 0.25).unwrap() - (bt * bt - 0.75)).abs() < 1e-15);
    let missing = SkorohodIntegrand { field: None, ..prod };
    assert_eq!(skorohod(&missing, &inc, 0.25), Err(Error::MissingField));
  }

  #[test]
  fn order_cap_is_enforced() {
    let m = Constant::scalar(0.0, 1.0);
    let l = law(&m, 1.0, 4);
    let setup = CarrierSetup::new(&m, &l, &[], 4).unwrap();
    let inc = BrownianDriver::new(1, streams::SAMPLE, 1).increments(0, 4, 0.25);
    let ctx = WeightContext { setup, x0: Mat::scalar(0.0), increments: &inc, aux_increments: &[], fixed_x: None, shifts: &[] };
    let e = WeightExpr::nested(&[0, 0, 0], WeightExpr::One, WeightExpr::i1);
    assert_eq!(ctx.evaluate(&e), Err(Error::OrderExceeded { requested: 3, cap: 2 }));
  }

  #[test]
  fn constant_model_weights_in_closed_form() {
    let s0 = 0.8;
    let m = Constant::scalar(0.2, s0);
    let l = law(&m, 0.5, 16);
    let setup = CarrierSetup::new(&m, &l, &[], 16).unwrap();
    let h = l.grid().step();
    for path in 0..5 {
      let inc = BrownianDriver::new(3, streams::SAMPLE, 1).increments(path, 16, h);
      let bt: f64 = inc.iter().map(|b| b[0]).sum();
      let ctx = WeightContext { setup, x0: Mat::scalar(0.1), increments: &inc, aux_increments: &[], fixed_x: None, shifts: &[] };
      let w1 = ctx.evaluate(&WeightExpr::i1(0, WeightExpr::One)).unwrap().value;
      assert!((w1 - bt / (s0 * 0.5f64.sqrt())).abs() < 1e-13);
      let w2 = ctx.evaluate(&WeightExpr::i2(0, WeightExpr::One)).unwrap().value;
      assert!((w2 - w1).abs() < 1e-13);
      let nested = ctx.evaluate(&WeightExpr::nested(&[0, 0], WeightExpr::One, WeightExpr::i1)).unwrap().value;
      let hand = (bt * bt - 0.5) / (s0 * s0 * 0.5);
      assert!((nested - hand).abs() <= 1e-10 * hand.abs().max(1.0));
      // The generic difference path agrees with the exact tangent path.
      let via_fd = ctx.evaluate(&WeightExpr::i2(0, WeightExpr::i2(0, WeightExpr::One))).unwrap().value;
      assert!((via_fd - hand).abs() <= 1e-6 * hand.abs().max(1.0));
    }
  }

  #[test]
  fn cal_i_vanishes_without_measure_dependence() {
    let m = Constant::scalar(0.0, 1.0);
    let l = law(&m, 1.0, 8);
    let v = Mat::scalar(0.4);
    let sys: Vec<LionsTangentSystem> = vec![propagate_lions(&m, &l, &v, 8, &BrownianDriver::new(1, streams::AUX_LAW, 1), LionsMode::Auto).unwrap()];
    let setup = CarrierSetup::new(&m, &l, &sys, 8).unwrap();
    let inc = BrownianDriver::new(2, streams::SAMPLE, 1).increments(0, 8, 0.125);
    let aux = vec![BrownianDriver::new(2, streams::AUX, 1).increments(0, 8, 0.125)];
    let ctx = WeightContext { setup, x0: Mat::scalar(0.0), increments: &inc, aux_increments: &aux, fixed_x: Some(v), shifts: &[] };
    assert_eq!(ctx.evaluate(&WeightExpr::cal_i1(0, v, WeightExpr::One)).unwrap().value, 0.0);
    let j = ctx.evaluate(&WeightExpr::j(0, WeightExpr::One)).unwrap().value;
    let i1 = ctx.evaluate(&WeightExpr::i1(0, WeightExpr::One)).unwrap().value;
    assert_eq!(j, i1);
    assert!(matches!(ctx.evaluate(&WeightExpr::cal_i3(0, v, WeightExpr::i1(0, WeightExpr::One))), Err(Error::Unsupported(_))));
    assert!(matches!(ctx.evaluate(&WeightExpr::cal_i1(0, Mat::scalar(9.0), WeightExpr::One)), Err(Error::MissingAuxiliaryPath { .. })));
  }

  #[test]
  fn ou_lions_weight_is_scaled_first_weight() {
    // J⁻¹L(v) is deterministic for the OU model, so 𝓘¹ = (e^{at}−1)·I¹ up to the Euler product.
    let m = MeanFieldOu::new(1.0, 0.5).unwrap();
    let l = law(&m, 0.5, 32);
    let v = Mat::scalar(0.0);
    let sys = vec![propagate_lions(&m, &l, &v, 32, &BrownianDriver::new(1, streams::AUX_LAW, 1), LionsMode::Auto).unwrap()];
    let setup = CarrierSetup::new(&m, &l, &sys, 32).unwrap();
    let h = l.grid().step();
    let inc = BrownianDriver::new(5, streams::SAMPLE, 1).increments(0, 32, h);
    let aux = vec![BrownianDriver::new(5, streams::AUX, 1).increments(0, 32, h)];
    let ctx = WeightContext { setup, x0: Mat::scalar(0.3), increments: &inc, aux_increments: &aux, fixed_x: None, shifts: &[] };
    let c = ctx.build().unwrap();
    let ratio = c.jinv[0] * c.lions[0][32][0];
    let i1 = ctx.evaluate(&WeightExpr::i1(0, WeightExpr::One)).unwrap().value;
    let cal = ctx.evaluate(&WeightExpr::cal_i1(0, v, WeightExpr::One)).unwrap().value;
    assert!((cal - ratio * i1).abs() < 1e-12);
    assert!((ratio - (0.5f64.exp() - 1.0)).abs() < 0.02);
  }
}
