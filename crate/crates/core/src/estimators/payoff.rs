//! Terminal functions `f(x)` and `g(x, μ)` from a fixed registry.
//!
//! All payoffs read state coordinate 0 only.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::measures::EmpiricalMeasure;

/// Scalar functions of `x₀`.
#[derive(Clone, Debug, PartialEq)]
pub enum ScalarPayoff {
  Identity,
  Square,
  Sin,
  PositivePart,
  /// `1_{x₀ > z}`.
  IndicatorAbove(f64),
  /// `Σ_k c_k x₀^k`.
  Polynomial(Vec<f64>),
}

impl ScalarPayoff {
  pub fn value(&self, y: f64) -> f64 {
    match self {
      ScalarPayoff::Identity => y,
      ScalarPayoff::Square => y * y,
      ScalarPayoff::Sin => y.sin(),
      ScalarPayoff::PositivePart => y.max(0.0),
      ScalarPayoff::IndicatorAbove(z) => f64::from(y > *z),
      ScalarPayoff::Polynomial(c) => c.iter().rev().fold(0.0, |acc, ck| acc * y + ck),
    }
  }

  /// Classical derivative, when `f` is `C¹`.
  pub fn derivative(&self, y: f64) -> Option<f64> {
    match self {
      ScalarPayoff::Identity => Some(1.0),
      ScalarPayoff::Square => Some(2.0 * y),
      ScalarPayoff::Sin => Some(y.cos()),
      ScalarPayoff::PositivePart | ScalarPayoff::IndicatorAbove(_) => None,
      ScalarPayoff::Polynomial(c) => {
        Some(c.iter().enumerate().skip(1).rev().fold(0.0, |acc, (k, ck)| acc * y + k as f64 * ck))
      }
    }
  }
}

/// Structure of the measure dependence of `g`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayoffClass {
  /// No usable structure beyond what `grad`/`dmu` provide.
  Plain,
  /// `∂_μg(x, μ, v) = ∂_x G(x, μ, v)`.
  IcX,
  /// `∂_μg(x, μ, v) = ∂_v G(x, μ, v)`.
  IcV,
}

/// Terminal function `g(x, μ)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Payoff {
  Scalar(ScalarPayoff),
  /// `x₀ − ∫y₀ μ(dy)`, class `(IC)ₓ` with `G = −(x₀ − ∫y₀ dμ)`.
  CentredMean,
  /// `∫(x₀ − y₀)⁺ μ(dy)`, class `(IC)_v` with `G = (x₀ − v₀)⁺`.
  ConvolutionPositivePart,
  /// `|∫y₀ μ(dy)|`; not differentiable in `μ` at centred laws.
  AbsMean,
  Scaled(f64, Box<Payoff>),
  Sum(Box<Payoff>, Box<Payoff>),
}

/// Terminal law with its first moment cached.
#[derive(Clone, Copy, Debug)]
pub struct Terminal<'a> {
  pub cloud: &'a EmpiricalMeasure,
  pub mean0: f64,
}

impl<'a> Terminal<'a> {
  pub fn new(cloud: &'a EmpiricalMeasure) -> Self {
    Terminal { cloud, mean0: cloud.mean()[0] }
  }
}

fn e0(n: usize, s: f64) -> Mat {
  let mut m = Mat::zeros(n, 1);
  m[0] = s;
  m
}

impl Payoff {
  pub fn scalar(f: ScalarPayoff) -> Self {
    Payoff::Scalar(f)
  }

  /// Registry lookup; `param` feeds `indicator_above` and `polynomial`.
  pub fn from_name(name: &str, threshold: Option<f64>, coefficients: Option<&[f64]>) -> Result<Self> {
    Ok(match name {
      "identity" => Payoff::Scalar(ScalarPayoff::Identity),
      "square" => Payoff::Scalar(ScalarPayoff::Square),
      "sin" => Payoff::Scalar(ScalarPayoff::Sin),
      "positive_part" => Payoff::Scalar(ScalarPayoff::PositivePart),
      "indicator_above" => {
        let z = threshold.ok_or_else(|| Error::InvalidArgument("indicator_above needs a threshold".into()))?;
        Payoff::Scalar(ScalarPayoff::IndicatorAbove(z))
      }
      "polynomial" => {
        let c = coefficients.ok_or_else(|| Error::InvalidArgument("polynomial needs coefficients".into()))?;
        if c.is_empty() {
          return Err(Error::InvalidArgument("polynomial needs at least one coefficient".into()));
        }
        Payoff::Scalar(ScalarPayoff::Polynomial(c.to_vec()))
      }
      "centred_mean" => Payoff::CentredMean,
      "convolution_positive_part" => Payoff::ConvolutionPositivePart,
      "abs_mean" => Payoff::AbsMean,
      other => return Err(Error::InvalidArgument(format!("unknown payoff '{other}'"))),
    })
  }

  pub fn value(&self, x: &Mat, law: &Terminal<'_>) -> f64 {
    match self {
      Payoff::Scalar(f) => f.value(x[0]),
      Payoff::CentredMean => x[0] - law.mean0,
      Payoff::ConvolutionPositivePart => law.cloud.integrate(|y| (x[0] - y[0]).max(0.0)),
      Payoff::AbsMean => law.mean0.abs(),
      Payoff::Scaled(a, p) => a * p.value(x, law),
      Payoff::Sum(a, b) => a.value(x, law) + b.value(x, law),
    }
  }

  /// `∂_x g`, `N×1`.
  pub fn grad(&self, x: &Mat, law: &Terminal<'_>) -> Option<Mat> {
    match self {
      Payoff::Scalar(f) => f.derivative(x[0]).map(|d| e0(x.len(), d)),
      Payoff::CentredMean => Some(e0(x.len(), 1.0)),
      Payoff::ConvolutionPositivePart | Payoff::AbsMean => None,
      Payoff::Scaled(a, p) => p.grad(x, law).map(|g| g.scale(*a)),
      Payoff::Sum(a, b) => Some(a.grad(x, law)? + b.grad(x, law)?),
    }
  }

  /// `∂_μg(x, μ, v)`, `N×1`.
  pub fn dmu(&self, x: &Mat, law: &Terminal<'_>, v: &Mat) -> Option<Mat> {
    match self {
      Payoff::Scalar(_) => Some(Mat::zeros(x.len(), 1)),
      Payoff::CentredMean => Some(e0(x.len(), -1.0)),
      Payoff::ConvolutionPositivePart | Payoff::AbsMean => None,
      Payoff::Scaled(a, p) => p.dmu(x, law, v).map(|g| g.scale(*a)),
      Payoff::Sum(a, b) => Some(a.dmu(x, law, v)? + b.dmu(x, law, v)?),
    }
  }

  /// `g` does not depend on `μ`.
  pub fn is_law_free(&self) -> bool {
    match self {
      Payoff::Scalar(_) => true,
      Payoff::Scaled(_, p) => p.is_law_free(),
      Payoff::Sum(a, b) => a.is_law_free() && b.is_law_free(),
      _ => false,
    }
  }

  pub fn class(&self) -> PayoffClass {
    match self {
      Payoff::CentredMean => PayoffClass::IcX,
      Payoff::ConvolutionPositivePart => PayoffClass::IcV,
      Payoff::Scaled(_, p) => p.class(),
      Payoff::Sum(a, b) => match (a.class(), b.class()) {
        (ca, cb) if ca == cb => ca,
        (c, _) if b.is_law_free() => c,
        (_, c) if a.is_law_free() => c,
        _ => PayoffClass::Plain,
      },
      _ => PayoffClass::Plain,
    }
  }

  /// Companion `G(x, μ, v)` of the `(IC)` classes; `0` for law-free parts.
  pub fn companion(&self, x: &Mat, law: &Terminal<'_>, v: &Mat) -> Option<f64> {
    match self {
      Payoff::Scalar(_) => Some(0.0),
      Payoff::CentredMean => Some(-(x[0] - law.mean0)),
      Payoff::ConvolutionPositivePart => Some((x[0] - v[0]).max(0.0)),
      Payoff::AbsMean => None,
      Payoff::Scaled(a, p) => p.companion(x, law, v).map(|g| a * g),
      Payoff::Sum(a, b) => Some(a.companion(x, law, v)? + b.companion(x, law, v)?),
    }
  }
}

#[cfg(test)]
mod tests {
  use super::*;

  fn fd(f: impl Fn(f64) -> f64, y: f64) -> f64 {
    let e = 1e-6;
    (f(y + e) - f(y - e)) / (2.0 * e)
  }

  #[test]
  fn scalar_derivatives_match_differences() {
    for f in [ScalarPayoff::Identity, ScalarPayoff::Square, ScalarPayoff::Sin, ScalarPayoff::Polynomial(vec![1.0, -2.0, 0.5, 3.0])] {
      for y in [-1.3, 0.2, 2.0] {
        let d = f.derivative(y).unwrap();
        assert!((d - fd(|z| f.value(z), y)).abs() < 1e-6, "{f:?} at {y}");
      }
    }
    assert_eq!(ScalarPayoff::Polynomial(vec![1.0, 0.0, 2.0]).value(3.0), 19.0);
    assert_eq!(ScalarPayoff::IndicatorAbove(0.5).value(0.5), 0.0);
    assert!(ScalarPayoff::PositivePart.derivative(1.0).is_none());
  }

  #[test]
  fn companions_reproduce_lions_derivatives() {
    let cloud = EmpiricalMeasure::from_scalars(&[-0.5, 0.1, 0.9, 1.4]).unwrap();
    let law = Terminal::new(&cloud);
    let x = Mat::scalar(0.6);
    let v = Mat::scalar(0.2);
    // (IC)ₓ: ∂_μg = ∂_x G.
    let g = |y: f64| Payoff::CentredMean.companion(&Mat::scalar(y), &law, &v).unwrap();
    assert!((fd(g, x[0]) - Payoff::CentredMean.dmu(&x, &law, &v).unwrap()[0]).abs() < 1e-8);
    // (IC)_v: moving the particle at 0.1 changes g by −1_{x>y}; ∂_v G(x, v) = −1_{x>v}.
    let p = Payoff::ConvolutionPositivePart;
    let moved = |y: f64| p.value(&x, &Terminal::new(&cloud.with_point(1, &Mat::scalar(y)))) * cloud.len() as f64;
    let gv = |w: f64| p.companion(&x, &law, &Mat::scalar(w)).unwrap();
    assert!((fd(moved, 0.1) - fd(gv, 0.1)).abs() < 1e-6);
    assert!((fd(moved, 0.1) + 1.0).abs() < 1e-6);
  }

  #[test]
  fn registry_and_combinators() {
    assert!(Payoff::from_name("nope", None, None).is_err());
    assert!(Payoff::from_name("indicator_above", None, None).is_err());
    let s = Payoff::Sum(Box::new(Payoff::CentredMean), Box::new(Payoff::Scaled(2.0, Box::new(Payoff::scalar(ScalarPayoff::Square)))));
    assert_eq!(s.class(), PayoffClass::IcX);
    let cloud = EmpiricalMeasure::from_scalars(&[1.0, 3.0]).unwrap();
    let law = Terminal::new(&cloud);
    let x = Mat::scalar(1.5);
    assert_eq!(s.value(&x, &law), 1.5 - 2.0 + 2.0 * 2.25);
    assert_eq!(s.grad(&x, &law).unwrap()[0], 1.0 + 6.0);
    assert!(Payoff::AbsMean.grad(&x, &law).is_none());
  }
}
