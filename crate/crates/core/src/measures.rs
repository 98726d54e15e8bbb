//! Empirical measures: uniform-weight particle clouds in ℝᴺ.

use crate::error::{Error, Result};
use crate::linalg::{Mat, MAX_DIM};

/// An `M`-point cloud with weights `1/M`, stored row-major as `M×N`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
  dim: usize,
  points: Vec<f64>,
}

impl EmpiricalMeasure {
  pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
    if dim == 0 || dim > MAX_DIM {
      return Err(Error::Dimension(format!("state dimension {dim} not in 1..={MAX_DIM}")));
    }
    if points.is_empty() || !points.len().is_multiple_of(dim) {
      return Err(Error::Dimension(format!(
        "{} coordinates do not form a nonempty cloud in dimension {dim}",
        points.len()
      )));
    }
    if points.iter().any(|v| !v.is_finite()) {
      return Err(Error::InvalidArgument("cloud has non-finite coordinates".into()));
    }
    Ok(EmpiricalMeasure { dim, points })
  }

  /// One-dimensional cloud.
  pub fn from_scalars(values: &[f64]) -> Result<Self> {
    Self::new(1, values.to_vec())
  }

  pub fn from_points(points: &[Mat]) -> Result<Self> {
    let dim = points.first().map_or(0, |p| p.len());
    let mut flat = Vec::with_capacity(points.len() * dim);
    for p in points {
      if p.len() != dim {
        return Err(Error::Dimension("points of mixed dimension".into()));
      }
      flat.extend_from_slice(p.as_slice());
    }
    Self::new(dim, flat)
  }

  #[inline]
  pub fn dim(&self) -> usize {
    self.dim
  }

  #[inline]
  pub fn len(&self) -> usize {
    self.points.len() / self.dim
  }

  #[inline]
  pub fn is_empty(&self) -> bool {
    self.points.is_empty()
  }

  #[inline]
  pub fn coords(&self, i: usize) -> &[f64] {
    &self.points[i * self.dim..(i + 1) * self.dim]
  }

  #[inline]
  pub fn point(&self, i: usize) -> Mat {
    Mat::col(self.coords(i))
  }

  pub fn as_slice(&self) -> &[f64] {
    &self.points
  }

  pub fn iter(&self) -> impl Iterator<Item = Mat> + '_ {
    self.points.chunks_exact(self.dim).map(Mat::col)
  }

  pub fn mean(&self) -> Mat {
    let mut m = Mat::zeros(self.dim, 1);
    for p in self.points.chunks_exact(self.dim) {
      for (k, v) in p.iter().enumerate() {
        m[k] += v;
      }
    }
    m.scale(1.0 / self.len() as f64)
  }

  /// `∫|y|² dμ(y)`.
  pub fn second_moment(&self) -> f64 {
    self.points.iter().map(|v| v * v).sum::<f64>() / self.len() as f64
  }

  pub fn integrate(&self, f: impl Fn(&Mat) -> f64) -> f64 {
    self.iter().map(|p| f(&p)).sum::<f64>() / self.len() as f64
  }

  pub fn translated(&self, c: &Mat) -> EmpiricalMeasure {
    assert_eq!(c.len(), self.dim);
    let mut points = self.points.clone();
    for p in points.chunks_exact_mut(self.dim) {
      for (k, v) in p.iter_mut().enumerate() {
        *v += c[k];
      }
    }
    EmpiricalMeasure { dim: self.dim, points }
  }

  /// Same cloud with particle `i` moved to `p`.
  pub fn with_point(&self, i: usize, p: &Mat) -> EmpiricalMeasure {
    let mut out = self.clone();
    out.points[i * self.dim..(i + 1) * self.dim].copy_from_slice(p.as_slice());
    out
  }
}

/// Exact 2-Wasserstein distance between two one-dimensional clouds of equal size,
/// through the monotone coupling of order statistics.
pub fn wasserstein2_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
  if mu.dim() != 1 || nu.dim() != 1 {
    return Err(Error::Dimension("exact W2 is only available in one dimension".into()));
  }
  if mu.len() != nu.len() {
    return Err(Error::Dimension(format!(
      "clouds have different sizes {} and {}",
      mu.len(),
      nu.len()
    )));
  }
  let mut a = mu.as_slice().to_vec();
  let mut b = nu.as_slice().to_vec();
  a.sort_by(f64::total_cmp);
  b.sort_by(f64::total_cmp);
  let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
  Ok((s / a.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
  use super::*;
  use proptest::prelude::*;

  fn cloud(v: &[f64]) -> EmpiricalMeasure {
    EmpiricalMeasure::from_scalars(v).unwrap()
  }

  #[test]
  fn moments_of_small_clouds() {
    let c = cloud(&[0.0]);
    assert_eq!(c.mean()[0], 0.0);
    assert_eq!(c.second_moment(), 0.0);
    let c = cloud(&[-1.0, 1.0]);
    assert_eq!(c.mean()[0], 0.0);
    assert_eq!(c.second_moment(), 1.0);
    let c = cloud(&[1.0, 2.0, 3.0]);
    assert!((c.integrate(|y| y[0] * y[0]) - 14.0 / 3.0).abs() < 1e-15);
  }

  #[test]
  fn w2_examples() {
    let a = cloud(&[0.3, -1.0, 2.0]);
    assert_eq!(wasserstein2_1d(&a, &a).unwrap(), 0.0);
    assert_eq!(wasserstein2_1d(&cloud(&[0.0, 0.0]), &cloud(&[1.0, 1.0])).unwrap(), 1.0);
    // Both couplings of two points, brute force.
    let (x, y): ([f64; 2], [f64; 2]) = ([0.0, 2.0], [1.0, 3.0]);
    let c1 = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)) / 2.0;
    let c2 = ((x[0] - y[1]).powi(2) + (x[1] - y[0]).powi(2)) / 2.0;
    let brute = c1.min(c2).sqrt();
    let w = wasserstein2_1d(&cloud(&x), &cloud(&y)).unwrap();
    assert!((w - brute).abs() < 1e-15);
    assert_eq!(w, 1.0);
  }

  #[test]
  fn w2_rejects_higher_dimension_and_size_mismatch() {
    let a = EmpiricalMeasure::new(2, vec![0.0, 1.0]).unwrap();
    assert!(matches!(wasserstein2_1d(&a, &a), Err(Error::Dimension(_))));
    assert!(wasserstein2_1d(&cloud(&[0.0]), &cloud(&[0.0, 1.0])).is_err());
  }

  #[test]
  fn rejects_non_finite_points() {
    assert!(EmpiricalMeasure::from_scalars(&[f64::NAN]).is_err());
    assert!(EmpiricalMeasure::from_scalars(&[]).is_err());
  }

  proptest! {
    #[test]
    fn w2_is_a_metric(
      a in prop::collection::vec(-5.0f64..5.0, 6),
      b in prop::collection::vec(-5.0f64..5.0, 6),
      c in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
      let (a, b, c) = (cloud(&a), cloud(&b), cloud(&c));
      let ab = wasserstein2_1d(&a, &b).unwrap();
      let ba = wasserstein2_1d(&b, &a).unwrap();
      let bc = wasserstein2_1d(&b, &c).unwrap();
      let ac = wasserstein2_1d(&a, &c).unwrap();
      prop_assert!((ab - ba).abs() <= 1e-12);
      prop_assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn w2_translation_covariant(
      a in prop::collection::vec(-5.0f64..5.0, 5),
      b in prop::collection::vec(-5.0f64..5.0, 5),
      shift in -3.0f64..3.0,
    ) {
      let (a, b) = (cloud(&a), cloud(&b));
      let s = Mat::scalar(shift);
      let w0 = wasserstein2_1d(&a, &b).unwrap();
      let w1 = wasserstein2_1d(&a.translated(&s), &b.translated(&s)).unwrap();
      prop_assert!((w0 - w1).abs() <= 1e-12);
    }
  }
}
