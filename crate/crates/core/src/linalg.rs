//! Small dense matrices stored inline.
//!
//! State and noise dimensions in this crate are tiny (at most [`MAX_DIM`]), and
//! the tangent recursions touch a handful of such matrices per Euler step per
//! sample. Keeping them on the stack avoids an allocation per operation.

use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

/// Largest supported state or noise dimension.
pub const MAX_DIM: usize = 3;
const CAP: usize = MAX_DIM * MAX_DIM;

/// Row-major matrix with at most `MAX_DIM` rows and columns.
///
/// Column vectors are matrices with one column.
#[derive(Clone, Copy, PartialEq)]
pub struct Mat {
  rows: u8,
  cols: u8,
  a: [f64; CAP],
}

impl Mat {
  pub fn zeros(rows: usize, cols: usize) -> Self {
    assert!(
      rows <= MAX_DIM && cols <= MAX_DIM,
      "dimension {rows}x{cols} exceeds MAX_DIM={MAX_DIM}"
    );
    Mat { rows: rows as u8, cols: cols as u8, a: [0.0; CAP] }
  }

  pub fn identity(n: usize) -> Self {
    let mut m = Mat::zeros(n, n);
    for i in 0..n {
      m[(i, i)] = 1.0;
    }
    m
  }

  pub fn diag(d: &[f64]) -> Self {
    let mut m = Mat::zeros(d.len(), d.len());
    for (i, v) in d.iter().enumerate() {
      m[(i, i)] = *v;
    }
    m
  }

  /// Column vector from a slice.
  pub fn col(v: &[f64]) -> Self {
    let mut m = Mat::zeros(v.len(), 1);
    m.a[..v.len()].copy_from_slice(v);
    m
  }

  pub fn scalar(v: f64) -> Self {
    Mat::col(&[v])
  }

  pub fn from_rows(rows: &[&[f64]]) -> Self {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    let mut m = Mat::zeros(r, c);
    for (i, row) in rows.iter().enumerate() {
      assert_eq!(row.len(), c, "ragged rows");
      for (j, v) in row.iter().enumerate() {
        m[(i, j)] = *v;
      }
    }
    m
  }

  /// Row-major construction from a flat slice.
  pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Self {
    assert_eq!(data.len(), rows * cols);
    let mut m = Mat::zeros(rows, cols);
    m.a[..rows * cols].copy_from_slice(data);
    m
  }

  #[inline]
  pub fn rows(&self) -> usize {
    self.rows as usize
  }

  #[inline]
  pub fn cols(&self) -> usize {
    self.cols as usize
  }

  #[inline]
  pub fn len(&self) -> usize {
    self.rows() * self.cols()
  }

  #[inline]
  pub fn is_empty(&self) -> bool {
    self.len() == 0
  }

  /// Entries in row-major order.
  #[inline]
  pub fn as_slice(&self) -> &[f64] {
    &self.a[..self.len()]
  }

  #[inline]
  pub fn as_mut_slice(&mut self) -> &mut [f64] {
    let n = self.len();
    &mut self.a[..n]
  }

  pub fn column(&self, j: usize) -> Mat {
    let mut out = Mat::zeros(self.rows(), 1);
    for i in 0..self.rows() {
      out.a[i] = self[(i, j)];
    }
    out
  }

  pub fn set_column(&mut self, j: usize, v: &Mat) {
    debug_assert_eq!(v.len(), self.rows());
    for i in 0..self.rows() {
      self[(i, j)] = v.a[i];
    }
  }

  pub fn row(&self, i: usize) -> Mat {
    let mut out = Mat::zeros(1, self.cols());
    for j in 0..self.cols() {
      out.a[j] = self[(i, j)];
    }
    out
  }

  pub fn transpose(&self) -> Mat {
    let mut out = Mat::zeros(self.cols(), self.rows());
    for i in 0..self.rows() {
      for j in 0..self.cols() {
        out[(j, i)] = self[(i, j)];
      }
    }
    out
  }

  pub fn scale(&self, s: f64) -> Mat {
    let mut out = *self;
    for v in out.as_mut_slice() {
      *v *= s;
    }
    out
  }

  /// `self += s * other`
  #[inline]
  pub fn axpy(&mut self, s: f64, other: &Mat) {
    debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
    let n = self.len();
    for k in 0..n {
      self.a[k] += s * other.a[k];
    }
  }

  /// Euclidean inner product of two equally shaped matrices.
  pub fn dot(&self, other: &Mat) -> f64 {
    debug_assert_eq!(self.len(), other.len());
    self.as_slice().iter().zip(other.as_slice()).map(|(x, y)| x * y).sum()
  }

  pub fn norm(&self) -> f64 {
    self.dot(self).sqrt()
  }

  pub fn max_abs(&self) -> f64 {
    self.as_slice().iter().fold(0.0_f64, |m, v| m.max(v.abs()))
  }

  /// Induced 1-norm (maximum absolute column sum).
  pub fn norm1(&self) -> f64 {
    (0..self.cols())
      .map(|j| (0..self.rows()).map(|i| self[(i, j)].abs()).sum::<f64>())
      .fold(0.0, f64::max)
  }

  pub fn trace(&self) -> f64 {
    (0..self.rows().min(self.cols())).map(|i| self[(i, i)]).sum()
  }

  pub fn is_finite(&self) -> bool {
    self.as_slice().iter().all(|v| v.is_finite())
  }

  /// Inverse by Gauss-Jordan elimination with partial pivoting.
  /// Returns `None` for a numerically zero pivot.
  pub fn try_inverse(&self) -> Option<Mat> {
    let n = self.rows();
    assert_eq!(n, self.cols(), "inverse of a non-square matrix");
    let mut a = *self;
    let mut inv = Mat::identity(n);
    let tiny = f64::EPSILON * self.norm1() * n as f64;
    for c in 0..n {
      let p = (c..n)
        .max_by(|&i, &j| a[(i, c)].abs().total_cmp(&a[(j, c)].abs()))
        .unwrap();
      let piv = a[(p, c)];
      if piv.abs() <= tiny || !piv.is_finite() {
        return None;
      }
      if p != c {
        for j in 0..n {
          a.a.swap(p * n + j, c * n + j);
          inv.a.swap(p * n + j, c * n + j);
        }
      }
      let s = 1.0 / a[(c, c)];
      for j in 0..n {
        a[(c, j)] *= s;
        inv[(c, j)] *= s;
      }
      for i in 0..n {
        if i != c {
          let f = a[(i, c)];
          if f != 0.0 {
            for j in 0..n {
              a[(i, j)] -= f * a[(c, j)];
              inv[(i, j)] -= f * inv[(c, j)];
            }
          }
        }
      }
    }
    Some(inv)
  }
}

impl Index<(usize, usize)> for Mat {
  type Output = f64;
  #[inline]
  fn index(&self, (i, j): (usize, usize)) -> &f64 {
    debug_assert!(i < self.rows() && j < self.cols());
    &self.a[i * self.cols() + j]
  }
}

impl IndexMut<(usize, usize)> for Mat {
  #[inline]
  fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
    debug_assert!(i < self.rows() && j < self.cols());
    let c = self.cols();
    &mut self.a[i * c + j]
  }
}

impl Index<usize> for Mat {
  type Output = f64;
  #[inline]
  fn index(&self, k: usize) -> &f64 {
    debug_assert!(k < self.len());
    &self.a[k]
  }
}

impl IndexMut<usize> for Mat {
  #[inline]
  fn index_mut(&mut self, k: usize) -> &mut f64 {
    debug_assert!(k < self.len());
    &mut self.a[k]
  }
}

impl Add for Mat {
  type Output = Mat;
  #[inline]
  fn add(mut self, rhs: Mat) -> Mat {
    self.axpy(1.0, &rhs);
    self
  }
}

impl Sub for Mat {
  type Output = Mat;
  #[inline]
  fn sub(mut self, rhs: Mat) -> Mat {
    self.axpy(-1.0, &rhs);
    self
  }
}

impl AddAssign for Mat {
  #[inline]
  fn add_assign(&mut self, rhs: Mat) {
    self.axpy(1.0, &rhs);
  }
}

impl SubAssign for Mat {
  #[inline]
  fn sub_assign(&mut self, rhs: Mat) {
    self.axpy(-1.0, &rhs);
  }
}

impl Neg for Mat {
  type Output = Mat;
  fn neg(self) -> Mat {
    self.scale(-1.0)
  }
}

impl Mul<f64> for Mat {
  type Output = Mat;
  #[inline]
  fn mul(self, s: f64) -> Mat {
    self.scale(s)
  }
}

impl Mul for Mat {
  type Output = Mat;
  #[inline]
  #[allow(clippy::op_ref)]
  fn mul(self, rhs: Mat) -> Mat {
    &self * &rhs
  }
}

impl Mul<&Mat> for &Mat {
  type Output = Mat;
  #[inline]
  fn mul(self, rhs: &Mat) -> Mat {
    assert_eq!(self.cols(), rhs.rows(), "shape mismatch in product");
    let (n, k, m) = (self.rows(), self.cols(), rhs.cols());
    let mut out = Mat::zeros(n, m);
    for i in 0..n {
      for l in 0..k {
        let x = self.a[i * k + l];
        if x != 0.0 {
          for j in 0..m {
            out.a[i * m + j] += x * rhs.a[l * m + j];
          }
        }
      }
    }
    out
  }
}

impl fmt::Debug for Mat {
  fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    write!(f, "Mat{}x{}[", self.rows, self.cols)?;
    for i in 0..self.rows() {
      if i > 0 {
        write!(f, "; ")?;
      }
      for j in 0..self.cols() {
        if j > 0 {
          write!(f, ", ")?;
        }
        write!(f, "{}", self[(i, j)])?;
      }
    }
    write!(f, "]")
  }
}

/// `σᵀ(σσᵀ)⁻¹` for an `N×d` matrix of full row rank.
pub fn right_pseudo_inverse(sigma: &Mat) -> Option<Mat> {
  let st = sigma.transpose();
  let s = sigma * &st;
  Some(st * s.try_inverse()?)
}

#[cfg(test)]
mod tests {
  use super::*;

  #[test]
  fn product_and_transpose() {
    let a = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let b = Mat::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
    assert_eq!(a * b, Mat::from_rows(&[&[2.0, 1.0], &[4.0, 3.0]]));
    assert_eq!(a.transpose()[(0, 1)], 3.0);
  }

  #[test]
  fn inverse_with_pivoting() {
    let a = Mat::from_rows(&[&[0.0, 1.0, 2.0], &[1.0, 0.0, 3.0], &[4.0, -3.0, 8.0]]);
    let inv = a.try_inverse().unwrap();
    let e = (a * inv - Mat::identity(3)).max_abs();
    assert!(e < 1e-14, "{e}");
  }

  #[test]
  fn singular_has_no_inverse() {
    let a = Mat::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
    assert!(a.try_inverse().is_none());
  }

  #[test]
  fn pseudo_inverse_of_wide_sigma() {
    let s = Mat::from_rows(&[&[1.0, 0.5, 0.0]]);
    let p = right_pseudo_inverse(&s).unwrap();
    assert!(((s * p)[(0, 0)] - 1.0).abs() < 1e-15);
  }
}
