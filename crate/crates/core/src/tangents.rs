//! First-variation, Lions-derivative and Malliavin-derivative processes of the
//! Euler scheme, plus the per-sample [`Carrier`] that bundles everything the
//! integration-by-parts weights consume.
//!
//! All tangents differentiate the discrete Euler map with the measure path held
//! fixed. With `ΔB⁰ = h`, the step matrix is `A_k = I + Σ_i ∂V_i(X_k, μ_k) ΔB_kⁱ`.

use rayon::prelude::*;

use crate::coefficients::{sigma, CoefficientModel, Law};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::simulator::{euler_step, BrownianDriver, ParticleSystemPaths, PathBundle};

/// Condition number above which a Jacobian is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[inline]
fn noise(db: &Mat, h: f64, i: usize) -> f64 {
  if i == 0 {
    h
  } else {
    db[i - 1]
  }
}

/// `A_k` together with the per-field Jacobians it was assembled from.
fn step_matrix(model: &dyn CoefficientModel, x: &Mat, law: &Law, db: &Mat, h: f64, dv: &mut Vec<Mat>) -> Result<Mat> {
  let n = model.dim_state();
  let mut a = Mat::identity(n);
  dv.clear();
  for i in 0..=model.dim_noise() {
    let m = model.field_dx(i, x, law);
    if !m.is_finite() {
      return Err(Error::ModelEvaluation { field: i, x: x.as_slice().to_vec() });
    }
    a.axpy(noise(db, h, i), &m);
    dv.push(m);
  }
  Ok(a)
}

/// `J_0 = I`, `J_{k+1} = A_k J_k` along the bundle's state path.
pub fn propagate_jacobian(model: &dyn CoefficientModel, law: &ParticleSystemPaths, bundle: &mut PathBundle) -> Result<()> {
  let h = law.grid().step();
  let mut dv = Vec::new();
  let mut j = Mat::identity(model.dim_state());
  let mut out = vec![j];
  for (k, db) in bundle.increments.iter().enumerate() {
    let a = step_matrix(model, &bundle.states[k], law.law(bundle.start_step + k), db, h, &mut dv)?;
    j = a * j;
    if !j.is_finite() {
      return Err(Error::BlowUp { step: bundle.start_step + k + 1 });
    }
    out.push(j);
  }
  bundle.jacobians = Some(out);
  Ok(())
}

/// `J⁻¹` and its 1-norm condition number.
pub fn invert_jacobian(j: &Mat) -> Result<(Mat, f64)> {
  let inv = j.try_inverse().ok_or(Error::SingularJacobian { condition: f64::INFINITY })?;
  let cond = j.norm1() * inv.norm1();
  if !(cond <= MAX_CONDITION) {
    return Err(Error::SingularJacobian { condition: cond });
  }
  Ok((inv, cond))
}

/// Discrete Malliavin derivative `D[r][k] = ∂X_k/∂ΔB_r` for `k > r`.
#[derive(Clone, Debug)]
pub struct MalliavinField {
  pub r_nodes: Vec<usize>,
  /// `fields[j][k - r_j - 1] = D[r_j][k]`, an `N×d` matrix.
  pub fields: Vec<Vec<Mat>>,
}

impl MalliavinField {
  /// `D[r_j][k]`, or `None` when `k ≤ r_j`.
  pub fn get(&self, j: usize, k: usize) -> Option<&Mat> {
    let r = self.r_nodes[j];
    if k <= r {
      None
    } else {
      self.fields[j].get(k - r - 1)
    }
  }
}

/// Seeds `D[r][r+1] = σ(X_r, μ_r)` and propagates `D[r][k+1] = A_k D[r][k]`.
pub fn propagate_malliavin_field(
  model: &dyn CoefficientModel,
  law: &ParticleSystemPaths,
  bundle: &PathBundle,
  r_nodes: &[usize],
) -> Result<MalliavinField> {
  let n = bundle.increments.len();
  let h = law.grid().step();
  let mut dv = Vec::new();
  let a: Vec<Mat> = (0..n)
    .map(|k| step_matrix(model, &bundle.states[k], law.law(bundle.start_step + k), &bundle.increments[k], h, &mut dv))
    .collect::<Result<_>>()?;
  let mut fields = Vec::with_capacity(r_nodes.len());
  for &r in r_nodes {
    if r >= n {
      return Err(Error::InvalidArgument(format!("Malliavin node {r} is not before the last step {n}")));
    }
    let mut d = sigma(model, &bundle.states[r], law.law(bundle.start_step + r));
    let mut col = vec![d];
    for ak in &a[r + 1..n] {
      d = ak * &d;
      col.push(d);
    }
    fields.push(col);
  }
  Ok(MalliavinField { r_nodes: r_nodes.to_vec(), fields })
}

/// Residuals of the transfer identity `J_m ≈ D[r][m] σ⁺_r J_r` at step `m`:
/// every `r < m` separately, and the average over `r`.
pub fn transfer_residuals(
  model: &dyn CoefficientModel,
  law: &ParticleSystemPaths,
  bundle: &PathBundle,
  m: usize,
) -> Result<(Vec<Mat>, Mat)> {
  let jac = bundle.jacobians.as_ref().ok_or(Error::InvalidArgument("bundle has no jacobians".into()))?;
  let h = law.grid().step();
  let nn = model.dim_state();
  let mut dv = Vec::new();
  let mut per_node = vec![Mat::zeros(nn, nn); m];
  let mut sum = Mat::zeros(nn, nn);
  // Backward product B = A_{m-1}···A_{r+1}, so that D[r][m] = B σ_r.
  let mut b = Mat::identity(nn);
  for r in (0..m).rev() {
    let law_r = law.law(bundle.start_step + r);
    let s = sigma(model, &bundle.states[r], law_r);
    let p = crate::linalg::right_pseudo_inverse(&s).ok_or(Error::SingularJacobian { condition: f64::INFINITY })?;
    let term = ((b * s) * p) * jac[r];
    sum += term;
    per_node[r] = jac[m] - term;
    let a = step_matrix(model, &bundle.states[r], law_r, &bundle.increments[r], h, &mut dv)?;
    b = b * a;
  }
  Ok((per_node, jac[m] - sum.scale(1.0 / m as f64)))
}

// ---------------------------------------------------------------------------
// Lions tangents of the particle system
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LionsMode {
  /// Factorized `O(M)` averages when the model is separable, otherwise generic.
  Auto,
  /// Direct `O(M²)` averages.
  Generic,
}

/// Per-particle Lions tangents `L^m_k(v)`, with particle `m` coupled to its own
/// auxiliary copy started at `v`.
#[derive(Clone, Debug)]
pub struct LionsTangentSystem {
  v: Mat,
  /// `[k][m]`.
  tangents: Vec<Vec<Mat>>,
  /// Separable averages `(1/M) Σ_m ∇φ_i(X^m_k)ᵀ L^m_k`, `[k][i]`.
  averages: Option<Vec<Vec<Mat>>>,
}

impl LionsTangentSystem {
  pub fn v(&self) -> &Mat {
    &self.v
  }

  pub fn n_steps(&self) -> usize {
    self.tangents.len() - 1
  }

  pub fn particle(&self, k: usize, m: usize) -> &Mat {
    &self.tangents[k][m]
  }

  pub fn particles(&self, k: usize) -> &[Mat] {
    &self.tangents[k]
  }

  pub fn is_factorized(&self) -> bool {
    self.averages.is_some()
  }

  /// `(1/M) Σ_m ∂_μV_i(x, μ_k, X^m_k) L^m_k`.
  pub fn coupling(&self, model: &dyn CoefficientModel, law: &Law, k: usize, i: usize, x: &Mat) -> Mat {
    if let (Some(avg), Some(f)) = (&self.averages, model.lions_factors()) {
      return f.left(i, x, law) * avg[k][i];
    }
    let pts = law.cloud();
    let nn = model.dim_state();
    let mut s = Mat::zeros(nn, nn);
    for (m, l) in self.tangents[k].iter().enumerate() {
      s += &model.field_dmu(i, x, law, &pts.point(m)) * l;
    }
    s.scale(1.0 / pts.len() as f64)
  }

  /// Directional derivative of [`Self::coupling`] in `x` along `w`.
  pub fn coupling_dx_dir(&self, model: &dyn CoefficientModel, law: &Law, k: usize, i: usize, x: &Mat, w: &Mat) -> Mat {
    if let (Some(avg), Some(f)) = (&self.averages, model.lions_factors()) {
      return f.left_dx_dir(i, x, law, w) * avg[k][i];
    }
    let pts = law.cloud();
    let nn = model.dim_state();
    let mut s = Mat::zeros(nn, nn);
    for (m, l) in self.tangents[k].iter().enumerate() {
      s += &model.field_dmu_dx_dir(i, x, law, &pts.point(m), w) * l;
    }
    s.scale(1.0 / pts.len() as f64)
  }
}

fn averages_at(model: &dyn CoefficientModel, law: &Law, tangents: &[Mat]) -> Vec<Mat> {
  let f = model.lions_factors().expect("separable model");
  let nn = model.dim_state();
  let inv_m = 1.0 / tangents.len() as f64;
  (0..=model.dim_noise())
    .map(|i| {
      let mut s = Mat::zeros(1, nn);
      for (m, l) in tangents.iter().enumerate() {
        s += &f.right(i, &law.cloud().point(m)).transpose() * l;
      }
      s.scale(inv_m)
    })
    .collect()
}

/// Propagates `L^m(v)` for every particle over the first `n_steps` steps.
///
/// `aux` drives the copies started at `v`: particle `m` uses path `m`.
pub fn propagate_lions(
  model: &dyn CoefficientModel,
  law: &ParticleSystemPaths,
  v: &Mat,
  n_steps: usize,
  aux: &BrownianDriver,
  mode: LionsMode,
) -> Result<LionsTangentSystem> {
  let nn = model.dim_state();
  let d = model.dim_noise();
  let mm = law.n_particles();
  let h = law.grid().step();
  if v.len() != nn {
    return Err(Error::Dimension(format!("v has {} coordinates, model has N={nn}", v.len())));
  }
  if n_steps > law.grid().n_steps() {
    return Err(Error::InvalidArgument("Lions system runs past the law grid".into()));
  }
  let factorized = mode == LionsMode::Auto && model.lions_factors().is_some();
  let mut tangents = vec![vec![Mat::zeros(nn, nn); mm]];
  let mut averages = factorized.then(Vec::new);
  // Auxiliary copies and their Jacobians.
  let mut ys = vec![(*v, Mat::identity(nn)); mm];
  let aux_inc: Vec<Vec<Mat>> = (0..mm).into_par_iter().map(|m| aux.increments(m as u64, n_steps, h)).collect();
  for k in 0..n_steps {
    let lk = law.law(k);
    let mut sys = LionsTangentSystem { v: *v, tangents: Vec::new(), averages: None };
    if let Some(avg) = averages.as_mut() {
      avg.push(averages_at(model, lk, &tangents[k]));
      sys.averages = Some(vec![avg[k].clone()]);
    }
    sys.tangents = vec![tangents[k].clone()];
    let step: Result<Vec<(Mat, (Mat, Mat))>> = (0..mm)
      .into_par_iter()
      .with_min_len(32)
      .map(|m| {
        let mut dv = Vec::with_capacity(d + 1);
        let x = lk.cloud().point(m);
        let db = law.increment(m, k);
        let a = step_matrix(model, &x, lk, &db, h, &mut dv)?;
        let (y, jy) = ys[m];
        let mut l = a * tangents[k][m];
        for i in 0..=d {
          let c = model.field_dmu(i, &x, lk, &y) * jy + sys.coupling(model, lk, 0, i, &x);
          l.axpy(noise(&db, h, i), &c);
        }
        if !l.is_finite() {
          return Err(Error::BlowUp { step: k + 1 });
        }
        let dby = aux_inc[m][k];
        let ay = step_matrix(model, &y, lk, &dby, h, &mut dv)?;
        let y1 = euler_step(model, &y, lk, &dby, h)?;
        Ok((l, (y1, ay * jy)))
      })
      .collect();
    let step = step?;
    let (next, aux_next): (Vec<Mat>, Vec<(Mat, Mat)>) = step.into_iter().unzip();
    tangents.push(next);
    ys = aux_next;
  }
  if let Some(avg) = averages.as_mut() {
    avg.push(averages_at(model, law.law(n_steps), &tangents[n_steps]));
  }
  Ok(LionsTangentSystem { v: *v, tangents, averages })
}

// ---------------------------------------------------------------------------
// Per-sample carrier
// ---------------------------------------------------------------------------

/// Shared inputs for building per-sample carriers up to step `n`.
#[derive(Clone, Copy)]
pub struct CarrierSetup<'a> {
  pub model: &'a dyn CoefficientModel,
  pub law: &'a ParticleSystemPaths,
  /// One Lions system per requested `v`.
  pub lions: &'a [LionsTangentSystem],
  pub n: usize,
}

/// Auxiliary copy started at `v` with its Jacobian.
#[derive(Clone, Debug)]
pub struct AuxPath {
  pub states: Vec<Mat>,
  pub jacobians: Vec<Mat>,
  pub increments: Vec<Mat>,
}

/// One decoupled path with its Jacobian, `σ⁺ = σᵀ(σσᵀ)⁻¹`, weight integrand
/// `U_k = σ⁺_k J_k` (`d×N`, column `j` is `u^j`), inverse Jacobian at `t_n`,
/// and the Lions tangents `L(v)` for every `v` of the setup.
#[derive(Clone, Debug)]
pub struct Carrier {
  pub states: Vec<Mat>,
  pub increments: Vec<Mat>,
  pub jacobians: Vec<Mat>,
  pub sigmas: Vec<Mat>,
  /// `(σσᵀ)⁻¹` per step.
  pub sinv: Vec<Mat>,
  pub pinv: Vec<Mat>,
  pub u: Vec<Mat>,
  /// `Σ_k U_kᵀ ΔB_k`, `N×1`.
  pub s: Mat,
  pub jinv: Mat,
  pub condition: f64,
  /// `[v][k]`.
  pub lions: Vec<Vec<Mat>>,
  /// Lions forcing `c_i` per `[v][k][i]`.
  couplings: Vec<Vec<Vec<Mat>>>,
  /// `∂V_i(X_k)`, `[k][i]`.
  dv: Vec<Vec<Mat>>,
  a: Vec<Mat>,
  pub aux: Vec<AuxPath>,
  pub h: f64,
}

impl Carrier {
  pub fn terminal(&self) -> &Mat {
    self.states.last().unwrap()
  }

  pub fn t(&self) -> f64 {
    self.h * self.increments.len() as f64
  }

  pub fn n_steps(&self) -> usize {
    self.increments.len()
  }
}

/// Direction of a forward-mode derivative: initial point `ξ` and/or increments `η`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Direction<'b> {
  pub xi: Option<&'b Mat>,
  pub eta: Option<&'b [Mat]>,
}

/// First-order forward-mode derivative of a carrier along a [`Direction`].
#[derive(Clone, Debug)]
pub struct CarrierTangent {
  pub d_terminal: Mat,
  /// `δU_k`.
  pub du: Vec<Mat>,
  /// `δ(Σ_k U_kᵀ ΔB_k)`.
  pub ds: Mat,
  pub djac: Mat,
  pub djinv: Mat,
  /// `δL_n(v)` per `v`.
  pub dlions: Vec<Mat>,
}

impl<'a> CarrierSetup<'a> {
  pub fn new(model: &'a dyn CoefficientModel, law: &'a ParticleSystemPaths, lions: &'a [LionsTangentSystem], n: usize) -> Result<Self> {
    if n == 0 || n > law.grid().n_steps() {
      return Err(Error::InvalidArgument(format!("carrier horizon {n} outside the law grid")));
    }
    if lions.iter().any(|l| l.n_steps() < n) {
      return Err(Error::InvalidArgument("Lions system shorter than the carrier horizon".into()));
    }
    Ok(CarrierSetup { model, law, lions, n })
  }

  pub fn h(&self) -> f64 {
    self.law.grid().step()
  }

  pub fn t(&self) -> f64 {
    self.h() * self.n as f64
  }

  /// Index of the Lions system for `v`, if one was propagated.
  pub fn lions_index(&self, v: &Mat) -> Result<usize> {
    self
      .lions
      .iter()
      .position(|l| l.v() == v)
      .ok_or_else(|| Error::MissingAuxiliaryPath { v: v.as_slice().to_vec() })
  }

  /// Auxiliary path from `v` with explicit increments, plus its Jacobian.
  pub fn aux_path(&self, v: &Mat, increments: &[Mat]) -> Result<AuxPath> {
    let h = self.h();
    let mut dv = Vec::new();
    let mut states = vec![*v];
    let mut jacobians = vec![Mat::identity(v.len())];
    for k in 0..self.n {
      let lk = self.law.law(k);
      let a = step_matrix(self.model, &states[k], lk, &increments[k], h, &mut dv)?;
      let y = euler_step(self.model, &states[k], lk, &increments[k], h)?;
      if !y.is_finite() {
        return Err(Error::BlowUp { step: k + 1 });
      }
      states.push(y);
      jacobians.push(a * jacobians[k]);
    }
    Ok(AuxPath { states, jacobians, increments: increments[..self.n].to_vec() })
  }

  /// Builds the carrier from `x0` with main increments and one auxiliary
  /// increment path per Lions system.
  pub fn build(&self, x0: &Mat, increments: &[Mat], aux_increments: &[Vec<Mat>]) -> Result<Carrier> {
    let aux = self
      .lions
      .iter()
      .enumerate()
      .map(|(vi, l)| {
        let inc = aux_increments.get(vi).ok_or_else(|| Error::MissingAuxiliaryPath { v: l.v().as_slice().to_vec() })?;
        self.aux_path(l.v(), inc)
      })
      .collect::<Result<Vec<_>>>()?;
    self.build_with_aux(x0, increments, aux)
  }

  /// As [`Self::build`] with precomputed auxiliary paths.
  pub fn build_with_aux(&self, x0: &Mat, increments: &[Mat], aux: Vec<AuxPath>) -> Result<Carrier> {
    let model = self.model;
    let (nn, d, n, h) = (model.dim_state(), model.dim_noise(), self.n, self.h());
    if increments.len() < n {
      return Err(Error::InvalidArgument("too few increments for the carrier horizon".into()));
    }
    let singular = || Error::SingularJacobian { condition: f64::INFINITY };
    let mut states = Vec::with_capacity(n + 1);
    let mut jacobians = Vec::with_capacity(n + 1);
    let mut sigmas = Vec::with_capacity(n);
    let mut sinv = Vec::with_capacity(n);
    let mut pinv = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    let mut dvs = Vec::with_capacity(n);
    let mut a_all = Vec::with_capacity(n);
    let nv = self.lions.len();
    let mut lions = vec![vec![Mat::zeros(nn, nn)]; nv];
    let mut couplings = vec![Vec::with_capacity(n); nv];
    let mut s = Mat::zeros(nn, 1);
    states.push(*x0);
    jacobians.push(Mat::identity(nn));
    let mut dv = Vec::with_capacity(d + 1);
    for k in 0..n {
      let lk = self.law.law(k);
      let x = states[k];
      let db = &increments[k];
      let sg = sigma(model, &x, lk);
      let si = (sg * sg.transpose()).try_inverse().ok_or_else(singular)?;
      let p = sg.transpose() * si;
      let a = step_matrix(model, &x, lk, db, h, &mut dv)?;
      let uk = p * jacobians[k];
      s += &uk.transpose() * db;
      for vi in 0..nv {
        let (y, jy) = (&aux[vi].states[k], &aux[vi].jacobians[k]);
        let mut l = a * lions[vi][k];
        let mut cs = Vec::with_capacity(d + 1);
        for i in 0..=d {
          let c = &model.field_dmu(i, &x, lk, y) * jy + self.lions[vi].coupling(model, lk, k, i, &x);
          l.axpy(noise(db, h, i), &c);
          cs.push(c);
        }
        lions[vi].push(l);
        couplings[vi].push(cs);
      }
      let y = euler_step(model, &x, lk, db, h)?;
      let j = a * jacobians[k];
      if !y.is_finite() || !j.is_finite() {
        return Err(Error::BlowUp { step: k + 1 });
      }
      states.push(y);
      jacobians.push(j);
      sigmas.push(sg);
      sinv.push(si);
      pinv.push(p);
      u.push(uk);
      dvs.push(dv.clone());
      a_all.push(a);
    }
    let (jinv, condition) = invert_jacobian(&jacobians[n])?;
    Ok(Carrier {
      states,
      increments: increments[..n].to_vec(),
      jacobians,
      sigmas,
      sinv,
      pinv,
      u,
      s,
      jinv,
      condition,
      lions,
      couplings,
      dv: dvs,
      a: a_all,
      aux,
      h,
    })
  }

  /// Forward-mode derivative of the carrier along `dir`.
  pub fn tangent(&self, c: &Carrier, dir: Direction<'_>) -> CarrierTangent {
    let model = self.model;
    let (nn, d, n, h) = (model.dim_state(), model.dim_noise(), self.n, c.h);
    let nv = self.lions.len();
    let mut dx = dir.xi.copied().unwrap_or_else(|| Mat::zeros(nn, 1));
    let mut dj = Mat::zeros(nn, nn);
    let mut dl = vec![Mat::zeros(nn, nn); nv];
    let mut du = Vec::with_capacity(n);
    let mut ds = Mat::zeros(nn, 1);
    let zero_eta = Mat::zeros(d, 1);
    for k in 0..n {
      let lk = self.law.law(k);
      let x = &c.states[k];
      let db = &c.increments[k];
      let eta = dir.eta.map_or(&zero_eta, |e| &e[k]);
      let a = &c.a[k];
      let mut hg = Mat::zeros(nn, nn);
      let mut dsig = Mat::zeros(nn, d);
      for i in 0..=d {
        hg.axpy(noise(db, h, i), &model.field_dx_dir(i, x, lk, &dx));
        if i >= 1 {
          hg.axpy(eta[i - 1], &c.dv[k][i]);
          dsig.set_column(i - 1, &(c.dv[k][i] * dx));
        }
      }
      let sg = &c.sigmas[k];
      let ds_mat = dsig * sg.transpose() + sg * &dsig.transpose();
      let dp = dsig.transpose() * c.sinv[k] - (c.pinv[k] * ds_mat) * c.sinv[k];
      let duk = dp * c.jacobians[k] + c.pinv[k] * dj;
      ds += &duk.transpose() * db + &c.u[k].transpose() * eta;
      du.push(duk);
      for vi in 0..nv {
        let aux = &c.aux[vi];
        let (y, jy) = (&aux.states[k], &aux.jacobians[k]);
        let mut next = a * &dl[vi] + hg * c.lions[vi][k];
        for i in 0..=d {
          let dc = &model.field_dmu_dx_dir(i, x, lk, y, &dx) * jy + self.lions[vi].coupling_dx_dir(model, lk, k, i, x, &dx);
          next.axpy(noise(db, h, i), &dc);
          if i >= 1 {
            next.axpy(eta[i - 1], &c.couplings[vi][k][i]);
          }
        }
        dl[vi] = next;
      }
      dj = a * &dj + hg * c.jacobians[k];
      dx = a * &dx + sg * eta;
    }
    let djinv = -((c.jinv * dj) * c.jinv);
    CarrierTangent { d_terminal: dx, du, ds, djac: dj, djinv, dlions: dl }
  }
}
