//! Euler-Maruyama simulation of the interacting particle system and of the
//! decoupled flow driven by an already simulated measure path.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::coefficients::{check_ellipticity, CoefficientModel, Law};
use crate::error::{Error, Result};
use crate::linalg::{Mat, MAX_DIM};
use crate::measures::EmpiricalMeasure;

/// Uniform grid `t_k = k·T/n` on `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
  horizon: f64,
  n_steps: usize,
}

impl TimeGrid {
  pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
    if !(horizon > 0.0 && horizon.is_finite()) {
      return Err(Error::InvalidArgument(format!("horizon must be positive and finite, got {horizon}")));
    }
    if n_steps == 0 {
      return Err(Error::InvalidArgument("grid needs at least one step".into()));
    }
    Ok(TimeGrid { horizon, n_steps })
  }

  #[inline]
  pub fn horizon(&self) -> f64 {
    self.horizon
  }

  #[inline]
  pub fn n_steps(&self) -> usize {
    self.n_steps
  }

  #[inline]
  pub fn step(&self) -> f64 {
    self.horizon / self.n_steps as f64
  }

  pub fn node(&self, k: usize) -> f64 {
    if k == self.n_steps {
      self.horizon
    } else {
      k as f64 * self.step()
    }
  }

  /// Index of the node equal to `t` (within a relative `1e-9` of a step).
  pub fn index_of(&self, t: f64) -> Result<usize> {
    let r = t / self.step();
    let k = r.round();
    if !(t > 0.0) || (r - k).abs() > 1e-9 * r.max(1.0) || k as usize > self.n_steps {
      return Err(Error::InvalidArgument(format!(
        "t={t} is not a positive node of the grid (T={}, n={})",
        self.horizon, self.n_steps
      )));
    }
    Ok(k as usize)
  }
}

/// Stream identifiers separating the independent noise sources of a run.
pub mod streams {
  /// Particle-system Brownian motions, one path per particle.
  pub const LAW: u64 = 1;
  /// Draws of the initial particle positions.
  pub const INIT: u64 = 2;
  /// Monte-Carlo samples of the decoupled flow.
  pub const SAMPLE: u64 = 3;
  /// Auxiliary copies started at `v` for sample carriers; add the `v` index.
  pub const AUX: u64 = 1 << 8;
  /// Auxiliary copies started at `v` for particle carriers; add the `v` index.
  pub const AUX_LAW: u64 = 2 << 8;
  /// Independent copies started from a draw of the initial law.
  pub const TILDE: u64 = 3 << 8;
  /// Auxiliary copies at `v` attached to [`TILDE`] paths; add the `v` index.
  pub const TILDE_AUX: u64 = 4 << 8;
}

/// Counter-based Gaussian increments: the draw for `(seed, stream, path, step)`
/// does not depend on the order or number of other draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BrownianDriver {
  seed: u64,
  stream: u64,
  dim: usize,
}

const WORDS_PER_STEP: u128 = 1 << 12;

impl BrownianDriver {
  pub fn new(seed: u64, stream: u64, dim: usize) -> Self {
    assert!((1..=MAX_DIM).contains(&dim), "noise dimension {dim} out of range");
    BrownianDriver { seed, stream, dim }
  }

  pub fn seed(&self) -> u64 {
    self.seed
  }

  pub fn stream(&self) -> u64 {
    self.stream
  }

  pub fn dim(&self) -> usize {
    self.dim
  }

  pub fn with_stream(&self, stream: u64) -> Self {
    BrownianDriver { stream, ..*self }
  }

  fn rng(&self, path: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&self.seed.to_le_bytes());
    key[8..16].copy_from_slice(&self.stream.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(path);
    rng
  }

  /// `d` independent standard normals for `(path, slot)`.
  pub fn standard_normals(&self, path: u64, slot: usize) -> Mat {
    let mut rng = self.rng(path);
    rng.set_word_pos(slot as u128 * WORDS_PER_STEP);
    let mut out = Mat::zeros(self.dim, 1);
    for k in 0..self.dim {
      out[k] = rng.sample(StandardNormal);
    }
    out
  }

  /// `ΔB_k` for path `path`, variance `h` per coordinate.
  pub fn increment(&self, path: u64, step: usize, h: f64) -> Mat {
    self.standard_normals(path, step).scale(h.sqrt())
  }

  /// `ΔB_0..ΔB_{n-1}` of one path.
  pub fn increments(&self, path: u64, n: usize, h: f64) -> Vec<Mat> {
    let mut rng = self.rng(path);
    let sh = h.sqrt();
    (0..n)
      .map(|k| {
        rng.set_word_pos(k as u128 * WORDS_PER_STEP);
        let mut out = Mat::zeros(self.dim, 1);
        for c in 0..self.dim {
          let z: f64 = rng.sample(StandardNormal);
          out[c] = z * sh;
        }
        out
      })
      .collect()
  }
}

/// Initial law `[θ]` of the particle system.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialLaw {
  Dirac(Mat),
  /// Independent coordinates `mean + std·Z`.
  Gaussian { mean: Mat, std: f64 },
  /// Deterministic cloud; particle `j` starts at point `j mod len`.
  Cloud(EmpiricalMeasure),
}

impl InitialLaw {
  pub fn dim(&self) -> usize {
    match self {
      InitialLaw::Dirac(x) => x.len(),
      InitialLaw::Gaussian { mean, .. } => mean.len(),
      InitialLaw::Cloud(c) => c.dim(),
    }
  }

  /// The `M` starting points; Gaussian draws use stream `INIT` of the driver seed.
  pub fn sample(&self, m: usize, seed: u64) -> EmpiricalMeasure {
    let n = self.dim();
    let mut pts = Vec::with_capacity(m * n);
    match self {
      InitialLaw::Dirac(x) => {
        for _ in 0..m {
          pts.extend_from_slice(x.as_slice());
        }
      }
      InitialLaw::Gaussian { mean, std } => {
        let drv = BrownianDriver::new(seed, streams::INIT, n);
        for j in 0..m {
          let z = drv.standard_normals(j as u64, 0);
          for c in 0..n {
            pts.push(mean[c] + std * z[c]);
          }
        }
      }
      InitialLaw::Cloud(c) => {
        for j in 0..m {
          pts.extend_from_slice(c.coords(j % c.len()));
        }
      }
    }
    EmpiricalMeasure::new(n, pts).expect("initial law produced an invalid cloud")
  }
}

/// One Euler step `x + V₀h + Σ V_i ΔB^i` against the frozen law.
#[inline]
pub fn euler_step(model: &dyn CoefficientModel, x: &Mat, law: &Law, db: &Mat, h: f64) -> Result<Mat> {
  let mut out = *x;
  let v0 = model.field(0, x, law);
  if !v0.is_finite() {
    return Err(Error::ModelEvaluation { field: 0, x: x.as_slice().to_vec() });
  }
  out.axpy(h, &v0);
  for i in 1..=model.dim_noise() {
    let vi = model.field(i, x, law);
    if !vi.is_finite() {
      return Err(Error::ModelEvaluation { field: i, x: x.as_slice().to_vec() });
    }
    out.axpy(db[i - 1], &vi);
  }
  Ok(out)
}

/// Simulated measure path `μ_0..μ_n` of the particle system.
#[derive(Clone, Debug)]
pub struct ParticleSystemPaths {
  grid: TimeGrid,
  laws: Vec<Law>,
  driver: BrownianDriver,
  /// `ΔB` of particle `j` at step `k`, at `k·M + j`.
  increments: Vec<Mat>,
  /// Ellipticity spot-check messages; empty when nothing was flagged.
  pub warnings: Vec<String>,
}

impl ParticleSystemPaths {
  pub fn grid(&self) -> &TimeGrid {
    &self.grid
  }

  pub fn n_particles(&self) -> usize {
    self.laws[0].cloud().len()
  }

  pub fn dim(&self) -> usize {
    self.laws[0].cloud().dim()
  }

  pub fn law(&self, k: usize) -> &Law {
    &self.laws[k]
  }

  pub fn cloud(&self, k: usize) -> &EmpiricalMeasure {
    self.laws[k].cloud()
  }

  pub fn state(&self, k: usize, j: usize) -> Mat {
    self.laws[k].cloud().point(j)
  }

  /// The driver whose path `j` moved particle `j`.
  pub fn driver(&self) -> &BrownianDriver {
    &self.driver
  }

  /// `ΔB_k` of particle `j`.
  pub fn increment(&self, j: usize, k: usize) -> Mat {
    self.increments[k * self.n_particles() + j]
  }

  /// Writes `step,particle,coord,value` rows.
  pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
    writeln!(w, "step,particle,coord,value")?;
    for (k, law) in self.laws.iter().enumerate() {
      for (j, p) in law.cloud().iter().enumerate() {
        for c in 0..p.len() {
          writeln!(w, "{k},{j},{c},{:e}", p[c])?;
        }
      }
    }
    Ok(())
  }
}

/// Particle system from an explicit initial cloud (one particle per point).
pub fn simulate_particles_from(
  model: &dyn CoefficientModel,
  start: EmpiricalMeasure,
  grid: &TimeGrid,
  driver: &BrownianDriver,
) -> Result<ParticleSystemPaths> {
  let m = start.len();
  if m < 2 {
    return Err(Error::InvalidArgument(format!("particle system needs M ≥ 2, got {m}")));
  }
  if start.dim() != model.dim_state() || driver.dim() != model.dim_noise() {
    return Err(Error::Dimension("initial cloud or driver does not match the model".into()));
  }
  let n = model.dim_state();
  let h = grid.step();
  let mut laws = Vec::with_capacity(grid.n_steps() + 1);
  laws.push(Law::new(model, start));
  let by_particle: Vec<Vec<Mat>> = (0..m).into_par_iter().map(|j| driver.increments(j as u64, grid.n_steps(), h)).collect();
  let mut increments = Vec::with_capacity(m * grid.n_steps());
  for k in 0..grid.n_steps() {
    increments.extend(by_particle.iter().map(|p| p[k]));
  }
  for k in 0..grid.n_steps() {
    let law = &laws[k];
    let next: Result<Vec<Mat>> = (0..m)
      .into_par_iter()
      .with_min_len(64)
      .map(|j| {
        let db = increments[k * m + j];
        let y = euler_step(model, &law.cloud().point(j), law, &db, h)?;
        if !y.is_finite() {
          return Err(Error::BlowUp { step: k + 1 });
        }
        Ok(y)
      })
      .collect();
    let mut flat = Vec::with_capacity(m * n);
    for p in next? {
      flat.extend_from_slice(p.as_slice());
    }
    let cloud = EmpiricalMeasure::new(n, flat).map_err(|_| Error::BlowUp { step: k + 1 })?;
    laws.push(Law::new(model, cloud));
  }
  let mut warnings = Vec::new();
  if model.flags().declared_uniformly_elliptic {
    for k in [0, grid.n_steps()] {
      let law = &laws[k];
      let probes: Vec<(Mat, &Law)> = (0..m.min(16)).map(|j| (law.cloud().point(j), law)).collect();
      let r = check_ellipticity(model, &probes);
      if r.violated {
        warnings.push(format!(
          "ellipticity floor {} violated at step {k}: min eigenvalue {}",
          r.floor, r.min_eigenvalue
        ));
      }
    }
  }
  Ok(ParticleSystemPaths { grid: *grid, laws, driver: *driver, increments, warnings })
}

/// Particle system with `M` i.i.d. starting points drawn from `initial`.
pub fn simulate_particles(
  model: &dyn CoefficientModel,
  initial: &InitialLaw,
  m: usize,
  grid: &TimeGrid,
  driver: &BrownianDriver,
) -> Result<ParticleSystemPaths> {
  if m < 2 {
    return Err(Error::InvalidArgument(format!("particle system needs M ≥ 2, got {m}")));
  }
  simulate_particles_from(model, initial.sample(m, driver.seed()), grid, driver)
}

/// Discretized trajectory of one decoupled path with its optional tangents.
#[derive(Clone, Debug, Default)]
pub struct PathBundle {
  /// `X_0..X_n`.
  pub states: Vec<Mat>,
  /// `ΔB_0..ΔB_{n-1}`.
  pub increments: Vec<Mat>,
  /// `J_0..J_n`, when propagated.
  pub jacobians: Option<Vec<Mat>>,
  /// `(v, L_0(v)..L_n(v))` for each requested `v`.
  pub lions: Vec<(Mat, Vec<Mat>)>,
  /// Step at which the path started on the law grid.
  pub start_step: usize,
}

impl PathBundle {
  pub fn terminal(&self) -> &Mat {
    self.states.last().expect("empty bundle")
  }
}

/// Decoupled flow from step `start` with explicit increments against the
/// frozen measures of `law`. Stops after `increments.len()` steps.
pub fn simulate_decoupled_from(
  model: &dyn CoefficientModel,
  x: &Mat,
  law: &ParticleSystemPaths,
  start: usize,
  increments: &[Mat],
) -> Result<PathBundle> {
  if start + increments.len() > law.grid().n_steps() {
    return Err(Error::InvalidArgument("decoupled path runs past the law grid".into()));
  }
  if x.len() != model.dim_state() {
    return Err(Error::Dimension(format!("x has {} coordinates, model has N={}", x.len(), model.dim_state())));
  }
  let h = law.grid().step();
  let mut states = Vec::with_capacity(increments.len() + 1);
  states.push(*x);
  for (k, db) in increments.iter().enumerate() {
    let y = euler_step(model, &states[k], law.law(start + k), db, h)?;
    if !y.is_finite() {
      return Err(Error::BlowUp { step: start + k + 1 });
    }
    states.push(y);
  }
  Ok(PathBundle { states, increments: increments.to_vec(), start_step: start, ..Default::default() })
}

/// Decoupled flow `X^{x,[θ]}` over the whole law grid using path `path` of `driver`.
pub fn simulate_decoupled(
  model: &dyn CoefficientModel,
  x: &Mat,
  law: &ParticleSystemPaths,
  driver: &BrownianDriver,
  path: u64,
) -> Result<PathBundle> {
  let inc = driver.increments(path, law.grid().n_steps(), law.grid().step());
  simulate_decoupled_from(model, x, law, 0, &inc)
}

/// Particle system started at `δ_x` together with one decoupled path from `x`
/// driven by the `SAMPLE` stream, realizing `X^{x,δ_x}`.
pub fn simulate_fixed_point(
  model: &dyn CoefficientModel,
  x: &Mat,
  m: usize,
  grid: &TimeGrid,
  seed: u64,
) -> Result<(ParticleSystemPaths, PathBundle)> {
  if m < 2 {
    return Err(Error::InvalidArgument(format!("fixed-point law needs M ≥ 2, got {m}")));
  }
  let d = model.dim_noise();
  let law = simulate_particles(model, &InitialLaw::Dirac(*x), m, grid, &BrownianDriver::new(seed, streams::LAW, d))?;
  let path = simulate_decoupled(model, x, &law, &BrownianDriver::new(seed, streams::SAMPLE, d), 0)?;
  Ok((law, path))
}

#[cfg(test)]
mod tests {
  use super::*;
  use crate::coefficients::{Constant, MeanFieldOu};

  #[test]
  fn grid_nodes() {
    let g = TimeGrid::new(1.0, 10).unwrap();
    assert_eq!(g.node(10), 1.0);
    assert_eq!(g.index_of(0.3).unwrap(), 3);
    assert!(g.index_of(0.35).is_err());
    assert!(g.index_of(0.0).is_err());
    assert!(TimeGrid::new(-1.0, 4).is_err());
  }

  #[test]
  fn driver_is_counter_based() {
    let d = BrownianDriver::new(7, 3, 2);
    let all = d.increments(11, 6, 0.25);
    for k in [5, 0, 3] {
      assert_eq!(d.increment(11, k, 0.25), all[k]);
    }
    assert_ne!(d.increment(12, 0, 0.25), all[0]);
    assert_ne!(d.with_stream(4).increment(11, 0, 0.25), all[0]);
  }

  #[test]
  fn zero_dynamics_keep_particles_fixed() {
    let m = Constant::scalar(0.0, 0.0);
    let g = TimeGrid::new(1.0, 5).unwrap();
    let init = InitialLaw::Gaussian { mean: Mat::scalar(0.0), std: 1.0 };
    let p = simulate_particles(&m, &init, 8, &g, &BrownianDriver::new(1, streams::LAW, 1)).unwrap();
    for k in 0..=5 {
      assert_eq!(p.cloud(k), p.cloud(0));
    }
  }

  #[test]
  fn deterministic_drift() {
    let m = Constant::scalar(1.0, 0.0);
    let g = TimeGrid::new(1.0, 10).unwrap();
    let init = InitialLaw::Cloud(EmpiricalMeasure::from_scalars(&[0.0, 2.5]).unwrap());
    let p = simulate_particles(&m, &init, 2, &g, &BrownianDriver::new(1, streams::LAW, 1)).unwrap();
    assert!((p.state(10, 0)[0] - 1.0).abs() < 1e-14);
    assert!((p.state(10, 1)[0] - 3.5).abs() < 1e-14);
  }

  #[test]
  fn brownian_decoupled_path_is_cumulative_sum() {
    let m = Constant::scalar(0.0, 1.0);
    let g = TimeGrid::new(1.0, 8).unwrap();
    let law = simulate_particles(&m, &InitialLaw::Dirac(Mat::scalar(0.0)), 2, &g, &BrownianDriver::new(3, streams::LAW, 1)).unwrap();
    let drv = BrownianDriver::new(3, streams::SAMPLE, 1);
    let b = simulate_decoupled(&m, &Mat::scalar(0.0), &law, &drv, 4).unwrap();
    let mut s = 0.0;
    for k in 0..8 {
      s += b.increments[k][0];
      assert_eq!(b.states[k + 1][0], s);
    }
  }

  #[test]
  fn flow_property_is_bit_exact() {
    let m = MeanFieldOu::new(1.3, 0.7).unwrap();
    let g = TimeGrid::new(1.0, 40).unwrap();
    let init = InitialLaw::Gaussian { mean: Mat::scalar(0.2), std: 1.0 };
    let law = simulate_particles(&m, &init, 50, &g, &BrownianDriver::new(9, streams::LAW, 1)).unwrap();
    let full = simulate_decoupled(&m, &Mat::scalar(0.4), &law, &BrownianDriver::new(9, streams::SAMPLE, 1), 2).unwrap();
    let k = 17;
    let tail = simulate_decoupled_from(&m, &full.states[k], &law, k, &full.increments[k..]).unwrap();
    assert_eq!(tail.terminal(), full.terminal());
  }

  #[test]
  fn fixed_point_rejects_single_particle() {
    let m = Constant::scalar(0.0, 1.0);
    let g = TimeGrid::new(1.0, 4).unwrap();
    assert!(simulate_fixed_point(&m, &Mat::scalar(0.0), 1, &g, 1).is_err());
    let (law, path) = simulate_fixed_point(&m, &Mat::scalar(0.5), 3, &g, 1).unwrap();
    assert_eq!(law.cloud(0).as_slice(), &[0.5, 0.5, 0.5]);
    assert_eq!(path.states[0][0], 0.5);
  }

  #[test]
  fn csv_dump_layout() {
    let m = Constant::scalar(0.0, 1.0);
    let g = TimeGrid::new(1.0, 1).unwrap();
    let law = simulate_particles(&m, &InitialLaw::Dirac(Mat::scalar(0.0)), 2, &g, &BrownianDriver::new(1, 1, 1)).unwrap();
    let mut buf = Vec::new();
    law.write_csv(&mut buf).unwrap();
    let s = String::from_utf8(buf).unwrap();
    let lines: Vec<_> = s.lines().collect();
    assert_eq!(lines[0], "step,particle,coord,value");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0,0,0,"));
  }
}
