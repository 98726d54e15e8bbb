//! Monte-Carlo estimators built on simulation, tangents and weights.
//!
//! Samples are split into fixed-size batches that run in parallel; each batch
//! accumulates Welford statistics sequentially and batches are merged in index
//! order, so results do not depend on the number of worker threads.

pub mod compare;
pub mod density;
pub mod payoff;
pub mod pde;

use std::sync::Arc;

use rayon::prelude::*;

use crate::coefficients::CoefficientModel;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::simulator::{simulate_decoupled_from, simulate_particles, streams, BrownianDriver, InitialLaw, ParticleSystemPaths, TimeGrid};
use crate::tangents::{propagate_lions, CarrierSetup, LionsMode, LionsTangentSystem};
use crate::weights::{FixedPointShift, WeightContext, WeightExpr, MAX_ORDER};

pub use payoff::{Payoff, PayoffClass, ScalarPayoff, Terminal};

/// Monte-Carlo run parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McConfig {
  pub n_samples: usize,
  pub seed: u64,
  pub batch_size: usize,
  /// Simulate a new particle system for every batch instead of sharing one.
  pub fresh_law_per_batch: bool,
}

impl McConfig {
  pub fn new(n_samples: usize, seed: u64) -> Self {
    McConfig { n_samples, seed, batch_size: 1024, fresh_law_per_batch: false }
  }

  fn validate(&self) -> Result<()> {
    if self.n_samples < 2 {
      return Err(Error::InvalidArgument(format!("need at least 2 samples, got {}", self.n_samples)));
    }
    if self.batch_size == 0 {
      return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    Ok(())
  }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
  MonteCarlo,
  Weight,
  FiniteDifference,
  Oracle,
}

impl Method {
  pub fn tag(self) -> &'static str {
    match self {
      Method::MonteCarlo => "monte-carlo",
      Method::Weight => "weight",
      Method::FiniteDifference => "finite-difference",
      Method::Oracle => "oracle",
    }
  }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
  /// Sample variance of the weight alone.
  pub weight_variance: Option<f64>,
  pub max_condition: f64,
  pub rejected: usize,
  /// More than 0.1% of the samples were rejected.
  pub flagged: bool,
  pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorResult {
  pub estimator: String,
  pub value: f64,
  pub stderr: f64,
  /// Accepted samples.
  pub n_samples: usize,
  pub seed: u64,
  pub t: f64,
  pub x: Vec<f64>,
  pub v: Option<Vec<f64>>,
  pub z: Option<f64>,
  pub method: Method,
  pub diagnostics: Diagnostics,
}

fn join(v: &[f64]) -> String {
  v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")
}

impl EstimatorResult {
  pub const CSV_HEADER: &'static str = "estimator,t,x,v,z,value,stderr,n_samples,seed,method";

  pub fn csv_row(&self) -> String {
    format!(
      "{},{},{},{},{},{},{},{},{},{}",
      self.estimator,
      self.t,
      join(&self.x),
      self.v.as_deref().map(join).unwrap_or_default(),
      self.z.map(|z| z.to_string()).unwrap_or_default(),
      self.value,
      self.stderr,
      self.n_samples,
      self.seed,
      self.method.tag()
    )
  }

  /// `|value − target| / stderr`, infinite when the standard error vanishes
  /// and the value misses the target.
  pub fn z_score(&self, target: f64) -> f64 {
    let d = (self.value - target).abs();
    if d == 0.0 {
      0.0
    } else {
      d / self.stderr
    }
  }
}

/// Model, grid, particle count and evaluation point shared by the estimators.
#[derive(Clone, Debug)]
pub struct Problem {
  pub model: Arc<dyn CoefficientModel>,
  pub grid: TimeGrid,
  pub particles: usize,
  pub initial: InitialLaw,
  pub x: Mat,
  /// Evaluation time, a node of `grid`.
  pub t: f64,
}

impl Problem {
  pub fn new(model: Arc<dyn CoefficientModel>, grid: TimeGrid, particles: usize, initial: InitialLaw, x: Mat, t: f64) -> Result<Self> {
    let p = Problem { model, grid, particles, initial, x, t };
    p.validate()?;
    Ok(p)
  }

  fn validate(&self) -> Result<()> {
    let n = self.model.dim_state();
    if self.x.len() != n || self.initial.dim() != n {
      return Err(Error::Dimension(format!("x or the initial law does not live in dimension {n}")));
    }
    self.steps()?;
    Ok(())
  }

  /// Number of grid steps up to `t`.
  pub fn steps(&self) -> Result<usize> {
    self.grid.index_of(self.t)
  }

  pub fn h(&self) -> f64 {
    self.grid.step()
  }

  pub fn dim(&self) -> usize {
    self.model.dim_state()
  }

  pub fn noise_dim(&self) -> usize {
    self.model.dim_noise()
  }

  pub fn with_t(&self, t: f64) -> Result<Problem> {
    Problem::new(self.model.clone(), self.grid, self.particles, self.initial.clone(), self.x, t)
  }

  pub fn with_x(&self, x: Mat) -> Result<Problem> {
    Problem::new(self.model.clone(), self.grid, self.particles, self.initial.clone(), x, self.t)
  }

  pub fn with_initial(&self, initial: InitialLaw) -> Result<Problem> {
    Problem::new(self.model.clone(), self.grid, self.particles, initial, self.x, self.t)
  }

  /// Particle system over the whole grid; the driver uses stream `LAW`.
  pub fn simulate_law(&self, seed: u64) -> Result<ParticleSystemPaths> {
    let d = self.noise_dim();
    simulate_particles(self.model.as_ref(), &self.initial, self.particles, &self.grid, &BrownianDriver::new(seed, streams::LAW, d))
  }

  fn sample_increments(&self, seed: u64, stream: u64, path: u64, n: usize) -> Vec<Mat> {
    BrownianDriver::new(seed, stream, self.noise_dim()).increments(path, n, self.h())
  }

  fn result(&self, estimator: &str, value: f64, stderr: f64, n: usize, seed: u64, method: Method) -> EstimatorResult {
    EstimatorResult {
      estimator: estimator.to_string(),
      value,
      stderr,
      n_samples: n,
      seed,
      t: self.t,
      x: self.x.as_slice().to_vec(),
      v: None,
      z: None,
      method,
      diagnostics: Diagnostics::default(),
    }
  }
}

/// A requested `v` with the index of the auxiliary streams its copies use.
/// Points built for difference quotients share the stream of their centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct VPoint {
  pub v: Mat,
  pub stream: u64,
}

pub(crate) fn vpoints(vs: &[Mat]) -> Vec<VPoint> {
  vs.iter().enumerate().map(|(i, v)| VPoint { v: *v, stream: i as u64 }).collect()
}

/// Law path, terminal summary and Lions systems shared by a batch.
pub(crate) struct LawContext {
  pub law: ParticleSystemPaths,
  pub lions: Vec<LionsTangentSystem>,
  pub n: usize,
  pub mean0: f64,
}

impl LawContext {
  pub fn new(problem: &Problem, law: ParticleSystemPaths, seed: u64, vs: &[VPoint], n: usize) -> Result<Self> {
    let model = problem.model.as_ref();
    let d = problem.noise_dim();
    let lions = vs
      .iter()
      .map(|p| propagate_lions(model, &law, &p.v, n, &BrownianDriver::new(seed, streams::AUX_LAW + p.stream, d), LionsMode::Auto))
      .collect::<Result<Vec<_>>>()?;
    let mean0 = law.cloud(n).mean()[0];
    Ok(LawContext { law, lions, n, mean0 })
  }

  pub fn terminal(&self) -> Terminal<'_> {
    Terminal { cloud: self.law.cloud(self.n), mean0: self.mean0 }
  }

  pub fn setup<'a>(&'a self, model: &'a dyn CoefficientModel) -> Result<CarrierSetup<'a>> {
    CarrierSetup::new(model, &self.law, &self.lions, self.n)
  }
}

/// Auxiliary increments for every `v` of a sample: stream `base + stream`, path `s`.
pub(crate) fn aux_increments(problem: &Problem, seed: u64, base: u64, vs: &[VPoint], s: u64, n: usize) -> Vec<Vec<Mat>> {
  let mut cache: Vec<(u64, Vec<Mat>)> = Vec::new();
  vs.iter()
    .map(|p| {
      if let Some((_, inc)) = cache.iter().find(|(k, _)| *k == p.stream) {
        return inc.clone();
      }
      let inc = problem.sample_increments(seed, base + p.stream, s, n);
      cache.push((p.stream, inc.clone()));
      inc
    })
    .collect()
}

// ---------------------------------------------------------------------------
// Batch engine
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct Welford {
  pub n: usize,
  pub mean: f64,
  m2: f64,
}

impl Welford {
  pub fn push(&mut self, x: f64) {
    self.n += 1;
    let d = x - self.mean;
    self.mean += d / self.n as f64;
    self.m2 += d * (x - self.mean);
  }

  pub fn merge(&mut self, o: &Welford) {
    if o.n == 0 {
      return;
    }
    if self.n == 0 {
      *self = *o;
      return;
    }
    let n = self.n + o.n;
    let d = o.mean - self.mean;
    self.mean += d * o.n as f64 / n as f64;
    self.m2 += o.m2 + d * d * (self.n as f64 * o.n as f64) / n as f64;
    self.n = n;
  }

  /// Unbiased sample variance.
  pub fn variance(&self) -> f64 {
    if self.n < 2 {
      0.0
    } else {
      self.m2 / (self.n - 1) as f64
    }
  }

  pub fn stderr(&self) -> f64 {
    if self.n == 0 {
      f64::INFINITY
    } else {
      (self.variance() / self.n as f64).sqrt()
    }
  }
}

/// Per-sample contribution.
pub(crate) struct SampleOut {
  pub values: Vec<f64>,
  pub condition: f64,
}

impl SampleOut {
  pub fn plain(values: Vec<f64>) -> Self {
    SampleOut { values, condition: 1.0 }
  }
}

#[derive(Clone, Debug)]
pub(crate) struct RunStats {
  pub stats: Vec<Welford>,
  /// Batch means per column, kept when every batch has its own law.
  pub batch_means: Option<Vec<Welford>>,
  pub max_condition: f64,
  pub rejected: usize,
  pub requested: usize,
  pub seed: u64,
  pub warnings: Vec<String>,
}

impl RunStats {
  fn new(width: usize, requested: usize, seed: u64) -> Self {
    RunStats { stats: vec![Welford::default(); width], batch_means: None, max_condition: 0.0, rejected: 0, requested, seed, warnings: Vec::new() }
  }

  fn merge(&mut self, o: &RunStats) {
    for (a, b) in self.stats.iter_mut().zip(&o.stats) {
      a.merge(b);
    }
    self.max_condition = self.max_condition.max(o.max_condition);
    self.rejected += o.rejected;
    for w in &o.warnings {
      if !self.warnings.contains(w) {
        self.warnings.push(w.clone());
      }
    }
  }

  /// Per-sample standard error, or the batch-means one when it is larger;
  /// samples sharing a law are correlated through it.
  pub fn stderr(&self, c: usize) -> f64 {
    let within = self.stats[c].stderr();
    match &self.batch_means {
      Some(b) if b[c].n >= 2 => within.max(b[c].stderr()),
      _ => within,
    }
  }

  pub fn accepted(&self) -> usize {
    self.stats.first().map_or(0, |w| w.n)
  }

  pub fn diagnostics(&self, weight_column: Option<usize>) -> Diagnostics {
    Diagnostics {
      weight_variance: weight_column.map(|c| self.stats[c].variance()),
      max_condition: self.max_condition,
      rejected: self.rejected,
      flagged: self.rejected as f64 > 1e-3 * self.requested as f64,
      warnings: self.warnings.clone(),
    }
  }

  /// Result for column `c` scaled by `scale`.
  pub fn result(&self, problem: &Problem, name: &str, c: usize, scale: f64, method: Method, weight_column: Option<usize>) -> EstimatorResult {
    let w = &self.stats[c];
    let mut r = problem.result(name, scale * w.mean, scale.abs() * self.stderr(c), w.n, self.seed, method);
    r.diagnostics = self.diagnostics(weight_column);
    r
  }
}

fn splitmix(mut z: u64) -> u64 {
  z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
  z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
  z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
  z ^ (z >> 31)
}

/// Seed of the particle system used by batch `b`.
pub(crate) fn law_seed(cfg: &McConfig, b: usize) -> u64 {
  if cfg.fresh_law_per_batch {
    splitmix(cfg.seed ^ splitmix(b as u64 + 1))
  } else {
    cfg.seed
  }
}

/// Runs `sample(ctx, s)` for `s < n_samples`, with `ctx = prepare(law_seed)`
/// shared by all batches or rebuilt per batch. Singular Jacobians and
/// non-finite contributions reject the sample; other errors abort the run.
pub(crate) fn run<C, P, F>(cfg: &McConfig, width: usize, prepare: P, sample: F) -> Result<RunStats>
where
  C: Send + Sync,
  P: Fn(u64) -> Result<C> + Sync,
  F: Fn(&C, u64) -> Result<SampleOut> + Sync,
{
  cfg.validate()?;
  let nb = cfg.n_samples.div_ceil(cfg.batch_size);
  let shared = if cfg.fresh_law_per_batch { None } else { Some(prepare(cfg.seed)?) };
  let batches: Vec<Result<RunStats>> = (0..nb)
    .into_par_iter()
    .map(|b| {
      let own;
      let ctx = match &shared {
        Some(c) => c,
        None => {
          own = prepare(law_seed(cfg, b))?;
          &own
        }
      };
      let lo = b * cfg.batch_size;
      let hi = (lo + cfg.batch_size).min(cfg.n_samples);
      let mut st = RunStats::new(width, hi - lo, cfg.seed);
      for s in lo..hi {
        match sample(ctx, s as u64) {
          Ok(out) if out.values.iter().all(|v| v.is_finite()) => {
            for (w, v) in st.stats.iter_mut().zip(&out.values) {
              w.push(*v);
            }
            st.max_condition = st.max_condition.max(out.condition);
          }
          Ok(_) | Err(Error::SingularJacobian { .. }) => st.rejected += 1,
          Err(e) => return Err(e),
        }
      }
      Ok(st)
    })
    .collect();
  let mut total = RunStats::new(width, cfg.n_samples, cfg.seed);
  let mut means = vec![Welford::default(); width];
  for b in batches {
    let b = b?;
    for (m, w) in means.iter_mut().zip(&b.stats) {
      if w.n > 0 {
        m.push(w.mean);
      }
    }
    total.merge(&b);
  }
  if cfg.fresh_law_per_batch {
    total.batch_means = Some(means);
  }
  if total.accepted() < 2 {
    return Err(Error::SingularJacobian { condition: total.max_condition.max(f64::INFINITY) });
  }
  Ok(total)
}

// ---------------------------------------------------------------------------
// Estimators
// ---------------------------------------------------------------------------

fn check_alpha(alpha: &[usize], n: usize) -> Result<()> {
  if alpha.len() > MAX_ORDER {
    return Err(Error::OrderExceeded { requested: alpha.len(), cap: MAX_ORDER });
  }
  if let Some(&i) = alpha.iter().find(|&&i| i >= n) {
    return Err(Error::Dimension(format!("derivative index {i} out of range for N={n}")));
  }
  Ok(())
}

/// `𝔼[f(X_t^{x,[θ]})]` by plain Monte Carlo.
pub fn estimate_expectation(problem: &Problem, payoff: &Payoff, cfg: &McConfig) -> Result<EstimatorResult> {
  let n = problem.steps()?;
  let model = problem.model.as_ref();
  let stats = run(
    cfg,
    1,
    |seed| LawContext::new(problem, problem.simulate_law(seed)?, seed, &[], n),
    |ctx, s| {
      let inc = problem.sample_increments(cfg.seed, streams::SAMPLE, s, n);
      let path = simulate_decoupled_from(model, &problem.x, &ctx.law, 0, &inc)?;
      Ok(SampleOut::plain(vec![payoff.value(path.terminal(), &ctx.terminal())]))
    },
  )?;
  Ok(stats.result(problem, "expectation", 0, 1.0, Method::MonteCarlo, None))
}

/// A weight, the factor `t^{-k/2}` in front of it and the `v` it refers to.
struct WeightJob {
  name: String,
  expr: WeightExpr,
  scale: f64,
  v: Option<Mat>,
}

/// `scale·𝔼[f(X_t)·W]` for every job on shared carriers.
fn weight_estimates(problem: &Problem, payoff: &Payoff, cfg: &McConfig, jobs: &[WeightJob], vs: &[VPoint]) -> Result<Vec<EstimatorResult>> {
  for j in jobs {
    if j.expr.order() > MAX_ORDER {
      return Err(Error::OrderExceeded { requested: j.expr.order(), cap: MAX_ORDER });
    }
  }
  let n = problem.steps()?;
  let model = problem.model.as_ref();
  let k = jobs.len();
  let stats = run(
    cfg,
    2 * k,
    |seed| LawContext::new(problem, problem.simulate_law(seed)?, seed, vs, n),
    |ctx, s| {
      let inc = problem.sample_increments(cfg.seed, streams::SAMPLE, s, n);
      let aux = aux_increments(problem, cfg.seed, streams::AUX, vs, s, n);
      let wc = WeightContext { setup: ctx.setup(model)?, x0: problem.x, increments: &inc, aux_increments: &aux, fixed_x: None, shifts: &[] };
      let c = wc.build()?;
      let f = payoff.value(c.terminal(), &ctx.terminal());
      let mut values = vec![0.0; 2 * k];
      for (i, j) in jobs.iter().enumerate() {
        let w = wc.evaluate_on(&j.expr, &c)?.value;
        values[i] = f * w;
        values[k + i] = w;
      }
      Ok(SampleOut { values, condition: c.condition })
    },
  )?;
  Ok(finish_jobs(problem, &stats, jobs))
}

fn finish_jobs(problem: &Problem, stats: &RunStats, jobs: &[WeightJob]) -> Vec<EstimatorResult> {
  let k = jobs.len();
  jobs
    .iter()
    .enumerate()
    .map(|(i, j)| {
      let mut r = stats.result(problem, &j.name, i, j.scale, Method::Weight, Some(k + i));
      r.v = j.v.map(|v| v.as_slice().to_vec());
      r
    })
    .collect()
}

/// `∂ₓ^α 𝔼[f(X_t^{x,[θ]})] = t^{-|α|/2} 𝔼[f(X_t) I³_α(1)]`.
pub fn estimate_dx(problem: &Problem, alpha: &[usize], payoff: &Payoff, cfg: &McConfig) -> Result<EstimatorResult> {
  check_alpha(alpha, problem.dim())?;
  let expr = WeightExpr::nested(alpha, WeightExpr::One, WeightExpr::i3);
  let job = WeightJob { name: "dx".into(), expr, scale: problem.t.powf(-(alpha.len() as f64) / 2.0), v: None };
  Ok(weight_estimates(problem, payoff, cfg, &[job], &[])?.remove(0))
}

/// `𝔼[(∂^β f)(X_t)] = t^{-|β|/2} 𝔼[f(X_t) I²_β(1)]` without differentiating `f`.
pub fn estimate_derivative_of_payoff(problem: &Problem, beta: &[usize], payoff: &Payoff, cfg: &McConfig) -> Result<EstimatorResult> {
  check_alpha(beta, problem.dim())?;
  let expr = WeightExpr::nested(beta, WeightExpr::One, WeightExpr::i2);
  let job = WeightJob { name: "payoff_derivative".into(), expr, scale: problem.t.powf(-(beta.len() as f64) / 2.0), v: None };
  Ok(weight_estimates(problem, payoff, cfg, &[job], &[])?.remove(0))
}

/// `(∂_μ 𝔼[f(X_t^{x,[θ]})])_i(v) = t^{-1/2} 𝔼[f(X_t) 𝓘³_{(i)}(1)(v)]` at every `v`, on shared samples.
pub fn estimate_dmu(problem: &Problem, i: usize, payoff: &Payoff, vs: &[Mat], cfg: &McConfig) -> Result<Vec<EstimatorResult>> {
  check_alpha(&[i], problem.dim())?;
  if vs.is_empty() {
    return Err(Error::InvalidArgument("no v requested".into()));
  }
  let pts = vpoints(vs);
  let scale = problem.t.powf(-0.5);
  let jobs: Vec<WeightJob> = vs
    .iter()
    .map(|v| WeightJob { name: "dmu".into(), expr: WeightExpr::cal_i3(i, *v, WeightExpr::One), scale, v: Some(*v) })
    .collect();
  weight_estimates(problem, payoff, cfg, &jobs, &pts)
}

/// Law from `δ_x` and Lions systems at `x`, plus the same at `x ± ε e_i`.
struct FixedPointContext {
  centre: LawContext,
  shifted: Vec<(LawContext, LawContext)>,
  eps: f64,
}

impl FixedPointContext {
  fn new(problem: &Problem, seed: u64, n: usize, with_shifts: bool) -> Result<Self> {
    let at = |x: Mat| -> Result<LawContext> {
      let p = problem.with_initial(InitialLaw::Dirac(x))?;
      LawContext::new(&p, p.simulate_law(seed)?, seed, &[VPoint { v: x, stream: 0 }], n)
    };
    let eps = 1e-4 * (1.0 + problem.x.max_abs());
    let shifted = if with_shifts {
      (0..problem.dim())
        .map(|i| {
          let mut xp = problem.x;
          xp[i] += eps;
          let mut xm = problem.x;
          xm[i] -= eps;
          Ok((at(xp)?, at(xm)?))
        })
        .collect::<Result<Vec<_>>>()?
    } else {
      Vec::new()
    };
    Ok(FixedPointContext { centre: at(problem.x)?, shifted, eps })
  }

  fn shifts<'a>(&'a self, model: &'a dyn CoefficientModel) -> Result<Vec<FixedPointShift<'a>>> {
    self
      .shifted
      .iter()
      .map(|(p, m)| Ok(FixedPointShift { eps: self.eps, plus: p.setup(model)?, minus: m.setup(model)? }))
      .collect()
  }
}

fn needs_shifts(e: &WeightExpr) -> bool {
  match e {
    WeightExpr::One => false,
    WeightExpr::J(_, p) => **p != WeightExpr::One || needs_shifts(p),
    WeightExpr::I1(_, p) | WeightExpr::I2(_, p) | WeightExpr::I3(_, p) | WeightExpr::CalI1(_, _, p) | WeightExpr::CalI3(_, _, p) => needs_shifts(p),
  }
}

/// Weights evaluated on the fixed-point flow `X^{x,δ_x}`; one result per expression.
fn fixed_point_estimates(problem: &Problem, payoff: &Payoff, cfg: &McConfig, jobs: &[WeightJob]) -> Result<Vec<EstimatorResult>> {
  for j in jobs {
    if j.expr.order() > MAX_ORDER {
      return Err(Error::OrderExceeded { requested: j.expr.order(), cap: MAX_ORDER });
    }
  }
  let n = problem.steps()?;
  let model = problem.model.as_ref();
  let k = jobs.len();
  let with_shifts = jobs.iter().any(|j| needs_shifts(&j.expr));
  let vs = [VPoint { v: problem.x, stream: 0 }];
  let stats = run(
    cfg,
    2 * k,
    |seed| FixedPointContext::new(problem, seed, n, with_shifts),
    |ctx, s| {
      let inc = problem.sample_increments(cfg.seed, streams::SAMPLE, s, n);
      let aux = aux_increments(problem, cfg.seed, streams::AUX, &vs, s, n);
      let shifts = ctx.shifts(model)?;
      let wc = WeightContext {
        setup: ctx.centre.setup(model)?,
        x0: problem.x,
        increments: &inc,
        aux_increments: &aux,
        fixed_x: Some(problem.x),
        shifts: &shifts,
      };
      let c = wc.build()?;
      let f = payoff.value(c.terminal(), &ctx.centre.terminal());
      let mut values = vec![0.0; 2 * k];
      for (i, j) in jobs.iter().enumerate() {
        let w = wc.evaluate_on(&j.expr, &c)?.value;
        values[i] = f * w;
        values[k + i] = w;
      }
      Ok(SampleOut { values, condition: c.condition })
    },
  )?;
  Ok(finish_jobs(problem, &stats, jobs))
}

/// `∂ₓ^α 𝔼[f(X_t^{x,δ_x})] = t^{-|α|/2} 𝔼[f(X_t^{x,δ_x}) J_α(1)]`; the initial
/// law of `problem` is replaced by `δ_x`.
pub fn estimate_dx_fixed_point(problem: &Problem, alpha: &[usize], payoff: &Payoff, cfg: &McConfig) -> Result<EstimatorResult> {
  check_alpha(alpha, problem.dim())?;
  let expr = WeightExpr::nested(alpha, WeightExpr::One, WeightExpr::j);
  let job = WeightJob { name: "fixed_point_dx".into(), expr, scale: problem.t.powf(-(alpha.len() as f64) / 2.0), v: None };
  Ok(fixed_point_estimates(problem, payoff, cfg, &[job])?.remove(0))
}
