//! Run configuration: strict TOML, every table rejects unknown keys.

use std::sync::Arc;

use mckean::coefficients::{CoefficientModel, Constant, Feature, FirstOrder, MeanFieldOu, ModelFlags, PairKernel, ScalarInteraction, ScalarTerm};
use mckean::estimators::{McConfig, Payoff, Problem};
use mckean::simulator::{InitialLaw, TimeGrid};
use mckean::Mat;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
  pub seed: u64,
  pub samples: usize,
  pub particles: usize,
  /// Evaluation time; defaults to the grid horizon.
  pub t: Option<f64>,
  pub x: Vec<f64>,
  pub batch_size: Option<usize>,
  #[serde(default)]
  pub fresh_law_per_batch: bool,
  pub model: ModelConfig,
  pub grid: GridConfig,
  pub initial: Option<InitialConfig>,
  pub estimate: Option<EstimateConfig>,
  pub density: Option<DensityConfig>,
  pub pde_check: Option<PdeCheckConfig>,
  pub compare: Option<CompareConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
  pub horizon: f64,
  pub steps: usize,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelConfig {
  Constant(ConstantConfig),
  MeanFieldOu(OuConfig),
  ScalarInteraction(ScalarInteractionConfig),
  FirstOrder(FirstOrderConfig),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantConfig {
  pub b: Vec<f64>,
  /// Rows of the `N×d` diffusion matrix.
  pub sigma: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuConfig {
  pub a: f64,
  pub sigma: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarInteractionConfig {
  pub drift: TermConfig,
  pub diffusion: Vec<TermConfig>,
  #[serde(default)]
  pub bounded: bool,
  pub elliptic_floor: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TermConfig {
  pub c0: f64,
  pub cx: f64,
  pub cm: f64,
  pub cxm: f64,
  pub csin: f64,
  pub phi: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirstOrderConfig {
  pub drift: KernelConfig,
  pub diffusion: Vec<KernelConfig>,
  #[serde(default)]
  pub bounded: bool,
  pub elliptic_floor: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
  pub c0: f64,
  pub cx: f64,
  pub cy: f64,
  pub cxy: f64,
  pub csin: f64,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
  Dirac { point: Vec<f64> },
  Gaussian { mean: Vec<f64>, std: f64 },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayoffConfig {
  pub name: String,
  pub threshold: Option<f64>,
  pub coefficients: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
  /// Any of `expectation`, `dx`, `dmu`, `fixed_point_dx`.
  pub quantities: Vec<String>,
  pub payoff: PayoffConfig,
  /// Zero-based coordinates of the `x` derivative.
  #[serde(default = "first_coordinate")]
  pub alpha: Vec<usize>,
  /// Zero-based coordinate of the Lions derivative.
  #[serde(default)]
  pub dmu_coordinate: usize,
  #[serde(default)]
  pub v: Vec<Vec<f64>>,
}

fn first_coordinate() -> Vec<usize> {
  vec![0]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
  pub z: ZGridConfig,
  #[serde(default)]
  pub dz: bool,
  #[serde(default)]
  pub dx: bool,
}

/// Per-coordinate range; the grid is the tensor product in dimension `N`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZGridConfig {
  pub lo: f64,
  pub hi: f64,
  pub count: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeCheckConfig {
  pub payoff: PayoffConfig,
  pub h_t: Option<f64>,
  #[serde(default = "default_v_points")]
  pub v_points: usize,
}

fn default_v_points() -> usize {
  64
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
  pub payoff: PayoffConfig,
  /// `dx` or `measure_shift`.
  pub target: String,
  #[serde(default)]
  pub coordinate: usize,
  pub bumps: Vec<f64>,
  #[serde(default = "yes")]
  pub common_random_numbers: bool,
}

fn yes() -> bool {
  true
}

fn bad(msg: impl Into<String>) -> CliError {
  CliError::Config(msg.into())
}

fn finite(name: &str, v: f64) -> Result<f64, CliError> {
  if v.is_finite() {
    Ok(v)
  } else {
    Err(bad(format!("{name} must be finite, got {v}")))
  }
}

fn positive(name: &str, v: f64) -> Result<f64, CliError> {
  if v.is_finite() && v > 0.0 {
    Ok(v)
  } else {
    Err(bad(format!("{name} must be positive and finite, got {v}")))
  }
}

fn all_finite(name: &str, vs: &[f64]) -> Result<(), CliError> {
  vs.iter().try_for_each(|&v| finite(name, v).map(|_| ()))
}

impl RunConfig {
  pub fn parse(text: &str) -> Result<Self, CliError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| bad(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
  }

  fn validate(&self) -> Result<(), CliError> {
    positive("grid.horizon", self.grid.horizon)?;
    if self.grid.steps == 0 {
      return Err(bad("grid.steps must be positive"));
    }
    if self.samples < 2 {
      return Err(bad("samples must be at least 2"));
    }
    if self.particles < 2 {
      return Err(bad("particles must be at least 2"));
    }
    if self.batch_size == Some(0) {
      return Err(bad("batch_size must be positive"));
    }
    if let Some(t) = self.t {
      positive("t", t)?;
    }
    all_finite("x", &self.x)?;
    match &self.initial {
      Some(InitialConfig::Dirac { point }) => all_finite("initial.point", point)?,
      Some(InitialConfig::Gaussian { mean, std }) => {
        all_finite("initial.mean", mean)?;
        positive("initial.std", *std)?;
      }
      None => {}
    }
    match &self.model {
      ModelConfig::Constant(c) => {
        all_finite("model.b", &c.b)?;
        c.sigma.iter().try_for_each(|r| all_finite("model.sigma", r))?;
      }
      ModelConfig::MeanFieldOu(c) => {
        finite("model.a", c.a)?;
        positive("model.sigma", c.sigma)?;
      }
      ModelConfig::ScalarInteraction(c) => {
        for t in std::iter::once(&c.drift).chain(&c.diffusion) {
          all_finite("model term", &[t.c0, t.cx, t.cm, t.cxm, t.csin])?;
        }
        if let Some(e) = c.elliptic_floor {
          positive("model.elliptic_floor", e)?;
        }
      }
      ModelConfig::FirstOrder(c) => {
        for k in std::iter::once(&c.drift).chain(&c.diffusion) {
          all_finite("model kernel", &[k.c0, k.cx, k.cy, k.cxy, k.csin])?;
        }
        if let Some(e) = c.elliptic_floor {
          positive("model.elliptic_floor", e)?;
        }
      }
    }
    if let Some(e) = &self.estimate {
      e.v.iter().try_for_each(|v| all_finite("estimate.v", v))?;
      payoff_finite(&e.payoff)?;
    }
    if let Some(d) = &self.density {
      finite("density.z.lo", d.z.lo)?;
      finite("density.z.hi", d.z.hi)?;
      if d.z.count == 0 {
        return Err(bad("density.z.count must be positive"));
      }
    }
    if let Some(p) = &self.pde_check {
      payoff_finite(&p.payoff)?;
      if let Some(h) = p.h_t {
        positive("pde_check.h_t", h)?;
      }
      if p.v_points == 0 {
        return Err(bad("pde_check.v_points must be positive"));
      }
    }
    if let Some(c) = &self.compare {
      payoff_finite(&c.payoff)?;
      c.bumps.iter().try_for_each(|&b| positive("compare.bumps", b).map(|_| ()))?;
    }
    Ok(())
  }

  pub fn model(&self) -> Result<Arc<dyn CoefficientModel>, CliError> {
    let flags = |bounded: bool, floor: Option<f64>| ModelFlags {
      bounded_coefficients: bounded,
      declared_uniformly_elliptic: floor.is_some(),
      ellipticity_floor: floor.unwrap_or(0.0),
    };
    Ok(match &self.model {
      ModelConfig::Constant(c) => {
        let d = c.sigma.first().map_or(0, Vec::len);
        if c.sigma.iter().any(|r| r.len() != d) {
          return Err(bad("model.sigma rows must have equal length"));
        }
        let flat: Vec<f64> = c.sigma.iter().flatten().copied().collect();
        Arc::new(Constant::new(Mat::col(&c.b), Mat::from_row_slice(c.sigma.len(), d, &flat))?)
      }
      ModelConfig::MeanFieldOu(c) => Arc::new(MeanFieldOu::new(c.a, c.sigma)?),
      ModelConfig::ScalarInteraction(c) => {
        let terms = std::iter::once(&c.drift).chain(&c.diffusion).map(term).collect::<Result<Vec<_>, _>>()?;
        Arc::new(ScalarInteraction::new(terms, flags(c.bounded, c.elliptic_floor))?)
      }
      ModelConfig::FirstOrder(c) => {
        let kernels = std::iter::once(&c.drift)
          .chain(&c.diffusion)
          .map(|k| PairKernel { c0: k.c0, cx: k.cx, cy: k.cy, cxy: k.cxy, csin: k.csin })
          .collect();
        Arc::new(FirstOrder::new(kernels, flags(c.bounded, c.elliptic_floor))?)
      }
    })
  }

  pub fn problem(&self) -> Result<Problem, CliError> {
    let model = self.model()?;
    let grid = TimeGrid::new(self.grid.horizon, self.grid.steps)?;
    let x = Mat::col(&self.x);
    let initial = match &self.initial {
      None => InitialLaw::Dirac(x),
      Some(InitialConfig::Dirac { point }) => InitialLaw::Dirac(Mat::col(point)),
      Some(InitialConfig::Gaussian { mean, std }) => InitialLaw::Gaussian { mean: Mat::col(mean), std: *std },
    };
    if self.x.is_empty() || self.x.len() > mckean::linalg::MAX_DIM {
      return Err(bad(format!("x must have between 1 and {} coordinates", mckean::linalg::MAX_DIM)));
    }
    Ok(Problem::new(model, grid, self.particles, initial, x, self.t.unwrap_or(self.grid.horizon))?)
  }

  pub fn mc(&self, seed: u64) -> McConfig {
    let mut mc = McConfig::new(self.samples, seed);
    if let Some(b) = self.batch_size {
      mc.batch_size = b;
    }
    mc.fresh_law_per_batch = self.fresh_law_per_batch;
    mc
  }
}

fn term(t: &TermConfig) -> Result<ScalarTerm, CliError> {
  let phi = match &t.phi {
    None => Feature::Identity,
    Some(name) => Feature::parse(name).ok_or_else(|| bad(format!("unknown feature '{name}'")))?,
  };
  Ok(ScalarTerm { c0: t.c0, cx: t.cx, cm: t.cm, cxm: t.cxm, csin: t.csin, phi })
}

fn payoff_finite(p: &PayoffConfig) -> Result<(), CliError> {
  if let Some(z) = p.threshold {
    finite("payoff.threshold", z)?;
  }
  all_finite("payoff.coefficients", p.coefficients.as_deref().unwrap_or(&[]))
}

impl PayoffConfig {
  pub fn build(&self) -> Result<Payoff, CliError> {
    match self.name.as_str() {
      "identity" | "square" | "sin" | "positive_part" | "indicator_above" | "centred_mean" | "polynomial" => {
        Payoff::from_name(&self.name, self.threshold, self.coefficients.as_deref()).map_err(|e| bad(e.to_string()))
      }
      other => Err(bad(format!("unknown payoff '{other}'"))),
    }
  }
}
