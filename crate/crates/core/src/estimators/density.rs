//! Transition densities of the fixed-point flow `X_t^{x,δ_x}` and their first
//! derivatives, from `p(z) = t^{-N/2} 𝔼[1_{X_t > z} I²_{(1..N)}(1)]`, with the
//! indicator of each coordinate below `x` swapped for `−1_{X_t ≤ z}`.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::simulator::streams;
use crate::weights::{WeightContext, WeightExpr, MAX_ORDER};

use super::{aux_increments, run, Diagnostics, FixedPointContext, McConfig, Problem, SampleOut, VPoint};

/// Least-squares fit of `log p` against `|z − x|²/t` over one side of the tail.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailFit {
  /// Bit `i` set when `z_i < x_i` on this side.
  pub side: u8,
  pub slope: f64,
  pub intercept: f64,
  pub r2: f64,
  pub points: usize,
}

/// Values and standard errors on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridValues {
  pub value: Vec<f64>,
  pub stderr: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityEstimate {
  pub z: Vec<Mat>,
  pub p: GridValues,
  pub dp_dz: Option<GridValues>,
  pub dp_dx: Option<GridValues>,
  /// One fit per side of `x` with enough tail points.
  pub tails: Vec<TailFit>,
  pub n_samples: usize,
  pub seed: u64,
  pub t: f64,
  pub x: Mat,
  pub diagnostics: Diagnostics,
}

impl DensityEstimate {
  pub const CSV_HEADER: &'static str = "z,p,stderr,dp_dz,dp_dz_stderr,dp_dx,dp_dx_stderr";

  pub fn csv_rows(&self) -> Vec<String> {
    let opt = |g: &Option<GridValues>, k: usize| g.as_ref().map_or(",".to_string(), |g| format!("{},{}", g.value[k], g.stderr[k]));
    self
      .z
      .iter()
      .enumerate()
      .map(|(k, z)| {
        let zs = z.as_slice().iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";");
        format!("{zs},{},{},{},{}", self.p.value[k], self.p.stderr[k], opt(&self.dp_dz, k), opt(&self.dp_dx, k))
      })
      .collect()
  }
}

/// Ordinary least squares of `ys` on `xs`; `None` with fewer than 3 points.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64, f64)> {
  weighted_linear_fit(xs, ys, &vec![1.0; xs.len()])
}

/// Weighted least squares with weighted `R²`.
pub fn weighted_linear_fit(xs: &[f64], ys: &[f64], ws: &[f64]) -> Option<(f64, f64, f64)> {
  if xs.len() < 3 {
    return None;
  }
  let sw: f64 = ws.iter().sum();
  let mx = xs.iter().zip(ws).map(|(x, w)| w * x).sum::<f64>() / sw;
  let my = ys.iter().zip(ws).map(|(y, w)| w * y).sum::<f64>() / sw;
  let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
  for ((x, y), w) in xs.iter().zip(ys).zip(ws) {
    sxx += w * (x - mx).powi(2);
    sxy += w * (x - mx) * (y - my);
    syy += w * (y - my).powi(2);
  }
  if sxx == 0.0 {
    return None;
  }
  let slope = sxy / sxx;
  let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
  Some((slope, my - slope * mx, r2))
}

/// Tail region: `|z − x|²/t` at least half its largest grid value, and `p`
/// more than three standard errors above zero. Each side of `x` (sign pattern
/// of `z − x`) is fitted separately, since the coefficients need not be
/// symmetric. Points are weighted by `(p/stderr)²`, the inverse variance of `log p`.
pub fn fit_tail(z: &[Mat], x: &Mat, t: f64, p: &GridValues) -> Vec<TailFit> {
  let u: Vec<f64> = z.iter().map(|zk| (*zk - *x).norm().powi(2) / t).collect();
  let umax = u.iter().cloned().fold(0.0, f64::max);
  let side = |zk: &Mat| (0..x.len()).fold(0u8, |b, i| b | (u8::from(zk[i] < x[i]) << i));
  let mut sides: Vec<u8> = z.iter().map(side).collect();
  sides.sort_unstable();
  sides.dedup();
  sides
    .into_iter()
    .filter_map(|sd| {
      let (mut xs, mut ys, mut ws) = (Vec::new(), Vec::new(), Vec::new());
      for k in 0..z.len() {
        if side(&z[k]) == sd && u[k] >= 0.5 * umax && p.value[k] > 3.0 * p.stderr[k] && p.value[k] > 0.0 {
          xs.push(u[k]);
          ys.push(p.value[k].ln());
          ws.push(p.value[k].powi(2) / p.stderr[k].powi(2).max(f64::MIN_POSITIVE));
        }
      }
      weighted_linear_fit(&xs, &ys, &ws).map(|(slope, intercept, r2)| TailFit { side: sd, slope, intercept, r2, points: xs.len() })
    })
    .collect()
}

/// Density of `X_t^{x,δ_x}` on `z_grid`, optionally with `∂_z p` and `∂_x p`
/// (one dimension only). Samples are shared across the grid.
pub fn estimate_density(problem: &Problem, z_grid: &[Mat], with_dz: bool, with_dx: bool, cfg: &McConfig) -> Result<DensityEstimate> {
  if z_grid.is_empty() {
    return Err(Error::DegenerateGrid);
  }
  let nn = problem.dim();
  if z_grid.iter().any(|z| z.len() != nn) {
    return Err(Error::Dimension("z grid points must live in the state space".into()));
  }
  let order = nn + usize::from(with_dz || with_dx);
  if order > MAX_ORDER {
    return Err(Error::OrderExceeded { requested: order, cap: MAX_ORDER });
  }
  let coords: Vec<usize> = (0..nn).collect();
  let base = WeightExpr::nested(&coords, WeightExpr::One, WeightExpr::i2);
  let mut exprs = vec![(base, problem.t.powf(-(nn as f64) / 2.0))];
  if with_dz {
    exprs.push((WeightExpr::i2(0, WeightExpr::i2(0, WeightExpr::One)), -1.0 / problem.t));
  }
  if with_dx {
    exprs.push((WeightExpr::i2(0, WeightExpr::j(0, WeightExpr::One)), 1.0 / problem.t));
  }
  let n = problem.steps()?;
  let model = problem.model.as_ref();
  let nz = z_grid.len();
  let ne = exprs.len();
  let vs = [VPoint { v: problem.x, stream: 0 }];
  let stats = run(
    cfg,
    nz * ne + 1,
    |seed| FixedPointContext::new(problem, seed, n, false),
    |ctx, s| {
      let inc = problem.sample_increments(cfg.seed, streams::SAMPLE, s, n);
      let aux = aux_increments(problem, cfg.seed, streams::AUX, &vs, s, n);
      let wc = WeightContext {
        setup: ctx.centre.setup(model)?,
        x0: problem.x,
        increments: &inc,
        aux_increments: &aux,
        fixed_x: Some(problem.x),
        shifts: &[],
      };
      let c = wc.build()?;
      let xt = *c.terminal();
      let ws = exprs.iter().map(|(e, _)| wc.evaluate_on(e, &c).map(|r| r.value)).collect::<Result<Vec<_>>>()?;
      let mut values = vec![0.0; nz * ne + 1];
      for (k, z) in z_grid.iter().enumerate() {
        // Below x the factor 1_{X_i > z_i} is replaced by −1_{X_i ≤ z_i}; the
        // difference does not depend on X_i, so its weight has mean zero.
        let mut ind = 1.0;
        for i in 0..nn {
          ind *= match (z[i] < problem.x[i], xt[i] > z[i]) {
            (false, true) => 1.0,
            (true, false) => -1.0,
            _ => 0.0,
          };
        }
        if ind != 0.0 {
          for (e, w) in ws.iter().enumerate() {
            values[e * nz + k] = ind * *w;
          }
        }
      }
      values[nz * ne] = ws[0];
      Ok(SampleOut { values, condition: c.condition })
    },
  )?;
  let grid = |e: usize| {
    let scale = exprs[e].1;
    GridValues {
      value: (0..nz).map(|k| scale * stats.stats[e * nz + k].mean).collect(),
      stderr: (0..nz).map(|k| scale.abs() * stats.stderr(e * nz + k)).collect(),
    }
  };
  let p = grid(0);
  let mut next = 1;
  let mut take = |on: bool| {
    on.then(|| {
      next += 1;
      grid(next - 1)
    })
  };
  let dp_dz = take(with_dz);
  let dp_dx = take(with_dx);
  let tails = fit_tail(z_grid, &problem.x, problem.t, &p);
  Ok(DensityEstimate {
    z: z_grid.to_vec(),
    p,
    dp_dz,
    dp_dx,
    tails,
    n_samples: stats.accepted(),
    seed: cfg.seed,
    t: problem.t,
    x: problem.x,
    diagnostics: stats.diagnostics(Some(nz * ne)),
  })
}

/// `count` equally spaced scalar points on `[lo, hi]`.
pub fn scalar_grid(lo: f64, hi: f64, count: usize) -> Result<Vec<Mat>> {
  if count == 0 || !(lo.is_finite() && hi.is_finite()) || (count > 1 && hi <= lo) {
    return Err(Error::DegenerateGrid);
  }
  if count == 1 {
    return Ok(vec![Mat::scalar(lo)]);
  }
  let step = (hi - lo) / (count - 1) as f64;
  Ok((0..count).map(|k| Mat::scalar(if k + 1 == count { hi } else { lo + k as f64 * step })).collect())
}
