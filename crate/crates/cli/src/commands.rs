//! One function per subcommand. Each renders its files in memory; nothing is
//! written until the whole command has succeeded.

use mckean::estimators::compare::{compare_fd, FdRow, FdTarget};
use mckean::estimators::density::{estimate_density, scalar_grid, DensityEstimate};
use mckean::estimators::pde::{pde_residual, PdeResidual};
use mckean::estimators::{estimate_dmu, estimate_dx, estimate_dx_fixed_point, estimate_expectation, EstimatorResult};
use mckean::measures::wasserstein2_1d;
use mckean::Mat;

use crate::config::RunConfig;
use crate::CliError;

/// A named CSV body, without the leading hash line.
pub struct Table {
  pub name: &'static str,
  pub body: String,
}

fn table(name: &'static str, header: &str, rows: impl IntoIterator<Item = String>) -> Table {
  let mut body = format!("{header}\n");
  for r in rows {
    body.push_str(&r);
    body.push('\n');
  }
  Table { name, body }
}

fn missing(block: &str) -> CliError {
  CliError::Config(format!("config has no [{block}] table"))
}

fn join(v: &[f64]) -> String {
  v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")
}

pub fn simulate(cfg: &RunConfig, seed: u64) -> Result<Vec<Table>, CliError> {
  let problem = cfg.problem()?;
  let paths = problem.simulate_law(seed)?;
  let mut csv = Vec::new();
  paths.write_csv(&mut csv).map_err(CliError::Io)?;
  let paths_body = String::from_utf8(csv).expect("csv output is utf-8");
  let grid = paths.grid();
  let mut rows = Vec::with_capacity(grid.n_steps() + 1);
  for k in 0..=grid.n_steps() {
    let cloud = paths.cloud(k);
    let mean = cloud.mean();
    let variance: Vec<f64> = (0..cloud.dim())
      .map(|c| cloud.iter().map(|p| (p[c] - mean[c]).powi(2)).sum::<f64>() / cloud.len() as f64)
      .collect();
    // W₂ is only defined here for scalar clouds.
    let w2 = if k > 0 && cloud.dim() == 1 { wasserstein2_1d(paths.cloud(k - 1), cloud)?.to_string() } else { String::new() };
    rows.push(format!("{k},{},{},{},{},{w2}", grid.node(k), join(mean.as_slice()), join(&variance), cloud.second_moment()));
  }
  Ok(vec![
    Table { name: "paths.csv", body: paths_body },
    table("summary.csv", "step,t,mean,variance,second_moment,w2_prev", rows),
  ])
}

pub fn estimate(cfg: &RunConfig, seed: u64) -> Result<Vec<Table>, CliError> {
  let block = cfg.estimate.as_ref().ok_or_else(|| missing("estimate"))?;
  let problem = cfg.problem()?;
  let payoff = block.payoff.build()?;
  let mc = cfg.mc(seed);
  if block.quantities.is_empty() {
    return Err(CliError::Config("estimate.quantities is empty".into()));
  }
  let mut results: Vec<EstimatorResult> = Vec::new();
  for q in &block.quantities {
    match q.as_str() {
      "expectation" => results.push(estimate_expectation(&problem, &payoff, &mc)?),
      "dx" => results.push(estimate_dx(&problem, &block.alpha, &payoff, &mc)?),
      "fixed_point_dx" => results.push(estimate_dx_fixed_point(&problem, &block.alpha, &payoff, &mc)?),
      "dmu" => {
        if block.v.is_empty() {
          return Err(CliError::Config("dmu needs at least one point in estimate.v".into()));
        }
        let vs: Vec<Mat> = block.v.iter().map(|v| Mat::col(v)).collect();
        results.extend(estimate_dmu(&problem, block.dmu_coordinate, &payoff, &vs, &mc)?);
      }
      other => return Err(CliError::Config(format!("unknown quantity '{other}'"))),
    }
  }
  Ok(vec![table("estimates.csv", EstimatorResult::CSV_HEADER, results.iter().map(EstimatorResult::csv_row))])
}

/// Tensor product of the scalar range over every coordinate.
fn z_grid(lo: f64, hi: f64, count: usize, dim: usize) -> Result<Vec<Mat>, CliError> {
  let axis: Vec<f64> = scalar_grid(lo, hi, count)?.iter().map(|m| m[0]).collect();
  let mut points: Vec<Vec<f64>> = vec![Vec::new()];
  for _ in 0..dim {
    points = points.into_iter().flat_map(|p| axis.iter().map(move |&a| [p.as_slice(), &[a]].concat())).collect();
  }
  Ok(points.iter().map(|p| Mat::col(p)).collect())
}

pub fn density(cfg: &RunConfig, seed: u64) -> Result<Vec<Table>, CliError> {
  let block = cfg.density.as_ref().ok_or_else(|| missing("density"))?;
  let problem = cfg.problem()?;
  let grid = z_grid(block.z.lo, block.z.hi, block.z.count, problem.dim())?;
  let est = estimate_density(&problem, &grid, block.dz, block.dx, &cfg.mc(seed))?;
  let tails = est
    .tails
    .iter()
    .map(|f| format!("{},{},{},{},{}", f.side, f.slope, f.intercept, f.r2, f.points));
  Ok(vec![
    table("density.csv", DensityEstimate::CSV_HEADER, est.csv_rows()),
    table("tail_fit.csv", "side,slope,intercept,r2,points", tails),
  ])
}

pub fn pde_check(cfg: &RunConfig, seed: u64) -> Result<Vec<Table>, CliError> {
  let block = cfg.pde_check.as_ref().ok_or_else(|| missing("pde_check"))?;
  let problem = cfg.problem()?;
  let payoff = block.payoff.build()?;
  let r = pde_residual(&problem, &payoff, block.h_t, block.v_points, &cfg.mc(seed))?;
  Ok(vec![table("pde_check.csv", PdeResidual::CSV_HEADER, [r.csv_row()])])
}

pub fn compare(cfg: &RunConfig, seed: u64) -> Result<Vec<Table>, CliError> {
  let block = cfg.compare.as_ref().ok_or_else(|| missing("compare"))?;
  let problem = cfg.problem()?;
  let payoff = block.payoff.build()?;
  let target = match block.target.as_str() {
    "dx" => FdTarget::Dx(block.coordinate),
    "measure_shift" => FdTarget::MeasureShift(block.coordinate),
    other => return Err(CliError::Config(format!("unknown compare target '{other}'"))),
  };
  let rows = compare_fd(&problem, &payoff, target, &block.bumps, block.common_random_numbers, &cfg.mc(seed))?;
  Ok(vec![table("compare.csv", FdRow::CSV_HEADER, rows.iter().map(FdRow::csv_row))])
}
