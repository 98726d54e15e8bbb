//! `U(t, x, [θ]) = 𝔼[g(X_t^{x,[θ]}, [X_t^θ])]`, its derivatives in `x` and in the
//! measure, and the residual of the backward equation it solves.
//!
//! Route A differentiates a smooth `g` through the Lions tangents. Route B moves
//! every derivative of `g` onto weights using the companion `G` of the `(IC)`
//! classes; it is implemented in one dimension.

use crate::coefficients::{sigma, CoefficientModel};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::simulator::{simulate_decoupled_from, streams, InitialLaw};
use crate::tangents::{Carrier, CarrierSetup};
use crate::weights::{WeightContext, WeightExpr};

use super::{aux_increments, run, EstimatorResult, LawContext, McConfig, Method, Payoff, PayoffClass, Problem, SampleOut, Terminal, VPoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
  /// Tangent formula for smooth `g` with `∂g` and `∂_μg`.
  A,
  /// Weight formulas for `g` of class `(IC)ₓ` or `(IC)_v`.
  B,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UEstimate {
  pub u: EstimatorResult,
  /// `∂_{x_i}U`.
  pub dx: Vec<EstimatorResult>,
  /// `∂_{x_i}∂_{x_j}U` at `[i·N + j]`.
  pub dxx: Vec<EstimatorResult>,
  /// `(∂_μU)_i(v)` at `[v][i]`.
  pub dmu: Vec<Vec<EstimatorResult>>,
  /// `∂_{v_j}(∂_μU)_i(v)` at `[v][i·N + j]`; empty unless requested.
  pub dvdmu: Vec<Vec<EstimatorResult>>,
}

/// `v` points with, optionally, `v ± ε e_j` for difference quotients in `v`.
pub(crate) struct VLayout {
  pub points: Vec<VPoint>,
  pub stride: usize,
  pub eps: Vec<f64>,
}

pub(crate) fn v_eps(v: &Mat) -> f64 {
  1e-3 * (1.0 + v.max_abs())
}

impl VLayout {
  pub fn new(vs: &[Mat], shifts: bool) -> Self {
    let mut points = Vec::new();
    let mut eps = Vec::new();
    let n = vs.first().map_or(0, |v| v.len());
    let stride = if shifts { 1 + 2 * n } else { 1 };
    for (q, v) in vs.iter().enumerate() {
      let stream = q as u64;
      points.push(VPoint { v: *v, stream });
      let e = v_eps(v);
      eps.push(e);
      if shifts {
        for j in 0..n {
          let mut p = *v;
          p[j] += e;
          let mut m = *v;
          m[j] -= e;
          points.push(VPoint { v: p, stream });
          points.push(VPoint { v: m, stream });
        }
      }
    }
    VLayout { points, stride, eps }
  }

  pub fn centre(&self, q: usize) -> usize {
    q * self.stride
  }

  /// Indices of `v_q + ε e_j` and `v_q − ε e_j`.
  pub fn shifted(&self, q: usize, j: usize) -> (usize, usize) {
    let b = q * self.stride + 1 + 2 * j;
    (b, b + 1)
  }
}

/// Per-sample route B `(IC)ₓ` integrand, scalar state:
/// `t^{-1/2}[g 𝓘¹(v) + G(X, μ, Ỹ^v) I²(1) J^Ỹ + (1/M)Σ_m G(X, μ, X^m) I²(1) L^m_t(v)]`.
fn route_b_icx(ctx: &LawContext, wc: &WeightContext<'_>, c: &Carrier, payoff: &Payoff, vi: usize, i2: f64) -> Result<f64> {
  let term = ctx.terminal();
  let n = ctx.n;
  let x = c.terminal();
  let v = ctx.lions[vi].v();
  let cal = wc.evaluate_on(&WeightExpr::cal_i1(0, *v, WeightExpr::One), c)?.value;
  let g = payoff.value(x, &term);
  let comp = |y: &Mat| payoff.companion(x, &term, y).ok_or_else(|| Error::ClassMismatch("payoff has no companion".into()));
  let aux = &c.aux[vi];
  let mut out = g * cal + comp(&aux.states[n])? * i2 * aux.jacobians[n][0];
  let cloud = term.cloud;
  let sys = &ctx.lions[vi];
  let mut avg = 0.0;
  for m in 0..cloud.len() {
    avg += comp(&cloud.point(m))? * sys.particle(n, m)[0];
  }
  out += i2 * avg / cloud.len() as f64;
  Ok(out / c.t().sqrt())
}

/// Everything a route B `(IC)_v` sample needs besides the main carrier.
struct TildeSample {
  /// `X̃^θ̃` and its context.
  tilde: Carrier,
  tilde_inc: Vec<Mat>,
  tilde_aux: Vec<Vec<Mat>>,
  theta: Mat,
}

fn icv_terms(
  ctx: &LawContext,
  model: &dyn CoefficientModel,
  wc: &WeightContext<'_>,
  c: &Carrier,
  ts: &TildeSample,
  payoff: &Payoff,
  vi: usize,
) -> Result<(f64, f64, f64, f64)> {
  let term = ctx.terminal();
  let n = ctx.n;
  let x = c.terminal();
  let v = *ctx.lions[vi].v();
  let comp = |y: &Mat| payoff.companion(x, &term, y).ok_or_else(|| Error::ClassMismatch("payoff has no companion".into()));
  let g = payoff.value(x, &term);
  let cal = wc.evaluate_on(&WeightExpr::cal_i1(0, v, WeightExpr::One), c)?.value;
  // Ĩ¹(1)(t, v) on the auxiliary copy from v.
  let bare = CarrierSetup::new(model, &ctx.law, &[], n)?;
  let from_v = bare.build(&v, &c.aux[vi].increments, &[])?;
  let tw = WeightContext { setup: bare, x0: v, increments: &c.aux[vi].increments, aux_increments: &[], fixed_x: None, shifts: &[] };
  let tilde_i1 = tw.evaluate_on(&WeightExpr::i1(0, WeightExpr::One), &from_v)?.value;
  let twc = WeightContext { x0: ts.theta, increments: &ts.tilde_inc, aux_increments: &ts.tilde_aux, ..*wc };
  let tilde_cal = twc.evaluate_on(&WeightExpr::cal_i1(0, v, WeightExpr::One), &ts.tilde)?.value;
  let gy = comp(&c.aux[vi].states[n])?;
  let gt = comp(ts.tilde.terminal())?;
  Ok((g * cal, gy * tilde_i1, gt * tilde_cal, gy))
}

/// `U`, `∂ₓU`, `∂²ₓU`, `∂_μU(v)` and optionally `∂_v∂_μU(v)` on shared samples.
pub fn estimate_u(problem: &Problem, payoff: &Payoff, vs: &[Mat], route: Route, with_dvdmu: bool, cfg: &McConfig) -> Result<UEstimate> {
  let nn = problem.dim();
  let model = problem.model.as_ref();
  if vs.iter().any(|v| v.len() != nn) {
    return Err(Error::Dimension("v must live in the state space".into()));
  }
  let class = payoff.class();
  if route == Route::B {
    if nn != 1 {
      return Err(Error::Unsupported("route B is implemented for scalar states".into()));
    }
    match class {
      PayoffClass::IcX if with_dvdmu => {
        return Err(Error::ClassMismatch("∂_v∂_μU by weights needs a payoff of class (IC)_v".into()))
      }
      PayoffClass::IcX => {}
      PayoffClass::IcV if !model.flags().bounded_coefficients => {
        return Err(Error::ClassMismatch("class (IC)_v weights need bounded coefficients".into()))
      }
      PayoffClass::IcV => {}
      PayoffClass::Plain => return Err(Error::ClassMismatch("route B needs a payoff of class (IC)ₓ or (IC)_v".into())),
    }
  }
  let n = problem.steps()?;
  let t = problem.t;
  let layout = VLayout::new(vs, with_dvdmu);
  let nv = vs.len();
  let c_dx = 1;
  let c_dxx = c_dx + nn;
  let c_dmu = c_dxx + nn * nn;
  let c_dvdmu = c_dmu + nv * nn;
  let width = c_dvdmu + if with_dvdmu { nv * nn * nn } else { 0 };
  let icv = route == Route::B && class == PayoffClass::IcV;
  let stats = run(
    cfg,
    width,
    |seed| LawContext::new(problem, problem.simulate_law(seed)?, seed, &layout.points, n),
    |ctx, s| {
      let inc = problem.sample_increments(cfg.seed, streams::SAMPLE, s, n);
      let aux = aux_increments(problem, cfg.seed, streams::AUX, &layout.points, s, n);
      let wc = WeightContext { setup: ctx.setup(model)?, x0: problem.x, increments: &inc, aux_increments: &aux, fixed_x: None, shifts: &[] };
      let c = wc.build()?;
      let term = ctx.terminal();
      let g = payoff.value(c.terminal(), &term);
      let mut out = vec![0.0; width];
      out[0] = g;
      for i in 0..nn {
        let w = wc.evaluate_on(&WeightExpr::i3(i, WeightExpr::One), &c)?.value;
        out[c_dx + i] = g * w;
        for j in 0..nn {
          let w2 = wc.evaluate_on(&WeightExpr::i3(j, WeightExpr::i3(i, WeightExpr::One)), &c)?.value;
          out[c_dxx + i * nn + j] = g * w2;
        }
      }
      let tilde = if icv {
        let theta = ctx.law.cloud(0).point(s as usize % ctx.law.n_particles());
        let tilde_inc = problem.sample_increments(cfg.seed, streams::TILDE, s, n);
        let tilde_aux = aux_increments(problem, cfg.seed, streams::TILDE_AUX, &layout.points, s, n);
        let tilde = wc.setup.build(&theta, &tilde_inc, &tilde_aux)?;
        Some(TildeSample { tilde, tilde_inc, tilde_aux, theta })
      } else {
        None
      };
      let i2 = if route == Route::B && class == PayoffClass::IcX {
        wc.evaluate_on(&WeightExpr::i2(0, WeightExpr::One), &c)?.value
      } else {
        0.0
      };
      for q in 0..nv {
        let vi = layout.centre(q);
        let local = LocalLions { ctx, offset: 0 };
        match (route, &tilde) {
          (Route::A, _) => {
            let row = local.row(&c, payoff, vi)?;
            for i in 0..nn {
              out[c_dmu + q * nn + i] = row[i];
            }
            if with_dvdmu {
              for j in 0..nn {
                let (p, m) = layout.shifted(q, j);
                let d = (local.row(&c, payoff, p)? - local.row(&c, payoff, m)?).scale(0.5 / layout.eps[q]);
                for i in 0..nn {
                  out[c_dvdmu + q * nn * nn + i * nn + j] = d[i];
                }
              }
            }
          }
          (Route::B, None) => out[c_dmu + q] = route_b_icx(ctx, &wc, &c, payoff, vi, i2)?,
          (Route::B, Some(ts)) => {
            let (a, b, cc, gy) = icv_terms(ctx, model, &wc, &c, ts, payoff, vi)?;
            out[c_dmu + q] = (a + b + cc) / t.sqrt();
            if with_dvdmu {
              let (p, m) = layout.shifted(q, 0);
              let (ap, bp, cp, _) = icv_terms(ctx, model, &wc, &c, ts, payoff, p)?;
              let (am, bm, cm, _) = icv_terms(ctx, model, &wc, &c, ts, payoff, m)?;
              let dv = ((ap - am) + (bp - bm) + (cp - cm)) * 0.5 / layout.eps[q];
              // t^{-1/2} G(X, μ, Ỹ^v) Ĩ¹(Ĩ¹(1))(t, v).
              let v = vs[q];
              let bare = CarrierSetup::new(model, &ctx.law, &[], n)?;
              let from_v = bare.build(&v, &c.aux[vi].increments, &[])?;
              let tw = WeightContext { setup: bare, x0: v, increments: &c.aux[vi].increments, aux_increments: &[], fixed_x: None, shifts: &[] };
              let nested = tw.evaluate_on(&WeightExpr::i1(0, WeightExpr::i1(0, WeightExpr::One)), &from_v)?.value;
              out[c_dvdmu + q] = (dv + gy * nested / t.sqrt()) / t.sqrt();
            }
          }
        }
      }
      Ok(SampleOut { values: out, condition: c.condition })
    },
  )?;
  let tag = match route {
    Route::A => "A",
    Route::B => "B",
  };
  let with_v = |mut r: EstimatorResult, v: &Mat| {
    r.v = Some(v.as_slice().to_vec());
    r
  };
  let u = stats.result(problem, "U", 0, 1.0, Method::MonteCarlo, None);
  let dx = (0..nn).map(|i| stats.result(problem, "dxU", c_dx + i, t.powf(-0.5), Method::Weight, None)).collect();
  let dxx = (0..nn * nn).map(|k| stats.result(problem, "dxxU", c_dxx + k, 1.0 / t, Method::Weight, None)).collect();
  let method = if route == Route::A { Method::MonteCarlo } else { Method::Weight };
  let dmu = vs
    .iter()
    .enumerate()
    .map(|(q, v)| (0..nn).map(|i| with_v(stats.result(problem, &format!("dmuU_{tag}"), c_dmu + q * nn + i, 1.0, method, None), v)).collect())
    .collect();
  let dvdmu = if with_dvdmu {
    vs.iter()
      .enumerate()
      .map(|(q, v)| {
        (0..nn * nn)
          .map(|k| with_v(stats.result(problem, &format!("dvdmuU_{tag}"), c_dvdmu + q * nn * nn + k, 1.0, method, None), v))
          .collect()
      })
      .collect()
  } else {
    Vec::new()
  };
  Ok(UEstimate { u, dx, dxx, dmu, dvdmu })
}

/// Decomposition of `(∂_t − L)U` at `(t, x, [θ])`.
#[derive(Clone, Debug, PartialEq)]
pub struct PdeResidual {
  /// `∂_tU`, value and standard error.
  pub dt: (f64, f64),
  /// `V₀·∂ₓU + ½ tr(σσᵀ ∂²ₓU)`.
  pub x_terms: (f64, f64),
  /// `𝔼_θ[V₀(θ)·∂_μU(θ) + ½ tr(σσᵀ(θ) ∂_v∂_μU(θ))]`.
  pub mu_terms: (f64, f64),
  pub residual: EstimatorResult,
  /// Time step of the difference quotient in `t`.
  pub h_t: f64,
  /// Number of initial particles used as `v` points.
  pub v_points: usize,
}

impl PdeResidual {
  pub const CSV_HEADER: &'static str = "t,x,h_t,v_points,dt,dt_stderr,x_terms,x_terms_stderr,mu_terms,mu_terms_stderr,residual,stderr,n_samples,seed";

  pub fn csv_row(&self) -> String {
    let r = &self.residual;
    let x = r.x.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";");
    format!(
      "{},{x},{},{},{},{},{},{},{},{},{},{},{},{}",
      r.t, self.h_t, self.v_points, self.dt.0, self.dt.1, self.x_terms.0, self.x_terms.1, self.mu_terms.0, self.mu_terms.1, r.value, r.stderr, r.n_samples, r.seed
    )
  }
}

/// Steps of the `t` difference quotient: `h_t/h` rounded, at least one.
pub fn time_step_multiple(h: f64, h_t: Option<f64>) -> usize {
  let target = h_t.unwrap_or_else(|| h.sqrt());
  ((target / h).round() as usize).max(1)
}

/// Residual of the backward equation for smooth `g`, assembled sample by sample:
/// sample `s` uses `v = θ^{s mod K}` with `K = min(v_points, M)` initial particles.
pub fn pde_residual(problem: &Problem, payoff: &Payoff, h_t: Option<f64>, v_points: usize, cfg: &McConfig) -> Result<PdeResidual> {
  let nn = problem.dim();
  let model = problem.model.as_ref();
  let n = problem.steps()?;
  let h = problem.h();
  let k = time_step_multiple(h, h_t);
  if k >= n || n + k > problem.grid.n_steps() {
    return Err(Error::InvalidArgument(format!(
      "t ± h_t must stay inside (0, T]: t={}, h_t={}, T={}",
      problem.t,
      k as f64 * h,
      problem.grid.horizon()
    )));
  }
  if v_points == 0 {
    return Err(Error::InvalidArgument("need at least one v point".into()));
  }
  let ht = k as f64 * h;
  let t = problem.t;
  let kv = v_points.min(problem.particles);
  struct Ctx {
    centre: LawContext,
    layout: VLayout,
    mean_plus: f64,
    mean_minus: f64,
  }
  let stats = run(
    cfg,
    4,
    |seed| {
      let law = problem.simulate_law(seed)?;
      let vs: Vec<Mat> = (0..kv).map(|q| law.cloud(0).point(q)).collect();
      let layout = VLayout::new(&vs, true);
      let mean_plus = law.cloud(n + k).mean()[0];
      let mean_minus = law.cloud(n - k).mean()[0];
      let centre = LawContext::new(problem, law, seed, &layout.points, n)?;
      Ok(Ctx { centre, layout, mean_plus, mean_minus })
    },
    |ctx, s| {
      let law = &ctx.centre.law;
      let inc = problem.sample_increments(cfg.seed, streams::SAMPLE, s, n + k);
      // ∂_tU with common increments.
      let path = simulate_decoupled_from(model, &problem.x, law, 0, &inc)?;
      let gp = payoff.value(&path.states[n + k], &Terminal { cloud: law.cloud(n + k), mean0: ctx.mean_plus });
      let gm = payoff.value(&path.states[n - k], &Terminal { cloud: law.cloud(n - k), mean0: ctx.mean_minus });
      let dt = (gp - gm) / (2.0 * ht);
      // Only the Lions systems of this sample's v are needed.
      let q = s as usize % kv;
      let lo = ctx.layout.centre(q);
      let hi = lo + ctx.layout.stride;
      let lions = &ctx.centre.lions[lo..hi];
      let setup = CarrierSetup::new(model, law, lions, n)?;
      let pts = &ctx.layout.points[lo..hi];
      let aux = aux_increments(problem, cfg.seed, streams::AUX, pts, s, n);
      let wc = WeightContext { setup, x0: problem.x, increments: &inc[..n], aux_increments: &aux, fixed_x: None, shifts: &[] };
      let c = wc.build()?;
      let g = payoff.value(c.terminal(), &ctx.centre.terminal());
      let law0 = law.law(0);
      let b0 = model.field(0, &problem.x, law0);
      let sx = sigma(model, &problem.x, law0);
      let ax = sx * sx.transpose();
      let mut xt = 0.0;
      for i in 0..nn {
        xt += b0[i] * g * wc.evaluate_on(&WeightExpr::i3(i, WeightExpr::One), &c)?.value / t.sqrt();
        for j in 0..nn {
          if ax[(i, j)] != 0.0 {
            let w = wc.evaluate_on(&WeightExpr::i3(j, WeightExpr::i3(i, WeightExpr::One)), &c)?.value;
            xt += 0.5 * ax[(i, j)] * g * w / t;
          }
        }
      }
      // Measure terms at v_q, with the local ctx re-indexed to the slice.
      let local = LocalLions { ctx: &ctx.centre, offset: lo };
      let v = pts[0].v;
      let bv = model.field(0, &v, law0);
      let sv = sigma(model, &v, law0);
      let av = sv * sv.transpose();
      let row = local.row(&c, payoff, 0)?;
      let mut mt = bv.dot(&row);
      for j in 0..nn {
        let (p, m) = (1 + 2 * j, 2 + 2 * j);
        let dr = (local.row(&c, payoff, p)? - local.row(&c, payoff, m)?).scale(0.5 / ctx.layout.eps[q]);
        for i in 0..nn {
          mt += 0.5 * av[(i, j)] * dr[i];
        }
      }
      Ok(SampleOut { values: vec![dt - xt - mt, dt, xt, mt], condition: c.condition })
    },
  )?;
  let mut residual = stats.result(problem, "pde_residual", 0, 1.0, Method::Weight, None);
  residual.v = None;
  let pair = |c: usize| (stats.stats[c].mean, stats.stderr(c));
  Ok(PdeResidual { dt: pair(1), x_terms: pair(2), mu_terms: pair(3), residual, h_t: ht, v_points: kv })
}

/// Route A integrand of `∂_μU(v)` for a carrier built on the Lions systems
/// starting at `offset`:
/// `∂g·L_t(v) + ∂_μg(X, μ, Ỹ^v)·J^Ỹ + (1/M)Σ_m ∂_μg(X, μ, X^m)·L^m_t(v)`, as `N×1`.
struct LocalLions<'a> {
  ctx: &'a LawContext,
  offset: usize,
}

impl LocalLions<'_> {
  fn row(&self, c: &Carrier, payoff: &Payoff, local: usize) -> Result<Mat> {
    let term = self.ctx.terminal();
    let n = self.ctx.n;
    let x = c.terminal();
    let missing = || Error::ClassMismatch("route A needs a payoff with ∂g and ∂_μg".into());
    let grad = payoff.grad(x, &term).ok_or_else(missing)?;
    let mut row = c.lions[local][n].transpose() * grad;
    let aux = &c.aux[local];
    row += aux.jacobians[n].transpose() * payoff.dmu(x, &term, &aux.states[n]).ok_or_else(missing)?;
    let sys = &self.ctx.lions[self.offset + local];
    let cloud = term.cloud;
    let mut avg = Mat::zeros(x.len(), 1);
    for m in 0..cloud.len() {
      avg += sys.particle(n, m).transpose() * payoff.dmu(x, &term, &cloud.point(m)).ok_or_else(missing)?;
    }
    row += avg.scale(1.0 / cloud.len() as f64);
    Ok(row)
  }
}

/// `∂_μU` averaged over `v ~ θ`, sample `s` using `v = θ^{s mod K}`; the
/// derivative of `U` along a translation of the initial law.
pub fn estimate_dmu_averaged(problem: &Problem, payoff: &Payoff, i: usize, v_points: usize, cfg: &McConfig) -> Result<EstimatorResult> {
  let model = problem.model.as_ref();
  let n = problem.steps()?;
  let kv = v_points.clamp(1, problem.particles);
  let stats = run(
    cfg,
    1,
    |seed| {
      let law = problem.simulate_law(seed)?;
      let vs: Vec<Mat> = (0..kv).map(|q| law.cloud(0).point(q)).collect();
      LawContext::new(problem, law, seed, &super::vpoints(&vs), n)
    },
    |ctx, s| {
      let q = s as usize % kv;
      let lions = &ctx.lions[q..q + 1];
      let setup = CarrierSetup::new(model, &ctx.law, lions, n)?;
      let inc = problem.sample_increments(cfg.seed, streams::SAMPLE, s, n);
      let pts = [VPoint { v: *lions[0].v(), stream: q as u64 }];
      let aux = aux_increments(problem, cfg.seed, streams::AUX, &pts, s, n);
      let wc = WeightContext { setup, x0: problem.x, increments: &inc, aux_increments: &aux, fixed_x: None, shifts: &[] };
      let c = wc.build()?;
      let f = payoff.value(c.terminal(), &ctx.terminal());
      let w = wc.evaluate_on(&WeightExpr::cal_i3(i, pts[0].v, WeightExpr::One), &c)?.value;
      Ok(SampleOut { values: vec![f * w / problem.t.sqrt()], condition: c.condition })
    },
  )?;
  Ok(stats.result(problem, "dmu_averaged", 0, 1.0, Method::Weight, None))
}

/// Initial law translated by `c`.
pub fn translated_initial(initial: &InitialLaw, c: &Mat, m: usize, seed: u64) -> InitialLaw {
  match initial {
    InitialLaw::Dirac(x) => InitialLaw::Dirac(*x + *c),
    InitialLaw::Gaussian { mean, std } => InitialLaw::Gaussian { mean: *mean + *c, std: *std },
    InitialLaw::Cloud(_) => InitialLaw::Cloud(initial.sample(m, seed).translated(c)),
  }
}
