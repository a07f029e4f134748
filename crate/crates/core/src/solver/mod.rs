//! Dirichlet solver for `ω_ε c(x) F̄(D²u) = f`, the ε-regularization
//! ladder, extremal-class membership and the kink nonuniqueness demo.
//!
//! The scheme at an interior node reads `F̄_h(u) = q` where `q` is the
//! source divided by the weight. Two source rules are offered:
//!
//! * [`SourceRule::HatAverage`] (default) replaces `1/ω(x)` by its average
//!   against the hat function of width `h` along `x_d`. This is the rule
//!   that makes the scheme exact on profiles `|x_d|^{2−a}` and stays finite
//!   at nodes on the interface whenever `a < 1`.
//! * [`SourceRule::Pointwise`] divides by the nodal weight.
//!
//! Residuals are reported in weighted form `ω̃ c (F̄_h u − q)` where
//! `ω̃` is the weight implied by the rule; for the pointwise rule this is
//! exactly `ω c F̄_h(u) − f`.

mod checks;
pub mod linear;

pub use checks::{
    extremal_membership, nonuniqueness_demo, ClassSide, MembershipReport, NonuniquenessReport,
    Violation,
};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lattice::{Field, Grid, WeightSpec};
use crate::operators::{DiscreteOperator, OperatorKind, OperatorSpec, StencilSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SourceRule {
    #[default]
    HatAverage,
    Pointwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Policy iteration: freeze the active linear branch, solve, repeat.
    #[default]
    Howard,
    /// Damped nodewise relaxation `u ← u + τ (F̄_h u − q) / D`.
    Relaxation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SweepOrder {
    #[default]
    RedBlack,
    Lexicographic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemeParams {
    pub method: Method,
    pub tau: f64,
    pub max_iters: usize,
    /// Defaults to `1e-8 (1 + ‖f‖∞)`.
    pub tol: Option<f64>,
    pub sweep: SweepOrder,
    pub source_rule: SourceRule,
    pub wide_stencil: bool,
}

impl Default for SchemeParams {
    fn default() -> Self {
        SchemeParams {
            method: Method::Howard,
            tau: 1.0,
            max_iters: 100_000,
            tol: None,
            sweep: SweepOrder::RedBlack,
            source_rule: SourceRule::HatAverage,
            wide_stencil: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DirichletProblem {
    pub grid: Grid,
    pub op: OperatorSpec,
    pub weight: WeightSpec,
    pub f: Field,
    /// Boundary data; only boundary nodes are read.
    pub g: Field,
    pub params: SchemeParams,
    pub initial: Option<Field>,
}

impl DirichletProblem {
    pub fn new(op: OperatorSpec, weight: WeightSpec, f: Field, g: Field) -> Result<Self> {
        if !f.same_grid(&g) {
            return Err(invalid("source and boundary data live on different grids"));
        }
        if op.dim() != f.grid().dim() {
            return Err(invalid("operator and grid dimensions differ"));
        }
        Ok(DirichletProblem {
            grid: f.grid().clone(),
            op,
            weight,
            f,
            g,
            params: SchemeParams::default(),
            initial: None,
        })
    }

    pub fn with_params(mut self, params: SchemeParams) -> Self {
        self.params = params;
        self
    }

    pub fn with_initial(mut self, u0: Field) -> Self {
        self.initial = Some(u0);
        self
    }

    pub fn stencil(&self) -> StencilSet {
        if self.params.wide_stencil && self.grid.dim() == 2 {
            StencilSet::wide_2d()
        } else {
            StencilSet::axis(self.grid.dim())
        }
    }

    pub fn tol(&self) -> f64 {
        self.params
            .tol
            .unwrap_or_else(|| 1e-8 * (1.0 + self.f.max_abs()))
    }

    fn validate(&self) -> Result<()> {
        let p = &self.params;
        if !(p.tau > 0.0 && p.tau.is_finite()) {
            return Err(invalid(format!("damping tau must be > 0, got {}", p.tau)));
        }
        if p.tol.is_some_and(|t| !(t > 0.0)) {
            return Err(invalid("tolerance must be > 0"));
        }
        if p.max_iters == 0 {
            return Err(invalid("max_iters must be positive"));
        }
        if let Some(u0) = &self.initial {
            if !u0.same_grid(&self.f) {
                return Err(invalid("initial guess lives on a different grid"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LevelRecord {
    pub eps: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Max-norm difference to the previous level (to the initial guess on
    /// the first level).
    pub diff: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    #[serde(skip)]
    pub solution: Field,
    pub iterations: usize,
    pub residual: f64,
    pub tol: f64,
    pub converged: bool,
    pub history: Vec<LevelRecord>,
    pub ladder_converged: Option<bool>,
}

/// Per-node data of the scheme: right-hand side `q` and residual scale.
struct Rows {
    inner: Vec<usize>,
    q: Vec<f64>,
    scale: Vec<f64>,
}

fn prepare_rows(p: &DirichletProblem, w: &WeightSpec) -> Result<Rows> {
    let grid = &p.grid;
    let hd = grid.spacing(grid.dim() - 1);
    let mut inner = Vec::new();
    let mut q = Vec::new();
    let mut scale = Vec::new();
    let mut x = vec![0.0; grid.dim()];
    for i in 0..grid.len() {
        if grid.is_boundary(i) {
            continue;
        }
        grid.point_into(i, &mut x);
        let c = p.op.coefficient(&x);
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Precondition(format!(
                "operator coefficient must be positive, got {c} at node {i}"
            )));
        }
        let fi = p.f.get(i);
        let (qi, si) = match p.params.source_rule {
            SourceRule::Pointwise => {
                let om = w.eval(&x);
                if om == 0.0 {
                    if fi != 0.0 {
                        return Err(Error::InconsistentRow {
                            node: i,
                            source_value: fi,
                        });
                    }
                    return Err(Error::Precondition(format!(
                        "weight vanishes at interior node {i}; use an offset grid, eps > 0 or the hat-average source rule"
                    )));
                }
                (fi / (om * c), om * c)
            }
            SourceRule::HatAverage => {
                let m = w.inverse_hat_average(&x, hd);
                if m.is_finite() {
                    (fi * m / c, c / m)
                } else if fi == 0.0 {
                    (0.0, 0.0)
                } else {
                    return Err(Error::InconsistentRow {
                        node: i,
                        source_value: fi,
                    });
                }
            }
        };
        inner.push(i);
        q.push(qi);
        scale.push(si);
    }
    Ok(Rows { inner, q, scale })
}

fn weighted_max_residual(
    disc: &DiscreteOperator,
    grid: &Grid,
    rows: &Rows,
    u: &[f64],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (k, &i) in rows.inner.iter().enumerate() {
        let r = rows.scale[k] * (disc.apply(grid, u, i)? - rows.q[k]);
        worst = worst.max(r.abs());
    }
    Ok(worst)
}

/// Solves the Dirichlet problem with the weight exactly as given.
pub fn solve_dirichlet(p: &DirichletProblem) -> Result<SolveReport> {
    p.validate()?;
    let u0 = starting_values(p, p.initial.as_ref());
    solve_level(p, &p.weight, u0)
}

fn starting_values(p: &DirichletProblem, initial: Option<&Field>) -> Vec<f64> {
    let grid = &p.grid;
    let mut u = match initial {
        Some(f) => f.values().to_vec(),
        None => vec![0.0; grid.len()],
    };
    for (i, v) in u.iter_mut().enumerate() {
        if grid.is_boundary(i) {
            *v = p.g.get(i);
        }
    }
    u
}

fn solve_level(p: &DirichletProblem, w: &WeightSpec, mut u: Vec<f64>) -> Result<SolveReport> {
    let grid = &p.grid;
    let stencil = p.stencil();
    let disc = DiscreteOperator::new(&p.op, &stencil, grid)?;
    let rows = prepare_rows(p, w)?;
    let tol = p.tol();
    let (iterations, residual, converged) = match p.params.method {
        Method::Howard => howard(p, &disc, &rows, &mut u, tol)?,
        Method::Relaxation => relaxation(p, &disc, &rows, &mut u, tol)?,
    };
    let solution = Field::new(grid.clone(), u)?;
    Ok(SolveReport {
        solution,
        iterations,
        residual,
        tol,
        converged,
        history: vec![],
        ladder_converged: None,
    })
}

fn howard(
    p: &DirichletProblem,
    disc: &DiscreteOperator,
    rows: &Rows,
    u: &mut [f64],
    tol: f64,
) -> Result<(usize, f64, bool)> {
    let grid = &p.grid;
    let n = rows.inner.len();
    let nd = disc.num_directions();
    let mut pos = vec![usize::MAX; grid.len()];
    for (k, &i) in rows.inner.iter().enumerate() {
        pos[i] = k;
    }
    let symmetric = p.op.kind() == OperatorKind::Trace;
    let lin_cap = 50 * n + 1000;
    let mut coefs = vec![0.0; nd];
    let mut residual = f64::INFINITY;
    let mut x = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut last_policy: Option<Vec<f64>> = None;
    for it in 0..p.params.max_iters {
        let mut a = linear::Csr::with_capacity(n, 2 * nd * n);
        let mut policy = Vec::with_capacity(n * nd);
        residual = 0.0;
        for (k, &i) in rows.inner.iter().enumerate() {
            let val = disc.linearize(grid, u, i, &mut coefs)?;
            residual = residual.max((rows.scale[k] * (val - rows.q[k])).abs());
            policy.extend_from_slice(&coefs);
            let mut diag = 0.0;
            let mut rhs = -rows.q[k];
            for (e, &c) in coefs.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let wgt = c / disc.step2(e);
                diag += 2.0 * wgt;
                let (pl, mi) = disc.neighbors(grid, i, e).expect("interior node");
                for nb in [pl, mi] {
                    if pos[nb] == usize::MAX {
                        rhs += wgt * u[nb];
                    } else {
                        a.push_entry(pos[nb], -wgt);
                    }
                }
            }
            a.finish_row(diag);
            b[k] = rhs;
            x[k] = u[i];
        }
        if residual <= tol {
            return Ok((it, residual, true));
        }
        // A repeated policy whose solve did not reach tol cannot improve.
        if last_policy.as_ref() == Some(&policy) {
            return Ok((it, residual, false));
        }
        linear::solve(&a, &b, &mut x, symmetric, &rows.scale, 0.1 * tol, lin_cap);
        for (k, &i) in rows.inner.iter().enumerate() {
            u[i] = x[k];
        }
        last_policy = Some(policy);
    }
    let _ = residual;
    let residual = weighted_max_residual(disc, grid, rows, u)?;
    Ok((p.params.max_iters, residual, residual <= tol))
}

fn relaxation(
    p: &DirichletProblem,
    disc: &DiscreteOperator,
    rows: &Rows,
    u: &mut [f64],
    tol: f64,
) -> Result<(usize, f64, bool)> {
    let grid = &p.grid;
    let tau = p.params.tau.min(1.0);
    let dbound = disc.diagonal_bound();
    let order: Vec<usize> = match p.params.sweep {
        SweepOrder::Lexicographic => (0..rows.inner.len()).collect(),
        SweepOrder::RedBlack => {
            let color = |i: usize| {
                let m = grid.multi_index(i);
                m[..grid.dim()].iter().sum::<usize>() % 2
            };
            let mut idx: Vec<usize> = (0..rows.inner.len()).collect();
            idx.sort_by_key(|&k| color(rows.inner[k]));
            idx
        }
    };
    for it in 0..p.params.max_iters {
        for &k in &order {
            let i = rows.inner[k];
            let v = disc.apply(grid, u, i)? - rows.q[k];
            u[i] += tau * v / dbound;
        }
        let res = weighted_max_residual(disc, grid, rows, u)?;
        if res <= tol {
            return Ok((it + 1, res, true));
        }
    }
    let res = weighted_max_residual(disc, grid, rows, u)?;
    Ok((p.params.max_iters, res, res <= tol))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LadderOptions {
    pub ladder_tol: f64,
    pub warm_start: bool,
}

impl Default for LadderOptions {
    fn default() -> Self {
        LadderOptions {
            ladder_tol: 1e-3,
            warm_start: true,
        }
    }
}

/// Differences at or below this are roundoff, and count as decreasing.
pub fn ladder_noise_floor(u: &Field) -> f64 {
    1e-10 * (1.0 + u.max_abs())
}

pub fn regularization_ladder(p: &DirichletProblem, schedule: &[f64]) -> Result<SolveReport> {
    regularization_ladder_with(p, schedule, LadderOptions::default())
}

/// Solves along a strictly decreasing ε schedule, warm-starting each level
/// from the previous solution. A level that fails to converge ends the
/// ladder; the partial history is returned with `converged = false`.
pub fn regularization_ladder_with(
    p: &DirichletProblem,
    schedule: &[f64],
    opts: LadderOptions,
) -> Result<SolveReport> {
    p.validate()?;
    if schedule.is_empty() {
        return Err(invalid("empty epsilon schedule"));
    }
    for (k, &e) in schedule.iter().enumerate() {
        if !(e >= 0.0 && e.is_finite()) {
            return Err(invalid(format!("epsilon must be finite and >= 0, got {e}")));
        }
        if k > 0 && !(e < schedule[k - 1]) {
            return Err(invalid("epsilon schedule must be strictly decreasing"));
        }
        if e == 0.0 && k + 1 != schedule.len() {
            return Err(invalid("epsilon = 0 is only allowed as the final level"));
        }
    }
    if *schedule.last().unwrap() == 0.0
        && p.params.source_rule == SourceRule::Pointwise
        && !p.grid.offset()
    {
        return Err(Error::Precondition(
            "a final epsilon = 0 level with the pointwise source rule needs an offset grid".into(),
        ));
    }

    let first = starting_values(p, p.initial.as_ref());
    let mut prev = first.clone();
    let mut history = Vec::with_capacity(schedule.len());
    let mut total = 0;
    let mut last: Option<SolveReport> = None;
    for &eps in schedule {
        let w = p.weight.with_eps(eps)?;
        let start = if opts.warm_start { prev.clone() } else { first.clone() };
        let rep = solve_level(p, &w, start)?;
        let diff = rep
            .solution
            .values()
            .iter()
            .zip(&prev)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        total += rep.iterations;
        history.push(LevelRecord {
            eps,
            iterations: rep.iterations,
            residual: rep.residual,
            converged: rep.converged,
            diff,
        });
        prev = rep.solution.values().to_vec();
        let stop = !rep.converged;
        last = Some(rep);
        if stop {
            break;
        }
    }
    let last = last.expect("nonempty schedule");
    let all_converged = history.len() == schedule.len() && history.iter().all(|r| r.converged);
    let floor = ladder_noise_floor(&last.solution);
    let decreasing = history
        .windows(2)
        .all(|w| w[1].diff < w[0].diff || w[1].diff <= floor);
    let final_small = history.last().is_some_and(|r| r.diff <= opts.ladder_tol);
    Ok(SolveReport {
        solution: last.solution,
        iterations: total,
        residual: last.residual,
        tol: last.tol,
        converged: all_converged,
        ladder_converged: Some(all_converged && decreasing && final_small),
        history,
    })
}

/// `ε_k = h^{1/2} 4^{−k}` for `k = 0..levels`.
pub fn default_schedule(h: f64, levels: usize) -> Vec<f64> {
    (0..levels).map(|k| h.sqrt() * 0.25f64.powi(k as i32)).collect()
}
