//! Sup/inf-convolution envelopes, their property audit, and convex
//! envelopes of grid functions with contact sets.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lattice::{dist2, mask_count, Field, Grid, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvelopeSide {
    Upper,
    Lower,
}

#[derive(Clone, Debug)]
pub struct EnvelopeParams {
    eps: f64,
    source: Mask,
    eval: Mask,
}

impl EnvelopeParams {
    /// `eval` must sit strictly inside `source`: every axis neighbor of an
    /// evaluation node exists and belongs to the source region.
    pub fn new(grid: &Grid, eps: f64, source: Mask, eval: Mask) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(invalid(format!("envelope eps must be > 0, got {eps}")));
        }
        if source.len() != grid.len() || eval.len() != grid.len() {
            return Err(invalid("region masks do not match the grid"));
        }
        if mask_count(&source) == 0 || mask_count(&eval) == 0 {
            return Err(invalid("envelope regions must be nonempty"));
        }
        for i in (0..grid.len()).filter(|&i| eval[i]) {
            for axis in 0..grid.dim() {
                let mut dir = [0i32; 3];
                dir[axis] = 1;
                for step in [-1, 1] {
                    match grid.neighbor(i, &dir[..grid.dim()], step) {
                        Some(j) if source[j] => {}
                        _ => {
                            return Err(invalid(format!(
                                "evaluation node {i} is not strictly inside the source region"
                            )))
                        }
                    }
                }
            }
        }
        Ok(EnvelopeParams { eps, source, eval })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn source(&self) -> &Mask {
        &self.source
    }

    pub fn eval(&self) -> &Mask {
        &self.eval
    }

    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(invalid(format!("envelope eps must be > 0, got {eps}")));
        }
        Ok(EnvelopeParams {
            eps,
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug)]
pub struct EnvelopeResult {
    pub side: EnvelopeSide,
    /// Envelope at every grid node (the sup runs over the source region).
    pub envelope: Field,
    /// Maximizing (minimizing) source node for every grid node.
    pub argmax: Vec<usize>,
}

/// `u^ε(x₀) = max_{x ∈ Ū} u(x) + ε − |x − x₀|²/ε` (upper) and
/// `u_ε(x₀) = min_{x ∈ Ū} u(x) − ε + |x − x₀|²/ε` (lower), by brute force
/// over the source nodes with the lowest index winning ties.
pub fn eps_envelope(u: &Field, p: &EnvelopeParams, side: EnvelopeSide) -> Result<EnvelopeResult> {
    let grid = u.grid();
    if p.source.len() != grid.len() {
        return Err(invalid("region masks do not match the grid"));
    }
    let src: Vec<(Vec<f64>, f64, usize)> = (0..grid.len())
        .filter(|&i| p.source[i])
        .map(|i| (grid.point(i), u.get(i), i))
        .collect();
    let eps = p.eps;
    let out: Vec<(f64, usize)> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x0 = grid.point(i);
            let mut best = f64::NEG_INFINITY;
            let mut arg = src[0].2;
            for (x, v, j) in &src {
                let pen = dist2(x, &x0) / eps;
                // Lower is written as the negation of upper on −u so that
                // duality holds bit for bit.
                let cand = match side {
                    EnvelopeSide::Upper => (v + eps) - pen,
                    EnvelopeSide::Lower => -((v - eps) + pen),
                };
                if cand > best {
                    best = cand;
                    arg = *j;
                }
            }
            match side {
                EnvelopeSide::Upper => (best, arg),
                EnvelopeSide::Lower => (-best, arg),
            }
        })
        .collect();
    let (vals, argmax): (Vec<f64>, Vec<usize>) = out.into_iter().unzip();
    Ok(EnvelopeResult {
        side,
        envelope: Field::new(grid.clone(), vals)?,
        argmax,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditCheck {
    pub name: &'static str,
    pub passed: bool,
    pub violations: usize,
    /// Largest amount by which the property fails (≤ 0 when it holds).
    pub worst_margin: f64,
    pub worst_node: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EnvelopeAudit {
    pub eps: f64,
    pub eps_prime: f64,
    pub checks: Vec<AuditCheck>,
}

impl EnvelopeAudit {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn violations(&self) -> usize {
        self.checks.iter().map(|c| c.violations).sum()
    }
}

struct Tally {
    name: &'static str,
    violations: usize,
    worst: f64,
    node: Option<usize>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Tally {
            name,
            violations: 0,
            worst: f64::NEG_INFINITY,
            node: None,
        }
    }

    /// Records `margin`, the amount by which the property fails.
    fn record(&mut self, node: usize, margin: f64) {
        if margin > 0.0 {
            self.violations += 1;
        }
        if margin > self.worst {
            self.worst = margin;
            self.node = Some(node);
        }
    }

    fn finish(self) -> AuditCheck {
        AuditCheck {
            name: self.name,
            passed: self.violations == 0,
            violations: self.violations,
            worst_margin: self.worst,
            worst_node: if self.violations > 0 { self.node } else { None },
        }
    }
}

/// Audits the upper envelope on the evaluation region: the six listed
/// properties, the `−2/ε` semiconvexity bound along every axis and the
/// monotone uniform convergence along `ladder` (decreasing ε values).
///
/// Properties that hold exactly in exact arithmetic are checked with a
/// rounding slack of `1e-12 (1 + max|u|)`.
pub fn envelope_audit(
    u: &Field,
    p: &EnvelopeParams,
    eps_prime: f64,
    ladder: &[f64],
) -> Result<EnvelopeAudit> {
    if !(eps_prime > p.eps) {
        return Err(invalid("the comparison envelope needs eps' > eps"));
    }
    let grid = u.grid();
    let eps = p.eps;
    let env = eps_envelope(u, p, EnvelopeSide::Upper)?;
    let wide = eps_envelope(u, &p.with_eps(eps_prime)?, EnvelopeSide::Upper)?;
    let ue = env.envelope.values();
    let slack = 1e-12 * (1.0 + u.max_abs());

    let src: Vec<usize> = (0..grid.len()).filter(|&i| p.source[i]).collect();
    let (lo, hi) = src.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &i| {
        (a.min(u.get(i)), b.max(u.get(i)))
    });
    let osc = hi - lo;
    let pts: Vec<Vec<f64>> = src.iter().map(|&i| grid.point(i)).collect();
    let diam = pts
        .par_iter()
        .map(|x| pts.iter().map(|y| dist2(x, y)).fold(0.0, f64::max))
        .reduce(|| 0.0, f64::max)
        .sqrt();

    let eval: Vec<usize> = (0..grid.len()).filter(|&i| p.eval[i]).collect();
    let mut above = Tally::new("envelope-above-u-plus-eps");
    let mut lipschitz = Tally::new("lipschitz");
    let mut monotone = Tally::new("monotone-in-eps");
    let mut argmax = Tally::new("argmax-distance");
    let mut gap = Tally::new("gap-bounds");
    let mut semiconvex = Tally::new("semiconvexity");
    let lip = 3.0 / eps * diam;
    for &i in &eval {
        let x0 = grid.point(i);
        let star = env.argmax[i];
        above.record(i, u.get(i) + eps - ue[i]);
        monotone.record(i, ue[i] - wide.envelope.get(i) - slack);
        argmax.record(i, dist2(&grid.point(star), &x0) - eps * osc - slack);
        let g = ue[i] - u.get(i);
        let upper = u.get(star) - u.get(i) + eps;
        gap.record(i, (-g).max(g - upper - slack));
        for axis in 0..grid.dim() {
            let mut dir = [0i32; 3];
            dir[axis] = 1;
            let d = &dir[..grid.dim()];
            let (Some(pl), Some(mi)) = (grid.neighbor(i, d, 1), grid.neighbor(i, d, -1)) else {
                continue;
            };
            let h2 = grid.spacing(axis).powi(2);
            let d2 = (ue[pl] - 2.0 * ue[i] + ue[mi]) / h2;
            semiconvex.record(i, -2.0 / eps - d2 - 4.0 * slack / h2);
        }
    }
    let eval_pts: Vec<Vec<f64>> = eval.iter().map(|&i| grid.point(i)).collect();
    let pair_worst: Vec<(f64, usize)> = (0..eval.len())
        .into_par_iter()
        .map(|a| {
            let mut worst = (f64::NEG_INFINITY, eval[a]);
            for b in (a + 1)..eval.len() {
                let dist = dist2(&eval_pts[a], &eval_pts[b]).sqrt();
                let m = (ue[eval[a]] - ue[eval[b]]).abs() - lip * dist - slack;
                if m > worst.0 {
                    worst = (m, eval[a]);
                }
            }
            worst
        })
        .collect();
    for (m, node) in pair_worst {
        lipschitz.record(node, m);
    }

    // u^ε − u ≤ L d + ε − d²/ε ≤ ε (1 + L²/4) with L the Lipschitz constant
    // of u over the source nodes.
    let lip_u = pts
        .par_iter()
        .zip(src.par_iter())
        .map(|(x, &i)| {
            pts.iter()
                .zip(&src)
                .filter(|(_, &j)| j != i)
                .map(|(y, &j)| (u.get(i) - u.get(j)).abs() / dist2(x, y).sqrt())
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    let mut convergence = Tally::new("uniform-convergence");
    let mut prev = f64::INFINITY;
    for (k, &e) in ladder.iter().enumerate() {
        if k > 0 && !(e < ladder[k - 1]) {
            return Err(invalid("the convergence ladder must be strictly decreasing"));
        }
        let lvl = eps_envelope(u, &p.with_eps(e)?, EnvelopeSide::Upper)?;
        let sup = eval
            .iter()
            .map(|&i| lvl.envelope.get(i) - u.get(i))
            .fold(0.0, f64::max);
        let bound = e * (1.0 + 0.25 * lip_u * lip_u);
        convergence.record(k, (sup - prev).max(sup - bound) - slack);
        prev = sup;
    }
    Ok(EnvelopeAudit {
        eps,
        eps_prime,
        checks: vec![
            above.finish(),
            lipschitz.finish(),
            monotone.finish(),
            argmax.finish(),
            gap.finish(),
            semiconvex.finish(),
            convergence.finish(),
        ],
    })
}

/// Twenty fixed seeds for the piecewise-linear audit corpus.
pub const DEFAULT_SEEDS: [u64; 20] = [
    1, 2, 3, 5, 8, 13, 21, 34, 55, 89, 144, 233, 377, 610, 987, 1597, 2584, 4181, 6765, 10946,
];

/// A random continuous piecewise-linear function on a 1D grid: between 2
/// and 8 interior breakpoints, values uniform in `[−1, 1]`.
pub fn random_piecewise_linear(grid: &Grid, seed: u64) -> Result<Field> {
    if grid.dim() != 1 {
        return Err(invalid("the piecewise-linear corpus is one-dimensional"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = grid.bounds()[0];
    let k = rng.random_range(2..=8usize);
    let mut knots: Vec<f64> = (0..k).map(|_| rng.random_range(lo..hi)).collect();
    knots.push(lo);
    knots.push(hi);
    knots.sort_by(f64::total_cmp);
    let vals: Vec<f64> = knots.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
    Field::from_fn(grid, |x| {
        let t = x[0];
        let j = knots
            .windows(2)
            .position(|w| t <= w[1])
            .unwrap_or(knots.len() - 2);
        let (a, b) = (knots[j], knots[j + 1]);
        let s = if b > a { (t - a) / (b - a) } else { 0.0 };
        vals[j] + s * (vals[j + 1] - vals[j])
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ContactSet {
    #[serde(skip)]
    pub mask: Mask,
    pub count: usize,
    /// Node count times cell volume.
    pub measure: f64,
    pub tol: f64,
}

/// Replace `v` by `min(v, 0)` on `B_R(center)` and by 0 on the rest of
/// the region before convexifying.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendByZero {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Clone, Debug)]
pub struct ConvexEnvelope {
    /// `Γ_v` on the region; nodes outside the region keep the input value.
    pub gamma: Field,
    /// The function that was convexified (after the optional extension).
    pub input: Field,
    pub contact: ContactSet,
    pub sweeps: usize,
    pub converged: bool,
    /// Largest change in the last sweep.
    pub residual: f64,
}

const SWEEP_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 20_000;

/// Largest convex minorant over the node set `region`. In 1D this is the
/// exact lower hull; in 2D and 3D the exact 1D hull is applied along every
/// lattice line of each stencil direction until a fixed point is reached.
pub fn convex_envelope(v: &Field, region: &Mask, extend: Option<&ExtendByZero>) -> Result<ConvexEnvelope> {
    let grid = v.grid();
    if region.len() != grid.len() || mask_count(region) == 0 {
        return Err(invalid("convex envelope region must be a nonempty node mask"));
    }
    let input = match extend {
        None => v.clone(),
        Some(ext) => {
            if ext.center.len() != grid.dim() || !(ext.radius > 0.0) {
                return Err(invalid("extension ball must match the grid dimension and have R > 0"));
            }
            let r2 = ext.radius * ext.radius;
            let vals = (0..grid.len())
                .map(|i| {
                    if dist2(&grid.point(i), &ext.center) <= r2 {
                        v.get(i).min(0.0)
                    } else if region[i] {
                        0.0
                    } else {
                        v.get(i)
                    }
                })
                .collect();
            Field::new(grid.clone(), vals)?
        }
    };
    let scale = 1.0 + input.max_abs();
    let mut gamma = input.values().to_vec();
    let dirs = line_directions(grid.dim());
    let lines: Vec<Vec<Vec<usize>>> = dirs.iter().map(|d| region_lines(grid, region, d)).collect();
    let mut sweeps = 0;
    let mut residual = 0.0;
    let mut converged = false;
    let max_sweeps = if grid.dim() == 1 { 1 } else { MAX_SWEEPS };
    while sweeps < max_sweeps {
        sweeps += 1;
        residual = 0.0;
        for (dir, set) in dirs.iter().zip(&lines) {
            let step = dir
                .iter()
                .enumerate()
                .map(|(k, &c)| (c as f64 * grid.spacing(k)).powi(2))
                .sum::<f64>()
                .sqrt();
            for line in set {
                let xs: Vec<f64> = (0..line.len()).map(|k| k as f64 * step).collect();
                let ys: Vec<f64> = line.iter().map(|&i| gamma[i]).collect();
                let hull = lower_hull_values(&xs, &ys, scale);
                for (&i, &y) in line.iter().zip(&hull) {
                    residual = f64::max(residual, gamma[i] - y);
                    gamma[i] = y;
                }
            }
        }
        if grid.dim() == 1 || residual <= SWEEP_TOL * scale {
            converged = true;
            break;
        }
    }
    let (lo, hi) = (0..grid.len())
        .filter(|&i| region[i])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), i| {
            (a.min(input.get(i)), b.max(input.get(i)))
        });
    let tol = contact_tol(hi - lo);
    let mask: Mask = (0..grid.len())
        .map(|i| region[i] && input.get(i) - gamma[i] <= tol)
        .collect();
    let count = mask_count(&mask);
    Ok(ConvexEnvelope {
        gamma: Field::new(grid.clone(), gamma)?,
        input,
        contact: ContactSet {
            mask,
            count,
            measure: count as f64 * grid.cell_volume(),
            tol,
        },
        sweeps,
        converged,
        residual,
    })
}

pub fn contact_tol(osc: f64) -> f64 {
    1e-8 * (1.0 + osc)
}

/// Stencil line directions: the axes, plus the two diagonals in 2D.
fn line_directions(dim: usize) -> Vec<Vec<i32>> {
    let mut out: Vec<Vec<i32>> = (0..dim)
        .map(|k| (0..dim).map(|j| i32::from(j == k)).collect())
        .collect();
    if dim == 2 {
        out.push(vec![1, 1]);
        out.push(vec![1, -1]);
    }
    out
}

/// Maximal runs of consecutive region nodes along direction `dir`.
fn region_lines(grid: &Grid, region: &Mask, dir: &[i32]) -> Vec<Vec<usize>> {
    let mut out = vec![];
    for i in 0..grid.len() {
        if !region[i] {
            continue;
        }
        // Start a run only where the predecessor is absent or outside.
        if grid.neighbor(i, dir, -1).is_some_and(|j| region[j]) {
            continue;
        }
        let mut run = vec![i];
        let mut cur = i;
        while let Some(j) = grid.neighbor(cur, dir, 1) {
            if !region[j] {
                break;
            }
            run.push(j);
            cur = j;
        }
        if run.len() >= 2 {
            out.push(run);
        }
    }
    out
}

/// Lower convex hull of `(x_k, y_k)` (increasing `x`) evaluated at every
/// `x_k`. Points within `1e-13·scale` of a chord count as on it, and the
/// result is clamped by `y`, which makes the map idempotent bit for bit.
pub fn lower_hull_values(xs: &[f64], ys: &[f64], scale: f64) -> Vec<f64> {
    let n = xs.len();
    if n <= 2 {
        return ys.to_vec();
    }
    let tau = 1e-13 * scale;
    let mut hull: Vec<usize> = Vec::with_capacity(n);
    for k in 0..n {
        while hull.len() >= 2 {
            let o = hull[hull.len() - 2];
            let a = hull[hull.len() - 1];
            let cross = (xs[a] - xs[o]) * (ys[k] - ys[o]) - (ys[a] - ys[o]) * (xs[k] - xs[o]);
            if cross <= tau * (xs[k] - xs[o]) {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(k);
    }
    let mut out = ys.to_vec();
    for w in hull.windows(2) {
        let (a, b) = (w[0], w[1]);
        for k in (a + 1)..b {
            let t = (xs[k] - xs[a]) / (xs[b] - xs[a]);
            out[k] = (ys[a] + t * (ys[b] - ys[a])).min(ys[k]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::lattice::{build_grid, sample_field};

    fn line(n: usize, half: f64) -> Grid {
        build_grid(1, vec![(-half, half)], n, false).unwrap()
    }

    fn params(g: &Grid, eps: f64, inner: f64) -> EnvelopeParams {
        let all = vec![true; g.len()];
        let eval = g.mask_where(|x| x.iter().all(|c| c.abs() <= inner));
        EnvelopeParams::new(g, eps, all, eval).unwrap()
    }

    #[test]
    fn constant_envelope() {
        let g = line(101, 1.0);
        let u = Field::constant(&g, 0.3);
        let r = eps_envelope(&u, &params(&g, 0.1, 0.5), EnvelopeSide::Upper).unwrap();
        for i in 0..g.len() {
            assert_eq!(r.envelope.get(i), 0.3 + 0.1);
            assert_eq!(r.argmax[i], i);
        }
    }

    #[test]
    fn envelope_of_abs_matches_closed_form() {
        let g = line(4001, 1.0);
        let u = sample_field(&Expr::parse("abs(x1)").unwrap(), &g).unwrap();
        let eps = 0.1;
        let r = eps_envelope(&u, &params(&g, eps, 0.5), EnvelopeSide::Upper).unwrap();
        let h = g.h();
        for i in 0..g.len() {
            let x = g.point(i)[0];
            if x.abs() <= 0.02 {
                let want = x.abs() + 1.25 * eps;
                assert!((r.envelope.get(i) - want).abs() <= 2.0 * h, "{x}");
            }
        }
    }

    #[test]
    fn lower_is_dual_of_upper() {
        let g = line(201, 1.0);
        let u = random_piecewise_linear(&g, 42).unwrap();
        let p = params(&g, 0.05, 0.5);
        let lo = eps_envelope(&u, &p, EnvelopeSide::Lower).unwrap();
        let up = eps_envelope(&u.map(|v| -v).unwrap(), &p, EnvelopeSide::Upper).unwrap();
        for i in 0..g.len() {
            assert_eq!(lo.envelope.get(i), -up.envelope.get(i));
            assert_eq!(lo.argmax[i], up.argmax[i]);
        }
    }

    #[test]
    fn params_validation() {
        let g = line(11, 1.0);
        let all = vec![true; g.len()];
        assert!(EnvelopeParams::new(&g, 0.0, all.clone(), all.clone()).is_err());
        // The evaluation region touches the edge of the source region.
        assert!(EnvelopeParams::new(&g, 0.1, all.clone(), all.clone()).is_err());
        assert!(EnvelopeParams::new(&g, 0.1, all.clone(), vec![false; g.len()]).is_err());
    }

    #[test]
    fn audit_of_zero_and_kink() {
        let g = line(201, 1.0);
        let p = params(&g, 0.1, 0.5);
        let zero = Field::zeros(&g);
        let rep = envelope_audit(&zero, &p, 0.2, &[0.1, 0.05, 0.02]).unwrap();
        assert!(rep.passed(), "{rep:?}");
        // Property (2) holds with equality.
        assert_eq!(rep.checks[0].worst_margin, 0.0);

        let k = sample_field(&Expr::parse("abs(x1)").unwrap(), &g).unwrap();
        let rep = envelope_audit(&k, &p, 0.2, &[0.1, 0.05, 0.02]).unwrap();
        assert!(rep.passed(), "{rep:?}");
        let env = eps_envelope(&k, &p, EnvelopeSide::Upper).unwrap();
        let c = 100;
        let d2 = (env.envelope.get(c + 1) - 2.0 * env.envelope.get(c) + env.envelope.get(c - 1))
            / g.h().powi(2);
        assert!(d2 + 2.0 / 0.1 >= 0.0);
    }

    #[test]
    fn corpus_is_deterministic() {
        let g = line(201, 1.0);
        let a = random_piecewise_linear(&g, 7).unwrap();
        let b = random_piecewise_linear(&g, 7).unwrap();
        assert_eq!(a.values(), b.values());
        let c = random_piecewise_linear(&g, 8).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn hull_of_convex_data_is_itself() {
        let g = line(101, 1.0);
        let v = sample_field(&Expr::parse("x1^2").unwrap(), &g).unwrap();
        let env = convex_envelope(&v, &vec![true; g.len()], None).unwrap();
        assert!(env.gamma.max_abs_diff(&v) <= 1e-12);
        assert_eq!(env.contact.count, g.len());
    }

    #[test]
    fn extended_kink_hull() {
        let g = line(401, 2.0);
        let v = sample_field(&Expr::parse("abs(x1) - 1").unwrap(), &g).unwrap();
        let ext = ExtendByZero {
            center: vec![0.0],
            radius: 1.0,
        };
        let env = convex_envelope(&v, &vec![true; g.len()], Some(&ext)).unwrap();
        let at = |t: f64| {
            let i = (0..g.len())
                .min_by(|&a, &b| (g.point(a)[0] - t).abs().total_cmp(&(g.point(b)[0] - t).abs()))
                .unwrap();
            (i, env.gamma.get(i))
        };
        assert!((at(0.0).1 + 1.0).abs() < 1e-12);
        assert!((at(1.0).1 + 0.5).abs() < 1e-12);
        assert!((at(-1.0).1 + 0.5).abs() < 1e-12);
        let (i0, _) = at(0.0);
        assert!(env.contact.mask[i0]);
        assert!(env.contact.mask[0] && env.contact.mask[g.len() - 1]);
        assert!(!env.contact.mask[at(1.0).0]);
        assert_eq!(env.contact.count, 3);
    }

    #[test]
    fn hull_is_idempotent_in_1d() {
        let g = line(201, 1.0);
        let all = vec![true; g.len()];
        for seed in DEFAULT_SEEDS {
            let v = random_piecewise_linear(&g, seed).unwrap();
            let once = convex_envelope(&v, &all, None).unwrap();
            let twice = convex_envelope(&once.gamma, &all, None).unwrap();
            assert_eq!(once.gamma.values(), twice.gamma.values());
            for i in 0..g.len() {
                assert!(once.gamma.get(i) <= v.get(i));
            }
        }
    }

    #[test]
    fn two_dimensional_sweep_matches_1d_oracle() {
        let g2 = Grid::cube(2, 1.0, 41, false).unwrap();
        let g1 = line(41, 1.0);
        let prof = random_piecewise_linear(&g1, 3).unwrap();
        let v2 = Field::from_fn(&g2, |x| {
            let i = ((x[0] + 1.0) / g1.h()).round() as usize;
            prof.get(i)
        })
        .unwrap();
        let hull1 = convex_envelope(&prof, &vec![true; g1.len()], None).unwrap();
        let hull2 = convex_envelope(&v2, &vec![true; g2.len()], None).unwrap();
        assert!(hull2.converged);
        for i in 0..g2.len() {
            let m = g2.multi_index(i);
            assert!((hull2.gamma.get(i) - hull1.gamma.get(m[0])).abs() <= 1e-12);
        }
        let again = convex_envelope(&hull2.gamma, &vec![true; g2.len()], None).unwrap();
        assert!(again.gamma.max_abs_diff(&hull2.gamma) <= 1e-10);
    }

    #[test]
    fn two_dimensional_hull_is_directionally_convex() {
        let g = Grid::cube(2, 1.0, 31, false).unwrap();
        let v = sample_field(&Expr::parse("sin(3*x1)*cos(2*x2) + 0.2*x1*x2").unwrap(), &g).unwrap();
        let region = g.ball_mask(&[0.0, 0.0], 1.0);
        let env = convex_envelope(&v, &region, None).unwrap();
        assert!(env.converged);
        for i in (0..g.len()).filter(|&i| region[i]) {
            assert!(env.gamma.get(i) <= v.get(i) + 1e-15);
            for d in line_directions(2) {
                if let (Some(p), Some(m)) = (g.neighbor(i, &d, 1), g.neighbor(i, &d, -1)) {
                    if region[p] && region[m] {
                        let dd = env.gamma.get(p) - 2.0 * env.gamma.get(i) + env.gamma.get(m);
                        assert!(dd >= -1e-9, "{dd}");
                    }
                }
            }
        }
    }
}
