//! Sup-norm (Chebyshev) affine fits on discrete balls.
//!
//! In one variable the fit is exact: the half-width `g(b)` of the strip
//! `{min (y − b x), max (y − b x)}` is convex and piecewise linear in `b`
//! with breakpoints at the hull edge slopes, so the minimum sits on one of
//! them. With more variables the trailing slopes are found by nested
//! golden-section search on the (still convex) partial minimum, and the
//! leading slope by the exact rule.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::lattice::{Field, MAX_DIM};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AffineFit {
    pub x0: Vec<f64>,
    pub a: f64,
    pub b: Vec<f64>,
    pub r: f64,
    /// `max |u − a − b·(x − x₀)|` over the nodes of the ball.
    pub residual: f64,
    pub nodes: usize,
}

impl AffineFit {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.a
            + self
                .b
                .iter()
                .zip(x.iter().zip(&self.x0))
                .map(|(b, (x, c))| b * (x - c))
                .sum::<f64>()
    }
}

/// Best sup-norm affine approximation of `u` on the nodes of `B_r(x₀)`.
pub fn best_affine_fit(u: &Field, x0: &[f64], r: f64) -> Result<AffineFit> {
    let grid = u.grid();
    let d = grid.dim();
    if x0.len() != d {
        return Err(invalid("base point does not match the grid dimension"));
    }
    if !(r > 0.0) {
        return Err(invalid("fit radius must be positive"));
    }
    let mask = grid.ball_mask(x0, r);
    let mut xs = vec![];
    let mut ys = vec![];
    let mut p = vec![0.0; d];
    for i in (0..grid.len()).filter(|&i| mask[i]) {
        grid.point_into(i, &mut p);
        let mut x = [0.0; MAX_DIM];
        for k in 0..d {
            x[k] = p[k] - x0[k];
        }
        xs.push(x);
        ys.push(u.get(i));
    }
    if xs.len() < d + 2 {
        return Err(invalid(format!(
            "ball of radius {r} holds {} nodes, need at least {}",
            xs.len(),
            d + 2
        )));
    }
    let cloud = Cloud::new(d, xs, ys);
    let (a, b, residual) = cloud.fit();
    Ok(AffineFit {
        x0: x0.to_vec(),
        a,
        b,
        r,
        residual,
        nodes: cloud.ys.len(),
    })
}

/// Chebyshev fit of an explicit point set; `(a, b, residual)` with
/// `u ≈ a + b·x`.
pub fn chebyshev_fit(points: &[Vec<f64>], values: &[f64]) -> Result<(f64, Vec<f64>, f64)> {
    let d = points.first().map_or(0, |p| p.len());
    if d == 0 || d > MAX_DIM || points.len() != values.len() || points.iter().any(|p| p.len() != d) {
        return Err(invalid("points must share a dimension between 1 and 3"));
    }
    if points.len() < d + 2 {
        return Err(invalid("need at least d + 2 points"));
    }
    let xs = points
        .iter()
        .map(|p| {
            let mut x = [0.0; MAX_DIM];
            x[..d].copy_from_slice(p);
            x
        })
        .collect();
    Ok(Cloud::new(d, xs, values.to_vec()).fit())
}

struct Cloud {
    d: usize,
    xs: Vec<[f64; MAX_DIM]>,
    ys: Vec<f64>,
    /// Indices sorted by the first coordinate, and the start of each run
    /// of equal first coordinates.
    order: Vec<usize>,
    runs: Vec<usize>,
}

const GOLDEN_ITERS: usize = 200;

impl Cloud {
    fn new(d: usize, xs: Vec<[f64; MAX_DIM]>, ys: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.sort_by(|&i, &j| xs[i][0].total_cmp(&xs[j][0]).then(i.cmp(&j)));
        let mut runs = vec![];
        for (k, &i) in order.iter().enumerate() {
            if k == 0 || xs[i][0] != xs[order[k - 1]][0] {
                runs.push(k);
            }
        }
        runs.push(order.len());
        Cloud {
            d,
            xs,
            ys,
            order,
            runs,
        }
    }

    fn fit(&self) -> (f64, Vec<f64>, f64) {
        let seed = self.least_squares_seed();
        let mut tail = [0.0; MAX_DIM];
        let spread = self.ys.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
            - self.ys.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        let diam = self
            .xs
            .iter()
            .map(|x| x.iter().map(|c| c.abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        let step = (spread / diam).max(1e-8);
        self.minimize_tail(self.d - 1, &mut tail, &seed, step);
        let (b0, half, mid) = self.exact_lead(&tail);
        let mut b = vec![b0];
        b.extend_from_slice(&tail[1..self.d]);
        (mid, b, half)
    }

    /// Minimizes over `tail[level]` (and recursively the lower levels down
    /// to 1), leaving the optimum in `tail`. Returns the half-width.
    fn minimize_tail(&self, level: usize, tail: &mut [f64; MAX_DIM], seed: &[f64], step: f64) -> f64 {
        if level == 0 {
            return self.exact_lead(tail).1;
        }
        let eval = |t: f64, tail: &mut [f64; MAX_DIM]| {
            tail[level] = t;
            self.minimize_tail(level - 1, tail, seed, step)
        };
        // Bracket a minimum of the convex partial minimum by doubling.
        let s0 = seed[level];
        let f0 = eval(s0, tail);
        let fp = eval(s0 + step, tail);
        let fm = eval(s0 - step, tail);
        let (mut lo, mut hi);
        if fp >= f0 && fm >= f0 {
            lo = s0 - step;
            hi = s0 + step;
        } else {
            let dir = if fp < fm { 1.0 } else { -1.0 };
            let (mut prev, mut cur, mut fcur) = (s0, s0 + dir * step, fp.min(fm));
            let mut inc = step;
            loop {
                inc *= 2.0;
                let next = cur + dir * inc;
                let fnext = eval(next, tail);
                if fnext >= fcur || inc > 1e300 {
                    lo = prev.min(next);
                    hi = prev.max(next);
                    break;
                }
                prev = cur;
                cur = next;
                fcur = fnext;
            }
        }
        // Golden-section refinement.
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = hi - g * (hi - lo);
        let mut e = lo + g * (hi - lo);
        let mut fc = eval(c, tail);
        let mut fe = eval(e, tail);
        for _ in 0..GOLDEN_ITERS {
            if hi - lo <= 1e-14 * (1.0 + lo.abs().max(hi.abs())) {
                break;
            }
            if fc <= fe {
                hi = e;
                e = c;
                fe = fc;
                c = hi - g * (hi - lo);
                fc = eval(c, tail);
            } else {
                lo = c;
                c = e;
                fc = fe;
                e = lo + g * (hi - lo);
                fe = eval(e, tail);
            }
        }
        eval(if fc <= fe { c } else { e }, tail)
    }

    /// Exact optimum over the leading slope with `tail[1..d]` fixed:
    /// `(b₀, half-width, midrange constant)`.
    fn exact_lead(&self, tail: &[f64; MAX_DIM]) -> (f64, f64, f64) {
        let shifted = |i: usize| {
            let mut y = self.ys[i];
            for (t, x) in tail.iter().zip(&self.xs[i]).take(self.d).skip(1) {
                y -= t * x;
            }
            y
        };
        let mut top = Vec::with_capacity(self.runs.len());
        let mut bot = Vec::with_capacity(self.runs.len());
        for w in self.runs.windows(2) {
            let x = self.xs[self.order[w[0]]][0];
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &self.order[w[0]..w[1]] {
                let y = shifted(i);
                lo = lo.min(y);
                hi = hi.max(y);
            }
            top.push((x, hi));
            bot.push((x, lo));
        }
        let upper = hull(&top, true);
        let lower = hull(&bot, false);
        let width = |b: f64| {
            let hi = upper.iter().map(|&(x, y)| y - b * x).fold(f64::NEG_INFINITY, f64::max);
            let lo = lower.iter().map(|&(x, y)| y - b * x).fold(f64::INFINITY, f64::min);
            (hi - lo, hi, lo)
        };
        let mut slopes: Vec<f64> = upper
            .windows(2)
            .chain(lower.windows(2))
            .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0))
            .collect();
        if slopes.is_empty() {
            slopes.push(0.0);
        }
        slopes.sort_by(f64::total_cmp);
        slopes.dedup();
        // The width is convex in b, so it is unimodal along the sorted
        // breakpoints.
        let (mut l, mut h) = (0usize, slopes.len() - 1);
        while h - l > 2 {
            let m1 = l + (h - l) / 3;
            let m2 = h - (h - l) / 3;
            if width(slopes[m1]).0 <= width(slopes[m2]).0 {
                h = m2;
            } else {
                l = m1;
            }
        }
        let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
        for &s in &slopes[l..=h] {
            let (w, hi, lo) = width(s);
            if w < best.0 {
                best = (w, s, hi, lo);
            }
        }
        let (w, b, hi, lo) = best;
        (b, 0.5 * w, 0.5 * (hi + lo))
    }

    fn least_squares_seed(&self) -> Vec<f64> {
        let d = self.d;
        let n = self.ys.len();
        let a = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { self.xs[i][j - 1] });
        let y = DVector::from_column_slice(&self.ys);
        let sol = a
            .svd(true, true)
            .solve(&y, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(d + 1));
        (0..d).map(|k| sol[k + 1]).collect()
    }
}

/// Monotone-chain hull of points sorted by strictly increasing `x`.
fn hull(pts: &[(f64, f64)], upper: bool) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for &p in pts {
        while out.len() >= 2 {
            let (o, a) = (out[out.len() - 2], out[out.len() - 1]);
            let cross = (a.0 - o.0) * (p.1 - o.1) - (a.1 - o.1) * (p.0 - o.0);
            if (upper && cross >= 0.0) || (!upper && cross <= 0.0) {
                out.pop();
            } else {
                break;
            }
        }
        out.push(p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::lattice::{build_grid, sample_field, Grid};
    use nalgebra::SymmetricEigen;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimax value by brute force: the best sup-norm error of an affine
    /// fit equals the largest such error over all `(d + 2)`-point subsets,
    /// each given by `|Σ λᵢ yᵢ| / Σ |λᵢ|` with `λ` spanning the null space
    /// of the subset's `(1, x)` design.
    fn subset_oracle(points: &[Vec<f64>], ys: &[f64]) -> f64 {
        let d = points[0].len();
        let m = d + 2;
        let n = points.len();
        let mut best: f64 = 0.0;
        let mut idx: Vec<usize> = (0..m).collect();
        loop {
            let a = DMatrix::from_fn(d + 1, m, |r, c| if r == 0 { 1.0 } else { points[idx[c]][r - 1] });
            let eig = SymmetricEigen::new(a.transpose() * &a);
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
            // A one-dimensional null space means the design has full rank.
            if eig.eigenvalues[order[1]] > 1e-10 {
                let lam = eig.eigenvectors.column(order[0]);
                let num: f64 = (0..m).map(|c| lam[c] * ys[idx[c]]).sum();
                let den: f64 = (0..m).map(|c| lam[c].abs()).sum();
                best = best.max(num.abs() / den);
            }
            // Next combination.
            let mut k = m;
            loop {
                if k == 0 {
                    return best;
                }
                k -= 1;
                if idx[k] != k + n - m {
                    break;
                }
                if k == 0 {
                    return best;
                }
            }
            idx[k] += 1;
            for j in k + 1..m {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }

    fn max_error(points: &[Vec<f64>], ys: &[f64], a: f64, b: &[f64]) -> f64 {
        points
            .iter()
            .zip(ys)
            .map(|(p, y)| (y - a - p.iter().zip(b).map(|(x, c)| x * c).sum::<f64>()).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn affine_data_fits_exactly() {
        let g = Grid::cube(2, 1.0, 41, false).unwrap();
        let u = sample_field(&Expr::parse("1.5 - 2*x1 + 0.25*x2").unwrap(), &g).unwrap();
        let fit = best_affine_fit(&u, &[0.1, 0.2], 0.4).unwrap();
        assert!(fit.residual < 1e-12, "{fit:?}");
        assert!((fit.b[0] + 2.0).abs() < 1e-9 && (fit.b[1] - 0.25).abs() < 1e-9);
        assert!((fit.eval(&[0.1, 0.2]) - (1.5 - 0.2 + 0.05)).abs() < 1e-9);
    }

    #[test]
    fn even_functions_fit_by_midrange() {
        let g = build_grid(1, vec![(-1.0, 1.0)], 4097, false).unwrap();
        let u = sample_field(&Expr::parse("x1^2").unwrap(), &g).unwrap();
        for r in [0.5, 0.25, 0.1] {
            let fit = best_affine_fit(&u, &[0.0], r).unwrap();
            assert!((fit.residual - r * r / 2.0).abs() < 2.0 * g.h(), "{fit:?}");
            assert!(fit.b[0].abs() < 1e-12);
        }
        let u = sample_field(&Expr::parse("abs(x1)^1.5").unwrap(), &g).unwrap();
        let fit = best_affine_fit(&u, &[0.0], 0.5).unwrap();
        assert!((fit.residual - 0.5f64.powf(1.5) / 2.0).abs() < 2.0 * g.h());
    }

    #[test]
    fn exact_1d_fit_matches_subset_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let n = rng.random_range(3..12);
            let pts: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 * 0.1 + rng.random_range(0.0..0.05)]).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (a, b, res) = chebyshev_fit(&pts, &ys).unwrap();
            let want = subset_oracle(&pts, &ys);
            assert!((res - want).abs() < 1e-12, "{res} vs {want}");
            assert!((max_error(&pts, &ys, a, &b) - res).abs() < 1e-12);
        }
    }

    #[test]
    fn nested_fit_matches_subset_oracle_in_2d_and_3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for d in [2usize, 3] {
            for _ in 0..12 {
                let n = rng.random_range(d + 2..10);
                let pts: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect();
                let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let (a, b, res) = chebyshev_fit(&pts, &ys).unwrap();
                let want = subset_oracle(&pts, &ys);
                assert!((res - want).abs() < 1e-9 * (1.0 + want), "d={d}: {res} vs {want}");
                assert!((max_error(&pts, &ys, a, &b) - res).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_fit_matches_oracle_and_ignores_affine_shift() {
        let g = Grid::cube(2, 1.0, 9, false).unwrap();
        let u = sample_field(&Expr::parse("sin(3*x1) * x2 + x2^2").unwrap(), &g).unwrap();
        let x0 = [0.1, -0.05];
        let fit = best_affine_fit(&u, &x0, 0.5).unwrap();
        let mask = g.ball_mask(&x0, 0.5);
        let pts: Vec<Vec<f64>> = (0..g.len()).filter(|&i| mask[i]).map(|i| g.point(i)).collect();
        let ys: Vec<f64> = (0..g.len()).filter(|&i| mask[i]).map(|i| u.get(i)).collect();
        assert_eq!(pts.len(), fit.nodes);
        let want = subset_oracle(&pts, &ys);
        assert!((fit.residual - want).abs() < 1e-9, "{} vs {want}", fit.residual);

        let shifted = sample_field(&Expr::parse("sin(3*x1) * x2 + x2^2 + 4 - 3*x1 + 2*x2").unwrap(), &g).unwrap();
        let f2 = best_affine_fit(&shifted, &x0, 0.5).unwrap();
        assert!((f2.residual - fit.residual).abs() < 1e-9);
    }

    #[test]
    fn too_few_nodes() {
        let g = Grid::cube(2, 1.0, 5, false).unwrap();
        let u = Field::zeros(&g);
        assert!(best_affine_fit(&u, &[0.0, 0.0], 0.1).is_err());
    }
}
