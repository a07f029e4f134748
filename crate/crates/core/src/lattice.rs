//! Cartesian grids over boxes, nodal fields, and the degenerate weight
//! `ω(x) = ((x_d − ψ(x′))² + ε²)^{a/2}`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::expr::Expr;

pub const MAX_DIM: usize = 3;

/// Node mask over a grid, one flag per node in grid order.
pub type Mask = Vec<bool>;

/// Uniform Cartesian grid. Axis 0 varies fastest in the linear node order.
///
/// With `offset` set, nodes along the last axis sit at cell centers
/// (`lo + (i + 1/2) h`, `h = (hi − lo)/n`), so a flat interface through the
/// middle of a symmetric box with even `n` is never hit by a node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    bounds: Vec<(f64, f64)>,
    n: usize,
    offset: bool,
    spacing: Vec<f64>,
}

impl Grid {
    pub fn new(dim: usize, bounds: Vec<(f64, f64)>, n: usize, offset: bool) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(invalid(format!("dimension must be 1, 2 or 3, got {dim}")));
        }
        if bounds.len() != dim {
            return Err(invalid(format!(
                "expected {dim} axis bounds, got {}",
                bounds.len()
            )));
        }
        if n < 3 {
            return Err(invalid(format!("need at least 3 points per axis, got {n}")));
        }
        for (axis, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(invalid(format!("axis {axis} bounds ({lo}, {hi}) are degenerate")));
            }
        }
        let spacing = bounds
            .iter()
            .enumerate()
            .map(|(axis, &(lo, hi))| {
                if offset && axis == dim - 1 {
                    (hi - lo) / n as f64
                } else {
                    (hi - lo) / (n - 1) as f64
                }
            })
            .collect();
        Ok(Grid {
            dim,
            bounds,
            n,
            offset,
            spacing,
        })
    }

    /// Cube `[-half, half]^d`.
    pub fn cube(dim: usize, half: f64, n: usize, offset: bool) -> Result<Self> {
        Grid::new(dim, vec![(-half, half); dim], n, offset)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn offset(&self) -> bool {
        self.offset
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.spacing[axis]
    }

    /// Mesh size: the largest axis spacing.
    pub fn h(&self) -> f64 {
        self.spacing.iter().cloned().fold(0.0, f64::max)
    }

    pub fn has_uniform_spacing(&self) -> bool {
        let h0 = self.spacing[0];
        self.spacing.iter().all(|&h| (h - h0).abs() <= 1e-14 * h0)
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn axis_coord(&self, axis: usize, i: usize) -> f64 {
        let (lo, hi) = self.bounds[axis];
        let x = if self.offset && axis == self.dim - 1 {
            lo + (hi - lo) * (2 * i + 1) as f64 / (2 * self.n) as f64
        } else {
            lo + (hi - lo) * i as f64 / (self.n - 1) as f64
        };
        x.clamp(lo, hi)
    }

    pub fn multi_index(&self, idx: usize) -> [usize; MAX_DIM] {
        let mut m = [0; MAX_DIM];
        let mut rest = idx;
        for slot in m.iter_mut().take(self.dim) {
            *slot = rest % self.n;
            rest /= self.n;
        }
        m
    }

    pub fn linear_index(&self, m: &[usize]) -> usize {
        m.iter()
            .take(self.dim)
            .rev()
            .fold(0, |acc, &i| acc * self.n + i)
    }

    pub fn point_into(&self, idx: usize, out: &mut [f64]) {
        let m = self.multi_index(idx);
        for axis in 0..self.dim {
            out[axis] = self.axis_coord(axis, m[axis]);
        }
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.dim];
        self.point_into(idx, &mut p);
        p
    }

    /// Node reached from `idx` by `steps` lattice steps along `dir`.
    pub fn neighbor(&self, idx: usize, dir: &[i32], steps: i32) -> Option<usize> {
        let mut m = self.multi_index(idx);
        for axis in 0..self.dim {
            let j = m[axis] as i64 + (dir[axis] as i64) * steps as i64;
            if j < 0 || j >= self.n as i64 {
                return None;
            }
            m[axis] = j as usize;
        }
        Some(self.linear_index(&m))
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        let m = self.multi_index(idx);
        m[..self.dim].iter().any(|&i| i == 0 || i == self.n - 1)
    }

    pub fn boundary_mask(&self) -> Mask {
        (0..self.len()).map(|i| self.is_boundary(i)).collect()
    }

    pub fn mask_where(&self, mut pred: impl FnMut(&[f64]) -> bool) -> Mask {
        let mut p = vec![0.0; self.dim];
        (0..self.len())
            .map(|i| {
                self.point_into(i, &mut p);
                pred(&p)
            })
            .collect()
    }

    /// Closed Euclidean ball mask.
    pub fn ball_mask(&self, center: &[f64], radius: f64) -> Mask {
        let r2 = radius * radius * (1.0 + 1e-12);
        self.mask_where(|x| dist2(x, center) <= r2)
    }

    /// Axis-aligned cube of side `side` centered at the origin.
    pub fn cube_mask(&self, side: f64) -> Mask {
        let half = 0.5 * side * (1.0 + 1e-12);
        self.mask_where(|x| x.iter().all(|c| c.abs() <= half))
    }
}

/// Thin wrapper matching the operation name used throughout the docs.
pub fn build_grid(dim: usize, bounds: Vec<(f64, f64)>, n: usize, offset: bool) -> Result<Grid> {
    Grid::new(dim, bounds, n, offset)
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn mask_count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&b| b).count()
}

/// Monomial `coef · Π x_i^{p_i}` in the tangential variables `x′`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub powers: Vec<u32>,
}

/// Interface `Γ = {x_d = ψ(x′)}` with polynomial `ψ` of total degree ≤ 4.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Interface {
    terms: Vec<Monomial>,
}

impl Interface {
    pub fn flat() -> Self {
        Interface::default()
    }

    pub fn new(terms: Vec<Monomial>) -> Result<Self> {
        for t in &terms {
            let degree: u32 = t.powers.iter().sum();
            if degree > 4 {
                return Err(invalid(format!(
                    "interface polynomial degree {degree} exceeds 4"
                )));
            }
            if !t.coef.is_finite() {
                return Err(invalid("interface coefficient is not finite"));
            }
        }
        Ok(Interface { terms })
    }

    pub fn is_flat(&self) -> bool {
        self.terms.iter().all(|t| t.coef == 0.0)
    }

    pub fn terms(&self) -> &[Monomial] {
        &self.terms
    }

    /// Largest number of tangential variables referenced.
    pub fn arity(&self) -> usize {
        self.terms
            .iter()
            .map(|t| {
                t.powers
                    .iter()
                    .rposition(|&p| p > 0)
                    .map_or(0, |i| i + 1)
            })
            .max()
            .unwrap_or(0)
    }

    pub fn eval(&self, tangential: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                t.powers
                    .iter()
                    .enumerate()
                    .fold(t.coef, |acc, (i, &p)| {
                        if p == 0 {
                            acc
                        } else {
                            acc * tangential.get(i).copied().unwrap_or(0.0).powi(p as i32)
                        }
                    })
            })
            .sum()
    }
}

/// Degenerate weight `ω(x) = ((x_d − ψ(x′))² + ε²)^{a/2}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    a: f64,
    interface: Interface,
    eps: f64,
}

impl WeightSpec {
    pub fn new(a: f64, interface: Interface, eps: f64) -> Result<Self> {
        if !(a.is_finite() && a > 0.0) {
            return Err(invalid(format!("weight exponent a must be > 0, got {a}")));
        }
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(invalid(format!("regularization must be >= 0, got {eps}")));
        }
        Ok(WeightSpec { a, interface, eps })
    }

    pub fn flat(a: f64) -> Result<Self> {
        WeightSpec::new(a, Interface::flat(), 0.0)
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn interface(&self) -> &Interface {
        &self.interface
    }

    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        WeightSpec::new(self.a, self.interface.clone(), eps)
    }

    /// Signed offset `x_d − ψ(x′)`.
    pub fn offset(&self, x: &[f64]) -> f64 {
        let d = x.len();
        x[d - 1] - self.interface.eval(&x[..d - 1])
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.eval_offset(self.offset(x))
    }

    pub fn eval_offset(&self, s: f64) -> f64 {
        if self.eps == 0.0 {
            s.abs().powf(self.a)
        } else {
            s.hypot(self.eps).powf(self.a)
        }
    }

    /// Hat-weighted average of `1/ω` along `x_d` over `[x_d − h, x_d + h]`:
    /// `(1/h) ∫ (1 − |y|/h) ω(x + y e_d)^{-1} dy`.
    ///
    /// Finite whenever `ε > 0` or `a < 1`. Otherwise it is `+∞` when the
    /// interface meets the window where the hat is positive.
    pub fn inverse_hat_average(&self, x: &[f64], h: f64) -> f64 {
        let s0 = self.offset(x);
        let g = |s: f64| 1.0 / self.eval_offset(s);
        let left = |s: f64| 1.0 - (s0 - s) / h;
        let right = |s: f64| 1.0 - (s - s0) / h;
        let total = self.integrate_split(s0 - h, s0, &g, &left)
            + self.integrate_split(s0, s0 + h, &g, &right);
        total / h
    }

    fn integrate_split(
        &self,
        p: f64,
        q: f64,
        g: &impl Fn(f64) -> f64,
        w: &impl Fn(f64) -> f64,
    ) -> f64 {
        if p < 0.0 && q > 0.0 {
            self.integrate_graded(p, 0.0, g, w) + self.integrate_graded(0.0, q, g, w)
        } else {
            self.integrate_graded(p, q, g, w)
        }
    }

    /// `∫_p^q w g` for an interval whose interior avoids the interface,
    /// grading geometrically toward the endpoint nearest to it.
    fn integrate_graded(
        &self,
        p: f64,
        q: f64,
        g: &impl Fn(f64) -> f64,
        w: &impl Fn(f64) -> f64,
    ) -> f64 {
        let len = q - p;
        if len <= 0.0 {
            return 0.0;
        }
        let near_left = p.abs() <= q.abs();
        let dc = if near_left { p.abs() } else { q.abs() };
        if dc >= len {
            return gauss_legendre(p, p + 0.5 * len, |s| w(s) * g(s))
                + gauss_legendre(p + 0.5 * len, q, |s| w(s) * g(s));
        }
        let stop = 0.25 * self.eps.max(dc);
        let mut total = 0.0;
        let mut ell = len;
        for _ in 0..200 {
            if ell <= stop || ell < 1e-300 {
                break;
            }
            let half = 0.5 * ell;
            let (a, b) = if near_left {
                (p + half, p + ell)
            } else {
                (q - ell, q - half)
            };
            total += gauss_legendre(a, b, |s| w(s) * g(s));
            ell = half;
        }
        let (a, b) = if near_left { (p, p + ell) } else { (q - ell, q) };
        if self.eps == 0.0 && dc == 0.0 {
            // ∫_0^ℓ |s|^{-a} (w0 + w1 s) ds in closed form. The hat weight
            // w0 at the interface is zero when Γ sits at the window's end.
            let c = if near_left { a } else { b };
            let w0 = w(c);
            let w1 = (w(b) - w(a)) / (b - a);
            let e1 = 1.0 - self.a;
            let e2 = 2.0 - self.a;
            if (w0 != 0.0 && e1 <= 0.0) || e2 <= 0.0 {
                return f64::INFINITY;
            }
            let sign = if near_left { 1.0 } else { -1.0 };
            let head = if w0 == 0.0 { 0.0 } else { w0 * ell.powf(e1) / e1 };
            total += head + sign * w1 * ell.powf(e2) / e2;
        } else {
            total += gauss_legendre(a, b, |s| w(s) * g(s));
        }
        total
    }
}

#[allow(clippy::excessive_precision)]
const GL_NODES: [f64; 8] = [
    -0.960_289_856_497_536_3,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329_0,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329_0,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
#[allow(clippy::excessive_precision)]
const GL_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_3,
    0.222_381_034_453_374_5,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362_0,
    0.362_683_783_378_362_0,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// 8-point Gauss–Legendre rule on `[a, b]`.
pub fn gauss_legendre(a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    GL_NODES
        .iter()
        .zip(GL_WEIGHTS.iter())
        .map(|(x, w)| w * f(mid + half * x))
        .sum::<f64>()
        * half
}

pub fn eval_weight(w: &WeightSpec, x: &[f64]) -> f64 {
    w.eval(x)
}

/// Nodal values on a grid. `trace` marks fields whose boundary values are
/// Dirichlet data.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
    trace: bool,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid(format!(
                "field has {} values for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some((node, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Sampling { node, value });
        }
        Ok(Field {
            grid,
            values,
            trace: false,
        })
    }

    pub fn constant(grid: &Grid, value: f64) -> Self {
        Field {
            values: vec![value; grid.len()],
            grid: grid.clone(),
            trace: false,
        }
    }

    pub fn zeros(grid: &Grid) -> Self {
        Field::constant(grid, 0.0)
    }

    pub fn from_fn(grid: &Grid, mut f: impl FnMut(&[f64]) -> f64) -> Result<Self> {
        let mut p = vec![0.0; grid.dim()];
        let values = (0..grid.len())
            .map(|i| {
                grid.point_into(i, &mut p);
                f(&p)
            })
            .collect();
        Field::new(grid.clone(), values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    pub fn has_trace(&self) -> bool {
        self.trace
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = true;
        self
    }

    pub fn same_grid(&self, other: &Field) -> bool {
        self.grid == other.grid
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Field> {
        Field::new(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    /// Writes `x1,..,xd,value` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.grid.dim()).map(|i| format!("x{i}")).collect();
        header.push("value".into());
        w.write_record(&header)?;
        let mut p = vec![0.0; self.grid.dim()];
        for (i, v) in self.values.iter().enumerate() {
            self.grid.point_into(i, &mut p);
            let mut row: Vec<String> = p.iter().map(|c| format!("{c:.16e}")).collect();
            row.push(format!("{v:.16e}"));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a field written by [`Field::write_csv`] onto `grid`, checking
    /// that every row's coordinates match the corresponding node.
    pub fn read_csv<R: Read>(grid: &Grid, input: R) -> Result<Field> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        if headers.len() != grid.dim() + 1 {
            return Err(invalid(format!(
                "csv has {} columns, expected {}",
                headers.len(),
                grid.dim() + 1
            )));
        }
        let mut values = Vec::with_capacity(grid.len());
        let mut p = vec![0.0; grid.dim()];
        let scale = grid
            .bounds()
            .iter()
            .fold(1.0f64, |m, &(lo, hi)| m.max(lo.abs()).max(hi.abs()));
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if i >= grid.len() {
                return Err(invalid("csv has more rows than grid nodes"));
            }
            grid.point_into(i, &mut p);
            for axis in 0..grid.dim() {
                let c: f64 = rec[axis]
                    .trim()
                    .parse()
                    .map_err(|_| invalid(format!("row {i}: bad coordinate")))?;
                if (c - p[axis]).abs() > 1e-12 * scale {
                    return Err(invalid(format!(
                        "row {i}: coordinate {c} does not match node {}",
                        p[axis]
                    )));
                }
            }
            let v: f64 = rec[grid.dim()]
                .trim()
                .parse()
                .map_err(|_| invalid(format!("row {i}: bad value")))?;
            values.push(v);
        }
        Field::new(grid.clone(), values)
    }
}

/// Evaluates `expr` at every node. Boundary values are marked as trace data.
pub fn sample_field(expr: &Expr, grid: &Grid) -> Result<Field> {
    let f = expr.compile()?;
    let mut p = vec![0.0; grid.dim()];
    let mut values = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        grid.point_into(i, &mut p);
        let v = f(&p);
        if !v.is_finite() {
            return Err(Error::Sampling { node: i, value: v });
        }
        values.push(v);
    }
    Ok(Field::new(grid.clone(), values)?.with_trace())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_partition() {
        let g = build_grid(1, vec![(-1.0, 1.0)], 5, false).unwrap();
        let xs: Vec<f64> = (0..5).map(|i| g.point(i)[0]).collect();
        assert_eq!(xs, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(g.h(), 0.5);
    }

    #[test]
    fn half_cell_offset() {
        let g = build_grid(1, vec![(-1.0, 1.0)], 4, true).unwrap();
        let xs: Vec<f64> = (0..4).map(|i| g.point(i)[0]).collect();
        assert_eq!(xs, vec![-0.75, -0.25, 0.25, 0.75]);
        assert_eq!(g.h(), 0.5);
    }

    #[test]
    fn square_three_by_three() {
        let g = Grid::cube(2, 1.0, 3, false).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g.h(), 1.0);
        assert_eq!(g.point(5), vec![1.0, 0.0]);
        assert_eq!(g.boundary_mask().iter().filter(|&&b| !b).count(), 1);
    }

    #[test]
    fn offset_keeps_nodes_off_flat_interface() {
        for n in [4, 10, 64] {
            let g = Grid::cube(2, 1.0, n, true).unwrap();
            let min = (0..g.len())
                .map(|i| g.point(i)[1].abs())
                .fold(f64::INFINITY, f64::min);
            assert!((min - g.spacing(1) / 2.0).abs() < 1e-15, "n={n}");
            let inside = (0..g.len()).all(|i| g.point(i).iter().all(|c| c.abs() <= 1.0));
            assert!(inside);
        }
    }

    #[test]
    fn grid_errors() {
        assert!(build_grid(1, vec![(-1.0, 1.0)], 2, false).is_err());
        assert!(build_grid(1, vec![(1.0, -1.0)], 5, false).is_err());
        assert!(build_grid(4, vec![(0.0, 1.0); 4], 5, false).is_err());
    }

    #[test]
    fn neighbors_and_indexing() {
        let g = Grid::cube(3, 1.0, 4, false).unwrap();
        let idx = g.linear_index(&[1, 2, 3]);
        assert_eq!(&g.multi_index(idx)[..3], &[1, 2, 3]);
        assert_eq!(g.neighbor(idx, &[0, 0, 1], 1), None);
        let nb = g.neighbor(idx, &[1, -1, 0], 1).unwrap();
        assert_eq!(&g.multi_index(nb)[..3], &[2, 1, 3]);
    }

    #[test]
    fn weight_examples() {
        let w = WeightSpec::flat(1.0).unwrap();
        assert_eq!(eval_weight(&w, &[0.3, 0.5]), 0.5);
        let w = WeightSpec::flat(2.0).unwrap();
        assert_eq!(eval_weight(&w, &[-0.5]), 0.25);
        let w = WeightSpec::new(1.0, Interface::flat(), 0.3).unwrap();
        assert!((eval_weight(&w, &[0.4]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn weight_rejects_bad_parameters() {
        assert!(WeightSpec::flat(0.0).is_err());
        assert!(WeightSpec::new(0.5, Interface::flat(), -1.0).is_err());
        assert!(Interface::new(vec![Monomial {
            coef: 1.0,
            powers: vec![5]
        }])
        .is_err());
    }

    #[test]
    fn curved_interface_zero_set() {
        let psi = Interface::new(vec![Monomial {
            coef: 0.5,
            powers: vec![2],
        }])
        .unwrap();
        let w = WeightSpec::new(0.5, psi, 0.0).unwrap();
        assert_eq!(w.eval(&[0.6, 0.18]), 0.0);
        assert!(w.eval(&[0.6, 0.2]) > 0.0);
    }

    #[test]
    fn regularized_weight_converges_from_above() {
        let w0 = WeightSpec::flat(0.5).unwrap();
        let pts = [-0.7, -0.01, 0.0, 1e-6, 0.3];
        let mut prev = vec![f64::INFINITY; pts.len()];
        for k in 0..30 {
            let eps = 0.5f64.powi(k);
            let w = w0.with_eps(eps).unwrap();
            for (j, &t) in pts.iter().enumerate() {
                let v = w.eval(&[t]);
                assert!(v > 0.0);
                assert!(v <= prev[j]);
                prev[j] = v;
            }
        }
        for (j, &t) in pts.iter().enumerate() {
            assert!((prev[j] - w0.eval(&[t])).abs() < 1e-4);
        }
    }

    fn hat_average_oracle(w: &WeightSpec, s0: f64, h: f64) -> f64 {
        // Midpoint rule on a very fine uniform partition; avoids s = 0.
        let m = 2_000_000;
        let dy = 2.0 * h / m as f64;
        (0..m)
            .map(|k| {
                let y = -h + (k as f64 + 0.5) * dy;
                (1.0 - y.abs() / h) / w.eval_offset(s0 + y) * dy
            })
            .sum::<f64>()
            / h
    }

    #[test]
    fn inverse_hat_average_matches_fine_quadrature() {
        for &(a, eps) in &[(0.5, 0.0), (0.5, 1e-3), (0.25, 0.02), (0.75, 1e-4)] {
            let w = WeightSpec::new(a, Interface::flat(), eps).unwrap();
            for &s0 in &[0.0, 0.01, -0.013, 0.05] {
                let got = w.inverse_hat_average(&[s0], 0.01);
                let want = hat_average_oracle(&w, s0, 0.01);
                assert!(
                    (got - want).abs() <= 2e-3 * want,
                    "a={a} eps={eps} s0={s0}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn inverse_hat_average_closed_form_at_interface() {
        // (1/h)∫(1−|y|/h)|y|^{-a} dy = 2 h^{-a} (1/(1−a) − 1/(2−a)).
        let a = 0.75;
        let h: f64 = 1.0 / 1024.0;
        let w = WeightSpec::flat(a).unwrap();
        let want = 2.0 * h.powf(-a) * (1.0 / (1.0 - a) - 1.0 / (2.0 - a));
        let got = w.inverse_hat_average(&[0.0], h);
        assert!((got - want).abs() < 1e-12 * want, "{got} vs {want}");
        // Far from the interface the average is close to the pointwise value.
        let far = w.inverse_hat_average(&[0.5], h);
        assert!((far - 1.0 / w.eval(&[0.5])).abs() < 1e-5);
        let w1 = WeightSpec::flat(1.0).unwrap();
        assert!(w1.inverse_hat_average(&[0.0], h).is_infinite());
    }

    #[test]
    fn sampling_examples() {
        let g = build_grid(1, vec![(-1.0, 1.0)], 3, false).unwrap();
        let f = sample_field(&Expr::parse("abs(x1)^1.5").unwrap(), &g).unwrap();
        assert_eq!(f.values(), &[1.0, 0.0, 1.0]);
        assert!(f.has_trace());
        let c = sample_field(&Expr::parse("0.75").unwrap(), &g).unwrap();
        assert!(c.values().iter().all(|&v| v == 0.75));
        let g2 = Grid::cube(2, 1.0, 3, false).unwrap();
        let q = sample_field(&Expr::parse("x1^2 - x2^2").unwrap(), &g2).unwrap();
        assert_eq!(q.get(g2.linear_index(&[2, 1])), 1.0);
        let bad = sample_field(&Expr::parse("1/x1").unwrap(), &g);
        assert!(matches!(bad, Err(Error::Sampling { node: 1, .. })));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let g = Grid::cube(2, 1.0, 7, true).unwrap();
        let f = Field::from_fn(&g, |x| (x[0] * 3.1).sin() / 7.0 + x[1].exp()).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x1,x2,value\n"));
        let back = Field::read_csv(&g, buf.as_slice()).unwrap();
        assert_eq!(back.values(), f.values());
        let other = Grid::cube(2, 1.0, 7, false).unwrap();
        assert!(Field::read_csv(&other, buf.as_slice()).is_err());
    }

    #[test]
    fn grid_coordinates_are_reproducible() {
        let a = Grid::new(2, vec![(-0.3, 0.7), (-1.0, 2.0)], 33, true).unwrap();
        let b = Grid::new(2, vec![(-0.3, 0.7), (-1.0, 2.0)], 33, true).unwrap();
        for i in 0..a.len() {
            let (pa, pb) = (a.point(i), b.point(i));
            assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
