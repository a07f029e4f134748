//! Second differences, Pucci extremal operators, the degenerate operator
//! family `c(x)·F̄(M)` and its monotone discretization.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::expr::Expr;
use crate::lattice::{Field, Grid, WeightSpec};

/// Ellipticity constants `0 < λ ≤ Λ < ∞`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipticityPair {
    lambda: f64,
    big_lambda: f64,
}

impl EllipticityPair {
    pub fn new(lambda: f64, big_lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && big_lambda.is_finite() && lambda > 0.0 && lambda <= big_lambda)
        {
            return Err(invalid(format!(
                "ellipticity requires 0 < lambda <= Lambda < inf, got lambda={lambda}, Lambda={big_lambda}"
            )));
        }
        Ok(EllipticityPair { lambda, big_lambda })
    }

    pub fn unit() -> Self {
        EllipticityPair {
            lambda: 1.0,
            big_lambda: 1.0,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn big_lambda(&self) -> f64 {
        self.big_lambda
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Plus,
    Minus,
}

/// Lattice directions grouped into orthogonal frames. The axis frame is
/// always first; ties in frame maximization go to the earliest frame.
#[derive(Clone, Debug, PartialEq)]
pub struct StencilSet {
    dim: usize,
    directions: Vec<Vec<i32>>,
    frames: Vec<Vec<usize>>,
}

impl StencilSet {
    pub fn axis(dim: usize) -> Self {
        let directions = (0..dim)
            .map(|k| (0..dim).map(|j| i32::from(j == k)).collect())
            .collect();
        StencilSet {
            dim,
            directions,
            frames: vec![(0..dim).collect()],
        }
    }

    /// Axis frame plus the 45° frame `{(1,1), (1,−1)}` in two dimensions.
    pub fn wide_2d() -> Self {
        StencilSet {
            dim: 2,
            directions: vec![vec![1, 0], vec![0, 1], vec![1, 1], vec![1, -1]],
            frames: vec![vec![0, 1], vec![2, 3]],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn directions(&self) -> &[Vec<i32>] {
        &self.directions
    }

    pub fn frames(&self) -> &[Vec<usize>] {
        &self.frames
    }

    pub fn is_wide(&self) -> bool {
        self.frames.len() > 1
    }

    /// Squared physical step length of each direction on `grid`.
    pub fn step_lengths2(&self, grid: &Grid) -> Result<Vec<f64>> {
        if grid.dim() != self.dim {
            return Err(invalid("stencil and grid dimensions differ"));
        }
        if self.is_wide() && !grid.has_uniform_spacing() {
            return Err(invalid("diagonal stencils need equal spacing on every axis"));
        }
        Ok(self
            .directions
            .iter()
            .map(|v| {
                v.iter()
                    .enumerate()
                    .map(|(k, &c)| (c as f64 * grid.spacing(k)).powi(2))
                    .sum()
            })
            .collect())
    }
}

/// Centered second difference along the lattice vector `dir`, normalized to
/// the unit direction: `(u(x+hv) − 2u(x) + u(x−hv)) / |hv|²`.
pub fn second_difference(u: &Field, node: usize, dir: &[i32]) -> Result<f64> {
    let g = u.grid();
    let (Some(p), Some(m)) = (g.neighbor(node, dir, 1), g.neighbor(node, dir, -1)) else {
        return Err(Error::StencilOutOfDomain {
            node,
            direction: dir.to_vec(),
        });
    };
    let step2: f64 = dir
        .iter()
        .enumerate()
        .map(|(k, &c)| (c as f64 * g.spacing(k)).powi(2))
        .sum();
    let v = u.values();
    Ok((v[p] - 2.0 * v[node] + v[m]) / step2)
}

fn frame_value(values: &[f64], ell: &EllipticityPair, side: Side) -> f64 {
    let (pos, neg) = match side {
        Side::Plus => (ell.big_lambda, ell.lambda),
        Side::Minus => (ell.lambda, ell.big_lambda),
    };
    values
        .iter()
        .map(|&v| if v > 0.0 { pos * v } else { neg * v })
        .sum()
}

/// Pucci operator over frames of directional second differences, returning
/// the value and the index of the selected frame (first one on ties).
pub fn pucci_select(frames: &[Vec<f64>], ell: &EllipticityPair, side: Side) -> Result<(f64, usize)> {
    if frames.is_empty() || frames.iter().any(|f| f.is_empty()) {
        return Err(invalid("pucci needs a nonempty set of nonempty frames"));
    }
    let mut best = frame_value(&frames[0], ell, side);
    let mut arg = 0;
    for (k, f) in frames.iter().enumerate().skip(1) {
        let v = frame_value(f, ell, side);
        let better = match side {
            Side::Plus => v > best,
            Side::Minus => v < best,
        };
        if better {
            best = v;
            arg = k;
        }
    }
    Ok((best, arg))
}

/// `M⁺` is the max over frames of `Σ Λ(δ²)⁺ − λ(δ²)⁻`; `M⁻` the min over
/// frames of `Σ λ(δ²)⁺ − Λ(δ²)⁻`.
pub fn pucci(frames: &[Vec<f64>], ell: &EllipticityPair, side: Side) -> Result<f64> {
    pucci_select(frames, ell, side).map(|(v, _)| v)
}

/// Pucci operator of a symmetric matrix via its spectrum.
pub fn pucci_matrix(m: &DMatrix<f64>, ell: &EllipticityPair, side: Side) -> f64 {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    frame_value(eig.as_slice(), ell, side)
}

/// Sum of the positive eigenvalues.
pub fn positive_part_norm(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .filter(|&&e| e > 0.0)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorKind {
    PucciPlus,
    PucciMinus,
    Trace,
    HjbFamily,
}

/// Explicit `x`-dependence `c(x) = gain · coefficient(zoom · x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XDependence {
    pub coefficient: Expr,
    #[serde(default = "one")]
    pub zoom: f64,
    #[serde(default = "one")]
    pub gain: f64,
}

fn one() -> f64 {
    1.0
}

impl XDependence {
    pub fn new(coefficient: Expr) -> Self {
        XDependence {
            coefficient,
            zoom: 1.0,
            gain: 1.0,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut z = [0.0; 3];
        for (k, c) in x.iter().enumerate() {
            z[k] = self.zoom * c;
        }
        self.gain * self.coefficient.eval(&z[..x.len()])
    }
}

/// `F(M, x) = c(x) · F̄(M)` with `F̄` one of the Pucci operators, `λ tr M`,
/// or the Bellman maximum `max_j tr(A_j M)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    kind: OperatorKind,
    ell: EllipticityPair,
    dim: usize,
    /// Row-major `dim × dim` coefficient matrices for the Bellman family.
    matrices: Vec<Vec<f64>>,
    x_dependence: Option<XDependence>,
}

impl OperatorSpec {
    pub fn new(
        kind: OperatorKind,
        ell: EllipticityPair,
        dim: usize,
        matrices: Vec<Vec<f64>>,
        x_dependence: Option<XDependence>,
    ) -> Result<Self> {
        match kind {
            OperatorKind::Trace if ell.lambda != ell.big_lambda => {
                return Err(invalid("trace operator requires lambda == Lambda"));
            }
            OperatorKind::HjbFamily => {
                if matrices.is_empty() {
                    return Err(invalid("hjb-family needs at least one coefficient matrix"));
                }
                for (j, a) in matrices.iter().enumerate() {
                    if a.len() != dim * dim {
                        return Err(invalid(format!("matrix {j} is not {dim}x{dim}")));
                    }
                    let m = DMatrix::from_row_slice(dim, dim, a);
                    if (&m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
                        return Err(invalid(format!("matrix {j} is not symmetric")));
                    }
                    let eig = SymmetricEigen::new(m).eigenvalues;
                    let tol = 1e-12 * ell.big_lambda;
                    if eig
                        .iter()
                        .any(|&e| e < ell.lambda - tol || e > ell.big_lambda + tol)
                    {
                        return Err(invalid(format!(
                            "matrix {j} has eigenvalues outside [lambda, Lambda]"
                        )));
                    }
                }
            }
            _ => {}
        }
        Ok(OperatorSpec {
            kind,
            ell,
            dim,
            matrices,
            x_dependence,
        })
    }

    pub fn trace(dim: usize, lambda: f64) -> Result<Self> {
        OperatorSpec::new(
            OperatorKind::Trace,
            EllipticityPair::new(lambda, lambda)?,
            dim,
            vec![],
            None,
        )
    }

    pub fn pucci(dim: usize, ell: EllipticityPair, side: Side) -> Self {
        let kind = match side {
            Side::Plus => OperatorKind::PucciPlus,
            Side::Minus => OperatorKind::PucciMinus,
        };
        OperatorSpec {
            kind,
            ell,
            dim,
            matrices: vec![],
            x_dependence: None,
        }
    }

    pub fn with_x_dependence(mut self, x: XDependence) -> Self {
        self.x_dependence = Some(x);
        self
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn ell(&self) -> &EllipticityPair {
        &self.ell
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrices(&self) -> &[Vec<f64>] {
        &self.matrices
    }

    pub fn x_dependence(&self) -> Option<&XDependence> {
        self.x_dependence.as_ref()
    }

    pub fn coefficient(&self, x: &[f64]) -> f64 {
        self.x_dependence.as_ref().map_or(1.0, |c| c.eval(x))
    }

    /// `F̄(M)`, the `x`-independent part.
    pub fn eval_uniform(&self, m: &DMatrix<f64>) -> f64 {
        match self.kind {
            OperatorKind::PucciPlus => pucci_matrix(m, &self.ell, Side::Plus),
            OperatorKind::PucciMinus => pucci_matrix(m, &self.ell, Side::Minus),
            OperatorKind::Trace => self.ell.lambda * m.trace(),
            OperatorKind::HjbFamily => self
                .matrices
                .iter()
                .map(|a| {
                    let a = DMatrix::from_row_slice(self.dim, self.dim, a);
                    (a * m).trace()
                })
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn eval(&self, m: &DMatrix<f64>, x: &[f64]) -> f64 {
        self.coefficient(x) * self.eval_uniform(m)
    }
}

/// Returns `(M, x) ↦ μ^{−a} F(M, μx)`.
pub fn rescale_operator(op: &OperatorSpec, w: &WeightSpec, mu: f64) -> Result<OperatorSpec> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(invalid(format!("zoom factor must be > 0, got {mu}")));
    }
    let Some(xd) = op.x_dependence.as_ref() else {
        return Err(invalid("rescaling needs an explicit x-dependence"));
    };
    let mut out = op.clone();
    out.x_dependence = Some(XDependence {
        coefficient: xd.coefficient.clone(),
        zoom: xd.zoom * mu,
        gain: xd.gain * mu.powf(-w.a()),
    });
    Ok(out)
}

/// Discretization of `F̄` on a grid with a fixed stencil set.
#[derive(Clone, Debug)]
pub struct DiscreteOperator {
    kind: OperatorKind,
    ell: EllipticityPair,
    stencil: StencilSet,
    step2: Vec<f64>,
    /// Bellman matrices decomposed onto stencil directions.
    hjb: Vec<Vec<f64>>,
}

impl DiscreteOperator {
    pub fn new(op: &OperatorSpec, stencil: &StencilSet, grid: &Grid) -> Result<Self> {
        if op.dim != grid.dim() {
            return Err(invalid("operator and grid dimensions differ"));
        }
        let step2 = stencil.step_lengths2(grid)?;
        let hjb = if op.kind == OperatorKind::HjbFamily {
            op.matrices
                .iter()
                .map(|a| decompose(a, op.dim, stencil))
                .collect::<Result<_>>()?
        } else {
            vec![]
        };
        Ok(DiscreteOperator {
            kind: op.kind,
            ell: op.ell,
            stencil: stencil.clone(),
            step2,
            hjb,
        })
    }

    pub fn stencil(&self) -> &StencilSet {
        &self.stencil
    }

    pub fn num_directions(&self) -> usize {
        self.stencil.directions.len()
    }

    /// Neighbor pair `(x + v, x − v)` for direction `k`.
    pub fn neighbors(&self, grid: &Grid, node: usize, k: usize) -> Option<(usize, usize)> {
        let v = &self.stencil.directions[k];
        Some((grid.neighbor(node, v, 1)?, grid.neighbor(node, v, -1)?))
    }

    pub fn step2(&self, k: usize) -> f64 {
        self.step2[k]
    }

    fn differences(&self, grid: &Grid, u: &[f64], node: usize, out: &mut [f64]) -> Result<()> {
        for (k, slot) in out.iter_mut().enumerate() {
            let (p, m) = self.neighbors(grid, node, k).ok_or_else(|| {
                Error::StencilOutOfDomain {
                    node,
                    direction: self.stencil.directions[k].clone(),
                }
            })?;
            *slot = (u[p] - 2.0 * u[node] + u[m]) / self.step2[k];
        }
        Ok(())
    }

    /// Evaluates `F̄_h(u)` at `node` and writes the coefficients of the
    /// active linear branch, so that `F̄_h(u) = Σ_k coefs[k] · δ²_k u`.
    pub fn linearize(
        &self,
        grid: &Grid,
        u: &[f64],
        node: usize,
        coefs: &mut [f64],
    ) -> Result<f64> {
        let nd = self.num_directions();
        let mut dd = [0.0; 8];
        let dd = &mut dd[..nd];
        self.differences(grid, u, node, dd)?;
        coefs.iter_mut().for_each(|c| *c = 0.0);
        let ell = &self.ell;
        match self.kind {
            OperatorKind::Trace => {
                for &k in &self.stencil.frames[0] {
                    coefs[k] = ell.lambda;
                }
                Ok(self.stencil.frames[0]
                    .iter()
                    .map(|&k| ell.lambda * dd[k])
                    .sum())
            }
            OperatorKind::PucciPlus | OperatorKind::PucciMinus => {
                let side = if self.kind == OperatorKind::PucciPlus {
                    Side::Plus
                } else {
                    Side::Minus
                };
                let frames: Vec<Vec<f64>> = self
                    .stencil
                    .frames
                    .iter()
                    .map(|f| f.iter().map(|&k| dd[k]).collect())
                    .collect();
                let (value, arg) = pucci_select(&frames, ell, side)?;
                let (pos, neg) = match side {
                    Side::Plus => (ell.big_lambda, ell.lambda),
                    Side::Minus => (ell.lambda, ell.big_lambda),
                };
                for &k in &self.stencil.frames[arg] {
                    coefs[k] = if dd[k] > 0.0 { pos } else { neg };
                }
                Ok(value)
            }
            OperatorKind::HjbFamily => {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for (j, c) in self.hjb.iter().enumerate() {
                    let v: f64 = c.iter().zip(dd.iter()).map(|(a, b)| a * b).sum();
                    if v > best {
                        best = v;
                        arg = j;
                    }
                }
                coefs.copy_from_slice(&self.hjb[arg]);
                Ok(best)
            }
        }
    }

    pub fn apply(&self, grid: &Grid, u: &[f64], node: usize) -> Result<f64> {
        let mut coefs = [0.0; 8];
        self.linearize(grid, u, node, &mut coefs[..self.num_directions()])
    }

    /// Largest possible diagonal magnitude `Λ Σ_frame 2/|hv|²` over frames.
    pub fn diagonal_bound(&self) -> f64 {
        let big = match self.kind {
            OperatorKind::Trace => self.ell.lambda,
            OperatorKind::HjbFamily => self
                .hjb
                .iter()
                .flat_map(|c| c.iter().cloned())
                .fold(0.0, f64::max),
            _ => self.ell.big_lambda,
        };
        match self.kind {
            OperatorKind::HjbFamily => self
                .hjb
                .iter()
                .map(|c| c.iter().zip(&self.step2).map(|(a, s)| 2.0 * a / s).sum::<f64>())
                .fold(0.0, f64::max)
                .max(f64::MIN_POSITIVE),
            _ => self
                .stencil
                .frames
                .iter()
                .map(|f| f.iter().map(|&k| 2.0 * big / self.step2[k]).sum::<f64>())
                .fold(0.0, f64::max),
        }
    }
}

/// Writes `A = Σ_k c_k v̂_k v̂_kᵀ` with `c_k ≥ 0` over the stencil directions.
fn decompose(a: &[f64], dim: usize, stencil: &StencilSet) -> Result<Vec<f64>> {
    let mut c = vec![0.0; stencil.directions.len()];
    let tol = 1e-12 * a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    match dim {
        2 if stencil.is_wide() => {
            let (a11, a12, a22) = (a[0], a[1], a[3]);
            c[0] = a11 - a12.abs();
            c[1] = a22 - a12.abs();
            c[2] = 2.0 * a12.max(0.0);
            c[3] = 2.0 * (-a12).max(0.0);
            if c[0] < -tol || c[1] < -tol {
                return Err(invalid(
                    "coefficient matrix is not diagonally dominant; no monotone 9-point decomposition",
                ));
            }
            c[0] = c[0].max(0.0);
            c[1] = c[1].max(0.0);
        }
        _ => {
            for i in 0..dim {
                for j in 0..dim {
                    if i != j && a[i * dim + j].abs() > tol {
                        return Err(invalid(
                            "off-diagonal coefficients need the wide 2D stencil",
                        ));
                    }
                }
                c[i] = a[i * dim + i];
            }
        }
    }
    Ok(c)
}

/// Nodewise `ω(x)·c(x)·F̄_h(u)(x) − f(x)` at interior nodes. Boundary
/// nodes carry `u − g` when boundary data is supplied and 0 otherwise.
pub fn weighted_residual(
    op: &OperatorSpec,
    w: &WeightSpec,
    u: &Field,
    f: &Field,
    stencil: &StencilSet,
    boundary: Option<&Field>,
) -> Result<Field> {
    if !u.same_grid(f) || boundary.is_some_and(|g| !u.same_grid(g)) {
        return Err(invalid("fields live on different grids"));
    }
    let grid = u.grid();
    let disc = DiscreteOperator::new(op, stencil, grid)?;
    let reach = stencil_reach(stencil);
    let mut p = vec![0.0; grid.dim()];
    let mut out = vec![0.0; grid.len()];
    for (i, r) in out.iter_mut().enumerate() {
        if within_reach(grid, i, reach) {
            grid.point_into(i, &mut p);
            let fh = disc.apply(grid, u.values(), i)?;
            *r = w.eval(&p) * op.coefficient(&p) * fh - f.get(i);
        } else if let Some(g) = boundary {
            *r = u.get(i) - g.get(i);
        }
    }
    Field::new(grid.clone(), out)
}

pub(crate) fn stencil_reach(stencil: &StencilSet) -> usize {
    stencil
        .directions
        .iter()
        .flat_map(|v| v.iter().map(|c| c.unsigned_abs() as usize))
        .max()
        .unwrap_or(1)
}

/// True when all stencil neighbors of `node` exist.
pub(crate) fn within_reach(grid: &Grid, node: usize, reach: usize) -> bool {
    let m = grid.multi_index(node);
    m[..grid.dim()]
        .iter()
        .all(|&i| i >= reach && i + reach < grid.n())
}

/// Margins of the degenerate ellipticity sandwich
/// `λω‖N‖ ≤ ω(F̄(M+N) − F̄(M)) ≤ Λω‖N‖` for `N ≥ 0`, with `‖N‖` the sum of
/// positive eigenvalues. Both returned margins are `≥ 0` when it holds.
pub fn ellipticity_margins(
    op: &OperatorSpec,
    w: &WeightSpec,
    x: &[f64],
    m: &DMatrix<f64>,
    n: &DMatrix<f64>,
) -> (f64, f64) {
    let omega = w.eval(x);
    let norm = positive_part_norm(n);
    let diff = omega * (op.eval_uniform(&(m + n)) - op.eval_uniform(m));
    (
        diff - op.ell.lambda * omega * norm,
        op.ell.big_lambda * omega * norm - diff,
    )
}

/// Probe set `I, −I, e_i⊗e_i, e_i⊗e_j + e_j⊗e_i` plus `rank_one` seeded
/// samples `v vᵀ` with `v` uniform on the sphere.
pub fn default_probes(dim: usize, rank_one: usize, seed: u64) -> Vec<DMatrix<f64>> {
    let mut out = vec![DMatrix::identity(dim, dim), -DMatrix::identity(dim, dim)];
    for i in 0..dim {
        let mut m = DMatrix::zeros(dim, dim);
        m[(i, i)] = 1.0;
        out.push(m);
        for j in (i + 1)..dim {
            let mut m = DMatrix::zeros(dim, dim);
            m[(i, j)] = 1.0;
            m[(j, i)] = 1.0;
            out.push(m);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..rank_one {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-12);
        let v = nalgebra::DVector::from_iterator(dim, v.iter().map(|c| c / norm));
        out.push(&v * v.transpose());
    }
    out
}

/// Finite-probe lower bound of `sup_M |F(M,x) − F(M,x₀)| / |M|` with the
/// Frobenius norm.
pub fn oscillation_beta(
    op: &OperatorSpec,
    x0: &[f64],
    x: &[f64],
    probes: &[DMatrix<f64>],
) -> Result<f64> {
    if probes.is_empty() {
        return Err(invalid("oscillation needs at least one probe matrix"));
    }
    let c0 = op.coefficient(x0);
    let c1 = op.coefficient(x);
    let mut best: f64 = 0.0;
    for m in probes {
        let norm = m.norm();
        if norm == 0.0 {
            return Err(invalid("probe matrices must be nonzero"));
        }
        let fbar = op.eval_uniform(m);
        best = best.max((c1 * fbar - c0 * fbar).abs() / norm);
    }
    Ok(best)
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayReport {
    pub radii: Vec<f64>,
    /// `r^{-1} (∫_{B_r(x₀)} β̂^d)^{1/d}` per radius.
    pub values: Vec<f64>,
    /// Log-log slope of `values` against `radii`.
    pub slope: f64,
    /// The `o(r^a)` threshold exponent.
    pub threshold: f64,
    /// `slope > threshold`, i.e. the measured decay beats `r^a`.
    pub beats_threshold: bool,
}

/// Midpoint-rule quadrature of the oscillation integral over balls
/// `B_r(x₀)` using `cells` subcells per axis of the enclosing cube.
pub fn oscillation_decay(
    op: &OperatorSpec,
    w: &WeightSpec,
    x0: &[f64],
    probes: &[DMatrix<f64>],
    radii: &[f64],
    cells: usize,
) -> Result<DecayReport> {
    if radii.len() < 2 {
        return Err(invalid("decay audit needs at least two radii"));
    }
    let d = x0.len();
    let mut values = Vec::with_capacity(radii.len());
    for &r in radii {
        let dx = 2.0 * r / cells as f64;
        let vol = dx.powi(d as i32);
        let mut sum = 0.0;
        let total = cells.pow(d as u32);
        let mut x = vec![0.0; d];
        for lin in 0..total {
            let mut rest = lin;
            let mut r2 = 0.0;
            for k in 0..d {
                let i = rest % cells;
                rest /= cells;
                x[k] = x0[k] - r + (i as f64 + 0.5) * dx;
                r2 += (x[k] - x0[k]).powi(2);
            }
            if r2 <= r * r {
                sum += oscillation_beta(op, x0, &x, probes)?.powi(d as i32) * vol;
            }
        }
        values.push(sum.powf(1.0 / d as f64) / r);
    }
    let lx: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let ly: Vec<f64> = values.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    let slope = crate::regularity::least_squares_slope(&lx, &ly).0;
    Ok(DecayReport {
        radii: radii.to_vec(),
        values,
        slope,
        threshold: w.a(),
        beats_threshold: slope > w.a(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::lattice::{build_grid, sample_field, Grid};

    #[test]
    fn second_difference_examples() {
        let g = build_grid(1, vec![(-1.0, 1.0)], 5, false).unwrap();
        let u = sample_field(&Expr::parse("x1^2").unwrap(), &g).unwrap();
        for i in 1..4 {
            assert_eq!(second_difference(&u, i, &[1]).unwrap(), 2.0);
        }
        let k = sample_field(&Expr::parse("abs(x1)").unwrap(), &g).unwrap();
        assert_eq!(second_difference(&k, 2, &[1]).unwrap(), 2.0 / 0.5);
        assert!(matches!(
            second_difference(&u, 0, &[1]),
            Err(Error::StencilOutOfDomain { node: 0, .. })
        ));

        let g2 = Grid::cube(2, 1.0, 5, false).unwrap();
        let u2 = sample_field(&Expr::parse("x1*x2").unwrap(), &g2).unwrap();
        let c = g2.linear_index(&[2, 2]);
        assert_eq!(second_difference(&u2, c, &[1, 1]).unwrap(), 1.0);
        assert_eq!(second_difference(&u2, c, &[1, -1]).unwrap(), -1.0);
    }

    #[test]
    fn pucci_examples() {
        let unit = EllipticityPair::unit();
        assert_eq!(pucci(&[vec![1.0, 1.0]], &unit, Side::Plus).unwrap(), 2.0);
        let ell = EllipticityPair::new(1.0, 2.0).unwrap();
        assert_eq!(pucci(&[vec![1.0, -1.0]], &ell, Side::Plus).unwrap(), 1.0);
        assert!(pucci(&[], &ell, Side::Plus).is_err());
        // Ties pick the first frame.
        let (_, arg) = pucci_select(&[vec![1.0, 0.0], vec![0.0, 1.0]], &ell, Side::Plus).unwrap();
        assert_eq!(arg, 0);
    }

    #[test]
    fn pucci_on_barrier_spectrum() {
        // Eigenvalues ∝ (−α−1, 1, …, 1): M⁺ = (d−1)Λ − λ(α+1).
        for d in 1..=3usize {
            for big in [1.0, 2.0, 5.0] {
                let ell = EllipticityPair::new(1.0, big).unwrap();
                let alpha = f64::max(1.0, (d as f64 - 1.0) * big - 1.0);
                let mut eig = vec![1.0; d];
                eig[0] = -alpha - 1.0;
                let v = pucci(&[eig], &ell, Side::Plus).unwrap();
                assert_eq!(v, (d as f64 - 1.0) * big - (alpha + 1.0));
                assert!(v <= 0.0);
            }
        }
    }

    #[test]
    fn ellipticity_rejects_bad_pairs() {
        assert!(EllipticityPair::new(2.0, 1.0).is_err());
        assert!(EllipticityPair::new(0.0, 1.0).is_err());
        assert!(OperatorSpec::trace(2, 1.0).is_ok());
        assert!(OperatorSpec::new(
            OperatorKind::Trace,
            EllipticityPair::new(1.0, 2.0).unwrap(),
            2,
            vec![],
            None
        )
        .is_err());
    }

    #[test]
    fn hjb_matrices_are_checked() {
        let ell = EllipticityPair::new(1.0, 2.0).unwrap();
        let ok = OperatorSpec::new(
            OperatorKind::HjbFamily,
            ell,
            2,
            vec![vec![1.5, 0.25, 0.25, 1.5]],
            None,
        );
        assert!(ok.is_ok());
        let bad = OperatorSpec::new(
            OperatorKind::HjbFamily,
            ell,
            2,
            vec![vec![3.0, 0.0, 0.0, 1.0]],
            None,
        );
        assert!(bad.is_err());
        let asym = OperatorSpec::new(
            OperatorKind::HjbFamily,
            ell,
            2,
            vec![vec![1.5, 0.2, 0.1, 1.5]],
            None,
        );
        assert!(asym.is_err());
    }

    #[test]
    fn hjb_discretization_is_exact_on_quadratics() {
        let ell = EllipticityPair::new(1.0, 2.0).unwrap();
        let a = vec![1.5, 0.25, 0.25, 1.2];
        let op = OperatorSpec::new(OperatorKind::HjbFamily, ell, 2, vec![a.clone()], None).unwrap();
        let g = Grid::cube(2, 1.0, 9, false).unwrap();
        let u = sample_field(&Expr::parse("0.3*x1^2 + x1*x2 - 0.7*x2^2").unwrap(), &g).unwrap();
        let disc = DiscreteOperator::new(&op, &StencilSet::wide_2d(), &g).unwrap();
        let m = DMatrix::from_row_slice(2, 2, &[0.6, 1.0, 1.0, -1.4]);
        let want = op.eval_uniform(&m);
        let got = disc.apply(&g, u.values(), g.linear_index(&[4, 4])).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!(DiscreteOperator::new(&op, &StencilSet::axis(2), &g).is_err());
    }

    #[test]
    fn residual_of_discretely_harmonic_quadratic_vanishes() {
        let g = Grid::cube(2, 1.0, 9, true).unwrap();
        let u = sample_field(&Expr::parse("x1^2 - x2^2").unwrap(), &g).unwrap();
        let f = Field::zeros(&g);
        let op = OperatorSpec::trace(2, 1.0).unwrap();
        let w = WeightSpec::flat(0.5).unwrap();
        let r = weighted_residual(&op, &w, &u, &f, &StencilSet::axis(2), None).unwrap();
        assert!(r.max_abs() < 1e-12);
    }

    #[test]
    fn residual_of_linear_function_vanishes_for_every_kind() {
        let g = Grid::cube(2, 1.0, 7, false).unwrap();
        let u = sample_field(&Expr::parse("0.5 + 2*x1 - 3*x2").unwrap(), &g).unwrap();
        let f = Field::zeros(&g);
        let w = WeightSpec::flat(0.7).unwrap();
        let ell = EllipticityPair::new(1.0, 3.0).unwrap();
        for op in [
            OperatorSpec::pucci(2, ell, Side::Plus),
            OperatorSpec::pucci(2, ell, Side::Minus),
            OperatorSpec::trace(2, 2.0).unwrap(),
        ] {
            for s in [StencilSet::axis(2), StencilSet::wide_2d()] {
                let r = weighted_residual(&op, &w, &u, &f, &s, None).unwrap();
                assert!(r.max_abs() < 1e-11);
            }
        }
    }

    #[test]
    fn residual_grid_mismatch() {
        let g1 = Grid::cube(1, 1.0, 5, false).unwrap();
        let g2 = Grid::cube(1, 1.0, 7, false).unwrap();
        let op = OperatorSpec::trace(1, 1.0).unwrap();
        let w = WeightSpec::flat(0.5).unwrap();
        let r = weighted_residual(
            &op,
            &w,
            &Field::zeros(&g1),
            &Field::zeros(&g2),
            &StencilSet::axis(1),
            None,
        );
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn residual_boundary_carries_trace_mismatch() {
        let g = Grid::cube(1, 1.0, 5, false).unwrap();
        let op = OperatorSpec::trace(1, 1.0).unwrap();
        let w = WeightSpec::flat(0.5).unwrap();
        let u = Field::constant(&g, 1.0);
        let gb = Field::constant(&g, 0.25);
        let r = weighted_residual(&op, &w, &u, &Field::zeros(&g), &StencilSet::axis(1), Some(&gb))
            .unwrap();
        assert_eq!(r.get(0), 0.75);
        assert_eq!(r.get(4), 0.75);
        assert_eq!(r.get(2), 0.0);
    }

    /// `|t|^a (|t|^{2−a})″ = (2−a)(1−a)` exactly, so the residual away from
    /// the origin shrinks under refinement.
    #[test]
    fn residual_consistency_on_sharp_profile() {
        let a = 0.5;
        let op = OperatorSpec::trace(1, 1.0).unwrap();
        let w = WeightSpec::flat(a).unwrap();
        let mut errs = vec![];
        let mut hs = vec![];
        for n in [65, 129, 257, 513, 1025] {
            let g = build_grid(1, vec![(-1.0, 1.0)], n, false).unwrap();
            let u = sample_field(&Expr::parse("abs(x1)^1.5").unwrap(), &g).unwrap();
            let f = Field::constant(&g, 0.75);
            let r = weighted_residual(&op, &w, &u, &f, &StencilSet::axis(1), None).unwrap();
            let err = (1..n - 1)
                .filter(|&i| g.point(i)[0].abs() >= 0.25)
                .map(|i| r.get(i).abs())
                .fold(0.0, f64::max);
            errs.push(err);
            hs.push(g.h());
        }
        for k in 1..errs.len() {
            let rate = (errs[k - 1] / errs[k]).ln() / (hs[k - 1] / hs[k]).ln();
            assert!(rate >= 0.5, "rate {rate} at level {k}: {errs:?}");
        }
        assert!(errs.last().unwrap() < &1e-4);
    }

    #[test]
    fn rescaling_examples() {
        let w = WeightSpec::flat(0.5).unwrap();
        let base = OperatorSpec::trace(2, 1.0)
            .unwrap()
            .with_x_dependence(XDependence::new(Expr::parse("abs(x2)^0.5").unwrap()));
        let fixed = rescale_operator(&base, &w, 0.01).unwrap();
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, -0.2]);
        for x in [[0.1, 0.7], [-0.4, -0.05], [0.0, 1.0]] {
            let (a, b) = (base.eval(&m, &x), fixed.eval(&m, &x));
            assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
        }

        let op = OperatorSpec::trace(2, 1.0)
            .unwrap()
            .with_x_dependence(XDependence::new(
                Expr::parse("abs(x2)^0.5 + abs(x2)").unwrap(),
            ));
        let z = rescale_operator(&op, &w, 0.01).unwrap();
        assert!((z.coefficient(&[0.0, 1.0]) - 1.1).abs() < 1e-12);
        assert!((z.coefficient(&[0.3, -0.25]) - (0.5 + 0.1 * 0.25)).abs() < 1e-12);
        assert!(rescale_operator(&op, &w, 0.0).is_err());
        assert!(rescale_operator(&OperatorSpec::trace(2, 1.0).unwrap(), &w, 0.5).is_err());
    }

    #[test]
    fn rescaled_operator_converges_to_model() {
        let w = WeightSpec::flat(0.5).unwrap();
        let op = OperatorSpec::trace(2, 1.0)
            .unwrap()
            .with_x_dependence(XDependence::new(
                Expr::parse("abs(x2)^0.5 + abs(x2)").unwrap(),
            ));
        let model = |m: &DMatrix<f64>, x: &[f64]| x[1].abs().sqrt() * m.trace();
        let probes: Vec<DMatrix<f64>> = default_probes(2, 8, 7)
            .into_iter()
            .map(|m| {
                let n = m.norm();
                m / n
            })
            .collect();
        let xs: Vec<[f64; 2]> = (0..21)
            .flat_map(|i| (0..21).map(move |j| [-1.0 + 0.1 * i as f64, -1.0 + 0.1 * j as f64]))
            .collect();
        let mut prev = f64::INFINITY;
        for k in 1..=10 {
            let z = rescale_operator(&op, &w, 0.5f64.powi(k)).unwrap();
            let sup = xs
                .iter()
                .flat_map(|x| probes.iter().map(move |m| (x, m)))
                .map(|(x, m)| (z.eval(m, x) - model(m, x)).abs())
                .fold(0.0, f64::max);
            assert!(sup < prev, "k={k}: {sup} !< {prev}");
            prev = sup;
        }
        assert!(prev < 0.05);
    }

    #[test]
    fn oscillation_examples() {
        let probes = default_probes(2, 4, 1);
        let flat = OperatorSpec::trace(2, 1.0).unwrap();
        assert_eq!(
            oscillation_beta(&flat, &[0.0, 0.0], &[0.3, 0.4], &probes).unwrap(),
            0.0
        );
        let a = 0.5;
        let op = OperatorSpec::trace(2, 1.0)
            .unwrap()
            .with_x_dependence(XDependence::new(Expr::parse("abs(x2)^0.5").unwrap()));
        let t: f64 = 0.36;
        let b = oscillation_beta(&op, &[0.2, 0.0], &[0.2, t], &probes).unwrap();
        assert!((b - t.powf(a) * 2f64.sqrt()).abs() < 1e-14);
        assert!(oscillation_beta(&op, &[0.0, 0.0], &[0.0, t], &[]).is_err());
    }

    #[test]
    fn oscillation_decay_slope_matches_weight_exponent() {
        // β̂ = √d |x_d|^a around a point of Γ: the normalized integral is
        // exactly proportional to r^a.
        let a = 0.5;
        let w = WeightSpec::flat(a).unwrap();
        let op = OperatorSpec::trace(2, 1.0)
            .unwrap()
            .with_x_dependence(XDependence::new(Expr::parse("abs(x2)^0.5").unwrap()));
        let probes = default_probes(2, 0, 0);
        let rep = oscillation_decay(&op, &w, &[0.0, 0.0], &probes, &[0.5, 0.25, 0.125, 0.0625], 200)
            .unwrap();
        assert!((rep.slope - a).abs() < 1e-3, "slope {}", rep.slope);
        assert!(!rep.beats_threshold || rep.slope > a);
    }

    #[test]
    fn sandwich_holds_for_hjb_family() {
        let ell = EllipticityPair::new(1.0, 3.0).unwrap();
        let op = OperatorSpec::new(
            OperatorKind::HjbFamily,
            ell,
            2,
            vec![
                vec![1.0, 0.0, 0.0, 3.0],
                vec![2.0, 0.5, 0.5, 2.0],
                vec![2.9, -0.1, -0.1, 1.1],
            ],
            None,
        )
        .unwrap();
        let w = WeightSpec::flat(0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let r: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let m = DMatrix::from_row_slice(2, 2, &[r[0], r[1], r[1], r[2]]);
            let b = DMatrix::from_row_slice(2, 2, &[r[3], r[4], r[4], r[5]]);
            let n = &b * b.transpose();
            let x = [r[0] * 0.5, r[5] * 0.5];
            let (lo, hi) = ellipticity_margins(&op, &w, &x, &m, &n);
            assert!(lo >= -1e-12 && hi >= -1e-12, "{lo} {hi}");
        }
    }
}
