//! Weighted ABP evaluation, the explicit barrier and its verification, the
//! measure estimate and a Harnack ratio probe.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envelopes::{convex_envelope, ContactSet, ExtendByZero};
use crate::error::{invalid, Error, Result};
use crate::lattice::{build_grid, Field, Grid, Mask, WeightSpec};
use crate::operators::EllipticityPair;

/// `φ(x) = M₁ − M₂|x|^{−α}` for `|x| ≥ 1/4`, continued inside by the even
/// quartic `c₀ + c₂r² + c₄r⁴` that matches value, slope and curvature at
/// `r = 1/4`. The constants put the level `0` on `|x| = 2√d` and the level
/// `−2` on `|x| = 3√d/2`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BarrierSpec {
    pub d: usize,
    pub ell: EllipticityPair,
    pub alpha: f64,
    pub m1: f64,
    pub m2: f64,
    pub inner_radius: f64,
    pub quartic: [f64; 3],
}

pub fn build_barrier(d: usize, ell: EllipticityPair) -> Result<BarrierSpec> {
    if !(1..=3).contains(&d) {
        return Err(invalid(format!("dimension must be 1, 2 or 3, got {d}")));
    }
    let df = d as f64;
    let alpha = f64::max(1.0, (df - 1.0) * ell.big_lambda() / ell.lambda() - 1.0);
    let r_zero = 2.0 * df.sqrt();
    let r_two = 1.5 * df.sqrt();
    let m2 = 2.0 / (r_two.powf(-alpha) - r_zero.powf(-alpha));
    let m1 = m2 * r_zero.powf(-alpha);
    let r0: f64 = 0.25;
    let d1 = m2 * alpha * r0.powf(-alpha - 1.0);
    let d2 = -m2 * alpha * (alpha + 1.0) * r0.powf(-alpha - 2.0);
    let c4 = (d2 * r0 - d1) / (8.0 * r0.powi(3));
    let c2 = (d1 - 4.0 * c4 * r0.powi(3)) / (2.0 * r0);
    let c0 = (m1 - m2 * r0.powf(-alpha)) - c2 * r0 * r0 - c4 * r0.powi(4);
    Ok(BarrierSpec {
        d,
        ell,
        alpha,
        m1,
        m2,
        inner_radius: r0,
        quartic: [c0, c2, c4],
    })
}

impl BarrierSpec {
    /// `φ` as a function of `|x|²`.
    pub fn phi_r2(&self, r2: f64) -> f64 {
        if r2 >= self.inner_radius * self.inner_radius {
            self.m1 - self.m2 * r2.powf(-0.5 * self.alpha)
        } else {
            let [c0, c2, c4] = self.quartic;
            c0 + r2 * (c2 + c4 * r2)
        }
    }

    pub fn phi(&self, x: &[f64]) -> f64 {
        self.phi_r2(x.iter().map(|c| c * c).sum())
    }

    /// `M₂α|x|^{−α−2} (−α−1, 1, …, 1)`, the spectrum of `D²φ` outside the
    /// inner ball.
    pub fn hessian_eigenvalues(&self, r: f64) -> Vec<f64> {
        let s = self.m2 * self.alpha * r.powf(-self.alpha - 2.0);
        let mut out = vec![s; self.d];
        out[0] = -(self.alpha + 1.0) * s;
        out
    }

    /// Closed-form `M⁺(D²φ)` for `|x| > 1/4`.
    pub fn pucci_plus(&self, r: f64) -> f64 {
        let s = self.m2 * self.alpha * r.powf(-self.alpha - 2.0);
        s * ((self.d as f64 - 1.0) * self.ell.big_lambda() - self.ell.lambda() * (self.alpha + 1.0))
    }
}

/// Bump `ξ(x) = Π (1 − 4x_i²)²` on `Q̄₁ = [−1/2, 1/2]^d`, zero outside;
/// `ξ(0) = 1`.
pub fn bump(x: &[f64]) -> f64 {
    x.iter()
        .map(|&c| {
            if c.abs() >= 0.5 {
                0.0
            } else {
                (1.0 - 4.0 * c * c).powi(2)
            }
        })
        .product()
}

/// Grid with spacing exactly `h` covering `[−2√d, 2√d]^d`, with a node at 0.
pub fn barrier_grid(d: usize, h: f64) -> Result<Grid> {
    if !(h > 0.0) {
        return Err(invalid("spacing must be positive"));
    }
    let half_cells = (2.0 * (d as f64).sqrt() / h - 1e-9).ceil() as usize;
    let half = half_cells as f64 * h;
    build_grid(d, vec![(-half, half); d], 2 * half_cells + 1, false)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct NodeValue {
    pub value: f64,
    pub node: usize,
}

impl NodeValue {
    fn new() -> Self {
        NodeValue {
            value: f64::NEG_INFINITY,
            node: usize::MAX,
        }
    }

    /// Max by value, lowest node on ties: order independent.
    fn offer(&mut self, value: f64, node: usize) {
        if value > self.value || (value == self.value && node < self.node) {
            self.value = value;
            self.node = node;
        }
    }

    fn merge(mut self, o: NodeValue) -> NodeValue {
        self.offer(o.value, o.node);
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct BarrierAcc {
    outside_neg: NodeValue,
    q3_max: NodeValue,
    outer: NodeValue,
    inner_ratio: NodeValue,
    inner_max: NodeValue,
    outer_count: usize,
    inner_count: usize,
}

impl BarrierAcc {
    fn new() -> Self {
        BarrierAcc {
            outside_neg: NodeValue::new(),
            q3_max: NodeValue::new(),
            outer: NodeValue::new(),
            inner_ratio: NodeValue::new(),
            inner_max: NodeValue::new(),
            outer_count: 0,
            inner_count: 0,
        }
    }

    fn merge(self, o: BarrierAcc) -> BarrierAcc {
        BarrierAcc {
            outside_neg: self.outside_neg.merge(o.outside_neg),
            q3_max: self.q3_max.merge(o.q3_max),
            outer: self.outer.merge(o.outer),
            inner_ratio: self.inner_ratio.merge(o.inner_ratio),
            inner_max: self.inner_max.merge(o.inner_max),
            outer_count: self.outer_count + o.outer_count,
            inner_count: self.inner_count + o.inner_count,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BarrierReport {
    pub d: usize,
    pub lambda: f64,
    pub big_lambda: f64,
    pub alpha: f64,
    pub m1: f64,
    pub m2: f64,
    pub h: f64,
    pub equality_case: bool,
    /// `min φ` over nodes with `|x| ≥ 2√d`.
    pub outside_min_phi: f64,
    pub outside_ok: bool,
    /// `max φ` over `Q₃`.
    pub q3_max_phi: f64,
    pub q3_ok: bool,
    /// `max ω M⁺(D²_h φ)` over nodes with `|x| > 1/4 + h`.
    pub outer_max: f64,
    pub outer_worst: Vec<f64>,
    pub outer_nodes: usize,
    pub outer_tol: f64,
    pub outer_ok: bool,
    /// Smallest `C` with `ω M⁺(D²_h φ) ≤ C ξ` on the remaining nodes.
    pub inner_constant: f64,
    pub inner_nodes: usize,
    pub eig_max_rel_err: f64,
    pub eig_ok: bool,
    pub passed: bool,
}

pub const BARRIER_TOL: f64 = 1e-6;

/// Checks the level conditions, the supersolution inequality away from the
/// origin, the bump-controlled inequality near it, and the closed-form
/// Hessian spectrum (via a finite-difference Hessian). The discrete Pucci
/// operator uses the axis frame; `φ` is evaluated in closed form at every
/// stencil point.
pub fn verify_barrier(b: &BarrierSpec, w: &WeightSpec, grid: &Grid) -> Result<BarrierReport> {
    let d = b.d;
    if grid.dim() != d || !grid.has_uniform_spacing() {
        return Err(invalid("barrier grid must match the dimension and be uniform"));
    }
    let need = 2.0 * (d as f64).sqrt();
    if grid
        .bounds()
        .iter()
        .any(|&(lo, hi)| lo > -need + 1e-9 || hi < need - 1e-9)
    {
        return Err(invalid(format!("grid must cover the box [-{need}, {need}]^{d}")));
    }
    let h = grid.h();
    let (lam, big) = (b.ell.lambda(), b.ell.big_lambda());
    let r_out2 = 4.0 * d as f64;
    let inner = b.inner_radius + h;
    let lin_tol = 1e-12 * b.m1.abs().max(1.0);
    let n = grid.n();

    let acc = (0..grid.len())
        .into_par_iter()
        .fold(BarrierAcc::new, |mut acc, i| {
            let m = grid.multi_index(i);
            let mut x = [0.0; 3];
            for k in 0..d {
                x[k] = grid.axis_coord(k, m[k]);
            }
            let x = &x[..d];
            let r2: f64 = x.iter().map(|c| c * c).sum();
            let phi0 = b.phi_r2(r2);
            if r2 >= r_out2 * (1.0 - 1e-12) {
                acc.outside_neg.offer(-phi0, i);
            }
            if x.iter().all(|c| c.abs() <= 1.5 * (1.0 + 1e-12)) {
                acc.q3_max.offer(phi0, i);
            }
            if m[..d].iter().any(|&j| j == 0 || j + 1 == n) {
                return acc;
            }
            let mut mplus = 0.0;
            for &c in x {
                let ph = b.phi_r2(r2 + 2.0 * h * c + h * h);
                let mh = b.phi_r2(r2 - 2.0 * h * c + h * h);
                let dd = (ph - 2.0 * phi0 + mh) / (h * h);
                mplus += if dd > 0.0 { big * dd } else { lam * dd };
            }
            let val = w.eval(x) * mplus;
            if r2.sqrt() > inner {
                acc.outer.offer(val, i);
                acc.outer_count += 1;
            } else {
                acc.inner_max.offer(val, i);
                acc.inner_ratio.offer(val.max(0.0) / bump(x), i);
                acc.inner_count += 1;
            }
            acc
        })
        .reduce(BarrierAcc::new, BarrierAcc::merge);

    let eig_err = eigen_cross_check(b, 17);
    let equality_case = ((d as f64 - 1.0) * big / lam - 1.0 - b.alpha).abs() < 1e-12;
    let outside_min_phi = -acc.outside_neg.value;
    let outside_ok = outside_min_phi >= -lin_tol;
    let q3_ok = acc.q3_max.value <= -2.0 + lin_tol;
    let outer_ok = acc.outer.value <= BARRIER_TOL;
    let eig_ok = eig_err <= 1e-4;
    let outer_worst = if acc.outer.node == usize::MAX {
        vec![]
    } else {
        grid.point(acc.outer.node)
    };
    Ok(BarrierReport {
        d,
        lambda: lam,
        big_lambda: big,
        alpha: b.alpha,
        m1: b.m1,
        m2: b.m2,
        h,
        equality_case,
        outside_min_phi,
        outside_ok,
        q3_max_phi: acc.q3_max.value,
        q3_ok,
        outer_max: acc.outer.value,
        outer_worst,
        outer_nodes: acc.outer_count,
        outer_tol: BARRIER_TOL,
        outer_ok,
        inner_constant: acc.inner_ratio.value.max(0.0),
        inner_nodes: acc.inner_count,
        eig_max_rel_err: eig_err,
        eig_ok,
        passed: outside_ok && q3_ok && outer_ok && eig_ok,
    })
}

/// Largest relative deviation between the eigenvalues of a central
/// finite-difference Hessian of `φ` and the closed form, over seeded
/// sample points at radii 0.5, 1 and 2.
fn eigen_cross_check(b: &BarrierSpec, seed: u64) -> f64 {
    let d = b.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs: Vec<Vec<f64>> = vec![
        (0..d).map(|k| if k == 0 { 1.0 } else { 0.0 }).collect(),
        vec![1.0 / (d as f64).sqrt(); d],
    ];
    for _ in 0..3 {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let nrm = v.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-3);
        dirs.push(v.iter().map(|c| c / nrm).collect());
    }
    let mut worst: f64 = 0.0;
    for r in [0.5, 1.0, 2.0] {
        for dir in &dirs {
            let x: Vec<f64> = dir.iter().map(|c| c * r).collect();
            let del = 1e-3 * r;
            let f = |dx: &[f64]| {
                let y: Vec<f64> = x.iter().zip(dx).map(|(a, b)| a + b).collect();
                b.phi(&y)
            };
            let mut hess = DMatrix::zeros(d, d);
            for i in 0..d {
                for j in i..d {
                    let mut e = [[0.0; 3]; 4];
                    let signs = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];
                    let mut vals = [0.0; 4];
                    for (k, (si, sj)) in signs.iter().enumerate() {
                        e[k][i] += si * del;
                        e[k][j] += sj * del;
                        vals[k] = f(&e[k][..d]);
                    }
                    let v = (vals[0] - vals[1] - vals[2] + vals[3]) / (4.0 * del * del);
                    hess[(i, j)] = v;
                    hess[(j, i)] = v;
                }
            }
            let mut got: Vec<f64> = SymmetricEigen::new(hess).eigenvalues.iter().copied().collect();
            got.sort_by(f64::total_cmp);
            let mut want = b.hessian_eigenvalues(r);
            want.sort_by(f64::total_cmp);
            let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (g, w) in got.iter().zip(&want) {
                worst = worst.max((g - w).abs() / scale);
            }
        }
    }
    worst
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AbpConvention {
    /// `Γ_u` is the convex envelope of `min(u, 0)` over `B_R`.
    #[default]
    BallOnly,
    /// `min(u, 0)` on `B_R`, extended by 0 to `B_{2R}` before convexifying.
    ExtendToDouble,
}

#[derive(Clone, Debug, Serialize)]
pub struct AbpReport {
    pub convention: AbpConvention,
    pub radius: f64,
    pub sup_u_minus: f64,
    /// `(∫_{contact ∩ B_R} (f⁺)^d ω^{−d})^{1/d}` by the cell-volume rule.
    pub integral: f64,
    pub c_hat: f64,
    pub contact: ContactSet,
    pub hull_converged: bool,
}

/// Evaluates the weighted ABP quantities on the discrete ball `B_R(center)`.
pub fn abp_estimate(
    u: &Field,
    f: &Field,
    w: &WeightSpec,
    center: &[f64],
    radius: f64,
    convention: AbpConvention,
) -> Result<AbpReport> {
    if !u.same_grid(f) {
        return Err(invalid("u and f live on different grids"));
    }
    let grid = u.grid();
    if center.len() != grid.dim() || !(radius > 0.0) {
        return Err(invalid("ball must match the grid dimension and have R > 0"));
    }
    let ball = grid.ball_mask(center, radius);
    let boundary = discrete_boundary(grid, &ball);
    if let Some(i) = (0..grid.len()).find(|&i| boundary[i] && u.get(i) < 0.0) {
        return Err(Error::Precondition(format!(
            "u = {} < 0 at boundary node {i} of the ball",
            u.get(i)
        )));
    }
    let sup_u_minus = (0..grid.len())
        .filter(|&i| ball[i])
        .map(|i| -u.get(i))
        .fold(0.0, f64::max);
    let env = match convention {
        AbpConvention::BallOnly => {
            let v = u.map(|x| x.min(0.0))?;
            convex_envelope(&v, &ball, None)?
        }
        AbpConvention::ExtendToDouble => {
            let big = grid.ball_mask(center, 2.0 * radius);
            let ext = ExtendByZero {
                center: center.to_vec(),
                radius,
            };
            convex_envelope(u, &big, Some(&ext))?
        }
    };
    let d = grid.dim() as i32;
    let vol = grid.cell_volume();
    let mut sum = 0.0;
    let mut x = vec![0.0; grid.dim()];
    for i in (0..grid.len()).filter(|&i| ball[i] && env.contact.mask[i]) {
        let fp = f.get(i).max(0.0);
        if fp == 0.0 {
            continue;
        }
        grid.point_into(i, &mut x);
        sum += (fp / w.eval(&x)).powi(d) * vol;
    }
    let integral = sum.powf(1.0 / d as f64);
    let c_hat = if sup_u_minus == 0.0 {
        0.0
    } else {
        sup_u_minus / (radius * integral)
    };
    let mut contact = env.contact;
    contact.mask = contact.mask.iter().zip(&ball).map(|(&c, &b)| c && b).collect();
    contact.count = contact.mask.iter().filter(|&&c| c).count();
    contact.measure = contact.count as f64 * vol;
    Ok(AbpReport {
        convention,
        radius,
        sup_u_minus,
        integral,
        c_hat,
        contact,
        hull_converged: env.converged,
    })
}

/// Nodes of `region` with an axis neighbor outside it (or off the grid).
pub fn discrete_boundary(grid: &Grid, region: &Mask) -> Mask {
    (0..grid.len())
        .map(|i| {
            region[i]
                && (0..grid.dim()).any(|axis| {
                    let mut dir = [0i32; 3];
                    dir[axis] = 1;
                    [-1, 1].iter().any(|&s| {
                        grid.neighbor(i, &dir[..grid.dim()], s)
                            .is_none_or(|j| !region[j])
                    })
                })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct MeasureReport {
    pub applicable: bool,
    pub reason: Option<String>,
    pub level: f64,
    /// Cell-counted measure of `{u ≤ M} ∩ Q₁`.
    pub measure: f64,
    pub q1_measure: f64,
    /// `‖f ω^{−1}‖_{L^d}` over the large cube.
    pub source_norm: f64,
    pub mu: f64,
    pub exceeds_mu: bool,
}

/// Cell-counted `|{u ≤ M} ∩ Q₁|` under the gate `u ≥ 0` on the large cube
/// and `inf_{Q₃} u ≤ 1`. A failed gate marks the report not applicable.
#[allow(clippy::too_many_arguments)]
pub fn measure_estimate_check(
    u: &Field,
    f: &Field,
    w: &WeightSpec,
    level: f64,
    q1: &Mask,
    q3: &Mask,
    q_big: &Mask,
    mu: f64,
) -> Result<MeasureReport> {
    if !u.same_grid(f) {
        return Err(invalid("u and f live on different grids"));
    }
    let grid = u.grid();
    let n = grid.len();
    if q1.len() != n || q3.len() != n || q_big.len() != n {
        return Err(invalid("cube masks do not match the grid"));
    }
    let vol = grid.cell_volume();
    let d = grid.dim() as i32;
    let mut x = vec![0.0; grid.dim()];
    let mut norm = 0.0;
    for i in (0..n).filter(|&i| q_big[i]) {
        grid.point_into(i, &mut x);
        let om = w.eval(&x);
        let v = f.get(i);
        if v != 0.0 {
            norm += (v / om).abs().powi(d) * vol;
        }
    }
    let source_norm = norm.powf(1.0 / d as f64);
    let q1_measure = q1.iter().filter(|&&b| b).count() as f64 * vol;
    let mut reason = None;
    if (0..n).any(|i| q_big[i] && u.get(i) < 0.0) {
        reason = Some("u is negative somewhere on the large cube".to_string());
    } else {
        let inf3 = (0..n)
            .filter(|&i| q3[i])
            .map(|i| u.get(i))
            .fold(f64::INFINITY, f64::min);
        if !(inf3 <= 1.0) {
            reason = Some(format!("inf over Q3 is {inf3} > 1"));
        }
    }
    let measure = if reason.is_none() {
        (0..n).filter(|&i| q1[i] && u.get(i) <= level).count() as f64 * vol
    } else {
        0.0
    };
    Ok(MeasureReport {
        applicable: reason.is_none(),
        reason,
        level,
        measure,
        q1_measure,
        source_norm,
        mu,
        exceeds_mu: measure > mu,
    })
}

/// `sup u / inf u` over `mask`.
pub fn harnack_ratio_probe(u: &Field, mask: &Mask) -> Result<f64> {
    if mask.len() != u.grid().len() {
        return Err(invalid("mask does not match the grid"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let v = u.get(i);
        if !(v > 0.0) {
            return Err(invalid(format!("u = {v} is not positive at node {i}")));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo.is_infinite() {
        return Err(invalid("empty mask"));
    }
    Ok(hi / lo)
}

/// `ω M⁺(D²_h φ)` at every interior node, boundary nodes 0: the source
/// that makes `φ + c` an exact discrete solution of the Pucci equation.
pub fn barrier_residual(b: &BarrierSpec, w: &WeightSpec, grid: &Grid) -> Result<Field> {
    let phi = Field::from_fn(grid, |x| b.phi(x))?;
    let op = crate::operators::OperatorSpec::pucci(grid.dim(), b.ell, crate::operators::Side::Plus);
    crate::operators::weighted_residual(
        &op,
        &w.clone(),
        &phi,
        &Field::zeros(grid),
        &crate::operators::StencilSet::axis(grid.dim()),
        None,
    )
}
