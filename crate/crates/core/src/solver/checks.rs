use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lattice::{Field, Grid, WeightSpec};
use crate::operators::{pucci, second_difference, EllipticityPair, Side, StencilSet};

/// `Upper` is the class `ω M⁻(D²u) ≤ f`, `Lower` the class `ω M⁺(D²u) ≥ f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassSide {
    Upper,
    Lower,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub node: usize,
    /// Amount by which the inequality fails (positive).
    pub margin: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MembershipReport {
    pub side: ClassSide,
    pub checked: usize,
    pub violations: Vec<Violation>,
}

impl MembershipReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Nodewise discrete check of the extremal class inequality at every node
/// whose stencil fits in the grid. Violations larger than `tol` are listed.
pub fn extremal_membership(
    u: &Field,
    f: &Field,
    w: &WeightSpec,
    ell: &EllipticityPair,
    s: &StencilSet,
    side: ClassSide,
    tol: f64,
) -> Result<MembershipReport> {
    if !u.same_grid(f) {
        return Err(invalid("u and f live on different grids"));
    }
    let grid = u.grid();
    let pucci_side = match side {
        ClassSide::Upper => Side::Minus,
        ClassSide::Lower => Side::Plus,
    };
    let mut violations = vec![];
    let mut checked = 0;
    let mut x = vec![0.0; grid.dim()];
    for i in 0..grid.len() {
        if grid.is_boundary(i) {
            continue;
        }
        let frames = s
            .frames()
            .iter()
            .map(|fr| {
                fr.iter()
                    .map(|&k| second_difference(u, i, &s.directions()[k]))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        checked += 1;
        grid.point_into(i, &mut x);
        let lhs = w.eval(&x) * pucci(&frames, ell, pucci_side)?;
        let margin = match side {
            ClassSide::Upper => lhs - f.get(i),
            ClassSide::Lower => f.get(i) - lhs,
        };
        if margin > tol {
            violations.push(Violation { node: i, margin });
        }
    }
    Ok(MembershipReport {
        side,
        checked,
        violations,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct NonuniquenessReport {
    pub a: f64,
    pub eps: f64,
    pub slope_plus: f64,
    pub slope_minus: f64,
    /// Interior node coordinates.
    pub nodes: Vec<f64>,
    /// `|t|^a δ²u` at the interior nodes.
    pub node_weight_residual: Vec<f64>,
    /// `(t² + ε²)^{a/2} δ²u` at the interior nodes.
    pub regularized_residual: Vec<f64>,
    pub node_weight_max: f64,
    pub regularized_at_zero: f64,
    /// `ε^a (slope₊ + slope₋) / h`.
    pub predicted_at_zero: f64,
}

/// Residuals of the kink `u(t) = s₊ t₊ + s₋ t₋` (with `t₋ = max(−t, 0)`)
/// for `|t|^a u″ = 0` under the node-weight scheme and under the
/// regularized weight `(t² + ε²)^{a/2}`. The grid must contain `t = 0`.
pub fn nonuniqueness_demo(
    a: f64,
    slope_plus: f64,
    slope_minus: f64,
    grid: &Grid,
    eps: f64,
) -> Result<NonuniquenessReport> {
    if grid.dim() != 1 {
        return Err(invalid("the kink demo is one-dimensional"));
    }
    if !(a > 0.0 && a < 1.0) {
        return Err(invalid(format!("exponent must lie in (0, 1), got {a}")));
    }
    if !(eps > 0.0) {
        return Err(invalid("regularization eps must be > 0"));
    }
    let zero = (0..grid.len())
        .find(|&i| grid.point(i)[0] == 0.0)
        .ok_or_else(|| invalid("grid has no node at t = 0; disable the offset"))?;
    let u = Field::from_fn(grid, |x| {
        slope_plus * x[0].max(0.0) + slope_minus * (-x[0]).max(0.0)
    })?;
    let node_w = WeightSpec::flat(a)?;
    let reg_w = node_w.with_eps(eps)?;
    let mut nodes = vec![];
    let mut nw = vec![];
    let mut rw = vec![];
    let mut at_zero = 0.0;
    for i in 1..grid.len() - 1 {
        let t = grid.point(i);
        let d2 = second_difference(&u, i, &[1])?;
        nodes.push(t[0]);
        nw.push(node_w.eval(&t) * d2);
        let r = reg_w.eval(&t) * d2;
        if i == zero {
            at_zero = r;
        }
        rw.push(r);
    }
    Ok(NonuniquenessReport {
        a,
        eps,
        slope_plus,
        slope_minus,
        node_weight_max: nw.iter().fold(0.0, |m: f64, v| m.max(v.abs())),
        nodes,
        node_weight_residual: nw,
        regularized_residual: rw,
        regularized_at_zero: at_zero,
        predicted_at_zero: eps.powf(a) * (slope_plus + slope_minus) / grid.spacing(0),
    })
}
