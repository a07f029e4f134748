//! Sparse linear solves for a frozen policy of the monotone scheme.
//!
//! The matrices are M-matrices (positive diagonal, nonpositive
//! off-diagonal, weakly diagonally dominant with strict dominance next to
//! the boundary), so Thomas, CG and BiCGSTAB are all well behaved.

/// Compressed sparse rows with the diagonal stored separately.
#[derive(Clone, Debug, Default)]
pub struct Csr {
    pub diag: Vec<f64>,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Csr {
    pub fn with_capacity(rows: usize, nnz: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(rows + 1);
        row_ptr.push(0);
        Csr {
            diag: Vec::with_capacity(rows),
            row_ptr,
            cols: Vec::with_capacity(nnz),
            vals: Vec::with_capacity(nnz),
        }
    }

    pub fn rows(&self) -> usize {
        self.diag.len()
    }

    pub fn push_entry(&mut self, col: usize, val: f64) {
        self.cols.push(col);
        self.vals.push(val);
    }

    pub fn finish_row(&mut self, diag: f64) {
        self.diag.push(diag);
        self.row_ptr.push(self.cols.len());
    }

    pub fn mul_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = self.diag[i] * x[i];
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            *yi = s;
        }
    }

    /// Tridiagonal view `(sub, sup)` when every row couples only to its
    /// immediate predecessor and successor.
    fn tridiagonal(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let n = self.rows();
        let mut sub = vec![0.0; n];
        let mut sup = vec![0.0; n];
        for i in 0..n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let c = self.cols[k];
                if c + 1 == i {
                    sub[i] += self.vals[k];
                } else if c == i + 1 {
                    sup[i] += self.vals[k];
                } else {
                    return None;
                }
            }
        }
        Some((sub, sup))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Thomas,
    ConjugateGradient,
    BiCgStab,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearOutcome {
    pub kernel: Kernel,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves `A x = b`, starting from the contents of `x`. Iterative kernels
/// stop once `max_i scale[i]·|r_i| ≤ target`.
pub fn solve(
    a: &Csr,
    b: &[f64],
    x: &mut [f64],
    symmetric: bool,
    scale: &[f64],
    target: f64,
    max_iters: usize,
) -> LinearOutcome {
    if let Some((sub, sup)) = a.tridiagonal() {
        thomas(&sub, &a.diag, &sup, b, x);
        return LinearOutcome {
            kernel: Kernel::Thomas,
            iterations: 1,
            converged: true,
        };
    }
    if symmetric {
        cg(a, b, x, scale, target, max_iters)
    } else {
        bicgstab(a, b, x, scale, target, max_iters)
    }
}

fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], b: &[f64], x: &mut [f64]) {
    let n = diag.len();
    if n == 0 {
        return;
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = sup[0] / diag[0];
    d[0] = b[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - sub[i] * c[i - 1];
        c[i] = sup[i] / m;
        d[i] = (b[i] - sub[i] * d[i - 1]) / m;
    }
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn scaled_max(r: &[f64], scale: &[f64]) -> f64 {
    r.iter()
        .zip(scale)
        .map(|(v, s)| (v * s).abs())
        .fold(0.0, f64::max)
}

fn cg(a: &Csr, b: &[f64], x: &mut [f64], scale: &[f64], target: f64, max_iters: usize) -> LinearOutcome {
    let n = a.rows();
    let mut r = vec![0.0; n];
    a.mul_into(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    // Jacobi preconditioning: z = D⁻¹ r.
    let mut z: Vec<f64> = r.iter().zip(&a.diag).map(|(v, d)| v / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for it in 0..max_iters {
        if scaled_max(&r, scale) <= target {
            return LinearOutcome {
                kernel: Kernel::ConjugateGradient,
                iterations: it,
                converged: true,
            };
        }
        a.mul_into(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        // Refresh the recursive residual now and then to curb drift.
        if it % 500 == 499 {
            a.mul_into(x, &mut r);
            for i in 0..n {
                r[i] = b[i] - r[i];
            }
        }
        for i in 0..n {
            z[i] = r[i] / a.diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    LinearOutcome {
        kernel: Kernel::ConjugateGradient,
        iterations: max_iters,
        converged: scaled_max(&r, scale) <= target,
    }
}

fn bicgstab(
    a: &Csr,
    b: &[f64],
    x: &mut [f64],
    scale: &[f64],
    target: f64,
    max_iters: usize,
) -> LinearOutcome {
    let n = a.rows();
    let inv: Vec<f64> = a.diag.iter().map(|d| 1.0 / d).collect();
    let mut r = vec![0.0; n];
    a.mul_into(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut zz = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 0..max_iters {
        if scaled_max(&r, scale) <= target {
            return LinearOutcome {
                kernel: Kernel::BiCgStab,
                iterations: it,
                converged: true,
            };
        }
        let rho_new = dot(&r0, &r);
        if rho_new == 0.0 || omega == 0.0 {
            // Breakdown: restart from the current iterate.
            a.mul_into(x, &mut r);
            for i in 0..n {
                r[i] = b[i] - r[i];
            }
            r0.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            v.iter_mut().for_each(|e| *e = 0.0);
            p.iter_mut().for_each(|e| *e = 0.0);
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = inv[i] * p[i];
        }
        a.mul_into(&y, &mut v);
        alpha = rho / dot(&r0, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if scaled_max(&s, scale) <= target {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return LinearOutcome {
                kernel: Kernel::BiCgStab,
                iterations: it + 1,
                converged: true,
            };
        }
        for i in 0..n {
            zz[i] = inv[i] * s[i];
        }
        a.mul_into(&zz, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * zz[i];
            r[i] = s[i] - omega * t[i];
        }
    }
    LinearOutcome {
        kernel: Kernel::BiCgStab,
        iterations: max_iters,
        converged: scaled_max(&r, scale) <= target,
    }
}
