use nalgebra::DMatrix;
use proptest::prelude::*;

use degenlab::envelopes::{convex_envelope, eps_envelope, EnvelopeParams, EnvelopeSide};
use degenlab::operators::{pucci_matrix, EllipticityPair, OperatorSpec, Side};
use degenlab::solver::{solve_dirichlet, DirichletProblem};
use degenlab::{build_grid, Field, WeightSpec};

fn symmetric(d: usize, entries: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            m[(i, j)] = entries[k];
            m[(j, i)] = entries[k];
            k += 1;
        }
    }
    m
}

fn ell() -> impl Strategy<Value = EllipticityPair> {
    (0.1f64..3.0, 1.0f64..4.0).prop_map(|(l, r)| EllipticityPair::new(l, l * r).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pucci_duality_and_order(e in prop::collection::vec(-5.0f64..5.0, 6), el in ell()) {
        let m = symmetric(3, &e);
        let plus = pucci_matrix(&m, &el, Side::Plus);
        let minus = pucci_matrix(&m, &el, Side::Minus);
        prop_assert!(minus <= plus + 1e-12);
        prop_assert!((pucci_matrix(&(-&m), &el, Side::Minus) + plus).abs() < 1e-10);
        let tr = m.trace();
        prop_assert!(el.lambda() * tr <= plus + 1e-10 || tr < 0.0);
    }

    #[test]
    fn pucci_plus_is_subadditive(a in prop::collection::vec(-5.0f64..5.0, 3), b in prop::collection::vec(-5.0f64..5.0, 3), el in ell()) {
        let (ma, mb) = (symmetric(2, &a), symmetric(2, &b));
        let lhs = pucci_matrix(&(&ma + &mb), &el, Side::Plus);
        let rhs = pucci_matrix(&ma, &el, Side::Plus) + pucci_matrix(&mb, &el, Side::Plus);
        prop_assert!(lhs <= rhs + 1e-10);
    }

    #[test]
    fn pucci_is_elliptic(e in prop::collection::vec(-5.0f64..5.0, 3), p in prop::collection::vec(0.0f64..3.0, 2), el in ell()) {
        // Adding a nonnegative matrix N moves M⁺ by between λ tr N and Λ tr N.
        let m = symmetric(2, &e);
        let v = DMatrix::from_column_slice(2, 1, &p);
        let n = &v * v.transpose();
        let step = pucci_matrix(&(&m + &n), &el, Side::Plus) - pucci_matrix(&m, &el, Side::Plus);
        let tr = n.trace();
        prop_assert!(step >= el.lambda() * tr - 1e-9);
        prop_assert!(step <= el.big_lambda() * tr + 1e-9);
    }

    #[test]
    fn weight_is_even_and_grows_away_from_the_interface(a in 0.05f64..1.5, eps in 0.0f64..0.5, s in 0.0f64..2.0, t in 0.0f64..2.0) {
        let w = WeightSpec::flat(a).unwrap().with_eps(eps).unwrap();
        prop_assert_eq!(w.eval_offset(s), w.eval_offset(-s));
        let (lo, hi) = if s < t { (s, t) } else { (t, s) };
        prop_assert!(w.eval_offset(lo) <= w.eval_offset(hi));
    }

    #[test]
    fn envelope_is_monotone_and_commutes_with_constants(
        u in prop::collection::vec(-1.0f64..1.0, 41),
        bump in prop::collection::vec(0.0f64..0.5, 41),
        c in -3.0f64..3.0,
        eps in 0.02f64..0.3,
    ) {
        let grid = build_grid(1, vec![(-1.0, 1.0)], 41, false).unwrap();
        let all = vec![true; 41];
        let inner = grid.mask_where(|x| x[0].abs() < 0.9);
        let p = EnvelopeParams::new(&grid, eps, all, inner).unwrap();
        let uf = Field::new(grid.clone(), u.clone()).unwrap();
        let vf = Field::new(grid.clone(), u.iter().zip(&bump).map(|(a, b)| a + b).collect()).unwrap();
        for side in [EnvelopeSide::Upper, EnvelopeSide::Lower] {
            let eu = eps_envelope(&uf, &p, side).unwrap().envelope;
            let ev = eps_envelope(&vf, &p, side).unwrap().envelope;
            for i in 0..41 {
                prop_assert!(eu.get(i) <= ev.get(i) + 1e-12);
                match side {
                    EnvelopeSide::Upper => prop_assert!(eu.get(i) >= uf.get(i)),
                    EnvelopeSide::Lower => prop_assert!(eu.get(i) <= uf.get(i)),
                }
            }
            let shifted = eps_envelope(&uf.map(|v| v + c).unwrap(), &p, side).unwrap().envelope;
            prop_assert!(shifted.max_abs_diff(&eu.map(|v| v + c).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn convex_envelope_is_a_convex_minorant(u in prop::collection::vec(-1.0f64..1.0, 33)) {
        let grid = build_grid(1, vec![(-1.0, 1.0)], 33, false).unwrap();
        let f = Field::new(grid, u).unwrap();
        let env = convex_envelope(&f, &vec![true; 33], None).unwrap();
        let g = env.gamma.values();
        for (gi, fi) in g.iter().zip(f.values()) {
            prop_assert!(*gi <= fi + 1e-12);
        }
        for i in 1..32 {
            prop_assert!(g[i + 1] - 2.0 * g[i] + g[i - 1] >= -1e-12);
        }
        prop_assert!(env.contact.count >= 2);
    }
}

fn pucci_problem(a: f64, eps: f64, f: &[f64], g: &[f64]) -> DirichletProblem {
    let grid = build_grid(2, vec![(-1.0, 1.0); 2], 9, false).unwrap();
    let op = OperatorSpec::pucci(2, EllipticityPair::new(1.0, 2.0).unwrap(), Side::Plus);
    let w = WeightSpec::flat(a).unwrap().with_eps(eps).unwrap();
    DirichletProblem::new(op, w, Field::new(grid.clone(), f.to_vec()).unwrap(), Field::new(grid, g.to_vec()).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn discrete_maximum_principle(
        a in 0.1f64..0.9,
        eps in 0.05f64..0.5,
        f in prop::collection::vec(0.0f64..2.0, 81),
        g in prop::collection::vec(-1.0f64..1.0, 81),
    ) {
        // ω M⁺(D²u) = f ≥ 0 makes u a subsolution, so it peaks on the boundary.
        let p = pucci_problem(a, eps, &f, &g);
        let rep = solve_dirichlet(&p).unwrap();
        prop_assert!(rep.converged);
        let grid = &p.grid;
        let top = (0..grid.len()).filter(|&i| grid.is_boundary(i)).map(|i| g[i]).fold(f64::NEG_INFINITY, f64::max);
        for i in 0..grid.len() {
            prop_assert!(rep.solution.get(i) <= top + 1e-9);
        }
    }

    #[test]
    fn comparison_principle(
        a in 0.1f64..0.9,
        eps in 0.05f64..0.5,
        f in prop::collection::vec(-1.0f64..1.0, 81),
        df in prop::collection::vec(0.0f64..1.0, 81),
        g in prop::collection::vec(-1.0f64..1.0, 81),
        dg in prop::collection::vec(0.0f64..1.0, 81),
    ) {
        // Larger source and smaller boundary data give the smaller solution.
        let f_hi: Vec<f64> = f.iter().zip(&df).map(|(a, b)| a + b).collect();
        let g_lo: Vec<f64> = g.iter().zip(&dg).map(|(a, b)| a - b).collect();
        let lo = solve_dirichlet(&pucci_problem(a, eps, &f_hi, &g_lo)).unwrap();
        let hi = solve_dirichlet(&pucci_problem(a, eps, &f, &g)).unwrap();
        prop_assert!(lo.converged && hi.converged);
        for i in 0..81 {
            prop_assert!(lo.solution.get(i) <= hi.solution.get(i) + 1e-9);
        }
    }
}
