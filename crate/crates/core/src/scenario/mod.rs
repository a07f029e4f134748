//! Scenario runner: TOML configs, validation, step execution and the run
//! manifest.
//!
//! A config names a scenario, optionally describes one Dirichlet problem
//! (`[grid]`, `[weight]`, `[operator]`, `[solver]`) and lists `[[step]]`
//! entries that run in order. Everything is validated before the first
//! step starts. Each step writes a JSON report and, where the data is
//! tabular, a CSV file into the output directory; `manifest.json` lists
//! them with per-step status and timing.

pub mod config;
pub mod suite;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use config::{ScenarioConfig, StepConfig};

use crate::envelopes::{envelope_audit, random_piecewise_linear, EnvelopeParams, DEFAULT_SEEDS};
use crate::error::{Error, Result};
use crate::estimates::{abp_estimate, barrier_grid, build_barrier, verify_barrier, AbpConvention};
use crate::expr::Expr;
use crate::lattice::{build_grid, sample_field, Field, Grid, Interface, WeightSpec};
use crate::operators::{EllipticityPair, OperatorSpec, XDependence};
use crate::regularity::{exponent_estimate, exponent_map, write_exponent_map_csv};
use crate::solver::{
    default_schedule, nonuniqueness_demo, regularization_ladder_with, solve_dirichlet, DirichletProblem,
    LadderOptions, SchemeParams,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub quiet: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Assertion {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Assertion {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StepStatus {
    Passed,
    Failed,
    Error,
    Skipped,
}

#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub index: usize,
    pub kind: String,
    pub status: StepStatus,
    pub assertions: Vec<Assertion>,
    pub files: Vec<String>,
    pub wall_seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub scenario: String,
    pub config_hash: String,
    pub version: String,
    pub seed: Option<u64>,
    pub out_dir: String,
    pub steps: Vec<StepRecord>,
    pub passed: bool,
}

/// Hex SHA-256 of the config text.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    toml::from_str(text).map_err(|e| Error::Config {
        key: "toml".into(),
        msg: e.to_string().trim_end().to_string(),
    })
}

fn cfg_err(key: impl Into<String>, e: impl std::fmt::Display) -> Error {
    Error::Config {
        key: key.into(),
        msg: e.to_string(),
    }
}

/// The Dirichlet problem assembled from a config, ready to solve.
pub struct Prepared {
    pub config: ScenarioConfig,
    pub grid: Option<Grid>,
    pub problem: Option<DirichletProblem>,
    pub schedule: Option<Vec<f64>>,
    pub ladder: LadderOptions,
}

/// Builds every block and checks every step before anything runs.
pub fn validate(config: ScenarioConfig) -> Result<Prepared> {
    let grid = match &config.grid {
        Some(g) => {
            let bounds: Vec<(f64, f64)> = match &g.bounds {
                Some(b) => {
                    if b.len() != g.dim {
                        return Err(cfg_err("grid.bounds", format!("expected {} intervals", g.dim)));
                    }
                    b.iter().map(|p| (p[0], p[1])).collect()
                }
                None => vec![(-1.0, 1.0); g.dim],
            };
            Some(build_grid(g.dim, bounds, g.n, g.offset).map_err(|e| cfg_err("grid", e))?)
        }
        None => None,
    };
    let weight = match &config.weight {
        Some(w) => {
            let iface = Interface::new(w.psi.clone()).map_err(|e| cfg_err("weight.psi", e))?;
            Some(WeightSpec::new(w.a, iface, w.eps).map_err(|e| cfg_err("weight.a", e))?)
        }
        None => None,
    };
    let op = match &config.operator {
        Some(o) => {
            let dim = grid
                .as_ref()
                .map(|g| g.dim())
                .ok_or_else(|| cfg_err("grid", "the operator block needs a grid block"))?;
            let big = o.big_lambda.unwrap_or(o.lambda);
            let ell = EllipticityPair::new(o.lambda, big).map_err(|e| cfg_err("operator.Lambda", e))?;
            let xdep = match &o.coefficient {
                Some(s) => Some(XDependence::new(
                    Expr::parse(s).map_err(|e| cfg_err("operator.coefficient", e))?,
                )),
                None => None,
            };
            Some(OperatorSpec::new(o.kind, ell, dim, o.matrices.clone(), xdep).map_err(|e| cfg_err("operator", e))?)
        }
        None => None,
    };
    let mut problem = None;
    let mut schedule = None;
    let mut ladder = LadderOptions::default();
    if let Some(s) = &config.solver {
        let grid = grid.as_ref().ok_or_else(|| cfg_err("grid", "the solver block needs a grid"))?;
        let weight = weight.clone().ok_or_else(|| cfg_err("weight", "the solver block needs a weight"))?;
        let op = op.clone().ok_or_else(|| cfg_err("operator", "the solver block needs an operator"))?;
        let f = Expr::parse(&s.f).map_err(|e| cfg_err("solver.f", e))?;
        let g = Expr::parse(&s.g).map_err(|e| cfg_err("solver.g", e))?;
        let f = sample_field(&f, grid).map_err(|e| cfg_err("solver.f", e))?;
        let g = sample_field(&g, grid).map_err(|e| cfg_err("solver.g", e))?;
        let d = SchemeParams::default();
        let params = SchemeParams {
            method: s.method.unwrap_or(d.method),
            tau: s.tau.unwrap_or(d.tau),
            max_iters: s.max_iters.unwrap_or(d.max_iters),
            tol: s.tol.or(d.tol),
            sweep: s.sweep.unwrap_or(d.sweep),
            source_rule: s.source_rule.unwrap_or(d.source_rule),
            wide_stencil: s.wide_stencil.unwrap_or(d.wide_stencil),
        };
        if !(params.tau > 0.0) {
            return Err(cfg_err("solver.tau", "must be > 0"));
        }
        if params.tol.is_some_and(|t| !(t > 0.0)) {
            return Err(cfg_err("solver.tol", "must be > 0"));
        }
        if params.max_iters == 0 {
            return Err(cfg_err("solver.max_iters", "must be positive"));
        }
        let p = DirichletProblem::new(op, weight, f, g)
            .map_err(|e| cfg_err("solver", e))?
            .with_params(params);
        p.stencil().step_lengths2(grid).map_err(|e| cfg_err("solver.wide_stencil", e))?;
        schedule = match (&s.epsilon_schedule, s.levels) {
            (Some(_), Some(_)) => {
                return Err(cfg_err("solver.levels", "give either epsilon_schedule or levels"));
            }
            (Some(v), None) => Some(v.clone()),
            (None, Some(k)) => Some(default_schedule(grid.h(), k)),
            (None, None) => None,
        };
        if let Some(v) = &schedule {
            check_schedule(v).map_err(|m| cfg_err("solver.epsilon_schedule", m))?;
        }
        ladder.ladder_tol = s.ladder_tol.unwrap_or(ladder.ladder_tol);
        ladder.warm_start = s.warm_start.unwrap_or(ladder.warm_start);
        if !(ladder.ladder_tol > 0.0) {
            return Err(cfg_err("solver.ladder_tol", "must be > 0"));
        }
        problem = Some(p);
    }
    for (i, step) in config.step.iter().enumerate() {
        check_step(i, step, grid.as_ref(), problem.is_some())?;
    }
    if config.step.iter().enumerate().any(|(i, s)| {
        s.needs_solution() && !matches!(s, StepConfig::Solve { .. }) && !config.step[..i].iter().any(|p| matches!(p, StepConfig::Solve { .. }))
    }) {
        return Err(cfg_err("step", "a step reads the solved field but no solve step precedes it"));
    }
    Ok(Prepared {
        config,
        grid,
        problem,
        schedule,
        ladder,
    })
}

fn check_schedule(v: &[f64]) -> std::result::Result<(), String> {
    if v.is_empty() {
        return Err("schedule is empty".into());
    }
    for (k, &e) in v.iter().enumerate() {
        if !(e >= 0.0 && e.is_finite()) {
            return Err(format!("entry {k} is {e}; entries must be finite and >= 0"));
        }
        if k > 0 && !(e < v[k - 1]) {
            return Err(format!("entry {k} does not decrease"));
        }
        if e == 0.0 && k + 1 != v.len() {
            return Err("0 is only allowed as the last entry".into());
        }
    }
    Ok(())
}

fn check_step(i: usize, step: &StepConfig, grid: Option<&Grid>, has_problem: bool) -> Result<()> {
    let key = |k: &str| format!("step[{i}].{k}");
    let need_grid = |what: &str| grid.ok_or_else(|| cfg_err(key(what), "needs a [grid] block"));
    let check_k = |rho: f64, k: [u32; 2], g: &Grid| -> Result<()> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(cfg_err(key("rho"), "must lie in (0, 1)"));
        }
        if k[1] <= k[0] {
            return Err(cfg_err(key("k"), "need k_max > k_min"));
        }
        let smallest = rho.powi(k[1] as i32);
        if smallest < 4.0 * g.h() * (1.0 - 1e-9) {
            return Err(cfg_err(
                key("k"),
                format!("smallest radius {smallest} is below the resolution guard 4h = {}", 4.0 * g.h()),
            ));
        }
        Ok(())
    };
    match step {
        StepConfig::Solve { exact, max_error, .. } => {
            if !has_problem {
                return Err(cfg_err(key("kind"), "a solve step needs a [solver] block"));
            }
            if let Some(s) = exact {
                Expr::parse(s).map_err(|e| cfg_err(key("exact"), e))?;
            }
            if max_error.is_some() && exact.is_none() {
                return Err(cfg_err(key("max_error"), "needs `exact`"));
            }
        }
        StepConfig::Exponent { probe, rho, k, field, .. } => {
            let g = need_grid("probe")?;
            check_k(*rho, *k, g)?;
            if probe.len() != g.dim() {
                return Err(cfg_err(key("probe"), "dimension does not match the grid"));
            }
            if let Some(s) = field {
                Expr::parse(s).map_err(|e| cfg_err(key("field"), e))?;
            }
        }
        StepConfig::ExponentMap {
            on_gamma,
            off_gamma,
            rho,
            k,
            field,
            ..
        } => {
            let g = need_grid("on_gamma")?;
            check_k(*rho, *k, g)?;
            if on_gamma.iter().chain(off_gamma).any(|p| p.len() != g.dim()) {
                return Err(cfg_err(key("on_gamma"), "probe dimension does not match the grid"));
            }
            if let Some(s) = field {
                Expr::parse(s).map_err(|e| cfg_err(key("field"), e))?;
            }
        }
        StepConfig::EnvelopeAudit {
            n,
            half_width,
            inner,
            eps,
            eps_prime_factor,
            ladder,
            ..
        } => {
            if *n < 5 || !(*half_width > 0.0) || !(*inner > 0.0 && inner < half_width) {
                return Err(cfg_err(key("n"), "need n >= 5 and 0 < inner < half_width"));
            }
            if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0)) {
                return Err(cfg_err(key("eps"), "need positive values"));
            }
            if !(*eps_prime_factor > 1.0) {
                return Err(cfg_err(key("eps_prime_factor"), "must be > 1"));
            }
            if ladder.windows(2).any(|w| !(w[1] < w[0])) || ladder.iter().any(|e| !(*e > 0.0)) {
                return Err(cfg_err(key("ladder"), "must be positive and strictly decreasing"));
            }
        }
        StepConfig::Barrier { cases, h, a } => {
            if !(*h > 0.0) {
                return Err(cfg_err(key("h"), "must be > 0"));
            }
            WeightSpec::flat(*a).map_err(|e| cfg_err(key("a"), e))?;
            for c in cases {
                if c[0].fract() != 0.0 || !(1.0..=3.0).contains(&c[0]) {
                    return Err(cfg_err(key("cases"), format!("dimension {} is not 1, 2 or 3", c[0])));
                }
                EllipticityPair::new(c[1], c[2]).map_err(|e| cfg_err(key("cases"), e))?;
            }
        }
        StepConfig::Abp {
            u, f, a, radius, ns, scale, ..
        } => {
            Expr::parse(u).map_err(|e| cfg_err(key("u"), e))?;
            Expr::parse(f).map_err(|e| cfg_err(key("f"), e))?;
            WeightSpec::flat(*a).map_err(|e| cfg_err(key("a"), e))?;
            if !(*radius > 0.0) {
                return Err(cfg_err(key("radius"), "must be > 0"));
            }
            if ns.is_empty() || ns.iter().any(|&n| n < 3) {
                return Err(cfg_err(key("ns"), "need grid sizes >= 3"));
            }
            if scale.is_some_and(|s| !(s > 0.0)) {
                return Err(cfg_err(key("scale"), "must be > 0"));
            }
        }
        StepConfig::Nonuniqueness { a, n, eps, .. } => {
            if !(*a > 0.0 && *a < 1.0) {
                return Err(cfg_err(key("a"), "must lie in (0, 1)"));
            }
            if *n < 3 || n % 2 == 0 {
                return Err(cfg_err(key("n"), "must be odd and >= 3 so that t = 0 is a node"));
            }
            if !(*eps > 0.0) {
                return Err(cfg_err(key("eps"), "must be > 0"));
            }
        }
    }
    Ok(())
}

struct StepOutput {
    assertions: Vec<Assertion>,
    files: Vec<String>,
}

struct Ctx<'a> {
    prepared: &'a Prepared,
    out: &'a Path,
    seed: Option<u64>,
    solution: Option<Field>,
}

impl Ctx<'_> {
    fn write(&self, name: &str, bytes: &[u8], files: &mut Vec<String>) -> Result<()> {
        fs::write(self.out.join(name), bytes)?;
        files.push(name.to_string());
        Ok(())
    }

    fn write_json(&self, name: &str, v: &Value, files: &mut Vec<String>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(v)?;
        text.push('\n');
        self.write(name, text.as_bytes(), files)
    }

    fn target_field(&self, field: &Option<String>) -> Result<Field> {
        match field {
            Some(s) => sample_field(&Expr::parse(s)?, self.prepared.grid.as_ref().expect("validated")),
            None => Ok(self.solution.clone().expect("validated: a solve step ran first")),
        }
    }
}

/// Runs a config file. Config and IO problems are returned as errors;
/// step failures are recorded in the manifest.
pub fn run_scenario(path: &Path, opts: &RunOptions) -> Result<RunManifest> {
    let text = fs::read_to_string(path)?;
    run_config_text(&text, opts)
}

pub fn run_config_text(text: &str, opts: &RunOptions) -> Result<RunManifest> {
    let hash = config_hash(text);
    let prepared = validate(parse_config(text)?)?;
    let cfg = &prepared.config;
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.scenario.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("degenlab-out").join(&cfg.scenario.name));
    fs::create_dir_all(&out)?;
    let seed = opts.seed.or(cfg.scenario.seed);
    let mut ctx = Ctx {
        prepared: &prepared,
        out: &out,
        seed,
        solution: None,
    };
    let mut steps = vec![];
    let mut broken = false;
    for (i, step) in cfg.step.iter().enumerate() {
        let kind = step.kind().to_string();
        if broken {
            steps.push(StepRecord {
                index: i,
                kind,
                status: StepStatus::Skipped,
                assertions: vec![],
                files: vec![],
                wall_seconds: 0.0,
                error: None,
            });
            continue;
        }
        let t0 = Instant::now();
        let res = run_step(&mut ctx, i, step);
        let wall_seconds = t0.elapsed().as_secs_f64();
        let rec = match res {
            Ok(o) => StepRecord {
                index: i,
                kind,
                status: if o.assertions.iter().all(|a| a.passed) {
                    StepStatus::Passed
                } else {
                    StepStatus::Failed
                },
                assertions: o.assertions,
                files: o.files,
                wall_seconds,
                error: None,
            },
            Err(e) => {
                broken = true;
                StepRecord {
                    index: i,
                    kind,
                    status: StepStatus::Error,
                    assertions: vec![],
                    files: vec![],
                    wall_seconds,
                    error: Some(e.to_string()),
                }
            }
        };
        if !opts.quiet {
            print_step(&rec);
        }
        steps.push(rec);
    }
    let manifest = RunManifest {
        scenario: cfg.scenario.name.clone(),
        config_hash: hash,
        version: VERSION.to_string(),
        seed,
        out_dir: out.display().to_string(),
        passed: steps.iter().all(|s| s.status == StepStatus::Passed),
        steps,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(out.join("manifest.json"), text)?;
    Ok(manifest)
}

fn print_step(rec: &StepRecord) {
    let tag = match rec.status {
        StepStatus::Passed => "pass",
        StepStatus::Failed => "FAIL",
        StepStatus::Error => "ERROR",
        StepStatus::Skipped => "skip",
    };
    println!("  [{tag}] step {} {} ({:.2} s)", rec.index, rec.kind, rec.wall_seconds);
    for a in rec.assertions.iter().filter(|a| !a.passed) {
        println!("      failed: {} ({})", a.name, a.detail);
    }
    if let Some(e) = &rec.error {
        println!("      error: {e}");
    }
}

fn run_step(ctx: &mut Ctx, i: usize, step: &StepConfig) -> Result<StepOutput> {
    let prefix = format!("{i:02}-{}", step.kind());
    let mut files = vec![];
    let mut asserts = vec![];
    match step {
        StepConfig::Solve {
            exact,
            max_error,
            require_ladder_converged,
        } => {
            let p = ctx.prepared.problem.as_ref().expect("validated");
            let rep = match &ctx.prepared.schedule {
                Some(s) => regularization_ladder_with(p, s, ctx.prepared.ladder)?,
                None => solve_dirichlet(p)?,
            };
            asserts.push(Assertion::new(
                "converged",
                rep.converged,
                format!("residual {:.3e} vs tol {:.3e}", rep.residual, rep.tol),
            ));
            if *require_ladder_converged {
                asserts.push(Assertion::new(
                    "ladder-converged",
                    rep.ladder_converged == Some(true),
                    format!("{:?}", rep.ladder_converged),
                ));
            }
            let mut err = None;
            if let Some(s) = exact {
                let ex = sample_field(&Expr::parse(s)?, p.f.grid())?;
                let e = rep.solution.max_abs_diff(&ex);
                err = Some(e);
                if let Some(m) = max_error {
                    asserts.push(Assertion::new("max-error", e <= *m, format!("{e:.3e} <= {m:.1e}")));
                }
            }
            let mut buf = vec![];
            rep.solution.write_csv(&mut buf)?;
            ctx.write(&format!("{prefix}-solution.csv"), &buf, &mut files)?;
            if !rep.history.is_empty() {
                let mut w = csv::Writer::from_writer(vec![]);
                w.write_record(["eps", "iterations", "residual", "converged", "diff"])?;
                for h in &rep.history {
                    w.write_record([
                        format!("{:e}", h.eps),
                        h.iterations.to_string(),
                        format!("{:e}", h.residual),
                        h.converged.to_string(),
                        format!("{:e}", h.diff),
                    ])?;
                }
                let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
                ctx.write(&format!("{prefix}-ladder.csv"), &bytes, &mut files)?;
            }
            let mut v = serde_json::to_value(&rep)?;
            v["max_error_vs_exact"] = json!(err);
            ctx.write_json(&format!("{prefix}.json"), &v, &mut files)?;
            ctx.solution = Some(rep.solution);
        }
        StepConfig::Exponent {
            probe,
            rho,
            k,
            field,
            expect_alpha,
            alpha_tol,
            expect_capped,
        } => {
            let u = ctx.target_field(field)?;
            let rep = exponent_estimate(&u, probe, *rho, (k[0], k[1]))?;
            if let Some(want) = expect_alpha {
                asserts.push(Assertion::new(
                    "alpha",
                    !rep.capped && (rep.alpha - want).abs() <= *alpha_tol,
                    format!("{} vs {want} ± {alpha_tol}", rep.display_alpha()),
                ));
            }
            if let Some(c) = expect_capped {
                asserts.push(Assertion::new(
                    "capped",
                    rep.capped == *c,
                    format!("alpha {}", rep.display_alpha()),
                ));
            }
            let mut w = csv::Writer::from_writer(vec![]);
            w.write_record(["radius", "residual"])?;
            for (r, kres) in rep.radii.iter().zip(&rep.residuals) {
                w.write_record([format!("{r:e}"), format!("{kres:e}")])?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            ctx.write(&format!("{prefix}-residuals.csv"), &bytes, &mut files)?;
            ctx.write_json(&format!("{prefix}.json"), &serde_json::to_value(&rep)?, &mut files)?;
        }
        StepConfig::ExponentMap {
            on_gamma,
            off_gamma,
            rho,
            k,
            field,
            expect_alpha,
            alpha_tol,
        } => {
            let u = ctx.target_field(field)?;
            let probes: Vec<Vec<f64>> = on_gamma.iter().chain(off_gamma).cloned().collect();
            let map = exponent_map(&u, &probes, *rho, (k[0], k[1]));
            for (j, p) in map.iter().enumerate() {
                let on = j < on_gamma.len();
                let desc = match (&p.error, p.alpha) {
                    (Some(e), _) => e.clone(),
                    (None, Some(a)) => format!("alpha {a:.4} band {:.1e} capped {}", p.band.unwrap_or(0.0), p.capped == Some(true)),
                    _ => String::new(),
                };
                if on {
                    if let Some(want) = expect_alpha {
                        let ok = p.error.is_none()
                            && p.capped == Some(false)
                            && p.alpha.is_some_and(|a| (a - want).abs() <= *alpha_tol);
                        asserts.push(Assertion::new(format!("on-gamma {:?}", p.point), ok, desc));
                    }
                } else {
                    asserts.push(Assertion::new(
                        format!("off-gamma-capped {:?}", p.point),
                        p.capped == Some(true),
                        desc,
                    ));
                }
            }
            let mut buf = vec![];
            write_exponent_map_csv(&map, &mut buf)?;
            ctx.write(&format!("{prefix}.csv"), &buf, &mut files)?;
            ctx.write_json(&format!("{prefix}.json"), &serde_json::to_value(&map)?, &mut files)?;
        }
        StepConfig::EnvelopeAudit {
            n,
            half_width,
            inner,
            eps,
            eps_prime_factor,
            ladder,
            seeds,
        } => {
            let grid = build_grid(1, vec![(-half_width, *half_width)], *n, false)?;
            let seeds: Vec<u64> = match (ctx.seed, seeds) {
                (Some(s), _) => (0..DEFAULT_SEEDS.len() as u64).map(|k| s.wrapping_add(k)).collect(),
                (None, Some(v)) => v.clone(),
                (None, None) => DEFAULT_SEEDS.to_vec(),
            };
            let all = vec![true; grid.len()];
            let eval = grid.mask_where(|x| x[0].abs() <= *inner);
            let mut w = csv::Writer::from_writer(vec![]);
            w.write_record(["seed", "eps", "check", "passed", "violations", "worst_margin"])?;
            let mut summary = vec![];
            for &e in eps {
                let params = EnvelopeParams::new(&grid, e, all.clone(), eval.clone())?;
                let mut total = 0;
                for &s in &seeds {
                    let u = random_piecewise_linear(&grid, s)?;
                    let rep = envelope_audit(&u, &params, eps_prime_factor * e, ladder)?;
                    for c in &rep.checks {
                        w.write_record([
                            s.to_string(),
                            format!("{e}"),
                            c.name.to_string(),
                            c.passed.to_string(),
                            c.violations.to_string(),
                            format!("{:e}", c.worst_margin),
                        ])?;
                    }
                    total += rep.violations();
                }
                asserts.push(Assertion::new(
                    format!("no-violations eps={e}"),
                    total == 0,
                    format!("{total} violations over {} fields", seeds.len()),
                ));
                summary.push(json!({"eps": e, "violations": total, "fields": seeds.len()}));
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            ctx.write(&format!("{prefix}.csv"), &bytes, &mut files)?;
            ctx.write_json(&format!("{prefix}.json"), &json!({"seeds": seeds, "summary": summary}), &mut files)?;
        }
        StepConfig::Barrier { cases, h, a } => {
            let w = WeightSpec::flat(*a)?;
            let mut rows = csv::Writer::from_writer(vec![]);
            rows.write_record([
                "d",
                "lambda",
                "Lambda",
                "alpha",
                "equality_case",
                "outside_min_phi",
                "q3_max_phi",
                "outer_max",
                "inner_constant",
                "eig_rel_err",
                "passed",
            ])?;
            let mut reports = vec![];
            for c in cases {
                let d = c[0] as usize;
                let b = build_barrier(d, EllipticityPair::new(c[1], c[2])?)?;
                let grid = barrier_grid(d, *h)?;
                let rep = verify_barrier(&b, &w, &grid)?;
                rows.write_record([
                    d.to_string(),
                    format!("{}", c[1]),
                    format!("{}", c[2]),
                    format!("{}", rep.alpha),
                    rep.equality_case.to_string(),
                    format!("{:e}", rep.outside_min_phi),
                    format!("{:e}", rep.q3_max_phi),
                    format!("{:e}", rep.outer_max),
                    format!("{:e}", rep.inner_constant),
                    format!("{:e}", rep.eig_max_rel_err),
                    rep.passed.to_string(),
                ])?;
                asserts.push(Assertion::new(
                    format!("barrier d={d} lambda={} Lambda={}", c[1], c[2]),
                    rep.passed,
                    format!("max omega M+ outside 1/4 = {:.3e} (tol {:.0e})", rep.outer_max, rep.outer_tol),
                ));
                reports.push(rep);
            }
            let bytes = rows.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            ctx.write(&format!("{prefix}.csv"), &bytes, &mut files)?;
            ctx.write_json(&format!("{prefix}.json"), &serde_json::to_value(&reports)?, &mut files)?;
        }
        StepConfig::Abp {
            u,
            f,
            a,
            radius,
            ns,
            convention,
            expect_limit,
            rate_constant,
            scale,
        } => {
            let (ue, fe) = (Expr::parse(u)?, Expr::parse(f)?);
            let w = WeightSpec::flat(*a)?;
            let half = match convention {
                AbpConvention::BallOnly => *radius,
                AbpConvention::ExtendToDouble => 2.0 * radius,
            };
            let mut rows = csv::Writer::from_writer(vec![]);
            rows.write_record(["n", "h", "c_hat", "sup_u_minus", "integral", "contact_nodes"])?;
            let mut last = None;
            let mut out = vec![];
            for &n in ns {
                let grid = build_grid(1, vec![(-half, half)], n, false)?;
                let uf = sample_field(&ue, &grid)?;
                let ff = sample_field(&fe, &grid)?;
                let rep = abp_estimate(&uf, &ff, &w, &[0.0], *radius, *convention)?;
                rows.write_record([
                    n.to_string(),
                    format!("{:e}", grid.h()),
                    format!("{:.17e}", rep.c_hat),
                    format!("{:e}", rep.sup_u_minus),
                    format!("{:.17e}", rep.integral),
                    rep.contact.count.to_string(),
                ])?;
                if let Some(l) = expect_limit {
                    let gap = (rep.c_hat - l).abs();
                    asserts.push(Assertion::new(
                        format!("rate n={n}"),
                        gap <= rate_constant * grid.h(),
                        format!("|C - {l}| = {gap:.3e} vs {rate_constant} h = {:.3e}", rate_constant * grid.h()),
                    ));
                }
                out.push(json!({"n": n, "h": grid.h(), "c_hat": rep.c_hat, "contact_nodes": rep.contact.count,
                    "hull_converged": rep.hull_converged}));
                last = Some((uf, ff, rep.c_hat));
            }
            if let (Some(s), Some((uf, ff, c))) = (scale, last) {
                let us = uf.map(|v| s * v)?;
                let fs_ = ff.map(|v| s * v)?;
                let cs = abp_estimate(&us, &fs_, &w, &[0.0], *radius, *convention)?.c_hat;
                let rel = (cs - c).abs() / c.abs().max(f64::MIN_POSITIVE);
                asserts.push(Assertion::new(
                    format!("scale-invariance s={s}"),
                    rel <= 1e-10,
                    format!("relative change {rel:.3e}"),
                ));
            }
            let bytes = rows.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            ctx.write(&format!("{prefix}.csv"), &bytes, &mut files)?;
            ctx.write_json(&format!("{prefix}.json"), &json!(out), &mut files)?;
        }
        StepConfig::Nonuniqueness { a, slopes, n, eps } => {
            let grid = build_grid(1, vec![(-1.0, 1.0)], *n, false)?;
            let rep = nonuniqueness_demo(*a, slopes[0], slopes[1], &grid, *eps)?;
            asserts.push(Assertion::new(
                "node-weight-residual-zero",
                rep.node_weight_max <= 1e-12,
                format!("max {:.3e}", rep.node_weight_max),
            ));
            let rel = (rep.regularized_at_zero - rep.predicted_at_zero).abs() / rep.predicted_at_zero.abs().max(f64::MIN_POSITIVE);
            asserts.push(Assertion::new(
                "regularized-residual-at-zero",
                rel <= 1e-8,
                format!("{:.12e} vs eps^a (s+ + s-)/h = {:.12e}", rep.regularized_at_zero, rep.predicted_at_zero),
            ));
            let mut rows = csv::Writer::from_writer(vec![]);
            rows.write_record(["t", "node_weight_residual", "regularized_residual"])?;
            for ((t, nw), rw) in rep.nodes.iter().zip(&rep.node_weight_residual).zip(&rep.regularized_residual) {
                rows.write_record([format!("{t:e}"), format!("{nw:e}"), format!("{rw:e}")])?;
            }
            let bytes = rows.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            ctx.write(&format!("{prefix}.csv"), &bytes, &mut files)?;
            let mut v = serde_json::to_value(&rep)?;
            for k in ["nodes", "node_weight_residual", "regularized_residual"] {
                v.as_object_mut().expect("struct").remove(k);
            }
            ctx.write_json(&format!("{prefix}.json"), &v, &mut files)?;
        }
    }
    Ok(StepOutput {
        assertions: asserts,
        files,
    })
}
