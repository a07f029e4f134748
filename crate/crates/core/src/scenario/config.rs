use serde::Deserialize;

use crate::estimates::AbpConvention;
use crate::lattice::Monomial;
use crate::operators::OperatorKind;
use crate::solver::{Method, SourceRule, SweepOrder};

/// Top-level scenario file. Every block is optional at parse time; steps
/// that need a block check for it during validation.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioBlock,
    pub grid: Option<GridBlock>,
    pub weight: Option<WeightBlock>,
    pub operator: Option<OperatorBlock>,
    pub solver: Option<SolverBlock>,
    #[serde(default)]
    pub step: Vec<StepConfig>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioBlock {
    pub name: String,
    pub seed: Option<u64>,
    pub output: Option<String>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub dim: usize,
    pub n: usize,
    /// Per-axis `[lo, hi]`; defaults to `[-1, 1]` on every axis.
    pub bounds: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub offset: bool,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightBlock {
    pub a: f64,
    #[serde(default)]
    pub eps: f64,
    #[serde(default)]
    pub psi: Vec<Monomial>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorBlock {
    pub kind: OperatorKind,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(rename = "Lambda")]
    pub big_lambda: Option<f64>,
    #[serde(default)]
    pub matrices: Vec<Vec<f64>>,
    /// Optional `x`-dependent factor `c(x)` as an expression.
    pub coefficient: Option<String>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    pub f: String,
    pub g: String,
    pub epsilon_schedule: Option<Vec<f64>>,
    /// Length of the default schedule `h^{1/2} 4^{−k}` when no explicit
    /// schedule is given.
    pub levels: Option<usize>,
    pub ladder_tol: Option<f64>,
    pub warm_start: Option<bool>,
    pub method: Option<Method>,
    pub tau: Option<f64>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub sweep: Option<SweepOrder>,
    pub source_rule: Option<SourceRule>,
    pub wide_stencil: Option<bool>,
}

fn half() -> f64 {
    0.5
}

fn alpha_tol() -> f64 {
    0.05
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StepConfig {
    Solve {
        exact: Option<String>,
        max_error: Option<f64>,
        #[serde(default)]
        require_ladder_converged: bool,
    },
    Exponent {
        probe: Vec<f64>,
        #[serde(default = "half")]
        rho: f64,
        k: [u32; 2],
        /// Expression to sample instead of the solved field.
        field: Option<String>,
        expect_alpha: Option<f64>,
        #[serde(default = "alpha_tol")]
        alpha_tol: f64,
        expect_capped: Option<bool>,
    },
    ExponentMap {
        #[serde(default)]
        on_gamma: Vec<Vec<f64>>,
        #[serde(default)]
        off_gamma: Vec<Vec<f64>>,
        #[serde(default = "half")]
        rho: f64,
        k: [u32; 2],
        field: Option<String>,
        expect_alpha: Option<f64>,
        #[serde(default = "alpha_tol")]
        alpha_tol: f64,
    },
    EnvelopeAudit {
        n: usize,
        #[serde(default = "one")]
        half_width: f64,
        #[serde(default = "half")]
        inner: f64,
        eps: Vec<f64>,
        #[serde(default = "two")]
        eps_prime_factor: f64,
        ladder: Vec<f64>,
        seeds: Option<Vec<u64>>,
    },
    Barrier {
        /// `[d, λ, Λ]` triples.
        cases: Vec<[f64; 3]>,
        h: f64,
        #[serde(default = "half")]
        a: f64,
    },
    Abp {
        u: String,
        f: String,
        a: f64,
        #[serde(default = "one")]
        radius: f64,
        ns: Vec<usize>,
        #[serde(default)]
        convention: AbpConvention,
        expect_limit: Option<f64>,
        /// Allowed `|Ĉ − limit| / h`.
        #[serde(default = "one")]
        rate_constant: f64,
        scale: Option<f64>,
    },
    Nonuniqueness {
        a: f64,
        slopes: [f64; 2],
        n: usize,
        eps: f64,
    },
}

fn two() -> f64 {
    2.0
}

impl StepConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            StepConfig::Solve { .. } => "solve",
            StepConfig::Exponent { .. } => "exponent",
            StepConfig::ExponentMap { .. } => "exponent-map",
            StepConfig::EnvelopeAudit { .. } => "envelope-audit",
            StepConfig::Barrier { .. } => "barrier",
            StepConfig::Abp { .. } => "abp",
            StepConfig::Nonuniqueness { .. } => "nonuniqueness",
        }
    }

    pub fn needs_solution(&self) -> bool {
        match self {
            StepConfig::Solve { .. } => true,
            StepConfig::Exponent { field, .. } | StepConfig::ExponentMap { field, .. } => field.is_none(),
            _ => false,
        }
    }
}
