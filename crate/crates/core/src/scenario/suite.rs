//! Bundled scenario collections.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{run_config_text, RunManifest, RunOptions};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteName {
    Sharp1d,
    Division,
    EnvelopeAudit,
    Barrier,
    Abp,
    Nonuniqueness,
    ExponentMap2d,
    All,
}

pub const BUNDLED: &[(&str, &str)] = &[
    ("sharp-1d-a025", include_str!("../../scenarios/sharp-1d-a025.toml")),
    ("sharp-1d-a05", include_str!("../../scenarios/sharp-1d-a05.toml")),
    ("sharp-1d-a075", include_str!("../../scenarios/sharp-1d-a075.toml")),
    ("division", include_str!("../../scenarios/division.toml")),
    ("envelope-audit", include_str!("../../scenarios/envelope-audit.toml")),
    ("barrier", include_str!("../../scenarios/barrier.toml")),
    ("abp", include_str!("../../scenarios/abp.toml")),
    ("nonuniqueness", include_str!("../../scenarios/nonuniqueness.toml")),
    ("exponent-map-2d-a025", include_str!("../../scenarios/exponent-map-2d-a025.toml")),
    ("exponent-map-2d-a04", include_str!("../../scenarios/exponent-map-2d-a04.toml")),
];

impl SuiteName {
    pub fn parse(s: &str) -> Option<SuiteName> {
        Some(match s {
            "sharp-1d" => SuiteName::Sharp1d,
            "division" => SuiteName::Division,
            "envelope-audit" => SuiteName::EnvelopeAudit,
            "barrier" => SuiteName::Barrier,
            "abp" => SuiteName::Abp,
            "nonuniqueness" => SuiteName::Nonuniqueness,
            "exponent-map-2d" => SuiteName::ExponentMap2d,
            "all" => SuiteName::All,
            _ => return None,
        })
    }

    fn prefix(self) -> Option<&'static str> {
        match self {
            SuiteName::Sharp1d => Some("sharp-1d"),
            SuiteName::Division => Some("division"),
            SuiteName::EnvelopeAudit => Some("envelope-audit"),
            SuiteName::Barrier => Some("barrier"),
            SuiteName::Abp => Some("abp"),
            SuiteName::Nonuniqueness => Some("nonuniqueness"),
            SuiteName::ExponentMap2d => Some("exponent-map-2d"),
            SuiteName::All => None,
        }
    }

    /// The bundled configs in this suite, in run order.
    pub fn configs(self) -> Vec<(&'static str, &'static str)> {
        BUNDLED
            .iter()
            .filter(|(name, _)| self.prefix().is_none_or(|p| name.starts_with(p)))
            .copied()
            .collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteRow {
    pub config: String,
    pub passed: bool,
    pub steps: usize,
    pub failed_assertions: usize,
    pub seconds: f64,
    pub error: Option<String>,
}

/// Runs every config of the suite into `out/<config>`; the summary table
/// goes to standard output unless `quiet`.
pub fn run_suite(name: SuiteName, opts: &RunOptions) -> Result<(bool, Vec<SuiteRow>, Vec<RunManifest>)> {
    let base = opts.out.clone().unwrap_or_else(|| PathBuf::from("degenlab-out"));
    let mut rows = vec![];
    let mut manifests = vec![];
    for (cfg_name, text) in name.configs() {
        if !opts.quiet {
            println!("{cfg_name}");
        }
        let sub = RunOptions {
            out: Some(base.join(cfg_name)),
            ..opts.clone()
        };
        let t0 = Instant::now();
        let row = match run_config_text(text, &sub) {
            Ok(m) => {
                let row = SuiteRow {
                    config: cfg_name.to_string(),
                    passed: m.passed,
                    steps: m.steps.len(),
                    failed_assertions: m
                        .steps
                        .iter()
                        .flat_map(|s| &s.assertions)
                        .filter(|a| !a.passed)
                        .count(),
                    seconds: t0.elapsed().as_secs_f64(),
                    error: m.steps.iter().find_map(|s| s.error.clone()),
                };
                manifests.push(m);
                row
            }
            Err(e) => SuiteRow {
                config: cfg_name.to_string(),
                passed: false,
                steps: 0,
                failed_assertions: 0,
                seconds: t0.elapsed().as_secs_f64(),
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    if !opts.quiet {
        println!();
        println!("{:<24} {:>6} {:>6} {:>9}  status", "config", "steps", "failed", "seconds");
        for r in &rows {
            println!(
                "{:<24} {:>6} {:>6} {:>9.2}  {}",
                r.config,
                r.steps,
                r.failed_assertions,
                r.seconds,
                if r.passed { "PASS" } else { "FAIL" }
            );
        }
    }
    Ok((rows.iter().all(|r| r.passed), rows, manifests))
}
