//! Orchestration for the `llflow` binary: config loading, workflows, artifacts.

// `!(a < b)` also catches NaN bounds.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod output;
pub mod workflows;

use std::collections::BTreeMap;

use serde::Serialize;

use llflow_core::diagnostics::FitReport;

pub use config::{RunConfig, Workflow};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Numerical { context: String, source: llflow_core::Error },
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    /// 2 for bad configs, 3 for numerical (and output) failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical { .. } | CliError::Io(_) => 3,
        }
    }
}

/// Wraps a core error with the module and operation that raised it.
pub fn ctx<T>(context: impl Into<String>, r: llflow_core::Result<T>) -> Result<T, CliError> {
    r.map_err(|source| CliError::Numerical { context: context.into(), source })
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// "<=" or ">=".
    pub relation: &'static str,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Check { name: name.into(), value, relation: "<=", threshold, pass: value <= threshold }
    }
    pub fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Check { name: name.into(), value, relation: ">=", threshold, pass: value >= threshold }
    }
}

/// Contents of `report.json`. Holds nothing run-dependent beyond the inputs, so identical
/// configs give identical bytes.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub workflow: Workflow,
    pub config: RunConfig,
    pub fits: BTreeMap<String, FitReport>,
    pub values: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub artifacts: Vec<String>,
    pub pass: bool,
}

impl Report {
    pub fn new(workflow: Workflow, config: &RunConfig) -> Self {
        Report {
            workflow,
            config: config.clone(),
            fits: BTreeMap::new(),
            values: BTreeMap::new(),
            checks: Vec::new(),
            artifacts: Vec::new(),
            pass: true,
        }
    }

    pub fn check(&mut self, c: Check) {
        self.pass &= c.pass;
        self.checks.push(c);
    }
}
