//! Run configuration: a TOML file with one table per block, overridden by `--set` pairs.
//!
//! Every block has defaults, so an empty file is a valid config. Unknown keys anywhere
//! are an error, as is anything `Params::validate` rejects.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use llflow_core::evolve::DtPolicy;
use llflow_core::{Params, RadialGrid};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Workflow {
    Profile,
    Residual,
    Match,
    Evolve,
    Sweep,
    Report,
}

impl Workflow {
    pub fn name(self) -> &'static str {
        match self {
            Workflow::Profile => "profile",
            Workflow::Residual => "residual",
            Workflow::Match => "match",
            Workflow::Evolve => "evolve",
            Workflow::Sweep => "sweep",
            Workflow::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamsBlock {
    pub a2: f64,
    pub nu: f64,
    pub alpha0: f64,
    pub n: usize,
    pub delta: f64,
    /// Defaults to nu/2.
    pub eps1: Option<f64>,
    pub eps2: f64,
}

impl Default for ParamsBlock {
    fn default() -> Self {
        let p = Params::reference();
        ParamsBlock { a2: p.a2, nu: p.nu, alpha0: p.alpha0, n: p.n, delta: p.delta, eps1: None, eps2: p.eps2 }
    }
}

impl ParamsBlock {
    pub fn to_params(&self) -> llflow_core::Result<Params> {
        Params::new(self.a2, self.nu, self.alpha0, self.n, self.delta, self.eps1, self.eps2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpacingChoice {
    Geometric,
    Uniform,
}

/// Lab grid for profile snapshots and scale detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridBlock {
    pub rmin: f64,
    pub rmax: f64,
    pub points: usize,
    pub spacing: SpacingChoice,
}

impl Default for GridBlock {
    fn default() -> Self {
        GridBlock { rmin: 1e-9, rmax: 1.5, points: 1200, spacing: SpacingChoice::Geometric }
    }
}

impl GridBlock {
    pub fn build(&self) -> llflow_core::Result<RadialGrid> {
        match self.spacing {
            SpacingChoice::Geometric => RadialGrid::geometric(self.rmin, self.rmax, self.points),
            SpacingChoice::Uniform => RadialGrid::uniform(self.rmin, self.rmax, self.points),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DtChoice {
    Fixed,
    Capped,
}

/// Evolution window. Time runs forward from `t1` to `t0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeBlock {
    pub t1: f64,
    pub t0: f64,
    /// Sampling intervals; the evolve series has samples + 1 rows.
    pub samples: usize,
    pub dt_policy: DtChoice,
    pub dt: f64,
    /// Only read by the capped policy.
    pub dt_max: f64,
    pub cfl: f64,
}

impl Default for TimeBlock {
    fn default() -> Self {
        TimeBlock { t1: 0.05, t0: 0.2, samples: 15, dt_policy: DtChoice::Fixed, dt: 2e-4, dt_max: 1e-3, cfl: 0.5 }
    }
}

impl TimeBlock {
    pub fn policy(&self) -> DtPolicy {
        match self.dt_policy {
            DtChoice::Fixed => DtPolicy::Fixed(self.dt),
            DtChoice::Capped => DtPolicy::Capped { dt_max: self.dt_max, c: self.cfl },
        }
    }
}

/// Geometric t-samples for a power-law fit; must span at least a decade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualBlock {
    pub tmin: f64,
    pub tmax: f64,
    pub samples: usize,
    /// Pass when the L2 slope is at least N - margin.
    pub margin: f64,
}

impl Default for ResidualBlock {
    fn default() -> Self {
        ResidualBlock { tmin: 1e-3, tmax: 1e-2, samples: 5, margin: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchBlock {
    /// Truncation order of both expansions.
    pub n: usize,
    pub tmin: f64,
    pub tmax: f64,
    pub samples: usize,
    /// Pass when the exponent is at least nu (n + 1) - margin.
    pub margin: f64,
}

impl Default for MatchBlock {
    fn default() -> Self {
        MatchBlock { n: 1, tmin: 1e-4, tmax: 1e-2, samples: 5, margin: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolveBlock {
    pub h1_tolerance: f64,
    /// Inner edge in units of 1/lambda(t1).
    pub rmin_factor: f64,
    /// Outer edge in units of delta.
    pub rmax_factor: f64,
    pub per_decade: f64,
    pub spatial_order: usize,
}

impl Default for EvolveBlock {
    fn default() -> Self {
        EvolveBlock { h1_tolerance: 1e-2, rmin_factor: 1e-4, rmax_factor: 4.0, per_decade: 120.0, spatial_order: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepBlock {
    pub workflow: Workflow,
    /// Dotted config key, e.g. "params.n".
    pub key: String,
    pub values: Vec<toml::Value>,
    /// 0 means one per available core.
    pub workers: usize,
}

impl Default for SweepBlock {
    fn default() -> Self {
        SweepBlock { workflow: Workflow::Residual, key: "params.n".into(), values: Vec::new(), workers: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub dir: PathBuf,
    pub plots: bool,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock { dir: PathBuf::from("llflow-out"), plots: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub params: ParamsBlock,
    pub grid: GridBlock,
    pub time: TimeBlock,
    pub residual: ResidualBlock,
    #[serde(rename = "match")]
    pub matching: MatchBlock,
    pub evolve: EvolveBlock,
    pub sweep: SweepBlock,
    pub output: OutputBlock,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn check_window(name: &str, tmin: f64, tmax: f64, samples: usize) -> Result<(), CliError> {
    if !(tmin > 0.0 && tmax.is_finite()) || tmax < 10.0 * tmin {
        return Err(bad(format!("{name}: need 0 < tmin and tmax >= 10 tmin for a power-law fit")));
    }
    if samples < 4 {
        return Err(bad(format!("{name}.samples must be at least 4")));
    }
    Ok(())
}

impl RunConfig {
    /// Checks everything a workflow could trip over before any numerics run.
    pub fn validate(&self, workflow: Workflow) -> Result<Params, CliError> {
        let p = self.params.to_params().map_err(|e| bad(e.to_string()))?;
        self.grid.build().map_err(|e| bad(format!("grid: {e}")))?;
        let t = &self.time;
        if !(t.t1 > 0.0 && t.t0 > t.t1 && t.t0.is_finite()) {
            return Err(bad("time: need 0 < t1 < t0"));
        }
        if t.samples < 2 {
            return Err(bad("time.samples must be at least 2"));
        }
        if !(t.dt > 0.0 && t.dt_max > 0.0 && t.cfl > 0.0) {
            return Err(bad("time: dt, dt_max and cfl must be positive"));
        }
        check_window("residual", self.residual.tmin, self.residual.tmax, self.residual.samples)?;
        check_window("match", self.matching.tmin, self.matching.tmax, self.matching.samples)?;
        if self.matching.n == 0 {
            return Err(bad("match.n must be at least 1"));
        }
        let e = &self.evolve;
        if ![2, 4].contains(&e.spatial_order) {
            return Err(bad("evolve.spatial_order must be 2 or 4"));
        }
        if !(e.h1_tolerance > 0.0 && e.rmin_factor > 0.0 && e.rmax_factor > 0.0 && e.per_decade >= 4.0) {
            return Err(bad("evolve: tolerances and grid factors must be positive, per_decade >= 4"));
        }
        if workflow == Workflow::Sweep {
            if self.sweep.workflow == Workflow::Sweep {
                return Err(bad("sweep.workflow cannot be sweep"));
            }
            if self.sweep.values.is_empty() {
                return Err(bad("sweep.values is empty"));
            }
        }
        Ok(p)
    }
}

/// Parses `value` as a TOML value; bare words fall back to strings.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.into())),
        Err(_) => toml::Value::String(value.into()),
    }
}

/// Sets a dotted key, creating intermediate tables.
pub fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|s| s.is_empty()) {
        return Err(bad(format!("malformed key '{key}'")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| bad(format!("'{part}' in '{key}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Applies `KEY=VALUE` overrides in order.
pub fn apply_overrides(table: &mut toml::Table, sets: &[String]) -> Result<(), CliError> {
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| bad(format!("--set expects KEY=VALUE, got '{s}'")))?;
        set_key(table, k.trim(), parse_value(v.trim()))?;
    }
    Ok(())
}

pub fn from_table(table: &toml::Table) -> Result<RunConfig, CliError> {
    toml::Value::Table(table.clone()).try_into().map_err(|e: toml::de::Error| bad(e.message().to_string()))
}

/// Reads the file (if any), applies overrides, and returns both the typed config and the
/// merged table. The table is what a sweep rewrites per run.
pub fn load(path: Option<&Path>, sets: &[String], out: Option<&Path>) -> Result<(RunConfig, toml::Table), CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| bad(format!("{}: {e}", p.display())))?;
            text.parse::<toml::Table>().map_err(|e| bad(format!("{}: {}", p.display(), e.message())))?
        }
        None => toml::Table::new(),
    };
    apply_overrides(&mut table, sets)?;
    if let Some(o) = out {
        set_key(&mut table, "output.dir", toml::Value::String(o.display().to_string()))?;
    }
    Ok((from_table(&table)?, table))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_reference_point() {
        let (c, _) = load(None, &[], None).unwrap();
        assert_eq!(c.validate(Workflow::Profile).unwrap(), Params::reference());
    }

    #[test]
    fn overrides_are_typed_and_ordered() {
        let sets = vec!["params.n=3".to_string(), "params.delta = 0.9".into(), "grid.spacing=uniform".into(), "params.n=4".into()];
        let (c, _) = load(None, &sets, Some(Path::new("x"))).unwrap();
        assert_eq!(c.params.n, 4);
        assert_eq!(c.params.delta, 0.9);
        assert_eq!(c.grid.spacing, SpacingChoice::Uniform);
        assert_eq!(c.output.dir, PathBuf::from("x"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for s in ["params.mu=1", "bogus.x=1", "top=1"] {
            assert!(matches!(load(None, &[s.to_string()], None), Err(CliError::Config(_))), "{s}");
        }
    }

    #[test]
    fn invalid_params_fail_validation() {
        for s in ["params.n=1", "params.eps2=0.5", "params.nu=0.9", "params.a2=1.5"] {
            let (c, _) = load(None, &[s.to_string()], None).unwrap();
            assert!(c.validate(Workflow::Residual).is_err(), "{s}");
        }
    }

    #[test]
    fn narrow_fit_window_is_rejected() {
        let (c, _) = load(None, &["residual.tmax=5e-3".to_string()], None).unwrap();
        assert!(c.validate(Workflow::Residual).is_err());
    }

    #[test]
    fn sweep_needs_values() {
        let (c, _) = load(None, &[], None).unwrap();
        assert!(c.validate(Workflow::Sweep).is_err());
        let (c, _) = load(None, &["sweep.values=[2, 3]".to_string()], None).unwrap();
        assert!(c.validate(Workflow::Sweep).is_ok());
    }
}
