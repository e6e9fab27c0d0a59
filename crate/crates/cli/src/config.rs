//! Run configuration documents.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use syncon::{EstimatorKind, FactorDgp, LimitSpec, McConfig, PlaceboConfig};

use crate::CliError;

/// A JSON run configuration. Every section is optional; commands check for
/// the ones they need.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panel: Option<PanelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dgp: Option<FactorDgp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<LimitSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placebo: Option<PlaceboConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelSection {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treated: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treatment_period: Option<i64>,
}

fn default_reps() -> usize {
    5000
}

fn one() -> usize {
    1
}

/// The Monte Carlo design. `dgp` falls back to the top-level section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dgp: Option<FactorDgp>,
    pub t0_grid: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub include_asymptotic_row: bool,
    #[serde(default = "one")]
    pub t1: usize,
    #[serde(default)]
    pub average_post: bool,
    #[serde(default)]
    pub label: String,
}

impl McSection {
    pub fn resolve(&self, fallback: Option<&FactorDgp>) -> Result<McConfig, CliError> {
        let dgp = self
            .dgp
            .clone()
            .or_else(|| fallback.cloned())
            .ok_or_else(|| CliError::Input("mc needs a dgp (mc.dgp or the dgp section)".into()))?;
        Ok(McConfig {
            dgp,
            t0_grid: self.t0_grid.clone(),
            reps: self.reps,
            estimators: self.estimators.clone(),
            base_seed: self.base_seed,
            include_asymptotic_row: self.include_asymptotic_row,
            t1: self.t1,
            average_post: self.average_post,
            label: self.label.clone(),
        })
    }
}

/// Limit objects written out as plain arrays; matrices are lists of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitSection {
    pub mu0: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub omega_second: Vec<Vec<f64>>,
    pub sigma2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_variances: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinned_theta0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinned_theta: Option<Vec<Vec<f64>>>,
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::Input(format!("limit.{name}: rows have different lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, k| rows[i][k]))
}

impl LimitSection {
    pub fn to_spec(&self) -> Result<LimitSpec, CliError> {
        let mut spec = LimitSpec::new(
            DVector::from_column_slice(&self.mu0),
            matrix("mu", &self.mu)?,
            matrix("omega_second", &self.omega_second)?,
            self.sigma2,
        );
        if let Some(v) = &self.omega0 {
            spec.omega0 = DVector::from_column_slice(v);
        }
        if let Some(v) = &self.unit_variances {
            spec.unit_variances = Some(DVector::from_column_slice(v));
        }
        if let Some(v) = &self.post_mean {
            spec.post_mean = DVector::from_column_slice(v);
        }
        match (&self.pinned_theta0, &self.pinned_theta) {
            (Some(t0), Some(t)) => {
                spec.pinned = Some((DVector::from_column_slice(t0), matrix("pinned_theta", t)?));
            }
            (None, None) => {}
            _ => {
                return Err(CliError::Input(
                    "limit.pinned_theta0 and limit.pinned_theta go together".into(),
                ))
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directory: Option<PathBuf>,
    /// Artifact kinds to write: `csv`, `json`, `svg`. Tables and the manifest
    /// are always written; leaving out `svg` skips the plots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formats: Option<Vec<String>>,
}

impl OutputSection {
    pub fn validate(&self) -> Result<(), CliError> {
        for f in self.formats.iter().flatten() {
            if !matches!(f.as_str(), "csv" | "json" | "svg") {
                return Err(CliError::Input(format!(
                    "output.formats: unknown format `{f}` (expected csv, json or svg)"
                )));
            }
        }
        Ok(())
    }

    pub fn wants_svg(&self) -> bool {
        self.formats
            .as_ref()
            .is_none_or(|f| f.iter().any(|x| x == "svg"))
    }
}

/// Read a configuration, naming the offending key path on failure.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Input(format!("config at `{path}`: {}", e.into_inner()))
    })?;
    if let Some(out) = &cfg.output {
        out.validate()?;
    }
    Ok(cfg)
}
