//! One-step-ahead placebo exercise on untreated data.
//!
//! Every unit takes a turn as the treated unit. For each year in the window
//! each method is refit on the years strictly before it and its prediction
//! for that year is compared with the realized outcome.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorKind};
use crate::mc::format_float;
use crate::panel::Panel;

fn default_min_train() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaceboConfig {
    /// Inclusive range of target period labels.
    pub window: (i64, i64),
    pub methods: Vec<EstimatorKind>,
    #[serde(default = "default_min_train")]
    pub min_train: usize,
}

impl PlaceboConfig {
    /// Period indices of the window, checked against `panel`.
    fn targets(&self, panel: &Panel) -> Result<Vec<usize>> {
        let (lo, hi) = self.window;
        if lo > hi {
            return Err(Error::InvalidArgument(format!("empty window {lo}..={hi}")));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("no placebo methods".into()));
        }
        if self.min_train == 0 {
            return Err(Error::InvalidArgument("min_train must be at least 1".into()));
        }
        let labels = panel.period_labels();
        for bound in [lo, hi] {
            if !labels.contains(&bound) {
                return Err(Error::InvalidArgument(format!(
                    "window bound {bound} is not a period of the panel"
                )));
            }
        }
        let idx: Vec<usize> = (0..labels.len())
            .filter(|&i| (lo..=hi).contains(&labels[i]))
            .collect();
        if idx[0] < self.min_train {
            return Err(Error::InvalidArgument(format!(
                "window starts at {lo} with {} training periods, need {}",
                idx[0], self.min_train
            )));
        }
        Ok(idx)
    }
}

/// One (unit, method, year) prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlaceboCell {
    pub unit: String,
    pub method: EstimatorKind,
    pub year: i64,
    pub truth: f64,
    /// `None` when the fit failed; see `error`.
    pub prediction: Option<f64>,
    pub error: Option<String>,
}

impl PlaceboCell {
    pub fn residual(&self) -> Option<f64> {
        self.prediction.map(|p| self.truth - p)
    }
}

/// Per (unit, method) summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlaceboRmse {
    pub unit: String,
    pub method: EstimatorKind,
    /// `None` if any year of the window failed.
    pub rmse: Option<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlaceboReport {
    pub window: (i64, i64),
    pub methods: Vec<EstimatorKind>,
    /// Ordered by unit, then method, then year.
    pub cells: Vec<PlaceboCell>,
    /// Ordered by unit, then method.
    pub rmse: Vec<PlaceboRmse>,
}

impl PlaceboReport {
    pub fn rmse_of(&self, unit: &str, method: EstimatorKind) -> Option<&PlaceboRmse> {
        self.rmse
            .iter()
            .find(|r| r.unit == unit && r.method == method)
    }

    pub fn units(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rmse {
            if !out.contains(&r.unit.as_str()) {
                out.push(&r.unit);
            }
        }
        out
    }
}

/// Root mean square of the window's errors, divided by the window length.
pub fn window_rmse(errors: &[f64]) -> f64 {
    let ss: f64 = errors.iter().map(|e| e * e).sum();
    (ss / errors.len() as f64).sqrt()
}

/// Prediction of `method` for period index `target` with `unit` treated,
/// using only the periods before `target`.
pub fn placebo_prediction(
    panel: &Panel,
    unit: usize,
    target: usize,
    method: EstimatorKind,
) -> Result<f64> {
    let sub = panel.reassign(unit, target, target + 1)?;
    let report = estimate(&sub, method)?;
    Ok(report.counterfactual[target])
}

pub fn run_placebo(panel: &Panel, config: &PlaceboConfig) -> Result<PlaceboReport> {
    run_placebo_with_workers(panel, config, rayon::current_num_threads())
}

/// [`run_placebo`] on `workers` threads; the report does not depend on it.
pub fn run_placebo_with_workers(
    panel: &Panel,
    config: &PlaceboConfig,
    workers: usize,
) -> Result<PlaceboReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    pool.install(|| placebo_grid(panel, config))
}

fn placebo_grid(panel: &Panel, config: &PlaceboConfig) -> Result<PlaceboReport> {
    let targets = config.targets(panel)?;
    let units = panel.controls() + 1;
    let mut grid = Vec::with_capacity(units * config.methods.len() * targets.len());
    for unit in 0..units {
        for &method in &config.methods {
            for &t in &targets {
                grid.push((unit, method, t));
            }
        }
    }
    let y = panel.outcomes();
    let labels = panel.unit_labels();
    let cells: Vec<PlaceboCell> = grid
        .par_iter()
        .map(|&(unit, method, t)| {
            let (prediction, error) = match placebo_prediction(panel, unit, t, method) {
                Ok(p) => (Some(p), None),
                Err(e) => (None, Some(e.to_string())),
            };
            PlaceboCell {
                unit: labels[unit].clone(),
                method,
                year: panel.period_labels()[t],
                truth: y[(unit, t)],
                prediction,
                error,
            }
        })
        .collect();

    let rmse = cells
        .chunks(targets.len())
        .map(|chunk| {
            let errors: Vec<f64> = chunk.iter().filter_map(PlaceboCell::residual).collect();
            let failures = chunk.len() - errors.len();
            PlaceboRmse {
                unit: chunk[0].unit.clone(),
                method: chunk[0].method,
                rmse: (failures == 0).then(|| window_rmse(&errors)),
                failures,
            }
        })
        .collect();
    Ok(PlaceboReport {
        window: config.window,
        methods: config.methods.clone(),
        cells,
        rmse,
    })
}

/// CSV `unit,method,rmse`; failed units get `nan`.
pub fn write_placebo_rmse_csv<W: Write>(report: &PlaceboReport, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["unit", "method", "rmse"]).map_err(csv_err)?;
    for r in &report.rmse {
        let v = format_float(r.rmse.unwrap_or(f64::NAN));
        w.write_record([r.unit.as_str(), &r.method.to_string(), &v])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// CSV `unit,method,year,truth,prediction`; failed cells get `nan`.
pub fn write_placebo_cells_csv<W: Write>(report: &PlaceboReport, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["unit", "method", "year", "truth", "prediction"])
        .map_err(csv_err)?;
    for c in &report.cells {
        w.write_record([
            c.unit.as_str(),
            &c.method.to_string(),
            &c.year.to_string(),
            &format_float(c.truth),
            &format_float(c.prediction.unwrap_or(f64::NAN)),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn fixture() -> Panel {
        // five units, twelve periods, a common trend plus unit levels
        let y = DMatrix::from_fn(5, 12, |u, t| {
            let t = t as f64;
            let u = u as f64;
            0.3 * t + u + (1.7 * t + 0.9 * u).sin() * 0.4
        });
        Panel::from_matrix(y, 11).unwrap()
    }

    fn config() -> PlaceboConfig {
        PlaceboConfig {
            window: (8, 12),
            methods: vec![EstimatorKind::Sc, EstimatorKind::ScDemeaned, EstimatorKind::Did],
            min_train: 5,
        }
    }

    #[test]
    fn identical_units_give_zero_rmse() {
        let y = DMatrix::from_fn(4, 10, |_, t| (t as f64 * 0.7).cos());
        let p = Panel::from_matrix(y, 9).unwrap();
        let cfg = PlaceboConfig {
            window: (7, 10),
            ..config()
        };
        let r = run_placebo(&p, &cfg).unwrap();
        for row in &r.rmse {
            assert!(row.rmse.unwrap() < 1e-9, "{row:?}");
        }
    }

    #[test]
    fn rmse_recomputes_from_cells() {
        let r = run_placebo(&fixture(), &config()).unwrap();
        assert_eq!(r.cells.len(), 5 * 3 * 5);
        for row in &r.rmse {
            let errs: Vec<f64> = r
                .cells
                .iter()
                .filter(|c| c.unit == row.unit && c.method == row.method)
                .map(|c| c.residual().unwrap())
                .collect();
            assert_eq!(row.rmse.unwrap(), window_rmse(&errs));
        }
    }

    #[test]
    fn window_too_early_is_rejected() {
        let cfg = PlaceboConfig {
            window: (3, 12),
            ..config()
        };
        assert!(matches!(
            run_placebo(&fixture(), &cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn failures_are_recorded_not_skipped() {
        // IV needs t0 >= J + 2, which early windows do not have
        let cfg = PlaceboConfig {
            window: (6, 12),
            methods: vec![EstimatorKind::ScIv],
            min_train: 5,
        };
        let r = run_placebo(&fixture(), &cfg).unwrap();
        assert_eq!(r.cells.len(), 5 * 7);
        assert!(r.cells.iter().any(|c| c.error.is_some()));
        assert!(r.rmse.iter().all(|row| row.rmse.is_none() && row.failures > 0));
    }
}
