//! Balanced outcome panels, CSV ingestion and the pre-estimation transforms.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcomes for J+1 units over T periods. The treated unit is always row 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    outcomes: DMatrix<f64>,
    t0: usize,
    period_labels: Vec<i64>,
    unit_labels: Vec<String>,
}

impl Panel {
    /// Build a panel from a (J+1) x T outcome matrix whose first row is the
    /// treated unit. `t0` counts the pre-treatment periods.
    pub fn new(
        outcomes: DMatrix<f64>,
        t0: usize,
        period_labels: Vec<i64>,
        unit_labels: Vec<String>,
    ) -> Result<Self> {
        let (units, periods) = outcomes.shape();
        if units < 2 {
            return Err(Error::InvalidPanel(format!(
                "need a treated unit and at least one control, got {units} units"
            )));
        }
        if period_labels.len() != periods {
            return Err(Error::Dimension {
                what: "period labels",
                expected: periods,
                got: period_labels.len(),
            });
        }
        if unit_labels.len() != units {
            return Err(Error::Dimension {
                what: "unit labels",
                expected: units,
                got: unit_labels.len(),
            });
        }
        if t0 < 1 || t0 >= periods {
            return Err(Error::InvalidPanel(format!(
                "need 1 <= t0 < T, got t0 = {t0} with T = {periods}"
            )));
        }
        if period_labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPanel(
                "period labels must be strictly increasing".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for label in &unit_labels {
            if !seen.insert(label.as_str()) {
                return Err(Error::InvalidPanel(format!("duplicate unit label `{label}`")));
            }
        }
        if let Some(pos) = outcomes.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % units, pos / units);
            return Err(Error::InvalidPanel(format!(
                "non-finite outcome for unit `{}` at period {}",
                unit_labels[r], period_labels[c]
            )));
        }
        Ok(Panel {
            outcomes,
            t0,
            period_labels,
            unit_labels,
        })
    }

    /// Panel with default labels: units `0..=J`, periods `1..=T`.
    pub fn from_matrix(outcomes: DMatrix<f64>, t0: usize) -> Result<Self> {
        let periods = (1..=outcomes.ncols() as i64).collect();
        let units = (0..outcomes.nrows()).map(|j| j.to_string()).collect();
        Panel::new(outcomes, t0, periods, units)
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    /// Total number of periods T.
    pub fn periods(&self) -> usize {
        self.outcomes.ncols()
    }

    /// Number of post-treatment periods.
    pub fn t1(&self) -> usize {
        self.periods() - self.t0
    }

    /// Number of control units J.
    pub fn controls(&self) -> usize {
        self.outcomes.nrows() - 1
    }

    pub fn period_labels(&self) -> &[i64] {
        &self.period_labels
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn post_labels(&self) -> &[i64] {
        &self.period_labels[self.t0..]
    }

    /// Treated outcome series.
    pub fn treated(&self) -> DVector<f64> {
        self.outcomes.row(0).transpose()
    }

    /// J x T control outcomes.
    pub fn control_matrix(&self) -> DMatrix<f64> {
        self.outcomes.rows(1, self.controls()).into_owned()
    }

    /// Treated pre-period outcomes.
    pub fn treated_pre(&self) -> DVector<f64> {
        self.outcomes.view((0, 0), (1, self.t0)).transpose().column(0).into_owned()
    }

    /// J x T0 control pre-period outcomes.
    pub fn controls_pre(&self) -> DMatrix<f64> {
        self.outcomes
            .view((1, 0), (self.controls(), self.t0))
            .into_owned()
    }

    /// Pre-period mean of every unit (length J+1).
    pub fn pre_means(&self) -> DVector<f64> {
        let pre = self.outcomes.columns(0, self.t0);
        DVector::from_iterator(
            pre.nrows(),
            pre.row_iter().map(|r| r.sum() / self.t0 as f64),
        )
    }

    /// Position of a unit label (0 is the treated unit).
    pub fn unit_index(&self, label: &str) -> Option<usize> {
        self.unit_labels.iter().position(|u| u == label)
    }

    /// Same labels and dates, new outcomes.
    pub fn with_outcomes(&self, outcomes: DMatrix<f64>) -> Result<Self> {
        if outcomes.shape() != self.outcomes.shape() {
            return Err(Error::Dimension {
                what: "outcome matrix rows",
                expected: self.outcomes.nrows(),
                got: outcomes.nrows(),
            });
        }
        Panel::new(
            outcomes,
            self.t0,
            self.period_labels.clone(),
            self.unit_labels.clone(),
        )
    }

    /// Re-designate the treated unit and the number of pre-periods, keeping
    /// only the first `keep_periods` periods.
    pub fn reassign(&self, treated: usize, t0: usize, keep_periods: usize) -> Result<Self> {
        if treated > self.controls() {
            return Err(Error::InvalidArgument(format!("no unit at index {treated}")));
        }
        if keep_periods > self.periods() {
            return Err(Error::InvalidArgument(format!(
                "cannot keep {keep_periods} of {} periods",
                self.periods()
            )));
        }
        let mut order: Vec<usize> = vec![treated];
        order.extend((0..self.outcomes.nrows()).filter(|&j| j != treated));
        let outcomes = DMatrix::from_fn(order.len(), keep_periods, |r, c| {
            self.outcomes[(order[r], c)]
        });
        let units = order.iter().map(|&j| self.unit_labels[j].clone()).collect();
        Panel::new(
            outcomes,
            t0,
            self.period_labels[..keep_periods].to_vec(),
            units,
        )
    }
}

/// Estimated (or true) treatment effects for the post-treatment periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSeries {
    pub values: Vec<f64>,
    pub period_labels: Vec<i64>,
}

impl EffectSeries {
    pub fn new(values: Vec<f64>, period_labels: Vec<i64>) -> Result<Self> {
        if values.len() != period_labels.len() {
            return Err(Error::Dimension {
                what: "effect series",
                expected: period_labels.len(),
                got: values.len(),
            });
        }
        Ok(EffectSeries {
            values,
            period_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Deserialize)]
struct LongRow {
    unit: String,
    period: String,
    outcome: String,
}

/// Read a long CSV with header `unit,period,outcome`.
///
/// The treated unit is moved to row 0 and `t0` counts the periods strictly
/// before `treatment_period`.
pub fn load_panel<R: Read>(source: R, treated: &str, treatment_period: i64) -> Result<Panel> {
    load(source, Some((treated, treatment_period)))
}

/// Read a long CSV without a treatment assignment, for exercises such as the
/// placebo runs that rotate the treated unit themselves. Units keep their
/// file order and every period but the last counts as pre-treatment.
pub fn load_panel_untreated<R: Read>(source: R) -> Result<Panel> {
    load(source, None)
}

fn load<R: Read>(source: R, assignment: Option<(&str, i64)>) -> Result<Panel> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    if names != ["unit", "period", "outcome"] {
        return Err(Error::Csv {
            row: 1,
            message: format!("expected header `unit,period,outcome`, found `{}`", names.join(",")),
        });
    }

    let mut units: Vec<String> = Vec::new();
    let mut unit_pos: HashMap<String, usize> = HashMap::new();
    let mut cells: HashMap<(usize, i64), f64> = HashMap::new();
    let mut periods = BTreeSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            row: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        let parsed: LongRow = record.deserialize(Some(&headers)).map_err(|e| Error::Csv {
            row,
            message: e.to_string(),
        })?;
        let period: i64 = parsed.period.parse().map_err(|_| Error::Csv {
            row,
            message: format!("period `{}` is not an integer", parsed.period),
        })?;
        let outcome: f64 = parsed.outcome.parse().map_err(|_| Error::Csv {
            row,
            message: format!("outcome `{}` is not a number", parsed.outcome),
        })?;
        if !outcome.is_finite() {
            return Err(Error::Csv {
                row,
                message: format!("outcome `{}` is not finite", parsed.outcome),
            });
        }
        let idx = *unit_pos.entry(parsed.unit.clone()).or_insert_with(|| {
            units.push(parsed.unit.clone());
            units.len() - 1
        });
        if cells.insert((idx, period), outcome).is_some() {
            return Err(Error::DuplicateCell {
                unit: parsed.unit,
                period,
                row,
            });
        }
        periods.insert(period);
    }

    let treated_idx = match assignment {
        Some((treated, _)) => *unit_pos
            .get(treated)
            .ok_or_else(|| Error::UnknownUnit(treated.to_string()))?,
        None if units.is_empty() => {
            return Err(Error::InvalidPanel("no data rows".into()));
        }
        None => 0,
    };
    let periods: Vec<i64> = periods.into_iter().collect();
    let mut order = vec![treated_idx];
    order.extend((0..units.len()).filter(|&u| u != treated_idx));

    let mut missing = Vec::new();
    let mut outcomes = DMatrix::zeros(units.len(), periods.len());
    for (r, &u) in order.iter().enumerate() {
        for (c, &p) in periods.iter().enumerate() {
            match cells.get(&(u, p)) {
                Some(&v) => outcomes[(r, c)] = v,
                None => missing.push((units[u].clone(), p)),
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Unbalanced { missing });
    }
    let t0 = match assignment {
        Some((_, start)) => periods.iter().filter(|&&p| p < start).count(),
        None => periods.len().saturating_sub(1),
    };
    let labels = order.iter().map(|&u| units[u].clone()).collect();
    Panel::new(outcomes, t0, periods, labels)
}

/// Write the panel as a long CSV, 17 significant digits per value.
pub fn write_long_csv<W: Write>(panel: &Panel, sink: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| Error::Io(e.to_string());
    out.write_record(["unit", "period", "outcome"]).map_err(csv_err)?;
    for (r, unit) in panel.unit_labels.iter().enumerate() {
        for (c, period) in panel.period_labels.iter().enumerate() {
            out.write_record([
                unit.clone(),
                period.to_string(),
                format!("{:.16e}", panel.outcomes[(r, c)]),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Write the panel as a wide CSV: a `period` column then one column per unit.
pub fn write_wide_csv<W: Write>(panel: &Panel, sink: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| Error::Io(e.to_string());
    let mut header = vec!["period".to_string()];
    header.extend(panel.unit_labels.iter().cloned());
    out.write_record(&header).map_err(csv_err)?;
    for (c, period) in panel.period_labels.iter().enumerate() {
        let mut row = vec![period.to_string()];
        row.extend(
            (0..panel.outcomes.nrows()).map(|r| format!("{:.16e}", panel.outcomes[(r, c)])),
        );
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Subtract each unit's pre-treatment mean from its whole series.
pub fn demean_pre(panel: &Panel) -> Panel {
    let means = panel.pre_means();
    let mut out = panel.outcomes.clone();
    for (r, mut row) in out.row_iter_mut().enumerate() {
        row.add_scalar_mut(-means[r]);
    }
    Panel {
        outcomes: out,
        ..panel.clone()
    }
}

/// Subtract the cross-sectional control mean at every period from every unit.
pub fn detrend_by_control_mean(panel: &Panel) -> Panel {
    let j = panel.controls() as f64;
    let controls = panel.outcomes.rows(1, panel.controls());
    let mut out = panel.outcomes.clone();
    for (c, col) in controls.column_iter().enumerate() {
        let mean = col.sum() / j;
        out.column_mut(c).add_scalar_mut(-mean);
    }
    Panel {
        outcomes: out,
        ..panel.clone()
    }
}

/// Difference every remaining unit against the control unit labelled `base`.
/// The base row is dropped, so J falls by one.
pub fn difference_against_base(panel: &Panel, base: &str) -> Result<Panel> {
    let b = panel
        .unit_index(base)
        .ok_or_else(|| Error::UnknownUnit(base.to_string()))?;
    if b == 0 {
        return Err(Error::InvalidArgument(
            "the base unit must be a control, not the treated unit".into(),
        ));
    }
    if panel.controls() < 2 {
        return Err(Error::InvalidArgument(
            "differencing needs at least two controls".into(),
        ));
    }
    let keep: Vec<usize> = (0..panel.outcomes.nrows()).filter(|&r| r != b).collect();
    let base_row = panel.outcomes.row(b);
    let outcomes = DMatrix::from_fn(keep.len(), panel.periods(), |r, c| {
        panel.outcomes[(keep[r], c)] - base_row[c]
    });
    let units = keep.iter().map(|&r| panel.unit_labels[r].clone()).collect();
    Panel::new(outcomes, panel.t0, panel.period_labels.clone(), units)
}
