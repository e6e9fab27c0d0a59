//! Static SVG plots.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::placebo::PlaceboReport;

const SIZE: f64 = 400.0;
const MARGIN: f64 = 50.0;

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn spanning(values: impl Iterator<Item = f64>) -> Axis {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Axis { lo: 0.0, hi: 1.0 };
        }
        let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5f64.max(0.05 * hi.abs()) };
        Axis {
            lo: lo - pad,
            hi: hi + pad,
        }
    }

    /// Map to `[0, SIZE]`.
    fn map(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo) * SIZE
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn header(out: &mut String, width: f64, height: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
}

/// Scatter of per-unit placebo RMSE, `x` against `y`, with the identity
/// line. Units whose RMSE is missing for either method are left out.
pub fn placebo_scatter(report: &PlaceboReport, x: EstimatorKind, y: EstimatorKind) -> Result<String> {
    for m in [x, y] {
        if !report.methods.contains(&m) {
            return Err(Error::InvalidArgument(format!("method {m} not in report")));
        }
    }
    let points: Vec<(&str, f64, f64)> = report
        .units()
        .into_iter()
        .filter_map(|u| {
            let a = report.rmse_of(u, x)?.rmse?;
            let b = report.rmse_of(u, y)?.rmse?;
            Some((u, a, b))
        })
        .collect();
    // one axis for both so the identity line is the diagonal
    let axis = Axis::spanning(points.iter().flat_map(|p| [p.1, p.2]));
    let total = SIZE + 2.0 * MARGIN;
    let px = |v: f64| MARGIN + axis.map(v);
    let py = |v: f64| MARGIN + SIZE - axis.map(v);

    let mut out = String::new();
    header(&mut out, total, total);
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<line class="identity" x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4 3"/>"#,
        px(axis.lo),
        py(axis.lo),
        px(axis.hi),
        py(axis.hi)
    );
    for (unit, a, b) in &points {
        let _ = writeln!(
            out,
            r#"<circle class="point" cx="{:.3}" cy="{:.3}" r="4" fill="steelblue" data-unit="{}" data-x="{a:e}" data-y="{b:e}"><title>{}</title></circle>"#,
            px(*a),
            py(*b),
            escape(unit),
            escape(unit)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{} RMSE</text>"#,
        MARGIN + SIZE / 2.0,
        total - 12.0,
        escape(&x.to_string())
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 14 {})">{} RMSE</text>"#,
        MARGIN + SIZE / 2.0,
        MARGIN + SIZE / 2.0,
        escape(&y.to_string())
    );
    out.push_str("</svg>\n");
    Ok(out)
}

/// A named series on a shared period axis.
pub struct Series<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
}

/// Side-by-side line panels sharing the period axis; a vertical rule marks
/// the first post-treatment period.
pub fn line_panels(
    periods: &[i64],
    first_post: Option<i64>,
    panels: &[(&str, Vec<Series<'_>>)],
) -> Result<String> {
    if periods.is_empty() {
        return Err(Error::InvalidArgument("no periods to plot".into()));
    }
    for (_, series) in panels {
        for s in series {
            if s.values.len() != periods.len() {
                return Err(Error::Dimension {
                    what: "plotted series",
                    expected: periods.len(),
                    got: s.values.len(),
                });
            }
        }
    }
    const COLORS: [&str; 4] = ["black", "firebrick", "steelblue", "darkgreen"];
    let xaxis = Axis::spanning(periods.iter().map(|&p| p as f64));
    let width = panels.len() as f64 * (SIZE + 2.0 * MARGIN);
    let height = SIZE + 2.0 * MARGIN;
    let mut out = String::new();
    header(&mut out, width, height);
    for (k, (title, series)) in panels.iter().enumerate() {
        let left = k as f64 * (SIZE + 2.0 * MARGIN) + MARGIN;
        let yaxis = Axis::spanning(series.iter().flat_map(|s| s.values.iter().copied()));
        let px = |p: i64| left + xaxis.map(p as f64);
        let py = |v: f64| MARGIN + SIZE - yaxis.map(v);
        let _ = writeln!(out, r#"<g class="panel">"#);
        let _ = writeln!(
            out,
            r#"<rect x="{left}" y="{MARGIN}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{}</text>"#,
            left + SIZE / 2.0,
            MARGIN - 15.0,
            escape(title)
        );
        if let Some(p) = first_post {
            let _ = writeln!(
                out,
                r#"<line x1="{0:.3}" y1="{MARGIN}" x2="{0:.3}" y2="{1}" stroke="gray" stroke-dasharray="4 3"/>"#,
                px(p),
                MARGIN + SIZE
            );
        }
        for (i, s) in series.iter().enumerate() {
            let pts: Vec<String> = periods
                .iter()
                .zip(s.values)
                .filter(|(_, v)| v.is_finite())
                .map(|(&p, &v)| format!("{:.3},{:.3}", px(p), py(v)))
                .collect();
            let color = COLORS[i % COLORS.len()];
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}" data-series="{}"/>"#,
                pts.join(" "),
                escape(s.name)
            );
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" font-size="12" fill="{color}">{}</text>"#,
                left + 8.0,
                MARGIN + 16.0 + 14.0 * i as f64,
                escape(s.name)
            );
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}
