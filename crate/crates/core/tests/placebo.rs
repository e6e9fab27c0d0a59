use nalgebra::{DMatrix, DVector};
use syncon::placebo::placebo_prediction;
use syncon::{
    fit_weights, load_panel_untreated, placebo_scatter, run_placebo, run_placebo_with_workers,
    write_placebo_cells_csv, write_placebo_rmse_csv, EstimatorKind, Panel,
    PlaceboConfig,
};

/// Five units over 16 years with a shared trend and unit-specific wiggles.
fn fixture() -> Panel {
    let y = DMatrix::from_fn(5, 16, |u, t| {
        let (u, t) = (u as f64, t as f64);
        10.0 + 0.8 * t + 2.0 * u + (0.7 * t + u).sin() * (1.0 + 0.3 * u) + 0.05 * (u * t).cos()
    });
    let years = (1980..1996).collect();
    let units = ["AA", "BB", "CC", "DD", "EE"].iter().map(|s| s.to_string()).collect();
    Panel::new(y, 15, years, units).unwrap()
}

fn config(methods: Vec<EstimatorKind>) -> PlaceboConfig {
    PlaceboConfig {
        window: (1988, 1995),
        methods,
        min_train: 5,
    }
}

/// Refit from scratch: unit `u` first, the rest in order, periods before
/// `target` for training.
fn oracle(panel: &Panel, u: usize, target: usize, kind: EstimatorKind) -> f64 {
    let y = panel.outcomes();
    let others: Vec<usize> = (0..y.nrows()).filter(|&r| r != u).collect();
    let pre_mean = |r: usize| (0..target).map(|t| y[(r, t)]).sum::<f64>() / target as f64;
    match kind {
        EstimatorKind::Did => {
            let gap = |t: usize| others.iter().map(|&r| y[(r, t)]).sum::<f64>() / others.len() as f64;
            let pre_gap = (0..target).map(gap).sum::<f64>() / target as f64;
            pre_mean(u) - pre_gap + gap(target)
        }
        EstimatorKind::Sc | EstimatorKind::ScDemeaned => {
            let mut rows = vec![u];
            rows.extend(&others);
            let sub = DMatrix::from_fn(rows.len(), target + 1, |r, t| y[(rows[r], t)]);
            let p = Panel::from_matrix(sub, target).unwrap();
            let c = kind.constraints().unwrap();
            let w = fit_weights(&p, c).unwrap().weights;
            let ctrl = DVector::from_iterator(others.len(), others.iter().map(|&r| y[(r, target)]));
            let a = if c.intercept {
                pre_mean(u) - others.iter().zip(w.iter()).map(|(&r, wi)| pre_mean(r) * wi).sum::<f64>()
            } else {
                0.0
            };
            a + ctrl.dot(&w)
        }
        _ => unreachable!(),
    }
}

#[test]
fn cells_match_a_fresh_refit() {
    let panel = fixture();
    let methods = vec![EstimatorKind::Did, EstimatorKind::Sc, EstimatorKind::ScDemeaned];
    let report = run_placebo(&panel, &config(methods)).unwrap();
    assert_eq!(report.cells.len(), 5 * 3 * 8);
    for cell in &report.cells {
        let u = panel.unit_index(&cell.unit).unwrap();
        let t = panel.period_labels().iter().position(|&p| p == cell.year).unwrap();
        let expected = oracle(&panel, u, t, cell.method);
        let got = cell.prediction.unwrap();
        assert!((got - expected).abs() < 1e-9, "{} {} {}: {got} vs {expected}", cell.unit, cell.method, cell.year);
        assert_eq!(cell.truth, panel.outcomes()[(u, t)]);
    }
}

#[test]
fn rmse_recomputes_from_cells() {
    let panel = fixture();
    let report = run_placebo(&panel, &config(vec![EstimatorKind::Sc, EstimatorKind::Did])).unwrap();
    for r in &report.rmse {
        let errs: Vec<f64> = report
            .cells
            .iter()
            .filter(|c| c.unit == r.unit && c.method == r.method)
            .map(|c| c.truth - c.prediction.unwrap())
            .collect();
        assert_eq!(errs.len(), 8);
        let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / 8.0).sqrt();
        assert_eq!(r.rmse.unwrap(), rmse);
    }
}

#[test]
fn identical_units_predict_perfectly() {
    let y = DMatrix::from_fn(4, 12, |_, t| (t as f64 * 0.4).sin() + t as f64);
    let panel = Panel::from_matrix(y, 11).unwrap();
    let cfg = PlaceboConfig {
        window: (7, 12),
        methods: vec![EstimatorKind::Sc, EstimatorKind::ScDemeaned, EstimatorKind::Did],
        min_train: 5,
    };
    let report = run_placebo(&panel, &cfg).unwrap();
    for r in &report.rmse {
        assert!(r.rmse.unwrap() < 1e-9, "{} {}", r.unit, r.method);
    }
}

#[test]
fn future_outcomes_never_leak() {
    let panel = fixture();
    let methods = [EstimatorKind::Sc, EstimatorKind::ScDemeaned, EstimatorKind::Did];
    for u in 0..5 {
        for target in 8..16 {
            for &m in &methods {
                let before = placebo_prediction(&panel, u, target, m).unwrap();
                // the unit's own outcome from the target on, anyone's after it;
                // controls at the target year are regressors, not leakage
                let mut cells = vec![(u, target), (u, 15)];
                if target < 15 {
                    cells.extend([((u + 2) % 5, target + 1), (4, 15)]);
                }
                for (r, t) in cells {
                    let mut y = panel.outcomes().clone();
                    y[(r, t)] += 1e3;
                    let mutated = panel.with_outcomes(y).unwrap();
                    let after = placebo_prediction(&mutated, u, target, m).unwrap();
                    assert_eq!(before, after);
                }
            }
        }
    }
}

#[test]
fn window_needs_training_years() {
    let panel = fixture();
    let mut cfg = config(vec![EstimatorKind::Sc]);
    cfg.window = (1983, 1990);
    assert!(run_placebo(&panel, &cfg).is_err());
    cfg.window = (1985, 1990);
    assert!(run_placebo(&panel, &cfg).is_ok());
    cfg.window = (1990, 1985);
    assert!(run_placebo(&panel, &cfg).is_err());
    cfg.window = (1990, 2010);
    assert!(run_placebo(&panel, &cfg).is_err());
}

#[test]
fn failures_are_kept_per_cell() {
    let panel = fixture();
    let cfg = config(vec![EstimatorKind::ScIv, EstimatorKind::Did]);
    let report = run_placebo(&panel, &cfg).unwrap();
    assert_eq!(report.cells.len(), 5 * 2 * 8);
    let iv: Vec<_> = report.rmse.iter().filter(|r| r.method == EstimatorKind::ScIv).collect();
    assert_eq!(iv.len(), 5);
    assert!(report.cells.iter().all(|c| c.prediction.is_some() != c.error.is_some()));
    assert!(report.rmse.iter().filter(|r| r.method == EstimatorKind::Did).all(|r| r.failures == 0));
}

#[test]
fn report_does_not_depend_on_workers() {
    let panel = fixture();
    let cfg = config(vec![EstimatorKind::Sc, EstimatorKind::Did]);
    let a = run_placebo_with_workers(&panel, &cfg, 1).unwrap();
    let b = run_placebo_with_workers(&panel, &cfg, 4).unwrap();
    assert_eq!(a, b);
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    write_placebo_cells_csv(&a, &mut ca).unwrap();
    write_placebo_cells_csv(&b, &mut cb).unwrap();
    assert_eq!(ca, cb);
    let mut r = Vec::new();
    write_placebo_rmse_csv(&a, &mut r).unwrap();
    let text = String::from_utf8(r).unwrap();
    assert_eq!(text.lines().next().unwrap(), "unit,method,rmse");
    assert_eq!(text.lines().count(), 1 + 10);
}

#[test]
fn scatter_points_carry_report_values() {
    let panel = fixture();
    let report = run_placebo(&panel, &config(vec![EstimatorKind::Did, EstimatorKind::Sc])).unwrap();
    let svg = placebo_scatter(&report, EstimatorKind::Did, EstimatorKind::Sc).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let points: Vec<_> = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("point"))
        .collect();
    assert_eq!(points.len(), 5);
    for p in points {
        let unit = p.attribute("data-unit").unwrap();
        let x: f64 = p.attribute("data-x").unwrap().parse().unwrap();
        let y: f64 = p.attribute("data-y").unwrap().parse().unwrap();
        assert_eq!(x, report.rmse_of(unit, EstimatorKind::Did).unwrap().rmse.unwrap());
        assert_eq!(y, report.rmse_of(unit, EstimatorKind::Sc).unwrap().rmse.unwrap());
    }
    assert_eq!(
        doc.descendants().filter(|n| n.attribute("class") == Some("identity")).count(),
        1
    );
    assert!(placebo_scatter(&report, EstimatorKind::Did, EstimatorKind::ScDemeaned).is_err());
}

#[test]
fn equal_rmse_sits_on_the_identity_line() {
    let panel = fixture();
    let report = run_placebo(&panel, &config(vec![EstimatorKind::Did, EstimatorKind::Sc])).unwrap();
    let svg = placebo_scatter(&report, EstimatorKind::Sc, EstimatorKind::Sc);
    // the same method on both axes is allowed and lands on the diagonal
    let doc_text = svg.unwrap();
    let doc = roxmltree::Document::parse(&doc_text).unwrap();
    let line = doc.descendants().find(|n| n.attribute("class") == Some("identity")).unwrap();
    let coord = |n: &roxmltree::Node, a: &str| n.attribute(a).unwrap().parse::<f64>().unwrap();
    let (x1, y1, x2, y2) = (coord(&line, "x1"), coord(&line, "y1"), coord(&line, "x2"), coord(&line, "y2"));
    for p in doc.descendants().filter(|n| n.attribute("class") == Some("point")) {
        let (cx, cy) = (coord(&p, "cx"), coord(&p, "cy"));
        let cross = (x2 - x1) * (cy - y1) - (y2 - y1) * (cx - x1);
        assert!(cross.abs() / (x2 - x1).hypot(y2 - y1) < 1e-2);
    }
}

#[test]
fn single_unit_scatter_is_valid_xml() {
    let panel = fixture();
    let mut report = run_placebo(&panel, &config(vec![EstimatorKind::Did, EstimatorKind::Sc])).unwrap();
    report.rmse.retain(|r| r.unit == "CC");
    report.cells.retain(|c| c.unit == "CC");
    let svg = placebo_scatter(&report, EstimatorKind::Did, EstimatorKind::Sc).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.descendants().filter(|n| n.attribute("class") == Some("point")).count(), 1);
}

#[test]
fn untreated_loader_keeps_file_order() {
    let csv = "unit,period,outcome\nB,1,1\nB,2,2\nA,1,3\nA,2,4\n";
    let p = load_panel_untreated(csv.as_bytes()).unwrap();
    assert_eq!(p.unit_labels(), &["B".to_string(), "A".to_string()]);
    assert_eq!(p.t0(), 1);
    assert!(load_panel_untreated("unit,period,outcome\n".as_bytes()).is_err());
}
