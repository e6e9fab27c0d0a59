//! The subcommands. Each resolves its inputs (config file, then flags),
//! calls the library, writes its files and a manifest, and prints a short
//! human-readable table.

use std::fmt::Write as _;
use std::fs::File;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde_json::{json, Value};
use syncon::asymptotics::limit_spec_from_dgp;
use syncon::estimators::parse_constraints;
use syncon::mc::format_float;
use syncon::svg::{line_panels, Series};
use syncon::{
    detrend_by_control_mean, estimate, gamma_consistency_check, gamma_many_groups,
    gamma_two_groups, gamma_variance, infeasible_weights, limit_weights, load_panel,
    load_panel_untreated, misallocation, placebo_scatter, run_mc_with_workers,
    run_placebo_with_workers, write_long_csv, write_mc_csv, write_placebo_cells_csv,
    write_placebo_rmse_csv, ConstraintSet, EstimatorKind, FactorDgp, LimitSpec, Panel,
    PlaceboConfig, SimSeed,
};

use crate::config::{load_config, OutputSection, PanelSection, RunConfig};
use crate::manifest::{file_digest, OutputDir};
use crate::{
    AsymptoticsArgs, CliError, Common, DetrendArgs, FitArgs, McArgs, PanelArgs, PlaceboArgs,
    SimulateArgs,
};

const DEFAULT_OUT: &str = "syncon-out";

fn base_config(common: &Common) -> Result<RunConfig, CliError> {
    match &common.config {
        Some(p) => load_config(p),
        None => Ok(RunConfig::default()),
    }
}

/// Apply `--out` and return the output directory.
fn output_dir(common: &Common, cfg: &mut RunConfig) -> Result<OutputDir, CliError> {
    if let Some(out) = &common.out {
        cfg.output.get_or_insert_with(OutputSection::default).directory = Some(out.clone());
    }
    let dir = cfg
        .output
        .as_ref()
        .and_then(|o| o.directory.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    OutputDir::create(&dir)
}

fn wants_svg(cfg: &RunConfig) -> bool {
    cfg.output.as_ref().is_none_or(OutputSection::wants_svg)
}

fn inputs(cfg: &RunConfig, options: Value, files: &[(String, String)]) -> Value {
    let files: serde_json::Map<String, Value> = files
        .iter()
        .map(|(p, h)| (p.clone(), Value::String(h.clone())))
        .collect();
    json!({
        "config": serde_json::to_value(cfg).expect("config serializes"),
        "options": options,
        "files": files,
    })
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> syncon::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Merge panel flags into the config and load the panel with a treatment.
fn treated_panel(args: &PanelArgs, cfg: &mut RunConfig) -> Result<(Panel, PathBuf), CliError> {
    let mut section = cfg.panel.clone();
    if let Some(p) = &args.panel {
        let s = section.get_or_insert(PanelSection {
            path: p.clone(),
            treated: None,
            treatment_period: None,
        });
        s.path = p.clone();
    }
    let mut s = section.ok_or_else(|| CliError::Input("no panel given (--panel or panel.path)".into()))?;
    if let Some(t) = &args.treated {
        s.treated = Some(t.clone());
    }
    if let Some(t) = args.treat_period {
        s.treatment_period = Some(t);
    }
    let treated = s
        .treated
        .clone()
        .ok_or_else(|| CliError::Input("no treated unit given (--treated or panel.treated)".into()))?;
    let period = s.treatment_period.ok_or_else(|| {
        CliError::Input("no treatment period given (--treat-period or panel.treatment_period)".into())
    })?;
    let file = open(&s.path)?;
    let panel = load_panel(file, &treated, period)?;
    let path = s.path.clone();
    cfg.panel = Some(s);
    Ok((panel, path))
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Input(format!("cannot open {}: {e}", path.display())))
}

fn resolve_method(method: &str, constraints: Option<&str>) -> Result<EstimatorKind, CliError> {
    let kind: EstimatorKind = method.parse()?;
    match constraints {
        None => Ok(kind),
        Some(c) => match kind {
            EstimatorKind::Sc | EstimatorKind::ScDemeaned | EstimatorKind::Custom(_) => {
                Ok(EstimatorKind::Custom(parse_constraints(c)?))
            }
            other => Err(CliError::Input(format!(
                "--constraints applies to weight estimators, not {other}"
            ))),
        },
    }
}

pub fn fit(args: &FitArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&args.common)?;
    let (panel, path) = treated_panel(&args.panel, &mut cfg)?;
    let kind = resolve_method(&args.method, args.constraints.as_deref())?;
    let report = estimate(&panel, kind)?;
    let mut out = output_dir(&args.common, &mut cfg)?;

    let mut weights = String::from("unit,weight\n");
    for (label, w) in panel.unit_labels()[1..].iter().zip(report.weights.iter()) {
        let _ = writeln!(weights, "{},{}", csv_field(label), format_float(*w));
    }
    out.write("weights.csv", weights.as_bytes())?;

    let mut effects = String::from("period,effect\n");
    for (p, e) in report.effects.period_labels.iter().zip(&report.effects.values) {
        let _ = writeln!(effects, "{p},{}", format_float(*e));
    }
    out.write("effects.csv", effects.as_bytes())?;

    let summary = json!({
        "method": kind.to_string(),
        "treated": panel.unit_labels()[0],
        "t0": panel.t0(),
        "controls": panel.controls(),
        "pre_rmspe": report.pre_rmspe,
        "intercept": report.intercept,
        "diagnostics": report.diagnostics,
    });
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    out.write("summary.json", text.as_bytes())?;

    let options = json!({ "method": kind.to_string() });
    out.finish("fit", &inputs(&cfg, options, &[file_digest(&path)?]), None)?;

    println!("{kind}: pre-period RMSPE {:.3}, intercept {:.3}", report.pre_rmspe, report.intercept);
    for (p, e) in report.effects.period_labels.iter().zip(&report.effects.values) {
        println!("  {p:>8}  {e:>10.3}");
    }
    Ok(())
}

/// Quote a CSV field when needed.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn require_dgp(cfg: &RunConfig) -> Result<FactorDgp, CliError> {
    cfg.dgp
        .clone()
        .ok_or_else(|| CliError::Input("the config needs a dgp section".into()))
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&args.common)?;
    let dgp = require_dgp(&cfg)?;
    let seed = SimSeed {
        base: args.seed,
        stream: args.stream,
    };
    let panel = simulate_panel(&dgp, args.t0, args.t1, seed)?;
    let mut out = output_dir(&args.common, &mut cfg)?;
    out.write("panel.csv", &csv_bytes(|b| write_long_csv(&panel, b))?)?;
    let options = json!({
        "t0": args.t0,
        "t1": args.t1,
        "seed": args.seed,
        "stream": args.stream,
        "treated": panel.unit_labels()[0],
        "treatment_period": panel.post_labels()[0],
    });
    out.finish("simulate", &inputs(&cfg, options, &[]), Some(args.seed))?;
    println!(
        "simulated {} units x {} periods; treated `{}` from period {}",
        panel.controls() + 1,
        panel.periods(),
        panel.unit_labels()[0],
        panel.post_labels()[0]
    );
    Ok(())
}

fn simulate_panel(dgp: &FactorDgp, t0: usize, t1: usize, seed: SimSeed) -> Result<Panel, CliError> {
    if t0 == 0 || t1 == 0 {
        return Err(CliError::Input("--t0 and --t1 must be at least 1".into()));
    }
    Ok(syncon::simulate(dgp, t0, t1, seed)?)
}

pub fn mc(args: &McArgs, workers: usize) -> Result<(), CliError> {
    let mut cfg = base_config(&args.common)?;
    let section = cfg
        .mc
        .as_mut()
        .ok_or_else(|| CliError::Input("the config needs an mc section".into()))?;
    if let Some(s) = args.seed {
        section.base_seed = s;
    }
    if let Some(r) = args.reps {
        section.reps = r;
    }
    let mc_config = section.resolve(cfg.dgp.as_ref())?;
    let summary = run_mc_with_workers(&mc_config, workers)?;
    let mut out = output_dir(&args.common, &mut cfg)?;
    out.write("mc.csv", &csv_bytes(|b| write_mc_csv(&summary.rows, b))?)?;
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    out.write("mc.json", text.as_bytes())?;
    out.finish("mc", &inputs(&cfg, json!({}), &[]), Some(mc_config.base_seed))?;

    println!("{:>6} {:<20} {:>7} {:>7} {:>7} {:>7} {:>6}", "t0", "estimator", "mu1", "bias", "se", "mc_err", "reps");
    for r in &summary.rows {
        let t0 = r.t0.map_or_else(|| "inf".into(), |t| t.to_string());
        let mu = r.mu_hat1.map_or_else(String::new, |m| format!("{m:.3}"));
        println!(
            "{t0:>6} {:<20} {mu:>7} {:>7.3} {:>7.3} {:>7.3} {:>6}",
            r.estimator.to_string(),
            r.bias,
            r.se,
            r.mc_error,
            r.reps
        );
        if let Some(e) = &r.error {
            println!("       failures: {e}");
        }
    }
    Ok(())
}

struct LimitRow {
    estimator: String,
    weights: DVector<f64>,
    reconstructed: DVector<f64>,
    bias: f64,
    variance: f64,
    in_phi: bool,
}

fn limit_rows(spec: &LimitSpec, dgp: Option<&FactorDgp>) -> Result<Vec<LimitRow>, CliError> {
    let mut rows = Vec::new();
    for (name, c) in [("SC", ConstraintSet::SC), ("SC_DEMEANED", ConstraintSet::DEMEANED)] {
        let r = limit_weights(spec, c)?;
        rows.push(LimitRow {
            estimator: name.into(),
            reconstructed: r.reconstructed_loadings,
            bias: r.asymptotic_bias,
            variance: r.asymptotic_variance,
            in_phi: r.in_phi,
            weights: r.weights,
        });
    }
    let j = spec.controls();
    let uniform = DVector::from_element(j, 1.0 / j as f64);
    rows.push(fixed_row("DID", spec, uniform, true)?);
    if let Some(d) = dgp {
        if let Ok(w) = infeasible_weights(d) {
            rows.push(fixed_row("SC_INFEASIBLE", spec, w, false)?);
        }
    }
    Ok(rows)
}

fn fixed_row(name: &str, spec: &LimitSpec, w: DVector<f64>, intercept: bool) -> Result<LimitRow, CliError> {
    let pinned_ok = spec.reproduces_pinned(&w);
    Ok(LimitRow {
        estimator: name.into(),
        reconstructed: spec.mu.transpose() * &w,
        bias: spec.bias(&w, intercept),
        variance: if pinned_ok { gamma_variance(spec, &w)? } else { f64::INFINITY },
        in_phi: spec.mismatch(&w).norm() <= 1e-8 && pinned_ok,
        weights: w,
    })
}

pub fn asymptotics(args: &AsymptoticsArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&args.common)?;
    let (spec, dgp) = match (&cfg.limit, &cfg.dgp) {
        (Some(l), _) => (l.to_spec()?, None),
        (None, Some(d)) => (limit_spec_from_dgp(d)?, Some(d.clone())),
        (None, None) => {
            return Err(CliError::Input("the config needs a limit or a dgp section".into()))
        }
    };
    let rows = limit_rows(&spec, dgp.as_ref())?;
    let mut out = output_dir(&args.common, &mut cfg)?;

    let masses: Vec<Option<(f64, f64)>> = rows
        .iter()
        .map(|r| dgp.as_ref().and_then(|d| misallocation(&r.weights, d).ok()))
        .collect();
    let mut table = String::from("estimator,mu_hat1,theta_hat1,bias,se,in_phi\n");
    for (r, m) in rows.iter().zip(&masses) {
        let mu = m.map_or_else(String::new, |(mu, _)| format_float(mu));
        let theta = match (m, &dgp) {
            (Some((_, t)), Some(d)) if d.r > 0 => format_float(*t),
            _ => String::new(),
        };
        let _ = writeln!(
            table,
            "{},{mu},{theta},{},{},{}",
            r.estimator,
            format_float(r.bias),
            format_float(r.variance.sqrt()),
            r.in_phi
        );
    }
    out.write("asymptotics.csv", table.as_bytes())?;

    let mut weights = String::from("estimator,unit,weight\n");
    for r in &rows {
        for (u, w) in r.weights.iter().enumerate() {
            let _ = writeln!(weights, "{},{},{}", r.estimator, u + 1, format_float(*w));
        }
    }
    out.write("limit_weights.csv", weights.as_bytes())?;

    let gamma = dgp.as_ref().map(|d| {
        let num = |v: syncon::Result<f64>| v.ok().map_or(Value::Null, |x| json!(x));
        json!({
            "two_groups": if d.k == 2 { num(gamma_two_groups(d.sigma2, d.j)) } else { Value::Null },
            "many_groups": if 2 * d.k == d.j { num(gamma_many_groups(d.sigma2, d.j)) } else { Value::Null },
            "numerical": if d.r == 0 && d.hetero.is_none() && d.fixed_effects.is_none() {
                num(gamma_consistency_check(d.sigma2, d.j, d.k))
            } else {
                Value::Null
            },
        })
    });
    let detail = json!({
        "rows": rows.iter().zip(&masses).map(|(r, m)| json!({
            "estimator": r.estimator,
            "weights": r.weights.as_slice(),
            "reconstructed_loadings": r.reconstructed.as_slice(),
            "asymptotic_bias": r.bias,
            "asymptotic_variance": finite_or_string(r.variance),
            "in_phi": r.in_phi,
            "mu_hat1": m.map(|x| x.0),
        })).collect::<Vec<_>>(),
        "gamma": gamma,
    });
    let mut text = serde_json::to_string_pretty(&detail).expect("detail serializes");
    text.push('\n');
    out.write("asymptotics.json", text.as_bytes())?;
    out.finish("asymptotics", &inputs(&cfg, json!({}), &[]), None)?;

    println!("{:<14} {:>7} {:>7} {:>7}", "estimator", "mu1", "bias", "se");
    for (r, m) in rows.iter().zip(&masses) {
        let mu = m.map_or_else(String::new, |(mu, _)| format!("{mu:.2}"));
        println!("{:<14} {mu:>7} {:>7.2} {:>7.2}", r.estimator, r.bias, r.variance.sqrt());
    }
    Ok(())
}

fn finite_or_string(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(format_float(v))
    }
}

fn parse_window(s: &str) -> Result<(i64, i64), CliError> {
    let bad = || CliError::Input(format!("window `{s}` is not `first:last`"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn file_tag(kind: EstimatorKind) -> String {
    kind.to_string().replace([':', '+'], "-").to_ascii_lowercase()
}

pub fn placebo(args: &PlaceboArgs, workers: usize) -> Result<(), CliError> {
    let mut cfg = base_config(&args.common)?;
    if let Some(p) = &args.panel {
        let s = cfg.panel.get_or_insert(PanelSection {
            path: p.clone(),
            treated: None,
            treatment_period: None,
        });
        s.path = p.clone();
    }
    let path = cfg
        .panel
        .as_ref()
        .map(|s| s.path.clone())
        .ok_or_else(|| CliError::Input("no panel given (--panel or panel.path)".into()))?;
    let mut pc = cfg.placebo.clone();
    if let Some(w) = &args.window {
        let window = parse_window(w)?;
        match &mut pc {
            Some(c) => c.window = window,
            None => {
                pc = Some(PlaceboConfig {
                    window,
                    methods: vec![EstimatorKind::Sc, EstimatorKind::ScDemeaned, EstimatorKind::Did],
                    min_train: 5,
                })
            }
        }
    }
    let mut pc = pc.ok_or_else(|| CliError::Input("no placebo window (--window or placebo.window)".into()))?;
    if let Some(m) = &args.methods {
        pc.methods = m
            .split(',')
            .map(|s| s.trim().parse::<EstimatorKind>())
            .collect::<syncon::Result<_>>()?;
    }
    if let Some(n) = args.min_train {
        pc.min_train = n;
    }
    cfg.placebo = Some(pc.clone());

    let panel = load_panel_untreated(open(&path)?)?;
    let report = run_placebo_with_workers(&panel, &pc, workers)?;
    let mut out = output_dir(&args.common, &mut cfg)?;
    out.write("placebo_rmse.csv", &csv_bytes(|b| write_placebo_rmse_csv(&report, b))?)?;
    out.write("placebo_cells.csv", &csv_bytes(|b| write_placebo_cells_csv(&report, b))?)?;
    if wants_svg(&cfg) {
        let x = pc.methods[0];
        for &y in &pc.methods[1..] {
            let svg = placebo_scatter(&report, x, y)?;
            out.write(&format!("placebo_{}_vs_{}.svg", file_tag(x), file_tag(y)), svg.as_bytes())?;
        }
    }
    out.finish("placebo", &inputs(&cfg, json!({}), &[file_digest(&path)?]), None)?;

    print!("{:<16}", "unit");
    for m in &pc.methods {
        print!(" {:>14}", m.to_string());
    }
    println!();
    for unit in report.units() {
        print!("{unit:<16}");
        for &m in &pc.methods {
            let v = report.rmse_of(unit, m).and_then(|r| r.rmse);
            print!(" {:>14}", v.map_or_else(|| "failed".into(), |x| format!("{x:.3}")));
        }
        println!();
    }
    Ok(())
}

pub fn detrend(args: &DetrendArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&args.common)?;
    let (panel, path) = treated_panel(&args.panel, &mut cfg)?;
    let kind: EstimatorKind = args.method.parse()?;
    if !kind.constraints().is_some_and(|c| c.sum_to_one) {
        return Err(CliError::Input(format!(
            "detrend needs a weight estimator with adding-up, not {kind}"
        )));
    }
    let detrended = detrend_by_control_mean(&panel);
    let before = estimate(&panel, kind)?;
    let after = estimate(&detrended, kind)?;
    let mut out = output_dir(&args.common, &mut cfg)?;
    out.write("detrended.csv", &csv_bytes(|b| write_long_csv(&detrended, b))?)?;

    let mut weights = String::from("unit,weight_original,weight_detrended\n");
    for (c, label) in panel.unit_labels()[1..].iter().enumerate() {
        let _ = writeln!(
            weights,
            "{},{},{}",
            csv_field(label),
            format_float(before.weights[c]),
            format_float(after.weights[c])
        );
    }
    out.write("detrend_weights.csv", weights.as_bytes())?;

    if wants_svg(&cfg) {
        let raw_treated: Vec<f64> = panel.treated().iter().copied().collect();
        let raw_sc: Vec<f64> = before.counterfactual.iter().copied().collect();
        let dt_treated: Vec<f64> = detrended.treated().iter().copied().collect();
        let dt_sc: Vec<f64> = after.counterfactual.iter().copied().collect();
        let svg = line_panels(
            panel.period_labels(),
            Some(panel.post_labels()[0]),
            &[
                (
                    "original",
                    vec![
                        Series { name: "treated", values: &raw_treated },
                        Series { name: "synthetic", values: &raw_sc },
                    ],
                ),
                (
                    "de-trended",
                    vec![
                        Series { name: "treated", values: &dt_treated },
                        Series { name: "synthetic", values: &dt_sc },
                    ],
                ),
            ],
        )?;
        out.write("detrend.svg", svg.as_bytes())?;
    }
    let options = json!({ "method": kind.to_string() });
    out.finish("detrend", &inputs(&cfg, options, &[file_digest(&path)?]), None)?;
    println!(
        "{kind}: pre-period RMSPE {:.3} original, {:.3} de-trended",
        before.pre_rmspe, after.pre_rmspe
    );
    Ok(())
}
