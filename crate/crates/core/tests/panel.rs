use nalgebra::{DMatrix, DVector};
use syncon::{
    demean_pre, detrend_by_control_mean, difference_against_base, fit_weights, load_panel,
    write_long_csv, ConstraintSet, Error, Panel,
};

const FIXTURE: &str = include_str!("data/smoking_fixture.csv");

fn random_panel(seed: u64, units: usize, periods: usize, t0: usize) -> Panel {
    // small LCG keeps the test free of RNG plumbing
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let y = DMatrix::from_fn(units, periods, |_, _| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 10.0 - 5.0
    });
    Panel::from_matrix(y, t0).unwrap()
}

#[test]
fn two_by_three_panel() {
    let csv = "unit,period,outcome\nA,1,1.0\nA,2,2.0\nA,3,3.0\nB,1,0.5\nB,2,0.5\nB,3,0.5\n";
    let p = load_panel(csv.as_bytes(), "B", 3).unwrap();
    assert_eq!(p.controls(), 1);
    assert_eq!(p.periods(), 3);
    assert_eq!(p.t0(), 2);
    assert_eq!(p.unit_labels()[0], "B");
    assert_eq!(p.outcomes()[(1, 2)], 3.0);
}

#[test]
fn periods_sorted_whatever_the_file_order() {
    let csv = "unit,period,outcome\nA,3,3\nA,1,1\nB,2,5\nA,2,2\nB,3,6\nB,1,4\n";
    let p = load_panel(csv.as_bytes(), "A", 2).unwrap();
    assert_eq!(p.period_labels(), &[1, 2, 3]);
    assert_eq!(p.treated().as_slice(), &[1.0, 2.0, 3.0]);
    assert_eq!(p.t0(), 1);
}

#[test]
fn missing_cell_is_listed() {
    let csv = "unit,period,outcome\nA,1,1\nA,2,2\nB,1,1\n";
    match load_panel(csv.as_bytes(), "A", 2) {
        Err(Error::Unbalanced { missing }) => assert_eq!(missing, vec![("B".to_string(), 2)]),
        other => panic!("expected an unbalanced-panel error, got {other:?}"),
    }
}

#[test]
fn bad_outcome_names_the_row() {
    let csv = "unit,period,outcome\nA,1,1\nA,2,oops\nB,1,1\nB,2,2\n";
    let err = load_panel(csv.as_bytes(), "A", 2).unwrap_err();
    assert!(matches!(err, Error::Csv { row: 3, .. }), "{err:?}");
    assert!(err.to_string().contains("row 3"));
}

#[test]
fn unknown_treated_unit() {
    let csv = "unit,period,outcome\nA,1,1\nA,2,2\nB,1,1\nB,2,2\n";
    assert!(matches!(
        load_panel(csv.as_bytes(), "Z", 2),
        Err(Error::UnknownUnit(u)) if u == "Z"
    ));
}

#[test]
fn duplicate_cell_rejected() {
    let csv = "unit,period,outcome\nA,1,1\nA,1,2\nB,1,1\n";
    assert!(matches!(
        load_panel(csv.as_bytes(), "A", 2),
        Err(Error::DuplicateCell { row: 3, .. })
    ));
}

#[test]
fn fixture_has_nineteen_pre_years() {
    let p = load_panel(FIXTURE.as_bytes(), "S03", 1989).unwrap();
    assert_eq!(p.controls(), 38);
    assert_eq!(p.periods(), 31);
    let expected = (1970..1989).count();
    assert_eq!(p.t0(), expected);
}

#[test]
fn long_csv_round_trip_is_exact() {
    let p = random_panel(3, 5, 12, 8);
    let mut buf = Vec::new();
    write_long_csv(&p, &mut buf).unwrap();
    let back = load_panel(buf.as_slice(), "0", 9).unwrap();
    assert_eq!(back.outcomes(), p.outcomes());
    assert_eq!(back.t0(), p.t0());
}

#[test]
fn demean_constant_series_is_zero() {
    let y = DMatrix::from_fn(4, 6, |r, _| r as f64 * 2.5 - 1.0);
    let d = demean_pre(&Panel::from_matrix(y, 3).unwrap());
    assert!(d.outcomes().amax() == 0.0);
}

#[test]
fn demean_is_idempotent_and_centers() {
    for seed in 0..20 {
        let p = random_panel(seed, 6, 15, 10);
        let once = demean_pre(&p);
        let means = once.pre_means();
        assert!(means.amax() < 1e-12);
        let twice = demean_pre(&once);
        assert!((twice.outcomes() - once.outcomes()).amax() < 1e-12);
        // post values move by the same constant as the pre values
        let shift = p.outcomes()[(2, 12)] - once.outcomes()[(2, 12)];
        assert!((shift - p.pre_means()[2]).abs() < 1e-12);
    }
}

#[test]
fn detrend_zeroes_identical_controls() {
    let y = DMatrix::from_fn(4, 5, |r, c| if r == 0 { c as f64 } else { (c * c) as f64 });
    let d = detrend_by_control_mean(&Panel::from_matrix(y, 3).unwrap());
    assert!(d.control_matrix().amax() < 1e-15);
}

#[test]
fn detrended_controls_average_to_zero() {
    for seed in 0..20 {
        let d = detrend_by_control_mean(&random_panel(seed, 7, 9, 5));
        let c = d.control_matrix();
        for col in c.column_iter() {
            assert!((col.sum() / c.nrows() as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn difference_drops_the_base() {
    let p = random_panel(11, 5, 10, 6);
    let d = difference_against_base(&p, "4").unwrap();
    assert_eq!(d.controls(), p.controls() - 1);
    assert!(d.unit_index("4").is_none());
    assert_eq!(
        d.outcomes()[(1, 3)],
        p.outcomes()[(1, 3)] - p.outcomes()[(4, 3)]
    );
    assert!(difference_against_base(&d, "4").is_err());
    assert!(difference_against_base(&p, "0").is_err());
}

/// Sum-to-one least squares by the bordered normal equations.
fn equality_constrained_ls(y0: &DVector<f64>, y: &DMatrix<f64>) -> DVector<f64> {
    let j = y.nrows();
    let mut kkt = DMatrix::zeros(j + 1, j + 1);
    kkt.view_mut((0, 0), (j, j)).copy_from(&(2.0 * y * y.transpose()));
    for i in 0..j {
        kkt[(i, j)] = 1.0;
        kkt[(j, i)] = 1.0;
    }
    let mut rhs = DVector::zeros(j + 1);
    rhs.rows_mut(0, j).copy_from(&(2.0 * y * y0));
    rhs[j] = 1.0;
    let sol = kkt.lu().solve(&rhs).unwrap();
    sol.rows(0, j).into_owned()
}

#[test]
fn differenced_ols_reconstructs_constrained_weights() {
    for seed in 0..10 {
        let p = random_panel(100 + seed, 5, 30, 25);
        let d = difference_against_base(&p, "4").unwrap();
        let none = ConstraintSet {
            nonneg: false,
            sum_to_one: false,
            intercept: false,
        };
        let free = fit_weights(&d, none).unwrap();
        let mut w = free.weights.as_slice().to_vec();
        w.push(1.0 - w.iter().sum::<f64>());
        let oracle = equality_constrained_ls(&p.treated_pre(), &p.controls_pre());
        for (a, b) in w.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}

#[test]
fn objective_invariant_to_detrending_under_adding_up() {
    let p = random_panel(5, 6, 20, 14);
    let d = detrend_by_control_mean(&p);
    let w = DVector::from_vec(vec![0.1, 0.4, -0.2, 0.5, 0.2]);
    let fit = |panel: &Panel| {
        let r = panel.treated_pre() - panel.controls_pre().transpose() * &w;
        r.norm_squared()
    };
    let (a, b) = (fit(&p), fit(&d));
    assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
}
