use syncon::dgp::simulate_parts;
use syncon::{
    estimate, loading_matrix, simulate, EstimatorKind, FactorDgp, FixedEffectPattern, SimSeed,
};

fn seed(base: u64, stream: u64) -> SimSeed {
    SimSeed { base, stream }
}

#[test]
fn same_seed_same_panel() {
    let dgp = FactorDgp {
        r: 2,
        ..FactorDgp::stationary(20, 10, 1.0)
    };
    let a = simulate(&dgp, 30, 2, seed(5, 9)).unwrap();
    let b = simulate(&dgp, 30, 2, seed(5, 9)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, simulate(&dgp, 30, 2, seed(5, 10)).unwrap());
}

#[test]
fn two_group_loadings() {
    let l = loading_matrix(&FactorDgp::stationary(4, 2, 1.0)).unwrap();
    assert_eq!(l.mu0.as_slice(), &[1.0, 0.0]);
    let rows: Vec<Vec<f64>> = l.mu.row_iter().map(|r| r.iter().copied().collect()).collect();
    assert_eq!(rows, vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
}

#[test]
fn nonstationary_loadings_split_in_halves() {
    let dgp = FactorDgp {
        r: 2,
        ..FactorDgp::stationary(20, 10, 1.0)
    };
    let l = loading_matrix(&dgp).unwrap();
    for c in 0..20 {
        let expected = if c < 10 { [1.0, 0.0] } else { [0.0, 1.0] };
        assert_eq!(l.theta.row(c).iter().copied().collect::<Vec<_>>(), expected);
    }
}

#[test]
fn odd_controls_fixed_effect_pattern() {
    let fe = FixedEffectPattern::OddControls.vector(20);
    assert_eq!(&fe[..6], &[1.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert_eq!(fe.iter().sum::<f64>(), 11.0);
    let dgp = FactorDgp {
        fixed_effects: Some(fe),
        ..FactorDgp::stationary(20, 10, 1.0)
    };
    let l = loading_matrix(&dgp).unwrap();
    assert_eq!(l.fe0, 1.0);
    assert_eq!(l.fe[0], 1.0);
    assert_eq!(l.fe[1], 0.0);
}

#[test]
fn noiseless_draw_returns_the_effect() {
    let dgp = FactorDgp {
        post_shift: 0.0,
        treatment_effect: 7.0,
        ..FactorDgp::stationary(20, 10, 0.0)
    };
    for stream in 0..5 {
        let p = simulate(&dgp, 40, 2, seed(1, stream)).unwrap();
        let r = estimate(&p, EstimatorKind::Sc).unwrap();
        for e in &r.effects.values {
            assert!((e - 7.0).abs() < 1e-8);
        }
    }
}

#[test]
fn ar_factor_moments() {
    let dgp = FactorDgp::stationary(20, 10, 1.0);
    let draws = simulate_parts(&dgp, 100_000, 1, seed(77, 0)).unwrap();
    let x: Vec<f64> = draws.lambda.row(0).iter().take(100_000).copied().collect();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let cov = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (n - 1.0);
    assert!((0.98..=1.02).contains(&var), "variance {var}");
    let rho = cov / var;
    assert!((0.49..=0.51).contains(&rho), "autocorrelation {rho}");
}

#[test]
fn post_shift_leaves_pre_periods_alone() {
    let base = FactorDgp::stationary(10, 5, 1.0);
    let shifted = FactorDgp {
        post_shift: 3.0,
        ..base.clone()
    };
    let a = simulate(&base, 20, 3, seed(4, 4)).unwrap();
    let b = simulate(&shifted, 20, 3, seed(4, 4)).unwrap();
    assert_eq!(a.controls_pre(), b.controls_pre());
    assert_eq!(a.treated_pre(), b.treated_pre());
    // only the treated unit and its group move afterwards
    let diff = b.outcomes() - a.outcomes();
    assert!((diff[(0, 21)] - 2.0).abs() < 1e-12);
    assert!((diff[(1, 21)] - 2.0).abs() < 1e-12);
    assert_eq!(diff[(3, 21)], 0.0);
}

#[test]
fn common_shock_never_reaches_adding_up_estimates() {
    let dgp = FactorDgp::stationary(20, 10, 1.0);
    for stream in 0..5 {
        let draws = simulate_parts(&dgp, 50, 1, seed(8, stream)).unwrap();
        let other = simulate_parts(&dgp, 50, 1, seed(9, stream)).unwrap();
        let mut swapped = draws.clone();
        swapped.delta = other.delta.iter().map(|d| 3.0 * d).collect();
        let a = draws.assemble(&dgp).unwrap();
        let b = swapped.assemble(&dgp).unwrap();
        for kind in [EstimatorKind::Sc, EstimatorKind::ScDemeaned, EstimatorKind::Did] {
            let ea = estimate(&a, kind).unwrap().effects.values[0];
            let eb = estimate(&b, kind).unwrap().effects.values[0];
            assert!((ea - eb).abs() < 1e-9, "{kind}: {ea} vs {eb}");
        }
    }
}

#[test]
fn random_walk_variance_grows_linearly() {
    let dgp = FactorDgp {
        r: 2,
        ..FactorDgp::stationary(20, 10, 1.0)
    };
    let reps = 4000;
    let var_at = |t0: usize| {
        let xs: Vec<f64> = (0..reps)
            .map(|s| simulate_parts(&dgp, t0, 1, seed(12, s)).unwrap().gamma[(0, t0 - 1)])
            .collect();
        let m = xs.iter().sum::<f64>() / reps as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (reps as f64 - 1.0)
    };
    let (a, b) = (var_at(20), var_at(60));
    let slope = (b - a) / 40.0;
    assert!((0.9..=1.1).contains(&(a / 20.0)), "{a}");
    assert!((0.9..=1.1).contains(&(b / 60.0)), "{b}");
    assert!(slope > 0.8 && slope < 1.2, "{slope}");
}

#[test]
fn invalid_designs_rejected() {
    assert!(simulate(&FactorDgp::stationary(20, 3, 1.0), 10, 1, seed(0, 0)).is_err());
    assert!(simulate(&FactorDgp::stationary(20, 10, -1.0), 10, 1, seed(0, 0)).is_err());
    let rho = FactorDgp {
        rho: 1.0,
        ..FactorDgp::stationary(20, 10, 1.0)
    };
    assert!(simulate(&rho, 10, 1, seed(0, 0)).is_err());
    assert!(simulate(&FactorDgp::stationary(20, 10, 1.0), 1, 1, seed(0, 0)).is_err());
}
