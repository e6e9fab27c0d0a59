//! Linear factor-model data generating processes.
//!
//! Controls are split into consecutive blocks: `K` stationary groups sharing
//! an AR(1) factor and, optionally, `R` groups sharing a random walk (or a
//! deterministic polynomial trend). The treated unit belongs to the first
//! group of each kind.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::Panel;

fn default_rho() -> f64 {
    0.5
}

fn one() -> f64 {
    1.0
}

/// Generative specification of a grouped linear factor model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorDgp {
    /// Number of control units.
    #[serde(alias = "J")]
    pub j: usize,
    /// Number of stationary groups.
    #[serde(alias = "K")]
    pub k: usize,
    /// Number of non-stationary groups (0 for a stationary model).
    #[serde(alias = "R", default)]
    pub r: usize,
    pub sigma2: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "one")]
    pub delta_variance: f64,
    /// Added to the first stationary factor in post-treatment periods.
    #[serde(default = "one")]
    pub post_shift: f64,
    /// Unit fixed effects, treated first (length J+1). Zero when absent.
    #[serde(default)]
    pub fixed_effects: Option<Vec<f64>>,
    /// Replace the random walks by deterministic trends `r * t^p`.
    #[serde(default)]
    pub trend: Option<u32>,
    /// Per-unit idiosyncratic variances, treated first (length J+1).
    #[serde(default)]
    pub hetero: Option<Vec<f64>>,
    #[serde(default)]
    pub treatment_effect: f64,
}

/// Fixed-effect layouts used in the alternative-DGP experiments. The treated
/// unit always has a unit fixed effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FixedEffectPattern {
    /// Odd-numbered controls share the treated unit's fixed effect.
    OddControls,
    /// The first half of the controls share it.
    FirstHalf,
    /// The second half of the controls share it.
    SecondHalf,
}

impl FixedEffectPattern {
    /// Fixed-effect vector of length J+1.
    pub fn vector(self, j: usize) -> Vec<f64> {
        let mut fe = vec![0.0; j + 1];
        fe[0] = 1.0;
        for (unit, v) in fe.iter_mut().enumerate().skip(1) {
            let on = match self {
                FixedEffectPattern::OddControls => unit % 2 == 1,
                FixedEffectPattern::FirstHalf => unit <= j / 2,
                FixedEffectPattern::SecondHalf => unit > j / 2,
            };
            if on {
                *v = 1.0;
            }
        }
        fe
    }
}

impl FactorDgp {
    /// Stationary model with the default AR(1), shock and shift settings.
    pub fn stationary(j: usize, k: usize, sigma2: f64) -> Self {
        FactorDgp {
            j,
            k,
            r: 0,
            sigma2,
            rho: default_rho(),
            delta_variance: 1.0,
            post_shift: 1.0,
            fixed_effects: None,
            trend: None,
            hetero: None,
            treatment_effect: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.j == 0 || self.k == 0 || self.j % self.k != 0 {
            return bad(format!("J = {} must be a positive multiple of K = {}", self.j, self.k));
        }
        if self.r > 0 && self.j % self.r != 0 {
            return bad(format!("J = {} must be a multiple of R = {}", self.j, self.r));
        }
        if self.trend.is_some() && self.r == 0 {
            return bad("a polynomial trend needs R > 0".into());
        }
        if !(self.sigma2 >= 0.0) || !(self.delta_variance >= 0.0) {
            return bad("variances must be non-negative".into());
        }
        if !(self.rho.abs() < 1.0) {
            return bad(format!("|rho| must be below 1, got {}", self.rho));
        }
        for (name, v) in [("fixed_effects", &self.fixed_effects), ("hetero", &self.hetero)] {
            if let Some(v) = v {
                if v.len() != self.j + 1 {
                    return Err(Error::Dimension {
                        what: if name == "hetero" { "hetero variances" } else { "fixed effects" },
                        expected: self.j + 1,
                        got: v.len(),
                    });
                }
            }
        }
        if let Some(h) = &self.hetero {
            if h.iter().any(|v| !(*v >= 0.0)) {
                return bad("hetero variances must be non-negative".into());
            }
        }
        if !self.post_shift.is_finite() || !self.treatment_effect.is_finite() {
            return bad("post_shift and treatment_effect must be finite".into());
        }
        Ok(())
    }

    /// Stationary group (0-based) of unit `unit` (0 is treated).
    pub fn stationary_group(&self, unit: usize) -> usize {
        if unit == 0 {
            0
        } else {
            (unit - 1) / (self.j / self.k)
        }
    }

    /// Non-stationary group of `unit`, if the model has any.
    pub fn trend_group(&self, unit: usize) -> Option<usize> {
        match self.r {
            0 => None,
            _ if unit == 0 => Some(0),
            r => Some((unit - 1) / (self.j / r)),
        }
    }

    pub fn unit_variance(&self, unit: usize) -> f64 {
        self.hetero.as_ref().map_or(self.sigma2, |h| h[unit])
    }

    pub fn fixed_effect(&self, unit: usize) -> f64 {
        self.fixed_effects.as_ref().map_or(0.0, |f| f[unit])
    }

    fn has_fixed_effects(&self) -> bool {
        self.fixed_effects
            .as_ref()
            .is_some_and(|f| f.iter().any(|&v| v != 0.0))
    }
}

/// Seed of one simulated panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SimSeed {
    pub base: u64,
    pub stream: u64,
}

/// Random objects of the DGP, each drawn from its own generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandomObject {
    Delta,
    Stationary(usize),
    Trend(usize),
    Shock(usize),
}

impl RandomObject {
    fn id(self) -> u64 {
        match self {
            RandomObject::Delta => 0,
            RandomObject::Stationary(k) => (1 << 32) | k as u64,
            RandomObject::Trend(r) => (2 << 32) | r as u64,
            RandomObject::Shock(j) => (3 << 32) | j as u64,
        }
    }
}

/// Independent generator for one random object of one replication.
pub fn object_rng(seed: SimSeed, object: RandomObject) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.base.to_le_bytes());
    key[8..16].copy_from_slice(&seed.stream.to_le_bytes());
    key[16..24].copy_from_slice(&object.id().to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// The raw draws behind one simulated panel, before the post-period shift.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDraws {
    pub delta: Vec<f64>,
    /// K x T stationary factors.
    pub lambda: DMatrix<f64>,
    /// R x T non-stationary factors.
    pub gamma: DMatrix<f64>,
    /// (J+1) x T idiosyncratic shocks.
    pub eps: DMatrix<f64>,
    pub t0: usize,
}

/// Draw every random object for periods `1..=t0+t1`.
pub fn simulate_parts(dgp: &FactorDgp, t0: usize, t1: usize, seed: SimSeed) -> Result<SimDraws> {
    dgp.validate()?;
    if t0 < 2 || t1 < 1 {
        return Err(Error::InvalidArgument(format!(
            "simulation needs t0 >= 2 and t1 >= 1, got {t0} and {t1}"
        )));
    }
    let t = t0 + t1;
    let sd_delta = dgp.delta_variance.sqrt();
    let mut rng = object_rng(seed, RandomObject::Delta);
    let delta = normals(&mut rng, t).into_iter().map(|z| sd_delta * z).collect();

    let innov = (1.0 - dgp.rho * dgp.rho).sqrt();
    let mut lambda = DMatrix::zeros(dgp.k, t);
    for k in 0..dgp.k {
        let mut rng = object_rng(seed, RandomObject::Stationary(k));
        let z = normals(&mut rng, t);
        lambda[(k, 0)] = z[0];
        for s in 1..t {
            lambda[(k, s)] = dgp.rho * lambda[(k, s - 1)] + innov * z[s];
        }
    }

    let mut gamma = DMatrix::zeros(dgp.r, t);
    for r in 0..dgp.r {
        match dgp.trend {
            Some(p) => {
                for s in 0..t {
                    gamma[(r, s)] = (r + 1) as f64 * ((s + 1) as f64).powi(p as i32);
                }
            }
            None => {
                let mut rng = object_rng(seed, RandomObject::Trend(r));
                let mut level = 0.0;
                for (s, z) in normals(&mut rng, t).into_iter().enumerate() {
                    level += z;
                    gamma[(r, s)] = level;
                }
            }
        }
    }

    let mut eps = DMatrix::zeros(dgp.j + 1, t);
    for unit in 0..=dgp.j {
        let sd = dgp.unit_variance(unit).sqrt();
        let mut rng = object_rng(seed, RandomObject::Shock(unit));
        for (s, z) in normals(&mut rng, t).into_iter().enumerate() {
            eps[(unit, s)] = sd * z;
        }
    }
    Ok(SimDraws {
        delta,
        lambda,
        gamma,
        eps,
        t0,
    })
}

impl SimDraws {
    /// Combine the draws into outcomes, applying the post-period factor shift
    /// and treatment effect.
    pub fn assemble(&self, dgp: &FactorDgp) -> Result<Panel> {
        let t = self.delta.len();
        let mut y = DMatrix::zeros(dgp.j + 1, t);
        for unit in 0..=dgp.j {
            let k = dgp.stationary_group(unit);
            let r = dgp.trend_group(unit);
            let fe = dgp.fixed_effect(unit);
            for s in 0..t {
                let post = s >= self.t0;
                let mut lam = self.lambda[(k, s)];
                if post && k == 0 {
                    lam += dgp.post_shift;
                }
                let mut v = self.delta[s] + fe + lam + self.eps[(unit, s)];
                if let Some(r) = r {
                    v += self.gamma[(r, s)];
                }
                if post && unit == 0 {
                    v += dgp.treatment_effect;
                }
                y[(unit, s)] = v;
            }
        }
        Panel::from_matrix(y, self.t0)
    }
}

/// Simulate a panel with `t0` pre-periods and `t1` post-periods.
pub fn simulate(dgp: &FactorDgp, t0: usize, t1: usize, seed: SimSeed) -> Result<Panel> {
    simulate_parts(dgp, t0, t1, seed)?.assemble(dgp)
}

/// Exact loadings of the grouped model.
#[derive(Debug, Clone, PartialEq)]
pub struct Loadings {
    /// Treated loadings on the K stationary factors.
    pub mu0: DVector<f64>,
    /// J x K control loadings on the stationary factors.
    pub mu: DMatrix<f64>,
    /// Treated loadings on the R non-stationary factors.
    pub theta0: DVector<f64>,
    /// J x R control loadings on the non-stationary factors.
    pub theta: DMatrix<f64>,
    /// Fixed effects, read as loadings on a constant factor.
    pub fe0: f64,
    pub fe: DVector<f64>,
}

/// Loadings consistent with [`simulate`].
pub fn loading_matrix(dgp: &FactorDgp) -> Result<Loadings> {
    dgp.validate()?;
    let j = dgp.j;
    let mut mu0 = DVector::zeros(dgp.k);
    mu0[0] = 1.0;
    let mu = DMatrix::from_fn(j, dgp.k, |c, k| f64::from(dgp.stationary_group(c + 1) == k));
    let mut theta0 = DVector::zeros(dgp.r);
    if dgp.r > 0 {
        theta0[0] = 1.0;
    }
    let theta = DMatrix::from_fn(j, dgp.r, |c, r| f64::from(dgp.trend_group(c + 1) == Some(r)));
    Ok(Loadings {
        mu0,
        mu,
        theta0,
        theta,
        fe0: dgp.fixed_effect(0),
        fe: DVector::from_fn(j, |c, _| dgp.fixed_effect(c + 1)),
    })
}

impl Loadings {
    /// Every loading stacked as columns: stationary, non-stationary, then the
    /// constant factor when any fixed effect is non-zero. Returns the treated
    /// row and the J x F control block.
    pub fn stacked(&self, with_constant: bool) -> (DVector<f64>, DMatrix<f64>) {
        let j = self.mu.nrows();
        let (k, r) = (self.mu.ncols(), self.theta.ncols());
        let f = k + r + usize::from(with_constant);
        let mut all = DMatrix::zeros(j, f);
        all.view_mut((0, 0), (j, k)).copy_from(&self.mu);
        all.view_mut((0, k), (j, r)).copy_from(&self.theta);
        let mut treated = DVector::zeros(f);
        treated.rows_mut(0, k).copy_from(&self.mu0);
        treated.rows_mut(k, r).copy_from(&self.theta0);
        if with_constant {
            all.set_column(k + r, &self.fe);
            treated[k + r] = self.fe0;
        }
        (treated, all)
    }
}

pub(crate) fn uses_constant_factor(dgp: &FactorDgp) -> bool {
    dgp.has_fixed_effects()
}
