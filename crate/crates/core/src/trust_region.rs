//! Teacher-anchored KL trust region: maximize `E_q[r]` subject to
//! `KL(q || pi) <= delta`, solved by exponential tilting of `pi`.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

use crate::dist::{self, Categorical, DistError};
use crate::rng;

/// Tolerance on `|KL - delta|` at the solution.
pub const KL_TOLERANCE: f64 = 1e-9;
/// Largest tilt tried before the constraint is declared inactive.
pub const ETA_CAP: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrustRegionError {
    #[error("pi must be strictly positive, entry {index} is {value}")]
    NonPositivePi { index: usize, value: f64 },
    #[error("reward entry {index} is {value}, expected a finite value in [0, 1]")]
    InvalidReward { index: usize, value: f64 },
    #[error("trust-region radius must be > 0, got {0}")]
    InvalidDelta(f64),
    #[error("tilt strength must be finite and >= 0, got {0}")]
    InvalidEta(f64),
    #[error(transparent)]
    Dist(#[from] DistError),
}

pub type Result<T> = std::result::Result<T, TrustRegionError>;

#[derive(Debug, Clone, PartialEq)]
pub struct RewardVector(Vec<f64>);

impl RewardVector {
    pub fn new(r: Vec<f64>) -> Result<Self> {
        for (index, &value) in r.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(TrustRegionError::InvalidReward { index, value });
            }
        }
        Ok(Self(r))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn is_constant(&self) -> bool {
        self.0.iter().all(|&x| x == self.0[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiltSolution {
    pub eta: f64,
    pub tilted: Categorical,
    pub achieved_kl: f64,
    pub expected_reward: f64,
    /// Whether the KL constraint binds.
    pub active: bool,
}

fn check_inputs(pi: &Categorical, r: &RewardVector) -> Result<()> {
    if pi.len() != r.len() {
        return Err(DistError::DimensionMismatch {
            left: pi.len(),
            right: r.len(),
        }
        .into());
    }
    for (index, &value) in pi.probs().iter().enumerate() {
        if value <= 0.0 {
            return Err(TrustRegionError::NonPositivePi { index, value });
        }
    }
    Ok(())
}

pub fn expected_reward(pi: &Categorical, r: &RewardVector) -> Result<f64> {
    if pi.len() != r.len() {
        return Err(DistError::DimensionMismatch {
            left: pi.len(),
            right: r.len(),
        }
        .into());
    }
    Ok(pi.probs().iter().zip(r.values()).map(|(p, x)| p * x).sum())
}

/// `ln pi(a) + eta r(a)` and its log-sum-exp.
fn tilt_logits(pi: &Categorical, r: &RewardVector, eta: f64) -> (Vec<f64>, f64) {
    let z: Vec<f64> = pi
        .probs()
        .iter()
        .zip(r.values())
        .map(|(p, x)| p.ln() + eta * x)
        .collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    (z, lse)
}

/// `pi(a) exp(eta r(a)) / Z`.
pub fn exp_tilt(pi: &Categorical, r: &RewardVector, eta: f64) -> Result<Categorical> {
    check_inputs(pi, r)?;
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(TrustRegionError::InvalidEta(eta));
    }
    if eta == 0.0 {
        return Ok(pi.clone());
    }
    Ok(Categorical::from_logits(&tilt_logits(pi, r, eta).0)?)
}

/// `KL(tilt || pi) = eta E_tilt[r] - ln Z`, evaluated in log space.
fn tilt_kl(pi: &Categorical, r: &RewardVector, eta: f64) -> (Categorical, f64) {
    let (z, lse) = tilt_logits(pi, r, eta);
    let tilted = Categorical::from_logits(&z).expect("finite logits");
    let log_z = lse - pi.probs().iter().sum::<f64>().ln();
    let mean_r: f64 = tilted
        .probs()
        .iter()
        .zip(r.values())
        .map(|(q, x)| q * x)
        .sum();
    let kl = (eta * mean_r - log_z).max(0.0);
    (tilted, kl)
}

fn solution(pi: &Categorical, r: &RewardVector, eta: f64, active: bool) -> TiltSolution {
    let (tilted, achieved_kl) = if eta == 0.0 {
        (pi.clone(), 0.0)
    } else {
        tilt_kl(pi, r, eta)
    };
    let expected_reward = tilted
        .probs()
        .iter()
        .zip(r.values())
        .map(|(q, x)| q * x)
        .sum();
    TiltSolution {
        eta,
        tilted,
        achieved_kl,
        expected_reward,
        active,
    }
}

/// Finds the tilt whose KL from `pi` equals `delta` within `tol`.
///
/// Doubles `eta` from 1 until the KL exceeds `delta`, then bisects. A constant
/// reward, or a budget that even `eta = ETA_CAP` does not exhaust, yields an
/// inactive-constraint solution.
pub fn solve_trust_region(
    pi: &Categorical,
    r: &RewardVector,
    delta: f64,
    tol: f64,
) -> Result<TiltSolution> {
    check_inputs(pi, r)?;
    if !(delta.is_finite() && delta > 0.0) {
        return Err(TrustRegionError::InvalidDelta(delta));
    }
    if r.is_constant() {
        return Ok(solution(pi, r, 0.0, false));
    }
    let kl = |eta: f64| tilt_kl(pi, r, eta).1;

    let mut hi = 1.0;
    while kl(hi) < delta {
        if hi >= ETA_CAP {
            return Ok(solution(pi, r, ETA_CAP, false));
        }
        hi = (hi * 2.0).min(ETA_CAP);
    }
    let mut lo = 0.0;
    let mut eta = hi;
    for _ in 0..200 {
        eta = 0.5 * (lo + hi);
        let k = kl(eta);
        if (k - delta).abs() <= tol {
            break;
        }
        if k < delta {
            lo = eta;
        } else {
            hi = eta;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Ok(solution(pi, r, eta, true))
}

/// `max_a |log tilt(a) - log pi(a) - eta (r(a) - E_pi r)|`.
///
/// The log-ratio is `eta r(a) - ln Z`, so the residual is the same for every
/// `a`; `ln Z` is computed with `ln_1p`/`exp_m1` to keep the O(eta^2) remainder
/// above rounding noise.
pub fn first_order_residual(pi: &Categorical, r: &RewardVector, eta: f64) -> Result<f64> {
    check_inputs(pi, r)?;
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(TrustRegionError::InvalidEta(eta));
    }
    let total: f64 = pi.probs().iter().sum();
    let shifted: f64 = pi
        .probs()
        .iter()
        .zip(r.values())
        .map(|(p, x)| p / total * (eta * x).exp_m1())
        .sum();
    let log_z = shifted.ln_1p();
    let mean_r = expected_reward(pi, r)? / total;
    Ok(r.values()
        .iter()
        .map(|&x| ((eta * x - log_z) - eta * (x - mean_r)).abs())
        .fold(0.0, f64::max))
}

/// Spread of `log tilt(a) - log pi(a) - eta r(a)` over the support.
pub fn stationarity_spread(pi: &Categorical, r: &RewardVector, sol: &TiltSolution) -> f64 {
    let vals: Vec<f64> = sol
        .tilted
        .probs()
        .iter()
        .zip(pi.probs())
        .zip(r.values())
        .filter(|((q, _), _)| **q >= f64::MIN_POSITIVE)
        .map(|((q, p), x)| q.ln() - p.ln() - sol.eta * x)
        .collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    if vals.is_empty() {
        0.0
    } else {
        max - min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalityReport {
    /// `achieved_kl <= delta + KL_TOLERANCE`.
    pub feasible: bool,
    pub accepted_samples: usize,
    pub proposed_samples: usize,
    pub best_sampled_reward: f64,
    /// Best sampled reward minus the solution's; `<= margin` to pass.
    pub max_excess: f64,
    /// No feasible tilt on a grid around `eta` beats the solution.
    pub tilt_family_ok: bool,
    pub stationarity_spread: f64,
    pub passed: bool,
}

/// Options for [`verify_optimality`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub samples: usize,
    pub margin: f64,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            samples: 10_000,
            margin: 1e-6,
            seed: 0,
        }
    }
}

/// Point at fraction `t` along the ray from `pi` through `sigma`.
fn on_ray(pi: &[f64], sigma: &[f64], t: f64) -> Vec<f64> {
    pi.iter().zip(sigma).map(|(p, s)| p + t * (s - p)).collect()
}

/// Pushes a feasible `sigma` outward along its ray from `pi` to the KL
/// boundary or the simplex edge, whichever comes first.
fn extend_to_boundary(pi: &[f64], sigma: &[f64], delta: f64) -> Vec<f64> {
    let t_edge = pi
        .iter()
        .zip(sigma)
        .filter(|(p, s)| s < p)
        .map(|(p, s)| p / (p - s))
        .fold(f64::INFINITY, f64::min);
    let t_max = if t_edge.is_finite() { t_edge } else { 1e6 };
    let kl_at = |t: f64| {
        let q: Vec<f64> = on_ray(pi, sigma, t)
            .into_iter()
            .map(|x| x.max(0.0))
            .collect();
        kl_slices(&q, pi)
    };
    if kl_at(t_max) <= delta {
        return on_ray(pi, sigma, t_max)
            .into_iter()
            .map(|x| x.max(0.0))
            .collect();
    }
    let (mut lo, mut hi) = (1.0, t_max);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if kl_at(mid) <= delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    on_ray(pi, sigma, lo)
        .into_iter()
        .map(|x| x.max(0.0))
        .collect()
}

fn kl_slices(q: &[f64], pi: &[f64]) -> f64 {
    q.iter()
        .zip(pi)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a.ln() - b.ln()))
        .sum::<f64>()
        .max(0.0)
}

/// Brute-force check that no sampled distribution inside the trust region
/// earns more expected reward than `sol`.
///
/// Candidates come from a Dirichlet proposal centred on `pi` whose
/// concentration adapts to keep roughly a third of proposals feasible. Each
/// accepted candidate is also pushed along its ray from `pi` to the
/// boundary, where any better competitor would have to live.
pub fn verify_optimality(
    pi: &Categorical,
    r: &RewardVector,
    delta: f64,
    sol: &TiltSolution,
    opts: VerifyOptions,
) -> Result<OptimalityReport> {
    check_inputs(pi, r)?;
    if !(delta.is_finite() && delta > 0.0) {
        return Err(TrustRegionError::InvalidDelta(delta));
    }
    let p = pi.probs();
    let rv = r.values();
    let reward = |q: &[f64]| q.iter().zip(rv).map(|(a, b)| a * b).sum::<f64>();
    let achieved = dist::kl(&sol.tilted, pi)?;
    let feasible = achieved <= delta + KL_TOLERANCE;

    let mut rng = rng::stream(opts.seed, &[rng::domain::ANALYSIS]);
    let v = p.len() as f64;
    let mut concentration = ((v - 1.0) / (2.0 * delta)).max(1.0);
    let mut accepted = 0usize;
    let mut proposed = 0usize;
    let mut window_accepted = 0usize;
    let mut best = f64::NEG_INFINITY;
    while accepted < opts.samples && proposed < 200 * opts.samples.max(1) {
        proposed += 1;
        let draws: Vec<f64> = p
            .iter()
            .map(|&pa| {
                Gamma::new(concentration * pa, 1.0)
                    .map(|g| g.sample(&mut rng))
                    .unwrap_or(0.0)
            })
            .collect();
        let s: f64 = draws.iter().sum();
        // an all-zero draw (tiny shapes underflow) counts as a rejection
        let sigma: Vec<f64> = draws.iter().map(|x| x / s).collect();
        if s > 0.0 && kl_slices(&sigma, p) <= delta {
            accepted += 1;
            window_accepted += 1;
            best = best.max(reward(&sigma));
            best = best.max(reward(&extend_to_boundary(p, &sigma, delta)));
        }
        if proposed.is_multiple_of(100) {
            // keep acceptance in a useful band, and vary the scale
            let rate = window_accepted as f64 / 100.0;
            if rate < 0.2 {
                concentration *= 1.5;
            } else if rate > 0.5 {
                concentration /= 1.5;
            }
            concentration *= rng.random_range(0.9..1.1);
            window_accepted = 0;
        }
    }
    let max_excess = best - sol.expected_reward;

    let mut tilt_family_ok = true;
    if sol.eta > 0.0 {
        for i in 0..=20 {
            let eta = sol.eta * (0.5 + 0.05 * i as f64);
            let (q, k) = tilt_kl(pi, r, eta);
            if k <= delta && reward(q.probs()) > sol.expected_reward + opts.margin {
                tilt_family_ok = false;
            }
        }
    }
    let spread = stationarity_spread(pi, r, sol);
    Ok(OptimalityReport {
        feasible,
        accepted_samples: accepted,
        proposed_samples: proposed,
        best_sampled_reward: best,
        max_excess,
        tilt_family_ok,
        stationarity_spread: spread,
        passed: feasible && max_excess <= opts.margin && tilt_family_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cat(p: &[f64]) -> Categorical {
        Categorical::new(p.to_vec()).unwrap()
    }

    fn rv(r: &[f64]) -> RewardVector {
        RewardVector::new(r.to_vec()).unwrap()
    }

    #[test]
    fn tilt_examples() {
        let pi = cat(&[0.5, 0.3, 0.2]);
        assert_eq!(exp_tilt(&pi, &rv(&[0.0, 1.0, 0.0]), 0.0).unwrap(), pi);
        let flat = exp_tilt(&pi, &rv(&[0.4; 3]), 3.0).unwrap();
        for (a, b) in flat.probs().iter().zip(pi.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
        let t = exp_tilt(&pi, &rv(&[0.0, 1.0, 0.0]), 1.0).unwrap();
        // Z = 0.5 + 0.3 e + 0.2
        let z = 0.7 + 0.3 * std::f64::consts::E;
        let expected = [0.5 / z, 0.3 * std::f64::consts::E / z, 0.2 / z];
        for (a, b) in t.probs().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((t.prob(0) - 0.3300).abs() < 1e-4);
        assert!((t.prob(1) - 0.5381).abs() < 1e-4);
        assert!((t.prob(2) - 0.1320).abs() < 1e-4);
    }

    #[test]
    fn input_validation() {
        let pi = cat(&[1.0, 0.0]);
        assert!(matches!(
            exp_tilt(&pi, &rv(&[0.0, 1.0]), 1.0),
            Err(TrustRegionError::NonPositivePi { index: 1, .. })
        ));
        assert!(RewardVector::new(vec![0.5, 1.5]).is_err());
        let pi = cat(&[0.5, 0.5]);
        assert!(matches!(
            solve_trust_region(&pi, &rv(&[0.0, 1.0]), 0.0, KL_TOLERANCE),
            Err(TrustRegionError::InvalidDelta(_))
        ));
        assert!(exp_tilt(&pi, &rv(&[0.0, 1.0]), -1.0).is_err());
    }

    #[test]
    fn expected_reward_examples() {
        let r = rv(&[0.0, 1.0, 0.0]);
        assert_eq!(expected_reward(&cat(&[0.0, 1.0, 0.0]), &r).unwrap(), 1.0);
        assert!(
            (expected_reward(&Categorical::uniform(3).unwrap(), &r).unwrap() - 1.0 / 3.0).abs()
                < 1e-15
        );
        assert!((expected_reward(&cat(&[0.5, 0.3, 0.2]), &r).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn reference_instance_matches_grid() {
        // Grid oracle: scanning eta in steps of 1e-4 for the first point whose
        // KL reaches 0.05 gives eta in (0.6477, 0.6478]. The small-delta
        // approximation sqrt(2 delta / Var) ~= 0.69 is only a rough guide.
        let pi = cat(&[0.5, 0.3, 0.2]);
        let r = rv(&[0.0, 1.0, 0.0]);
        let sol = solve_trust_region(&pi, &r, 0.05, KL_TOLERANCE).unwrap();
        assert!(sol.active);
        assert!((sol.achieved_kl - 0.05).abs() <= KL_TOLERANCE);
        assert!(sol.eta > 0.6477 && sol.eta <= 0.6478, "{}", sol.eta);
        assert!((dist::kl(&sol.tilted, &pi).unwrap() - sol.achieved_kl).abs() < 1e-9);
        let report = verify_optimality(&pi, &r, 0.05, &sol, VerifyOptions::default()).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.stationarity_spread < 1e-9);
    }

    #[test]
    fn perturbed_solutions_fail() {
        let pi = cat(&[0.5, 0.3, 0.2]);
        let r = rv(&[0.0, 1.0, 0.0]);
        let sol = solve_trust_region(&pi, &r, 0.05, KL_TOLERANCE).unwrap();
        let opts = VerifyOptions {
            samples: 2000,
            ..VerifyOptions::default()
        };
        let pushed = solution(&pi, &r, sol.eta * 1.1, true);
        let report = verify_optimality(&pi, &r, 0.05, &pushed, opts).unwrap();
        assert!(!report.feasible);
        assert!(!report.passed);
        let untilted = solution(&pi, &r, 0.0, true);
        let report = verify_optimality(&pi, &r, 0.05, &untilted, opts).unwrap();
        assert!(report.max_excess > 0.0);
        assert!(!report.passed);
    }

    #[test]
    fn constant_reward_is_inactive() {
        let pi = cat(&[0.5, 0.3, 0.2]);
        let sol = solve_trust_region(&pi, &rv(&[0.5; 3]), 0.3, KL_TOLERANCE).unwrap();
        assert_eq!(sol.eta, 0.0);
        assert!(!sol.active);
        assert_eq!(sol.tilted, pi);
        assert!((sol.expected_reward - 0.5).abs() < 1e-15);
    }

    #[test]
    fn saturated_budget_is_inactive() {
        // sup KL = -ln 0.3 ~= 1.204 < 2
        let pi = cat(&[0.5, 0.3, 0.2]);
        let sol = solve_trust_region(&pi, &rv(&[0.0, 1.0, 0.0]), 2.0, KL_TOLERANCE).unwrap();
        assert!(!sol.active);
        assert!(sol.achieved_kl < 2.0);
        assert!(sol.tilted.prob(1) > 1.0 - 1e-9);
    }

    #[test]
    fn residual_examples() {
        let pi = cat(&[0.5, 0.3, 0.2]);
        let r = rv(&[0.0, 1.0, 0.0]);
        assert_eq!(first_order_residual(&pi, &r, 0.0).unwrap(), 0.0);
        assert!(first_order_residual(&pi, &rv(&[0.7; 3]), 0.3).unwrap() < 1e-15);
        for eta in [1e-2, 5e-3, 2.5e-3] {
            let ratio = first_order_residual(&pi, &r, eta).unwrap()
                / first_order_residual(&pi, &r, eta / 2.0).unwrap();
            assert!((ratio - 4.0).abs() < 0.3, "{ratio}");
        }
    }

    fn arb_instance() -> impl Strategy<Value = (Categorical, RewardVector)> {
        (2usize..9).prop_flat_map(|v| {
            (
                proptest::collection::vec(0.01f64..1.0, v),
                proptest::collection::vec(0.0f64..=1.0, v),
            )
                .prop_map(|(w, r)| {
                    let s: f64 = w.iter().sum();
                    (
                        Categorical::new(w.iter().map(|x| x / s).collect()).unwrap(),
                        RewardVector::new(r).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn kl_and_reward_increase_with_eta((pi, r) in arb_instance()) {
            prop_assume!(!r.is_constant());
            let mut last_kl = -1.0;
            let mut last_reward = -1.0;
            for i in 0..40 {
                let eta = 0.25 * i as f64;
                let (q, k) = tilt_kl(&pi, &r, eta);
                let er = expected_reward(&q, &r).unwrap();
                if i > 0 {
                    prop_assert!(k > last_kl || (k - last_kl).abs() < 1e-15 && k > 0.0);
                }
                prop_assert!(er >= last_reward - 1e-12);
                last_kl = k;
                last_reward = er;
            }
        }

        #[test]
        fn solutions_are_stationary((pi, r) in arb_instance(), frac in 0.05f64..0.9) {
            prop_assume!(!r.is_constant());
            let rmax = r.values().iter().copied().fold(0.0, f64::max);
            let top: f64 = pi.probs().iter().zip(r.values()).filter(|(_, x)| **x == rmax).map(|(p, _)| p).sum();
            let delta = frac * -top.ln();
            prop_assume!(delta > 1e-6);
            let sol = solve_trust_region(&pi, &r, delta, KL_TOLERANCE).unwrap();
            prop_assert!(sol.active);
            prop_assert!((sol.achieved_kl - delta).abs() <= KL_TOLERANCE);
            prop_assert!(stationarity_spread(&pi, &r, &sol) < 1e-9);
        }
    }
}
