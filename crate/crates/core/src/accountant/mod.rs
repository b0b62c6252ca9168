//! Privacy accounting for the sampled Gaussian mechanism.
//!
//! A client that participates with probability `q` and perturbs a quantity of
//! L2 sensitivity `dl` with `N(0, sigma^2)` noise has per-round log-moment
//! bounded by `q * lambda * (lambda + 1) * dl^2 / (2 sigma^2)` (valid while the
//! regime ratio `lambda * dl^2 / (2 sigma^2)` is small). Moments compose
//! additively over rounds, so the whole ledger of a client is summarised by the
//! inverse-variance sum `sum_t 1 / sigma_t^2`, and a budget `(epsilon, delta)`
//! translates into a cap on that sum:
//!
//! ```text
//! sum_t 1/sigma_t^2  <=  epsilon^2 / (2 q dl^2 ln(1/delta))
//! ```
//!
//! [`calibrate_sigma`] spreads the cap evenly over `T` rounds and
//! [`recalibrate_sigma`] spreads whatever is left over the remaining rounds
//! after the round budget changed.
//!
//! The exact moments of both directions are available in
//! [`log_moment_numeric`] (closed binomial sum for the mixture-over-base
//! direction, adaptive quadrature for the reverse one) and are used to check
//! that the closed-form bound dominates them.

pub mod quadrature;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default validity cutoff for the regime ratio of the closed-form bound.
pub const REGIME_CUTOFF: f64 = 0.1;

/// Relative tolerance of the divergence quadrature.
pub const QUADRATURE_REL_TOL: f64 = 1e-10;

/// Fraction of the inverse-variance budget held back so that rounding in the
/// ledger sum can never push spending past the cap.
pub const LEDGER_GUARD: f64 = 4.0 * f64::EPSILON;

/// Half-width of the integration window, in noise standard deviations.
const WINDOW_SIGMAS: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismParams {
    q: f64,
    sigma: f64,
    sensitivity: f64,
    lambda: u32,
}

impl MechanismParams {
    /// `q = 0` is accepted as the degenerate no-participation limit.
    pub fn new(q: f64, sigma: f64, sensitivity: f64, lambda: u32) -> Result<Self> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::domain(format!("sampling ratio q = {q} outside [0, 1]")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::domain(format!("noise std sigma = {sigma} must be positive")));
        }
        if !(sensitivity >= 0.0 && sensitivity.is_finite()) {
            return Err(Error::domain(format!("sensitivity {sensitivity} must be >= 0")));
        }
        if lambda == 0 {
            return Err(Error::domain("moment order lambda must be >= 1"));
        }
        Ok(Self {
            q,
            sigma,
            sensitivity,
            lambda,
        })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn lambda(&self) -> u32 {
        self.lambda
    }

    /// `dl^2 / (2 sigma^2)`, the exponent scale shared by every moment formula.
    fn half_snr(&self) -> f64 {
        self.sensitivity * self.sensitivity / (2.0 * self.sigma * self.sigma)
    }

    /// `lambda * dl^2 / (2 sigma^2)`; the closed-form bound assumes this is small.
    pub fn regime_ratio(&self) -> f64 {
        self.lambda as f64 * self.half_snr()
    }

    pub fn in_regime(&self, cutoff: f64) -> bool {
        self.regime_ratio() < cutoff
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    epsilon: f64,
    delta: f64,
}

impl PrivacyBudget {
    /// `epsilon = +inf` is allowed and means "no privacy" (zero noise).
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::domain(format!("epsilon = {epsilon} must be > 0")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::domain(format!("delta = {delta} must lie in (0, 1)")));
        }
        Ok(Self { epsilon, delta })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn is_unbounded(&self) -> bool {
        self.epsilon.is_infinite()
    }

    pub fn ln_inv_delta(&self) -> f64 {
        -self.delta.ln()
    }
}

/// Noise standard deviations already used by one client, oldest first.
///
/// The inverse-variance sum is kept with Neumaier compensation so that long
/// histories of identical entries reproduce the calibrated budget to a few ulp.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SigmaHistory {
    values: Vec<f64>,
    inv_var: f64,
    compensation: f64,
}

impl SigmaHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut h = Self::new();
        for v in values {
            h.push(v)?;
        }
        Ok(h)
    }

    pub fn push(&mut self, sigma: f64) -> Result<()> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::domain(format!("history entries must be positive, got {sigma}")));
        }
        let x = 1.0 / (sigma * sigma);
        let s = self.inv_var + x;
        if self.inv_var.abs() >= x.abs() {
            self.compensation += (self.inv_var - s) + x;
        } else {
            self.compensation += (x - s) + self.inv_var;
        }
        self.inv_var = s;
        self.values.push(sigma);
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `sum_t 1 / sigma_t^2`.
    pub fn inverse_variance(&self) -> f64 {
        self.inv_var + self.compensation
    }

    /// Composed log-moment bound of order `lambda` over the whole history.
    pub fn composed_log_moment(&self, q: f64, sensitivity: f64, lambda: u32) -> f64 {
        let l = lambda as f64;
        q * l * (l + 1.0) * sensitivity * sensitivity * self.inverse_variance() / 2.0
    }

    /// Privacy loss spent so far at confidence `delta`, obtained by inverting
    /// the tail bound the same way [`calibrate_sigma`] does.
    pub fn epsilon_spent(&self, q: f64, sensitivity: f64, delta: f64) -> f64 {
        (2.0 * q * sensitivity * sensitivity * self.inverse_variance() * (-delta.ln())).sqrt()
    }
}

/// `2 eta C / n`: the L2 change of one full-batch clipped step when a single
/// sample of an `n`-sample shard is replaced.
pub fn sensitivity(eta: f64, clip: f64, n_samples: usize) -> Result<f64> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::domain(format!("learning rate {eta} must be > 0")));
    }
    if !(clip > 0.0 && clip.is_finite()) {
        return Err(Error::domain(format!("clipping threshold {clip} must be > 0")));
    }
    if n_samples == 0 {
        return Err(Error::domain("shard size must be >= 1"));
    }
    Ok(2.0 * eta * clip / n_samples as f64)
}

/// Log of the closed-form moment bound, `q lambda (lambda+1) dl^2 / (2 sigma^2)`.
pub fn log_moment_bound(m: &MechanismParams) -> f64 {
    let l = m.lambda as f64;
    m.q * l * (l + 1.0) * m.half_snr()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// `E_{z~nu1} (nu1/nu0)^lambda`, the mixture measured against the base Gaussian.
    MixtureOverBase,
    /// `E_{z~nu0} (nu0/nu1)^lambda`.
    BaseOverMixture,
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + (-(a - b).abs()).exp().ln_1p()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn ln_binomial(n: u32, k: u32) -> f64 {
    let k = k.min(n - k);
    (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
}

/// Exact `ln D` of the mixture-over-base direction via the binomial expansion
/// `sum_l C(lambda+1, l) (1-q)^(lambda+1-l) q^l exp(l (l-1) dl^2 / (2 sigma^2))`,
/// evaluated with log-sum-exp.
pub fn log_moment_binomial(m: &MechanismParams) -> f64 {
    if m.sensitivity == 0.0 || m.q == 0.0 {
        return 0.0;
    }
    let n = m.lambda + 1;
    let ln_q = m.q.ln();
    let ln_1mq = (-m.q).ln_1p();
    let a = m.half_snr();
    let terms: Vec<f64> = (0..=n)
        .map(|l| {
            let lf = l as f64;
            let mut t = ln_binomial(n, l) + lf * (lf - 1.0) * a;
            // 0 * ln(0) = 0 for the degenerate endpoints.
            if l > 0 {
                t += lf * ln_q;
            }
            if n - l > 0 {
                t += (n - l) as f64 * ln_1mq;
            }
            t
        })
        .collect();
    log_sum_exp(&terms)
}

/// `ln(1 - q + q exp(u))`, stable for all `q` in `[0, 1]`.
fn ln_mixture_ratio(q: f64, u: f64) -> f64 {
    if q >= 1.0 {
        u
    } else if q <= 0.0 {
        0.0
    } else {
        log_add_exp((-q).ln_1p(), q.ln() + u)
    }
}

/// `ln D` of either direction by adaptive quadrature over `z ~ nu0`.
///
/// The integrand is scaled by its maximum before integration so that moments
/// far beyond the `f64` range still come out as finite logs.
pub fn log_moment_quadrature(m: &MechanismParams, direction: Direction) -> Result<f64> {
    if m.sensitivity == 0.0 || m.q == 0.0 {
        return Ok(0.0);
    }
    let s = m.sigma;
    let dl = m.sensitivity;
    let lambda = m.lambda as f64;
    let power = match direction {
        Direction::MixtureOverBase => lambda + 1.0,
        Direction::BaseOverMixture => -lambda,
    };
    let ln_norm = -(s * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let log_integrand = |z: f64| {
        let u = (2.0 * z * dl - dl * dl) / (2.0 * s * s);
        ln_norm - z * z / (2.0 * s * s) + power * ln_mixture_ratio(m.q, u)
    };

    // The integrand peaks between -lambda*dl (reverse direction, q -> 1) and
    // (lambda+1)*dl (forward direction, q -> 1).
    let lo = -lambda * dl - WINDOW_SIGMAS * s;
    let hi = (lambda + 1.0) * dl + WINDOW_SIGMAS * s;
    let probes = 512;
    let peak = (0..=probes)
        .map(|i| log_integrand(lo + (hi - lo) * i as f64 / probes as f64))
        .fold(f64::NEG_INFINITY, f64::max);

    let initial = (((hi - lo) / s).ceil() as usize).clamp(16, 4096);
    let r = quadrature::integrate(
        |z| (log_integrand(z) - peak).exp(),
        lo,
        hi,
        QUADRATURE_REL_TOL,
        initial,
        200_000,
    )?;
    if !(r.value > 0.0) {
        return Err(Error::Quadrature {
            estimate: r.value,
            error: r.error,
            intervals: r.intervals,
        });
    }
    Ok(peak + r.value.ln())
}

/// Exact `ln D` for the requested direction: the binomial sum for
/// [`Direction::MixtureOverBase`], quadrature for [`Direction::BaseOverMixture`].
pub fn log_moment_numeric(m: &MechanismParams, direction: Direction) -> Result<f64> {
    match direction {
        Direction::MixtureOverBase => Ok(log_moment_binomial(m)),
        Direction::BaseOverMixture => log_moment_quadrature(m, direction),
    }
}

fn check_rate(q: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::domain(format!("sampling ratio q = {q} outside (0, 1]")));
    }
    Ok(())
}

/// `epsilon^2 / (2 q dl^2 ln(1/delta))`: the total inverse variance a client
/// may spend. Infinite for an unbounded budget or zero sensitivity.
pub fn inverse_variance_budget(budget: &PrivacyBudget, q: f64, sensitivity: f64) -> f64 {
    let e = budget.epsilon();
    e * e / (2.0 * q * sensitivity * sensitivity * budget.ln_inv_delta())
}

/// Per-round noise std for a fixed round budget:
/// `dl * sqrt(2 q T ln(1/delta)) / epsilon`.
pub fn calibrate_sigma(budget: &PrivacyBudget, q: f64, rounds: u32, sensitivity: f64) -> Result<f64> {
    check_rate(q)?;
    if rounds == 0 {
        return Err(Error::domain("round budget T must be >= 1"));
    }
    if !(sensitivity >= 0.0 && sensitivity.is_finite()) {
        return Err(Error::domain(format!("sensitivity {sensitivity} must be >= 0")));
    }
    Ok(sensitivity * (2.0 * q * rounds as f64 * budget.ln_inv_delta()).sqrt() / budget.epsilon())
}

/// Noise std after `t` completed rounds when the round budget is now `new_rounds`:
/// the inverse variance left over from `history` is spread evenly across the
/// `new_rounds - t` rounds still to run. Rounded up so the planned spend
/// stays [`LEDGER_GUARD`] below the cap.
pub fn recalibrate_sigma(
    budget: &PrivacyBudget,
    q: f64,
    new_rounds: u32,
    t: u32,
    history: &SigmaHistory,
    sensitivity: f64,
) -> Result<f64> {
    check_rate(q)?;
    if t >= new_rounds {
        return Err(Error::domain(format!(
            "completed rounds t = {t} must be below the round budget {new_rounds}"
        )));
    }
    if !(sensitivity >= 0.0 && sensitivity.is_finite()) {
        return Err(Error::domain(format!("sensitivity {sensitivity} must be >= 0")));
    }
    if budget.is_unbounded() || sensitivity == 0.0 {
        return Ok(0.0);
    }
    let cap = inverse_variance_budget(budget, q, sensitivity);
    let remaining = cap - history.inverse_variance();
    let usable = remaining - LEDGER_GUARD * cap;
    if !(usable > LEDGER_GUARD * cap) {
        return Err(Error::BudgetExhausted {
            client: None,
            remaining,
        });
    }
    let n = (new_rounds - t) as f64;
    let mut sigma = (n / usable).sqrt();
    while n / (sigma * sigma) > usable {
        sigma = sigma.next_up();
    }
    Ok(sigma)
}

/// Moment order at which the tail bound is tightest for a given calibration,
/// `epsilon sigma^2 / (T q dl^2) - 1/2`. Diagnostic only.
pub fn implied_optimal_lambda(budget: &PrivacyBudget, q: f64, rounds: u32, sigma: f64, sensitivity: f64) -> f64 {
    budget.epsilon() * sigma * sigma / (rounds as f64 * q * sensitivity * sensitivity) - 0.5
}

/// Inputs of the privacy-aware convergence upper bound.
#[derive(Debug, Clone)]
pub struct ConvergenceParams<'a> {
    pub rounds: u32,
    pub total_clients: usize,
    pub selected: usize,
    pub budgets: &'a [PrivacyBudget],
    /// Polyak–Lojasiewicz constant.
    pub mu: f64,
    /// Smoothness constant of the local losses.
    pub smoothness: f64,
    pub eta: f64,
    /// Expected local/global gradient divergence.
    pub divergence: f64,
    /// `F(w0) - F(w*)`.
    pub initial_gap: f64,
    pub sensitivity: f64,
}

/// Upper bound on `E F(w^T) - F(w*)` after `T` rounds:
///
/// ```text
/// A^T gap0 + (1 - A^T) (k0 T K / U^2 sum_i ln(1/delta_i)/eps_i^2 + k1 U (U-K) / (K (U-1)))
/// A = 1 - 2 mu eta + mu eta^2 L,  k0 = L^2 dl^2 / mu,  k1 = eta^2 L^2 div / (2 mu)
/// ```
pub fn convergence_bound(p: &ConvergenceParams<'_>) -> Result<f64> {
    if !(p.mu > 0.0 && p.smoothness > 0.0) {
        return Err(Error::domain("mu and L must be positive"));
    }
    if !(p.eta > 0.0) || p.eta > 1.0 / p.smoothness {
        return Err(Error::domain(format!(
            "learning rate {} violates eta <= 1/L = {}",
            p.eta,
            1.0 / p.smoothness
        )));
    }
    let (u, k) = (p.total_clients, p.selected);
    if k == 0 || k > u {
        return Err(Error::domain(format!("need 1 <= K <= U, got K = {k}, U = {u}")));
    }
    if p.budgets.len() != u {
        return Err(Error::ShapeMismatch {
            expected: u,
            got: p.budgets.len(),
        });
    }
    let (uf, kf) = (u as f64, k as f64);
    let l = p.smoothness;
    let a = 1.0 - 2.0 * p.mu * p.eta + p.mu * p.eta * p.eta * l;
    let k0 = l * l * p.sensitivity * p.sensitivity / p.mu;
    let k1 = p.eta * p.eta * l * l * p.divergence / (2.0 * p.mu);
    let privacy: f64 = p
        .budgets
        .iter()
        .map(|b| b.ln_inv_delta() / (b.epsilon() * b.epsilon()))
        .sum();
    let sampling = if k == u {
        0.0
    } else {
        uf * (uf - kf) / (kf * (uf - 1.0))
    };
    let at = a.powi(p.rounds as i32);
    let floor = k0 * p.rounds as f64 * kf / (uf * uf) * privacy + k1 * sampling;
    Ok(at * p.initial_gap + (1.0 - at) * floor)
}
