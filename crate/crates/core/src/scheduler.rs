//! Round-budget policies.
//!
//! * `Fixed`: run exactly `T_init` rounds with constant calibrated noise.
//! * `Crd`: after every round compare the test loss with the previous one;
//!   when it improved by less than `zeta`, shrink the remaining budget to
//!   `floor(beta (T - t)) + t`. Noise is recalibrated from the spent ledger.
//! * `Decay`: noise falls linearly from the `T_init` calibration until the
//!   next round would overspend the budget.
//!
//! Throughout, `t` is the number of completed rounds.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::federation::{self, ClientState, FederationConfig, NoisePolicy, RoundRecord, ServerState};
use crate::models::{self, ModelParams};
use crate::par::{self, Execution};
use crate::{Error, Result};

pub const DEFAULT_BETA: f64 = 0.9;
pub const DEFAULT_ZETA: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrdConfig {
    pub beta: f64,
    pub zeta: f64,
    pub t_init: u32,
}

impl CrdConfig {
    pub fn new(beta: f64, zeta: f64, t_init: u32) -> Result<Self> {
        let cfg = Self { beta, zeta, t_init };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::domain(format!("beta = {} must lie in (0, 1)", self.beta)));
        }
        if !(self.zeta > 0.0) {
            return Err(Error::domain(format!("zeta = {} must be > 0", self.zeta)));
        }
        if self.t_init == 0 {
            return Err(Error::domain("T_init must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerDecision {
    pub new_t: u32,
    pub triggered: bool,
    /// `V_prev - V_curr`.
    pub improvement: f64,
}

/// One discounting decision after `t` completed rounds of a budget of `budget`.
pub fn crd_step(v_prev: f64, v_curr: f64, t: u32, budget: u32, cfg: &CrdConfig) -> SchedulerDecision {
    let improvement = v_prev - v_curr;
    // A NaN improvement counts as stalled.
    let stalled = !(improvement >= cfg.zeta);
    if !stalled || t >= budget {
        return SchedulerDecision {
            new_t: budget,
            triggered: false,
            improvement,
        };
    }
    let left = (cfg.beta * (budget - t) as f64).floor() as u32;
    SchedulerDecision {
        new_t: t + left,
        triggered: true,
        improvement,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Scheduler {
    Fixed,
    Crd {
        beta: f64,
        zeta: f64,
    },
    /// `rate = None` means `1 / T_init`.
    Decay {
        rate: Option<f64>,
    },
}

impl Scheduler {
    pub fn name(&self) -> &'static str {
        match self {
            Scheduler::Fixed => "fixed",
            Scheduler::Crd { .. } => "crd",
            Scheduler::Decay { .. } => "decay",
        }
    }
}

/// Everything needed to train one seed.
#[derive(Debug, Clone)]
pub struct TrainingSetup {
    pub clients: Vec<ClientState>,
    pub test: Dataset,
    pub federation: FederationConfig,
    pub init: ModelParams,
}

#[derive(Debug, Clone)]
pub struct RunTrace {
    pub records: Vec<RoundRecord>,
    pub final_params: ModelParams,
    pub initial_test_loss: f64,
    /// Round budget after the last round.
    pub final_budget: u32,
    /// Why training stopped early, if it did.
    pub halted: Option<String>,
    pub clients: Vec<ClientState>,
}

impl RunTrace {
    pub fn rounds(&self) -> u32 {
        self.records.len() as u32
    }

    pub fn final_test_loss(&self) -> f64 {
        self.records.last().map_or(self.initial_test_loss, |r| r.test_loss)
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_accuracy)
    }

    pub fn triggers(&self) -> usize {
        self.records.iter().filter(|r| r.trigger_fired).count()
    }
}

/// Trains under `scheduler` starting from a round budget of `t_init`.
pub fn train(setup: TrainingSetup, scheduler: &Scheduler, t_init: u32) -> Result<RunTrace> {
    if t_init == 0 {
        return Err(Error::domain("T_init must be >= 1"));
    }
    let TrainingSetup {
        mut clients,
        test,
        mut federation,
        init,
    } = setup;
    let crd = match *scheduler {
        Scheduler::Crd { beta, zeta } => Some(CrdConfig::new(beta, zeta, t_init)?),
        _ => None,
    };
    let mut budget = t_init;
    if let Scheduler::Decay { rate } = *scheduler {
        let rate = rate.unwrap_or(1.0 / t_init as f64);
        if !(rate >= 0.0) {
            return Err(Error::domain(format!("decay rate {rate} must be >= 0")));
        }
        if !matches!(federation.noise, NoisePolicy::Disabled) {
            federation.noise = NoisePolicy::LinearDecay {
                initial_rounds: t_init,
                rate,
            };
        }
        if rate > 0.0 {
            budget = (1.0 / rate).ceil().min(u32::MAX as f64) as u32;
        }
    }
    let initial_test_loss = models::loss(&federation.spec, &init, &test.batch())?;
    let mut server = ServerState::new(init, budget);
    let mut v_prev = initial_test_loss;
    let mut halted = None;
    while !server.finished() {
        let record = match federation::run_round(&mut server, &mut clients, &federation, &test) {
            Ok(r) => r,
            Err(Error::BudgetExhausted { client, remaining }) => {
                halted = Some(format!("budget exhausted (client {client:?}, remaining {remaining:e})"));
                break;
            }
            Err(e) => return Err(e),
        };
        if let Some(cfg) = &crd {
            let d = crd_step(v_prev, record.test_loss, server.t, server.budget_rounds, cfg);
            if d.triggered {
                server.budget_rounds = d.new_t;
                if let Some(last) = server.records.last_mut() {
                    last.trigger_fired = true;
                }
            }
        }
        v_prev = record.test_loss;
    }
    Ok(RunTrace {
        records: server.records,
        final_params: server.global,
        initial_test_loss,
        final_budget: server.budget_rounds,
        halted,
        clients,
    })
}

/// The linear-noise-decay baseline; `rate = None` decays to zero at `T_init`.
pub fn linear_decay_baseline(setup: TrainingSetup, t_init: u32, rate: Option<f64>) -> Result<RunTrace> {
    train(setup, &Scheduler::Decay { rate }, t_init)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPoint {
    pub rounds: u32,
    /// Final test loss per seed, or the error that seed hit.
    pub per_seed: Vec<std::result::Result<f64, String>>,
    /// Mean over the seeds that succeeded (`NaN` if none did).
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_rounds: Option<u32>,
    pub curve: Vec<GridPoint>,
}

/// Exhaustive search for the fixed round budget with the lowest seed-mean
/// final test loss. `make_setup(seed)` builds a fresh training setup.
pub fn search_optimal_t<F>(make_setup: F, grid: &[u32], seeds: &[u64], exec: Execution) -> Result<SearchResult>
where
    F: Fn(u64) -> Result<TrainingSetup> + Sync + Send,
{
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::domain("search needs a nonempty grid and seed list"));
    }
    let jobs: Vec<(u32, u64)> = grid.iter().flat_map(|&t| seeds.iter().map(move |&s| (t, s))).collect();
    let results = par::map(exec, &jobs, |&(t, s)| {
        make_setup(s)
            .and_then(|setup| train(setup, &Scheduler::Fixed, t))
            .map(|trace| trace.final_test_loss())
            .map_err(|e| e.to_string())
    });
    let curve: Vec<GridPoint> = grid
        .iter()
        .enumerate()
        .map(|(gi, &t)| {
            let per_seed = results[gi * seeds.len()..(gi + 1) * seeds.len()].to_vec();
            let ok: Vec<f64> = per_seed.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
            let mean_loss = if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().sum::<f64>() / ok.len() as f64
            };
            GridPoint {
                rounds: t,
                per_seed,
                mean_loss,
            }
        })
        .collect();
    let best_rounds = curve
        .iter()
        .filter(|p| p.mean_loss.is_finite())
        .min_by(|a, b| a.mean_loss.total_cmp(&b.mean_loss))
        .map(|p| p.rounds);
    Ok(SearchResult { best_rounds, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accountant::PrivacyBudget;
    use crate::data::synth_linear;
    use crate::federation::Weighting;
    use crate::models::{HingeForm, ModelSpec};
    use proptest::prelude::*;

    fn cfg(beta: f64) -> CrdConfig {
        CrdConfig::new(beta, 0.001, 200).unwrap()
    }

    #[test]
    fn discount_example() {
        let d = crd_step(1.0, 1.0, 50, 200, &cfg(0.9));
        assert!(d.triggered);
        assert_eq!(d.new_t, 185);
        let d = crd_step(1.0, 0.5, 50, 200, &cfg(0.9));
        assert!(!d.triggered);
        assert_eq!(d.new_t, 200);
    }

    #[test]
    fn last_round_trigger_ends_training() {
        assert_eq!(crd_step(1.0, 1.0, 199, 200, &cfg(0.9)).new_t, 199);
    }

    #[test]
    fn repeated_triggers_reach_current_round() {
        let mut budget = 200;
        for _ in 0..100 {
            budget = crd_step(0.0, 0.0, 120, budget, &cfg(0.9)).new_t;
        }
        assert_eq!(budget, 120);
    }

    #[test]
    fn config_validation() {
        assert!(CrdConfig::new(1.0, 0.1, 5).is_err());
        assert!(CrdConfig::new(0.5, 0.0, 5).is_err());
        assert!(CrdConfig::new(0.5, 0.1, 0).is_err());
    }

    proptest! {
        #[test]
        fn discount_never_grows_nor_undershoots(v0 in -5.0f64..5.0, v1 in -5.0f64..5.0, t in 0u32..500, extra in 0u32..500, beta in 0.01f64..0.99) {
            let budget = t + extra;
            let d = crd_step(v0, v1, t, budget, &cfg(beta));
            prop_assert!(d.new_t <= budget && d.new_t >= t);
        }
    }

    fn setup(seed: u64, eps: f64) -> TrainingSetup {
        let (u, n) = (4, 16);
        let ds = synth_linear(u * n + 40, 5, 1.0, seed).unwrap();
        let (train, test) = ds.split_at(u * n).unwrap();
        let budget = PrivacyBudget::new(eps, 1e-3).unwrap();
        let clients = (0..u)
            .map(|i| {
                let idx: Vec<usize> = (i * n..(i + 1) * n).collect();
                ClientState::new(i, train.subset(&idx).unwrap(), budget, seed).unwrap()
            })
            .collect();
        let spec = ModelSpec::svm(5, 0.01, HingeForm::Textbook);
        TrainingSetup {
            clients,
            test,
            federation: base_federation(spec.clone(), seed),
            init: ModelParams::zeros(&spec),
        }
    }

    fn base_federation(spec: ModelSpec, seed: u64) -> FederationConfig {
        FederationConfig {
            spec,
            eta: 0.1,
            clip: 1.0,
            clients_per_round: 2,
            noise: NoisePolicy::Calibrated,
            weighting: Weighting::BySize,
            local_steps: 1,
            execution: Execution::Sequential,
            seed,
        }
    }

    #[test]
    fn fixed_runs_exactly_t_init() {
        let trace = train(setup(1, 5.0), &Scheduler::Fixed, 12).unwrap();
        assert_eq!(trace.rounds(), 12);
        assert!(trace.halted.is_none());
        assert!(trace.records.iter().all(|r| r.t_current == 12 && !r.trigger_fired));
    }

    #[test]
    fn crd_budget_is_a_staircase() {
        let sched = Scheduler::Crd { beta: 0.9, zeta: 0.05 };
        let trace = train(setup(2, 5.0), &sched, 60).unwrap();
        let ts: Vec<u32> = trace.records.iter().map(|r| r.t_current).collect();
        assert!(ts.windows(2).all(|w| w[1] <= w[0]), "{ts:?}");
        assert!(trace.triggers() > 0);
        assert_eq!(trace.rounds(), trace.final_budget);
        assert!(federation::ledger_check(&trace.clients, 0.5, 0.1, 1.0).unwrap() <= 1.0 + 1e-9);
    }

    #[test]
    fn zero_decay_matches_fixed() {
        let fixed = train(setup(3, 5.0), &Scheduler::Fixed, 15).unwrap();
        let decay = linear_decay_baseline(setup(3, 5.0), 15, Some(0.0)).unwrap();
        assert_eq!(decay.rounds(), 15);
        let a: Vec<f64> = fixed.records.iter().map(|r| r.test_loss).collect();
        let b: Vec<f64> = decay.records.iter().map(|r| r.test_loss).collect();
        // Fixed re-derives sigma every round, so the two differ by rounding only.
        assert!(
            a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs()),
            "{a:?} vs {b:?}"
        );
    }

    #[test]
    fn faster_decay_halts_earlier() {
        let rounds: Vec<u32> = [0.0, 0.01, 0.03, 0.06]
            .iter()
            .map(|&r| linear_decay_baseline(setup(4, 5.0), 20, Some(r)).unwrap().rounds())
            .collect();
        assert!(rounds.windows(2).all(|w| w[1] <= w[0]), "{rounds:?}");
        assert!(rounds[3] < rounds[0]);
    }

    #[test]
    fn noiseless_search_prefers_longest_run() {
        let make = |seed| {
            let mut s = setup(seed, 1.0);
            s.federation.noise = NoisePolicy::Disabled;
            Ok(s)
        };
        let r = search_optimal_t(make, &[5, 10, 40], &[1, 2], Execution::Sequential).unwrap();
        assert_eq!(r.best_rounds, Some(40));
        assert_eq!(r.curve.len(), 3);
        assert!(r.curve.iter().all(|p| p.per_seed.iter().all(|x| x.is_ok())));
    }
}
