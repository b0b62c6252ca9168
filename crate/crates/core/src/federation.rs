//! The private federated training loop.
//!
//! Each round the server samples `K` of `U` clients. Every selected client
//! takes one clipped full-batch gradient step from the global model, adds
//! Gaussian noise calibrated to its own budget and uploads the result; the
//! server averages the uploads and evaluates the new global model.
//!
//! Every client is charged for every round, selected or not: the noise level
//! depends on the sampling ratio `q = K/U` and the round budget, not on the
//! realised selection, so all histories advance together.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::accountant::{self, PrivacyBudget, SigmaHistory};
use crate::data::Dataset;
use crate::models::{self, ModelParams, ModelSpec};
use crate::par::{self, Execution};
use crate::rng::{self, Domain};
use crate::{Error, Result};

/// Absolute slack allowed when checking a client's spend against its budget.
pub const LEDGER_SLACK: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub shard: Dataset,
    pub budget: PrivacyBudget,
    pub sigma_history: SigmaHistory,
    /// Master seed; per-round streams are derived from `(seed, id, round)`.
    pub seed: u64,
}

impl ClientState {
    pub fn new(id: usize, shard: Dataset, budget: PrivacyBudget, seed: u64) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::domain(format!("client {id} has an empty shard")));
        }
        Ok(Self {
            id,
            shard,
            budget,
            sigma_history: SigmaHistory::new(),
            seed,
        })
    }

    pub fn sensitivity(&self, eta: f64, clip: f64) -> Result<f64> {
        accountant::sensitivity(eta, clip, self.shard.len())
    }

    /// Total inverse variance this client may spend.
    pub fn inverse_variance_budget(&self, q: f64, eta: f64, clip: f64) -> Result<f64> {
        let dl = self.sensitivity(eta, clip)?;
        Ok(accountant::inverse_variance_budget(&self.budget, q, dl))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// Rounds completed after this one.
    pub round: u32,
    /// Round budget in force while this round ran.
    pub t_current: u32,
    pub selected: Vec<usize>,
    /// Noise std of each selected client, in `selected` order.
    pub sigmas: Vec<f64>,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    /// Local loss of every client on the new global model.
    pub client_losses: Vec<f64>,
    pub trigger_fired: bool,
}

impl RoundRecord {
    pub fn mean_sigma(&self) -> f64 {
        if self.sigmas.is_empty() {
            0.0
        } else {
            self.sigmas.iter().sum::<f64>() / self.sigmas.len() as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: ModelParams,
    /// Completed rounds.
    pub t: u32,
    /// Current round budget.
    pub budget_rounds: u32,
    pub records: Vec<RoundRecord>,
}

impl ServerState {
    pub fn new(global: ModelParams, budget_rounds: u32) -> Self {
        Self {
            global,
            t: 0,
            budget_rounds,
            records: Vec::new(),
        }
    }

    pub fn finished(&self) -> bool {
        self.t >= self.budget_rounds
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoisePolicy {
    /// Spread the remaining inverse-variance budget over the remaining rounds.
    Calibrated,
    /// `sigma_t = sigma_start (1 - rate t)`, with `sigma_start` calibrated for
    /// `initial_rounds`. The run stops before a round would overspend.
    LinearDecay { initial_rounds: u32, rate: f64 },
    /// No noise and no accounting.
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `p_i = |D_i| / sum_j |D_j|` over the selected clients.
    #[default]
    BySize,
    /// `p_i = 1/K`.
    Equal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub spec: ModelSpec,
    pub eta: f64,
    pub clip: f64,
    pub clients_per_round: usize,
    pub noise: NoisePolicy,
    #[serde(default)]
    pub weighting: Weighting,
    /// Experimental: local steps per round. Anything above 1 voids the privacy
    /// accounting, which assumes a single full-batch step.
    #[serde(default = "one")]
    pub local_steps: u32,
    #[serde(default)]
    pub execution: Execution,
    pub seed: u64,
}

fn one() -> u32 {
    1
}

/// Uniform `K`-subset of `0..U`, sorted.
pub fn sample_clients<R: Rng + ?Sized>(total: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > total {
        return Err(Error::domain(format!("need 1 <= K <= U, got K = {k}, U = {total}")));
    }
    let mut ids = rand::seq::index::sample(rng, total, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Adds independent `N(0, sigma^2)` noise to every coordinate.
pub fn add_noise<R: Rng + ?Sized>(params: &mut ModelParams, sigma: f64, rng: &mut R) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::domain(format!("noise std {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    for v in params.as_mut_slice() {
        let z: f64 = StandardNormal.sample(rng);
        *v += sigma * z;
    }
    Ok(())
}

/// Weighted coordinate-wise average. Weights must be positive and sum to 1.
pub fn aggregate(uploads: &[(f64, &ModelParams)]) -> Result<ModelParams> {
    let (_, first) = uploads
        .first()
        .ok_or_else(|| Error::domain("aggregate of no uploads"))?;
    if uploads.iter().any(|(p, _)| !(*p > 0.0)) {
        return Err(Error::domain("aggregation weights must be positive"));
    }
    let total: f64 = uploads.iter().map(|(p, _)| p).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("aggregation weights sum to {total}, not 1")));
    }
    let mut out = vec![0.0; first.len()];
    for (p, params) in uploads {
        if params.len() != out.len() {
            return Err(Error::ShapeMismatch {
                expected: out.len(),
                got: params.len(),
            });
        }
        for (o, v) in out.iter_mut().zip(params.as_slice()) {
            *o += p * v;
        }
    }
    let mut result = (*first).clone();
    result.as_mut_slice().copy_from_slice(&out);
    Ok(result)
}

fn weights(clients: &[ClientState], ids: &[usize], weighting: Weighting) -> Vec<f64> {
    match weighting {
        Weighting::Equal => vec![1.0 / ids.len() as f64; ids.len()],
        Weighting::BySize => {
            let total: usize = ids.iter().map(|&i| clients[i].shard.len()).sum();
            ids.iter()
                .map(|&i| clients[i].shard.len() as f64 / total as f64)
                .collect()
        }
    }
}

/// Noise std every client would use in the next round, or the first client
/// whose budget cannot cover it.
pub fn next_sigmas(server: &ServerState, clients: &[ClientState], cfg: &FederationConfig) -> Result<Vec<f64>> {
    let q = cfg.clients_per_round as f64 / clients.len() as f64;
    clients
        .iter()
        .map(|c| {
            if c.budget.is_unbounded() {
                return Ok(0.0);
            }
            let dl = c.sensitivity(cfg.eta, cfg.clip)?;
            let tag = |e: Error| match e {
                Error::BudgetExhausted { remaining, .. } => Error::BudgetExhausted {
                    client: Some(c.id),
                    remaining,
                },
                other => other,
            };
            match cfg.noise {
                NoisePolicy::Disabled => Ok(0.0),
                NoisePolicy::Calibrated => {
                    accountant::recalibrate_sigma(&c.budget, q, server.budget_rounds, server.t, &c.sigma_history, dl)
                        .map_err(tag)
                }
                NoisePolicy::LinearDecay { initial_rounds, rate } => {
                    let start =
                        accountant::recalibrate_sigma(&c.budget, q, initial_rounds, 0, &SigmaHistory::new(), dl)?;
                    let sigma = start * (1.0 - rate * server.t as f64);
                    let cap = accountant::inverse_variance_budget(&c.budget, q, dl);
                    let remaining = cap - c.sigma_history.inverse_variance();
                    if !(sigma > 0.0) || 1.0 / (sigma * sigma) > remaining - 0.5 * accountant::LEDGER_GUARD * cap {
                        return Err(Error::BudgetExhausted {
                            client: Some(c.id),
                            remaining,
                        });
                    }
                    Ok(sigma)
                }
            }
        })
        .collect()
}

/// Runs one round and returns its record. On error nothing is modified.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &FederationConfig,
    test: &Dataset,
) -> Result<RoundRecord> {
    if server.finished() {
        return Err(Error::domain(format!(
            "round budget {} already reached",
            server.budget_rounds
        )));
    }
    let u = clients.len();
    if cfg.local_steps == 0 {
        return Err(Error::domain("local_steps must be >= 1"));
    }
    let sigmas = next_sigmas(server, clients, cfg)?;
    let mut sampler = rng::stream(cfg.seed, Domain::ClientSampling, server.t as u64, 0);
    let selected = sample_clients(u, cfg.clients_per_round, &mut sampler)?;

    let global = &server.global;
    let round = server.t as u64;
    let snapshot: &[ClientState] = clients;
    let uploads: Vec<Result<ModelParams>> = par::map(cfg.execution, &selected, |&i| {
        let c = &snapshot[i];
        let mut w = global.clone();
        for _ in 0..cfg.local_steps {
            w = models::local_update(&cfg.spec, &w, &c.shard.batch(), cfg.eta, cfg.clip)?;
        }
        let mut noise = rng::stream(c.seed, Domain::ClientNoise, c.id as u64, round);
        add_noise(&mut w, sigmas[i], &mut noise)?;
        Ok(w)
    });
    let uploads: Vec<ModelParams> = uploads.into_iter().collect::<Result<_>>()?;
    let p = weights(clients, &selected, cfg.weighting);
    let pairs: Vec<(f64, &ModelParams)> = p.iter().copied().zip(uploads.iter()).collect();
    let next = aggregate(&pairs)?;
    if !next.is_finite() {
        return Err(Error::domain(format!(
            "global model diverged in round {}",
            server.t + 1
        )));
    }

    let all: Vec<usize> = (0..u).collect();
    let client_losses: Vec<f64> = par::map(cfg.execution, &all, |&i| {
        models::loss(&cfg.spec, &next, &snapshot[i].shard.batch())
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let pw = weights(clients, &all, cfg.weighting);
    let train_loss = pw.iter().zip(&client_losses).map(|(a, b)| a * b).sum();
    let test_batch = test.batch();
    let test_loss = models::loss(&cfg.spec, &next, &test_batch)?;
    let test_accuracy = models::accuracy(&cfg.spec, &next, &test_batch)?;

    if !matches!(cfg.noise, NoisePolicy::Disabled) {
        for (c, &s) in clients.iter_mut().zip(&sigmas) {
            if s > 0.0 {
                c.sigma_history.push(s)?;
            }
        }
    }
    let record = RoundRecord {
        round: server.t + 1,
        t_current: server.budget_rounds,
        sigmas: selected.iter().map(|&i| sigmas[i]).collect(),
        selected,
        train_loss,
        test_loss,
        test_accuracy,
        client_losses,
        trigger_fired: false,
    };
    server.global = next;
    server.t += 1;
    server.records.push(record.clone());
    Ok(record)
}

/// Checks that no client has spent more inverse variance than its budget
/// allows. Returns the largest `spent / budget` ratio.
pub fn ledger_check(clients: &[ClientState], q: f64, eta: f64, clip: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for c in clients {
        if c.budget.is_unbounded() {
            continue;
        }
        let cap = c.inverse_variance_budget(q, eta, clip)?;
        let spent = c.sigma_history.inverse_variance();
        if spent > cap + LEDGER_SLACK {
            return Err(Error::BudgetExhausted {
                client: Some(c.id),
                remaining: cap - spent,
            });
        }
        worst = worst.max(spent / cap);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_linear;
    use crate::models::HingeForm;

    #[test]
    fn full_participation_selects_everyone() {
        let mut r = rng::stream(1, Domain::ClientSampling, 0, 0);
        assert_eq!(sample_clients(7, 7, &mut r).unwrap(), (0..7).collect::<Vec<_>>());
        assert!(sample_clients(3, 4, &mut r).is_err());
        assert!(sample_clients(3, 0, &mut r).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let spec = ModelSpec::logistic(3, 2);
        let mut p = ModelParams::from_vec(&spec, (0..8).map(f64::from).collect()).unwrap();
        let before = p.clone();
        add_noise(&mut p, 0.0, &mut rng::stream(0, Domain::ClientNoise, 0, 0)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn aggregate_examples() {
        let spec = ModelSpec::logistic(1, 2);
        let zero = ModelParams::zeros(&spec);
        let twos = ModelParams::from_vec(&spec, vec![2.0; 4]).unwrap();
        let mid = aggregate(&[(0.5, &zero), (0.5, &twos)]).unwrap();
        assert_eq!(mid.as_slice(), &[1.0; 4]);
        let same = aggregate(&[(0.25, &twos), (0.75, &twos)]).unwrap();
        assert_eq!(same, twos);
        assert!(aggregate(&[(0.5, &zero), (0.6, &twos)]).is_err());
        assert!(aggregate(&[(1.5, &zero), (-0.5, &twos)]).is_err());
    }

    fn setup(u: usize, n: usize, eps: f64) -> (Vec<ClientState>, Dataset, ModelSpec) {
        let ds = synth_linear(u * n + 50, 4, 1.0, 5).unwrap();
        let (train, test) = ds.split_at(u * n).unwrap();
        let budget = PrivacyBudget::new(eps, 1e-3).unwrap();
        let clients = (0..u)
            .map(|i| {
                let idx: Vec<usize> = (i * n..(i + 1) * n).collect();
                ClientState::new(i, train.subset(&idx).unwrap(), budget, 9).unwrap()
            })
            .collect();
        (clients, test, ModelSpec::svm(4, 0.01, HingeForm::Textbook))
    }

    fn config(spec: ModelSpec, k: usize, noise: NoisePolicy) -> FederationConfig {
        FederationConfig {
            spec,
            eta: 0.1,
            clip: 1.0,
            clients_per_round: k,
            noise,
            weighting: Weighting::BySize,
            local_steps: 1,
            execution: Execution::Sequential,
            seed: 3,
        }
    }

    #[test]
    fn constant_sigma_while_budget_is_fixed() {
        let (mut clients, test, spec) = setup(5, 10, 4.0);
        let cfg = config(spec.clone(), 3, NoisePolicy::Calibrated);
        let mut server = ServerState::new(ModelParams::zeros(&spec), 20);
        while !server.finished() {
            run_round(&mut server, &mut clients, &cfg, &test).unwrap();
        }
        let first = server.records[0].sigmas[0];
        for r in &server.records {
            for s in &r.sigmas {
                assert!(((s - first) / first).abs() < 1e-12);
            }
        }
        let ratio = ledger_check(&clients, 0.6, 0.1, 1.0).unwrap();
        assert!((ratio - 1.0).abs() < 1e-9);
        assert!(clients.iter().all(|c| c.sigma_history.len() == 20));
        assert!(run_round(&mut server, &mut clients, &cfg, &test).is_err());
    }

    #[test]
    fn failed_round_leaves_state_intact() {
        let (mut clients, test, spec) = setup(4, 10, 4.0);
        let cfg = config(spec.clone(), 2, NoisePolicy::Calibrated);
        let mut server = ServerState::new(ModelParams::zeros(&spec), 3);
        run_round(&mut server, &mut clients, &cfg, &test).unwrap();
        // Pretend another client overspent.
        for _ in 0..1000 {
            clients[2].sigma_history.push(1e-4).unwrap();
        }
        let before = (server.global.clone(), server.t, clients[0].sigma_history.clone());
        let err = run_round(&mut server, &mut clients, &cfg, &test).unwrap_err();
        assert!(matches!(err, Error::BudgetExhausted { client: Some(2), .. }), "{err}");
        assert_eq!(
            before,
            (server.global.clone(), server.t, clients[0].sigma_history.clone())
        );
    }

    #[test]
    fn replay_is_identical_across_execution_modes() {
        let run = |exec| {
            let (mut clients, test, spec) = setup(6, 8, 2.0);
            let mut cfg = config(spec.clone(), 4, NoisePolicy::Calibrated);
            cfg.execution = exec;
            let mut server = ServerState::new(ModelParams::zeros(&spec), 5);
            while !server.finished() {
                run_round(&mut server, &mut clients, &cfg, &test).unwrap();
            }
            server.records
        };
        let a = run(Execution::Sequential);
        let b = par::with_workers(4, || run(Execution::Parallel));
        assert_eq!(a, b);
    }

    #[test]
    fn decay_halts_before_overspending() {
        let (mut clients, test, spec) = setup(3, 10, 3.0);
        let noise = NoisePolicy::LinearDecay {
            initial_rounds: 10,
            rate: 0.05,
        };
        let cfg = config(spec.clone(), 3, noise);
        let mut server = ServerState::new(ModelParams::zeros(&spec), 100);
        let err = loop {
            if let Err(e) = run_round(&mut server, &mut clients, &cfg, &test) {
                break e;
            }
        };
        assert!(matches!(err, Error::BudgetExhausted { .. }));
        assert!(server.t < 10);
        assert!(ledger_check(&clients, 1.0, 0.1, 1.0).unwrap() <= 1.0 + 1e-9);
    }
}
