//! Experiment configuration, runs, sweeps and accountant reports.
//!
//! A run is described by one TOML file. Parameter names follow the usual
//! symbols (`epsilon_p`, `delta_p`, `beta`, `zeta`, `eta`, `clip_C`, `T_init`,
//! `U`, `K`). Every run writes, per seed, `seed_<s>/rounds.csv`,
//! `seed_<s>/summary.json` and `seed_<s>/client_losses.csv`, plus one
//! `manifest.json` holding the fully resolved configuration and its hash.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::accountant::{self, Direction, MechanismParams, PrivacyBudget, REGIME_CUTOFF};
use crate::data::{self, Dataset, PartitionPlan, Provenance};
use crate::federation::{self, ClientState, FederationConfig, NoisePolicy, Weighting};
use crate::models::{self, HingeForm, ModelKind, ModelParams, ModelSpec};
use crate::par::{self, Execution};
use crate::rng::{self, Domain};
use crate::scheduler::{self, RunTrace, Scheduler, TrainingSetup, DEFAULT_BETA, DEFAULT_ZETA};
use crate::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Default learning rate for the MLP and logistic models.
pub const DEFAULT_ETA: f64 = 0.05;
/// Default learning rate for the SVM.
pub const DEFAULT_ETA_SVM: f64 = 0.01;
pub const DEFAULT_KAPPA: f64 = 0.01;
pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_PILOT_ROUNDS: u32 = 5;
pub const DEFAULT_SYNTH_TEST: usize = 2000;

/// Privacy level; `inf` disables noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Epsilon(pub f64);

impl Serialize for Epsilon {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Epsilon(v)),
            Raw::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "+inf") => Ok(Epsilon(f64::INFINITY)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad epsilon {t:?}"))),
        }
    }
}

/// Clipping threshold: a number, or `"pilot"` to take the median per-sample
/// gradient norm of a short noiseless pilot run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClipSetting {
    Value(f64),
    Pilot,
}

impl Serialize for ClipSetting {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ClipSetting::Value(v) => s.serialize_f64(*v),
            ClipSetting::Pilot => s.serialize_str("pilot"),
        }
    }
}

impl<'de> Deserialize<'de> for ClipSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(ClipSetting::Value(v)),
            Raw::Text(t) if t == "pilot" => Ok(ClipSetting::Pilot),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad clip_C {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    Fixed,
    #[default]
    Crd,
    Decay,
}

impl std::str::FromStr for SchedulerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "crd" => Ok(Self::Crd),
            "decay" => Ok(Self::Decay),
            other => Err(format!("unknown scheduler {other:?} (fixed, crd, decay)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub hinge: HingeForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum DataSource {
    /// Two separable Gaussian clusters, regenerated per seed.
    Synthetic { dim: usize, margin: f64 },
    /// MNIST IDX files; `dir` falls back to `$MNIST_DIR`.
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
    },
    /// CSV with a header row and the label in the last column.
    Csv {
        path: PathBuf,
        #[serde(default)]
        test_path: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub partition: PartitionPlan,
    /// Held-out test samples (drawn per seed when smaller than the pool).
    #[serde(default)]
    pub test_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientBudget {
    pub epsilon: Epsilon,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(rename = "U")]
    pub u: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T_init")]
    pub t_init: u32,
    pub epsilon_p: Epsilon,
    pub delta_p: f64,
    /// Per-client overrides of `(epsilon_p, delta_p)`; length `U` when given.
    #[serde(default)]
    pub client_budgets: Option<Vec<ClientBudget>>,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(rename = "clip_C")]
    pub clip_c: ClipSetting,
    #[serde(default = "default_pilot_rounds")]
    pub pilot_rounds: u32,
    #[serde(default)]
    pub scheduler: SchedulerKind,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_zeta")]
    pub zeta: f64,
    /// Linear-decay slope per round; defaults to `1 / T_init`.
    #[serde(default)]
    pub decay_rate: Option<f64>,
    #[serde(default)]
    pub weighting: Weighting,
    /// Experimental; values above 1 void the privacy accounting.
    #[serde(default = "default_local_steps")]
    pub local_steps: u32,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_pilot_rounds() -> u32 {
    DEFAULT_PILOT_ROUNDS
}
fn default_beta() -> f64 {
    DEFAULT_BETA
}
fn default_zeta() -> f64 {
    DEFAULT_ZETA
}
fn default_local_steps() -> u32 {
    1
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}
fn default_workers() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable in TOML")
    }

    /// Materialises every default that depends on other fields.
    pub fn resolved(mut self) -> Self {
        let svm = self.model.kind == ModelKind::Svm;
        self.eta.get_or_insert(if svm { DEFAULT_ETA_SVM } else { DEFAULT_ETA });
        match self.model.kind {
            ModelKind::Svm => {
                self.model.kappa.get_or_insert(DEFAULT_KAPPA);
            }
            ModelKind::Mlp => {
                self.model.hidden_dim.get_or_insert(DEFAULT_HIDDEN);
            }
            ModelKind::Logistic => {}
        }
        if self.data.test_size.is_none() {
            if let DataSource::Synthetic { .. } = self.data.source {
                self.data.test_size = Some(DEFAULT_SYNTH_TEST);
            }
        }
        if self.scheduler == SchedulerKind::Decay {
            self.decay_rate.get_or_insert(1.0 / self.t_init.max(1) as f64);
        }
        if self.output_dir.is_none() {
            self.output_dir = Some(PathBuf::from("runs").join(&self.name));
        }
        self
    }

    pub fn eta(&self) -> f64 {
        self.eta.unwrap_or(DEFAULT_ETA)
    }

    pub fn q(&self) -> f64 {
        self.k as f64 / self.u as f64
    }

    pub fn scheduler(&self) -> Scheduler {
        match self.scheduler {
            SchedulerKind::Fixed => Scheduler::Fixed,
            SchedulerKind::Crd => Scheduler::Crd {
                beta: self.beta,
                zeta: self.zeta,
            },
            SchedulerKind::Decay => Scheduler::Decay { rate: self.decay_rate },
        }
    }

    pub fn budgets(&self) -> Result<Vec<PrivacyBudget>> {
        match &self.client_budgets {
            Some(list) => list.iter().map(|b| PrivacyBudget::new(b.epsilon.0, b.delta)).collect(),
            None => {
                let b = PrivacyBudget::new(self.epsilon_p.0, self.delta_p)?;
                Ok(vec![b; self.u])
            }
        }
    }

    /// Every field-level violation at once.
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.u == 0 {
            v.push("U must be >= 1".to_string());
        }
        if self.k == 0 || self.k > self.u {
            v.push(format!("K = {} must satisfy 1 <= K <= U = {}", self.k, self.u));
        }
        if self.t_init == 0 {
            v.push("T_init must be >= 1".into());
        }
        if !(self.epsilon_p.0 > 0.0) {
            v.push(format!("epsilon_p = {} must be > 0", self.epsilon_p.0));
        }
        if !(self.delta_p > 0.0 && self.delta_p < 1.0) {
            v.push(format!("delta_p = {} must lie in (0, 1)", self.delta_p));
        }
        if let Some(list) = &self.client_budgets {
            if list.len() != self.u {
                v.push(format!("client_budgets has {} entries, U = {}", list.len(), self.u));
            }
            for (i, b) in list.iter().enumerate() {
                if !(b.epsilon.0 > 0.0) || !(b.delta > 0.0 && b.delta < 1.0) {
                    v.push(format!("client_budgets[{i}] is not a valid (epsilon, delta)"));
                }
            }
        }
        let eta = self.eta();
        if !(eta > 0.0 && eta.is_finite()) {
            v.push(format!("eta = {eta} must be > 0"));
        }
        if let ClipSetting::Value(c) = self.clip_c {
            if !(c > 0.0 && c.is_finite()) {
                v.push(format!("clip_C = {c} must be > 0"));
            }
        }
        if self.pilot_rounds == 0 {
            v.push("pilot_rounds must be >= 1".into());
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            v.push(format!("beta = {} must lie in (0, 1)", self.beta));
        }
        if !(self.zeta > 0.0) {
            v.push(format!("zeta = {} must be > 0", self.zeta));
        }
        if let Some(r) = self.decay_rate {
            if !(r >= 0.0 && r.is_finite()) {
                v.push(format!("decay_rate = {r} must be >= 0"));
            }
        }
        if self.local_steps == 0 {
            v.push("local_steps must be >= 1".into());
        }
        if self.seeds.is_empty() {
            v.push("seeds must not be empty".into());
        }
        if self.workers == 0 {
            v.push("workers must be >= 1".into());
        }
        if self.data.partition.shard_size == 0 {
            v.push("partition.shard_size must be >= 1".into());
        }
        match self.model.kind {
            ModelKind::Svm => {
                if !self.model.kappa.is_some_and(|k| k > 0.0) {
                    v.push("model.kappa must be > 0 for svm".into());
                }
            }
            ModelKind::Mlp => {
                if self.model.hidden_dim == Some(0) {
                    v.push("model.hidden_dim must be >= 1".into());
                }
            }
            ModelKind::Logistic => {}
        }
        if let DataSource::Synthetic { dim, margin } = self.data.source {
            if dim == 0 || !(margin > 0.0) {
                v.push("synthetic data needs dim >= 1 and margin > 0".into());
            }
        }
        // The inverse-variance budget must be positive before the first round.
        if v.is_empty() {
            if let (Ok(budgets), ClipSetting::Value(c)) = (self.budgets(), self.clip_c) {
                let dl = 2.0 * eta * c / self.data.partition.shard_size as f64;
                if budgets
                    .iter()
                    .any(|b| !(accountant::inverse_variance_budget(b, self.q(), dl) > 0.0))
                {
                    v.push("initial inverse-variance budget is not positive".into());
                }
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// SHA-256 of the canonical (sorted-key) JSON form.
    pub fn content_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        let canonical = serde_json::to_string(&value).expect("json value serialises");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Datasets shared by every seed of an experiment.
#[derive(Debug, Clone)]
pub struct LoadedData {
    /// Pool the client shards are drawn from (unused for synthetic data).
    pub train: Option<Dataset>,
    pub test: Option<Dataset>,
}

/// Maps labels into the convention of the model: `+-1` for the SVM and
/// `0..c` otherwise.
fn relabel(ds: &Dataset, kind: ModelKind) -> Result<Dataset> {
    let labels = ds.labels();
    let has_neg = labels.contains(&-1);
    match kind {
        ModelKind::Svm => {
            if has_neg {
                return Ok(ds.clone());
            }
            if ds.num_classes() != 2 {
                return Err(Error::domain("svm needs a binary dataset"));
            }
            let mapped = labels.iter().map(|&l| if l == 0 { -1 } else { 1 }).collect();
            Dataset::new(ds.features().to_vec(), mapped, ds.dim(), 2, ds.provenance())
        }
        _ => {
            if !has_neg {
                return Ok(ds.clone());
            }
            let mapped = labels.iter().map(|&l| if l == -1 { 0 } else { 1 }).collect();
            Dataset::new(ds.features().to_vec(), mapped, ds.dim(), 2, ds.provenance())
        }
    }
}

/// A validated experiment with its data loaded and clipping threshold fixed.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub spec: ModelSpec,
    pub clip: f64,
    data: LoadedData,
    pub notes: Vec<String>,
}

/// Default download location of `fetch-mnist`, relative to the working directory.
pub const DEFAULT_MNIST_DIR: &str = "data/mnist";

/// Config value, then `$MNIST_DIR`, then [`DEFAULT_MNIST_DIR`] if present.
pub fn resolve_mnist_dir(dir: Option<&Path>) -> Result<PathBuf> {
    dir.map(Path::to_path_buf)
        .or_else(data::mnist_dir)
        .or_else(|| Some(PathBuf::from(DEFAULT_MNIST_DIR)).filter(|p| p.is_dir()))
        .ok_or_else(|| {
            Error::Config(vec![format!(
                "MNIST location unknown: set data.source.dir, export {} or run `fetch-mnist`",
                data::MNIST_DIR_ENV
            )])
        })
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let mut notes = Vec::new();
        let (data, dim, classes) = match &config.data.source {
            DataSource::Synthetic { dim, .. } => (
                LoadedData {
                    train: None,
                    test: None,
                },
                *dim,
                2,
            ),
            DataSource::Mnist { dir } => {
                let dir = resolve_mnist_dir(dir.as_deref())?;
                let (train, test) = data::load_mnist(&dir)?;
                notes.push(format!(
                    "client shards drawn per seed by seeded shuffle from the {}-sample MNIST training set",
                    train.len()
                ));
                let (d, c) = (train.dim(), train.num_classes());
                (
                    LoadedData {
                        train: Some(relabel(&train, config.model.kind)?),
                        test: Some(relabel(&test, config.model.kind)?),
                    },
                    d,
                    c,
                )
            }
            DataSource::Csv { path, test_path } => {
                let all = data::load_csv(path)?;
                let (train, test) = match test_path {
                    Some(p) => (all, data::load_csv(p)?),
                    None => {
                        let hold = config.data.test_size.unwrap_or(all.len() / 5).max(1);
                        let at = all.len().saturating_sub(hold);
                        all.split_at(at)?
                    }
                };
                let (d, c) = (train.dim(), train.num_classes());
                (
                    LoadedData {
                        train: Some(relabel(&train, config.model.kind)?),
                        test: Some(relabel(&test, config.model.kind)?),
                    },
                    d,
                    c,
                )
            }
        };
        let spec = match config.model.kind {
            ModelKind::Svm => ModelSpec::svm(dim, config.model.kappa.unwrap_or(DEFAULT_KAPPA), config.model.hinge),
            ModelKind::Logistic => ModelSpec::logistic(dim, classes),
            ModelKind::Mlp => ModelSpec::mlp(dim, config.model.hidden_dim.unwrap_or(DEFAULT_HIDDEN), classes),
        };
        spec.validate()?;
        if config.local_steps > 1 {
            notes.push("local_steps > 1: privacy accounting assumes one step and does not hold".into());
        }
        if config.scheduler == SchedulerKind::Decay {
            notes.push(
                "linear-decay slope is a stand-in normalisation (sigma_start / T_init per round by default)".into(),
            );
        }
        let mut exp = Self {
            config,
            spec,
            clip: f64::NAN,
            data,
            notes,
        };
        exp.clip = match exp.config.clip_c {
            ClipSetting::Value(c) => c,
            ClipSetting::Pilot => {
                let seed = exp.config.seeds[0];
                let c = exp.pilot(seed)?.clip;
                exp.notes.push(format!(
                    "clip_C = {c} from a {}-round noiseless pilot (seed {seed})",
                    exp.config.pilot_rounds
                ));
                c
            }
        };
        if !(exp.clip > 0.0 && exp.clip.is_finite()) {
            return Err(Error::Config(vec![format!(
                "resolved clip_C = {} is not positive",
                exp.clip
            )]));
        }
        exp.config.clip_c = ClipSetting::Value(exp.clip);
        exp.config.validate()?;
        Ok(exp)
    }

    pub fn execution(&self) -> Execution {
        if self.config.workers > 1 {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    /// Client shards and test set for one seed.
    fn shards(&self, seed: u64) -> Result<(Vec<Dataset>, Dataset)> {
        let cfg = &self.config;
        let plan = &cfg.data.partition;
        match &cfg.data.source {
            DataSource::Synthetic { dim, margin } => {
                let sizes = plan.shard_sizes(cfg.u);
                let n_train: usize = sizes.iter().sum();
                let n_test = cfg.data.test_size.unwrap_or(DEFAULT_SYNTH_TEST).max(1);
                let all = relabel(
                    &data::synth_linear(n_train + n_test, *dim, *margin, seed)?,
                    cfg.model.kind,
                )?;
                let (pool, test) = all.split_at(n_train)?;
                let idx = data::partition(&pool, plan, cfg.u, seed)?;
                let shards = idx.iter().map(|s| pool.subset(s)).collect::<Result<_>>()?;
                Ok((shards, test))
            }
            _ => {
                let train = self.data.train.as_ref().expect("loaded");
                let test = self.data.test.as_ref().expect("loaded");
                let idx = data::partition(train, plan, cfg.u, seed)?;
                let shards = idx.iter().map(|s| train.subset(s)).collect::<Result<_>>()?;
                let test = match cfg.data.test_size {
                    Some(n) if n < test.len() => {
                        let mut r = rng::stream(seed, Domain::Test, 0, 0);
                        test.subset(&data::sample_rows(test.len(), n, &mut r)?)?
                    }
                    _ => test.clone(),
                };
                Ok((shards, test))
            }
        }
    }

    pub fn initial_params(&self, seed: u64) -> ModelParams {
        ModelParams::init(&self.spec, &mut rng::stream(seed, Domain::Init, 0, 0))
    }

    pub fn setup(&self, seed: u64) -> Result<TrainingSetup> {
        let cfg = &self.config;
        let (shards, test) = self.shards(seed)?;
        let budgets = cfg.budgets()?;
        let clients = shards
            .into_iter()
            .zip(budgets)
            .enumerate()
            .map(|(i, (shard, b))| ClientState::new(i, shard, b, seed))
            .collect::<Result<Vec<_>>>()?;
        let noise = if clients.iter().all(|c| c.budget.is_unbounded()) {
            NoisePolicy::Disabled
        } else {
            NoisePolicy::Calibrated
        };
        if self.spec.kind != ModelKind::Mlp {
            if let Some(l) = models::smoothness_estimate(&self.spec, &clients[0].shard.batch())? {
                if cfg.eta() > 1.0 / l {
                    return Err(Error::Config(vec![format!(
                        "eta = {} exceeds 1/L = {} estimated from client 0",
                        cfg.eta(),
                        1.0 / l
                    )]));
                }
            }
        }
        Ok(TrainingSetup {
            clients,
            test,
            federation: FederationConfig {
                spec: self.spec.clone(),
                eta: cfg.eta(),
                clip: self.clip,
                clients_per_round: cfg.k,
                noise,
                weighting: cfg.weighting,
                local_steps: cfg.local_steps,
                execution: self.execution(),
                seed,
            },
            init: self.initial_params(seed),
        })
    }

    /// Trains one seed under the configured scheduler.
    pub fn train(&self, seed: u64) -> Result<RunTrace> {
        self.train_with(seed, &self.config.scheduler(), self.config.t_init)
    }

    pub fn train_with(&self, seed: u64, scheduler: &Scheduler, t_init: u32) -> Result<RunTrace> {
        scheduler::train(self.setup(seed)?, scheduler, t_init)
    }

    /// Median unclipped per-sample gradient norm over a short noiseless run
    /// with full participation.
    pub fn pilot(&self, seed: u64) -> Result<PilotResult> {
        let (shards, _) = self.shards(seed)?;
        let eta = self.config.eta();
        let mut w = self.initial_params(seed);
        let mut norms = Vec::new();
        let total: usize = shards.iter().map(Dataset::len).sum();
        for _ in 0..self.config.pilot_rounds {
            let per_client: Vec<Result<(Vec<f64>, ModelParams)>> = par::map(self.execution(), &shards, |s| {
                let b = s.batch();
                let n = models::per_sample_gradient_norms(&self.spec, &w, &b)?;
                let next = models::local_update(&self.spec, &w, &b, eta, f64::MAX)?;
                Ok((n, next))
            });
            let mut acc = vec![0.0; w.len()];
            for (r, s) in per_client.into_iter().zip(&shards) {
                let (n, next) = r?;
                norms.extend(n);
                let p = s.len() as f64 / total as f64;
                acc.iter_mut().zip(next.as_slice()).for_each(|(a, v)| *a += p * v);
            }
            w = ModelParams::from_vec(&self.spec, acc)?;
        }
        Ok(PilotResult {
            clip: median(&norms),
            norms,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PilotResult {
    pub clip: f64,
    pub norms: Vec<f64>,
}

/// Median with the mean of the two middle values for even counts.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub const ROUNDS_HEADER: [&str; 9] = [
    "seed",
    "round",
    "T_current",
    "sigma",
    "train_loss",
    "test_loss",
    "test_accuracy",
    "selected_clients",
    "trigger_fired",
];

/// The per-round CSV, byte-stable for a given trace.
pub fn rounds_csv(seed: u64, trace: &RunTrace) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ROUNDS_HEADER)?;
    for r in &trace.records {
        let ids: Vec<String> = r.selected.iter().map(usize::to_string).collect();
        w.write_record([
            seed.to_string(),
            r.round.to_string(),
            r.t_current.to_string(),
            r.mean_sigma().to_string(),
            r.train_loss.to_string(),
            r.test_loss.to_string(),
            r.test_accuracy.to_string(),
            ids.join(";"),
            r.trigger_fired.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::domain(e.to_string()))
}

fn client_losses_csv(trace: &RunTrace) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["round", "client", "loss"])?;
    for r in &trace.records {
        for (i, l) in r.client_losses.iter().enumerate() {
            w.write_record([r.round.to_string(), i.to_string(), l.to_string()])?;
        }
    }
    w.into_inner().map_err(|e| Error::domain(e.to_string()))
}

/// Per-seed summary; every number is a column value or count from rounds.csv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub scheduler: String,
    /// Number of rounds run (rows of rounds.csv).
    pub realized_t: u32,
    /// Rows with `trigger_fired = true`.
    pub triggers: usize,
    pub final_train_loss: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    /// The `sigma` column.
    pub sigma_trajectory: Vec<f64>,
    /// The `T_current` column.
    pub t_trajectory: Vec<u32>,
    pub halted: Option<String>,
}

impl RunSummary {
    pub fn from_trace(seed: u64, scheduler: &Scheduler, trace: &RunTrace) -> Self {
        let last = trace.records.last();
        Self {
            seed,
            scheduler: scheduler.name().into(),
            realized_t: trace.rounds(),
            triggers: trace.triggers(),
            final_train_loss: last.map(|r| r.train_loss),
            final_test_loss: last.map(|r| r.test_loss),
            final_test_accuracy: last.map(|r| r.test_accuracy),
            sigma_trajectory: trace.records.iter().map(|r| r.mean_sigma()).collect(),
            t_trajectory: trace.records.iter().map(|r| r.t_current).collect(),
            halted: trace.halted.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutput {
    pub seed: u64,
    pub rounds_csv: Option<PathBuf>,
    pub summary_json: Option<PathBuf>,
    pub client_losses_csv: Option<PathBuf>,
    /// Largest `spent / budget` inverse-variance ratio over clients.
    pub ledger_max_ratio: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub version: String,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<SeedOutput>,
    pub notes: Vec<String>,
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name))
}

fn run_seed(exp: &Experiment, seed: u64, dir: &Path) -> Result<SeedOutput> {
    let scheduler = exp.config.scheduler();
    let trace = exp.train(seed)?;
    let ratio = federation::ledger_check(&trace.clients, exp.config.q(), exp.config.eta(), exp.clip)?;
    let seed_dir = dir.join(format!("seed_{seed}"));
    let rounds = seed_dir.join("rounds.csv");
    let summary = seed_dir.join("summary.json");
    let losses = seed_dir.join("client_losses.csv");
    write_atomic(&rounds, &rounds_csv(seed, &trace)?)?;
    let s = RunSummary::from_trace(seed, &scheduler, &trace);
    write_atomic(&summary, serde_json::to_string_pretty(&s)?.as_bytes())?;
    write_atomic(&losses, &client_losses_csv(&trace)?)?;
    Ok(SeedOutput {
        seed,
        rounds_csv: Some(rounds),
        summary_json: Some(summary),
        client_losses_csv: Some(losses),
        ledger_max_ratio: Some(ratio),
        error: None,
    })
}

/// Runs every seed and writes per-seed outputs plus `manifest.json`.
pub fn run_experiment(config: ExperimentConfig) -> Result<RunManifest> {
    let start = Instant::now();
    let exp = Experiment::prepare(config)?;
    let dir = out_dir(&exp.config);
    let seeds = exp.config.seeds.clone();
    let outputs = par::with_workers(exp.config.workers, || {
        par::map(exp.execution(), &seeds, |&seed| {
            run_seed(&exp, seed, &dir).unwrap_or_else(|e| SeedOutput {
                seed,
                rounds_csv: None,
                summary_json: None,
                client_losses_csv: None,
                ledger_max_ratio: None,
                error: Some(e.to_string()),
            })
        })
    });
    let manifest = RunManifest {
        config_hash: exp.config.content_hash(),
        config: exp.config.clone(),
        version: VERSION.into(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        outputs,
        notes: exp.notes.clone(),
    };
    write_atomic(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "T")]
    T,
    #[serde(rename = "epsilon")]
    Epsilon,
    #[serde(rename = "beta")]
    Beta,
    #[serde(rename = "T_init")]
    TInit,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "T" | "t" => Ok(Self::T),
            "epsilon" | "eps" => Ok(Self::Epsilon),
            "beta" => Ok(Self::Beta),
            "T_init" | "t_init" | "t-init" => Ok(Self::TInit),
            other => Err(format!("unknown axis {other:?} (T, epsilon, beta, T_init)")),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::T => "T",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::Beta => "beta",
            SweepAxis::TInit => "T_init",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub final_test_loss: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub rounds: Option<u32>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub mean_final_test_loss: f64,
    pub std_final_test_loss: f64,
    pub mean_final_test_accuracy: f64,
    pub mean_rounds: f64,
    pub ok_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub points: Vec<SweepPoint>,
    /// Value with the lowest seed-mean final test loss.
    pub best_value: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// Varies one parameter, running every seed at every value. Failures are
/// recorded per row and never abort the sweep. `T` fixes the schedule at
/// that many rounds; `T_init` keeps the configured scheduler.
pub fn sweep(exp: &Experiment, axis: SweepAxis, values: &[f64]) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::domain("sweep needs at least one value"));
    }
    let seeds = &exp.config.seeds;
    let jobs: Vec<(f64, u64)> = values
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let run_job = |&(value, seed): &(f64, u64)| -> SweepRow {
        let result = (|| {
            let rounds_of = |v: f64| -> Result<u32> {
                if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                    Ok(v as u32)
                } else {
                    Err(Error::domain(format!("{v} is not a valid round count")))
                }
            };
            match axis {
                SweepAxis::T => exp.train_with(seed, &Scheduler::Fixed, rounds_of(value)?),
                SweepAxis::TInit => exp.train_with(seed, &exp.config.scheduler(), rounds_of(value)?),
                SweepAxis::Epsilon | SweepAxis::Beta => {
                    let mut cfg = exp.config.clone();
                    if axis == SweepAxis::Epsilon {
                        cfg.epsilon_p = Epsilon(value);
                        cfg.client_budgets = None;
                    } else {
                        cfg.beta = value;
                    }
                    cfg.validate()?;
                    let mut variant = exp.clone();
                    variant.config = cfg;
                    variant.train(seed)
                }
            }
        })();
        match result {
            Ok(trace) => SweepRow {
                value,
                seed,
                final_test_loss: Some(trace.final_test_loss()),
                final_test_accuracy: trace.final_test_accuracy(),
                rounds: Some(trace.rounds()),
                error: None,
            },
            Err(e) => SweepRow {
                value,
                seed,
                final_test_loss: None,
                final_test_accuracy: None,
                rounds: None,
                error: Some(e.to_string()),
            },
        }
    };
    let rows = par::with_workers(exp.config.workers, || par::map(exp.execution(), &jobs, run_job));
    let points: Vec<SweepPoint> = values
        .iter()
        .enumerate()
        .map(|(i, &value)| {
            let chunk = &rows[i * seeds.len()..(i + 1) * seeds.len()];
            let losses: Vec<f64> = chunk.iter().filter_map(|r| r.final_test_loss).collect();
            let accs: Vec<f64> = chunk.iter().filter_map(|r| r.final_test_accuracy).collect();
            let rounds: Vec<f64> = chunk.iter().filter_map(|r| r.rounds.map(f64::from)).collect();
            let (m, s) = mean_std(&losses);
            SweepPoint {
                value,
                mean_final_test_loss: m,
                std_final_test_loss: s,
                mean_final_test_accuracy: mean_std(&accs).0,
                mean_rounds: mean_std(&rounds).0,
                ok_seeds: losses.len(),
            }
        })
        .collect();
    let best_value = points
        .iter()
        .filter(|p| p.mean_final_test_loss.is_finite())
        .min_by(|a, b| a.mean_final_test_loss.total_cmp(&b.mean_final_test_loss))
        .map(|p| p.value);
    Ok(SweepResult {
        axis,
        rows,
        points,
        best_value,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per `(value, seed)` with the seed-mean columns of its value appended.
pub fn sweep_csv(result: &SweepResult, seeds: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "axis",
        "value",
        "seed",
        "final_test_loss",
        "final_test_accuracy",
        "rounds",
        "error",
        "mean_final_test_loss",
        "std_final_test_loss",
        "mean_final_test_accuracy",
        "mean_rounds",
    ])?;
    for (i, r) in result.rows.iter().enumerate() {
        let p = &result.points[i / seeds.max(1)];
        w.write_record([
            result.axis.to_string(),
            r.value.to_string(),
            r.seed.to_string(),
            opt(r.final_test_loss),
            opt(r.final_test_accuracy),
            r.rounds.map(|x| x.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
            p.mean_final_test_loss.to_string(),
            p.std_final_test_loss.to_string(),
            p.mean_final_test_accuracy.to_string(),
            p.mean_rounds.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::domain(e.to_string()))
}

/// Learning rate and clipping threshold behind the reference divergence panels.
pub const VERIFY_ETA: f64 = 0.1;
pub const VERIFY_CLIP: f64 = 5.0;
pub const VERIFY_SIGMA: f64 = 0.01;
pub const VERIFY_MAX_LAMBDA: u32 = 100;

/// `(q, |D_i|, U)` of the four reference panels.
pub const VERIFY_PANELS: [(f64, usize, usize); 4] = [(0.9, 800, 50), (0.1, 800, 50), (0.9, 400, 50), (0.9, 800, 200)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub panel: usize,
    pub q: f64,
    pub n_samples: usize,
    pub clients: usize,
    pub sigma: f64,
    pub lambda: u32,
    pub sensitivity: f64,
    pub regime_ratio: f64,
    pub log_d10: Option<f64>,
    pub log_d01: Option<f64>,
    pub log_bound: f64,
    /// `log D10 >= log D01 - 1e-9`.
    pub lemma_ok: Option<bool>,
    /// `log bound >= log D10`; `None` outside the validity regime.
    pub bound_ok: Option<bool>,
    pub error: Option<String>,
}

/// Exact moments versus the closed-form bound on the four reference panels.
pub fn verify_accountant(exec: Execution) -> Vec<VerifyRow> {
    let jobs: Vec<(usize, u32)> = (0..VERIFY_PANELS.len())
        .flat_map(|p| (1..=VERIFY_MAX_LAMBDA).map(move |l| (p, l)))
        .collect();
    par::map(exec, &jobs, |&(panel, lambda)| {
        let (q, n, u) = VERIFY_PANELS[panel];
        let dl = 2.0 * VERIFY_ETA * VERIFY_CLIP / n as f64;
        let m = MechanismParams::new(q, VERIFY_SIGMA, dl, lambda).expect("panel parameters are valid");
        let d10 = accountant::log_moment_numeric(&m, Direction::MixtureOverBase);
        let d01 = accountant::log_moment_numeric(&m, Direction::BaseOverMixture);
        let bound = accountant::log_moment_bound(&m);
        let error = match (&d10, &d01) {
            (Err(e), _) | (_, Err(e)) => Some(e.to_string()),
            _ => None,
        };
        let d10 = d10.ok();
        let d01 = d01.ok();
        let in_regime = m.in_regime(REGIME_CUTOFF);
        VerifyRow {
            panel: panel + 1,
            q,
            n_samples: n,
            clients: u,
            sigma: VERIFY_SIGMA,
            lambda,
            sensitivity: dl,
            regime_ratio: m.regime_ratio(),
            log_d10: d10,
            log_d01: d01,
            log_bound: bound,
            lemma_ok: d10.zip(d01).map(|(a, b)| a >= b - 1e-9),
            bound_ok: if in_regime { d10.map(|a| bound >= a) } else { None },
            error,
        }
    })
}

pub fn verify_csv(rows: &[VerifyRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "panel",
        "q",
        "n_samples",
        "U",
        "sigma",
        "lambda",
        "sensitivity",
        "regime_ratio",
        "log_D10",
        "log_D01",
        "log_bound",
        "lemma_ok",
        "bound_ok",
        "error",
    ])?;
    let flag = |b: Option<bool>| b.map(|x| x.to_string()).unwrap_or_else(|| "na".into());
    for r in rows {
        w.write_record([
            r.panel.to_string(),
            r.q.to_string(),
            r.n_samples.to_string(),
            r.clients.to_string(),
            r.sigma.to_string(),
            r.lambda.to_string(),
            r.sensitivity.to_string(),
            r.regime_ratio.to_string(),
            opt(r.log_d10),
            opt(r.log_d01),
            r.log_bound.to_string(),
            flag(r.lemma_ok),
            flag(r.bound_ok),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::domain(e.to_string()))
}

/// `epsilon,delta,q,T,sensitivity,sigma` for every combination.
pub fn calibration_table(
    epsilons: &[f64],
    deltas: &[f64],
    qs: &[f64],
    rounds: &[u32],
    sensitivities: &[f64],
) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epsilon", "delta", "q", "T", "sensitivity", "sigma"])?;
    for &e in epsilons {
        for &d in deltas {
            let b = PrivacyBudget::new(e, d)?;
            for &q in qs {
                for &t in rounds {
                    for &dl in sensitivities {
                        let s = accountant::calibrate_sigma(&b, q, t, dl)?;
                        w.write_record([
                            e.to_string(),
                            d.to_string(),
                            q.to_string(),
                            t.to_string(),
                            dl.to_string(),
                            s.to_string(),
                        ])?;
                    }
                }
            }
        }
    }
    w.into_inner().map_err(|e| Error::domain(e.to_string()))
}

/// `q,sigma,lambda,log_D10,log_D01,log_bound` at a fixed sensitivity.
pub fn lemma_table(qs: &[f64], sigmas: &[f64], lambdas: &[u32], sensitivity: f64, exec: Execution) -> Result<Vec<u8>> {
    let mut jobs = Vec::new();
    for &q in qs {
        for &s in sigmas {
            for &l in lambdas {
                jobs.push(MechanismParams::new(q, s, sensitivity, l)?);
            }
        }
    }
    let rows = par::map(exec, &jobs, |m| -> Result<[String; 6]> {
        Ok([
            m.q().to_string(),
            m.sigma().to_string(),
            m.lambda().to_string(),
            accountant::log_moment_numeric(m, Direction::MixtureOverBase)?.to_string(),
            accountant::log_moment_numeric(m, Direction::BaseOverMixture)?.to_string(),
            accountant::log_moment_bound(m).to_string(),
        ])
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["q", "sigma", "lambda", "log_D10", "log_D01", "log_bound"])?;
    for r in rows {
        w.write_record(r?)?;
    }
    w.into_inner().map_err(|e| Error::domain(e.to_string()))
}

/// Writes the pilot norms (one per line) and returns their median.
pub fn pilot_clip(config: ExperimentConfig, seed: u64, norms_path: &Path) -> Result<PilotResult> {
    let mut config = config.resolved();
    config.clip_c = ClipSetting::Value(1.0);
    let exp = Experiment::prepare(config)?;
    let result = exp.pilot(seed)?;
    let mut text = String::with_capacity(result.norms.len() * 20);
    for n in &result.norms {
        text.push_str(&n.to_string());
        text.push('\n');
    }
    write_atomic(norms_path, text.as_bytes())?;
    Ok(result)
}

/// Reads back a norms file written by [`pilot_clip`].
pub fn read_norms(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                offset: i as u64,
                message: format!("bad norm {l:?}"),
            })
        })
        .collect()
}

/// Provenance label for the configured data source.
pub fn provenance(cfg: &ExperimentConfig) -> Provenance {
    match cfg.data.source {
        DataSource::Synthetic { .. } => Provenance::Synthetic,
        DataSource::Mnist { .. } => Provenance::Mnist,
        DataSource::Csv { .. } => Provenance::Csv,
    }
}
