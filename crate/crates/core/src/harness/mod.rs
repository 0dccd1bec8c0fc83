//! Experiment configuration, sweeps, result tables and timing.
//!
//! An [`ExperimentConfig`] names the utility, the network size, the sweep over
//! uplink RBs and fronthaul channels, and which schemes to run. Every sweep
//! point trains (or loads) the learned schemes, evaluates all schemes on one
//! pinned test set and emits one [`ResultRow`] per scheme.

mod checkpoint;
mod results;
mod testset;

pub use checkpoint::{
    read_manifest, CheckpointManifest, PlanManifest, SchemeKind, TrainedPolicy, CHECKPOINT_FORMAT,
    MANIFEST_FILE, PARAMS_FILE,
};
pub use results::{load_results, read_results, save_results, write_results, ResultRow, RESULT_COLUMNS};
pub use testset::{
    generate_test_set, load_test_set, make_test_set, manifest_path, TestSetManifest, TEST_SET_FORMAT,
};

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineArchitecture, IcModel, NcModel, PgdConfig};
use crate::env::{sum_utility, NetworkState, PowerVector, UtilityKind, DEFAULT_POWER_BUDGET, DEFAULT_STATIC_POWER};
use crate::error::{Error, Result};
use crate::fronthaul::{AccessMode, FronthaulModel, ResourcePlan};
use crate::model::{
    self, Architecture, CecilModel, Evaluation, HeadPolicy, ModelConfig, PowerPolicy, TrainConfig, TrainingCurve,
};
use crate::rng::{self, streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilityName {
    Srmax,
    Eemax,
}

/// Fronthaul channels to sweep; every listed entry becomes a sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSweep {
    pub perfect: bool,
    /// Per-RB SNRs in dB for additive-noise links.
    pub snr_db: Vec<f64>,
    /// Bits per RB for finite-capacity links (C = 2^B levels).
    pub bits: Vec<u32>,
    /// `[low, high]`: turns every SNR point into an asymmetric-gain link.
    pub asymmetric_gain: Option<[f64; 2]>,
}

impl Default for ChannelSweep {
    fn default() -> Self {
        Self {
            perfect: true,
            snr_db: Vec::new(),
            bits: Vec::new(),
            asymmetric_gain: None,
        }
    }
}

impl ChannelSweep {
    pub fn points(&self) -> Vec<FronthaulModel> {
        let mut out = Vec::new();
        if self.perfect {
            out.push(FronthaulModel::Perfect);
        }
        for &db in &self.snr_db {
            out.push(match self.asymmetric_gain {
                None => FronthaulModel::from_snr_db(db),
                Some([gain_low, gain_high]) => FronthaulModel::AsymmetricNoisy {
                    variance: crate::fronthaul::snr_db_to_variance(db),
                    gain_low,
                    gain_high,
                },
            });
        }
        out.extend(self.bits.iter().map(|&b| FronthaulModel::from_bits(b)));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeToggles {
    pub cecil: bool,
    /// Also train on clean links and test on the sweep channel.
    pub non_robust: bool,
    pub ic: bool,
    pub nc: bool,
    pub pgd: bool,
    pub max_power: bool,
    pub random_power: bool,
}

impl Default for SchemeToggles {
    fn default() -> Self {
        Self {
            cecil: true,
            non_robust: false,
            ic: false,
            nc: false,
            pgd: false,
            max_power: false,
            random_power: false,
        }
    }
}

fn default_utility() -> UtilityName {
    UtilityName::Srmax
}
fn default_static_power() -> f64 {
    DEFAULT_STATIC_POWER
}
fn default_power_budget() -> f64 {
    DEFAULT_POWER_BUDGET
}
fn default_access() -> Vec<AccessMode> {
    vec![AccessMode::Noma]
}
fn default_test_size() -> usize {
    10_000
}
fn default_one() -> usize {
    1
}
fn default_repeats() -> usize {
    5
}
fn default_ic() -> BaselineArchitecture {
    BaselineArchitecture::IC
}
fn default_nc() -> BaselineArchitecture {
    BaselineArchitecture::NC
}

/// Everything a sweep needs. `seed` seeds model initialization, training
/// batches and evaluation noise; `train.seed` is overridden by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_utility")]
    pub utility: UtilityName,
    #[serde(default = "default_static_power")]
    pub static_power: f64,
    #[serde(default = "default_power_budget")]
    pub power_budget: f64,
    pub n: usize,
    #[serde(default = "default_access")]
    pub access: Vec<AccessMode>,
    /// M_U values to sweep; defaults to `[N(N+1)/2]`.
    #[serde(default)]
    pub uplink: Vec<usize>,
    /// M_D; defaults to N.
    #[serde(default)]
    pub downlink: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default)]
    pub test_seed: u64,
    /// Pinned test set file; generated from `test_seed` when absent.
    #[serde(default)]
    pub test_set: Option<PathBuf>,
    #[serde(default = "default_one")]
    pub draws_per_sample: usize,
    #[serde(default = "default_repeats")]
    pub timing_repeats: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Trained models are saved here and reused when present.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default)]
    pub channel: ChannelSweep,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub schemes: SchemeToggles,
    #[serde(default)]
    pub pgd: PgdConfig,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default = "default_ic")]
    pub ic: BaselineArchitecture,
    #[serde(default = "default_nc")]
    pub nc: BaselineArchitecture,
}

impl ExperimentConfig {
    /// A config with every default and the given network size.
    pub fn new(n: usize) -> Self {
        toml::from_str(&format!("n = {n}")).expect("defaults parse")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn utility_kind(&self) -> UtilityKind {
        match self.utility {
            UtilityName::Srmax => UtilityKind::SumRate,
            UtilityName::Eemax => UtilityKind::EnergyEfficiency {
                static_power: self.static_power,
            },
        }
    }

    pub fn uplink_points(&self) -> Vec<usize> {
        if self.uplink.is_empty() {
            vec![self.n * (self.n + 1) / 2]
        } else {
            self.uplink.clone()
        }
    }

    pub fn downlink_rbs(&self) -> usize {
        self.downlink.unwrap_or(self.n)
    }

    /// Training settings with the experiment seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("n must be at least 1"));
        }
        self.utility_kind().validate()?;
        if !(self.power_budget > 0.0 && self.power_budget.is_finite()) {
            return Err(Error::config("power_budget must be positive"));
        }
        if self.access.is_empty() {
            return Err(Error::config("access list is empty"));
        }
        if self.channel.points().is_empty() {
            return Err(Error::config("channel sweep is empty"));
        }
        for ch in self.channel.points() {
            ch.validate()?;
        }
        if self.test_size == 0 || self.draws_per_sample == 0 || self.timing_repeats == 0 {
            return Err(Error::config("test_size, draws_per_sample and timing_repeats must be positive"));
        }
        for &m_u in &self.uplink_points() {
            for &mode in &self.access {
                ResourcePlan::new(mode, self.n, m_u, self.downlink_rbs())?;
            }
        }
        self.train.validate()?;
        self.pgd.validate()?;
        Ok(())
    }

    fn model_config(&self, plan: ResourcePlan, channel: FronthaulModel, heads: HeadPolicy) -> ModelConfig {
        ModelConfig {
            plan,
            channel,
            utility: self.utility_kind(),
            power_budget: self.power_budget,
            heads,
            architecture: self.architecture,
            tied: false,
            seed: self.seed,
        }
    }
}

/// Training channel and test channel of the non-robust variant, which never
/// sees the impairment during training. `None` for perfect links.
pub fn non_robust_channels(channel: &FronthaulModel) -> Option<(FronthaulModel, FronthaulModel)> {
    match *channel {
        FronthaulModel::Perfect | FronthaulModel::Rounded { .. } => None,
        FronthaulModel::AdditiveNoise { .. } | FronthaulModel::AsymmetricNoisy { .. } => {
            Some((FronthaulModel::AdditiveNoise { variance: 0.0 }, channel.clone()))
        }
        FronthaulModel::Quantized { levels } => Some((FronthaulModel::Perfect, FronthaulModel::Rounded { levels })),
    }
}

/// Builds the non-robust model for a test channel, trained without the
/// impairment. Noisy links keep their tanh heads so that the SNR is defined;
/// finite-capacity links use the plain perfect-link model, whose messages the
/// rounding channel then maps to the nearest level.
pub fn non_robust_config(base: ModelConfig) -> Option<ModelConfig> {
    let (train, _) = non_robust_channels(&base.channel)?;
    let heads = match base.channel {
        FronthaulModel::Quantized { .. } => HeadPolicy::for_channel(&train),
        _ => HeadPolicy::for_channel(&base.channel),
    };
    Some(ModelConfig {
        channel: train,
        heads,
        ..base
    })
}

/// A scheme ready to produce powers for a set of states.
pub enum Scheme<'a> {
    Learned {
        policy: &'a mut dyn PowerPolicy,
        channel: FronthaulModel,
        seed: u64,
    },
    Pgd(PgdConfig, UtilityKind),
    MaxPower(f64),
    RandomPower { budget: f64, seed: u64 },
}

impl Scheme<'_> {
    /// One realization of the powers for every state.
    pub fn powers(&mut self, states: &[NetworkState]) -> Result<Vec<PowerVector>> {
        let n = states.first().map_or(0, NetworkState::size);
        match self {
            Scheme::Learned { policy, channel, seed } => {
                let mut noise = rng::stream(*seed, streams::EVAL_CHANNEL);
                model::infer_powers(*policy, states, channel, &mut noise)
            }
            Scheme::Pgd(cfg, kind) => Ok(baselines::pgd_batch(states, *kind, cfg)?
                .into_iter()
                .map(|s| s.powers)
                .collect()),
            Scheme::MaxPower(budget) => Ok(vec![baselines::max_power_with(n, *budget); states.len()]),
            Scheme::RandomPower { budget, seed } => {
                let mut r = rng::stream(*seed, streams::BASELINE);
                Ok((0..states.len()).map(|_| baselines::random_power_with(n, *budget, &mut r)).collect())
            }
        }
    }

    /// Mean utility and its standard error over `states`.
    pub fn evaluate(&mut self, states: &[NetworkState], kind: UtilityKind, draws: usize) -> Result<Evaluation> {
        match self {
            Scheme::Learned { policy, channel, seed } => {
                let mut noise = rng::stream(*seed, streams::EVAL_CHANNEL);
                model::evaluate(*policy, states, channel, draws, &mut noise)
            }
            Scheme::RandomPower { budget, seed } => {
                let n = states.first().map_or(0, NetworkState::size);
                let mut r = rng::stream(*seed, streams::BASELINE);
                let mut totals = vec![0.0; states.len()];
                for _ in 0..draws {
                    for (t, a) in totals.iter_mut().zip(states) {
                        *t += sum_utility(kind, a, baselines::random_power_with(n, *budget, &mut r).as_slice());
                    }
                }
                let per: Vec<f64> = totals.into_iter().map(|t| t / draws as f64).collect();
                Ok(model::summarize(&per))
            }
            _ => {
                let powers = self.powers(states)?;
                Ok(model::summarize(&baselines::fixed_policy_utilities(states, kind, &powers)))
            }
        }
    }
}

/// Median wall-clock seconds of `repeats` full-set inference runs.
pub fn time_inference(scheme: &mut Scheme, states: &[NetworkState], repeats: usize) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::config("timing needs at least one repeat"));
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let powers = scheme.powers(states)?;
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(powers);
    }
    times.sort_by(f64::total_cmp);
    Ok(if repeats % 2 == 1 {
        times[repeats / 2]
    } else {
        0.5 * (times[repeats / 2 - 1] + times[repeats / 2])
    })
}

/// Loads the config's pinned test set, or generates it from `test_seed`.
pub fn resolve_test_set(cfg: &ExperimentConfig) -> Result<Vec<NetworkState>> {
    match &cfg.test_set {
        Some(path) => {
            let (states, _) = load_test_set(path)?;
            if states[0].size() != cfg.n {
                return Err(Error::config(format!(
                    "test set {} has N = {}, config has N = {}",
                    path.display(),
                    states[0].size(),
                    cfg.n
                )));
            }
            Ok(states)
        }
        None => Ok(generate_test_set(cfg.n, cfg.test_size, cfg.test_seed)),
    }
}

/// Trains `fresh`, or loads it from `dir/name` when a checkpoint is there.
/// A stored checkpoint whose manifest differs from `fresh`'s is an error.
/// The curve is `None` for a loaded model.
pub fn train_or_load(
    fresh: TrainedPolicy,
    train: &TrainConfig,
    dir: Option<&Path>,
    name: &str,
) -> Result<(TrainedPolicy, Option<TrainingCurve>)> {
    let path = dir.map(|d| d.join(name));
    if let Some(path) = &path {
        if path.join(MANIFEST_FILE).exists() {
            let stored = read_manifest(path)?;
            if stored != fresh.manifest() {
                return Err(Error::config(format!(
                    "checkpoint {} does not match the configured model",
                    path.display()
                )));
            }
            info!("loading {}", path.display());
            return Ok((TrainedPolicy::load(path)?, None));
        }
    }
    let mut model = fresh;
    info!("training {name}");
    let curve = model::train(model.policy_mut(), train)?;
    if let Some(path) = &path {
        model.save(path)?;
    }
    Ok((model, Some(curve)))
}

fn checkpoint_name(scheme: &str, m_u: usize, m_d: usize, channel: &FronthaulModel) -> String {
    let ch: String = channel
        .descriptor()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{scheme}_mu{m_u}_md{m_d}_{ch}")
}

/// A learned model the sweep needs, before training.
pub struct LearnedJob {
    /// Value of the `scheme` column.
    pub label: String,
    /// Directory name under the checkpoint dir.
    pub checkpoint: String,
    /// Channel the model is evaluated on.
    pub test_channel: FronthaulModel,
    pub fresh: TrainedPolicy,
}

/// CECIL models (and non-robust variants) at one sweep point, in row order.
fn cecil_jobs(cfg: &ExperimentConfig, m_u: usize, channel: &FronthaulModel) -> Result<Vec<LearnedJob>> {
    let m_d = cfg.downlink_rbs();
    let mut jobs = Vec::new();
    for &mode in &cfg.access {
        let plan = ResourcePlan::new(mode, cfg.n, m_u, m_d)?;
        let base = cfg.model_config(plan, channel.clone(), HeadPolicy::for_channel(channel));
        let label = format!("cecil-{}", mode.label());
        if cfg.schemes.cecil {
            jobs.push(LearnedJob {
                checkpoint: checkpoint_name(&label, m_u, m_d, channel),
                label: label.clone(),
                test_channel: channel.clone(),
                fresh: TrainedPolicy::Cecil(CecilModel::new(base.clone())?),
            });
        }
        if cfg.schemes.non_robust {
            if let (Some(nr), Some((_, test))) = (non_robust_config(base), non_robust_channels(channel)) {
                // a model that is the plain model of its training channel is
                // stored under that name, so every test channel shares it
                let checkpoint = if nr.heads == HeadPolicy::for_channel(&nr.channel) {
                    checkpoint_name(&label, m_u, m_d, &nr.channel)
                } else {
                    checkpoint_name(&format!("{label}-nonrobust"), m_u, m_d, channel)
                };
                let label = format!("{label}-nonrobust");
                jobs.push(LearnedJob {
                    checkpoint,
                    label,
                    test_channel: test,
                    fresh: TrainedPolicy::Cecil(CecilModel::new(nr)?),
                });
            }
        }
    }
    Ok(jobs)
}

/// The IC or NC network; both see perfect channel knowledge and no fronthaul.
fn baseline_job(cfg: &ExperimentConfig, label: &str) -> Result<LearnedJob> {
    let kind = cfg.utility_kind();
    let fresh = if label == "ic" {
        TrainedPolicy::Ic(IcModel::with_budget(cfg.n, kind, cfg.ic, cfg.power_budget, cfg.seed)?)
    } else {
        TrainedPolicy::Nc(NcModel::with_budget(cfg.n, kind, cfg.nc, cfg.power_budget, cfg.seed)?)
    };
    Ok(LearnedJob {
        label: label.to_string(),
        checkpoint: label.to_string(),
        test_channel: FronthaulModel::Perfect,
        fresh,
    })
}

/// Every learned model of the sweep, each once.
pub fn learned_jobs(cfg: &ExperimentConfig) -> Result<Vec<LearnedJob>> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for m_u in cfg.uplink_points() {
        for channel in cfg.channel.points() {
            jobs.extend(cecil_jobs(cfg, m_u, &channel)?);
        }
    }
    for (label, enabled) in [("ic", cfg.schemes.ic), ("nc", cfg.schemes.nc)] {
        if enabled {
            jobs.push(baseline_job(cfg, label)?);
        }
    }
    Ok(jobs)
}

/// Trains (or loads) every learned model of the sweep into `checkpoint_dir`.
/// Returns the checkpoint names with the curves of the models trained now.
pub fn train_models(cfg: &ExperimentConfig) -> Result<Vec<(String, Option<TrainingCurve>)>> {
    let dir = cfg
        .checkpoint_dir
        .as_deref()
        .ok_or_else(|| Error::config("training needs checkpoint_dir"))?;
    let train = cfg.train_config();
    let mut out = Vec::new();
    for job in learned_jobs(cfg)? {
        let (_, curve) = train_or_load(job.fresh, &train, Some(dir), &job.checkpoint)?;
        out.push((job.checkpoint, curve));
    }
    Ok(out)
}

/// Median full-test-set inference time of every enabled scheme at the first
/// sweep point, training or loading learned models as needed.
pub fn time_schemes(cfg: &ExperimentConfig) -> Result<Vec<(String, f64)>> {
    cfg.validate()?;
    let states = resolve_test_set(cfg)?;
    let train = cfg.train_config();
    let dir = cfg.checkpoint_dir.as_deref();
    let m_u = cfg.uplink_points()[0];
    let channel = cfg.channel.points()[0].clone();
    let mut jobs = cecil_jobs(cfg, m_u, &channel)?;
    for (label, enabled) in [("ic", cfg.schemes.ic), ("nc", cfg.schemes.nc)] {
        if enabled {
            jobs.push(baseline_job(cfg, label)?);
        }
    }
    let mut out = Vec::new();
    for job in jobs {
        let (mut model, _) = train_or_load(job.fresh, &train, dir, &job.checkpoint)?;
        let mut scheme = Scheme::Learned {
            policy: model.policy_mut(),
            channel: job.test_channel,
            seed: cfg.seed,
        };
        out.push((job.label, time_inference(&mut scheme, &states, cfg.timing_repeats)?));
    }
    let pgd = PgdConfig {
        power_budget: cfg.power_budget,
        ..cfg.pgd.clone()
    };
    let fixed = [
        ("pgd", cfg.schemes.pgd, Scheme::Pgd(pgd, cfg.utility_kind())),
        ("max-power", cfg.schemes.max_power, Scheme::MaxPower(cfg.power_budget)),
        (
            "random-power",
            cfg.schemes.random_power,
            Scheme::RandomPower {
                budget: cfg.power_budget,
                seed: cfg.seed,
            },
        ),
    ];
    for (label, enabled, mut scheme) in fixed {
        if enabled {
            out.push((label.to_string(), time_inference(&mut scheme, &states, cfg.timing_repeats)?));
        }
    }
    Ok(out)
}

struct Measured {
    eval: Evaluation,
    runtime: f64,
}

/// Runs every enabled scheme at every sweep point. Rows come out in sweep
/// order: for each M_U, for each channel, the CECIL variants per access mode
/// and then the baselines. Writes `cfg.output` when set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let kind = cfg.utility_kind();
    let states = resolve_test_set(cfg)?;
    let train = cfg.train_config();
    let dir = cfg.checkpoint_dir.as_deref();
    let m_d = cfg.downlink_rbs();
    let draws = cfg.draws_per_sample;
    let mut rows = Vec::new();
    let mut baseline_cache: HashMap<&'static str, Measured> = HashMap::new();

    let row = |scheme: &str, m_u: usize, channel: &FronthaulModel, m: &Measured| ResultRow {
        scheme: scheme.to_string(),
        n: cfg.n,
        m_u,
        m_d,
        channel: channel.descriptor(),
        mean_utility: m.eval.mean,
        std_error: m.eval.std_error,
        runtime_s: m.runtime,
        seed: cfg.seed,
    };
    let measure = |scheme: &mut Scheme| -> Result<Measured> {
        let eval = scheme.evaluate(&states, kind, draws)?;
        let runtime = time_inference(scheme, &states, cfg.timing_repeats)?;
        Ok(Measured { eval, runtime })
    };
    let measure_job = |job: LearnedJob| -> Result<Measured> {
        let (mut model, _) = train_or_load(job.fresh, &train, dir, &job.checkpoint)?;
        measure(&mut Scheme::Learned {
            policy: model.policy_mut(),
            channel: job.test_channel,
            seed: cfg.seed,
        })
    };

    for m_u in cfg.uplink_points() {
        for channel in cfg.channel.points() {
            for job in cecil_jobs(cfg, m_u, &channel)? {
                let label = job.label.clone();
                let m = measure_job(job)?;
                rows.push(row(&label, m_u, &channel, &m));
            }

            let toggles = [
                ("ic", cfg.schemes.ic),
                ("nc", cfg.schemes.nc),
                ("pgd", cfg.schemes.pgd),
                ("max-power", cfg.schemes.max_power),
                ("random-power", cfg.schemes.random_power),
            ];
            for (label, enabled) in toggles {
                if !enabled {
                    continue;
                }
                if !baseline_cache.contains_key(label) {
                    let measured = match label {
                        "ic" | "nc" => measure_job(baseline_job(cfg, label)?)?,
                        "pgd" => {
                            let pgd = PgdConfig {
                                power_budget: cfg.power_budget,
                                ..cfg.pgd.clone()
                            };
                            measure(&mut Scheme::Pgd(pgd, kind))?
                        }
                        "max-power" => measure(&mut Scheme::MaxPower(cfg.power_budget))?,
                        _ => measure(&mut Scheme::RandomPower {
                            budget: cfg.power_budget,
                            seed: cfg.seed,
                        })?,
                    };
                    baseline_cache.insert(label, measured);
                }
                rows.push(row(label, m_u, &channel, &baseline_cache[label]));
            }
        }
    }

    if let Some(path) = &cfg.output {
        save_results(path, &rows)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_experiment_protocol() {
        let cfg = ExperimentConfig::new(5);
        assert_eq!(cfg.utility_kind(), UtilityKind::SumRate);
        assert_eq!(cfg.power_budget, 10.0);
        assert_eq!(cfg.test_size, 10_000);
        assert_eq!(cfg.uplink_points(), vec![15]);
        assert_eq!(cfg.downlink_rbs(), 5);
        assert_eq!(cfg.train.batch_size, 5000);
        assert_eq!(cfg.train.batches_per_epoch, 50);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.ic, BaselineArchitecture::IC);
        assert_eq!(cfg.architecture, Architecture::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_fail_with_their_name() {
        let err = ExperimentConfig::from_toml("n = 3\nepocs = 4\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("epocs"), "{err}");
        let err = ExperimentConfig::from_toml("n = 3\n[train]\nbatchsize = 4\n").unwrap_err();
        assert!(err.to_string().contains("batchsize"), "{err}");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "n = 0",
            "n = 3\naccess = []",
            "n = 3\n[channel]\nperfect = false",
            "n = 3\naccess = [\"oma\"]\nuplink = [2]",
            "n = 3\n[channel]\nbits = [0]",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn channel_points_in_order() {
        let sweep = ChannelSweep {
            perfect: true,
            snr_db: vec![0.0, 10.0],
            bits: vec![2],
            asymmetric_gain: None,
        };
        let names: Vec<String> = sweep.points().iter().map(FronthaulModel::descriptor).collect();
        assert_eq!(names, ["perfect", "snr=0dB", "snr=10dB", "B=2"]);
        let asym = ChannelSweep {
            perfect: false,
            snr_db: vec![20.0],
            bits: vec![],
            asymmetric_gain: Some([0.1, 1.0]),
        };
        assert!(matches!(asym.points()[0], FronthaulModel::AsymmetricNoisy { .. }));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = ExperimentConfig::new(4);
        cfg.channel.snr_db = vec![0.0, 15.0];
        cfg.schemes.pgd = true;
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn non_robust_variants() {
        let (train, test) = non_robust_channels(&FronthaulModel::from_bits(2)).unwrap();
        assert_eq!(train, FronthaulModel::Perfect);
        assert_eq!(test, FronthaulModel::Rounded { levels: 4 });
        let (train, test) = non_robust_channels(&FronthaulModel::from_snr_db(0.0)).unwrap();
        assert_eq!(train.noise_variance(), 0.0);
        assert_eq!(test, FronthaulModel::from_snr_db(0.0));
        assert!(non_robust_channels(&FronthaulModel::Perfect).is_none());
    }

    #[test]
    fn non_robust_models_share_checkpoints() {
        let mut cfg = ExperimentConfig::new(2);
        cfg.channel.snr_db = vec![0.0, 15.0];
        cfg.channel.bits = vec![2, 3];
        cfg.schemes.non_robust = true;
        let jobs = learned_jobs(&cfg).unwrap();
        let name = |label: &str, ch: &FronthaulModel| {
            jobs.iter()
                .find(|j| j.label == label && j.test_channel == *ch)
                .map(|j| j.checkpoint.clone())
                .unwrap()
        };
        let perfect = name("cecil-noma", &FronthaulModel::Perfect);
        // the finite-capacity variant is the perfect-link model itself
        for levels in [4, 8] {
            assert_eq!(name("cecil-noma-nonrobust", &FronthaulModel::Rounded { levels }), perfect);
        }
        let noisy_0 = name("cecil-noma-nonrobust", &FronthaulModel::from_snr_db(0.0));
        let noisy_15 = name("cecil-noma-nonrobust", &FronthaulModel::from_snr_db(15.0));
        assert_eq!(noisy_0, noisy_15);
        assert_ne!(noisy_0, perfect);
    }

    #[test]
    fn median_timing() {
        let states = generate_test_set(2, 10, 0);
        let t = time_inference(&mut Scheme::MaxPower(10.0), &states, 3).unwrap();
        assert!(t >= 0.0);
        assert!(time_inference(&mut Scheme::MaxPower(10.0), &states, 0).is_err());
    }

    #[test]
    fn checkpoint_names_are_path_safe() {
        let name = checkpoint_name("cecil-noma", 15, 5, &FronthaulModel::from_snr_db(-3.0));
        assert_eq!(name, "cecil-noma_mu15_md5_snr_-3dB");
    }
}
