use log::{debug, info};
use ndarray::Axis;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Mode, ParamStore, Tape, Var};
use crate::env::{sample_batch, utility_node, NetworkState, PowerVector, UtilityKind};
use crate::error::{Error, Result};
use crate::fronthaul::FronthaulModel;
use crate::rng::{self, streams};

/// Inference processes large batches in chunks of this many samples.
pub const EVAL_CHUNK: usize = 4096;

/// Anything that maps a batch of network states to a `batch × N` power tensor
/// through trainable parameters.
pub trait PowerPolicy {
    fn ens(&self) -> usize;
    fn power_budget(&self) -> f64;
    fn utility(&self) -> UtilityKind;
    /// Fronthaul seen in training; ignored by schemes without fronthaul.
    fn train_channel(&self) -> &FronthaulModel;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn forward_powers(
        &mut self,
        tape: &mut Tape,
        batch: &[NetworkState],
        channel: &FronthaulModel,
        rng: &mut dyn RngCore,
    ) -> Result<Var>;

    /// Powers for a batch in eval mode.
    fn powers(&mut self, batch: &[NetworkState], channel: &FronthaulModel, rng: &mut dyn RngCore) -> Result<Vec<PowerVector>> {
        let mut tape = Tape::new(Mode::Eval);
        let x = self.forward_powers(&mut tape, batch, channel, rng)?;
        super::to_power_vectors(tape.value(x), self.power_budget())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// When set, the step size decays geometrically per epoch from
    /// `learning_rate` to this value at the last epoch.
    pub final_learning_rate: Option<f64>,
    pub validation_size: usize,
    pub seed: u64,
    /// Restore the parameters of the best validation epoch at the end.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batches_per_epoch: 50,
            batch_size: 5000,
            learning_rate: 1e-4,
            final_learning_rate: None,
            validation_size: 5000,
            seed: 0,
            keep_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2 for batch norm"));
        }
        if self.validation_size == 0 || self.batches_per_epoch == 0 {
            return Err(Error::config("validation size and batches per epoch must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if let Some(lr) = self.final_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config("final learning rate must be positive"));
            }
        }
        Ok(())
    }
}

impl TrainConfig {
    /// Step size used during `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.final_learning_rate {
            Some(last) if self.epochs > 1 => {
                let t = (epoch.saturating_sub(1)) as f64 / (self.epochs - 1) as f64;
                self.learning_rate * (last / self.learning_rate).powf(t)
            }
            _ => self.learning_rate,
        }
    }
}

/// Mean validation utility before training and after every epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingCurve {
    pub initial: f64,
    pub epochs: Vec<f64>,
    /// 1-based epoch whose parameters were kept; 0 means the initial ones.
    pub best_epoch: usize,
}

impl TrainingCurve {
    pub fn best(&self) -> f64 {
        if self.best_epoch == 0 {
            self.initial
        } else {
            self.epochs[self.best_epoch - 1]
        }
    }

    pub fn last(&self) -> f64 {
        self.epochs.last().copied().unwrap_or(self.initial)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// The held-out states used for per-epoch validation under `seed`.
pub fn validation_batch(n: usize, size: usize, seed: u64) -> Vec<NetworkState> {
    sample_batch(size, n, &mut rng::stream(seed, streams::VALIDATION))
}

/// Minimizes the negative mean utility with Adam on freshly drawn batches,
/// validating after every epoch.
pub fn train<P: PowerPolicy + ?Sized>(policy: &mut P, config: &TrainConfig) -> Result<TrainingCurve> {
    config.validate()?;
    let n = policy.ens();
    let kind = policy.utility();
    let channel = policy.train_channel().clone();
    let validation = validation_batch(n, config.validation_size, config.seed);
    let validate = |policy: &mut P| -> Result<f64> {
        let mut noise = rng::stream(config.seed, streams::EVAL_CHANNEL);
        Ok(evaluate(policy, &validation, &channel, 1, &mut noise)?.mean)
    };

    let mut data_rng = rng::stream(config.seed, streams::TRAIN_DATA);
    let mut channel_rng = rng::stream(config.seed, streams::TRAIN_CHANNEL);
    let mut adam = AdamState::new(policy.params(), config.learning_rate);

    let initial = validate(policy)?;
    let mut best = (initial, 0usize, policy.params().clone());
    let mut epochs = Vec::with_capacity(config.epochs);
    info!("epoch 0: validation utility {initial:.5}");

    for epoch in 1..=config.epochs {
        adam.learning_rate = config.learning_rate_at(epoch);
        let mut running = 0.0;
        for step in 0..config.batches_per_epoch {
            let batch = sample_batch(config.batch_size, n, &mut data_rng);
            let mut tape = Tape::new(Mode::Train);
            let x = policy.forward_powers(&mut tape, &batch, &channel, &mut channel_rng)?;
            let u = utility_node(&mut tape, x, &batch, kind)?;
            let mean_u = tape.mean(u);
            let loss = tape.scale(mean_u, -1.0);
            let value = tape.value(loss)[[0, 0]];
            if !value.is_finite() {
                return Err(Error::numeric(
                    format!("epoch {epoch}, batch {step}"),
                    format!("loss is {value}"),
                ));
            }
            let grads = tape.backward(loss, policy.params())?;
            if !grads.all_finite() {
                return Err(Error::numeric(
                    format!("epoch {epoch}, batch {step}"),
                    "non-finite gradient",
                ));
            }
            adam.step(policy.params_mut(), &grads)?;
            running -= value;
        }
        let v = validate(policy)?;
        epochs.push(v);
        debug!(
            "epoch {epoch}: train utility {:.5}, validation {v:.5}",
            running / config.batches_per_epoch as f64
        );
        if epoch % 10 == 0 || epoch == config.epochs {
            info!("epoch {epoch}: validation utility {v:.5}");
        }
        if v > best.0 {
            best = (v, epoch, policy.params().clone());
        }
    }

    let best_epoch = if config.keep_best {
        policy.params_mut().copy_from(&best.2)?;
        best.1
    } else {
        config.epochs
    };
    Ok(TrainingCurve {
        initial,
        epochs,
        best_epoch,
    })
}

/// Eval-mode powers for any number of states, computed chunk by chunk.
pub fn infer_powers<P: PowerPolicy + ?Sized>(
    policy: &mut P,
    states: &[NetworkState],
    channel: &FronthaulModel,
    rng: &mut dyn RngCore,
) -> Result<Vec<PowerVector>> {
    let mut out = Vec::with_capacity(states.len());
    for chunk in states.chunks(EVAL_CHUNK) {
        out.extend(policy.powers(chunk, channel, rng)?);
    }
    Ok(out)
}

/// Per-sample utilities in eval mode, averaged over `draws` independent
/// channel realizations (one for deterministic channels).
pub fn sample_utilities<P: PowerPolicy + ?Sized>(
    policy: &mut P,
    test_set: &[NetworkState],
    channel: &FronthaulModel,
    draws: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    if test_set.is_empty() {
        return Err(Error::config("empty test set"));
    }
    if draws == 0 {
        return Err(Error::config("draws per sample must be positive"));
    }
    let draws = if channel.is_deterministic() { 1 } else { draws };
    let kind = policy.utility();
    let mut totals = vec![0.0; test_set.len()];
    for _ in 0..draws {
        for (c, chunk) in test_set.chunks(EVAL_CHUNK).enumerate() {
            let mut tape = Tape::new(Mode::Eval);
            let x = policy.forward_powers(&mut tape, chunk, channel, rng)?;
            let powers = tape.value(x);
            for (k, (state, row)) in chunk.iter().zip(powers.axis_iter(Axis(0))).enumerate() {
                let u = crate::env::sum_utility(kind, state, row.as_slice().expect("contiguous rows"));
                totals[c * EVAL_CHUNK + k] += u;
            }
        }
    }
    let per_sample: Vec<f64> = totals.into_iter().map(|t| t / draws as f64).collect();
    if let Some(i) = per_sample.iter().position(|u| !u.is_finite()) {
        return Err(Error::numeric(format!("test sample {i}"), "non-finite utility"));
    }
    Ok(per_sample)
}

/// Mean utility over a test set and its standard error across samples.
pub fn evaluate<P: PowerPolicy + ?Sized>(
    policy: &mut P,
    test_set: &[NetworkState],
    channel: &FronthaulModel,
    draws: usize,
    rng: &mut dyn RngCore,
) -> Result<Evaluation> {
    let values = sample_utilities(policy, test_set, channel, draws, rng)?;
    Ok(summarize(&values))
}

/// Mean and standard error of the mean.
pub fn summarize(values: &[f64]) -> Evaluation {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std_error = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Evaluation {
        mean,
        std_error,
        samples: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fronthaul::ResourcePlan;
    use crate::model::{Architecture, CecilModel, ModelConfig};

    fn tiny(channel: FronthaulModel) -> CecilModel {
        let mut cfg = ModelConfig::new(ResourcePlan::noma(2, 3, 2).unwrap(), channel, UtilityKind::SumRate, 5);
        cfg.architecture = Architecture {
            encoder_depth: 2,
            encoder_hidden: 8,
            cloud_depth: 2,
            cloud_hidden: 8,
            decision_depth: 2,
            decision_hidden: 8,
        };
        CecilModel::new(cfg).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            batches_per_epoch: 10,
            batch_size: 64,
            learning_rate: 1e-2,
            final_learning_rate: None,
            validation_size: 256,
            seed: 3,
            keep_best: true,
        }
    }

    #[test]
    fn training_does_not_lose_validation_utility() {
        let mut m = tiny(FronthaulModel::Perfect);
        let curve = train(&mut m, &quick()).unwrap();
        assert_eq!(curve.epochs.len(), 5);
        assert!(curve.best() >= curve.initial);
        // the kept parameters reproduce the best validation value
        let val = validation_batch(2, 256, 3);
        let e = evaluate(&mut m, &val, &FronthaulModel::Perfect, 1, &mut rng::seeded(0)).unwrap();
        assert!((e.mean - curve.best()).abs() < 1e-12);
    }

    #[test]
    fn training_is_reproducible() {
        let a = train(&mut tiny(FronthaulModel::from_snr_db(5.0)), &quick()).unwrap();
        let b = train(&mut tiny(FronthaulModel::from_snr_db(5.0)), &quick()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut m = tiny(FronthaulModel::Perfect);
        for cfg in [
            TrainConfig { batch_size: 1, ..quick() },
            TrainConfig { learning_rate: 0.0, ..quick() },
            TrainConfig { validation_size: 0, ..quick() },
        ] {
            assert!(matches!(train(&mut m, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn perfect_link_draws_do_not_matter() {
        let mut m = tiny(FronthaulModel::Perfect);
        let set = validation_batch(2, 100, 1);
        let a = evaluate(&mut m, &set, &FronthaulModel::Perfect, 1, &mut rng::seeded(0)).unwrap();
        let b = evaluate(&mut m, &set, &FronthaulModel::Perfect, 7, &mut rng::seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn geometric_learning_rate_schedule() {
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e-2,
            final_learning_rate: Some(1e-4),
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(1), 1e-2);
        assert!((cfg.learning_rate_at(2) - 1e-3).abs() < 1e-15);
        assert!((cfg.learning_rate_at(3) - 1e-4).abs() < 1e-15);
        assert_eq!(TrainConfig::default().learning_rate_at(7), 1e-4);
    }

    #[test]
    fn summary_statistics() {
        let e = summarize(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        // sample std sqrt(5/3), divided by sqrt(4)
        assert!((e.std_error - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(summarize(&[7.0]).std_error, 0.0);
    }
}
