//! The three-stage cooperative model: per-EN uplink encoders, a cloud network
//! relaying between uplink and downlink, and per-EN decision networks that map
//! `local observation ⊕ received downlink` to a transmit power.

mod train;

pub use train::{
    evaluate, infer_powers, sample_utilities, summarize, train, validation_batch, Evaluation,
    PowerPolicy, TrainConfig, TrainingCurve, EVAL_CHUNK,
};

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Mlp, MlpSpec, Mode, ParamStore, Tape, Var};
use crate::env::{NetworkState, PowerVector, UtilityKind, DEFAULT_POWER_BUDGET};
use crate::error::{Error, Result};
use crate::fronthaul::{self, FronthaulModel, ResourcePlan};
use crate::rng::{self, streams};

/// Depths count affine layers (hidden layers plus the output layer).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub encoder_depth: usize,
    pub encoder_hidden: usize,
    pub cloud_depth: usize,
    pub cloud_hidden: usize,
    pub decision_depth: usize,
    pub decision_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            encoder_depth: 3,
            encoder_hidden: 50,
            cloud_depth: 5,
            cloud_hidden: 100,
            decision_depth: 3,
            decision_hidden: 50,
        }
    }
}

/// Output activation of a message-generating network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MessageHead {
    /// Unbounded real messages (perfect links).
    Linear,
    /// Entries in `[−1, 1]`: unit peak power per RB on noisy links.
    Tanh,
    /// Entries in `(0, levels − 1)`, the quantizer's input range.
    Bounded { levels: u32 },
}

impl MessageHead {
    pub fn activation(self) -> Activation {
        match self {
            MessageHead::Linear => Activation::Linear,
            MessageHead::Tanh => Activation::Tanh,
            MessageHead::Bounded { levels } => Activation::ScaledSigmoid(f64::from(levels - 1)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadPolicy {
    pub uplink: MessageHead,
    pub downlink: MessageHead,
}

impl HeadPolicy {
    /// The head each channel regime calls for.
    pub fn for_channel(channel: &FronthaulModel) -> Self {
        let head = match *channel {
            FronthaulModel::Perfect => MessageHead::Linear,
            FronthaulModel::AdditiveNoise { .. } | FronthaulModel::AsymmetricNoisy { .. } => MessageHead::Tanh,
            FronthaulModel::Quantized { levels } | FronthaulModel::Rounded { levels } => {
                MessageHead::Bounded { levels }
            }
        };
        Self {
            uplink: head,
            downlink: head,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub plan: ResourcePlan,
    /// Channel seen during training (and by default during evaluation).
    pub channel: FronthaulModel,
    pub utility: UtilityKind,
    pub power_budget: f64,
    pub heads: HeadPolicy,
    pub architecture: Architecture,
    /// Share one encoder and one decision network across all ENs. Each EN then
    /// reads its observation in EN-relative order (own direct gain first).
    pub tied: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(plan: ResourcePlan, channel: FronthaulModel, utility: UtilityKind, seed: u64) -> Self {
        let heads = HeadPolicy::for_channel(&channel);
        Self {
            plan,
            channel,
            utility,
            power_budget: DEFAULT_POWER_BUDGET,
            heads,
            architecture: Architecture::default(),
            tied: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.utility.validate()?;
        if !(self.power_budget > 0.0 && self.power_budget.is_finite()) {
            return Err(Error::config("power budget must be positive"));
        }
        check_quantizer_head(&self.channel, self.heads)?;
        if self.tied {
            let n = self.plan.ens();
            if (0..n).any(|i| self.plan.uplink_len(i) != self.plan.uplink_len(0))
                || (0..n).any(|i| self.plan.downlink_len(i) != self.plan.downlink_len(0))
            {
                return Err(Error::config("tied parameters need identical per-EN RB counts"));
            }
        }
        Ok(())
    }
}

/// The stochastic quantizer requires heads bounded to exactly its input
/// range. Rounding clamps, so it accepts any head.
fn check_quantizer_head(channel: &FronthaulModel, heads: HeadPolicy) -> Result<()> {
    if let FronthaulModel::Quantized { levels } = *channel {
        let want = MessageHead::Bounded { levels };
        if heads.uplink != want || heads.downlink != want {
            return Err(Error::config(format!(
                "channel {} needs message heads bounded to [0, {}], got {:?}",
                channel.descriptor(),
                levels - 1,
                heads
            )));
        }
    }
    Ok(())
}

/// `batch × N` matrix of EN `i`'s observations; in relative order entry `k`
/// is the gain from EN `(i + k) mod N`.
pub(crate) fn observation_matrix(batch: &[NetworkState], i: usize, relative: bool) -> Array2<f64> {
    let n = batch.first().map_or(0, NetworkState::size);
    Array2::from_shape_fn((batch.len(), n), |(b, k)| {
        let from = if relative { (i + k) % n } else { k };
        batch[b].gain(from, i)
    })
}

/// Full `batch × N²` row-major gain matrices.
pub(crate) fn global_matrix(batch: &[NetworkState]) -> Array2<f64> {
    let n = batch.first().map_or(0, NetworkState::size);
    let mut out = Array2::zeros((batch.len(), n * n));
    for (b, state) in batch.iter().enumerate() {
        out.row_mut(b)
            .assign(&state.gains().view().into_shape_with_order(n * n).expect("contiguous"));
    }
    out
}

pub(crate) fn check_batch(batch: &[NetworkState], n: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::config("empty channel batch"));
    }
    if let Some(s) = batch.iter().find(|s| s.size() != n) {
        return Err(Error::config(format!("state of size {} for a model with N = {n}", s.size())));
    }
    Ok(())
}

/// Splits a `batch × N` power tensor into power vectors.
pub(crate) fn to_power_vectors(powers: &Array2<f64>, budget: f64) -> Result<Vec<PowerVector>> {
    powers
        .axis_iter(Axis(0))
        .map(|row| PowerVector::new(row.to_vec(), budget))
        .collect()
}

/// Frozen quantization draws: the first forward after freezing records each
/// quantizer's offset `q − m`, later forwards add the recorded offsets instead
/// of drawing, so the pipeline is differentiable with the straight-through
/// Jacobian being exact.
#[derive(Clone, Debug, Default)]
enum QuantizerFreeze {
    #[default]
    Off,
    Record(Vec<Array2<f64>>),
    Replay(Vec<Array2<f64>>),
}

#[derive(Clone, Debug)]
pub struct CecilModel {
    config: ModelConfig,
    store: ParamStore,
    encoders: Vec<Mlp>,
    cloud: Mlp,
    decisions: Vec<Mlp>,
    freeze: QuantizerFreeze,
}

impl CecilModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let plan = &config.plan;
        let n = plan.ens();
        let arch = config.architecture;
        let mut store = ParamStore::new();
        let mut rng = rng::stream(config.seed, streams::INIT);

        let shared = if config.tied { 1 } else { n };
        // a linear message only ever enters the receiver's first affine map,
        // whose batch norm cancels any constant offset
        let trim = |spec: MlpSpec, head: MessageHead, receiver_depth: usize| {
            if head == MessageHead::Linear && receiver_depth >= 2 {
                spec.without_head_bias()
            } else {
                spec
            }
        };
        let mut encoders = Vec::with_capacity(shared);
        for i in 0..shared {
            let spec = MlpSpec::hidden_then_head(
                n,
                arch.encoder_depth,
                arch.encoder_hidden,
                plan.uplink_len(i),
                config.heads.uplink.activation(),
            );
            let spec = trim(spec, config.heads.uplink, arch.cloud_depth);
            encoders.push(Mlp::new(&format!("encoder{i}"), spec, &mut store, &mut rng)?);
        }
        let cloud_spec = MlpSpec::hidden_then_head(
            plan.cloud_input_width(),
            arch.cloud_depth,
            arch.cloud_hidden,
            plan.cloud_output_width(),
            config.heads.downlink.activation(),
        );
        let cloud_spec = trim(cloud_spec, config.heads.downlink, arch.decision_depth);
        let cloud = Mlp::new("cloud", cloud_spec, &mut store, &mut rng)?;
        let mut decisions = Vec::with_capacity(shared);
        for i in 0..shared {
            let spec = MlpSpec::hidden_then_head(
                n + plan.downlink_len(i),
                arch.decision_depth,
                arch.decision_hidden,
                1,
                Activation::ScaledSigmoid(config.power_budget),
            );
            decisions.push(Mlp::new(&format!("decision{i}"), spec, &mut store, &mut rng)?);
        }
        Ok(Self {
            config,
            store,
            encoders,
            cloud,
            decisions,
            freeze: QuantizerFreeze::Off,
        })
    }

    /// Record quantization offsets on the next forward and replay them on
    /// every forward after that, until [`CecilModel::unfreeze_quantization`].
    pub fn freeze_quantization(&mut self) {
        self.freeze = QuantizerFreeze::Record(Vec::new());
    }

    pub fn unfreeze_quantization(&mut self) {
        self.freeze = QuantizerFreeze::Off;
    }

    fn quantize<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        m: Var,
        levels: u32,
        site: usize,
        rng: &mut R,
    ) -> Result<Var> {
        match &mut self.freeze {
            QuantizerFreeze::Off => fronthaul::quantize_node(tape, m, levels, rng),
            QuantizerFreeze::Record(offsets) => {
                let q = fronthaul::quantize_node(tape, m, levels, rng)?;
                offsets.push(tape.value(q) - tape.value(m));
                Ok(q)
            }
            QuantizerFreeze::Replay(offsets) => {
                let offset = offsets
                    .get(site)
                    .filter(|o| o.dim() == tape.shape(m))
                    .ok_or_else(|| Error::usage("frozen quantization offsets do not match this batch"))?;
                let value = tape.value(m) + offset;
                tape.custom(m, value, crate::autodiff::GradRule::Identity)
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &ResourcePlan {
        &self.config.plan
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self, i: usize) -> &Mlp {
        &self.encoders[if self.config.tied { 0 } else { i }]
    }

    pub fn cloud(&self) -> &Mlp {
        &self.cloud
    }

    pub fn decision(&self, i: usize) -> &Mlp {
        &self.decisions[if self.config.tied { 0 } else { i }]
    }

    /// Records the full pipeline for a batch and returns the `batch × N` powers.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        batch: &[NetworkState],
        channel: &FronthaulModel,
        rng: &mut R,
    ) -> Result<Var> {
        let n = self.config.plan.ens();
        check_batch(batch, n)?;
        channel.validate()?;
        check_quantizer_head(channel, self.config.heads)?;
        let quantize_levels = match *channel {
            FronthaulModel::Quantized { levels } => Some(levels),
            _ => None,
        };
        let tied = self.config.tied;
        let plan = self.config.plan.clone();
        let plan = &plan;
        let mut site = 0;

        let observations: Vec<Var> = (0..n)
            .map(|i| tape.input(observation_matrix(batch, i, tied)))
            .collect();

        // 1. uplink messages
        let mut messages = Vec::with_capacity(n);
        for (i, obs) in observations.iter().enumerate() {
            let enc = &self.encoders[if tied { 0 } else { i }];
            let mut m = enc.forward(tape, &mut self.store, *obs)?;
            if let Some(levels) = quantize_levels {
                m = self.quantize(tape, m, levels, site, rng)?;
                site += 1;
            }
            messages.push(m);
        }
        let received = fronthaul::uplink_node(tape, &messages, plan, channel, rng)?;

        // 2. cloud relay
        let mut cloud_out = self.cloud.forward(tape, &mut self.store, received)?;
        if let Some(levels) = quantize_levels {
            cloud_out = self.quantize(tape, cloud_out, levels, site, rng)?;
        }
        if let QuantizerFreeze::Record(offsets) = &mut self.freeze {
            self.freeze = QuantizerFreeze::Replay(std::mem::take(offsets));
        }

        // 3. distributed decisions
        let mut powers = Vec::with_capacity(n);
        for (i, obs) in observations.iter().enumerate() {
            let y = fronthaul::downlink_node(tape, cloud_out, plan, channel, rng, i)?;
            let input = tape.concat(&[*obs, y])?;
            let dec = &self.decisions[if tied { 0 } else { i }];
            powers.push(dec.forward(tape, &mut self.store, input)?);
        }
        tape.concat(&powers)
    }

    /// Runs the model on a batch with its training channel.
    pub fn infer<R: Rng + ?Sized>(
        &mut self,
        batch: &[NetworkState],
        rng: &mut R,
        mode: Mode,
    ) -> Result<Vec<PowerVector>> {
        let channel = self.config.channel.clone();
        let mut tape = Tape::new(mode);
        let powers = self.forward(&mut tape, batch, &channel, rng)?;
        to_power_vectors(tape.value(powers), self.config.power_budget)
    }

    /// A copy whose EN `i` runs what EN `perm[i]` ran here, with input columns
    /// re-indexed so that on the correspondingly permuted network state it
    /// computes the same function. Requires untied parameters.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.config.plan.ens();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..n).collect::<Vec<_>>() {
            return Err(Error::config(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        if self.config.tied {
            return Err(Error::config("permuted copies are defined for untied models"));
        }
        for i in 0..n {
            let j = perm[i];
            if self.config.plan.uplink_len(i) != self.config.plan.uplink_len(j)
                || self.config.plan.downlink_len(i) != self.config.plan.downlink_len(j)
            {
                return Err(Error::config("permutation must preserve per-EN RB counts"));
            }
        }
        let mut out = self.clone();
        for i in 0..n {
            let j = perm[i];
            for (dst, src) in [
                (&out.encoders[i], &self.encoders[j]),
                (&out.decisions[i], &self.decisions[j]),
            ] {
                copy_network(&mut out.store, dst, &self.store, src, perm)?;
            }
        }
        Ok(out)
    }
}

/// Copies all tensors of `src` into `dst`, permuting the first `perm.len()`
/// input columns of the first layer.
fn copy_network(
    dst_store: &mut ParamStore,
    dst: &Mlp,
    src_store: &ParamStore,
    src: &Mlp,
    perm: &[usize],
) -> Result<()> {
    if dst.spec() != src.spec() {
        return Err(Error::config("networks differ in shape"));
    }
    for (q, (d, s)) in dst.dense_layers().iter().zip(src.dense_layers()).enumerate() {
        let w = src_store.get(s.weight);
        let mut w_new = w.clone();
        if q == 0 {
            for (col, &p) in perm.iter().enumerate() {
                w_new.column_mut(col).assign(&w.column(p));
            }
        }
        dst_store.get_mut(d.weight).assign(&w_new);
        if let (Some(db), Some(sb)) = (d.bias, s.bias) {
            let v = src_store.get(sb).clone();
            dst_store.get_mut(db).assign(&v);
        }
    }
    for (d, s) in dst.norm_layers().iter().zip(src.norm_layers()) {
        if let (Some(d), Some(s)) = (d, s) {
            for (a, b) in [
                (d.gamma, s.gamma),
                (d.beta, s.beta),
                (d.running_mean, s.running_mean),
                (d.running_var, s.running_var),
            ] {
                let v = src_store.get(b).clone();
                dst_store.get_mut(a).assign(&v);
            }
        }
    }
    Ok(())
}

impl PowerPolicy for CecilModel {
    fn ens(&self) -> usize {
        self.config.plan.ens()
    }

    fn power_budget(&self) -> f64 {
        self.config.power_budget
    }

    fn utility(&self) -> UtilityKind {
        self.config.utility
    }

    fn train_channel(&self) -> &FronthaulModel {
        &self.config.channel
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward_powers(
        &mut self,
        tape: &mut Tape,
        batch: &[NetworkState],
        channel: &FronthaulModel,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Var> {
        self.forward(tape, batch, channel, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::sample_batch;
    use crate::rng::seeded;

    fn small_arch() -> Architecture {
        Architecture {
            encoder_depth: 2,
            encoder_hidden: 6,
            cloud_depth: 2,
            cloud_hidden: 8,
            decision_depth: 2,
            decision_hidden: 6,
        }
    }

    fn model(plan: ResourcePlan, channel: FronthaulModel) -> CecilModel {
        let mut cfg = ModelConfig::new(plan, channel, UtilityKind::SumRate, 17);
        cfg.architecture = small_arch();
        CecilModel::new(cfg).unwrap()
    }

    #[test]
    fn untrained_powers_lie_strictly_inside_budget() {
        let mut m = model(ResourcePlan::noma(3, 4, 2).unwrap(), FronthaulModel::Perfect);
        let batch = sample_batch(64, 3, &mut seeded(1));
        for mode in [Mode::Train, Mode::Eval] {
            let powers = m.infer(&batch, &mut seeded(2), mode).unwrap();
            assert_eq!(powers.len(), 64);
            assert!(powers.iter().flat_map(|p| p.as_slice()).all(|&x| x > 0.0 && x < 10.0));
        }
    }

    #[test]
    fn eval_mode_on_perfect_links_is_deterministic() {
        let mut m = model(ResourcePlan::oma(3, 6, 3).unwrap(), FronthaulModel::Perfect);
        let batch = sample_batch(16, 3, &mut seeded(1));
        let a = m.infer(&batch, &mut seeded(2), Mode::Eval).unwrap();
        let b = m.infer(&batch, &mut seeded(99), Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cloud_input_width_follows_the_plan() {
        let oma = model(ResourcePlan::oma(3, 9, 3).unwrap(), FronthaulModel::Perfect);
        assert_eq!(oma.cloud().input_width(), 9);
        assert_eq!(oma.encoder(1).output_width(), 3);
        assert_eq!(oma.decision(2).input_width(), 3 + 1);
        let noma = model(ResourcePlan::noma(3, 4, 3).unwrap(), FronthaulModel::Perfect);
        assert_eq!(noma.cloud().input_width(), 4);
        assert_eq!(noma.encoder(1).output_width(), 4);
        assert_eq!(noma.decision(2).input_width(), 3 + 3);
    }

    #[test]
    fn wrong_state_size_is_config_error() {
        let mut m = model(ResourcePlan::noma(3, 4, 2).unwrap(), FronthaulModel::Perfect);
        let batch = sample_batch(4, 2, &mut seeded(1));
        assert!(matches!(m.infer(&batch, &mut seeded(2), Mode::Eval), Err(Error::Config(_))));
    }

    #[test]
    fn quantized_channel_needs_bounded_heads() {
        let mut cfg = ModelConfig::new(
            ResourcePlan::noma(2, 2, 2).unwrap(),
            FronthaulModel::Quantized { levels: 4 },
            UtilityKind::SumRate,
            0,
        );
        cfg.heads = HeadPolicy::for_channel(&FronthaulModel::Perfect);
        assert!(CecilModel::new(cfg).is_err());
    }

    #[test]
    fn noma_permutation_equivariance() {
        let n = 4;
        let mut m = model(ResourcePlan::noma(n, 5, 3).unwrap(), FronthaulModel::Perfect);
        // make batch-norm running statistics non-trivial
        let warm = sample_batch(32, n, &mut seeded(3));
        m.infer(&warm, &mut seeded(4), Mode::Train).unwrap();

        let perm = [2, 0, 3, 1];
        let mut p = m.permuted(&perm).unwrap();
        let batch = sample_batch(20, n, &mut seeded(5));
        let permuted_batch: Vec<NetworkState> = batch
            .iter()
            .map(|s| {
                let g = Array2::from_shape_fn((n, n), |(j, i)| s.gain(perm[j], perm[i]));
                NetworkState::new(g).unwrap()
            })
            .collect();
        let x = m.infer(&batch, &mut seeded(0), Mode::Eval).unwrap();
        let y = p.infer(&permuted_batch, &mut seeded(0), Mode::Eval).unwrap();
        for (xs, ys) in x.iter().zip(&y) {
            for i in 0..n {
                let (a, b) = (ys.as_slice()[i], xs.as_slice()[perm[i]]);
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn tied_noma_utility_invariant_under_cyclic_relabelling() {
        let n = 4;
        let mut cfg = ModelConfig::new(
            ResourcePlan::noma(n, 5, 3).unwrap(),
            FronthaulModel::Perfect,
            UtilityKind::SumRate,
            8,
        );
        cfg.architecture = small_arch();
        cfg.tied = true;
        let mut m = CecilModel::new(cfg).unwrap();
        let warm = sample_batch(32, n, &mut seeded(3));
        m.infer(&warm, &mut seeded(4), Mode::Train).unwrap();

        let batch = sample_batch(20, n, &mut seeded(6));
        let x = m.infer(&batch, &mut seeded(0), Mode::Eval).unwrap();
        for shift in 1..n {
            let rotated: Vec<NetworkState> = batch
                .iter()
                .map(|s| NetworkState::new(Array2::from_shape_fn((n, n), |(j, i)| s.gain((j + shift) % n, (i + shift) % n))).unwrap())
                .collect();
            let y = m.infer(&rotated, &mut seeded(0), Mode::Eval).unwrap();
            for b in 0..batch.len() {
                let u = crate::env::sum_utility(UtilityKind::SumRate, &batch[b], x[b].as_slice());
                let v = crate::env::sum_utility(UtilityKind::SumRate, &rotated[b], y[b].as_slice());
                assert!((u - v).abs() < 1e-9, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn permuted_rejects_non_permutations() {
        let m = model(ResourcePlan::noma(3, 4, 2).unwrap(), FronthaulModel::Perfect);
        assert!(m.permuted(&[0, 0, 1]).is_err());
        assert!(m.permuted(&[0, 1]).is_err());
    }

    #[test]
    fn observation_orders() {
        let s = NetworkState::new(Array2::from_shape_fn((3, 3), |(j, i)| (10 * j + i) as f64)).unwrap();
        let abs = observation_matrix(std::slice::from_ref(&s), 1, false);
        assert_eq!(abs.row(0).to_vec(), vec![1.0, 11.0, 21.0]);
        let rel = observation_matrix(std::slice::from_ref(&s), 1, true);
        assert_eq!(rel.row(0).to_vec(), vec![11.0, 21.0, 1.0]);
    }
}
