//! Fronthaul links between the ENs and the cloud.
//!
//! One resource block (RB) carries one real scalar. Under OMA each EN owns a
//! disjoint bundle of RBs and the cloud sees the concatenation; under NOMA all
//! ENs transmit on the same `M_U` RBs and the cloud sees their superposition,
//! while the downlink is a common `M_D`-long multicast.
//!
//! Every function comes in two flavours: plain vectors for single messages and
//! tape nodes for batched training, where noise, gains and quantization draws
//! are treated as constants of the draw on the backward pass.

use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradRule, Mode, Tape, Var};
use crate::error::{Error, Result};

/// Slack allowed on quantizer inputs before the out-of-range warning fires.
pub const QUANTIZER_TOLERANCE: f64 = 1e-9;

pub type MessageVector = Array1<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessMode {
    Oma,
    Noma,
}

impl AccessMode {
    pub fn label(self) -> &'static str {
        match self {
            AccessMode::Oma => "oma",
            AccessMode::Noma => "noma",
        }
    }
}

/// Fronthaul RB budget. For NOMA the per-EN splits are all equal to the totals.
#[derive(Clone, Debug, PartialEq)]
pub struct ResourcePlan {
    mode: AccessMode,
    uplink_split: Vec<usize>,
    downlink_split: Vec<usize>,
    uplink_total: usize,
    downlink_total: usize,
}

/// `total` RBs spread over `parts` ENs, remainder to the lowest indices.
fn even_split(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

impl ResourcePlan {
    pub fn noma(ens: usize, uplink: usize, downlink: usize) -> Result<Self> {
        if ens == 0 || uplink == 0 || downlink == 0 {
            return Err(Error::config("NOMA plan needs N, M_U, M_D >= 1"));
        }
        Ok(Self {
            mode: AccessMode::Noma,
            uplink_split: vec![uplink; ens],
            downlink_split: vec![downlink; ens],
            uplink_total: uplink,
            downlink_total: downlink,
        })
    }

    /// OMA with the totals spread as evenly as possible.
    pub fn oma(ens: usize, uplink: usize, downlink: usize) -> Result<Self> {
        if ens == 0 {
            return Err(Error::config("OMA plan needs N >= 1"));
        }
        if uplink < ens || downlink < ens {
            return Err(Error::config(format!(
                "OMA needs at least one RB per EN: M_U={uplink}, M_D={downlink}, N={ens}"
            )));
        }
        Self::oma_with_splits(even_split(uplink, ens), even_split(downlink, ens))
    }

    pub fn oma_with_splits(uplink: Vec<usize>, downlink: Vec<usize>) -> Result<Self> {
        if uplink.is_empty() || uplink.len() != downlink.len() {
            return Err(Error::config("OMA splits must be non-empty and cover the same ENs"));
        }
        if uplink.iter().chain(&downlink).any(|&m| m == 0) {
            return Err(Error::config("every OMA split needs at least one RB"));
        }
        Ok(Self {
            mode: AccessMode::Oma,
            uplink_total: uplink.iter().sum(),
            downlink_total: downlink.iter().sum(),
            uplink_split: uplink,
            downlink_split: downlink,
        })
    }

    pub fn new(mode: AccessMode, ens: usize, uplink: usize, downlink: usize) -> Result<Self> {
        match mode {
            AccessMode::Oma => Self::oma(ens, uplink, downlink),
            AccessMode::Noma => Self::noma(ens, uplink, downlink),
        }
    }

    pub fn mode(&self) -> AccessMode {
        self.mode
    }

    pub fn ens(&self) -> usize {
        self.uplink_split.len()
    }

    /// M_U
    pub fn uplink_total(&self) -> usize {
        self.uplink_total
    }

    /// M_D
    pub fn downlink_total(&self) -> usize {
        self.downlink_total
    }

    /// M = M_U + M_D
    pub fn total(&self) -> usize {
        self.uplink_total + self.downlink_total
    }

    /// Length of EN `i`'s uplink message (M_{i0}).
    pub fn uplink_len(&self, i: usize) -> usize {
        self.uplink_split[i]
    }

    /// Length of what EN `i` receives on the downlink (M_{0i} or M_D).
    pub fn downlink_len(&self, i: usize) -> usize {
        self.downlink_split[i]
    }

    /// Width of the signal the cloud receives.
    pub fn cloud_input_width(&self) -> usize {
        self.uplink_total
    }

    /// Width of the cloud's output, before per-EN slicing under OMA.
    pub fn cloud_output_width(&self) -> usize {
        self.downlink_total
    }

    /// Start of EN `i`'s slice of the cloud output (always 0 under NOMA).
    pub fn downlink_offset(&self, i: usize) -> usize {
        match self.mode {
            AccessMode::Noma => 0,
            AccessMode::Oma => self.downlink_split[..i].iter().sum(),
        }
    }
}

/// Transfer function of a fronthaul link, applied identically up and down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FronthaulModel {
    Perfect,
    /// `v + η`, `η ~ N(0, σ² I)` per RB.
    AdditiveNoise { variance: f64 },
    /// `g ∘ v + η` with `g_k ~ U[gain_low, gain_high]` drawn per element and use.
    AsymmetricNoisy {
        variance: f64,
        gain_low: f64,
        gain_high: f64,
    },
    /// `C`-level capacity: messages are stochastically quantized at the
    /// transmitter; the link itself is then lossless.
    Quantized { levels: u32 },
    /// Nearest-integer rounding channel with `C` levels and no training-time
    /// quantizer; used to test models trained on perfect links.
    Rounded { levels: u32 },
}

impl FronthaulModel {
    /// Additive noise at a per-RB SNR in dB (σ² = 10^(−dB/10)).
    pub fn from_snr_db(snr_db: f64) -> Self {
        FronthaulModel::AdditiveNoise {
            variance: snr_db_to_variance(snr_db),
        }
    }

    /// `B`-bit quantized links (C = 2^B).
    pub fn from_bits(bits: u32) -> Self {
        FronthaulModel::Quantized { levels: 1 << bits }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            FronthaulModel::Perfect => Ok(()),
            FronthaulModel::AdditiveNoise { variance } => check_variance(variance),
            FronthaulModel::AsymmetricNoisy {
                variance,
                gain_low,
                gain_high,
            } => {
                check_variance(variance)?;
                if !(gain_low > 0.0 && gain_low <= gain_high && gain_high.is_finite()) {
                    return Err(Error::config(format!(
                        "asymmetric gains need 0 < low <= high, got [{gain_low}, {gain_high}]"
                    )));
                }
                Ok(())
            }
            FronthaulModel::Quantized { levels } | FronthaulModel::Rounded { levels } => {
                if levels < 2 {
                    return Err(Error::config(format!("quantizer needs C >= 2, got {levels}")));
                }
                Ok(())
            }
        }
    }

    pub fn noise_variance(&self) -> f64 {
        match *self {
            FronthaulModel::AdditiveNoise { variance }
            | FronthaulModel::AsymmetricNoisy { variance, .. } => variance,
            _ => 0.0,
        }
    }

    /// True when repeated uses of the link give identical outputs.
    pub fn is_deterministic(&self) -> bool {
        match *self {
            FronthaulModel::Perfect | FronthaulModel::Rounded { .. } => true,
            FronthaulModel::AdditiveNoise { variance } => variance == 0.0,
            FronthaulModel::AsymmetricNoisy {
                variance,
                gain_low,
                gain_high,
            } => variance == 0.0 && gain_low == gain_high,
            FronthaulModel::Quantized { .. } => false,
        }
    }

    /// Quantization alphabet size, if the link is finite-capacity.
    pub fn levels(&self) -> Option<u32> {
        match *self {
            FronthaulModel::Quantized { levels } | FronthaulModel::Rounded { levels } => Some(levels),
            _ => None,
        }
    }

    /// Short label used in result tables, e.g. `perfect`, `snr=0dB`, `B=3`.
    pub fn descriptor(&self) -> String {
        match *self {
            FronthaulModel::Perfect => "perfect".into(),
            FronthaulModel::AdditiveNoise { variance } => {
                format!("snr={}dB", fmt_db(variance_to_snr_db(variance)))
            }
            FronthaulModel::AsymmetricNoisy {
                variance,
                gain_low,
                gain_high,
            } => format!(
                "snr={}dB,gain=[{gain_low},{gain_high}]",
                fmt_db(variance_to_snr_db(variance))
            ),
            FronthaulModel::Quantized { levels } => format!("B={}", bits_label(levels)),
            FronthaulModel::Rounded { levels } => format!("B={},rounded", bits_label(levels)),
        }
    }
}

impl std::str::FromStr for FronthaulModel {
    type Err = Error;

    /// Inverse of [`FronthaulModel::descriptor`] for power-of-two alphabets.
    fn from_str(text: &str) -> Result<Self> {
        let bad = || Error::config(format!("unrecognized channel {text:?} (try perfect, snr=5dB, B=3)"));
        let text = text.trim();
        if text == "perfect" {
            return Ok(FronthaulModel::Perfect);
        }
        let model = if let Some(rest) = text.strip_prefix("B=") {
            let (bits, rounded) = match rest.strip_suffix(",rounded") {
                Some(b) => (b, true),
                None => (rest, false),
            };
            let bits: u32 = bits.parse().map_err(|_| bad())?;
            if !(1..32).contains(&bits) {
                return Err(bad());
            }
            let levels = 1 << bits;
            if rounded {
                FronthaulModel::Rounded { levels }
            } else {
                FronthaulModel::Quantized { levels }
            }
        } else if let Some(rest) = text.strip_prefix("snr=") {
            let (db, gains) = match rest.split_once(",gain=") {
                Some((db, g)) => (db, Some(g)),
                None => (rest, None),
            };
            let db: f64 = db.strip_suffix("dB").ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let variance = snr_db_to_variance(db);
            match gains {
                None => FronthaulModel::AdditiveNoise { variance },
                Some(g) => {
                    let inner = g.strip_prefix('[').and_then(|g| g.strip_suffix(']')).ok_or_else(bad)?;
                    let (lo, hi) = inner.split_once(',').ok_or_else(bad)?;
                    FronthaulModel::AsymmetricNoisy {
                        variance,
                        gain_low: lo.trim().parse().map_err(|_| bad())?,
                        gain_high: hi.trim().parse().map_err(|_| bad())?,
                    }
                }
            }
        } else {
            return Err(bad());
        };
        model.validate()?;
        Ok(model)
    }
}

fn bits_label(levels: u32) -> String {
    if levels.is_power_of_two() {
        levels.trailing_zeros().to_string()
    } else {
        format!("log2({levels})")
    }
}

fn fmt_db(db: f64) -> String {
    if db.is_infinite() {
        "inf".into()
    } else {
        // `+ 0.0` turns −0 into 0
        let r = (db * 1e6).round() / 1e6 + 0.0;
        format!("{r}")
    }
}

fn check_variance(variance: f64) -> Result<()> {
    if variance >= 0.0 && variance.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("noise variance must be >= 0, got {variance}")))
    }
}

pub fn snr_db_to_variance(snr_db: f64) -> f64 {
    1.0 / 10f64.powf(snr_db / 10.0)
}

pub fn variance_to_snr_db(variance: f64) -> f64 {
    -10.0 * variance.log10()
}

static QUANTIZER_WARNED: AtomicBool = AtomicBool::new(false);

/// Randomized rounding of `m ∈ [0, C−1]` to one of its two neighbouring
/// integers, rounding up with probability equal to the fractional part, so
/// that the output is an unbiased estimate of `m`. Consumes exactly one
/// uniform draw.
pub fn quantize<R: Rng + ?Sized>(m: f64, levels: u32, rng: &mut R) -> u32 {
    let top = f64::from(levels - 1);
    let u: f64 = rng.random();
    let m = if (0.0..=top).contains(&m) {
        m
    } else {
        if !(m >= -QUANTIZER_TOLERANCE && m <= top + QUANTIZER_TOLERANCE)
            && !QUANTIZER_WARNED.swap(true, Ordering::Relaxed)
        {
            log::warn!("quantizer input {m} outside [0, {top}]; clamping");
        }
        if m.is_nan() {
            0.0
        } else {
            m.clamp(0.0, top)
        }
    };
    let floor = m.floor();
    let up = u < m - floor;
    (floor as u32 + u32::from(up)).min(levels - 1)
}

/// Elementwise [`quantize`] with per-element alphabet sizes.
pub fn quantize_vector<R: Rng + ?Sized>(m: &MessageVector, levels: &[u32], rng: &mut R) -> Result<Vec<u32>> {
    if levels.len() != m.len() {
        return Err(Error::config(format!(
            "{} quantization levels for a message of length {}",
            levels.len(),
            m.len()
        )));
    }
    Ok(m.iter().zip(levels).map(|(&v, &c)| quantize(v, c, rng)).collect())
}

/// Stochastic quantization of a batch of messages with straight-through
/// backward (the Jacobian is recorded as the identity).
pub fn quantize_node<R: Rng + ?Sized>(tape: &mut Tape, messages: Var, levels: u32, rng: &mut R) -> Result<Var> {
    let q = tape.value(messages).mapv(|v| f64::from(quantize(v, levels, rng)));
    tape.custom(messages, q, GradRule::Identity)
}

/// Transmitter-side distortion of one link: the asymmetric gain, or rounding.
fn transmit_node<R: Rng + ?Sized>(tape: &mut Tape, x: Var, model: &FronthaulModel, rng: &mut R) -> Result<Var> {
    match *model {
        FronthaulModel::AsymmetricNoisy {
            gain_low, gain_high, ..
        } => {
            let dist = Uniform::new_inclusive(gain_low, gain_high)
                .map_err(|e| Error::config(format!("gain range: {e}")))?;
            let gains = Array2::from_shape_simple_fn(tape.shape(x), || dist.sample(rng));
            let y = tape.value(x) * &gains;
            tape.custom(x, y, GradRule::Hadamard(gains))
        }
        FronthaulModel::Rounded { levels } => {
            let top = f64::from(levels - 1);
            let y = tape.value(x).mapv(|v| v.round().clamp(0.0, top));
            tape.custom(x, y, GradRule::Identity)
        }
        _ => Ok(x),
    }
}

/// Receiver-side additive noise of one link.
fn receive_node<R: Rng + ?Sized>(tape: &mut Tape, x: Var, model: &FronthaulModel, rng: &mut R) -> Result<Var> {
    let variance = model.noise_variance();
    if variance == 0.0 {
        return Ok(x);
    }
    let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::config(format!("noise: {e}")))?;
    let noise = Array2::from_shape_simple_fn(tape.shape(x), || normal.sample(rng));
    let y = tape.value(x) + &noise;
    tape.custom(x, y, GradRule::Identity)
}

/// `h(v)` for a batch of messages.
pub fn channel_node<R: Rng + ?Sized>(tape: &mut Tape, x: Var, model: &FronthaulModel, rng: &mut R) -> Result<Var> {
    let tx = transmit_node(tape, x, model, rng)?;
    receive_node(tape, tx, model, rng)
}

/// The cloud's received signal `y₀` for a batch: concatenation of the
/// channel outputs under OMA; superposition plus one receiver-noise draw under NOMA.
pub fn uplink_node<R: Rng + ?Sized>(
    tape: &mut Tape,
    messages: &[Var],
    plan: &ResourcePlan,
    model: &FronthaulModel,
    rng: &mut R,
) -> Result<Var> {
    if messages.len() != plan.ens() {
        return Err(Error::config(format!(
            "{} uplink messages for {} ENs",
            messages.len(),
            plan.ens()
        )));
    }
    for (i, m) in messages.iter().enumerate() {
        let width = tape.shape(*m).1;
        if width != plan.uplink_len(i) {
            return Err(Error::config(format!(
                "EN {i} uplink message has length {width}, plan allots {}",
                plan.uplink_len(i)
            )));
        }
    }
    let transmitted = messages
        .iter()
        .map(|m| transmit_node(tape, *m, model, rng))
        .collect::<Result<Vec<_>>>()?;
    let combined = match plan.mode() {
        AccessMode::Oma => tape.concat(&transmitted)?,
        AccessMode::Noma => tape.sum(&transmitted)?,
    };
    receive_node(tape, combined, model, rng)
}

/// What EN `i` receives from the cloud output: its OMA slice or the NOMA
/// multicast, through an independent downlink channel draw.
pub fn downlink_node<R: Rng + ?Sized>(
    tape: &mut Tape,
    cloud_out: Var,
    plan: &ResourcePlan,
    model: &FronthaulModel,
    rng: &mut R,
    i: usize,
) -> Result<Var> {
    if i >= plan.ens() {
        return Err(Error::Index {
            index: i,
            size: plan.ens(),
        });
    }
    let width = tape.shape(cloud_out).1;
    if width != plan.downlink_total() {
        return Err(Error::config(format!(
            "cloud output has length {width}, plan has M_D = {}",
            plan.downlink_total()
        )));
    }
    let part = match plan.mode() {
        AccessMode::Noma => cloud_out,
        AccessMode::Oma => tape.slice(cloud_out, plan.downlink_offset(i), plan.downlink_len(i))?,
    };
    channel_node(tape, part, model, rng)
}

fn row(v: &MessageVector) -> Array2<f64> {
    v.clone().insert_axis(Axis(0))
}

fn single<R: Rng + ?Sized>(
    f: impl FnOnce(&mut Tape, &mut R) -> Result<Var>,
    rng: &mut R,
) -> Result<MessageVector> {
    let mut tape = Tape::new(Mode::Eval);
    let out = f(&mut tape, rng)?;
    Ok(tape.value(out).row(0).to_owned())
}

/// `h(v)` for a single message.
pub fn apply_channel<R: Rng + ?Sized>(v: &MessageVector, model: &FronthaulModel, rng: &mut R) -> MessageVector {
    single(
        |tape, rng| {
            let x = tape.input(row(v));
            channel_node(tape, x, model, rng)
        },
        rng,
    )
    .expect("channel application preserves shape")
}

/// `y₀` for one set of uplink messages.
pub fn uplink_combine<R: Rng + ?Sized>(
    messages: &[MessageVector],
    plan: &ResourcePlan,
    model: &FronthaulModel,
    rng: &mut R,
) -> Result<MessageVector> {
    single(
        |tape, rng| {
            let vars: Vec<Var> = messages.iter().map(|m| tape.input(row(m))).collect();
            uplink_node(tape, &vars, plan, model, rng)
        },
        rng,
    )
}

/// `yᵢ` for one cloud output.
pub fn downlink_dispatch<R: Rng + ?Sized>(
    cloud_out: &MessageVector,
    plan: &ResourcePlan,
    model: &FronthaulModel,
    rng: &mut R,
    i: usize,
) -> Result<MessageVector> {
    single(
        |tape, rng| {
            let x = tape.input(row(cloud_out));
            downlink_node(tape, x, plan, model, rng, i)
        },
        rng,
    )
}
