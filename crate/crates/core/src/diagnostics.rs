//! Self-checks behind the `quantizer-selftest` and `gradcheck` commands.

use ndarray::Array2;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{
    grad_check, Activation, GradCheckOptions, GradCheckReport, Mlp, MlpSpec, Mode, ParamId, ParamStore, Stencil, Tape,
    Var,
};
use crate::baselines::{BaselineArchitecture, IcModel, NcModel};
use crate::env::{sample_batch, utility_node, UtilityKind};
use crate::error::{Error, Result};
use crate::fronthaul::{self, FronthaulModel, ResourcePlan};
use crate::model::{Architecture, CecilModel, ModelConfig, PowerPolicy};
use crate::rng::{self, streams};

/// Monte-Carlo mean of the quantizer at one input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizerCheck {
    pub levels: u32,
    pub input: f64,
    pub mean: f64,
    pub std_error: f64,
}

impl QuantizerCheck {
    /// Distance from the input in standard errors (0 when both are exact).
    pub fn z_score(&self) -> f64 {
        let gap = (self.mean - self.input).abs();
        if gap == 0.0 {
            0.0
        } else {
            gap / self.std_error
        }
    }

    pub fn passes(&self, max_z: f64) -> bool {
        self.z_score() <= max_z
    }
}

/// For each alphabet size, `grid` evenly spaced inputs over `[0, C − 1]`
/// quantized `draws` times each.
pub fn quantizer_selftest(levels: &[u32], grid: usize, draws: usize, seed: u64) -> Vec<QuantizerCheck> {
    let mut rng = rng::seeded(seed);
    let mut out = Vec::with_capacity(levels.len() * grid);
    for &c in levels {
        let top = f64::from(c - 1);
        for k in 0..grid {
            let m = if grid == 1 { 0.0 } else { top * k as f64 / (grid - 1) as f64 };
            let (mut sum, mut sq) = (0.0, 0.0);
            for _ in 0..draws {
                let q = f64::from(fronthaul::quantize(m, c, &mut rng));
                sum += q;
                sq += q * q;
            }
            let d = draws as f64;
            let mean = sum / d;
            let var = ((sq - d * mean * mean) / (d - 1.0)).max(0.0);
            out.push(QuantizerCheck {
                levels: c,
                input: m,
                mean,
                std_error: (var / d).sqrt(),
            });
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub name: String,
    pub report: GradCheckReport,
}

const LAYER_BATCH: usize = 8;

/// Test points with a ReLU input closer than this to zero are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: u64 = 1000;

/// First `attempt` whose forward pass keeps every ReLU input at least
/// [`KINK_MARGIN`] from zero.
fn away_from_kinks(mut forward: impl FnMut(u64) -> Result<Tape>) -> Result<u64> {
    for attempt in 0..MAX_REDRAWS {
        if forward(attempt)?.relu_margin() >= KINK_MARGIN {
            return Ok(attempt);
        }
    }
    Err(Error::numeric(
        "gradcheck",
        format!("no test point within {MAX_REDRAWS} draws keeps ReLU inputs {KINK_MARGIN} away from zero"),
    ))
}

/// One layer of each kind, checked on `−mean tanh(output)`.
fn layer_case(name: &str, spec: MlpSpec, seed: u64, options: &GradCheckOptions) -> Result<GradCheckCase> {
    let mut store = ParamStore::new();
    let mlp = Mlp::new("probe", spec.clone(), &mut store, &mut rng::stream(seed, streams::INIT))?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let input_for = |attempt: u64| {
        let mut data = rng::stream(seed.wrapping_add(attempt), streams::TRAIN_DATA);
        Array2::from_shape_simple_fn((LAYER_BATCH, spec.input_width), || normal.sample(&mut data))
    };
    let loss = |s: &mut ParamStore, input: &Array2<f64>| -> Result<(Tape, Var)> {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.input(input.clone());
        let y = mlp.forward(&mut tape, s, x)?;
        let t = tape.activation(y, Activation::Tanh);
        let m = tape.mean(t);
        let loss = tape.scale(m, -1.0);
        Ok((tape, loss))
    };
    let attempt = away_from_kinks(|a| Ok(loss(&mut store.clone(), &input_for(a))?.0))?;
    let input = input_for(attempt);
    let params = mlp.param_ids();
    let report = grad_check(&mut store, &params, |s| loss(s, &input), options)?;
    Ok(GradCheckCase {
        name: name.to_string(),
        report,
    })
}

/// Checks the training loss `−mean utility` of a whole policy with every
/// stochastic draw frozen. `refreeze` resets any draws the policy records on
/// its first forward pass.
fn policy_case<P: PowerPolicy>(
    name: &str,
    policy: &mut P,
    refreeze: fn(&mut P),
    channel: &FronthaulModel,
    batch_size: usize,
    seed: u64,
    options: &GradCheckOptions,
) -> Result<GradCheckCase> {
    let n = policy.ens();
    let kind = policy.utility();
    let loss = |policy: &mut P, attempt: u64| -> Result<(Tape, Var)> {
        let data_seed = seed.wrapping_add(attempt);
        let batch = sample_batch(batch_size, n, &mut rng::stream(data_seed, streams::TRAIN_DATA));
        let mut tape = Tape::new(Mode::Train);
        // the same stream on every call freezes noise and gain draws
        let mut draws = rng::stream(data_seed, streams::TRAIN_CHANNEL);
        let x = policy.forward_powers(&mut tape, &batch, channel, &mut draws)?;
        let u = utility_node(&mut tape, x, &batch, kind)?;
        let m = tape.mean(u);
        let loss = tape.scale(m, -1.0);
        Ok((tape, loss))
    };
    let initial = policy.params().clone();
    let attempt = away_from_kinks(|a| {
        refreeze(policy);
        let tape = loss(policy, a)?.0;
        // batch norm running statistics moved; put them back
        policy.params_mut().copy_from(&initial)?;
        Ok(tape)
    })?;
    refreeze(policy);
    let mut store = initial;
    let params: Vec<ParamId> = store.trainable_ids().collect();
    let report = grad_check(
        &mut store,
        &params,
        |s| {
            policy.params_mut().copy_from(s)?;
            loss(policy, attempt)
        },
        options,
    )?;
    Ok(GradCheckCase {
        name: name.to_string(),
        report,
    })
}

fn small_architecture() -> Architecture {
    Architecture {
        encoder_depth: 3,
        encoder_hidden: 6,
        cloud_depth: 3,
        cloud_hidden: 8,
        decision_depth: 3,
        decision_hidden: 6,
    }
}

/// Every layer type, and the full cooperative pipeline under each channel
/// model and access mode, plus the IC and NC networks.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckCase>> {
    gradcheck_suite_with(seed, &suite_options())
}

/// Five-point differences at `h = 1e-4`. Three-point differences at
/// `h = 1e-6` carry ~1e-11 of round-off, which swamps the 1e-4 relative
/// tolerance on the ~1e-7 gradients deep inside the pipeline; `2h` stays
/// well inside [`KINK_MARGIN`].
pub fn suite_options() -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-4,
        stencil: Stencil::FivePoint,
        max_entries_per_tensor: None,
    }
}

pub fn gradcheck_suite_with(seed: u64, options: &GradCheckOptions) -> Result<Vec<GradCheckCase>> {
    let mut cases = Vec::new();
    let layers = [
        ("linear", Activation::Linear, false),
        ("relu+batchnorm", Activation::Relu, true),
        ("relu", Activation::Relu, false),
        ("sigmoid", Activation::Sigmoid, false),
        ("tanh", Activation::Tanh, false),
        ("scaled-sigmoid", Activation::ScaledSigmoid(10.0), false),
        ("tanh+batchnorm", Activation::Tanh, true),
    ];
    for (name, act, bn) in layers {
        cases.push(layer_case(&format!("layer {name}"), MlpSpec::new(5).layer(4, act, bn), seed, options)?);
    }
    cases.push(layer_case(
        "mlp relu+batchnorm x2, scaled-sigmoid head",
        MlpSpec::hidden_then_head(4, 3, 6, 2, Activation::ScaledSigmoid(10.0)),
        seed,
        options,
    )?);

    let n = 3;
    let pipelines = [
        ("noma", FronthaulModel::Perfect),
        ("oma", FronthaulModel::Perfect),
        ("noma", FronthaulModel::from_snr_db(5.0)),
        ("oma", FronthaulModel::from_snr_db(5.0)),
        (
            "noma",
            FronthaulModel::AsymmetricNoisy {
                variance: 0.1,
                gain_low: 0.1,
                gain_high: 1.0,
            },
        ),
        ("noma", FronthaulModel::from_bits(2)),
        ("oma", FronthaulModel::from_bits(3)),
    ];
    for (mode, channel) in pipelines {
        let plan = if mode == "noma" {
            ResourcePlan::noma(n, 4, 2)?
        } else {
            ResourcePlan::oma(n, 5, 3)?
        };
        for kind in [UtilityKind::SumRate, UtilityKind::energy_efficiency()] {
            let mut cfg = ModelConfig::new(plan.clone(), channel.clone(), kind, seed);
            cfg.architecture = small_architecture();
            let mut model = CecilModel::new(cfg)?;
            let name = format!("cecil {mode} {} {}", channel.descriptor(), kind.label());
            cases.push(policy_case(&name, &mut model, CecilModel::freeze_quantization, &channel, 6, seed, options)?);
        }
    }

    let arch = BaselineArchitecture { depth: 4, hidden: 6 };
    let mut ic = IcModel::new(n, UtilityKind::SumRate, arch, seed)?;
    cases.push(policy_case("ic", &mut ic, |_| {}, &FronthaulModel::Perfect, 6, seed, options)?);
    let mut nc = NcModel::new(n, UtilityKind::SumRate, arch, seed)?;
    cases.push(policy_case("nc", &mut nc, |_| {}, &FronthaulModel::Perfect, 6, seed, options)?);
    Ok(cases)
}
