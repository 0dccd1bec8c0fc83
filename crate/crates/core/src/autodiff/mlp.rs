//! Fully-connected networks: affine map, optional batch normalization, activation.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::params::{ParamId, ParamStore};
use super::tape::{Mode, Tape, Var};
use crate::error::{Error, Result};

/// Logit clamp for the scaled sigmoid so the output stays strictly inside `(0, scale)`.
const SIGMOID_LOGIT_LIMIT: f64 = 30.0;

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Linear,
    /// `scale · sigmoid(z)`, the bounded head used for powers and quantizer inputs.
    ScaledSigmoid(f64),
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Activation {
    pub fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Sigmoid => z.mapv(sigmoid),
            Activation::Tanh => z.mapv(f64::tanh),
            Activation::Linear => z.clone(),
            Activation::ScaledSigmoid(scale) => z.mapv(|v| {
                scale * sigmoid(v.clamp(-SIGMOID_LOGIT_LIMIT, SIGMOID_LOGIT_LIMIT))
            }),
        }
    }

    /// Gradient w.r.t. the pre-activation, expressed through the output `y`.
    pub fn backward(self, y: &Array2<f64>, upstream: &Array2<f64>) -> Array2<f64> {
        let mut dz = upstream.clone();
        match self {
            Activation::Linear => {}
            Activation::Relu => Zip::from(&mut dz).and(y).for_each(|d, &y| {
                if y <= 0.0 {
                    *d = 0.0;
                }
            }),
            Activation::Sigmoid => Zip::from(&mut dz).and(y).for_each(|d, &y| *d *= y * (1.0 - y)),
            Activation::Tanh => Zip::from(&mut dz).and(y).for_each(|d, &y| *d *= 1.0 - y * y),
            Activation::ScaledSigmoid(scale) => {
                Zip::from(&mut dz).and(y).for_each(|d, &y| *d *= y * (1.0 - y / scale))
            }
        }
        dz
    }

    /// Open output interval, if bounded.
    pub fn range(self) -> Option<(f64, f64)> {
        match self {
            Activation::Sigmoid => Some((0.0, 1.0)),
            Activation::Tanh => Some((-1.0, 1.0)),
            Activation::ScaledSigmoid(s) => Some((0.0, s)),
            Activation::Relu | Activation::Linear => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
    pub batch_norm: bool,
    pub bias: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input_width: usize,
    pub layers: Vec<LayerSpec>,
}

impl MlpSpec {
    pub fn new(input_width: usize) -> Self {
        Self {
            input_width,
            layers: Vec::new(),
        }
    }

    pub fn layer(mut self, width: usize, activation: Activation, batch_norm: bool) -> Self {
        self.layers.push(LayerSpec {
            width,
            activation,
            batch_norm,
            bias: !batch_norm,
        });
        self
    }

    /// Drops the bias of the last layer, for heads whose consumer
    /// batch-normalizes an affine map of the output anyway.
    pub fn without_head_bias(mut self) -> Self {
        if let Some(last) = self.layers.last_mut() {
            last.bias = false;
        }
        self
    }

    /// `depth` affine layers in total: `depth - 1` hidden layers of `hidden`
    /// units with batch norm and ReLU, then a `output`-wide head.
    pub fn hidden_then_head(
        input_width: usize,
        depth: usize,
        hidden: usize,
        output: usize,
        head: Activation,
    ) -> Self {
        let mut spec = Self::new(input_width);
        for _ in 1..depth {
            spec = spec.layer(hidden, Activation::Relu, true);
        }
        spec.layer(output, head, false)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(self.input_width, |l| l.width)
    }

    pub fn head(&self) -> Option<Activation> {
        self.layers.last().map(|l| l.activation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 {
            return Err(Error::config("MLP input width must be at least 1"));
        }
        if self.layers.is_empty() {
            return Err(Error::config("MLP needs at least one layer"));
        }
        for (q, layer) in self.layers.iter().enumerate() {
            if layer.width == 0 {
                return Err(Error::config(format!("MLP layer {q} has zero width")));
            }
            if let Activation::ScaledSigmoid(s) = layer.activation {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::config(format!("layer {q}: scaled sigmoid needs scale > 0")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    /// `out × in`
    pub weight: ParamId,
    /// `1 × out`; omitted when batch norm follows (its shift absorbs the bias).
    pub bias: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub epsilon: f64,
    pub momentum: f64,
}

/// A network whose tensors live in a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Mlp {
    name: String,
    spec: MlpSpec,
    dense: Vec<DenseLayer>,
    norms: Vec<Option<BatchNormLayer>>,
}

impl Mlp {
    /// Allocates and initializes parameters: He-normal for ReLU layers,
    /// Xavier-uniform otherwise, zero biases, unit scale and zero shift.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        spec: MlpSpec,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut dense = Vec::with_capacity(spec.layers.len());
        let mut norms = Vec::with_capacity(spec.layers.len());
        let mut fan_in = spec.input_width;
        for (q, layer) in spec.layers.iter().enumerate() {
            let fan_out = layer.width;
            let w = match layer.activation {
                Activation::Relu => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                    Array2::from_shape_simple_fn((fan_out, fan_in), || normal.sample(rng))
                }
                _ => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let uniform = Uniform::new_inclusive(-limit, limit).unwrap();
                    Array2::from_shape_simple_fn((fan_out, fan_in), || uniform.sample(rng))
                }
            };
            let weight = store.add(format!("{name}.w{q}"), w);
            let bias = layer
                .bias
                .then(|| store.add(format!("{name}.b{q}"), Array2::zeros((1, fan_out))));
            dense.push(DenseLayer { weight, bias });
            norms.push(layer.batch_norm.then(|| BatchNormLayer {
                gamma: store.add(format!("{name}.bn{q}.gamma"), Array2::ones((1, fan_out))),
                beta: store.add(format!("{name}.bn{q}.beta"), Array2::zeros((1, fan_out))),
                running_mean: store
                    .add_buffer(format!("{name}.bn{q}.mean"), Array2::zeros((1, fan_out))),
                running_var: store
                    .add_buffer(format!("{name}.bn{q}.var"), Array2::ones((1, fan_out))),
                epsilon: BN_EPSILON,
                momentum: BN_MOMENTUM,
            }));
            fan_in = fan_out;
        }
        Ok(Self {
            name: name.to_string(),
            spec,
            dense,
            norms,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    pub fn dense_layers(&self) -> &[DenseLayer] {
        &self.dense
    }

    pub fn norm_layers(&self) -> &[Option<BatchNormLayer>] {
        &self.norms
    }

    /// Trainable tensor ids in layer order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (d, n) in self.dense.iter().zip(&self.norms) {
            ids.push(d.weight);
            ids.extend(d.bias);
            if let Some(n) = n {
                ids.push(n.gamma);
                ids.push(n.beta);
            }
        }
        ids
    }

    /// Runs the network on the tape. In train mode batch statistics are used
    /// and the running averages in `store` are updated; in eval mode the
    /// running averages are used.
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, input: Var) -> Result<Var> {
        let (_, width) = tape.shape(input);
        if width != self.spec.input_width {
            return Err(Error::config(format!(
                "{}: input width {width}, expected {}",
                self.name, self.spec.input_width
            )));
        }
        let mut h = input;
        for (q, ((layer, dense), norm)) in self
            .spec
            .layers
            .iter()
            .zip(&self.dense)
            .zip(&self.norms)
            .enumerate()
        {
            h = tape.affine(store, h, dense.weight, dense.bias)?;
            if let Some(bn) = norm {
                h = match tape.mode() {
                    Mode::Train => {
                        let (out, mean, var) =
                            tape.batch_norm(store, h, bn.gamma, bn.beta, bn.epsilon, None)?;
                        let n = tape.shape(out).0 as f64;
                        let unbiased = n / (n - 1.0);
                        let m = bn.momentum;
                        Zip::from(store.get_mut(bn.running_mean).row_mut(0))
                            .and(&mean)
                            .for_each(|r, &b| *r = m * *r + (1.0 - m) * b);
                        Zip::from(store.get_mut(bn.running_var).row_mut(0))
                            .and(&var)
                            .for_each(|r, &b| *r = m * *r + (1.0 - m) * b * unbiased);
                        out
                    }
                    Mode::Eval => {
                        let stats = (store.get(bn.running_mean), store.get(bn.running_var));
                        tape.batch_norm(store, h, bn.gamma, bn.beta, bn.epsilon, Some(stats))?
                            .0
                    }
                };
            }
            h = tape.activation(h, layer.activation);
            if !tape.value(h).iter().all(|v| v.is_finite()) {
                return Err(Error::numeric(
                    format!("{} layer {q}", self.name),
                    "non-finite activation",
                ));
            }
        }
        Ok(h)
    }

    /// Convenience: evaluate on a plain matrix in eval mode.
    pub fn predict(&self, store: &mut ParamStore, input: Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.input(input);
        let y = self.forward(&mut tape, store, x)?;
        Ok(tape.value(y).clone())
    }
}
