//! Reverse-mode tape over dense `batch × features` matrices.
//!
//! Every node keeps its forward value; parameter tensors are referenced by
//! [`ParamId`] and read from the [`ParamStore`] at forward and backward time,
//! so the tape itself never copies weights.

use ndarray::{s, Array1, Array2, Axis, Zip};

use super::mlp::Activation;
use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Backward rule for a custom-gradient node: maps the upstream gradient to the
/// gradient with respect to the node's single input.
pub enum GradRule {
    /// Pass the upstream gradient through unchanged (straight-through).
    Identity,
    /// Multiply elementwise by a fixed matrix of the input's shape.
    Hadamard(Array2<f64>),
    /// Arbitrary rule.
    Map(Box<dyn Fn(&Array2<f64>) -> Array2<f64>>),
}

enum Op {
    Input,
    Affine {
        input: Var,
        weight: ParamId,
        bias: Option<ParamId>,
    },
    BatchNorm {
        input: Var,
        gamma: ParamId,
        beta: ParamId,
        normalized: Array2<f64>,
        inv_std: Array1<f64>,
        batch_stats: bool,
    },
    Activation {
        input: Var,
        act: Activation,
    },
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
    Sum(Vec<Var>),
    Custom {
        input: Var,
        rule: GradRule,
    },
    /// Per-row scalar function of the input row with a precomputed row gradient.
    RowScalar {
        input: Var,
        local_grad: Array2<f64>,
    },
    Mean {
        input: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.dim()
    }

    /// Smallest `|z|` over every ReLU input recorded so far (infinity if none).
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|node| match node.op {
                Op::Activation {
                    input,
                    act: Activation::Relu,
                } => Some(self.value(input)),
                _ => None,
            })
            .flat_map(|z| z.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf. Gradients stop here.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    /// `input · Wᵀ + b` with `W` stored as `out × in` and `b` as `1 × out`.
    pub fn affine(
        &mut self,
        store: &ParamStore,
        input: Var,
        weight: ParamId,
        bias: Option<ParamId>,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = store.get(weight);
        if x.ncols() != w.ncols() {
            return Err(Error::config(format!(
                "affine {}: input width {} but weight expects {}",
                store.name(weight),
                x.ncols(),
                w.ncols()
            )));
        }
        let mut y = x.dot(&w.t());
        if let Some(b) = bias {
            y += store.get(b);
        }
        Ok(self.push(
            y,
            Op::Affine {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Batch normalization over the batch axis. With `stats = None` the batch
    /// mean and (biased) variance are used and returned so the caller can update
    /// running averages; with `Some((mean, var))` those fixed statistics are used.
    pub fn batch_norm(
        &mut self,
        store: &ParamStore,
        input: Var,
        gamma: ParamId,
        beta: ParamId,
        epsilon: f64,
        stats: Option<(&Array2<f64>, &Array2<f64>)>,
    ) -> Result<(Var, Array1<f64>, Array1<f64>)> {
        let x = self.value(input);
        let batch = x.nrows();
        let (mean, var, batch_stats) = match stats {
            Some((m, v)) => (m.row(0).to_owned(), v.row(0).to_owned(), false),
            None => {
                if batch < 2 {
                    return Err(Error::config(
                        "batch normalization in train mode needs at least 2 rows",
                    ));
                }
                let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
                let var = x.var_axis(Axis(0), 0.0);
                (mean, var, true)
            }
        };
        let inv_std = var.mapv(|v| 1.0 / (v + epsilon).sqrt());
        let normalized = (x - &mean) * &inv_std;
        let y = &normalized * &store.get(gamma).row(0) + &store.get(beta).row(0);
        let var_out = self.push(
            y,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            },
        );
        Ok((var_out, mean, var))
    }

    pub fn activation(&mut self, input: Var, act: Activation) -> Var {
        let y = act.apply(self.value(input));
        self.push(y, Op::Activation { input, act })
    }

    /// Column-wise concatenation; all parts must share the batch size.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("concat of zero tensors"))?;
        let rows = self.value(*first).nrows();
        if parts.iter().any(|p| self.value(*p).nrows() != rows) {
            return Err(Error::config("concat: batch sizes differ"));
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views)
            .expect("rows checked")
            .as_standard_layout()
            .into_owned();
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..start + width` of `input`.
    pub fn slice(&mut self, input: Var, start: usize, width: usize) -> Result<Var> {
        let cols = self.value(input).ncols();
        if start + width > cols {
            return Err(Error::config(format!(
                "slice {start}..{} out of {cols} columns",
                start + width
            )));
        }
        let y = self.value(input).slice(s![.., start..start + width]).to_owned();
        Ok(self.push(y, Op::Slice { input, start }))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("sum of zero tensors"))?;
        let shape = self.shape(*first);
        let mut y = self.value(*first).clone();
        for p in &parts[1..] {
            if self.shape(*p) != shape {
                return Err(Error::config(format!(
                    "sum: shape {:?} vs {:?}",
                    self.shape(*p),
                    shape
                )));
            }
            y += self.value(*p);
        }
        Ok(self.push(y, Op::Sum(parts.to_vec())))
    }

    /// Registers a node whose forward value is supplied by the caller and whose
    /// backward behaviour is `rule`.
    pub fn custom(&mut self, input: Var, value: Array2<f64>, rule: GradRule) -> Result<Var> {
        if value.dim() != self.shape(input) {
            return Err(Error::config(format!(
                "custom node changes shape {:?} -> {:?}",
                self.shape(input),
                value.dim()
            )));
        }
        if let GradRule::Hadamard(m) = &rule {
            if m.dim() != value.dim() {
                return Err(Error::config("custom node: Hadamard rule shape mismatch"));
            }
        }
        Ok(self.push(value, Op::Custom { input, rule }))
    }

    /// A scalar per row: `values[b] = f(input[b, ..])`, with `local_grad[b, ..]`
    /// the gradient of `f` at that row. Output is `batch × 1`.
    pub fn row_scalar(
        &mut self,
        input: Var,
        values: Array1<f64>,
        local_grad: Array2<f64>,
    ) -> Result<Var> {
        let shape = self.shape(input);
        if values.len() != shape.0 || local_grad.dim() != shape {
            return Err(Error::config("row_scalar: shape mismatch"));
        }
        let y = values.insert_axis(Axis(1));
        Ok(self.push(y, Op::RowScalar { input, local_grad }))
    }

    /// Mean over every entry, as a `1 × 1` tensor.
    pub fn mean(&mut self, input: Var) -> Var {
        let m = self.value(input).mean().unwrap_or(0.0);
        self.push(Array2::from_elem((1, 1), m), Op::Mean { input })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let y = self.value(input) * factor;
        self.push(y, Op::Scale { input, factor })
    }

    /// Reverse sweep from a `1 × 1` loss node. Returns gradients for every
    /// tensor in `store`; parameters not reachable from `loss` get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        if self.mode != Mode::Train {
            return Err(Error::usage("backward on a tape recorded in eval mode"));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::usage("backward: loss node is not on this tape"));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }

        let mut param_grads = Gradients::zeros_like(store);
        let mut grads: Vec<Option<Array2<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Affine {
                    input,
                    weight,
                    bias,
                } => {
                    let x = self.value(*input);
                    let w = store.get(*weight);
                    *param_grads.get_mut(*weight) += &g.t().dot(x);
                    if let Some(b) = bias {
                        *param_grads.get_mut(*b) += &g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    }
                    accumulate(&mut grads, *input, g.dot(w));
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                    batch_stats,
                } => {
                    let gamma_v = store.get(*gamma).row(0).to_owned();
                    *param_grads.get_mut(*gamma) +=
                        &(&g * normalized).sum_axis(Axis(0)).insert_axis(Axis(0));
                    *param_grads.get_mut(*beta) += &g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * &gamma_v;
                    let dx = if *batch_stats {
                        let n = g.nrows() as f64;
                        let sum_d = dxhat.sum_axis(Axis(0));
                        let sum_dx = (&dxhat * normalized).sum_axis(Axis(0));
                        let mut dx = dxhat * n - &sum_d;
                        Zip::from(&mut dx)
                            .and(normalized)
                            .and_broadcast(&sum_dx)
                            .for_each(|d, &xh, &s| *d -= xh * s);
                        dx * &(inv_std / n)
                    } else {
                        dxhat * inv_std
                    };
                    accumulate(&mut grads, *input, dx);
                }
                Op::Activation { input, act } => {
                    let dx = act.backward(&node.value, &g);
                    accumulate(&mut grads, *input, dx);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::Slice { input, start } => {
                    let mut dx = Array2::zeros(self.shape(*input));
                    let w = g.ncols();
                    dx.slice_mut(s![.., *start..*start + w]).assign(&g);
                    accumulate(&mut grads, *input, dx);
                }
                Op::Sum(parts) => {
                    for p in parts {
                        accumulate(&mut grads, *p, g.clone());
                    }
                }
                Op::Custom { input, rule } => {
                    let dx = match rule {
                        GradRule::Identity => g,
                        GradRule::Hadamard(m) => g * m,
                        GradRule::Map(f) => f(&g),
                    };
                    accumulate(&mut grads, *input, dx);
                }
                Op::RowScalar { input, local_grad } => {
                    let dx = local_grad * &g.column(0).insert_axis(Axis(1));
                    accumulate(&mut grads, *input, dx);
                }
                Op::Mean { input } => {
                    let shape = self.shape(*input);
                    let n = (shape.0 * shape.1).max(1) as f64;
                    accumulate(&mut grads, *input, Array2::from_elem(shape, g[[0, 0]] / n));
                }
                Op::Scale { input, factor } => {
                    accumulate(&mut grads, *input, g * *factor);
                }
            }
        }
        Ok(param_grads)
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], var: Var, delta: Array2<f64>) {
    match &mut grads[var.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn relu_margin_tracks_smallest_relu_input() {
        let mut tape = Tape::new(Mode::Train);
        assert_eq!(tape.relu_margin(), f64::INFINITY);
        let z = tape.input(array![[0.3, -0.02], [2.0, 1.0]]);
        tape.activation(z, Activation::Relu);
        let t = tape.input(array![[0.0]]);
        tape.activation(t, Activation::Tanh);
        assert_eq!(tape.relu_margin(), 0.02);
    }

    #[test]
    fn linear_map_gradient_is_ones_times_input() {
        // loss = sum(W u) with u fixed -> dloss/dW = 1 · uᵀ
        let mut store = ParamStore::new();
        let w = store.add("w", array![[0.3, -1.0, 2.0], [0.5, 0.5, 0.5]]);
        let mut tape = Tape::new(Mode::Train);
        let u = tape.input(array![[1.0, 2.0, 3.0]]);
        let y = tape.affine(&store, u, w, None).unwrap();
        let m = tape.mean(y);
        let loss = tape.scale(m, 2.0); // sum of the 2 outputs
        let grads = tape.backward(loss, &store).unwrap();
        assert_eq!(grads.get(w), &array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]);
    }

    #[test]
    fn sigmoid_derivative_at_zero_is_quarter() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[1.0]]);
        let b = store.add("b", array![[0.0]]);
        let mut tape = Tape::new(Mode::Train);
        let x = tape.input(array![[0.0]]);
        let z = tape.affine(&store, x, w, Some(b)).unwrap();
        let y = tape.activation(z, Activation::Sigmoid);
        let loss = tape.mean(y);
        assert_eq!(tape.value(loss)[[0, 0]], 0.5);
        let grads = tape.backward(loss, &store).unwrap();
        assert_relative_eq!(grads.get(b)[[0, 0]], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn backward_in_eval_mode_is_usage_error() {
        let store = ParamStore::new();
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.input(array![[1.0]]);
        let l = tape.mean(x);
        assert!(matches!(tape.backward(l, &store), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_needs_scalar_loss() {
        let store = ParamStore::new();
        let mut tape = Tape::new(Mode::Train);
        let x = tape.input(array![[1.0, 2.0]]);
        assert!(matches!(tape.backward(x, &store), Err(Error::Usage(_))));
    }

    #[test]
    fn identity_rule_passes_gradient_through_custom_node() {
        let mut store = ParamStore::new();
        let b = store.add("b", array![[0.0, 0.0]]);
        let w = store.add("w", array![[1.0, 0.0], [0.0, 1.0]]);
        let mut tape = Tape::new(Mode::Train);
        let x = tape.input(array![[0.2, 0.7]]);
        let z = tape.affine(&store, x, w, Some(b)).unwrap();
        let rounded = tape.value(z).mapv(f64::round);
        let q = tape.custom(z, rounded, GradRule::Identity).unwrap();
        assert_eq!(tape.value(q), &array![[0.0, 1.0]]);
        let l = tape.mean(q);
        let g = tape.backward(l, &store).unwrap();
        assert_eq!(g.get(b), &array![[0.5, 0.5]]);
    }

    #[test]
    fn concat_slice_and_sum_route_gradients() {
        let mut store = ParamStore::new();
        let b1 = store.add("b1", array![[1.0, 2.0]]);
        let b2 = store.add("b2", array![[3.0]]);
        let w1 = store.add("w1", Array2::zeros((2, 1)));
        let w2 = store.add("w2", Array2::zeros((1, 1)));
        let mut tape = Tape::new(Mode::Train);
        let x = tape.input(array![[0.0], [0.0]]);
        let p1 = tape.affine(&store, x, w1, Some(b1)).unwrap();
        let p2 = tape.affine(&store, x, w2, Some(b2)).unwrap();
        let cat = tape.concat(&[p1, p2]).unwrap();
        assert_eq!(tape.value(cat), &array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]);
        let tail = tape.slice(cat, 1, 2).unwrap();
        let both = tape.sum(&[tail, tail]).unwrap();
        let l = tape.mean(both);
        let g = tape.backward(l, &store).unwrap();
        // mean over 4 entries, each counted twice
        assert_eq!(g.get(b1), &array![[0.0, 1.0]]);
        assert_eq!(g.get(b2), &array![[1.0]]);
    }

    #[test]
    fn shape_errors_are_configuration_errors() {
        let mut store = ParamStore::new();
        let w = store.add("w", Array2::zeros((2, 3)));
        let mut tape = Tape::new(Mode::Train);
        let x = tape.input(Array2::zeros((4, 2)));
        assert!(matches!(tape.affine(&store, x, w, None), Err(Error::Config(_))));
        assert!(matches!(tape.slice(x, 1, 2), Err(Error::Config(_))));
        let y = tape.input(Array2::zeros((3, 2)));
        assert!(matches!(tape.concat(&[x, y]), Err(Error::Config(_))));
        assert!(matches!(tape.sum(&[x, y]), Err(Error::Config(_))));
    }
}
