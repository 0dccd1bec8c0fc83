//! Minimal reverse-mode differentiation for feed-forward networks built from
//! affine maps, batch normalization, pointwise activations, concatenation,
//! superposition and custom-gradient nodes.

mod adam;
mod gradcheck;
mod mlp;
mod params;
mod tape;

pub use adam::AdamState;
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, Stencil, DEFAULT_STEP};
pub use mlp::{
    Activation, BatchNormLayer, DenseLayer, LayerSpec, Mlp, MlpSpec, BN_EPSILON, BN_MOMENTUM,
};
pub use params::{Gradients, ParamId, ParamStore, PARAMS_MAGIC};
pub use tape::{GradRule, Mode, Tape, Var};
