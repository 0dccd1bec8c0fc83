//! Central finite-difference checking of tape gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Mode, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Central difference formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²).
    ThreePoint,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, error O(h⁴).
    FivePoint,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub stencil: Stencil,
    /// Check at most this many entries per tensor (evenly strided); `None` checks all.
    pub max_entries_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            stencil: Stencil::ThreePoint,
            max_entries_per_tensor: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, 1e−8)` over checked entries.
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: (f64, f64),
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of `loss_fn` with central differences for every
/// tensor in `params`. `loss_fn` must record a train-mode tape and return its
/// scalar loss node; any stochastic draws inside it must be frozen.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    mut loss_fn: F,
    options: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<(Tape, Var)>,
{
    let (tape, loss) = loss_fn(store)?;
    if tape.mode() != Mode::Train {
        return Err(Error::usage("grad_check needs a train-mode tape"));
    }
    let analytic = tape.backward(loss, store)?;
    drop(tape);

    let mut eval = |store: &mut ParamStore| -> Result<f64> {
        let (tape, loss) = loss_fn(store)?;
        Ok(tape.value(loss)[[0, 0]])
    };

    let h = options.step;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        entries_checked: 0,
    };
    for &id in params {
        let len = store.get(id).len();
        let stride = match options.max_entries_per_tensor {
            Some(k) if k > 0 && len > k => len.div_ceil(k),
            _ => 1,
        };
        for flat in (0..len).step_by(stride) {
            let original = store.get(id).as_slice().expect("standard layout")[flat];
            let mut at = |store: &mut ParamStore, offset: f64| -> Result<f64> {
                store.get_mut(id).as_slice_mut().unwrap()[flat] = original + offset;
                let value = eval(store);
                store.get_mut(id).as_slice_mut().unwrap()[flat] = original;
                value
            };
            let numeric = match options.stencil {
                Stencil::ThreePoint => (at(store, h)? - at(store, -h)?) / (2.0 * h),
                Stencil::FivePoint => {
                    let near = at(store, h)? - at(store, -h)?;
                    let far = at(store, 2.0 * h)? - at(store, -2.0 * h)?;
                    (8.0 * near - far) / (12.0 * h)
                }
            };
            let a = analytic.get(id).as_slice().unwrap()[flat];
            let err = relative_error(a, numeric);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), flat));
                report.worst_values = (a, numeric);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use ndarray::array;

    fn tanh_check(stencil: Stencil, step: f64) -> GradCheckReport {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[0.7]]);
        let options = GradCheckOptions {
            step,
            stencil,
            max_entries_per_tensor: None,
        };
        grad_check(
            &mut store,
            &[w],
            |s| {
                let mut tape = Tape::new(Mode::Train);
                let x = tape.input(array![[1.0]]);
                let z = tape.affine(s, x, w, None)?;
                let y = tape.activation(z, Activation::Tanh);
                let loss = tape.mean(y);
                Ok((tape, loss))
            },
            &options,
        )
        .unwrap()
    }

    #[test]
    fn five_point_stencil_removes_truncation_error() {
        let coarse = tanh_check(Stencil::ThreePoint, 1e-2);
        let fine = tanh_check(Stencil::FivePoint, 1e-2);
        assert!(coarse.max_rel_error > 1e-6, "{coarse:?}");
        assert!(fine.max_rel_error < 1e-8, "{fine:?}");
        assert_eq!(fine.worst, Some(("w".to_string(), 0)));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
