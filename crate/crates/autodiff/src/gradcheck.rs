//! Central finite-difference gradient checking.
//!
//! The numerical side never touches the backward pass: each probe perturbs one
//! parameter element, re-runs the forward computation and reads the loss value.

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Gradients below this magnitude are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares analytic and central-difference gradients for `ids`.
///
/// `forward` records a scalar loss on the given tape. At most `max_per_param`
/// elements of each parameter are probed, spread evenly over the tensor.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    max_per_param: usize,
    mut forward: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = forward(store, &mut tape)?;
    let grads = tape.backward(loss)?;

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = forward(store, &mut t)?;
        t.value(l).item()
    };

    let mut report = GradCheckReport::default();
    for &id in ids {
        let n = store.get(id).value.len();
        let analytic = grads
            .get(id)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            max_abs_analytic: 0.0,
        };
        for k in (0..n).step_by(stride) {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[k], numeric);
            check.max_rel_error = check.max_rel_error.max(err);
            check.max_abs_analytic = check.max_abs_analytic.max(analytic[k].abs());
            check.checked += 1;
        }
        report.params.push(check);
    }
    Ok(report)
}
