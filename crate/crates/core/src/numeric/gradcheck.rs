use super::param::ParamStore;
use super::tensor::Real;
use crate::error::{Error, Result};

/// Floor on the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

pub fn default_step<T: Real>() -> f64 {
    if T::NAME == "f64" {
        1e-6
    } else {
        1e-3
    }
}

/// Finite-difference formula. `Central4` is the fourth-order stencil
/// `(8(f(θ+h) − f(θ−h)) − (f(θ+2h) − f(θ−2h))) / 12h`; its smaller
/// truncation error allows a larger `h` and so less cancellation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Stencil {
    #[default]
    Central2,
    Central4,
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element, with its analytic and numeric values.
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradients already held in `store` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` of `loss`, element by element.
/// Values are restored before returning.
pub fn finite_diff_check<T: Real>(
    store: &mut ParamStore<T>,
    h: f64,
    loss: impl FnMut(&ParamStore<T>) -> Result<T>,
) -> Result<GradCheckReport> {
    finite_diff_check_with(store, h, Stencil::Central2, loss)
}

pub fn finite_diff_check_with<T: Real>(
    store: &mut ParamStore<T>,
    h: f64,
    stencil: Stencil,
    mut loss: impl FnMut(&ParamStore<T>) -> Result<T>,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut eval = |s: &ParamStore<T>| -> Result<f64> {
        let v = loss(s)?.f64();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {v} during gradient check")));
        }
        Ok(v)
    };
    let mut report = GradCheckReport {
        params: Vec::new(),
        max_rel_error: 0.0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: 0.0,
            worst: (0, 0.0, 0.0),
        };
        for i in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                store.get_mut(id).value.data_mut()[i] = T::of(orig.f64() + offset);
                let v = eval(store);
                store.get_mut(id).value.data_mut()[i] = orig;
                v
            };
            let numeric = match stencil {
                Stencil::Central2 => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::Central4 => {
                    let near = at(h)? - at(-h)?;
                    let far = at(2.0 * h)? - at(-2.0 * h)?;
                    (8.0 * near - far) / (12.0 * h)
                }
            };
            let analytic = store.get(id).grad.data()[i].f64();
            let err = rel_error(analytic, numeric);
            if err > check.max_rel_error || err.is_nan() {
                check.max_rel_error = err;
                check.worst = (i, analytic, numeric);
            }
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    Ok(report)
}
