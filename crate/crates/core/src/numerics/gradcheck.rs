//! Central finite-difference verification of tape gradients.

use super::{NumericsError, ParamStore, Tape, Tensor, Var};

/// Denominator floor for relative error, so that coordinates whose true
/// gradient is ~0 are judged on absolute error instead of amplified noise.
pub const DEFAULT_REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Check `f(x)` at a single input tensor.
pub fn grad_check<F>(mut f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&mut Tape, Var) -> Result<Var, NumericsError>,
{
    let mut store = ParamStore::new();
    store.insert("x", x.detached());
    grad_check_params(
        &store,
        |tape, p| {
            let v = tape.param(p, "x")?;
            f(tape, v)
        },
        step,
        tol,
        DEFAULT_REL_FLOOR,
    )
}

/// Check every coordinate of every parameter in `params` for the scalar
/// function `f`. `f` must be deterministic.
pub fn grad_check_params<F>(
    params: &ParamStore,
    mut f: F,
    step: f64,
    tol: f64,
    floor: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, NumericsError>,
{
    let mut store = params.clone();
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &store)?;
    tape.backward(loss, &mut store)?;

    let mut eval = |s: &ParamStore| -> Result<f64, NumericsError> {
        let mut t = Tape::no_grad();
        let v = f(&mut t, s)?;
        Ok(t.value(v).item())
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        tol,
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let analytic = store.get(&name)?.grad().unwrap_or(&[]).to_vec();
        let n = probe.get(&name)?.numel();
        for i in 0..n {
            let orig = probe.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(i).copied().unwrap_or(0.0);
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
