//! Central-difference gradient verification.

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with the denominator floored at 1, so tiny gradients are
/// compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn scalar_output(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Max over coordinates of the relative error between the tape gradient of
/// `f` at `x` and its central difference with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_with_fault(None, f, x, h)
}

pub fn grad_check_with_fault<F>(fault: Option<OpKind>, f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let new_tape = || fault.map_or_else(Tape::new, Tape::with_fault);
    let mut tape = new_tape();
    let v = tape.variable(x.clone());
    let out = f(&mut tape, v)?;
    scalar_output(&tape, out)?;
    tape.backward(out)?;
    let analytic = tape.grad(v);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.variable(probe);
        let out = f(&mut t, v)?;
        scalar_output(&t, out)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same check, taken with respect to individual stored parameter entries.
/// `coords` lists `(parameter, flat index)` pairs to probe.
pub fn grad_check_params<F>(
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    fault: Option<OpKind>,
    f: F,
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    grad_check_params_vjp(store, coords, fault, f, &Tensor::scalar(1.0), h)
}

/// Parameter check of a tensor-valued `f`, contracted with `w` as in
/// [`grad_check_vjp`].
pub fn grad_check_params_vjp<F>(
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    fault: Option<OpKind>,
    f: F,
    w: &Tensor,
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let mut tape = fault.map_or_else(Tape::new, Tape::with_fault);
    let out = f(&mut tape, store)?;
    tape.backward_seeded(out, w)?;
    let mut grads = crate::params::Grads::new(store);
    tape.collect_grads(&mut grads);

    let mut probe = store.clone();
    let mut eval = |id: ParamId, idx: usize, delta: f64| -> Result<f64> {
        let orig = store.get(id).data()[idx];
        probe.get_mut(id).data_mut()[idx] = orig + delta;
        let mut t = Tape::new();
        let out = f(&mut t, &probe)?;
        probe.get_mut(id).data_mut()[idx] = orig;
        Ok(t.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
    };
    let mut worst: f64 = 0.0;
    for &(id, idx) in coords {
        let numeric = (eval(id, idx, h)? - eval(id, idx, -h)?) / (2.0 * h);
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[idx]);
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}

/// Check every input of a tensor-valued `f` at once by contracting its
/// output with the fixed weights `w`: the analytic side seeds the backward
/// pass with `w` directly, so no extra tape op takes part in the check.
pub fn grad_check_vjp<F>(fault: Option<OpKind>, f: F, inputs: &[Tensor], w: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let mut tape = fault.map_or_else(Tape::new, Tape::with_fault);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward_seeded(out, w)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| tape.grad(*v)).collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|x| t.variable(x.clone())).collect();
        let out = f(&mut t, &vars)?;
        Ok(t.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
    };
    let mut probe = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[k].data()[i], numeric));
        }
    }
    Ok(worst)
}
