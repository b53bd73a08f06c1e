//! Finite-difference gradient oracle.
//!
//! Central differences evaluated through the ordinary 32-bit forward path,
//! with the differencing itself done in 64-bit. Independent of the tape's
//! backward pass by construction: it only ever calls the forward function.

use crate::tape::{Tape, TensorId};
use crate::tensor::{contract_err, Tensor, TensorError};

/// Central-difference gradient `(f(x + eps*e_i) - f(x - eps*e_i)) / step`
/// per element, where `step` is the realized 64-bit difference between the
/// two probe values (equal to `2*eps` up to f32 rounding of the probes).
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f32) -> Result<Tensor, TensorError>
where
    F: Fn(&Tensor) -> Result<f64, TensorError>,
{
    if eps <= 0.0 {
        return Err(contract_err("finite_diff_grad", format!("eps must be positive, got {eps}")));
    }
    let mut grad = vec![0.0f32; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = probe.data()[i] as f64;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = probe.data()[i] as f64;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        let step = hi - lo;
        if step == 0.0 {
            return Err(contract_err(
                "finite_diff_grad",
                format!("eps {eps} vanishes against element {i} = {orig}"),
            ));
        }
        grad[i] = ((plus - minus) / step) as f32;
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Worst-case relative gap `max_i |a_i - r_i| / (|r_i| + 1e-4)`.
pub fn max_rel_gap(analytic: &[f32], reference: &[f32]) -> f64 {
    analytic
        .iter()
        .zip(reference.iter())
        .map(|(&a, &r)| ((a as f64) - (r as f64)).abs() / ((r as f64).abs() + 1e-4))
        .fold(0.0, f64::max)
}

/// Compares the tape's analytic gradient w.r.t. `x` against central
/// differences for a scalar-valued graph; returns the worst relative gap.
///
/// `build` must construct the same graph both times: from the given input id
/// to a scalar loss id.
pub fn compare_grad<F>(build: F, x: &Tensor, eps: f32) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId, TensorError>,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone().with_grad());
    let loss = build(&mut tape, xid)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xid)
        .ok_or_else(|| contract_err("compare_grad", "no gradient reached the input"))?
        .to_vec();

    let fd = finite_diff_grad(
        |probe| {
            let mut tape = Tape::new();
            let id = tape.constant(probe.clone());
            let loss = build(&mut tape, id)?;
            Ok(tape.value(loss).item()? as f64)
        },
        x,
        eps,
    )?;
    Ok(max_rel_gap(&analytic, fd.data()))
}
