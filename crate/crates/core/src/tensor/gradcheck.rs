//! Finite-difference verification of tape gradients (64-bit only).

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Below this magnitude a gradient is compared in absolute terms. It sits
/// well above the round-off of the difference stencil (~1e-12), so exactly
/// zero gradients are not judged by noise.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Relative error metric used throughout:
/// `|g_ad - g_fd| / max(|g_ad|, |g_fd|, GRAD_FLOOR)`.
pub fn relative_error(g_ad: f64, g_fd: f64) -> f64 {
    (g_ad - g_fd).abs() / g_ad.abs().max(g_fd.abs()).max(GRAD_FLOOR)
}

/// Fourth-order central difference of a scalar function along one coordinate.
fn central_difference(mut eval: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let f1 = eval(h)? - eval(-h)?;
    let f2 = eval(2.0 * h)? - eval(-2.0 * h)?;
    Ok((8.0 * f1 - f2) / (12.0 * h))
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::invalid("finite_difference_check", "function must return a scalar"));
    }
    Ok(t.item())
}

/// Max relative error between tape gradients and central differences of
/// `f` with respect to every coordinate of `x`.
pub fn finite_difference_check<G>(f: G, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    G: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    scalar_of(&tape, y)?;
    tape.backward(y)?;
    let g_ad = tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    for j in 0..x.numel() {
        let g_fd = central_difference(
            |d| {
                let mut xp = x.clone();
                xp.data_mut()[j] += d;
                let mut t = Tape::new();
                let xv = t.constant(xp);
                let y = f(&mut t, xv)?;
                scalar_of(&t, y)
            },
            eps,
        )?;
        worst = worst.max(relative_error(g_ad.data()[j], g_fd));
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub coords_checked: usize,
}

/// Same check over the coordinates of a parameter store. At most
/// `max_per_param` evenly spaced coordinates are probed per tensor.
pub fn param_gradient_check<G>(store: &ParamStore<f64>, f: G, eps: f64, max_per_param: usize) -> Result<GradCheckReport>
where
    G: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut base = store.clone();
    base.zero_grads();
    let mut tape = Tape::new();
    let y = f(&mut tape, &base)?;
    scalar_of(&tape, y)?;
    tape.backward(y)?;
    let mut with_grads = base.clone();
    tape.write_param_grads(&mut with_grads);

    let mut report = GradCheckReport { max_rel_error: 0.0, worst_param: String::new(), coords_checked: 0 };
    let ids: Vec<ParamId> = base.ids().collect();
    for id in ids {
        let n = base.value(id).numel();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let g_fd = central_difference(
                |d| {
                    let mut p = base.clone();
                    p.value_mut(id).data_mut()[j] += d;
                    let mut t = Tape::new();
                    let y = f(&mut t, &p)?;
                    scalar_of(&t, y)
                },
                eps,
            )?;
            let err = relative_error(with_grads.grad(id).data()[j], g_fd);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{}[{j}]", base.name(id));
            }
        }
    }
    Ok(report)
}
