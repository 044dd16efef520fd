use crate::error::{NdError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Coordinates whose true gradient is zero still show finite-difference
/// rounding noise of a few `eps·|loss| / h`; the denominator floor, scaled by the
/// loss magnitude, keeps that from reading as a large relative error.
const DENOM_FLOOR: f64 = 1e-5;

/// Compares reverse-mode gradients of a scalar loss against central finite
/// differences with step `h`.
///
/// Returns the maximum over all coordinates of
/// `|analytic − numeric| / max(1e-5·max(1, |loss|), |analytic| + |numeric|)`.
/// Every tensor in `params` is treated as differentiable.
pub fn check_gradient<F>(loss_fn: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(NdError::InvalidArgument {
            op: "check_gradient",
            msg: format!("step must be positive, got {h}"),
        });
    }
    let mut work: Vec<Tensor> = params
        .iter()
        .map(|p| {
            let mut t = p.clone();
            t.set_requires_grad(true);
            t
        })
        .collect();

    let (base, analytic): (f64, Vec<Vec<f64>>) = {
        let mut g = Graph::new();
        let vars: Vec<Var> = work.iter().map(|t| g.param(t)).collect();
        let loss = loss_fn(&mut g, &vars)?;
        let value = g.item(loss);
        if !value.is_finite() {
            return Err(NdError::NonFinite(value));
        }
        g.backward(loss)?;
        let grads = vars
            .iter()
            .zip(&work)
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        (value, grads)
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|t| g.leaf_ref(t, false)).collect();
        let loss = loss_fn(&mut g, &vars)?;
        let value = g.item(loss);
        if value.is_finite() {
            Ok(value)
        } else {
            Err(NdError::NonFinite(value))
        }
    };

    let floor = DENOM_FLOOR * base.abs().max(1.0);
    let mut worst = 0.0f64;
    for p in 0..work.len() {
        for j in 0..work[p].numel() {
            let orig = work[p].data()[j];
            work[p].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[p].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[p].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[p][j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
