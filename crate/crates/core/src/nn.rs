//! Parameter initialisation, storage and batched gradient accumulation.

use ndgrad::{Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::par::{self, Execution};

/// Uniform `[-a, a]` trainable tensor.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], a: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..=a)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape").with_grad()
}

/// Glorot-uniform weight matrix `[fan_in, fan_out]`.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, &[fan_in, fan_out], (6.0 / (fan_in + fan_out) as f64).sqrt())
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).with_grad()
}

pub fn filled(shape: &[usize], v: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![v; n]).expect("valid shape").with_grad()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn store(names: &[String], tensors: &[Tensor]) -> Vec<StoredTensor> {
    names
        .iter()
        .zip(tensors)
        .map(|(n, t)| StoredTensor {
            name: n.clone(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect()
}

/// Rebuilds trainable tensors, checking names and shapes against `expected`.
pub fn restore(stored: Vec<StoredTensor>, expected: &[(String, Vec<usize>)]) -> Result<Vec<Tensor>> {
    if stored.len() != expected.len() {
        return Err(invalid(
            "checkpoint",
            format!("expected {} tensors, found {}", expected.len(), stored.len()),
        ));
    }
    stored
        .into_iter()
        .zip(expected)
        .map(|(s, (name, shape))| {
            if s.name != *name || s.shape != *shape {
                return Err(invalid(
                    "checkpoint",
                    format!("tensor {}{:?} does not match expected {name}{shape:?}", s.name, s.shape),
                ));
            }
            Ok(Tensor::new(s.shape, s.data)?.with_grad())
        })
        .collect()
}

/// Binds every parameter into `g` as a trainable leaf.
pub fn bind<'a>(g: &mut Graph<'a>, params: &'a [Tensor]) -> Vec<Var> {
    params.iter().map(|p| g.param(p)).collect()
}

/// Binds every parameter as a constant leaf (no gradients are tracked).
pub fn bind_frozen<'a>(g: &mut Graph<'a>, params: &'a [Tensor]) -> Vec<Var> {
    params.iter().map(|p| g.leaf_ref(p, false)).collect()
}

/// Builds one graph per item, back-propagates each, and adds the gradients
/// into `params` in item order. Returns the item losses.
///
/// Each item's loss must already carry its share of the batch normalisation.
pub fn accumulate_gradients<T, F>(exec: Execution, params: &mut [Tensor], items: &[T], loss: F) -> Result<Vec<f64>>
where
    T: Sync,
    F: for<'g> Fn(&mut Graph<'g>, &[Var], &T) -> Result<Var> + Sync + Send,
{
    let out = accumulate_gradients_with(exec, params, items, |g, p, item| Ok((loss(g, p, item)?, ())))?;
    Ok(out.into_iter().map(|(l, _)| l).collect())
}

/// Like [`accumulate_gradients`], with the builder also returning side
/// values read from its graph (for example loss components).
pub fn accumulate_gradients_with<T, X, F>(exec: Execution, params: &mut [Tensor], items: &[T], loss: F) -> Result<Vec<(f64, X)>>
where
    T: Sync,
    X: Send,
    F: for<'g> Fn(&mut Graph<'g>, &[Var], &T) -> Result<(Var, X)> + Sync + Send,
{
    let shared: &[Tensor] = params;
    let per_item = par::map(exec, items, |item| -> Result<(f64, X, Vec<Option<Vec<f64>>>)> {
        let mut g = Graph::new();
        let vars = bind(&mut g, shared);
        let (root, extra) = loss(&mut g, &vars, item)?;
        g.backward(root)?;
        let grads = vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec)).collect();
        Ok((g.item(root), extra, grads))
    });
    let mut out = Vec::with_capacity(items.len());
    for r in per_item {
        let (l, extra, grads) = r?;
        out.push((l, extra));
        for (p, gr) in params.iter_mut().zip(grads) {
            if let Some(gr) = gr {
                p.accumulate_grad(&gr)?;
            }
        }
    }
    Ok(out)
}

/// Makes sure every trainable parameter has a gradient buffer so an
/// optimizer step never fails on parameters a batch did not touch.
pub fn ensure_grads(params: &mut [Tensor]) -> Result<()> {
    for p in params.iter_mut().filter(|p| p.requires_grad() && p.grad().is_none()) {
        let zeros = vec![0.0; p.numel()];
        p.accumulate_grad(&zeros)?;
    }
    Ok(())
}

/// [`ndgrad::check_gradient`] for loss builders that return crate errors.
pub fn check_gradient<F>(loss_fn: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    let wrapped = |g: &mut Graph<'_>, p: &[Var]| {
        loss_fn(g, p).map_err(|e| match e {
            crate::CoreError::Tensor(t) => t,
            other => ndgrad::NdError::InvalidArgument {
                op: "loss",
                msg: other.to_string(),
            },
        })
    };
    Ok(ndgrad::check_gradient(wrapped, params, h)?)
}
