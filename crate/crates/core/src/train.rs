//! Supervised steps shared by every training loop: the clone, the target and
//! the baselines all fit a softmax model to target probability rows.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{ForwardTrace, Model, ParamGrads};
use crate::tensor::Tensor;

/// Mean `KL(targets || model(x))` and its parameter gradients.
///
/// `model` must end in a softmax so its outputs are probability rows.
pub fn distill_grads(model: &mut Model, x: &Tensor, targets: &Tensor) -> Result<(f64, ParamGrads)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let trace = model.forward_graph(&mut g, xv)?;
    let p = g.constant(targets.clone());
    let kl = kl_to_output(&mut g, p, &trace)?;
    let loss = g.mean_all(kl);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("distillation loss".into()));
    }
    let grads = g.backward(loss)?;
    Ok((value, trace.param_grads(&g, &grads)))
}

/// Per-row `KL(p || model output)`, through the logits when the model ends
/// in a softmax.
pub fn kl_to_output(g: &mut Graph, p: Var, trace: &ForwardTrace) -> Result<Var> {
    match trace.logits() {
        Some(z) => g.kl_logits_rows(p, z),
        None => g.kl_rows(p, trace.output),
    }
}

/// Minibatch order for one epoch over `n` rows.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Fraction of rows whose argmax matches `labels`.
pub fn accuracy(model: &Model, x: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || x.rows() != labels.len() {
        return Err(Error::Invalid(format!(
            "accuracy needs matching non-empty inputs ({} rows, {} labels)",
            x.rows(),
            labels.len()
        )));
    }
    let pred = model.forward(x)?.argmax_rows();
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}
