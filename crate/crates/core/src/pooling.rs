//! Temporal pooling of the top-layer state sequence into one vector.

use seqattn_tensor::{Graph, Scalar, TensorError, Var};

use crate::error::{Error, Result};

/// Stack flattened per-frame states into a `[T, F]` node.
pub fn stack_states<T: Scalar>(g: &mut Graph<T>, states: &[Var]) -> Result<Var> {
    if states.is_empty() {
        return Err(Error::Usage("cannot pool an empty sequence".into()));
    }
    let flat: Vec<Var> = states.iter().map(|&h| g.flatten(h)).collect();
    Ok(g.stack(&flat)?)
}

/// `α = softmax_t(flatten(h_t) · w)` for `stacked: [T, F]`, `w: [F, 1]`.
pub fn temporal_weights<T: Scalar>(g: &mut Graph<T>, stacked: Var, w: Var) -> Result<Var> {
    let logits = g.matmul(stacked, w)?;
    let t = g.shape(stacked)[0];
    let logits = g.reshape(logits, &[t])?;
    Ok(g.softmax(logits)?)
}

/// `Σ_t α_t h_t` for `stacked: [T, F]`, `alpha: [T]`.
pub fn attention_pool<T: Scalar>(g: &mut Graph<T>, stacked: Var, alpha: Var) -> Result<Var> {
    let t = g.shape(stacked)[0];
    if g.shape(alpha) != [t] {
        return Err(TensorError::Dimension(format!(
            "temporal weights {:?} for {t} states",
            g.shape(alpha)
        ))
        .into());
    }
    let weighted = g.scale_rows(stacked, alpha)?;
    Ok(g.sum_axis(weighted, 0)?)
}

pub fn mean_pool<T: Scalar>(g: &mut Graph<T>, stacked: Var) -> Result<Var> {
    Ok(g.mean_axis(stacked, 0)?)
}

/// Elementwise maximum over time.
pub fn max_pool<T: Scalar>(g: &mut Graph<T>, stacked: Var) -> Result<Var> {
    Ok(g.max_axis(stacked, 0)?)
}
