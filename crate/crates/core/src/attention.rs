//! Location softmax over feature-cube cells, attention-weighted blending and
//! the MLP that initializes the recurrent states.

use seqattn_tensor::{Graph, Scalar, Tensor, TensorError, Var};

use crate::error::{Error, Result};

/// `softmax(flatten(h_prev) · W_att)`, one probability per cell.
///
/// `w_att` is `[F, K²]` with column `i` scoring cell `i`.
pub fn attend_weights<T: Scalar>(g: &mut Graph<T>, h_prev: Var, w_att: Var) -> Result<Var> {
    let f = g.numel(h_prev);
    let row = g.reshape(h_prev, &[1, f])?;
    let logits = g.matmul(row, w_att)?;
    let cells = g.shape(logits)[1];
    let logits = g.reshape(logits, &[cells])?;
    Ok(g.softmax(logits)?)
}

/// Constant `1/K²` weights for the muted baseline.
pub fn muted_weights<T: Scalar>(g: &mut Graph<T>, cells: usize) -> Var {
    let v = T::from_f64_lossy(1.0 / cells as f64);
    g.leaf(Tensor::full(&[cells], v).expect("cells > 0"))
}

fn cells_of(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [k1, k2, d] if k1 == k2 => Ok((k1 * k2, *d)),
        _ => Err(TensorError::Dimension(format!("expected a K x K x D cube, got {shape:?}")).into()),
    }
}

/// Scale cell `i` of the cube by `m[i]`; the output keeps the K×K×D shape.
pub fn blend<T: Scalar>(g: &mut Graph<T>, cube: Var, m: Var) -> Result<Var> {
    let shape = g.shape(cube).to_vec();
    let (cells, d) = cells_of(&shape)?;
    if g.shape(m) != [cells] {
        return Err(TensorError::Dimension(format!(
            "attention weights {:?} do not match cube {:?}",
            g.shape(m),
            shape
        ))
        .into());
    }
    let rows = g.reshape(cube, &[cells, d])?;
    let scaled = g.scale_rows(rows, m)?;
    Ok(g.reshape(scaled, &shape)?)
}

/// Expectation `Σ_i m_i X_i` as a `[1, 1, D]` cube, the vector input of the
/// fully connected variant.
pub fn collapse<T: Scalar>(g: &mut Graph<T>, cube: Var, m: Var) -> Result<Var> {
    let shape = g.shape(cube).to_vec();
    let (cells, d) = cells_of(&shape)?;
    if g.shape(m) != [cells] {
        return Err(TensorError::Dimension(format!(
            "attention weights {:?} do not match cube {:?}",
            g.shape(m),
            shape
        ))
        .into());
    }
    let rows = g.reshape(cube, &[cells, d])?;
    let mrow = g.reshape(m, &[1, cells])?;
    let x = g.matmul(mrow, rows)?;
    Ok(g.reshape(x, &[1, 1, d])?)
}

/// Handles of the state-initialization MLP: a shared tanh layer followed by
/// one tanh head per recurrent layer.
#[derive(Clone, Debug)]
pub struct InitVars {
    pub w1: Var,
    pub b1: Var,
    pub heads: Vec<(Var, Var)>,
}

/// Mean over time of the per-frame slice mean, a `[D]` vector.
pub fn summary<T: Scalar>(g: &mut Graph<T>, cubes: &[Var]) -> Result<Var> {
    if cubes.is_empty() {
        return Err(Error::Usage("cannot initialize states from an empty sequence".into()));
    }
    let mut means = Vec::with_capacity(cubes.len());
    for &c in cubes {
        let shape = g.shape(c).to_vec();
        let (cells, d) = cells_of(&shape)?;
        let rows = g.reshape(c, &[cells, d])?;
        means.push(g.mean_axis(rows, 0)?);
    }
    let stacked = g.stack(&means)?;
    Ok(g.mean_axis(stacked, 0)?)
}

/// Initial hidden state per layer, each reshaped to `shapes[l]`.
pub fn init_hidden<T: Scalar>(
    g: &mut Graph<T>,
    cubes: &[Var],
    vars: &InitVars,
    shapes: &[[usize; 3]],
) -> Result<Vec<Var>> {
    if vars.heads.len() != shapes.len() {
        return Err(Error::Model(format!(
            "{} init heads for {} layers",
            vars.heads.len(),
            shapes.len()
        )));
    }
    let s = summary(g, cubes)?;
    let d = g.numel(s);
    let row = g.reshape(s, &[1, d])?;
    let hid = g.matmul(row, vars.w1)?;
    let width = g.numel(hid);
    let hid = g.reshape(hid, &[width])?;
    let hid = g.add_bias(hid, vars.b1)?;
    let hid = g.tanh(hid);
    let hid = g.reshape(hid, &[1, width])?;
    let mut out = Vec::with_capacity(shapes.len());
    for (&(w, b), shape) in vars.heads.iter().zip(shapes) {
        let h = g.matmul(hid, w)?;
        let n = g.numel(h);
        let h = g.reshape(h, &[n])?;
        let h = g.add_bias(h, b)?;
        let h = g.tanh(h);
        out.push(g.reshape(h, shape)?);
    }
    Ok(out)
}
