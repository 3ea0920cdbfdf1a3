//! Central finite differences as an independent oracle for [`Graph::backward`].

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    pub numeric: Vec<f64>,
    pub analytic: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
}

impl FiniteDiffReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `(f(θ+εe_i) − f(θ−εe_i)) / 2ε` for every coordinate `i`.
pub fn central_difference(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(TensorError::Usage(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe)?;
        probe[i] = orig - eps;
        let minus = f(&probe)?;
        probe[i] = orig;
        for v in [plus, minus] {
            if !v.is_finite() {
                return Err(TensorError::NonFinite {
                    coordinate: i,
                    value: v,
                });
            }
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Compare `analytic` against central differences of `f` at `theta`.
pub fn finite_diff_check(
    f: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<FiniteDiffReport> {
    if analytic.len() != theta.len() {
        return Err(TensorError::Usage(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }
    let numeric = central_difference(f, theta, eps)?;
    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .collect();
    let (worst, max_rel_error) = rel_errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(FiniteDiffReport {
        numeric,
        analytic: analytic.to_vec(),
        rel_errors,
        max_rel_error,
        worst,
    })
}

/// Check every input of a graph-built scalar function at once. `build`
/// receives the leaves for `inputs`, in order, and returns the loss node.
pub fn check_graph<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let theta: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();

    let eval = |flat: &[f64], want_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let mut offset = 0;
        let mut leaves = Vec::with_capacity(shapes.len());
        for s in &shapes {
            let n: usize = s.iter().product();
            leaves.push(g.leaf(Tensor::new(s, flat[offset..offset + n].to_vec())?));
            offset += n;
        }
        let loss = build(&mut g, &leaves)?;
        let value = g.value(loss).item()?;
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let flat_grad = leaves
            .iter()
            .flat_map(|&l| grads.wrt(l).into_data())
            .collect();
        Ok((value, flat_grad))
    };

    let (_, analytic) = eval(&theta, true)?;
    finite_diff_check(|p| eval(p, false).map(|(v, _)| v), &theta, &analytic, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = central_difference(|_| Ok(3.5), &[1.0, -2.0, 0.0], 1e-4).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn squared_norm_at_three() {
        let g = central_difference(|p| Ok(p[0] * p[0]), &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let err = central_difference(
            |p| Ok(if p[1] > 0.5 { f64::NAN } else { 0.0 }),
            &[0.0, 0.5],
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { coordinate: 1, .. }));
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(central_difference(|_| Ok(0.0), &[0.0], 0.0).is_err());
    }
}
