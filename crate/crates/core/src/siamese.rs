//! Similarity head and the penalized cross-entropy objective.

use seqattn_tensor::{Graph, Scalar, TensorError, Var};

use crate::error::Result;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Sim,
    Dis,
}

impl Label {
    pub fn of(a: &str, b: &str) -> Self {
        if a == b {
            Label::Sim
        } else {
            Label::Dis
        }
    }
}

/// `σ(vᵀ(a ⊙ b) + c)` as a one-element node.
pub fn similarity<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, v: Var, c: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(TensorError::Dimension(format!(
            "representations {:?} and {:?} differ",
            g.shape(a),
            g.shape(b)
        ))
        .into());
    }
    let p = g.mul(a, b)?;
    let wp = g.mul(p, v)?;
    let dot = g.sum(wp);
    let logit = g.add(dot, c)?;
    Ok(g.sigmoid(logit))
}

/// `Σ_i (1 - Σ_t m_{t,i})²` for one branch's location weights.
pub fn attention_penalty<T: Scalar>(g: &mut Graph<T>, traces: &[Var]) -> Result<Var> {
    let stacked = g.stack(traces)?;
    let total = g.sum_axis(stacked, 0)?;
    let dev = g.one_minus(total);
    let sq = g.mul(dev, dev)?;
    Ok(g.sum(sq))
}

/// Negative log-likelihood of `label` under `s`, with clamping. The flag
/// reports whether the clamp was active.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, s: Var, label: Label) -> (Var, bool) {
    let eps = T::from_f64_lossy(EPS);
    let sv = g.value(s).data()[0];
    let clamped = sv < eps || sv > T::one() - eps;
    let sc = g.clamp(s, eps, T::one() - eps);
    let p = match label {
        Label::Sim => sc,
        Label::Dis => g.one_minus(sc),
    };
    let lp = g.log(p);
    (g.scale(lp, -T::one()), clamped)
}

/// Per-pair terms of the objective.
#[derive(Clone, Copy, Debug)]
pub struct PairLoss {
    pub total: Var,
    pub penalty: Var,
    pub clamped: bool,
}

/// `λ·(P_a + P_b) − log p(label | s)` for one pair.
pub fn pair_loss<T: Scalar>(
    g: &mut Graph<T>,
    s: Var,
    label: Label,
    traces_a: &[Var],
    traces_b: &[Var],
    lambda: f64,
) -> Result<PairLoss> {
    let pa = attention_penalty(g, traces_a)?;
    let pb = attention_penalty(g, traces_b)?;
    let penalty = g.add(pa, pb)?;
    let (ce, clamped) = cross_entropy(g, s, label);
    let weighted = g.scale(penalty, T::from_f64_lossy(lambda));
    let total = g.add(weighted, ce)?;
    Ok(PairLoss { total, penalty, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use seqattn_tensor::Tensor;

    fn leaf(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.leaf(Tensor::from_slice(v).unwrap())
    }

    #[test]
    fn zero_weights_give_sigmoid_of_bias() {
        let mut g = Graph::new();
        let (a, b) = (leaf(&mut g, &[3.0, -1.0]), leaf(&mut g, &[0.5, 9.0]));
        let v = leaf(&mut g, &[0.0, 0.0]);
        let c = leaf(&mut g, &[0.4]);
        let s = similarity(&mut g, a, b, v, c).unwrap();
        assert!((g.value(s).data()[0] - 1.0 / (1.0 + (-0.4f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn unit_vector_selects_weight() {
        let mut g = Graph::new();
        let e1 = leaf(&mut g, &[1.0, 0.0, 0.0]);
        let v = leaf(&mut g, &[1.7, 5.0, -3.0]);
        let c = leaf(&mut g, &[0.0]);
        let s = similarity(&mut g, e1, e1, v, c).unwrap();
        assert!((g.value(s).data()[0] - 1.0 / (1.0 + (-1.7f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn similarity_matches_formula_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut r = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (av, bv, vv, cv) = (r(6), r(6), r(6), r(1));
        let mut g = Graph::new();
        let (a, b, v, c) = (leaf(&mut g, &av), leaf(&mut g, &bv), leaf(&mut g, &vv), leaf(&mut g, &cv));
        let s1 = similarity(&mut g, a, b, v, c).unwrap();
        let s2 = similarity(&mut g, b, a, v, c).unwrap();
        let logit: f64 = (0..6).map(|i| vv[i] * av[i] * bv[i]).sum::<f64>() + cv[0];
        assert!((g.value(s1).data()[0] - 1.0 / (1.0 + (-logit).exp())).abs() < 1e-14);
        assert_eq!(g.value(s1), g.value(s2));
        let short = leaf(&mut g, &[1.0]);
        assert!(similarity(&mut g, a, short, v, c).is_err());
    }

    #[test]
    fn half_probability_sim_pair() {
        let mut g = Graph::new();
        let s = leaf(&mut g, &[0.5]);
        let m = leaf(&mut g, &[0.5, 0.5]);
        let l = pair_loss(&mut g, s, Label::Sim, &[m], &[m], 0.0).unwrap();
        assert!((g.value(l.total).data()[0] - 0.693_147_180_559_945_3).abs() < 1e-12);
        assert!(!l.clamped);
    }

    #[test]
    fn uniform_penalty_value() {
        let mut g = Graph::new();
        let m = g.leaf(Tensor::full(&[49], 1.0 / 49.0).unwrap());
        let traces = vec![m; 20];
        let p = attention_penalty(&mut g, &traces).unwrap();
        let want = 49.0 * (29.0f64 / 49.0).powi(2);
        assert!((g.value(p).data()[0] - want).abs() < 1e-10);
        assert!((want - 17.163).abs() < 1e-3);
    }

    #[test]
    fn penalty_zero_iff_columns_sum_to_one() {
        let mut g = Graph::new();
        // T = 4 frames over 4 cells, each cell receiving total mass 1.
        let rows = [
            [0.7, 0.1, 0.1, 0.1],
            [0.1, 0.7, 0.1, 0.1],
            [0.1, 0.1, 0.7, 0.1],
            [0.1, 0.1, 0.1, 0.7],
        ];
        let tr: Vec<Var> = rows.iter().map(|r| leaf(&mut g, r)).collect();
        let p = attention_penalty(&mut g, &tr).unwrap();
        assert!(g.value(p).data()[0].abs() < 1e-24);
        let skew = leaf(&mut g, &[0.4, 0.2, 0.2, 0.2]);
        let tr2 = vec![tr[0], tr[1], tr[2], skew];
        let p2 = attention_penalty(&mut g, &tr2).unwrap();
        assert!(g.value(p2).data()[0] > 1e-3);
    }

    #[test]
    fn loss_gradient_sign_by_label() {
        for (label, positive) in [(Label::Sim, false), (Label::Dis, true)] {
            let mut g = Graph::new();
            let s = leaf(&mut g, &[0.3]);
            let m = leaf(&mut g, &[1.0]);
            let l = pair_loss(&mut g, s, label, &[m], &[m], 1.0).unwrap();
            let d = g.backward(l.total).unwrap().wrt(s).data()[0];
            assert_eq!(d > 0.0, positive, "{label:?}: {d}");
        }
    }

    #[test]
    fn saturated_similarity_is_clamped_and_counted() {
        let mut g = Graph::new();
        let s = leaf(&mut g, &[1.0]);
        let (ce, clamped) = cross_entropy(&mut g, s, Label::Dis);
        assert!(clamped);
        let v = g.value(ce).data()[0];
        assert!(v.is_finite() && (v + (EPS).ln()).abs() < 1e-6);
    }
}
