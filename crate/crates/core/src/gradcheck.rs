//! Finite-difference check of every parameter gradient of the full pair loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqattn_tensor::gradcheck::{finite_diff_check, FiniteDiffReport};
use seqattn_tensor::{Graph, Padding, Tensor};

use crate::config::{AttentionMode, EncoderConfig, ModelConfig, StackConfig, TemporalPool};
use crate::error::Result;
use crate::network::Model;
use crate::params::{InitScheme, ParamSet};
use crate::siamese::Label;

pub const TOLERANCE: f64 = 1e-5;
pub const STEP: f64 = 1e-4;

/// K=2, D=3, two ConvGRU layers with attention and temporal pooling.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            frame: (4, 4),
            channels: vec![3],
            kernel: 3,
            stride: 2,
            padding: Padding::Same,
        },
        stack: StackConfig::with_kernels(&[2, 2], &[3, 1], 1),
        attention: AttentionMode::Soft,
        collapse_attention: false,
        init_hidden: 2,
        pool: TemporalPool::Attention,
        fisher_components: 2,
    }
}

/// Worst relative error per named parameter.
#[derive(Clone, Debug)]
pub struct ModelReport {
    pub per_param: Vec<(String, f64)>,
    pub overall: FiniteDiffReport,
}

impl ModelReport {
    pub fn max_rel_error(&self) -> f64 {
        self.overall.max_rel_error
    }

    pub fn passes(&self) -> bool {
        self.overall.passes(TOLERANCE)
    }
}

/// Analytic against central differences for the pair loss of two random
/// sequences of `t` frames.
pub fn check_model(config: ModelConfig, t: usize, label: Label, lambda: f64, seed: u64) -> Result<ModelReport> {
    let model = Model::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::<f64>::init(model.layout(), InitScheme::Paper, &mut rng)?;
    // Nonzero biases so their gradients are exercised away from zero.
    for (spec, p) in model.layout().specs().iter().zip(params.tensors_mut()) {
        if spec.shape.len() == 1 {
            p.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
    let (h, w) = model.config().encoder.frame;
    let mut seq = || -> Result<Vec<Tensor<f64>>> {
        (0..t)
            .map(|_| Ok(Tensor::from_fn(&[h, w, 3], |_| rng.gen_range(0.0..1.0))?))
            .collect()
    };
    let (a, b) = (seq()?, seq()?);

    let loss = |p: &ParamSet<f64>, grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let out = model.forward_pair(&mut g, &bound, &a, &b, label, lambda, None)?;
        let value = g.value(out.loss.total).item()?;
        if !grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(out.loss.total)?;
        Ok((value, bound.gradients(&grads, p.names()).flatten()))
    };
    let (_, analytic) = loss(&params, true)?;
    let theta = params.flatten();
    let mut probe = params.clone();
    let overall = finite_diff_check(
        |flat| {
            probe.assign_flat(flat).map_err(|e| seqattn_tensor::TensorError::Usage(e.to_string()))?;
            loss(&probe, false)
                .map(|(v, _)| v)
                .map_err(|e| seqattn_tensor::TensorError::Usage(e.to_string()))
        },
        &theta,
        &analytic,
        STEP,
    )?;
    let mut per_param = Vec::new();
    let mut offset = 0;
    for (name, p) in params.iter() {
        let n = p.len();
        let worst = overall.rel_errors[offset..offset + n].iter().copied().fold(0.0, f64::max);
        per_param.push((name.to_string(), worst));
        offset += n;
    }
    Ok(ModelReport { per_param, overall })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_geometry() {
        let m = Model::new(toy_config()).unwrap();
        assert_eq!(m.config().encoder.grid().unwrap(), 2);
        assert_eq!(m.config().encoder.depth(), 3);
    }

    #[test]
    fn toy_model_gradients_match() {
        for (label, seed) in [(Label::Sim, 1), (Label::Dis, 2)] {
            let r = check_model(toy_config(), 2, label, 1.0, seed).unwrap();
            assert!(r.passes(), "{:?}", r.per_param);
            assert!(r.per_param.iter().any(|(n, _)| n == "attention.W"));
            assert!(r.per_param.iter().any(|(n, _)| n == "temporal.w"));
        }
    }
}
