//! Full branch network: encoder, spatial attention, recurrent stack and
//! temporal pooling, plus the two-branch pair forward.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use seqattn_tensor::{Graph, Scalar, Tensor, Var};

use crate::attention::{self, InitVars};
use crate::config::{AttentionMode, ModelConfig, TemporalPool};
use crate::encoder::{self, EncoderIds, EncoderVars};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamId, ParamKind, ParamLayout, ParamSet};
use crate::pooling;
use crate::recurrent::{self, GruIds, GruVars};
use crate::siamese::{self, Label, PairLoss};

/// Parameter ids of every sub-network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelIds {
    pub encoder: EncoderIds,
    /// Absent in muted mode.
    pub attention: Option<ParamId>,
    pub init_w1: ParamId,
    pub init_b1: ParamId,
    pub init_heads: Vec<(ParamId, ParamId)>,
    pub layers: Vec<GruIds>,
    /// Present when training pools with temporal attention.
    pub temporal: Option<ParamId>,
    pub head_v: ParamId,
    pub head_c: ParamId,
}

/// A validated configuration with its parameter layout.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: ParamLayout,
    ids: ModelIds,
    /// `[grid, grid, C]` per layer.
    state_shapes: Vec<[usize; 3]>,
    cells: usize,
}

/// Inverted dropout with a private stream.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub p: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let scale = T::from_f64_lossy(1.0 / (1.0 - self.p));
        let shape = g.shape(x).to_vec();
        let p = self.p;
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(&shape, |_| if rng.gen::<f64>() < p { T::zero() } else { scale })?;
        let m = g.leaf(mask);
        Ok(g.mul(x, m)?)
    }
}

/// Graph nodes produced by one branch.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    pub pooled: Var,
    /// Location weights `m_t`, one `[K²]` node per frame.
    pub traces: Vec<Var>,
    /// Temporal weights `[T]` when attention pooling is used.
    pub alpha: Option<Var>,
    /// Top-layer outputs per frame (after dropout in training).
    pub top: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct PairOutput {
    pub s: Var,
    pub loss: PairLoss,
    pub a: BranchOutput,
    pub b: BranchOutput,
}

/// Plain values of one branch in evaluation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation {
    pub pooled: Vec<f32>,
    pub traces: Vec<Vec<f32>>,
    pub alpha: Option<Vec<f32>>,
    /// Flattened top-layer state per frame.
    pub top: Vec<Vec<f32>>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::new();
        let enc = encoder::declare(&config.encoder, &mut layout);
        let grids = config.layer_grids()?;
        let state_shapes: Vec<[usize; 3]> = grids
            .iter()
            .zip(&config.stack.layers)
            .map(|(&g, l)| [g, g, l.channels])
            .collect();
        let k = config.encoder.grid()?;
        let cells = k * k;
        let top = *state_shapes.last().expect("validated non-empty");
        let feat = top.iter().product::<usize>();
        let attention = (config.attention == AttentionMode::Soft).then(|| {
            layout.add(
                "attention.W",
                &[feat, cells],
                ParamKind::Weight { fan_in: feat, fan_out: cells },
                ParamGroup::Attention,
            )
        });
        let d = config.encoder.depth();
        let hid = config.init_hidden;
        let init_w1 = layout.add(
            "init.W1",
            &[d, hid],
            ParamKind::Weight { fan_in: d, fan_out: hid },
            ParamGroup::Init,
        );
        let init_b1 = layout.add("init.b1", &[hid], ParamKind::Bias, ParamGroup::Init);
        let init_heads = state_shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n = s.iter().product::<usize>();
                let w = layout.add(
                    format!("init.layer{}.W", i + 1),
                    &[hid, n],
                    ParamKind::Weight { fan_in: hid, fan_out: n },
                    ParamGroup::Init,
                );
                let b = layout.add(format!("init.layer{}.b", i + 1), &[n], ParamKind::Bias, ParamGroup::Init);
                (w, b)
            })
            .collect();
        let layers = recurrent::declare(&config, &mut layout);
        let temporal = matches!(config.pool, TemporalPool::Attention | TemporalPool::Fisher).then(|| {
            layout.add(
                "temporal.w",
                &[feat, 1],
                ParamKind::Weight { fan_in: feat, fan_out: 1 },
                ParamGroup::Temporal,
            )
        });
        let head_v = layout.add(
            "head.v",
            &[feat],
            ParamKind::Weight { fan_in: feat, fan_out: 1 },
            ParamGroup::Head,
        );
        let head_c = layout.add("head.c", &[1], ParamKind::Bias, ParamGroup::Head);
        Ok(Self {
            config,
            layout,
            ids: ModelIds {
                encoder: enc,
                attention,
                init_w1,
                init_b1,
                init_heads,
                layers,
                temporal,
                head_v,
                head_c,
            },
            state_shapes,
            cells,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn ids(&self) -> &ModelIds {
        &self.ids
    }

    /// Number of spatial cells K².
    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn state_shapes(&self) -> &[[usize; 3]] {
        &self.state_shapes
    }

    /// Length of the pooled representation.
    pub fn feature_dim(&self) -> usize {
        self.state_shapes.last().expect("non-empty").iter().product()
    }

    /// Forward one sequence through a branch. `dropout` is `None` in
    /// evaluation mode.
    pub fn forward_branch<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        frames: &[Tensor<T>],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<BranchOutput> {
        if frames.is_empty() {
            return Err(Error::Usage("sequence has no frames".into()));
        }
        let ids = &self.ids;
        let enc = EncoderVars {
            layers: ids.encoder.layers.iter().map(|&(w, b)| (p.var(w), p.var(b))).collect(),
        };
        let mut cubes = Vec::with_capacity(frames.len());
        for f in frames {
            let x = g.leaf(f.clone());
            cubes.push(encoder::encode_graph(g, x, &enc, &self.config.encoder)?);
        }
        let init = InitVars {
            w1: p.var(ids.init_w1),
            b1: p.var(ids.init_b1),
            heads: ids.init_heads.iter().map(|&(w, b)| (p.var(w), p.var(b))).collect(),
        };
        let mut prev = attention::init_hidden(g, &cubes, &init, &self.state_shapes)?;
        let gru: Vec<GruVars> = ids
            .layers
            .iter()
            .map(|l| GruVars {
                w_z: p.var(l.w_z),
                w_r: p.var(l.w_r),
                w: p.var(l.w),
                u_z: p.var(l.u_z),
                u_r: p.var(l.u_r),
                u: p.var(l.u),
                bias: l.bias.map(|b| b.map(|id| p.var(id))),
            })
            .collect();
        let input_shape = if self.config.collapse_attention {
            [1, 1, self.config.encoder.depth()]
        } else {
            let k = self.config.encoder.grid()?;
            [k, k, self.config.encoder.depth()]
        };
        {
            let shapes: Vec<&[usize]> = prev.iter().map(|&h| g.shape(h)).collect();
            recurrent::check_stack(&input_shape, &shapes, gru.len(), &self.config.stack)?;
        }
        let top_index = gru.len() - 1;
        let mut traces = Vec::with_capacity(frames.len());
        let mut top = Vec::with_capacity(frames.len());
        for &cube in &cubes {
            let m = match ids.attention {
                Some(w) => attention::attend_weights(g, prev[top_index], p.var(w))?,
                None => attention::muted_weights(g, self.cells),
            };
            traces.push(m);
            let x = if self.config.collapse_attention {
                attention::collapse(g, cube, m)?
            } else {
                attention::blend(g, cube, m)?
            };
            let mut hook = |g: &mut Graph<T>, _l: usize, h: Var| -> Result<Var> {
                match dropout.as_deref_mut() {
                    Some(d) => d.apply(g, h),
                    None => Ok(h),
                }
            };
            top.push(recurrent::stack_step(g, x, &mut prev, &gru, &self.config.stack, &mut hook)?);
        }
        let stacked = pooling::stack_states(g, &top)?;
        let (pooled, alpha) = match (self.config.pool, ids.temporal) {
            (TemporalPool::Mean, _) => (pooling::mean_pool(g, stacked)?, None),
            (TemporalPool::Max, _) => (pooling::max_pool(g, stacked)?, None),
            (_, Some(w)) => {
                let alpha = pooling::temporal_weights(g, stacked, p.var(w))?;
                (pooling::attention_pool(g, stacked, alpha)?, Some(alpha))
            }
            (_, None) => return Err(Error::Model("attention pooling without temporal weights".into())),
        };
        Ok(BranchOutput { pooled, traces, alpha, top })
    }

    /// Both branches with the same bound parameters, the head and the loss.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_pair<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        a: &[Tensor<T>],
        b: &[Tensor<T>],
        label: Label,
        lambda: f64,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<PairOutput> {
        let oa = self.forward_branch(g, p, a, dropout.as_deref_mut())?;
        let ob = self.forward_branch(g, p, b, dropout.as_deref_mut())?;
        let s = siamese::similarity(g, oa.pooled, ob.pooled, p.var(self.ids.head_v), p.var(self.ids.head_c))?;
        let loss = siamese::pair_loss(g, s, label, &oa.traces, &ob.traces, lambda)?;
        Ok(PairOutput { s, loss, a: oa, b: ob })
    }

    /// Evaluation-mode forward returning plain values.
    pub fn represent(&self, params: &ParamSet<f32>, frames: &[Tensor<f32>]) -> Result<Representation> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let out = self.forward_branch(&mut g, &bound, frames, None)?;
        let vals = |v: Var| g.value(v).data().to_vec();
        Ok(Representation {
            pooled: vals(out.pooled),
            traces: out.traces.iter().map(|&m| vals(m)).collect(),
            alpha: out.alpha.map(vals),
            top: out.top.iter().map(|&h| vals(h)).collect(),
        })
    }

    /// Similarity of two sequences in evaluation mode.
    pub fn similarity(&self, params: &ParamSet<f32>, a: &[Tensor<f32>], b: &[Tensor<f32>]) -> Result<f32> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let out = self.forward_pair(&mut g, &bound, a, b, Label::Sim, 0.0, None)?;
        Ok(g.value(out.s).data()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{StackConfig, Variant};
    use crate::params::InitScheme;
    use rand::SeedableRng;

    fn toy_config() -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.encoder.frame = (8, 8);
        c.encoder.channels = vec![3, 3];
        // 8 -> 4 -> 2: K = 2, D = 3.
        c.stack = StackConfig::with_kernels(&[2, 2], &[3, 3], 1);
        c.init_hidden = 3;
        c
    }

    fn frames(n: usize, seed: u64, shape: (usize, usize)) -> Vec<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor::from_fn(&[shape.0, shape.1, 3], |_| rng.gen_range(0.0..1.0)).unwrap())
            .collect()
    }

    fn params(model: &Model, seed: u64) -> ParamSet<f32> {
        ParamSet::init(model.layout(), InitScheme::Scaled, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn self_pair_gives_identical_representations() {
        let model = Model::new(toy_config()).unwrap();
        let p = params(&model, 1);
        let f = frames(4, 2, (8, 8));
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let out = model.forward_pair(&mut g, &bound, &f, &f, Label::Sim, 1.0, None).unwrap();
        assert_eq!(g.value(out.a.pooled), g.value(out.b.pooled));
    }

    #[test]
    fn swapping_branches_keeps_similarity() {
        let model = Model::new(toy_config()).unwrap();
        let p = params(&model, 3);
        let (a, b) = (frames(3, 4, (8, 8)), frames(5, 5, (8, 8)));
        assert_eq!(model.similarity(&p, &a, &b).unwrap(), model.similarity(&p, &b, &a).unwrap());
    }

    #[test]
    fn one_parameter_copy_for_both_branches() {
        let model = Model::new(toy_config()).unwrap();
        let p = params(&model, 6);
        let census: usize = model.layout().specs().iter().map(|s| s.shape.iter().product::<usize>()).sum();
        assert_eq!(p.element_count(), census);
        let mut g = Graph::new();
        let before = g.len();
        let bound = p.bind(&mut g);
        assert_eq!(g.len() - before, model.layout().len());
        let f = frames(2, 7, (8, 8));
        let n_after_bind = g.len();
        model.forward_pair(&mut g, &bound, &f, &f, Label::Dis, 1.0, None).unwrap();
        // No further parameter-sized leaves appear during the pair forward.
        assert!(g.len() > n_after_bind);
    }

    #[test]
    fn traces_and_alpha_are_normalized() {
        let model = Model::new(toy_config()).unwrap();
        let p = params(&model, 8);
        let r = model.represent(&p, &frames(6, 9, (8, 8))).unwrap();
        assert_eq!(r.traces.len(), 6);
        for m in &r.traces {
            assert_eq!(m.len(), 4);
            assert!((m.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let a = r.alpha.unwrap();
        assert!((a.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(r.pooled.len(), model.feature_dim());
    }

    #[test]
    fn muted_equals_zero_attention_projection() {
        let soft = Model::new(toy_config()).unwrap();
        let mut cfg = toy_config();
        cfg.attention = AttentionMode::Muted;
        let muted = Model::new(cfg).unwrap();
        let mut p = params(&soft, 10);
        let att = soft.ids().attention.unwrap();
        p.get_mut(att).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let names = muted.layout().specs().iter().map(|s| s.name.clone()).collect();
        let tensors = muted
            .layout()
            .specs()
            .iter()
            .map(|s| p.by_name(&s.name).unwrap().clone())
            .collect();
        let pm = ParamSet::from_parts(names, tensors).unwrap();
        let f = frames(4, 11, (8, 8));
        assert_eq!(soft.represent(&p, &f).unwrap(), muted.represent(&pm, &f).unwrap());
        let r = muted.represent(&pm, &frames(3, 12, (8, 8))).unwrap();
        assert!(r.traces.iter().flatten().all(|&v| v == 0.25));
    }

    #[test]
    fn every_variant_runs_on_the_desk_geometry() {
        for v in Variant::ALL {
            let mut cfg = ModelConfig::desk();
            cfg.apply_variant(v);
            let model = Model::new(cfg).unwrap();
            let p = params(&model, 13);
            let r = model.represent(&p, &frames(2, 14, (32, 32))).unwrap();
            assert_eq!(r.pooled.len(), model.feature_dim(), "{v}");
        }
    }

    #[test]
    fn dropout_changes_training_forward_only() {
        let model = Model::new(toy_config()).unwrap();
        let p = params(&model, 15);
        let f = frames(3, 16, (8, 8));
        let eval_a = model.represent(&p, &f).unwrap();
        let eval_b = model.represent(&p, &f).unwrap();
        assert_eq!(eval_a, eval_b);
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let mut d = Dropout { p: 0.5, rng: ChaCha8Rng::seed_from_u64(1) };
        let out = model.forward_branch(&mut g, &bound, &f, Some(&mut d)).unwrap();
        assert_ne!(g.value(out.pooled).data(), eval_a.pooled.as_slice());
    }
}
