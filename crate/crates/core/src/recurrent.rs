//! GRU cells (dense and convolutional) and the stacked recurrence.

use seqattn_tensor::{Graph, Padding, Scalar, Var};

use crate::config::{ModelConfig, StackConfig};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamKind, ParamLayout};

/// Parameter ids of one GRU layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GruIds {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u: ParamId,
    pub bias: Option<[ParamId; 3]>,
}

/// Graph handles of one GRU layer. Kernels are `[k, k, C_in, C_h]` for the
/// convolutional cell and `[C_in, C_h]` matrices for the dense one.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u: Var,
    pub bias: Option<[Var; 3]>,
}

impl GruIds {
    pub fn kernels(&self) -> [ParamId; 6] {
        [self.w_z, self.w_r, self.w, self.u_z, self.u_r, self.u]
    }
}

/// Input channels of each layer: D for the first, the previous layer's
/// channels after that.
pub fn input_channels(cfg: &ModelConfig) -> Vec<usize> {
    let mut cx = cfg.encoder.depth();
    cfg.stack
        .layers
        .iter()
        .map(|l| std::mem::replace(&mut cx, l.channels))
        .collect()
}

pub fn declare(cfg: &ModelConfig, layout: &mut ParamLayout) -> Vec<GruIds> {
    let cins = input_channels(cfg);
    cfg.stack
        .layers
        .iter()
        .zip(cins)
        .enumerate()
        .map(|(i, (l, cx))| {
            let (k, ch) = (l.kernel, l.channels);
            let n = i + 1;
            let mut kern = |suffix: &str, cin: usize| {
                layout.add(
                    format!("layer{n}.{suffix}"),
                    &[k, k, cin, ch],
                    ParamKind::GruKernel {
                        fan_in: k * k * cin,
                        fan_out: k * k * ch,
                    },
                    ParamGroup::Recurrent,
                )
            };
            let w_z = kern("W_z", cx);
            let w_r = kern("W_r", cx);
            let w = kern("W", cx);
            let u_z = kern("U_z", ch);
            let u_r = kern("U_r", ch);
            let u = kern("U", ch);
            let bias = cfg.stack.bias.then(|| {
                ["b_z", "b_r", "b"].map(|s| {
                    layout.add(format!("layer{n}.{s}"), &[ch], ParamKind::Bias, ParamGroup::Recurrent)
                })
            });
            GruIds { w_z, w_r, w, u_z, u_r, u, bias }
        })
        .collect()
}

fn gate<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, bias: Option<Var>) -> Result<Var> {
    let s = g.add(a, b)?;
    Ok(match bias {
        Some(b) => g.add_bias(s, b)?,
        None => s,
    })
}

/// `h = (1 - z) ⊙ h_prev + z ⊙ ĥ`.
fn mix<T: Scalar>(g: &mut Graph<T>, z: Var, h_prev: Var, cand: Var) -> Result<Var> {
    let keep = g.one_minus(z);
    let old = g.mul(keep, h_prev)?;
    let new = g.mul(z, cand)?;
    Ok(g.add(old, new)?)
}

/// Dense GRU step on vectors `x: [C_in]`, `h_prev: [C_h]`.
pub fn fc_gru_step<T: Scalar>(g: &mut Graph<T>, x: Var, h_prev: Var, p: &GruVars) -> Result<Var> {
    let cin = g.numel(x);
    let ch = g.numel(h_prev);
    let xr = g.reshape(x, &[1, cin])?;
    let hr = g.reshape(h_prev, &[1, ch])?;
    let b = |i: usize| p.bias.map(|b| b[i]);
    let lin = |g: &mut Graph<T>, row: Var, m: Var| -> Result<Var> {
        let y = g.matmul(row, m)?;
        Ok(g.reshape(y, &[ch])?)
    };
    let (a, c) = (lin(g, xr, p.w_z)?, lin(g, hr, p.u_z)?);
    let zpre = gate(g, a, c, b(0))?;
    let z = g.sigmoid(zpre);
    let (a, c) = (lin(g, xr, p.w_r)?, lin(g, hr, p.u_r)?);
    let rpre = gate(g, a, c, b(1))?;
    let r = g.sigmoid(rpre);
    let rh = g.mul(r, h_prev)?;
    let rhr = g.reshape(rh, &[1, ch])?;
    let (a, c) = (lin(g, xr, p.w)?, lin(g, rhr, p.u)?);
    let cpre = gate(g, a, c, b(2))?;
    let cand = g.tanh(cpre);
    mix(g, z, h_prev, cand)
}

/// Convolutional GRU step on grids `x: [H, W, C_in]`, `h_prev: [H, W, C_h]`,
/// same-padded.
pub fn conv_gru_step<T: Scalar>(g: &mut Graph<T>, x: Var, h_prev: Var, p: &GruVars) -> Result<Var> {
    let b = |i: usize| p.bias.map(|b| b[i]);
    let conv = |g: &mut Graph<T>, v: Var, k: Var| g.conv2d(v, k, Padding::Same, 1);
    let (a, c) = (conv(g, x, p.w_z)?, conv(g, h_prev, p.u_z)?);
    let zpre = gate(g, a, c, b(0))?;
    let z = g.sigmoid(zpre);
    let (a, c) = (conv(g, x, p.w_r)?, conv(g, h_prev, p.u_r)?);
    let rpre = gate(g, a, c, b(1))?;
    let r = g.sigmoid(rpre);
    let rh = g.mul(r, h_prev)?;
    let (a, c) = (conv(g, x, p.w)?, conv(g, rh, p.u)?);
    let cpre = gate(g, a, c, b(2))?;
    let cand = g.tanh(cpre);
    mix(g, z, h_prev, cand)
}

/// States produced by [`stack_forward`].
#[derive(Clone, Debug, Default)]
pub struct StackTrace {
    /// Per time step, the top layer's output after the output hook.
    pub top: Vec<Var>,
    /// `states[l][t]`: raw hidden state of layer `l`.
    pub states: Vec<Vec<Var>>,
}

/// Check that `h0` matches the grid chain implied by an input of shape
/// `input` before any step is taken.
pub fn check_stack(input: &[usize], h0_shapes: &[&[usize]], layers: usize, cfg: &StackConfig) -> Result<()> {
    let n = cfg.layers.len();
    if layers != n || h0_shapes.len() != n {
        return Err(Error::Config(format!(
            "stack of {n} layers given {layers} parameter blocks and {} initial states",
            h0_shapes.len()
        )));
    }
    if input.len() != 3 {
        return Err(Error::Config(format!("stack input must be a grid, got {input:?}")));
    }
    let mut grid = [input[0], input[1]];
    for (l, (h, lc)) in h0_shapes.iter().zip(&cfg.layers).enumerate() {
        let want = [grid[0], grid[1], lc.channels];
        if *h != want {
            return Err(Error::Config(format!(
                "layer{} initial state {h:?} does not match expected {want:?}",
                l + 1
            )));
        }
        if l + 1 < n && lc.pool > 1 {
            grid = grid.map(|e| e / lc.pool);
            if grid.contains(&0) {
                return Err(Error::Config(format!("pooling after layer{} empties the grid", l + 1)));
            }
        }
    }
    Ok(())
}

/// One time step through every layer. `prev` holds the previous states and
/// is updated in place; returns the top layer's output after the hook.
///
/// `on_output(g, layer, h)` transforms each layer output before it feeds the
/// next layer (or becomes the top output); the recurrent state itself is left
/// untouched. Dropout uses this hook.
pub fn stack_step<T, F>(
    g: &mut Graph<T>,
    x: Var,
    prev: &mut [Var],
    layers: &[GruVars],
    cfg: &StackConfig,
    on_output: &mut F,
) -> Result<Var>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, usize, Var) -> Result<Var>,
{
    let n = cfg.layers.len();
    let mut input = x;
    for (l, (p, lc)) in layers.iter().zip(&cfg.layers).enumerate() {
        let h = conv_gru_step(g, input, prev[l], p)?;
        prev[l] = h;
        let out = on_output(g, l, h)?;
        if l + 1 == n {
            return Ok(out);
        }
        input = if lc.pool > 1 { g.max_pool2d(out, lc.pool)? } else { out };
    }
    Err(Error::Config("empty recurrent stack".into()))
}

/// Run the stack over precomputed `inputs`.
pub fn stack_forward<T, F>(
    g: &mut Graph<T>,
    inputs: &[Var],
    h0: &[Var],
    layers: &[GruVars],
    cfg: &StackConfig,
    mut on_output: F,
) -> Result<StackTrace>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, usize, Var) -> Result<Var>,
{
    if let Some(&x0) = inputs.first() {
        let shapes: Vec<&[usize]> = h0.iter().map(|&h| g.shape(h)).collect();
        check_stack(g.shape(x0), &shapes, layers.len(), cfg)?;
    }
    let mut prev = h0.to_vec();
    let mut trace = StackTrace {
        top: Vec::with_capacity(inputs.len()),
        states: vec![Vec::with_capacity(inputs.len()); cfg.layers.len()],
    };
    for &x in inputs {
        let top = stack_step(g, x, &mut prev, layers, cfg, &mut on_output)?;
        trace.top.push(top);
        for (s, &h) in trace.states.iter_mut().zip(&prev) {
            s.push(h);
        }
    }
    Ok(trace)
}

/// Closed-form size and cost of one recurrent layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCensus {
    pub layer: usize,
    pub c_x: usize,
    pub c_h: usize,
    pub kernel: usize,
    pub grid: usize,
    /// `3·k²·(C_x·C_h + C_h²)`.
    pub params: usize,
    /// Multiplies per time step, `3·H²·k²·(C_x·C_h + C_h²)`.
    pub flops_per_step: usize,
}

pub fn layer_census(cfg: &ModelConfig) -> Result<Vec<LayerCensus>> {
    let grids = cfg.layer_grids()?;
    Ok(cfg
        .stack
        .layers
        .iter()
        .zip(input_channels(cfg))
        .zip(grids)
        .enumerate()
        .map(|(i, ((l, cx), grid))| {
            let k2 = l.kernel * l.kernel;
            let params = 3 * k2 * (cx * l.channels + l.channels * l.channels);
            LayerCensus {
                layer: i + 1,
                c_x: cx,
                c_h: l.channels,
                kernel: l.kernel,
                grid,
                params,
                flops_per_step: params * grid * grid,
            }
        })
        .collect())
}

/// Recurrent kernel parameter count, bias-free.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(layer_census(cfg)?.iter().map(|c| c.params).sum())
}

/// Multiply count of the recurrent stack over `t` steps.
pub fn flop_estimate(cfg: &ModelConfig, t: usize) -> Result<usize> {
    Ok(t * layer_census(cfg)?.iter().map(|c| c.flops_per_step).sum::<usize>())
}

/// Recurrent kernel elements actually declared per layer, read off a layout.
pub fn allocated_kernel_elements(layout: &ParamLayout, layers: usize) -> Vec<usize> {
    (1..=layers)
        .map(|n| {
            let prefix = format!("layer{n}.");
            layout
                .specs()
                .iter()
                .filter(|s| s.name.starts_with(&prefix) && matches!(s.kind, ParamKind::GruKernel { .. }))
                .map(|s| s.shape.iter().product::<usize>())
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{LayerConfig, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use seqattn_tensor::Tensor;

    fn rand_t(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale)).unwrap()
    }

    fn conv_vars(g: &mut Graph<f64>, k: usize, cin: usize, ch: usize, rng: &mut ChaCha8Rng) -> GruVars {
        let mut mk = |c: usize| g.leaf(rand_t(&[k, k, c, ch], 0.5, rng));
        GruVars {
            w_z: mk(cin),
            w_r: mk(cin),
            w: mk(cin),
            u_z: mk(ch),
            u_r: mk(ch),
            u: mk(ch),
            bias: None,
        }
    }

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    #[test]
    fn zero_params_zero_state_is_a_fixed_point() {
        let mut g = Graph::<f64>::new();
        let z = |g: &mut Graph<f64>, s: &[usize]| g.leaf(Tensor::zeros(s).unwrap());
        let p = GruVars {
            w_z: z(&mut g, &[3, 2]),
            w_r: z(&mut g, &[3, 2]),
            w: z(&mut g, &[3, 2]),
            u_z: z(&mut g, &[2, 2]),
            u_r: z(&mut g, &[2, 2]),
            u: z(&mut g, &[2, 2]),
            bias: None,
        };
        let x = g.leaf(Tensor::from_slice(&[0.3, -0.2, 0.9]).unwrap());
        let h = z(&mut g, &[2]);
        let out = fc_gru_step(&mut g, x, h, &p).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_update_gate_takes_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let mut leaf = |s: &[usize], v: Option<f64>| match v {
            Some(c) => g.leaf(Tensor::full(s, c).unwrap()),
            None => g.leaf(rand_t(s, 0.5, &mut rng)),
        };
        let p = GruVars {
            w_z: leaf(&[2, 3], Some(0.0)),
            w_r: leaf(&[2, 3], None),
            w: leaf(&[2, 3], None),
            u_z: leaf(&[3, 3], Some(0.0)),
            u_r: leaf(&[3, 3], None),
            u: leaf(&[3, 3], None),
            bias: Some([leaf(&[3], Some(80.0)), leaf(&[3], Some(0.0)), leaf(&[3], Some(0.0))]),
        };
        let x = leaf(&[2], None);
        let h = leaf(&[3], None);
        let out = fc_gru_step(&mut g, x, h, &p).unwrap();
        // Candidate computed by hand with r = σ(W_r x + U_r h).
        let (xv, hv) = (g.value(x).clone(), g.value(h).clone());
        let mat = |v: Var, i: usize, j: usize| g.value(v).get(&[i, j]).unwrap();
        for j in 0..3 {
            let r: Vec<f64> = (0..3)
                .map(|jj| {
                    sig((0..2).map(|i| xv.data()[i] * mat(p.w_r, i, jj)).sum::<f64>()
                        + (0..3).map(|i| hv.data()[i] * mat(p.u_r, i, jj)).sum::<f64>())
                })
                .collect();
            let cand = ((0..2).map(|i| xv.data()[i] * mat(p.w, i, j)).sum::<f64>()
                + (0..3).map(|i| r[i] * hv.data()[i] * mat(p.u, i, j)).sum::<f64>())
            .tanh();
            assert!((g.value(out).data()[j] - cand).abs() < 1e-12);
        }
    }

    #[test]
    fn fc_step_matches_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cin, ch) = (4, 3);
        let mats: Vec<Tensor<f64>> = [cin, cin, cin, ch, ch, ch]
            .iter()
            .map(|&r| rand_t(&[r, ch], 1.0, &mut rng))
            .collect();
        let xv = rand_t(&[cin], 1.0, &mut rng);
        let hv = rand_t(&[ch], 1.0, &mut rng);
        let mut g = Graph::<f64>::new();
        let v: Vec<Var> = mats.iter().map(|m| g.leaf(m.clone())).collect();
        let p = GruVars { w_z: v[0], w_r: v[1], w: v[2], u_z: v[3], u_r: v[4], u: v[5], bias: None };
        let (x, h) = (g.leaf(xv.clone()), g.leaf(hv.clone()));
        let out = fc_gru_step(&mut g, x, h, &p).unwrap();
        let lin = |m: &Tensor<f64>, vec: &[f64], j: usize| -> f64 {
            vec.iter().enumerate().map(|(i, a)| a * m.get(&[i, j]).unwrap()).sum()
        };
        let z: Vec<f64> = (0..ch).map(|j| sig(lin(&mats[0], xv.data(), j) + lin(&mats[3], hv.data(), j))).collect();
        let r: Vec<f64> = (0..ch).map(|j| sig(lin(&mats[1], xv.data(), j) + lin(&mats[4], hv.data(), j))).collect();
        let rh: Vec<f64> = r.iter().zip(hv.data()).map(|(a, b)| a * b).collect();
        for j in 0..ch {
            let c = (lin(&mats[2], xv.data(), j) + lin(&mats[5], &rh, j)).tanh();
            let want = (1.0 - z[j]) * hv.data()[j] + z[j] * c;
            assert!((g.value(out).data()[j] - want).abs() < 1e-12);
        }
    }

    /// Direct loop evaluation of the convolutional cell.
    fn conv_oracle(x: &Tensor<f64>, h: &Tensor<f64>, k: [&Tensor<f64>; 6]) -> Tensor<f64> {
        let (hh, ww, ch) = (x.shape()[0], x.shape()[1], h.shape()[2]);
        let conv = |inp: &Tensor<f64>, ker: &Tensor<f64>| -> Vec<f64> {
            let ks = ker.shape()[0];
            let pad = (ks - 1) / 2;
            let cin = inp.shape()[2];
            let mut out = vec![0.0; hh * ww * ch];
            for y in 0..hh {
                for xx in 0..ww {
                    for o in 0..ch {
                        let mut s = 0.0;
                        for dy in 0..ks {
                            for dx in 0..ks {
                                let (iy, ix) = (y + dy, xx + dx);
                                if iy < pad || ix < pad || iy - pad >= hh || ix - pad >= ww {
                                    continue;
                                }
                                for c in 0..cin {
                                    s += inp.get(&[iy - pad, ix - pad, c]).unwrap() * ker.get(&[dy, dx, c, o]).unwrap();
                                }
                            }
                        }
                        out[(y * ww + xx) * ch + o] = s;
                    }
                }
            }
            out
        };
        let add = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(p, q)| p + q).collect::<Vec<_>>();
        let z: Vec<f64> = add(conv(x, k[0]), conv(h, k[3])).into_iter().map(sig).collect();
        let r: Vec<f64> = add(conv(x, k[1]), conv(h, k[4])).into_iter().map(sig).collect();
        let rh = Tensor::new(h.shape(), r.iter().zip(h.data()).map(|(a, b)| a * b).collect()).unwrap();
        let c: Vec<f64> = add(conv(x, k[2]), conv(&rh, k[5])).into_iter().map(f64::tanh).collect();
        let out = (0..h.len()).map(|i| (1.0 - z[i]) * h.data()[i] + z[i] * c[i]).collect();
        Tensor::new(h.shape(), out).unwrap()
    }

    #[test]
    fn conv_step_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let p = conv_vars(&mut g, 3, 2, 3, &mut rng);
        let xt = rand_t(&[4, 4, 2], 1.0, &mut rng);
        let ht = rand_t(&[4, 4, 3], 1.0, &mut rng);
        let (x, h) = (g.leaf(xt.clone()), g.leaf(ht.clone()));
        let out = conv_gru_step(&mut g, x, h, &p).unwrap();
        let ks = [p.w_z, p.w_r, p.w, p.u_z, p.u_r, p.u].map(|v| g.value(v).clone());
        let want = conv_oracle(&xt, &ht, [&ks[0], &ks[1], &ks[2], &ks[3], &ks[4], &ks[5]]);
        for (a, b) in g.value(out).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_step_zero_input_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::<f64>::new();
        let mut p = conv_vars(&mut g, 3, 2, 3, &mut rng);
        for v in [&mut p.w_z, &mut p.w_r, &mut p.w] {
            *v = g.leaf(Tensor::zeros(&[3, 3, 2, 3]).unwrap());
        }
        let x = g.leaf(Tensor::zeros(&[4, 4, 2]).unwrap());
        let h = g.leaf(Tensor::zeros(&[4, 4, 3]).unwrap());
        let out = conv_gru_step(&mut g, x, h, &p).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_step_preserves_grid_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in [1, 3, 5, 9] {
            let mut g = Graph::<f64>::new();
            let p = conv_vars(&mut g, k, 2, 3, &mut rng);
            let ht = rand_t(&[4, 4, 3], 1.0, &mut rng);
            let x = g.leaf(rand_t(&[4, 4, 2], 1.0, &mut rng));
            let h = g.leaf(ht.clone());
            let out = conv_gru_step(&mut g, x, h, &p).unwrap();
            assert_eq!(g.shape(out), &[4, 4, 3]);
            // Convex combination of h_prev and a tanh candidate in (-1, 1).
            for (o, hp) in g.value(out).data().iter().zip(ht.data()) {
                assert!(o.abs() <= hp.abs().max(1.0));
            }
        }
    }

    #[test]
    fn conv_step_with_unit_kernels_equals_fc_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::<f32>::new();
        let mut kernels = Vec::new();
        let mut mats = Vec::new();
        for cin in [5, 5, 5, 4, 4, 4] {
            let t = rand_t(&[1, 1, cin, 4], 1.0, &mut rng).cast::<f32>();
            mats.push(g.leaf(t.reshape(&[cin, 4]).unwrap()));
            kernels.push(g.leaf(t));
        }
        let pc = GruVars { w_z: kernels[0], w_r: kernels[1], w: kernels[2], u_z: kernels[3], u_r: kernels[4], u: kernels[5], bias: None };
        let pf = GruVars { w_z: mats[0], w_r: mats[1], w: mats[2], u_z: mats[3], u_r: mats[4], u: mats[5], bias: None };
        let mut hc = g.leaf(Tensor::zeros(&[1, 1, 4]).unwrap());
        let mut hf = g.leaf(Tensor::zeros(&[4]).unwrap());
        for _ in 0..10 {
            let xt = rand_t(&[5], 1.0, &mut rng).cast::<f32>();
            let xc = g.leaf(xt.reshape(&[1, 1, 5]).unwrap());
            let xf = g.leaf(xt);
            hc = conv_gru_step(&mut g, xc, hc, &pc).unwrap();
            hf = fc_gru_step(&mut g, xf, hf, &pf).unwrap();
            assert_eq!(g.value(hc).data(), g.value(hf).data());
        }
    }

    #[test]
    fn stack_matches_manual_unrolling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::<f64>::new();
        let cfg = StackConfig {
            layers: vec![
                LayerConfig { channels: 3, kernel: 3, pool: 2 },
                LayerConfig { channels: 2, kernel: 1, pool: 1 },
            ],
            bias: false,
        };
        let l1 = conv_vars(&mut g, 3, 2, 3, &mut rng);
        let l2 = conv_vars(&mut g, 1, 3, 2, &mut rng);
        let xs: Vec<Var> = (0..3).map(|_| g.leaf(rand_t(&[4, 4, 2], 1.0, &mut rng))).collect();
        let h0 = [g.leaf(rand_t(&[4, 4, 3], 1.0, &mut rng)), g.leaf(rand_t(&[2, 2, 2], 1.0, &mut rng))];
        let trace = stack_forward(&mut g, &xs, &h0, &[l1, l2], &cfg, |_, _, h| Ok(h)).unwrap();
        let (mut a, mut b) = (h0[0], h0[1]);
        for (t, &x) in xs.iter().enumerate() {
            a = conv_gru_step(&mut g, x, a, &l1).unwrap();
            let pooled = g.max_pool2d(a, 2).unwrap();
            b = conv_gru_step(&mut g, pooled, b, &l2).unwrap();
            assert_eq!(g.value(trace.top[t]), g.value(b));
            assert_eq!(g.value(trace.states[0][t]), g.value(a));
        }
        // Wrong initial-state geometry fails before stepping.
        let bad = [h0[0], g.leaf(Tensor::zeros(&[4, 4, 2]).unwrap())];
        let before = g.len();
        assert!(matches!(
            stack_forward(&mut g, &xs, &bad, &[l1, l2], &cfg, |_, _, h| Ok(h)),
            Err(Error::Config(_))
        ));
        assert_eq!(g.len(), before);
    }

    #[test]
    fn param_count_examples() {
        let mut cfg = ModelConfig::desk();
        cfg.encoder.channels = vec![4];
        cfg.stack = StackConfig::with_kernels(&[8], &[5], 1);
        assert_eq!(param_count(&cfg).unwrap(), 7200);
        cfg.stack = StackConfig::with_kernels(&[8], &[1], 1);
        cfg.collapse_attention = true;
        assert_eq!(param_count(&cfg).unwrap(), 3 * (4 * 8 + 64));
        assert_eq!(flop_estimate(&cfg, 20).unwrap(), 20 * 3 * (4 * 8 + 64));
    }

    #[test]
    fn census_matches_allocation_for_every_variant() {
        for base in [ModelConfig::desk(), ModelConfig::paper()] {
            for v in Variant::ALL {
                let mut cfg = base.clone();
                cfg.apply_variant(v);
                let mut layout = ParamLayout::new();
                declare(&cfg, &mut layout);
                let alloc = allocated_kernel_elements(&layout, cfg.stack.layers.len());
                let formula: Vec<usize> = layer_census(&cfg).unwrap().iter().map(|c| c.params).collect();
                assert_eq!(alloc, formula, "{v}");
            }
        }
    }
}
