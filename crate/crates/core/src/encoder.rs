//! Stand-in convolutional encoder producing a K×K×D feature cube per frame.

use seqattn_tensor::{Graph, Scalar, Tensor, TensorError, Var};

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamKind, ParamLayout};

/// Colour channels of every frame.
pub const FRAME_CHANNELS: usize = 3;

/// Per-frame K×K×D activation block.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCube<T> {
    cube: Tensor<T>,
}

impl<T: Scalar> FeatureCube<T> {
    pub fn new(cube: Tensor<T>) -> Result<Self> {
        let s = cube.shape();
        if s.len() != 3 || s[0] != s[1] {
            return Err(TensorError::Dimension(format!("feature cube must be K x K x D, got {s:?}")).into());
        }
        Ok(Self { cube })
    }

    pub fn k(&self) -> usize {
        self.cube.shape()[0]
    }

    pub fn depth(&self) -> usize {
        self.cube.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.cube
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.cube
    }

    /// Feature slice at row-major cell `index` (0 is the top-left cell).
    pub fn slice(&self, index: usize) -> Result<Tensor<T>> {
        let cells = self.k() * self.k();
        if index >= cells {
            return Err(TensorError::Index { index, extent: cells }.into());
        }
        let d = self.depth();
        Ok(Tensor::from_slice(&self.cube.data()[index * d..(index + 1) * d])?)
    }

    /// Rebuild a cube from its K² slices in row-major order.
    pub fn from_slices(slices: &[Tensor<T>]) -> Result<Self> {
        let k = (slices.len() as f64).sqrt().round() as usize;
        if k * k != slices.len() || k == 0 {
            return Err(Error::Usage(format!("{} slices do not form a square grid", slices.len())));
        }
        let stacked = Tensor::stack(slices)?;
        let d = stacked.shape()[1];
        Self::new(stacked.reshape(&[k, k, d])?)
    }

    /// Mean over the K² slices.
    pub fn mean_slice(&self) -> Tensor<T> {
        let d = self.depth();
        let cells = self.k() * self.k();
        let inv = T::from_f64_lossy(1.0 / cells as f64);
        let mut acc = vec![T::zero(); d];
        for cell in self.cube.data().chunks_exact(d) {
            acc.iter_mut().zip(cell).for_each(|(a, &v)| *a = *a + v);
        }
        Tensor::from_slice(&acc.into_iter().map(|a| a * inv).collect::<Vec<_>>())
            .expect("depth is positive")
    }
}

/// Conv weight and bias ids for each encoder layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderIds {
    pub layers: Vec<(ParamId, ParamId)>,
}

pub fn declare(cfg: &EncoderConfig, layout: &mut ParamLayout) -> EncoderIds {
    let k = cfg.kernel;
    let mut cin = FRAME_CHANNELS;
    let mut layers = Vec::new();
    for (i, &cout) in cfg.channels.iter().enumerate() {
        let w = layout.add(
            format!("encoder.conv{}.W", i + 1),
            &[k, k, cin, cout],
            ParamKind::Weight {
                fan_in: k * k * cin,
                fan_out: k * k * cout,
            },
            ParamGroup::Encoder,
        );
        let b = layout.add(
            format!("encoder.conv{}.b", i + 1),
            &[cout],
            ParamKind::Bias,
            ParamGroup::Encoder,
        );
        layers.push((w, b));
        cin = cout;
    }
    EncoderIds { layers }
}

/// Graph handles for the encoder weights.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub layers: Vec<(Var, Var)>,
}

/// conv -> bias -> tanh per layer. `frame` must be `[A, B, 3]`.
pub fn encode_graph<T: Scalar>(
    g: &mut Graph<T>,
    frame: Var,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let expect = [cfg.frame.0, cfg.frame.1, FRAME_CHANNELS];
    if g.shape(frame) != expect {
        return Err(TensorError::Dimension(format!(
            "frame has shape {:?}, encoder expects {:?}",
            g.shape(frame),
            expect
        ))
        .into());
    }
    let mut x = frame;
    for &(w, b) in &vars.layers {
        let y = g.conv2d(x, w, cfg.padding, cfg.stride)?;
        let y = g.add_bias(y, b)?;
        x = g.tanh(y);
    }
    Ok(x)
}

/// Eager encode of a single frame.
pub fn encode<T: Scalar>(
    frame: &Tensor<T>,
    weights: &[(Tensor<T>, Tensor<T>)],
    cfg: &EncoderConfig,
) -> Result<FeatureCube<T>> {
    let mut g = Graph::new();
    let f = g.leaf(frame.clone());
    let vars = EncoderVars {
        layers: weights
            .iter()
            .map(|(w, b)| (g.leaf(w.clone()), g.leaf(b.clone())))
            .collect(),
    };
    let out = encode_graph(&mut g, f, &vars, cfg)?;
    FeatureCube::new(g.value(out).clone())
}
