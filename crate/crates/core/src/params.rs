//! Named parameter tensors, their initialization, and binding onto a graph.

use rand::Rng;
use seqattn_tensor::{Gradients, Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Attention,
    Init,
    Recurrent,
    Temporal,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Recurrent W/U kernel.
    GruKernel { fan_in: usize, fan_out: usize },
    Weight { fan_in: usize, fan_out: usize },
    Bias,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub group: ParamGroup,
}

/// Initialization of recurrent kernels. Everything else uses the scaled rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitScheme {
    /// GRU kernels ~ U[-1, 1].
    #[default]
    Paper,
    /// GRU kernels ~ U[-a, a], a = gain * sqrt(6 / (fan_in + fan_out)).
    Scaled,
}

impl std::str::FromStr for InitScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "scaled" => Ok(Self::Scaled),
            other => Err(Error::Config(format!("unknown init scheme '{other}'"))),
        }
    }
}

impl std::fmt::Display for InitScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Paper => "paper",
            Self::Scaled => "scaled",
        })
    }
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Ordered parameter declarations. Order is canonical: it fixes RNG draw order
/// at init and gradient merge order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        kind: ParamKind,
        group: ParamGroup,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(self.specs.iter().all(|s| s.name != name), "duplicate {name}");
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            kind,
            group,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.specs.len()).map(ParamId)
    }
}

/// One tensor per [`ParamLayout`] entry: the single copy of every weight.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn init(layout: &ParamLayout, scheme: InitScheme, rng: &mut impl Rng) -> Result<Self> {
        Self::init_with_gain(layout, scheme, 1.0, rng)
    }

    /// `gain` multiplies the Glorot bound of the GRU kernels under
    /// [`InitScheme::Scaled`] and is ignored otherwise.
    pub fn init_with_gain(layout: &ParamLayout, scheme: InitScheme, gain: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(gain.is_finite() && gain > 0.0) {
            return Err(Error::Config(format!("init gain must be positive, got {gain}")));
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for spec in layout.specs() {
            let bound = match spec.kind {
                ParamKind::GruKernel { fan_in, fan_out } => match scheme {
                    InitScheme::Paper => Some(1.0),
                    InitScheme::Scaled => Some(gain * glorot(fan_in, fan_out)),
                },
                ParamKind::Weight { fan_in, fan_out } => Some(glorot(fan_in, fan_out)),
                ParamKind::Bias => None,
            };
            let t = match bound {
                Some(a) => Tensor::from_fn(&spec.shape, |_| {
                    T::from_f64_lossy(rng.gen_range(-a..=a))
                })?,
                None => Tensor::zeros(&spec.shape)?,
            };
            tensors.push(t);
        }
        Ok(Self {
            names: layout.specs().iter().map(|s| s.name.clone()).collect(),
            tensors,
        })
    }

    pub fn zeros(layout: &ParamLayout) -> Result<Self> {
        Ok(Self {
            names: layout.specs().iter().map(|s| s.name.clone()).collect(),
            tensors: layout
                .specs()
                .iter()
                .map(|s| Tensor::zeros(&s.shape))
                .collect::<Result<_, _>>()?,
        })
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Model(format!(
                "{} names for {} tensors",
                names.len(),
                tensors.len()
            )));
        }
        Ok(Self { names, tensors })
    }

    /// Check names and shapes against a layout.
    pub fn conforms_to(&self, layout: &ParamLayout) -> Result<()> {
        if self.len() != layout.len() {
            return Err(Error::Model(format!(
                "parameter set has {} tensors, layout declares {}",
                self.len(),
                layout.len()
            )));
        }
        for (spec, (name, t)) in layout.specs().iter().zip(self.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Model(format!(
                    "parameter {name} {:?} does not match layout entry {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total stored scalar count.
    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.element_count() {
            return Err(Error::Usage(format!(
                "flat vector has {} values, parameters need {}",
                flat.len(),
                self.element_count()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// In-place `self += other`, tensor by tensor in canonical order.
    pub fn accumulate(&mut self, other: &ParamSet<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data_mut()
                .iter_mut()
                .zip(b.data())
                .for_each(|(x, &y)| *x = *x + y);
        }
    }

    /// Register every tensor as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.leaf(t.clone())).collect(),
        }
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient for every parameter, zeros for those the loss does not touch.
    pub fn gradients<T: Scalar>(&self, grads: &Gradients<T>, names: &[String]) -> ParamSet<T> {
        ParamSet {
            names: names.to_vec(),
            tensors: self.vars.iter().map(|&v| grads.wrt(v)).collect(),
        }
    }
}
