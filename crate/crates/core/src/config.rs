//! Model and training configuration, and the `key = value` run-config format.
//!
//! The file format is UTF-8 text, one `key = value` per line, `#` starts a
//! comment. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use seqattn_tensor::Padding;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::InitScheme;

/// Parsed `key = value` lines, in key order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("bad value '{v}' for key '{key}'")))
            })
            .transpose()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

pub(crate) fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("expected a boolean, got '{s}'"))),
    }
}

pub(crate) fn parse_dims(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("expected HxW, got '{s}'")))?;
    let p = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("expected HxW, got '{s}'")))
    };
    Ok((p(a)?, p(b)?))
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("expected comma-separated integers, got '{s}'")))
        })
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Frame height and width.
    pub frame: (usize, usize),
    /// Output channels per conv layer; the last entry is the cube depth D.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl EncoderConfig {
    pub fn depth(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }

    /// Spatial extents after each conv layer, starting with the frame.
    pub fn shape_trace(&self) -> Result<Vec<(usize, usize)>> {
        let mut dims = vec![self.frame];
        let (mut h, mut w) = self.frame;
        for _ in &self.channels {
            let step = |n: usize| -> Option<usize> {
                match self.padding {
                    Padding::Same => Some(n.div_ceil(self.stride)),
                    Padding::Valid => (n >= self.kernel).then(|| (n - self.kernel) / self.stride + 1),
                }
            };
            h = step(h).ok_or_else(|| Error::Config(format!("frame {:?} too small for encoder", self.frame)))?;
            w = step(w).ok_or_else(|| Error::Config(format!("frame {:?} too small for encoder", self.frame)))?;
            dims.push((h, w));
        }
        Ok(dims)
    }

    /// Cube side K; the encoder must produce a square grid.
    pub fn grid(&self) -> Result<usize> {
        let &(h, w) = self.shape_trace()?.last().expect("non-empty");
        if h != w {
            return Err(Error::Config(format!(
                "encoder produces a {h}x{w} grid; feature cubes must be square"
            )));
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerConfig {
    pub channels: usize,
    /// Square kernel side shared by the input-to-state and state-to-state
    /// convolutions of this layer.
    pub kernel: usize,
    /// Max-pool window applied to this layer's output before the next layer.
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StackConfig {
    pub layers: Vec<LayerConfig>,
    pub bias: bool,
}

impl StackConfig {
    pub fn with_kernels(channels: &[usize], kernels: &[usize], pool: usize) -> Self {
        let n = channels.len();
        Self {
            layers: channels
                .iter()
                .zip(kernels)
                .enumerate()
                .map(|(i, (&c, &k))| LayerConfig {
                    channels: c,
                    kernel: k,
                    pool: if i + 1 == n { 1 } else { pool },
                })
                .collect(),
            bias: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Soft,
    /// Every location weight fixed to 1/K².
    Muted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemporalPool {
    Attention,
    Mean,
    Max,
    /// Post-hoc Fisher encoding; trained with attention pooling.
    Fisher,
}

impl FromStr for TemporalPool {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Self::Attention),
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "fisher" => Ok(Self::Fisher),
            _ => Err(Error::Config(format!("unknown pool '{s}'"))),
        }
    }
}

impl std::fmt::Display for TemporalPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Attention => "attention",
            Self::Mean => "mean",
            Self::Max => "max",
            Self::Fisher => "fisher",
        })
    }
}

/// Recurrent-kernel presets from the architecture study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Layer kernels 3, 5, 5.
    G55,
    /// Layer kernels 3, 1, 9.
    G19,
    /// Layer kernels 3, 9, 1.
    G91,
    /// 1x1 kernels on 1x1 grids with a collapsed attention input.
    Fc,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::G55, Variant::G19, Variant::G91, Variant::Fc];

    pub fn kernels(self) -> [usize; 3] {
        match self {
            Variant::G55 => [3, 5, 5],
            Variant::G19 => [3, 1, 9],
            Variant::G91 => [3, 9, 1],
            Variant::Fc => [1, 1, 1],
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "G55" | "g55" => Ok(Self::G55),
            "G19" | "g19" => Ok(Self::G19),
            "G91" | "g91" => Ok(Self::G91),
            "fc" | "FC" => Ok(Self::Fc),
            _ => Err(Error::Config(format!("unknown variant '{s}'"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::G55 => "G55",
            Self::G19 => "G19",
            Self::G91 => "G91",
            Self::Fc => "fc",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub stack: StackConfig,
    pub attention: AttentionMode,
    /// Sum the weighted slices into one D-vector instead of rescaling cells.
    pub collapse_attention: bool,
    /// Width of the shared hidden layer of the state-initialization MLP.
    pub init_hidden: usize,
    pub pool: TemporalPool,
    pub fisher_components: usize,
}

impl ModelConfig {
    /// CPU-sized default: 32x32 frames, K=4, D=32, channels 8/16/16, G55.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig {
                frame: (32, 32),
                channels: vec![16, 32, 32],
                kernel: 3,
                stride: 2,
                padding: Padding::Same,
            },
            stack: StackConfig::with_kernels(&[8, 16, 16], &Variant::G55.kernels(), 1),
            attention: AttentionMode::Soft,
            collapse_attention: false,
            init_hidden: 32,
            pool: TemporalPool::Attention,
            fisher_components: 4,
        }
    }

    /// Paper-scale geometry: a 7x7x1024 cube and 128/256/256 channels.
    pub fn paper() -> Self {
        Self {
            encoder: EncoderConfig {
                frame: (56, 56),
                channels: vec![64, 256, 1024],
                kernel: 3,
                stride: 2,
                padding: Padding::Same,
            },
            stack: StackConfig::with_kernels(&[128, 256, 256], &Variant::G55.kernels(), 2),
            attention: AttentionMode::Soft,
            collapse_attention: false,
            init_hidden: 256,
            pool: TemporalPool::Attention,
            fisher_components: 4,
        }
    }

    pub fn apply_variant(&mut self, variant: Variant) {
        for (layer, k) in self.stack.layers.iter_mut().zip(variant.kernels()) {
            layer.kernel = k;
        }
        if variant == Variant::Fc {
            self.collapse_attention = true;
            for layer in &mut self.stack.layers {
                layer.pool = 1;
            }
        }
    }

    /// Spatial side of layer 1's input grid.
    pub fn input_grid(&self) -> Result<usize> {
        if self.collapse_attention {
            Ok(1)
        } else {
            self.encoder.grid()
        }
    }

    /// Spatial side of each layer's hidden state.
    pub fn layer_grids(&self) -> Result<Vec<usize>> {
        let mut grid = self.input_grid()?;
        let mut out = Vec::with_capacity(self.stack.layers.len());
        for (i, layer) in self.stack.layers.iter().enumerate() {
            if grid == 0 {
                return Err(Error::Config(format!(
                    "layer {} has an empty grid after pooling",
                    i + 1
                )));
            }
            out.push(grid);
            if layer.pool > 1 && i + 1 < self.stack.layers.len() {
                grid /= layer.pool;
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.channels.is_empty() || e.channels.contains(&0) {
            return Err(Error::Config("encoder.channels must be non-empty and positive".into()));
        }
        if e.kernel == 0 || e.stride == 0 {
            return Err(Error::Config("encoder kernel and stride must be positive".into()));
        }
        e.grid()?;
        if self.stack.layers.is_empty() {
            return Err(Error::Config("recurrent stack needs at least one layer".into()));
        }
        for (i, l) in self.stack.layers.iter().enumerate() {
            if l.channels == 0 || l.kernel == 0 || l.pool == 0 {
                return Err(Error::Config(format!("layer{} has a zero entry", i + 1)));
            }
        }
        if let Some(top) = self.stack.layers.last() {
            if top.pool != 1 {
                return Err(Error::Config("the top layer cannot be pooled".into()));
            }
        }
        self.layer_grids()?;
        if self.init_hidden == 0 {
            return Err(Error::Config("init.hidden must be positive".into()));
        }
        if self.pool == TemporalPool::Fisher && self.fisher_components == 0 {
            return Err(Error::Config("fisher.components must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Training window length T.
    pub window: usize,
    pub batch_pairs: usize,
    pub batches_per_epoch: usize,
    pub epochs: usize,
    pub lambda: f64,
    /// Gradients are clamped elementwise to `[-clip, clip]`.
    pub clip: f64,
    pub dropout: f64,
    /// Interpret `dropout` as a keep probability.
    pub dropout_keep: bool,
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    pub init: InitScheme,
    /// Bound multiplier for `init = scaled`.
    pub init_gain: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub augment: bool,
    pub freeze_encoder: bool,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window: 20,
            batch_pairs: 10,
            batches_per_epoch: 1,
            epochs: 1000,
            lambda: 1.0,
            clip: 5.0,
            dropout: 0.7,
            dropout_keep: false,
            lr: 1e-3,
            decay: 0.9,
            eps: 1e-6,
            init: InitScheme::Paper,
            init_gain: 1.0,
            seed: 1,
            checkpoint_every: 50,
            augment: true,
            freeze_encoder: false,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// Probability that a unit is zeroed at train time.
    pub fn drop_probability(&self) -> f64 {
        if self.dropout_keep {
            1.0 - self.dropout
        } else {
            self.dropout
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        if self.batch_pairs == 0 || self.batches_per_epoch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("clip bound must be positive".into()));
        }
        let p = self.drop_probability();
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("drop probability {p} outside [0, 1)")));
        }
        if !(0.0..1.0).contains(&self.decay) || self.eps <= 0.0 || self.lr < 0.0 {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if !(self.init_gain.is_finite() && self.init_gain > 0.0) {
            return Err(Error::Config("init_gain must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
        }
    }
}

const MAX_LAYERS: usize = 8;

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text)?)
    }

    /// Desk defaults overridden by whatever keys are present. `synth.*` keys
    /// are skipped; they belong to the generator spec.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(preset) = kv.get("preset") {
            cfg.model = match preset {
                "desk" => ModelConfig::desk(),
                "paper" => ModelConfig::paper(),
                other => return Err(Error::Config(format!("unknown preset '{other}'"))),
            };
        }
        if let Some(v) = kv.parsed::<Variant>("variant")? {
            cfg.model.apply_variant(v);
        }
        let m = &mut cfg.model;
        let t = &mut cfg.train;
        for key in kv.keys() {
            let val = kv.get(key).expect("key present");
            match key {
                "preset" | "variant" => {}
                "frame" => m.encoder.frame = parse_dims(val)?,
                "encoder.channels" => m.encoder.channels = parse_list(val)?,
                "encoder.kernel" => m.encoder.kernel = num(key, val)?,
                "encoder.stride" => m.encoder.stride = num(key, val)?,
                "encoder.padding" => {
                    m.encoder.padding = match val {
                        "same" => Padding::Same,
                        "valid" => Padding::Valid,
                        _ => return Err(Error::Config(format!("bad padding '{val}'"))),
                    }
                }
                "layers" => {
                    let n: usize = num(key, val)?;
                    if n == 0 || n > MAX_LAYERS {
                        return Err(Error::Config(format!("layers must be in 1..={MAX_LAYERS}")));
                    }
                    let last = *m.stack.layers.last().expect("non-empty");
                    m.stack.layers.resize(n, last);
                }
                "gru.bias" => m.stack.bias = parse_bool(val)?,
                "attention" => {
                    m.attention = match val {
                        "soft" => AttentionMode::Soft,
                        "muted" => AttentionMode::Muted,
                        _ => return Err(Error::Config(format!("bad attention mode '{val}'"))),
                    }
                }
                "collapse_attention" => m.collapse_attention = parse_bool(val)?,
                "init.hidden" => m.init_hidden = num(key, val)?,
                "pool" => m.pool = val.parse()?,
                "fisher.components" => m.fisher_components = num(key, val)?,
                "window" => t.window = num(key, val)?,
                "batch_pairs" => t.batch_pairs = num(key, val)?,
                "batches_per_epoch" => t.batches_per_epoch = num(key, val)?,
                "epochs" => t.epochs = num(key, val)?,
                "lambda" => t.lambda = num(key, val)?,
                "clip" => t.clip = num(key, val)?,
                "dropout" => t.dropout = num(key, val)?,
                "dropout_keep" => t.dropout_keep = parse_bool(val)?,
                "lr" => t.lr = num(key, val)?,
                "decay" => t.decay = num(key, val)?,
                "eps" => t.eps = num(key, val)?,
                "init" => t.init = val.parse()?,
                "init_gain" => t.init_gain = num(key, val)?,
                "seed" => t.seed = num(key, val)?,
                "checkpoint_every" => t.checkpoint_every = num(key, val)?,
                "augment" => t.augment = parse_bool(val)?,
                "freeze_encoder" => t.freeze_encoder = parse_bool(val)?,
                "workers" => t.workers = num(key, val)?,
                k if k.starts_with("synth.") => {}
                k if k.starts_with("layer") => {
                    let (idx, field) = k["layer".len()..]
                        .split_once('.')
                        .ok_or_else(|| Error::Config(format!("unknown key '{k}'")))?;
                    let idx: usize = idx
                        .parse()
                        .map_err(|_| Error::Config(format!("unknown key '{k}'")))?;
                    if idx == 0 || idx > m.stack.layers.len() {
                        return Err(Error::Config(format!(
                            "'{k}' refers to a layer outside 1..={} (set 'layers' first)",
                            m.stack.layers.len()
                        )));
                    }
                    let layer = &mut m.stack.layers[idx - 1];
                    match field {
                        "channels" => layer.channels = num(k, val)?,
                        "kernel" => layer.kernel = num(k, val)?,
                        "pool" => layer.pool = num(k, val)?,
                        _ => return Err(Error::Config(format!("unknown key '{k}'"))),
                    }
                }
                other => return Err(Error::Config(format!("unknown key '{other}'"))),
            }
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        let m = &self.model;
        let t = &self.train;
        kv.set("frame", format!("{}x{}", m.encoder.frame.0, m.encoder.frame.1));
        kv.set("encoder.channels", join(&m.encoder.channels));
        kv.set("encoder.kernel", m.encoder.kernel);
        kv.set("encoder.stride", m.encoder.stride);
        kv.set(
            "encoder.padding",
            match m.encoder.padding {
                Padding::Same => "same",
                Padding::Valid => "valid",
            },
        );
        kv.set("layers", m.stack.layers.len());
        for (i, l) in m.stack.layers.iter().enumerate() {
            kv.set(format!("layer{}.channels", i + 1), l.channels);
            kv.set(format!("layer{}.kernel", i + 1), l.kernel);
            kv.set(format!("layer{}.pool", i + 1), l.pool);
        }
        kv.set("gru.bias", m.stack.bias);
        kv.set(
            "attention",
            match m.attention {
                AttentionMode::Soft => "soft",
                AttentionMode::Muted => "muted",
            },
        );
        kv.set("collapse_attention", m.collapse_attention);
        kv.set("init.hidden", m.init_hidden);
        kv.set("pool", m.pool);
        kv.set("fisher.components", m.fisher_components);
        kv.set("window", t.window);
        kv.set("batch_pairs", t.batch_pairs);
        kv.set("batches_per_epoch", t.batches_per_epoch);
        kv.set("epochs", t.epochs);
        kv.set("lambda", t.lambda);
        kv.set("clip", t.clip);
        kv.set("dropout", t.dropout);
        kv.set("dropout_keep", t.dropout_keep);
        kv.set("lr", t.lr);
        kv.set("decay", t.decay);
        kv.set("eps", t.eps);
        kv.set("init", t.init);
        kv.set("init_gain", t.init_gain);
        kv.set("seed", t.seed);
        kv.set("checkpoint_every", t.checkpoint_every);
        kv.set("augment", t.augment);
        kv.set("freeze_encoder", t.freeze_encoder);
        kv.set("workers", t.workers);
        kv
    }

    pub fn render(&self) -> String {
        self.to_kv().render()
    }

    /// SHA-256 of the canonical text, hex encoded. `workers` and `epochs` are
    /// excluded: neither changes the trajectory of a given epoch.
    pub fn hash(&self) -> String {
        let mut kv = self.to_kv();
        kv.entries.remove("workers");
        kv.entries.remove("epochs");
        kv.entries.remove("checkpoint_every");
        hex::encode(Sha256::digest(kv.render().as_bytes()))
    }
}

fn num<T: FromStr>(key: &str, val: &str) -> Result<T> {
    val.parse::<T>()
        .map_err(|_| Error::Config(format!("bad value '{val}' for key '{key}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_overrides_and_comments() {
        let cfg = RunConfig::parse(
            "# run\nvariant = G19\nlayer1.channels = 4 # narrow\nlambda = 10\nfreeze_encoder = true\n",
        )
        .unwrap();
        let kernels: Vec<usize> = cfg.model.stack.layers.iter().map(|l| l.kernel).collect();
        assert_eq!(kernels, vec![3, 1, 9]);
        assert_eq!(cfg.model.stack.layers[0].channels, 4);
        assert_eq!(cfg.train.lambda, 10.0);
        assert!(cfg.train.freeze_encoder);
    }

    #[test]
    fn canonical_text_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.model.apply_variant(Variant::Fc);
        cfg.train.lr = 0.0025;
        let again = RunConfig::parse(&cfg.render()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("lambda 1").is_err());
        assert!(RunConfig::parse("layer9.kernel = 3").is_err());
        assert!(RunConfig::parse("dropout = 1.0").is_err());
        assert!(RunConfig::parse("window = 0").is_err());
    }

    #[test]
    fn fc_variant_collapses_to_unit_grid() {
        let mut m = ModelConfig::desk();
        m.apply_variant(Variant::Fc);
        assert_eq!(m.layer_grids().unwrap(), vec![1, 1, 1]);
        assert!(m.stack.layers.iter().all(|l| l.kernel == 1));
    }

    #[test]
    fn desk_encoder_shape_trace() {
        let m = ModelConfig::desk();
        assert_eq!(
            m.encoder.shape_trace().unwrap(),
            vec![(32, 32), (16, 16), (8, 8), (4, 4)]
        );
        let p = ModelConfig::paper();
        assert_eq!(p.encoder.grid().unwrap(), 7);
        assert_eq!(p.encoder.depth(), 1024);
        assert_eq!(p.layer_grids().unwrap(), vec![7, 3, 1]);
    }

    #[test]
    fn hash_ignores_worker_count() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.workers = 4;
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 99;
        assert_ne!(a.hash(), b.hash());
    }
}
