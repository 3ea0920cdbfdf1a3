//! Pair sampling, augmentation, RMSProp and the epoch loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use seqattn_tensor::{stns, Graph, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainConfig};
use crate::data::{Dataset, Frame, View};
use crate::error::{io_err, Error, Result};
use crate::network::{Dropout, Model};
use crate::params::{InitScheme, ParamGroup, ParamSet};
use crate::siamese::Label;

/// Two windows of frames and whether they show the same person.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub a: Vec<Frame>,
    pub b: Vec<Frame>,
    pub label: Label,
    /// Identity indices of the two sides.
    pub identities: (usize, usize),
}

/// Random contiguous window of `len` frames, or the whole sequence if shorter.
pub fn window(frames: &[Frame], len: usize, rng: &mut impl Rng) -> Vec<Frame> {
    if frames.len() <= len {
        return frames.to_vec();
    }
    let start = rng.gen_range(0..=frames.len() - len);
    frames[start..start + len].to_vec()
}

/// Number of distinct window starts.
pub fn window_starts(seq_len: usize, len: usize) -> usize {
    if seq_len <= len {
        1
    } else {
        seq_len - len + 1
    }
}

/// Identity indices usable as probe (view a) and gallery (view b) sides.
struct Pools {
    both: Vec<usize>,
    with_a: Vec<usize>,
    with_b: Vec<usize>,
}

impl Pools {
    fn new(ds: &Dataset) -> Result<Self> {
        let with = |v: View| -> Vec<usize> {
            (0..ds.len()).filter(|&i| !ds.identities[i].view(v).is_empty()).collect()
        };
        let both: Vec<usize> = (0..ds.len()).filter(|&i| ds.identities[i].has_both_views()).collect();
        let single = ds.len() - both.len();
        if single > 0 {
            log::warn!("{single} single-view identities excluded from positive pairs");
        }
        let p = Self {
            both,
            with_a: with(View::A),
            with_b: with(View::B),
        };
        if ds.len() < 2 {
            return Err(Error::Config(format!(
                "pair sampling needs at least 2 identities, dataset has {}",
                ds.len()
            )));
        }
        if p.both.is_empty() || p.with_a.is_empty() || p.with_b.is_empty() {
            return Err(Error::Config("no identity is observed in both views".into()));
        }
        if !p.with_a.iter().any(|&i| p.with_b.iter().any(|&j| j != i)) {
            return Err(Error::Config("no negative pair can be formed across views".into()));
        }
        Ok(p)
    }
}

fn pick_seq<'a>(ds: &'a Dataset, id: usize, v: View, rng: &mut impl Rng) -> &'a [Frame] {
    let seqs = ds.identities[id].view(v);
    &seqs[rng.gen_range(0..seqs.len())].frames
}

/// One positive (same identity, view a against view b) or negative pair.
pub fn sample_pair(ds: &Dataset, label: Label, len: usize, rng: &mut impl Rng) -> Result<Pair> {
    let pools = Pools::new(ds)?;
    sample_with(ds, &pools, label, len, rng)
}

fn sample_with(ds: &Dataset, pools: &Pools, label: Label, len: usize, rng: &mut impl Rng) -> Result<Pair> {
    let (ia, ib) = match label {
        Label::Sim => {
            let i = pools.both[rng.gen_range(0..pools.both.len())];
            (i, i)
        }
        Label::Dis => loop {
            let i = pools.with_a[rng.gen_range(0..pools.with_a.len())];
            let j = pools.with_b[rng.gen_range(0..pools.with_b.len())];
            if i != j {
                break (i, j);
            }
        },
    };
    let a = window(pick_seq(ds, ia, View::A, rng), len, rng);
    let b = window(pick_seq(ds, ib, View::B, rng), len, rng);
    Ok(Pair {
        a,
        b,
        label,
        identities: (ia, ib),
    })
}

/// Alternating positive and negative pairs, starting with a positive one.
pub fn sample_batch(ds: &Dataset, n: usize, len: usize, rng: &mut impl Rng) -> Result<Vec<Pair>> {
    let pools = Pools::new(ds)?;
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Sim } else { Label::Dis };
            sample_with(ds, &pools, label, len, rng)
        })
        .collect()
}

/// Mirror and integer translation applied to every frame of a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub mirror: bool,
    pub dy: i64,
    pub dx: i64,
}

impl Augmentation {
    /// Largest translation magnitude for a frame extent, `round(0.05 * n)`.
    pub fn max_shift(n: usize) -> i64 {
        (0.05 * n as f64).round() as i64
    }

    /// Mirror with probability 0.5, offsets uniform in `±0.05` of each extent
    /// rounded half away from zero.
    pub fn sample(h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let mirror = rng.gen_bool(0.5);
        let off = |n: usize, rng: &mut dyn rand::RngCore| -> i64 {
            let r = 0.05 * n as f64;
            if r == 0.0 {
                return 0;
            }
            rng.gen_range(-r..=r).round() as i64
        };
        let dy = off(h, rng);
        let dx = off(w, rng);
        Self { mirror, dy, dx }
    }

    /// The six test-time conditions: mirror × shift {0, +m, −m}.
    pub fn test_conditions(h: usize, w: usize) -> Vec<Self> {
        let (my, mx) = (Self::max_shift(h), Self::max_shift(w));
        let mut out = Vec::with_capacity(6);
        for mirror in [false, true] {
            for s in [0, 1, -1] {
                out.push(Self {
                    mirror,
                    dy: s * my,
                    dx: s * mx,
                });
            }
        }
        out
    }

    pub fn apply(&self, frame: &Frame) -> Frame {
        if *self == Self::default() {
            return frame.clone();
        }
        let (h, w, c) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
        let src = frame.data();
        let mut out = vec![0.0f32; src.len()];
        for y in 0..h {
            let sy = y as i64 - self.dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w {
                let mut sx = x as i64 - self.dx;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                if self.mirror {
                    sx = w as i64 - 1 - sx;
                }
                let s = (sy as usize * w + sx as usize) * c;
                let d = (y * w + x) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        Tensor::new(frame.shape(), out).expect("same shape")
    }

    pub fn apply_all(&self, frames: &[Frame]) -> Vec<Frame> {
        frames.iter().map(|f| self.apply(f)).collect()
    }
}

/// RMSProp accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub acc: ParamSet<f32>,
    pub steps: u64,
    /// Parameter blocks skipped because of a non-finite gradient.
    pub skipped: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepStats {
    /// Gradient elements that hit the clip bound.
    pub clipped: usize,
    pub skipped_blocks: usize,
}

impl RmsProp {
    pub fn new(params: &ParamSet<f32>) -> Self {
        let mut acc = params.clone();
        acc.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        Self { acc, steps: 0, skipped: 0 }
    }

    /// Clip, accumulate squared gradients, step. Blocks flagged in `frozen`
    /// are left alone.
    pub fn step(
        &mut self,
        params: &mut ParamSet<f32>,
        grads: &ParamSet<f32>,
        cfg: &TrainConfig,
        frozen: &[bool],
    ) -> StepStats {
        let mut stats = StepStats::default();
        let clip = cfg.clip as f32;
        let (lr, decay, eps) = (cfg.lr as f32, cfg.decay as f32, cfg.eps as f32);
        for (i, ((p, g), a)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.acc.tensors_mut())
            .enumerate()
        {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            if !g.all_finite() {
                log::warn!("non-finite gradient for {}; update skipped", grads.names()[i]);
                stats.skipped_blocks += 1;
                self.skipped += 1;
                continue;
            }
            for ((pv, &gv), av) in p.data_mut().iter_mut().zip(g.data()).zip(a.data_mut()) {
                let gc = gv.clamp(-clip, clip);
                if gc != gv {
                    stats.clipped += 1;
                }
                *av = decay * *av + (1.0 - decay) * gc * gc;
                *pv -= lr * gc / (*av + eps).sqrt();
            }
        }
        self.steps += 1;
        stats
    }
}

/// Deterministic initial parameters for a model.
pub fn init_params(model: &Model, scheme: InitScheme, gain: f64, seed: u64) -> Result<ParamSet<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ParamSet::init_with_gain(model.layout(), scheme, gain, &mut rng)
}

/// Random stream of one epoch, independent of how many epochs ran before.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub clip_events: usize,
    pub clamp_events: usize,
    pub skipped_blocks: usize,
    pub mean_penalty: f64,
    pub seconds: f64,
}

/// Per-pair result of the forward/backward pass.
struct PairGrad {
    loss: f64,
    penalty: f64,
    clamped: bool,
    grads: ParamSet<f32>,
}

/// In-memory training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: RunConfig,
    pub params: ParamSet<f32>,
    pub opt: RmsProp,
    /// Completed epochs.
    pub epoch: usize,
    frozen: Vec<bool>,
    replay_dir: PathBuf,
    pool: Option<std::sync::Arc<rayon::ThreadPool>>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        let model = Model::new(config.model.clone())?;
        let params = init_params(&model, config.train.init, config.train.init_gain, config.train.seed)?;
        Self::from_state(config, model, params, None, 0)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let model = Model::new(ck.config.model.clone())?;
        let opt = RmsProp {
            acc: ck.accumulators,
            steps: ck.steps,
            skipped: 0,
        };
        Self::from_state(ck.config, model, ck.params, Some(opt), ck.epoch)
    }

    fn from_state(
        config: RunConfig,
        model: Model,
        params: ParamSet<f32>,
        opt: Option<RmsProp>,
        epoch: usize,
    ) -> Result<Self> {
        config.train.validate()?;
        params.conforms_to(model.layout())?;
        let frozen = model
            .layout()
            .specs()
            .iter()
            .map(|s| config.train.freeze_encoder && s.group == ParamGroup::Encoder)
            .collect();
        let pool = if config.train.workers > 1 {
            Some(std::sync::Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.train.workers)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", config.train.workers)))?,
            ))
        } else {
            None
        };
        let opt = opt.unwrap_or_else(|| RmsProp::new(&params));
        Ok(Self {
            model,
            config,
            params,
            opt,
            epoch,
            frozen,
            replay_dir: std::env::temp_dir(),
            pool,
        })
    }

    /// Where the offending batch is written if the loss turns non-finite.
    pub fn set_replay_dir(&mut self, dir: impl Into<PathBuf>) {
        self.replay_dir = dir.into();
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.epoch,
            config: self.config.clone(),
            params: self.params.clone(),
            accumulators: self.opt.acc.clone(),
            steps: self.opt.steps,
        }
    }

    fn pair_grad(&self, pair: &Pair, dropout_seed: u64) -> Result<PairGrad> {
        let t = &self.config.train;
        let mut g = Graph::<f32>::new();
        let bound = self.params.bind(&mut g);
        let p = t.drop_probability();
        let mut drop = Dropout {
            p,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
        };
        let out = self.model.forward_pair(
            &mut g,
            &bound,
            &pair.a,
            &pair.b,
            pair.label,
            t.lambda,
            (p > 0.0).then_some(&mut drop),
        )?;
        let loss = f64::from(g.value(out.loss.total).data()[0]);
        let penalty = f64::from(g.value(out.loss.penalty).data()[0]);
        let grads = g.backward(out.loss.total)?;
        Ok(PairGrad {
            loss,
            penalty,
            clamped: out.loss.clamped,
            grads: bound.gradients(&grads, self.params.names()),
        })
    }

    /// Sample, augment and evaluate one minibatch; returns merged gradients.
    fn batch(&self, ds: &Dataset, rng: &mut ChaCha8Rng) -> Result<(Vec<Pair>, Vec<PairGrad>)> {
        let t = &self.config.train;
        let mut pairs = sample_batch(ds, t.batch_pairs, t.window, rng)?;
        if t.augment {
            let (h, w) = ds.frame;
            for pair in &mut pairs {
                let aa = Augmentation::sample(h, w, rng);
                pair.a = aa.apply_all(&pair.a);
                let ab = Augmentation::sample(h, w, rng);
                pair.b = ab.apply_all(&pair.b);
            }
        }
        let seeds: Vec<u64> = pairs.iter().map(|_| rng.gen()).collect();
        let results: Vec<Result<PairGrad>> = match &self.pool {
            Some(pool) => pool.install(|| {
                pairs
                    .par_iter()
                    .zip(&seeds)
                    .map(|(p, &s)| self.pair_grad(p, s))
                    .collect()
            }),
            None => pairs.iter().zip(&seeds).map(|(p, &s)| self.pair_grad(p, s)).collect(),
        };
        let grads = results.into_iter().collect::<Result<Vec<_>>>()?;
        Ok((pairs, grads))
    }

    /// One epoch of `batches_per_epoch` optimizer steps.
    pub fn run_epoch(&mut self, ds: &Dataset) -> Result<EpochLog> {
        let started = Instant::now();
        let epoch = self.epoch + 1;
        let mut rng = epoch_rng(self.config.train.seed, epoch);
        let mut log = EpochLog {
            epoch,
            mean_loss: 0.0,
            clip_events: 0,
            clamp_events: 0,
            skipped_blocks: 0,
            mean_penalty: 0.0,
            seconds: 0.0,
        };
        let mut n_pairs = 0usize;
        for _ in 0..self.config.train.batches_per_epoch {
            let (pairs, results) = self.batch(ds, &mut rng)?;
            if let Some(bad) = results.iter().position(|r| !r.loss.is_finite()) {
                let replay = self.write_replay(epoch, &pairs)?;
                log::error!("pair {bad} of epoch {epoch} produced a non-finite loss");
                return Err(Error::NanLoss { epoch, replay });
            }
            let mut total = ParamSet::zeros(self.model.layout())?;
            for r in &results {
                total.accumulate(&r.grads);
                log.mean_loss += r.loss;
                log.mean_penalty += r.penalty;
                log.clamp_events += usize::from(r.clamped);
            }
            n_pairs += results.len();
            let stats = self.opt.step(&mut self.params, &total, &self.config.train, &self.frozen);
            log.clip_events += stats.clipped;
            log.skipped_blocks += stats.skipped_blocks;
        }
        log.mean_loss /= n_pairs as f64;
        log.mean_penalty /= n_pairs as f64;
        log.seconds = started.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: loss {:.5} penalty {:.4} clip {} clamp {} ({:.3}s, {:.1} ms/pair)",
            log.mean_loss,
            log.mean_penalty,
            log.clip_events,
            log.clamp_events,
            log.seconds,
            1e3 * log.seconds / n_pairs as f64
        );
        self.epoch = epoch;
        Ok(log)
    }

    /// Run epochs until `config.train.epochs` are complete.
    pub fn fit(&mut self, ds: &Dataset) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.config.train.epochs {
            logs.push(self.run_epoch(ds)?);
        }
        Ok(logs)
    }

    fn write_replay(&self, epoch: usize, pairs: &[Pair]) -> Result<PathBuf> {
        let dir = self.replay_dir.join(format!("nan_epoch{epoch:05}"));
        let mut labels = String::new();
        for (i, p) in pairs.iter().enumerate() {
            for (side, frames) in [("a", &p.a), ("b", &p.b)] {
                let sd = dir.join(format!("pair{i:03}")).join(side);
                fs::create_dir_all(&sd).map_err(io_err(&sd))?;
                for (t, f) in frames.iter().enumerate() {
                    stns::save(f, sd.join(format!("frame_{t:05}.stns")))?;
                }
            }
            let _ = writeln!(
                labels,
                "pair{i:03} {:?} {} {}",
                p.label, p.identities.0, p.identities.1
            );
        }
        let path = dir.join("labels.txt");
        fs::write(&path, labels).map_err(io_err(&path))?;
        Ok(dir)
    }
}

pub const LOSS_CSV: &str = "loss.csv";
pub const LOSS_HEADER: &str = "epoch,mean_loss,clip_events";

pub fn csv_row(l: &EpochLog) -> String {
    format!("{},{:.6},{}", l.epoch, l.mean_loss, l.clip_events)
}

/// Train into `out`, writing `loss.csv` and checkpoints. With `resume`, an
/// existing checkpoint in `out` is continued up to `config.train.epochs`.
pub fn train(ds: &Dataset, config: &RunConfig, out: &Path, resume: bool) -> Result<Vec<EpochLog>> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let csv_path = out.join(LOSS_CSV);
    let mut trainer = if resume && Checkpoint::exists(out) {
        let ck = Checkpoint::load(out)?;
        if ck.config.hash() != config.hash() {
            return Err(Error::Config("checkpoint was written with a different configuration".into()));
        }
        let mut t = Trainer::from_checkpoint(ck)?;
        t.config.train.epochs = config.train.epochs;
        t.config.train.workers = config.train.workers;
        t.config.train.checkpoint_every = config.train.checkpoint_every;
        t
    } else {
        Trainer::new(config.clone())?
    };
    let mut csv = String::from(LOSS_HEADER);
    csv.push('\n');
    if trainer.epoch > 0 {
        let old = fs::read_to_string(&csv_path).unwrap_or_default();
        for line in old.lines().skip(1) {
            let e: usize = line.split(',').next().and_then(|v| v.parse().ok()).unwrap_or(usize::MAX);
            if e <= trainer.epoch {
                csv.push_str(line);
                csv.push('\n');
            }
        }
    }
    trainer.set_replay_dir(out);
    let mut logs = Vec::new();
    let every = config.train.checkpoint_every;
    while trainer.epoch < config.train.epochs {
        let l = trainer.run_epoch(ds)?;
        csv.push_str(&csv_row(&l));
        csv.push('\n');
        fs::write(&csv_path, &csv).map_err(io_err(&csv_path))?;
        if every > 0 && l.epoch % every == 0 {
            trainer.checkpoint().save(out)?;
        }
        logs.push(l);
    }
    trainer.checkpoint().save(out)?;
    fs::write(&csv_path, &csv).map_err(io_err(&csv_path))?;
    Ok(logs)
}
