//! Probe/gallery extraction, Euclidean ranking and CMC curves.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use seqattn_tensor::Tensor;

use crate::config::RunConfig;
use crate::data::{pixel_means, Dataset, Frame, View};
use crate::error::{Error, Result};
use crate::gmm::{fisher_vector, fit_gmm, Gmm};
use crate::network::Model;
use crate::params::ParamSet;
use crate::training::{Augmentation, Trainer};

pub const DEFAULT_RANKS: [usize; 4] = [1, 5, 10, 20];

/// Probe lengths of the length ablation.
pub const ABLATION_LENGTHS: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];

/// One vector per identity of a view, in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

/// Turns sequences into fixed-length vectors with a trained model.
#[derive(Clone, Copy, Debug)]
pub struct Extractor<'a> {
    pub model: &'a Model,
    pub params: &'a ParamSet<f32>,
    /// Fisher-vector encoding of the top-layer states instead of the pooled
    /// representation.
    pub fisher: Option<&'a Gmm>,
    /// Average over mirror and shift conditions.
    pub tta: bool,
    pub workers: usize,
}

impl<'a> Extractor<'a> {
    pub fn new(model: &'a Model, params: &'a ParamSet<f32>) -> Self {
        Self {
            model,
            params,
            fisher: None,
            tta: false,
            workers: 1,
        }
    }

    fn single(&self, frames: &[Frame]) -> Result<Vec<f64>> {
        let r = self.model.represent(self.params, frames)?;
        match self.fisher {
            None => Ok(r.pooled.iter().map(|&v| f64::from(v)).collect()),
            Some(gmm) => {
                let states: Vec<Vec<f64>> = r
                    .top
                    .iter()
                    .map(|h| h.iter().map(|&v| f64::from(v)).collect())
                    .collect();
                fisher_vector(&states, gmm)
            }
        }
    }

    /// Representation of one sequence.
    pub fn vector(&self, frames: &[Frame]) -> Result<Vec<f64>> {
        if !self.tta {
            return self.single(frames);
        }
        let (h, w) = self.model.config().encoder.frame;
        let conds = Augmentation::test_conditions(h, w);
        let mut acc: Vec<f64> = Vec::new();
        for c in &conds {
            let v = self.single(&c.apply_all(frames))?;
            if acc.is_empty() {
                acc = v;
            } else {
                acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
            }
        }
        let n = conds.len() as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }

    /// First sequence of `view` per identity, truncated to `max_len` frames.
    /// Identities without that view are skipped.
    pub fn extract(&self, ds: &Dataset, view: View, max_len: Option<usize>) -> Result<Extraction> {
        let mut jobs = Vec::new();
        for ident in &ds.identities {
            match ident.view(view).first() {
                Some(seq) if !seq.is_empty() => {
                    let n = max_len.map_or(seq.len(), |m| m.clamp(1, seq.len()));
                    jobs.push((ident.id.clone(), &seq.frames[..n]));
                }
                _ => log::warn!("identity {} has no {:?} sequence; excluded", ident.id, view),
            }
        }
        let run = |(_, frames): &(String, &[Frame])| self.vector(frames);
        let vectors: Vec<Result<Vec<f64>>> = if self.workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.workers)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", self.workers)))?;
            pool.install(|| jobs.par_iter().map(run).collect())
        } else {
            jobs.iter().map(run).collect()
        };
        Ok(Extraction {
            ids: jobs.into_iter().map(|(id, _)| id).collect(),
            vectors: vectors.into_iter().collect::<Result<_>>()?,
        })
    }

    /// Probe view A against gallery view B.
    pub fn distances(&self, ds: &Dataset, probe_len: Option<usize>, gallery_len: Option<usize>) -> Result<DistanceMatrix> {
        let probe = self.extract(ds, View::A, probe_len)?;
        let gallery = self.extract(ds, View::B, gallery_len)?;
        distance_matrix(&probe, &gallery)
    }
}

/// Fit the Fisher-vector mixture on the top-layer states of every training
/// sequence.
pub fn fit_fisher(train: &Dataset, model: &Model, params: &ParamSet<f32>, components: usize, seed: u64) -> Result<Gmm> {
    let mut data = Vec::new();
    for ident in &train.identities {
        for view in View::BOTH {
            for seq in ident.view(view) {
                let r = model.represent(params, &seq.frames)?;
                data.extend(r.top.iter().map(|h| h.iter().map(|&v| f64::from(v)).collect::<Vec<_>>()));
            }
        }
    }
    let fit = fit_gmm(&data, components, 50, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(fit.model)
}

/// Probe rows against gallery columns, aligned so the true match is on the
/// diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub probe: Vec<String>,
    pub gallery: Vec<String>,
    /// Row-major `[probe, gallery]`.
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(probe: Vec<String>, gallery: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != probe.len() * gallery.len() {
            return Err(Error::Protocol(format!(
                "{} distances for a {}x{} matrix",
                values.len(),
                probe.len(),
                gallery.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Protocol(format!("distance {v} is not a finite nonnegative value")));
        }
        Ok(Self { probe, gallery, values })
    }

    pub fn rows(&self) -> usize {
        self.probe.len()
    }

    pub fn cols(&self) -> usize {
        self.gallery.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols()..(i + 1) * self.cols()]
    }

    pub fn to_tensor(&self) -> Result<Tensor<f64>> {
        Ok(Tensor::new(&[self.rows(), self.cols()], self.values.clone())?)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distances between identities present on both sides, in probe order.
pub fn distance_matrix(probe: &Extraction, gallery: &Extraction) -> Result<DistanceMatrix> {
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    for (i, id) in probe.ids.iter().enumerate() {
        match gallery.ids.iter().position(|g| g == id) {
            Some(j) => {
                rows.push(i);
                cols.push(j);
            }
            None => log::warn!("probe {id} has no gallery sequence; excluded"),
        }
    }
    for id in &gallery.ids {
        if !probe.ids.contains(id) {
            log::warn!("gallery {id} has no probe sequence; excluded");
        }
    }
    let mut values = Vec::with_capacity(rows.len() * cols.len());
    for &i in &rows {
        for &j in &cols {
            values.push(euclidean(&probe.vectors[i], &gallery.vectors[j]));
        }
    }
    let ids: Vec<String> = rows.iter().map(|&i| probe.ids[i].clone()).collect();
    DistanceMatrix::new(ids.clone(), ids, values)
}

/// Temporal-mean-image baseline on raw pixels.
pub fn raw_pixel_distances(ds: &Dataset) -> Result<DistanceMatrix> {
    let collect = |view: View| {
        let mut ext = Extraction {
            ids: Vec::new(),
            vectors: Vec::new(),
        };
        for (ident, m) in ds.identities.iter().zip(pixel_means(ds, view, None)) {
            if let Some(m) = m {
                ext.ids.push(ident.id.clone());
                ext.vectors.push(m);
            }
        }
        ext
    };
    distance_matrix(&collect(View::A), &collect(View::B))
}

/// 1-based rank of the true match of probe `i`. Ties go to the lower
/// gallery index.
pub fn true_match_rank(row: &[f64], i: usize) -> usize {
    let d = row[i];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v < d || (v == d && j < i))
        .count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmcResult {
    pub ranks: Vec<usize>,
    /// Mean match percentage per rank.
    pub match_rate: Vec<f64>,
    /// Population standard deviation across trials.
    pub std_rate: Vec<f64>,
    pub trials: usize,
    pub per_trial: Vec<Vec<f64>>,
    /// Set when some trials failed and are missing from the average.
    pub incomplete: bool,
}

/// Match percentages at `ranks` for one distance matrix.
pub fn cmc_curve(dist: &DistanceMatrix, ranks: &[usize]) -> Result<Vec<f64>> {
    if dist.rows() != dist.cols() {
        return Err(Error::Protocol(format!(
            "CMC needs a square matrix, got {}x{}",
            dist.rows(),
            dist.cols()
        )));
    }
    if dist.probe != dist.gallery {
        return Err(Error::Protocol("probe and gallery identities are not aligned".into()));
    }
    if dist.rows() == 0 {
        return Err(Error::Protocol("empty distance matrix".into()));
    }
    if ranks.is_empty() || ranks.contains(&0) {
        return Err(Error::Usage("ranks must be positive".into()));
    }
    let found: Vec<usize> = (0..dist.rows()).map(|i| true_match_rank(dist.row(i), i)).collect();
    let n = found.len() as f64;
    Ok(ranks
        .iter()
        .map(|&r| 100.0 * found.iter().filter(|&&k| k <= r).count() as f64 / n)
        .collect())
}

pub fn cmc(dist: &DistanceMatrix, ranks: &[usize]) -> Result<CmcResult> {
    Ok(CmcResult::aggregate(ranks, vec![cmc_curve(dist, ranks)?], false))
}

impl CmcResult {
    pub fn aggregate(ranks: &[usize], per_trial: Vec<Vec<f64>>, incomplete: bool) -> Self {
        let t = per_trial.len().max(1) as f64;
        let mut mean = vec![0.0; ranks.len()];
        for c in &per_trial {
            mean.iter_mut().zip(c).for_each(|(m, v)| *m += v / t);
        }
        let std = (0..ranks.len())
            .map(|r| (per_trial.iter().map(|c| (c[r] - mean[r]).powi(2)).sum::<f64>() / t).sqrt())
            .collect();
        Self {
            ranks: ranks.to_vec(),
            match_rate: mean,
            std_rate: std,
            trials: per_trial.len(),
            per_trial,
            incomplete,
        }
    }

    /// Mean rate at `rank`, if it was computed.
    pub fn at(&self, rank: usize) -> Option<f64> {
        self.ranks.iter().position(|&r| r == rank).map(|i| self.match_rate[i])
    }

    pub fn rank1(&self) -> f64 {
        self.at(1).unwrap_or(f64::NAN)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,mean_rate,std_rate\n");
        for ((r, m), s) in self.ranks.iter().zip(&self.match_rate).zip(&self.std_rate) {
            let _ = writeln!(out, "{r},{m:.4},{s:.4}");
        }
        out
    }
}

/// Expected rank-1 percentage of a ranker that orders the gallery at
/// random, estimated over `draws` random matrices.
pub fn random_ranker(n: usize, draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
    let mut total = 0.0;
    for _ in 0..draws {
        let values = (0..n * n).map(|_| rng.gen::<f64>()).collect();
        let d = DistanceMatrix::new(ids.clone(), ids.clone(), values)?;
        total += cmc_curve(&d, &[1])?[0];
    }
    Ok(total / draws as f64)
}

/// Rank-1 for every probe length × gallery length pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthAblation {
    pub lengths: Vec<usize>,
    /// `rank1[probe][gallery]`.
    pub rank1: Vec<Vec<f64>>,
}

impl LengthAblation {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("probe_len");
        for l in &self.lengths {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for (l, row) in self.lengths.iter().zip(&self.rank1) {
            let _ = write!(out, "{l}");
            for v in row {
                let _ = write!(out, ",{v:.4}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn ablate_length(ex: &Extractor, ds: &Dataset, lengths: &[usize]) -> Result<LengthAblation> {
    let probes = lengths
        .iter()
        .map(|&l| ex.extract(ds, View::A, Some(l)))
        .collect::<Result<Vec<_>>>()?;
    let galleries = lengths
        .iter()
        .map(|&l| ex.extract(ds, View::B, Some(l)))
        .collect::<Result<Vec<_>>>()?;
    let mut rank1 = Vec::with_capacity(lengths.len());
    for p in &probes {
        let row = galleries
            .iter()
            .map(|g| Ok(cmc_curve(&distance_matrix(p, g)?, &[1])?[0]))
            .collect::<Result<Vec<_>>>()?;
        rank1.push(row);
    }
    Ok(LengthAblation {
        lengths: lengths.to_vec(),
        rank1,
    })
}

#[derive(Clone, Debug)]
pub struct TrialOptions {
    /// Share of identities used for training.
    pub fraction: f64,
    pub ranks: Vec<usize>,
    pub tta: bool,
}

impl Default for TrialOptions {
    fn default() -> Self {
        Self {
            fraction: 0.5,
            ranks: DEFAULT_RANKS.to_vec(),
            tta: false,
        }
    }
}

/// Train on one split and score the held-out identities.
pub fn run_trial(ds: &Dataset, config: &RunConfig, trial_seed: u64, opts: &TrialOptions) -> Result<Vec<f64>> {
    let (train, test) = ds.split(opts.fraction, trial_seed)?;
    let mut trainer = Trainer::new(config.clone())?;
    trainer.fit(&train)?;
    let gmm = match config.model.pool {
        crate::config::TemporalPool::Fisher => Some(fit_fisher(
            &train,
            &trainer.model,
            &trainer.params,
            config.model.fisher_components,
            config.train.seed,
        )?),
        _ => None,
    };
    let ex = Extractor {
        fisher: gmm.as_ref(),
        tta: opts.tta,
        workers: config.train.workers,
        ..Extractor::new(&trainer.model, &trainer.params)
    };
    cmc_curve(&ex.distances(&test, None, None)?, &opts.ranks)
}

/// Fresh split and fresh training per trial. Trial `k` uses training seed
/// `config.train.seed + k` and the same value as split seed.
pub fn multi_trial(ds: &Dataset, config: &RunConfig, n_trials: usize, opts: &TrialOptions) -> Result<CmcResult> {
    if n_trials == 0 {
        return Err(Error::Usage("at least one trial is required".into()));
    }
    let mut curves = Vec::new();
    let mut failed = 0;
    for k in 0..n_trials {
        let mut cfg = config.clone();
        cfg.train.seed = config.train.seed + k as u64;
        match run_trial(ds, &cfg, cfg.train.seed, opts) {
            Ok(c) => curves.push(c),
            Err(e) => {
                log::error!("trial {k} failed: {e}");
                failed += 1;
            }
        }
    }
    if curves.is_empty() {
        return Err(Error::Protocol(format!("all {n_trials} trials failed")));
    }
    Ok(CmcResult::aggregate(&opts.ranks, curves, failed > 0))
}
