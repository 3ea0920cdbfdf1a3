//! Two-view sequence datasets: in-memory form, on-disk layout, identity
//! splits and the synthetic pedestrian generator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqattn_tensor::Tensor;

use crate::config::{parse_dims, KvFile};
use crate::error::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum View {
    /// First camera, used as the probe.
    A,
    /// Second camera, used as the gallery.
    B,
}

impl View {
    pub const BOTH: [View; 2] = [View::A, View::B];

    pub fn index(self) -> usize {
        match self {
            View::A => 0,
            View::B => 1,
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            View::A => "a",
            View::B => "b",
        }
    }
}

/// Frames are `[A, B, 3]` tensors with values in `[0, 1]`.
pub type Frame = Tensor<f32>;

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Frame>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub id: String,
    /// Sequences per view, indexed by [`View::index`].
    pub views: [Vec<Sequence>; 2],
}

impl Identity {
    pub fn view(&self, v: View) -> &[Sequence] {
        &self.views[v.index()]
    }

    pub fn has_both_views(&self) -> bool {
        self.views.iter().all(|v| !v.is_empty())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub frame: (usize, usize),
    pub identities: Vec<Identity>,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn frame_count(&self) -> usize {
        self.identities
            .iter()
            .flat_map(|i| i.views.iter().flatten())
            .map(Sequence::len)
            .sum()
    }

    pub fn sequence_count(&self) -> usize {
        self.identities.iter().map(|i| i.views[0].len() + i.views[1].len()).sum()
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            frame: self.frame,
            identities: idx.iter().map(|&i| self.identities[i].clone()).collect(),
            seed: self.seed,
        }
    }

    /// Identity-disjoint split; `fraction` of identities go to the first part.
    pub fn split(&self, fraction: f64, trial_seed: u64) -> Result<(Dataset, Dataset)> {
        if self.len() < 2 {
            return Err(Error::Data(format!("cannot split {} identities", self.len())));
        }
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Usage(format!("split fraction {fraction} outside (0, 1)")));
        }
        let n = self.len();
        let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(trial_seed));
        let (mut train, mut test) = (order[..n_train].to_vec(), order[n_train..].to_vec());
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        for ident in &self.identities {
            for v in View::BOTH {
                for (s, seq) in ident.view(v).iter().enumerate() {
                    let dir = root.join(&ident.id).join(v.dir_name()).join(s.to_string());
                    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                    for (t, f) in seq.frames.iter().enumerate() {
                        write_ppm(&dir.join(format!("frame_{t:05}.ppm")), f)?;
                    }
                }
            }
        }
        let path = root.join("manifest.txt");
        fs::write(&path, self.manifest()).map_err(io_err(&path))
    }

    pub fn manifest(&self) -> String {
        let mut kv = KvFile::default();
        kv.set("frame", format!("{}x{}", self.frame.0, self.frame.1));
        kv.set("identities", self.len());
        kv.set("sequences", self.sequence_count());
        kv.set("frames", self.frame_count());
        if let Some(s) = self.seed {
            kv.set("seed", s);
        }
        let mut out = kv.render();
        for ident in &self.identities {
            let lens = |v: View| {
                ident
                    .view(v)
                    .iter()
                    .map(|s| s.len().to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let _ = writeln!(out, "# {} a: {} | b: {}", ident.id, lens(View::A), lens(View::B));
        }
        out
    }

    pub fn load(root: &Path) -> Result<Dataset> {
        if !root.is_dir() {
            return Err(Error::Missing(root.to_path_buf()));
        }
        let manifest_path = root.join("manifest.txt");
        let manifest = match fs::read_to_string(&manifest_path) {
            Ok(text) => Some(KvFile::parse(&text)?),
            Err(_) => None,
        };
        let mut ids: Vec<PathBuf> = sorted_dirs(root)?;
        ids.retain(|p| p.file_name().is_some());
        let mut identities = Vec::new();
        let mut frame_dims: Option<(usize, usize)> = None;
        for dir in ids {
            let id = dir.file_name().expect("dir has a name").to_string_lossy().into_owned();
            let mut views: [Vec<Sequence>; 2] = [Vec::new(), Vec::new()];
            for v in View::BOTH {
                let vdir = dir.join(v.dir_name());
                if !vdir.is_dir() {
                    log::warn!("identity {id} has no view {}", v.dir_name());
                    continue;
                }
                let mut seqs: Vec<(usize, PathBuf)> = sorted_dirs(&vdir)?
                    .into_iter()
                    .filter_map(|p| {
                        let n = p.file_name()?.to_str()?.parse::<usize>().ok()?;
                        Some((n, p))
                    })
                    .collect();
                seqs.sort();
                for (_, sdir) in seqs {
                    let mut files: Vec<PathBuf> = fs::read_dir(&sdir)
                        .map_err(io_err(&sdir))?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
                        .collect();
                    files.sort();
                    let mut frames = Vec::with_capacity(files.len());
                    for f in files {
                        let fr = read_ppm(&f)?;
                        let dims = (fr.shape()[0], fr.shape()[1]);
                        match frame_dims {
                            None => frame_dims = Some(dims),
                            Some(d) if d != dims => {
                                return Err(Error::Load {
                                    path: f,
                                    reason: format!("frame is {dims:?}, dataset frames are {d:?}"),
                                })
                            }
                            _ => {}
                        }
                        frames.push(fr);
                    }
                    if frames.is_empty() {
                        return Err(Error::Load {
                            path: sdir,
                            reason: "sequence directory has no frames".into(),
                        });
                    }
                    views[v.index()].push(Sequence { frames });
                }
            }
            identities.push(Identity { id, views });
        }
        if identities.is_empty() {
            return Err(Error::Data(format!("{} contains no identities", root.display())));
        }
        let frame = match (frame_dims, manifest.as_ref().and_then(|m| m.get("frame"))) {
            (Some(d), _) => d,
            (None, Some(s)) => parse_dims(s)?,
            (None, None) => return Err(Error::Data("dataset has no frames".into())),
        };
        let seed = match &manifest {
            Some(m) => m.parsed::<u64>("seed")?,
            None => None,
        };
        Ok(Dataset { frame, identities, seed })
    }
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P6 with maxval 255.
pub fn write_ppm(path: &Path, frame: &Frame) -> Result<()> {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let bytes: Vec<u8> = frame.data().iter().map(|&v| quantize(v)).collect();
    let file = fs::File::create(path).map_err(io_err(path))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&bytes, w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Reads PPM or PGM; grey frames are replicated over three channels.
pub fn read_ppm(path: &Path) -> Result<Frame> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok(Tensor::new(&[h as usize, w as usize, 3], data)?)
}

/// Generator settings for the synthetic two-camera dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub identities: usize,
    pub sequences_per_view: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub frame: (usize, usize),
    /// Per-channel gain of the second camera.
    pub gain: [f64; 3],
    /// Additive brightness offset of the second camera.
    pub brightness: f64,
    /// Isotropic scale about the frame centre in the second camera.
    pub scale: f64,
    /// Pixel shift (rows, cols) of the second camera.
    pub shift: (f64, f64),
    /// Amplitude of the background texture and per-pixel noise.
    pub noise: f64,
    /// Walk-cycle period in frames.
    pub period: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            identities: 20,
            sequences_per_view: 2,
            min_len: 30,
            max_len: 60,
            frame: (32, 32),
            gain: [1.2, 0.9, 0.75],
            brightness: -0.05,
            scale: 0.92,
            shift: (1.0, -2.0),
            noise: 0.15,
            period: 8,
            seed: 7,
        }
    }
}

impl SynthSpec {
    /// An identity second camera and no noise.
    pub fn controlled(mut self) -> Self {
        self.gain = [1.0; 3];
        self.brightness = 0.0;
        self.scale = 1.0;
        self.shift = (0.0, 0.0);
        self.noise = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.frame;
        if h < 16 || w < 12 {
            return Err(Error::Spec(format!("frame {h}x{w} is too small to render a figure (need 16x12)")));
        }
        if self.identities < 2 {
            return Err(Error::Spec("need at least 2 identities".into()));
        }
        if self.sequences_per_view == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Spec("sequence counts and lengths must be positive and ordered".into()));
        }
        if self.period == 0 || !(self.scale > 0.0) || self.noise < 0.0 {
            return Err(Error::Spec("period, scale and noise must be positive".into()));
        }
        Ok(())
    }

    /// Reads `synth.*` keys over the defaults.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut s = Self::default();
        for key in kv.keys() {
            let Some(field) = key.strip_prefix("synth.") else { continue };
            let val = kv.get(key).expect("present");
            let bad = || Error::Spec(format!("bad value '{val}' for {key}"));
            let f = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
            let u = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
            match field {
                "identities" => s.identities = u(val)?,
                "sequences_per_view" => s.sequences_per_view = u(val)?,
                "min_len" => s.min_len = u(val)?,
                "max_len" => s.max_len = u(val)?,
                "frame" => s.frame = parse_dims(val).map_err(|_| bad())?,
                "gain" => {
                    let g: Vec<f64> = val.split(',').map(f).collect::<Result<_>>()?;
                    s.gain = g.try_into().map_err(|_| bad())?;
                }
                "brightness" => s.brightness = f(val)?,
                "scale" => s.scale = f(val)?,
                "shift" => {
                    let g: Vec<f64> = val.split(',').map(f).collect::<Result<_>>()?;
                    let [a, b]: [f64; 2] = g.try_into().map_err(|_| bad())?;
                    s.shift = (a, b);
                }
                "noise" => s.noise = f(val)?,
                "period" => s.period = u(val)?,
                "seed" => s.seed = val.trim().parse().map_err(|_| bad())?,
                _ => return Err(Error::Spec(format!("unknown key '{key}'"))),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text).map_err(|e| Error::Spec(e.to_string()))?;
        Self::from_kv(&kv)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        let fl = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        kv.set("synth.identities", self.identities);
        kv.set("synth.sequences_per_view", self.sequences_per_view);
        kv.set("synth.min_len", self.min_len);
        kv.set("synth.max_len", self.max_len);
        kv.set("synth.frame", format!("{}x{}", self.frame.0, self.frame.1));
        kv.set("synth.gain", fl(&self.gain));
        kv.set("synth.brightness", self.brightness);
        kv.set("synth.scale", self.scale);
        kv.set("synth.shift", fl(&[self.shift.0, self.shift.1]));
        kv.set("synth.noise", self.noise);
        kv.set("synth.period", self.period);
        kv.set("synth.seed", self.seed);
        kv
    }
}

/// Latent appearance of one synthetic person.
#[derive(Clone, Debug)]
struct Appearance {
    head: [f64; 3],
    torso: [f64; 3],
    stripe: [f64; 3],
    stripe_period: usize,
    legs: [f64; 3],
    /// Torso half-width as a fraction of the frame width.
    girth: f64,
    /// Horizontal centre as a fraction of the frame width.
    centre: f64,
    stride: f64,
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

impl Appearance {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            head: color(rng),
            torso: color(rng),
            stripe: color(rng),
            stripe_period: rng.gen_range(2..=5),
            legs: color(rng),
            girth: rng.gen_range(0.13..0.22),
            centre: rng.gen_range(0.42..0.58),
            stride: rng.gen_range(0.06..0.14),
        }
    }
}

/// Background of one sequence: base colour plus two gratings.
#[derive(Clone, Debug)]
struct Backdrop {
    base: [f64; 3],
    waves: [(f64, f64, f64, [f64; 3]); 2],
}

impl Backdrop {
    fn sample(rng: &mut ChaCha8Rng, noise: f64) -> Self {
        let base = [0.5; 3].map(|b: f64| b + noise * rng.gen_range(-1.0..1.0));
        let mut wave = || {
            let fy = rng.gen_range(0.1..0.8);
            let fx = rng.gen_range(0.1..0.8);
            let ph = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = [0; 3].map(|_| noise * rng.gen_range(0.2..1.0));
            (fy, fx, ph, amp)
        };
        Self {
            base,
            waves: [wave(), wave()],
        }
    }

    fn at(&self, y: f64, x: f64) -> [f64; 3] {
        let mut c = self.base;
        for &(fy, fx, ph, amp) in &self.waves {
            let s = (fy * y + fx * x + ph).sin();
            for ch in 0..3 {
                c[ch] += amp[ch] * s;
            }
        }
        c
    }
}

/// Colour at continuous view-A coordinates; `None` means background.
fn figure(app: &Appearance, h: f64, w: f64, phase: f64, y: f64, x: f64) -> Option<[f64; 3]> {
    let swing = (std::f64::consts::TAU * phase).sin();
    let bob = 0.02 * h * (2.0 * std::f64::consts::TAU * phase).cos();
    let cx = app.centre * w;
    let top = 0.08 * h + bob;
    let head_r = 0.09 * h;
    let head_c = top + head_r;
    if (y - head_c).powi(2) + (x - cx).powi(2) <= head_r * head_r {
        return Some(app.head);
    }
    let torso_top = head_c + head_r;
    let torso_bot = torso_top + 0.34 * h;
    let half = app.girth * w;
    if y >= torso_top && y < torso_bot && (x - cx).abs() <= half {
        let band = ((y - torso_top) as usize / app.stripe_period) % 2;
        return Some(if band == 0 { app.torso } else { app.stripe });
    }
    let leg_bot = (torso_bot + 0.36 * h).min(h);
    if y >= torso_bot && y < leg_bot {
        let leg_w = 0.35 * half;
        let off = app.stride * w * swing;
        let left = cx - 0.5 * half + off;
        let right = cx + 0.5 * half - off;
        if (x - left).abs() <= leg_w || (x - right).abs() <= leg_w {
            return Some(app.legs);
        }
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn render(
    spec: &SynthSpec,
    app: &Appearance,
    back: &Backdrop,
    view: View,
    phase: f64,
    rng: &mut ChaCha8Rng,
) -> Frame {
    let (h, w) = spec.frame;
    let (hf, wf) = (h as f64, w as f64);
    let (cy, cx) = (hf / 2.0, wf / 2.0);
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let (mut y, mut x) = (r as f64 + 0.5, c as f64 + 0.5);
            if view == View::B {
                // Inverse of: scale about the centre, then shift.
                y = (y - spec.shift.0 - cy) / spec.scale + cy;
                x = (x - spec.shift.1 - cx) / spec.scale + cx;
            }
            let mut px = figure(app, hf, wf, phase, y, x).unwrap_or_else(|| back.at(y, x));
            for v in px.iter_mut() {
                *v += spec.noise * 0.5 * rng.gen_range(-1.0..1.0);
            }
            if view == View::B {
                for (ch, v) in px.iter_mut().enumerate() {
                    *v = *v * spec.gain[ch] + spec.brightness;
                }
            }
            for v in px {
                data.push(f32::from(quantize(v as f32)) / 255.0);
            }
        }
    }
    Tensor::new(&[h, w, 3], data).expect("shape matches")
}

/// Deterministic synthetic dataset.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let apps: Vec<Appearance> = (0..spec.identities).map(|_| Appearance::sample(&mut rng)).collect();
    let width = spec.identities.saturating_sub(1).to_string().len().max(4);
    let mut identities = Vec::with_capacity(spec.identities);
    for (i, app) in apps.iter().enumerate() {
        let mut views: [Vec<Sequence>; 2] = [Vec::new(), Vec::new()];
        for v in View::BOTH {
            for _ in 0..spec.sequences_per_view {
                let len = rng.gen_range(spec.min_len..=spec.max_len);
                let offset = rng.gen_range(0..spec.period);
                let back = Backdrop::sample(&mut rng, spec.noise);
                let mut frame_rng = ChaCha8Rng::seed_from_u64(rng.gen());
                let frames = (0..len)
                    .map(|t| {
                        let phase = ((t + offset) % spec.period) as f64 / spec.period as f64;
                        render(spec, app, &back, v, phase, &mut frame_rng)
                    })
                    .collect();
                views[v.index()].push(Sequence { frames });
            }
        }
        identities.push(Identity {
            id: format!("id{i:0width$}"),
            views,
        });
    }
    Ok(Dataset {
        frame: spec.frame,
        identities,
        seed: Some(spec.seed),
    })
}

/// Temporal mean image per identity and view, flattened.
pub fn pixel_means(ds: &Dataset, view: View, max_len: Option<usize>) -> Vec<Option<Vec<f64>>> {
    ds.identities
        .iter()
        .map(|ident| {
            let seq = ident.view(view).first()?;
            let n = max_len.map_or(seq.len(), |m| m.min(seq.len()));
            let mut acc = vec![0.0; seq.frames[0].len()];
            for f in &seq.frames[..n] {
                acc.iter_mut().zip(f.data()).for_each(|(a, &v)| *a += f64::from(v));
            }
            Some(acc.into_iter().map(|a| a / n as f64).collect())
        })
        .collect()
}

/// Frame-count census by walking a saved dataset directory.
pub fn census(root: &Path) -> Result<BTreeMap<String, usize>> {
    let mut out = BTreeMap::new();
    for dir in sorted_dirs(root)? {
        let id = dir.file_name().expect("named").to_string_lossy().into_owned();
        let mut n = 0;
        let mut stack = vec![dir];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).map_err(io_err(&d))? {
                let p = e.map_err(io_err(&d))?.path();
                if p.is_dir() {
                    stack.push(p);
                } else if p.extension().and_then(|e| e.to_str()) == Some("ppm") {
                    n += 1;
                }
            }
        }
        out.insert(id, n);
    }
    Ok(out)
}
