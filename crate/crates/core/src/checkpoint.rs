//! Checkpoint directories: one STNS1 file per parameter and optimizer
//! accumulator, the run config, and a manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use seqattn_tensor::{stns, Tensor};

use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};
use crate::network::Model;
use crate::params::ParamSet;

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Number of completed epochs.
    pub epoch: usize,
    pub config: RunConfig,
    pub params: ParamSet<f32>,
    /// RMSProp accumulators, same layout as `params`.
    pub accumulators: ParamSet<f32>,
    pub steps: u64,
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, t) in self.params.iter() {
            stns::save(t, dir.join(format!("{name}.stns")))?;
        }
        for (name, t) in self.accumulators.iter() {
            stns::save(t, dir.join(format!("opt.{name}.stns")))?;
        }
        let cfg = dir.join(CONFIG);
        fs::write(&cfg, self.config.render()).map_err(io_err(&cfg))?;
        let mut m = String::new();
        let _ = writeln!(m, "epoch = {}", self.epoch);
        let _ = writeln!(m, "steps = {}", self.steps);
        let _ = writeln!(m, "config_hash = {}", self.config.hash());
        for (name, t) in self.params.iter() {
            let _ = writeln!(m, "tensor {name} {}", dims(t.shape()));
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, m).map_err(io_err(&path))
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(MANIFEST).is_file()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        if !mpath.is_file() {
            return Err(Error::Missing(mpath));
        }
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let bad = |reason: String| Error::Load {
            path: mpath.clone(),
            reason,
        };
        let mut epoch = None;
        let mut steps = 0;
        let mut hash = None;
        let mut listed = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("tensor ") {
                let (name, shape) = rest.split_once(' ').ok_or_else(|| bad(format!("bad line '{line}'")))?;
                let shape: Vec<usize> = shape
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad shape in '{line}'"))))
                    .collect::<Result<_>>()?;
                listed.push((name.to_string(), shape));
            } else if let Some((k, v)) = line.split_once('=') {
                let v = v.trim();
                match k.trim() {
                    "epoch" => epoch = Some(v.parse().map_err(|_| bad(format!("bad epoch '{v}'")))?),
                    "steps" => steps = v.parse().map_err(|_| bad(format!("bad steps '{v}'")))?,
                    "config_hash" => hash = Some(v.to_string()),
                    _ => {}
                }
            }
        }
        let epoch = epoch.ok_or_else(|| bad("no epoch".into()))?;
        let cpath = dir.join(CONFIG);
        if !cpath.is_file() {
            return Err(Error::Missing(cpath));
        }
        let config = RunConfig::parse(&fs::read_to_string(&cpath).map_err(io_err(&cpath))?)?;
        if hash.as_deref() != Some(config.hash().as_str()) {
            return Err(bad("config hash does not match config.txt".into()));
        }
        let model = Model::new(config.model.clone())?;
        let layout = model.layout();
        let read = |file: String, shape: &[usize]| -> Result<Tensor<f32>> {
            let path = dir.join(&file);
            if !path.is_file() {
                return Err(Error::Missing(path));
            }
            let t: Tensor<f32> = stns::load(&path)?;
            if t.shape() != shape {
                return Err(Error::Load {
                    path,
                    reason: format!("shape {:?}, expected {shape:?}", t.shape()),
                });
            }
            Ok(t)
        };
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut accs = Vec::new();
        for spec in layout.specs() {
            if !listed.iter().any(|(n, s)| n == &spec.name && s == &spec.shape) {
                return Err(bad(format!("manifest does not list {} {:?}", spec.name, spec.shape)));
            }
            params.push(read(format!("{}.stns", spec.name), &spec.shape)?);
            accs.push(read(format!("opt.{}.stns", spec.name), &spec.shape)?);
            names.push(spec.name.clone());
        }
        Ok(Self {
            epoch,
            config,
            params: ParamSet::from_parts(names.clone(), params)?,
            accumulators: ParamSet::from_parts(names, accs)?,
            steps,
        })
    }
}
