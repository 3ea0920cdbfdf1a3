use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seqattn::checkpoint::Checkpoint;
use seqattn::config::{AttentionMode, ModelConfig, RunConfig, TemporalPool, Variant};
use seqattn::data::{generate, Dataset, SynthSpec, View};
use seqattn::eval::{self, Extractor, TrialOptions};
use seqattn::gradcheck;
use seqattn::network::Model;
use seqattn::params::InitScheme;
use seqattn::recurrent;
use seqattn::siamese::Label;
use seqattn::tensor::stns;
use seqattn::training;
use seqattn::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_NAN: u8 = 3;
const EXIT_MISSING: u8 = 4;
const EXIT_USAGE: u8 = 64;
const EXIT_CHECK_FAILED: u8 = 1;

/// Per-run identity split written next to the checkpoint.
const SPLIT: &str = "split.txt";

#[derive(Parser)]
#[command(name = "seqattn", version, about = "Siamese attention ConvGRU sequence matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-camera dataset.
    GenData {
        /// Generator spec (`synth.*` keys); defaults if omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoints plus `loss.csv`.
    Train(TrainArgs),
    /// Rank the held-out identities and print the CMC table.
    Eval(EvalArgs),
    /// Rank-1 for every probe length x gallery length pair.
    AblateLength {
        #[command(flatten)]
        src: Source,
        /// Comma-separated lengths.
        #[arg(long, value_delimiter = ',', default_values_t = eval::ABLATION_LENGTHS)]
        lengths: Vec<usize>,
        /// Write the matrix here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Finite-difference check of every gradient of a toy model in f64.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Dump spatial attention maps and temporal weights per probe.
    Attend {
        #[command(flatten)]
        src: Source,
        /// Only this identity.
        #[arg(long)]
        identity: Option<String>,
        #[arg(long, default_value = "a")]
        view: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recurrent parameter and multiply counts per layer.
    ParamCount {
        #[arg(long)]
        config: Option<PathBuf>,
        /// desk or paper; ignored with --config.
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        variant: Option<Variant>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    /// Fix every spatial attention weight to 1/K².
    #[arg(long)]
    mute_attention: bool,
    #[arg(long)]
    freeze_encoder: bool,
    /// Collapse the attended cube to one cell (FC-GRU input).
    #[arg(long)]
    collapse_attention: bool,
    #[arg(long)]
    pool: Option<TemporalPool>,
    #[arg(long)]
    init: Option<InitScheme>,
    /// Read the dropout ratio as a keep probability.
    #[arg(long)]
    dropout_keep: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    resume: bool,
    /// Share of identities used for training; the rest are held out.
    #[arg(long, default_value_t = 0.5)]
    fraction: f64,
    /// Split seed; defaults to the training seed.
    #[arg(long)]
    split_seed: Option<u64>,
    /// Train on every identity.
    #[arg(long)]
    no_split: bool,
}

#[derive(Args)]
struct Source {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory. Not needed with --trials.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = eval::DEFAULT_RANKS)]
    ranks: Vec<usize>,
    /// Average representations over mirror and shift conditions.
    #[arg(long)]
    tta: bool,
    /// `fisher` encodes top-layer states with a mixture fitted on the
    /// training identities.
    #[arg(long)]
    pool: Option<TemporalPool>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Write the CMC table here as well as to stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Dump the distance matrix as STNS1.
    #[arg(long)]
    dist: Option<PathBuf>,
    /// Fresh split and training per trial, using --config.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NanLoss { .. } => EXIT_NAN,
        Error::Missing(_) => EXIT_MISSING,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
        Error::Usage(_) => EXIT_USAGE,
        _ => EXIT_CONFIG,
    }
}

fn read(path: &Path) -> seqattn::Result<String> {
    fs::read_to_string(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path.to_path_buf())
        } else {
            Error::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

fn write(path: &Path, text: &str) -> seqattn::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn seed_override() -> seqattn::Result<Option<u64>> {
    match std::env::var("SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("SEED='{v}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn load_config(path: Option<&Path>) -> seqattn::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::parse(&read(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed_override()? {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn write_split(out: &Path, train: &Dataset) -> seqattn::Result<()> {
    let mut text = String::from("# identities used for training\n");
    for ident in &train.identities {
        let _ = writeln!(text, "train {}", ident.id);
    }
    write(&out.join(SPLIT), &text)
}

/// (training identities, held-out identities) for a checkpoint.
fn apply_split(ds: &Dataset, ckpt: &Path) -> seqattn::Result<(Dataset, Dataset)> {
    let path = ckpt.join(SPLIT);
    if !path.is_file() {
        log::warn!("no {SPLIT} in {}; evaluating every identity", ckpt.display());
        return Ok((ds.clone(), ds.clone()));
    }
    let train_ids: BTreeSet<String> = read(&path)?
        .lines()
        .filter_map(|l| l.strip_prefix("train "))
        .map(|s| s.trim().to_string())
        .collect();
    let pick = |keep: bool| Dataset {
        frame: ds.frame,
        identities: ds
            .identities
            .iter()
            .filter(|i| train_ids.contains(&i.id) == keep)
            .cloned()
            .collect(),
        seed: ds.seed,
    };
    Ok((pick(true), pick(false)))
}

fn cmd_gen_data(spec: Option<&Path>, out: &Path) -> seqattn::Result<()> {
    let mut s = match spec {
        Some(p) => SynthSpec::parse(&read(p)?)?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = seed_override()? {
        s.seed = seed;
    }
    let ds = generate(&s)?;
    ds.save(out)?;
    println!(
        "wrote {} identities, {} sequences, {} frames to {}",
        ds.len(),
        ds.sequence_count(),
        ds.frame_count(),
        out.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> seqattn::Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let m = &mut cfg.model;
    if let Some(v) = a.variant {
        m.apply_variant(v);
    }
    if a.mute_attention {
        m.attention = AttentionMode::Muted;
    }
    if a.collapse_attention {
        m.collapse_attention = true;
    }
    if let Some(p) = a.pool {
        m.pool = p;
    }
    let t = &mut cfg.train;
    if let Some(i) = a.init {
        t.init = i;
    }
    if a.dropout_keep {
        t.dropout_keep = true;
    }
    if a.freeze_encoder {
        t.freeze_encoder = true;
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(w) = a.workers {
        t.workers = w;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;

    let ds = Dataset::load(&a.data)?;
    if ds.frame != cfg.model.encoder.frame {
        return Err(Error::Config(format!(
            "dataset frames are {}x{} but the model expects {}x{}",
            ds.frame.0, ds.frame.1, cfg.model.encoder.frame.0, cfg.model.encoder.frame.1
        )));
    }
    let train = if a.no_split {
        ds
    } else {
        let (train, _) = ds.split(a.fraction, a.split_seed.unwrap_or(cfg.train.seed))?;
        train
    };
    fs::create_dir_all(&a.out).map_err(|source| Error::Io {
        path: a.out.clone(),
        source,
    })?;
    write_split(&a.out, &train)?;
    let logs = training::train(&train, &cfg, &a.out, a.resume)?;
    if let Some(last) = logs.last() {
        println!(
            "epoch {} mean_loss {:.6} clip_events {}",
            last.epoch, last.mean_loss, last.clip_events
        );
    } else {
        println!("nothing to do: checkpoint already has {} epochs", cfg.train.epochs);
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> seqattn::Result<()> {
    let ds = Dataset::load(&a.data)?;
    let result = if let Some(n) = a.trials {
        let mut cfg = load_config(a.config.as_deref())?;
        if let Some(p) = a.pool {
            cfg.model.pool = p;
        }
        cfg.train.workers = a.workers;
        let opts = TrialOptions {
            ranks: a.ranks.clone(),
            tta: a.tta,
            ..TrialOptions::default()
        };
        let r = eval::multi_trial(&ds, &cfg, n, &opts)?;
        if r.incomplete {
            eprintln!("warning: only {} of {n} trials completed", r.trials);
        }
        r
    } else {
        let ckpt_dir = a
            .ckpt
            .as_deref()
            .ok_or_else(|| Error::Usage("eval needs --ckpt or --trials".into()))?;
        let ck = Checkpoint::load(ckpt_dir)?;
        let model = Model::new(ck.config.model.clone())?;
        let (train, test) = apply_split(&ds, ckpt_dir)?;
        let fisher = matches!(a.pool.unwrap_or(ck.config.model.pool), TemporalPool::Fisher);
        let gmm = if fisher {
            Some(eval::fit_fisher(
                &train,
                &model,
                &ck.params,
                ck.config.model.fisher_components,
                ck.config.train.seed,
            )?)
        } else {
            None
        };
        let ex = Extractor {
            fisher: gmm.as_ref(),
            tta: a.tta,
            workers: a.workers,
            ..Extractor::new(&model, &ck.params)
        };
        let dist = ex.distances(&test, None, None)?;
        if let Some(p) = &a.dist {
            stns::save(&dist.to_tensor()?, p)?;
        }
        eval::cmc(&dist, &a.ranks)?
    };
    let csv = result.to_csv();
    print!("{csv}");
    if let Some(p) = &a.csv {
        write(p, &csv)?;
    }
    Ok(())
}

fn cmd_ablate(src: &Source, lengths: &[usize], out: Option<&Path>, workers: usize) -> seqattn::Result<()> {
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::Usage("lengths must be positive".into()));
    }
    let ds = Dataset::load(&src.data)?;
    let ck = Checkpoint::load(&src.ckpt)?;
    let model = Model::new(ck.config.model.clone())?;
    let (_, test) = apply_split(&ds, &src.ckpt)?;
    let ex = Extractor {
        workers,
        ..Extractor::new(&model, &ck.params)
    };
    let csv = eval::ablate_length(&ex, &test, lengths)?.to_csv();
    print!("{csv}");
    if let Some(p) = out {
        write(p, &csv)?;
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> seqattn::Result<bool> {
    let mut ok = true;
    let mut worst = 0.0f64;
    println!("label,parameter,max_rel_error");
    for (label, s) in [(Label::Sim, seed), (Label::Dis, seed + 1)] {
        let r = gradcheck::check_model(gradcheck::toy_config(), 2, label, 1.0, s)?;
        for (name, e) in &r.per_param {
            println!("{label:?},{name},{e:.3e}");
        }
        worst = worst.max(r.max_rel_error());
        ok &= r.passes();
    }
    println!(
        "max relative error {worst:.3e} (tolerance {:.0e}): {}",
        gradcheck::TOLERANCE,
        if ok { "ok" } else { "FAILED" }
    );
    Ok(ok)
}

fn cmd_attend(src: &Source, identity: Option<&str>, view: &str, out: &Path) -> seqattn::Result<()> {
    let view = match view {
        "a" | "A" => View::A,
        "b" | "B" => View::B,
        other => return Err(Error::Usage(format!("view must be a or b, got '{other}'"))),
    };
    let ds = Dataset::load(&src.data)?;
    let ck = Checkpoint::load(&src.ckpt)?;
    let model = Model::new(ck.config.model.clone())?;
    let mut written = 0;
    for ident in &ds.identities {
        if identity.is_some_and(|id| id != ident.id) {
            continue;
        }
        let Some(seq) = ident.view(view).first() else {
            log::warn!("identity {} has no {view:?} sequence", ident.id);
            continue;
        };
        let r = model.represent(&ck.params, &seq.frames)?;
        let mut spatial = String::from("frame");
        for i in 0..model.cells() {
            let _ = write!(spatial, ",m{i}");
        }
        spatial.push('\n');
        for (t, m) in r.traces.iter().enumerate() {
            let _ = write!(spatial, "{t}");
            for v in m {
                let _ = write!(spatial, ",{v:.8}");
            }
            spatial.push('\n');
        }
        write(&out.join(format!("{}.spatial.csv", ident.id)), &spatial)?;
        if let Some(alpha) = &r.alpha {
            let mut temporal = String::from("frame,alpha\n");
            for (t, v) in alpha.iter().enumerate() {
                let _ = writeln!(temporal, "{t},{v:.8}");
            }
            write(&out.join(format!("{}.temporal.csv", ident.id)), &temporal)?;
        }
        written += 1;
    }
    if written == 0 {
        return Err(Error::Missing(out.to_path_buf()));
    }
    println!("wrote attention maps for {written} sequences to {}", out.display());
    Ok(())
}

fn cmd_param_count(config: Option<&Path>, preset: &str, variant: Option<Variant>) -> seqattn::Result<()> {
    let mut m = match config {
        Some(p) => load_config(Some(p))?.model,
        None => match preset {
            "desk" => ModelConfig::desk(),
            "paper" => ModelConfig::paper(),
            other => return Err(Error::Config(format!("unknown preset '{other}'"))),
        },
    };
    if let Some(v) = variant {
        m.apply_variant(v);
    }
    m.validate()?;
    let census = recurrent::layer_census(&m)?;
    let model = Model::new(m.clone())?;
    let allocated = recurrent::allocated_kernel_elements(model.layout(), census.len());
    println!("layer,c_x,c_h,kernel,grid,params,allocated,conv_mults_per_step,fc_mults_per_step");
    let (mut conv, mut fc) = (0usize, 0usize);
    for (c, alloc) in census.iter().zip(&allocated) {
        let g2 = c.grid * c.grid;
        let fc_mults = 3 * g2 * g2 * (c.c_x * c.c_h + c.c_h * c.c_h);
        conv += c.flops_per_step;
        fc += fc_mults;
        println!(
            "{},{},{},{},{},{},{},{},{}",
            c.layer, c.c_x, c.c_h, c.kernel, c.grid, c.params, alloc, c.flops_per_step, fc_mults
        );
    }
    println!("total recurrent parameters: {}", recurrent::param_count(&m)?);
    println!("total model parameters: {}", model.layout().specs().iter().map(|s| s.shape.iter().product::<usize>()).sum::<usize>());
    println!("fc/conv multiply ratio per step: {:.3}", fc as f64 / conv as f64);
    Ok(())
}

fn run(cli: Cli) -> seqattn::Result<u8> {
    match cli.command {
        Command::GenData { spec, out } => cmd_gen_data(spec.as_deref(), &out)?,
        Command::Train(a) => cmd_train(&a)?,
        Command::Eval(a) => cmd_eval(&a)?,
        Command::AblateLength {
            src,
            lengths,
            out,
            workers,
        } => cmd_ablate(&src, &lengths, out.as_deref(), workers)?,
        Command::Gradcheck { seed } => {
            if !cmd_gradcheck(seed)? {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
        Command::Attend {
            src,
            identity,
            view,
            out,
        } => cmd_attend(&src, identity.as_deref(), &view, &out)?,
        Command::ParamCount {
            config,
            preset,
            variant,
        } => cmd_param_count(config.as_deref(), &preset, variant)?,
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
