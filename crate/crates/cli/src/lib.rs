//! `medvox` command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
//! 4 transform or inversion error.

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use medvox::datasets::{load_volume, save_volume, CacheMode, DataSource, Dataset};
use medvox::inference::{sliding_window_infer, BlendMode, WindowParams};
use medvox::metrics::{binarize, dice_metric, mean_defined};
use medvox::pipeline::{invert_volume, DataDict, Pipeline, PipelineConfig};
use medvox::{nifti, viz, Error, Item, MetaVolume, Rng, StubPredictor, TraceRecord};
use serde_json::{json, Value};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_TRANSFORM: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "medvox", version, about = "Medical volume preprocessing, inference and metrics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Apply a pipeline to one or more volumes and write a trace sidecar per output.
    Transform {
        /// Input volume; repeat for several keys.
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        /// Output path, one per input.
        #[arg(long = "out", required = true)]
        outputs: Vec<PathBuf>,
        #[arg(long)]
        pipeline: PathBuf,
        /// Overrides the seed in the pipeline file.
        #[arg(long)]
        seed: Option<u64>,
        /// Dictionary key per input (defaults to `image` for a single input).
        #[arg(long = "key")]
        keys: Vec<String>,
    },
    /// Undo a recorded trace, restoring the original geometry.
    Invert {
        #[arg(long = "in")]
        input: PathBuf,
        /// Trace sidecar; defaults to `<in>.trace.json`, then the trace embedded in an MVOL input.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sliding-window inference with a built-in stub predictor.
    Infer {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// identity | threshold:<t> | blur-threshold:<sigma>,<t>
        #[arg(long, default_value = "identity")]
        predictor: String,
        /// Window size, one value per axis or a single value for all axes.
        #[arg(long, value_delimiter = ',', default_value = "32")]
        roi: Vec<usize>,
        #[arg(long, default_value_t = 0.25)]
        overlap: f64,
        #[arg(long, value_enum, default_value_t = BlendArg::Constant)]
        blend: BlendArg,
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
    /// Iterate a dataset for several epochs and report execution counters.
    BenchmarkCache {
        #[arg(long)]
        dataset_dir: PathBuf,
        #[arg(long)]
        pipeline: PathBuf,
        #[arg(long, default_value_t = 3)]
        epochs: u64,
        #[arg(long, value_enum, default_value_t = ModeArg::None)]
        mode: ModeArg,
        /// Fraction of items held by the memory cache.
        #[arg(long, default_value_t = 1.0)]
        cache_rate: f64,
        #[arg(long, env = "MEDVOX_CACHE_DIR")]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Tile slices of channel 0 into a grayscale PPM.
    Montage {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        axis: usize,
        #[arg(long, default_value_t = 1)]
        every: usize,
    },
    /// Montage with label voxels tinted red.
    Blend {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        label: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 2)]
        axis: usize,
        #[arg(long, default_value_t = 1)]
        every: usize,
    },
    /// Write synthetic img_NNN.nii / lbl_NNN.nii pairs.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, value_delimiter = ',', default_value = "32,32,32")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        objects: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-class and mean Dice between two masks (binarised at 0.5).
    Dice {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BlendArg {
    Constant,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    None,
    Memory,
    Persistent,
}

/// A failed command, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn config(m: impl Display) -> Failure {
    Failure { code: EXIT_CONFIG, message: m.to_string() }
}

fn io(m: impl Display) -> Failure {
    Failure { code: EXIT_IO, message: m.to_string() }
}

fn transform(m: impl Display) -> Failure {
    Failure { code: EXIT_TRANSFORM, message: m.to_string() }
}

type CmdResult = Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = if code == EXIT_OK {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(cmd: Command, out: &mut dyn Write) -> CmdResult {
    match cmd {
        Command::Transform { inputs, outputs, pipeline, seed, keys } => {
            cmd_transform(&inputs, &outputs, &pipeline, seed, &keys)
        }
        Command::Invert { input, trace, out: dst } => cmd_invert(&input, trace.as_deref(), &dst),
        Command::Infer { input, out: dst, predictor, roi, overlap, blend, batch } => {
            let blend = match blend {
                BlendArg::Constant => BlendMode::Constant,
                BlendArg::Gaussian => BlendMode::Gaussian,
            };
            cmd_infer(&input, &dst, &predictor, &roi, overlap, blend, batch)
        }
        Command::BenchmarkCache { dataset_dir, pipeline, epochs, mode, cache_rate, cache_dir, json } => {
            cmd_benchmark_cache(&dataset_dir, &pipeline, epochs, mode, cache_rate, cache_dir, json, out)
        }
        Command::Montage { input, out: dst, axis, every } => {
            let v = load(&input)?;
            let img = viz::montage(&v.array, axis, every).map_err(config)?;
            img.save_ppm(&dst).map_err(io)
        }
        Command::Blend { image, label, out: dst, alpha, axis, every } => {
            let (i, l) = (load(&image)?, load(&label)?);
            let img = viz::blend(&i.array, &l.array, alpha, axis, every).map_err(config)?;
            img.save_ppm(&dst).map_err(io)
        }
        Command::Synth { out_dir, count, dims, objects, noise, seed } => {
            cmd_synth(&out_dir, count, &dims, objects, noise, seed)
        }
        Command::Dice { pred, truth, json } => cmd_dice(&pred, &truth, json, out),
    }
}

fn load(path: &Path) -> Result<MetaVolume, Failure> {
    load_volume(path).map_err(io)
}

fn save(v: &MetaVolume, path: &Path) -> CmdResult {
    save_volume(v, path).map_err(io)
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| io(format!("cannot read {}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes).map_err(|e| io(format!("cannot write {}: {e}", path.display())))
}

/// `<out>.trace.json`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".trace.json");
    PathBuf::from(s)
}

fn load_pipeline(path: &Path, seed: Option<u64>) -> Result<Pipeline, Failure> {
    let text = read_text(path)?;
    let mut cfg: PipelineConfig =
        serde_json::from_str(&text).map_err(|e| config(format!("bad pipeline {}: {e}", path.display())))?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    Pipeline::from_config(&cfg).map_err(|e| config(format!("bad pipeline {}: {e}", path.display())))
}

/// Missing dictionary keys are configuration mistakes; any other failure
/// while running or inverting a pipeline is a transform error.
fn run_failure(e: Error) -> Failure {
    match e {
        Error::MissingKey(_) => config(e),
        other => transform(other),
    }
}

pub fn cmd_transform(
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    pipeline: &Path,
    seed: Option<u64>,
    keys: &[String],
) -> CmdResult {
    if inputs.len() != outputs.len() {
        return Err(config(format!("{} inputs but {} outputs", inputs.len(), outputs.len())));
    }
    let keys: Vec<String> = match (keys.len(), inputs.len()) {
        (0, 1) => vec!["image".to_string()],
        (k, n) if k == n => keys.to_vec(),
        (k, n) => return Err(config(format!("{n} inputs need {n} --key values, got {k}"))),
    };
    let p = load_pipeline(pipeline, seed)?;
    let mut d = DataDict::new();
    for (k, path) in keys.iter().zip(inputs) {
        if d.insert(k.clone(), load(path)?).is_some() {
            return Err(config(format!("duplicate key '{k}'")));
        }
    }
    let result = p.apply(Item::Dict(d), 0, 0).map_err(run_failure)?.into_dict().map_err(transform)?;
    for (k, dst) in keys.iter().zip(outputs) {
        let v = &result[k];
        save(v, dst)?;
        let trace = serde_json::to_vec_pretty(&json!({ "applied": v.applied })).map_err(transform)?;
        write_bytes(&sidecar_path(dst), &trace)?;
    }
    Ok(())
}

fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, Failure> {
    let text = read_text(path)?;
    let mut doc: Value =
        serde_json::from_str(&text).map_err(|e| config(format!("bad trace {}: {e}", path.display())))?;
    let applied = doc
        .get_mut("applied")
        .map(Value::take)
        .ok_or_else(|| config(format!("trace {} lacks 'applied'", path.display())))?;
    serde_json::from_value(applied).map_err(|e| config(format!("bad trace {}: {e}", path.display())))
}

pub fn cmd_invert(input: &Path, trace: Option<&Path>, dst: &Path) -> CmdResult {
    let mut v = load(input)?;
    let side = sidecar_path(input);
    if let Some(t) = trace {
        v.applied = read_trace(t)?;
    } else if side.exists() {
        v.applied = read_trace(&side)?;
    }
    let n = v.applied.len();
    let restored = invert_volume(v, Some(n)).map_err(run_failure)?;
    save(&restored, dst)
}

pub fn parse_predictor(spec: &str) -> Result<StubPredictor, Failure> {
    spec.parse().map_err(config)
}

pub fn cmd_infer(
    input: &Path,
    dst: &Path,
    predictor: &str,
    roi: &[usize],
    overlap: f64,
    blend: BlendMode,
    batch: usize,
) -> CmdResult {
    let predictor = parse_predictor(predictor)?;
    if !(0.0..1.0).contains(&overlap) {
        return Err(config(format!("overlap must be in [0, 1), got {overlap}")));
    }
    if batch == 0 {
        return Err(config("batch must be >= 1"));
    }
    let v = load(input)?;
    let rank = v.spatial_rank();
    let roi = match roi.len() {
        1 => vec![roi[0]; rank],
        n if n == rank => roi.to_vec(),
        n => return Err(config(format!("roi has {n} values for {rank} spatial dims"))),
    };
    if roi.contains(&0) {
        return Err(config("roi entries must be >= 1"));
    }
    let params = WindowParams {
        roi,
        overlap,
        blend,
        batch_size: batch,
    };
    let mut pred = sliding_window_infer(&v, &params, &predictor).map_err(transform)?;
    pred.meta.shift_remove("sys.sliding_window_padded");
    save(&pred, dst)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_benchmark_cache(
    dataset_dir: &Path,
    pipeline: &Path,
    epochs: u64,
    mode: ModeArg,
    cache_rate: f64,
    cache_dir: Option<PathBuf>,
    as_json: bool,
    out: &mut dyn Write,
) -> CmdResult {
    let source = DataSource::from_dir(dataset_dir).map_err(io)?;
    if source.is_empty() {
        return Err(io(format!("no .nii items in {}", dataset_dir.display())));
    }
    let p = load_pipeline(pipeline, None)?;
    let cache = match mode {
        ModeArg::None => CacheMode::None,
        ModeArg::Memory => CacheMode::Memory { cache_rate },
        ModeArg::Persistent => CacheMode::Persistent {
            dir: cache_dir.ok_or_else(|| config("persistent mode needs --cache-dir or MEDVOX_CACHE_DIR"))?,
        },
    };
    let ds = Dataset::new(source, p, cache).map_err(config)?;
    let mut rows = Vec::new();
    for e in 0..epochs {
        let t0 = Instant::now();
        for i in 0..ds.len() {
            ds.get(i, e).map_err(|err| match err {
                Error::Io { .. } | Error::Stream(_) | Error::BadMagic { .. } | Error::Truncated(_) => io(err),
                other => run_failure(other),
            })?;
        }
        rows.push((ds.counters(), t0.elapsed().as_secs_f64()));
    }
    let total = ds.counters();
    let mode_name = format!("{mode:?}").to_lowercase();
    let text = if as_json {
        let report = json!({
            "mode": mode_name,
            "items": ds.len(),
            "epochs": epochs,
            "prefix_executions": total.prefix_executions,
            "suffix_executions": total.suffix_executions,
            "cache_warnings": total.cache_warnings,
            "epoch_seconds": rows.iter().map(|r| r.1).collect::<Vec<_>>(),
        });
        format!("{report}\n")
    } else {
        let mut s = format!("mode {mode_name}, {} items, {epochs} epochs\n", ds.len());
        s += &format!("{:>6} {:>10} {:>10} {:>9} {:>10}\n", "epoch", "prefix", "suffix", "warnings", "seconds");
        for (e, (c, secs)) in rows.iter().enumerate() {
            s += &format!(
                "{:>6} {:>10} {:>10} {:>9} {:>10.4}\n",
                e + 1,
                c.prefix_executions,
                c.suffix_executions,
                c.cache_warnings,
                secs
            );
        }
        s += &format!("prefix-executions {}\n", total.prefix_executions);
        s += &format!("suffix-executions {}\n", total.suffix_executions);
        s
    };
    out.write_all(text.as_bytes()).map_err(io)
}

pub fn cmd_synth(out_dir: &Path, count: usize, dims: &[usize], objects: usize, noise: f64, seed: u64) -> CmdResult {
    fs::create_dir_all(out_dir).map_err(|e| io(format!("cannot create {}: {e}", out_dir.display())))?;
    for i in 0..count {
        let mut rng = Rng::new(medvox::rng::derive_seed(seed, &[i as u64]));
        let (img, lbl) = nifti::synth_volume(&mut rng, dims, objects, noise).map_err(config)?;
        save(&img, &out_dir.join(format!("img_{i:03}.nii")))?;
        save(&lbl, &out_dir.join(format!("lbl_{i:03}.nii")))?;
    }
    Ok(())
}

pub fn cmd_dice(pred: &Path, truth: &Path, as_json: bool, out: &mut dyn Write) -> CmdResult {
    let (p, t) = (load(pred)?, load(truth)?);
    let scores = dice_metric(&binarize(&p.array, 0.5), &binarize(&t.array, 0.5)).map_err(config)?;
    let mean = mean_defined(&scores);
    let text = if as_json {
        format!("{}\n", json!({ "per_class": scores, "mean": mean }))
    } else {
        let fmt = |s: Option<f64>| s.map_or("undefined".to_string(), |x| x.to_string());
        let mut s = String::new();
        for (c, v) in scores.iter().enumerate() {
            s += &format!("class {c}: {}\n", fmt(*v));
        }
        s += &format!("mean: {}\n", fmt(mean));
        s
    };
    out.write_all(text.as_bytes()).map_err(io)
}
