//! Command-line surface: `train`, `sample`, `eval`, `rpe-dump`, `bench`.
//!
//! Every command resolves one [`RunConfig`] from an optional config file,
//! `--set key=value` pairs and dedicated flags (later wins), validates it,
//! and echoes it to `<output dir>/effective.cfg` before doing any work.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{format_list, parse_list, ConfigError, KvMap};
use crate::data::{list_images, load_folder, synth_image, DataError, Dataset, SynthSpec};
use crate::eval::{aggregate, center_psnr, format_report, EvalError, PsnrScale, DEFAULT_CUTOFF, UNIT_RANGE_MAX};
use crate::image::{read_image, write_image, ImageError};
use crate::model::Denoiser;
use crate::position::{mode_to_regions, relative_grid, sincos_embed, CropRegion, OutpaintMode, PositionError, DEFAULT_FREQ_BASE};
use crate::sampler::{bench_sampling, format_bench_report, outpaint_item, SampleConfig, SampleError, Sidecar, Trajectory};
use crate::trainer::{load_checkpoint, save_checkpoint, CheckpointError, TrainConfig, TrainError, TrainState};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "OUTPAINT_OUTPUT_DIR";
const DEFAULT_OUTPUT_DIR: &str = "outpaint-out";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("trainer: {0}")]
    Train(#[from] TrainError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("sampler: {0}")]
    Sample(#[from] SampleError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("image: {0}")]
    Image(#[from] ImageError),
    #[error("position: {0}")]
    Position(#[from] PositionError),
    #[error("io: {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("rpe-dump: {0}")]
    Dump(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { count: usize, seed: u64, noise_amplitude: f32 },
    Folder(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOptions {
    pub multiple: f64,
    pub output_side: u32,
    pub anchor: Option<CropRegion>,
    pub target: Option<CropRegion>,
    /// `ddpm`, `ddim` (evenly spaced, `ddim_calls` evaluations) or an explicit `ddim:<list>`.
    pub trajectory: String,
    pub ddim_calls: usize,
    pub copy: bool,
    pub seed: u64,
    pub count: usize,
}

/// Everything one invocation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataSource,
    pub output_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub inputs: Option<PathBuf>,
    pub generated: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub sample: SampleOptions,
    pub eval_cutoff: f64,
    pub eval_scale: PsnrScale,
    pub bench_multiples: Vec<f64>,
    pub bench_repeats: usize,
}

fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

fn parse_scale(s: &str) -> Result<PsnrScale, String> {
    match s {
        "8bit" => Ok(PsnrScale::EightBit),
        "unit" => Ok(PsnrScale::Unit(UNIT_RANGE_MAX)),
        other => Err(format!("expected 8bit or unit, got {other:?}")),
    }
}

fn scale_name(s: PsnrScale) -> &'static str {
    match s {
        PsnrScale::EightBit => "8bit",
        PsnrScale::Unit(_) => "unit",
    }
}

impl RunConfig {
    pub fn from_kv(mut kv: KvMap) -> Result<Self, ConfigError> {
        let train = TrainConfig::read_kv(&mut kv)?;
        let source: String = kv.take_or("data.source", "synthetic".to_string())?;
        let count = kv.take_or("data.count", 512usize)?;
        let seed = kv.take_or("data.seed", 0u64)?;
        let noise_amplitude = kv.take_or("data.noise_amplitude", SynthSpec::default().noise_amplitude)?;
        let folder: Option<PathBuf> = kv.take_with("data.folder", None, |s| Ok(Some(PathBuf::from(s))))?;
        let data = match (source.as_str(), folder) {
            ("synthetic", None) => DataSource::Synthetic { count, seed, noise_amplitude },
            ("folder", Some(dir)) => DataSource::Folder(dir),
            ("folder", None) => return Err(ConfigError::Missing("data.folder".into())),
            ("synthetic", Some(_)) => {
                return Err(ConfigError::InvalidValue {
                    key: "data.folder".into(),
                    value: "set".into(),
                    reason: "only valid with data.source = folder".into(),
                })
            }
            (other, _) => {
                return Err(ConfigError::InvalidValue { key: "data.source".into(), value: other.into(), reason: "expected synthetic or folder".into() })
            }
        };
        let path = |s: &str| Ok(Some(PathBuf::from(s)));
        let opt_region = |s: &str| s.parse::<CropRegion>().map(Some).map_err(|e| e.to_string());
        let cfg = Self {
            train,
            data,
            output_dir: kv.take_with("paths.output_dir", default_output_dir(), |s| Ok(PathBuf::from(s)))?,
            checkpoint: kv.take_with("paths.checkpoint", None, path)?,
            inputs: kv.take_with("paths.inputs", None, path)?,
            generated: kv.take_with("paths.generated", None, path)?,
            checkpoint_every: kv.take_or("train.checkpoint_every", 0)?,
            log_every: kv.take_or("train.log_every", 100)?,
            sample: SampleOptions {
                multiple: kv.take_or("sample.multiple", 2.25)?,
                output_side: kv.take_or("sample.output_side_px", 192)?,
                anchor: kv.take_with("sample.anchor", None, opt_region)?,
                target: kv.take_with("sample.target", None, opt_region)?,
                trajectory: kv.take_or("sample.trajectory", "ddim".to_string())?,
                ddim_calls: kv.take_or("sample.ddim_calls", 20)?,
                copy: kv.take_or("sample.copy", false)?,
                seed: kv.take_or("sample.seed", 0)?,
                count: kv.take_or("sample.count", 1)?,
            },
            eval_cutoff: kv.take_or("eval.cutoff", DEFAULT_CUTOFF)?,
            eval_scale: kv.take_with("eval.scale", PsnrScale::EightBit, parse_scale)?,
            bench_multiples: kv.take_with("bench.multiples", vec![2.25, 5.0, 11.7], parse_list)?,
            bench_repeats: kv.take_or("bench.repeats", 5)?,
        };
        kv.finish()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        self.train.write_kv(&mut kv);
        match &self.data {
            DataSource::Synthetic { count, seed, noise_amplitude } => {
                kv.set("data.source", "synthetic");
                kv.set("data.count", count);
                kv.set("data.seed", seed);
                kv.set("data.noise_amplitude", noise_amplitude);
            }
            DataSource::Folder(dir) => {
                kv.set("data.source", "folder");
                kv.set("data.folder", dir.display());
            }
        }
        kv.set("paths.output_dir", self.output_dir.display());
        for (k, v) in [("paths.checkpoint", &self.checkpoint), ("paths.inputs", &self.inputs), ("paths.generated", &self.generated)] {
            if let Some(p) = v {
                kv.set(k, p.display());
            }
        }
        kv.set("train.checkpoint_every", self.checkpoint_every);
        kv.set("train.log_every", self.log_every);
        let s = &self.sample;
        kv.set("sample.multiple", s.multiple);
        kv.set("sample.output_side_px", s.output_side);
        if let Some(a) = s.anchor {
            kv.set("sample.anchor", a);
        }
        if let Some(t) = s.target {
            kv.set("sample.target", t);
        }
        kv.set("sample.trajectory", &s.trajectory);
        kv.set("sample.ddim_calls", s.ddim_calls);
        kv.set("sample.copy", s.copy);
        kv.set("sample.seed", s.seed);
        kv.set("sample.count", s.count);
        kv.set("eval.cutoff", self.eval_cutoff);
        kv.set("eval.scale", scale_name(self.eval_scale));
        kv.set("bench.multiples", format_list(&self.bench_multiples));
        kv.set("bench.repeats", self.bench_repeats);
        kv
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        let s = &self.sample;
        if s.anchor.is_some() != s.target.is_some() {
            return Err(CliError::Usage("--anchor and --target must be given together".into()));
        }
        if s.count == 0 || self.bench_repeats == 0 || self.bench_multiples.is_empty() {
            return Err(CliError::Usage("counts and repeats must be positive".into()));
        }
        if !(self.eval_cutoff > 0.0) {
            return Err(CliError::Usage("eval.cutoff must be positive".into()));
        }
        mode_to_regions(&self.mode())?;
        self.trajectory_for(self.train.model.timesteps)?;
        Ok(())
    }

    pub fn mode(&self) -> OutpaintMode {
        match (self.sample.anchor, self.sample.target) {
            (Some(anchor), Some(target)) => OutpaintMode::Explicit { anchor, target },
            _ => OutpaintMode::Multiple { multiple: self.sample.multiple, output_side: self.sample.output_side },
        }
    }

    fn trajectory_for(&self, steps: usize) -> Result<Trajectory, CliError> {
        let t = match self.sample.trajectory.as_str() {
            "ddim" => {
                if self.sample.ddim_calls == 0 {
                    return Err(CliError::Usage("sample.ddim_calls must be positive".into()));
                }
                let n = self.sample.ddim_calls.min(steps);
                let mut list: Vec<usize> = (0..=n).map(|i| ((steps * (n - i)) as f64 / n as f64).round() as usize).collect();
                list.dedup();
                Trajectory::Ddim(list)
            }
            other => other.parse::<Trajectory>().map_err(|e| CliError::Usage(format!("sample.trajectory: {e}")))?,
        };
        t.validate(steps)?;
        Ok(t)
    }
}

#[derive(Debug, Parser)]
#[command(name = "outpaint", version, about = "Position-conditioned diffusion outpainting", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.iterations=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (defaults to $OUTPAINT_OUTPUT_DIR or ./outpaint-out).
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a denoiser and write checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Folder of training images; synthetic data is used otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Outpaint one image or every image in a folder.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Image file or folder.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output area over input area.
        #[arg(long)]
        multiple: Option<f64>,
        #[arg(long)]
        output_side: Option<u32>,
        /// Anchor region `top,left,height,width` (with --target).
        #[arg(long)]
        anchor: Option<String>,
        /// Target region `top,left,height,width` (with --anchor).
        #[arg(long)]
        target: Option<String>,
        /// `ddpm`, `ddim`, or `ddim:<t1,...,0>`.
        #[arg(long)]
        trajectory: Option<String>,
        #[arg(long)]
        ddim_calls: Option<usize>,
        /// Paste the input into its placement after sampling.
        #[arg(long)]
        copy: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Center PSNR over generated images and their inputs.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Folder written by `sample`.
        #[arg(long)]
        generated: Option<PathBuf>,
        /// Folder of the original inputs.
        #[arg(long)]
        inputs: Option<PathBuf>,
        /// `8bit` or `unit`.
        #[arg(long)]
        scale: Option<String>,
        #[arg(long)]
        cutoff: Option<f64>,
    },
    /// Print the relative grid and embedding for a region pair.
    RpeDump {
        #[arg(long)]
        anchor: String,
        #[arg(long)]
        target: String,
        /// Patches per side for both regions.
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long)]
        ka: Option<usize>,
        #[arg(long)]
        kt: Option<usize>,
        /// Embedding width.
        #[arg(long, default_value_t = 16)]
        dim: usize,
    },
    /// Time sampling across multiples at a fixed output size.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Uses freshly initialised weights when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Comma separated multiples.
        #[arg(long)]
        multiples: Option<String>,
        #[arg(long)]
        output_side: Option<u32>,
        #[arg(long)]
        ddim_calls: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
}

fn resolve(common: &Common, flags: KvMap) -> Result<RunConfig, CliError> {
    let mut kv = match &common.config {
        Some(p) => KvMap::parse(&fs::read_to_string(p).map_err(io_err(p))?)?,
        None => KvMap::new(),
    };
    for s in &common.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    kv.overlay(&flags);
    if let Some(dir) = &common.output_dir {
        kv.set("paths.output_dir", dir.display());
    }
    let cfg = RunConfig::from_kv(kv)?;
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_output(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    let path = cfg.output_dir.join("effective.cfg");
    fs::write(&path, cfg.to_kv().render()).map_err(io_err(&path))
}

fn flag<T: ToString>(kv: &mut KvMap, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        kv.set(key, v.to_string());
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut out = std::io::stdout().lock();
    match dispatch(cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    match cmd {
        Command::Train { common, data, iterations, seed, resume } => {
            let mut kv = KvMap::new();
            if let Some(d) = &data {
                kv.set("data.source", "folder");
                kv.set("data.folder", d.display());
            }
            flag(&mut kv, "train.iterations", &iterations);
            flag(&mut kv, "train.seed", &seed);
            let cfg = resolve(&common, kv)?;
            cmd_train(&cfg, resume.as_deref(), out)
        }
        Command::Sample { common, checkpoint, input, multiple, output_side, anchor, target, trajectory, ddim_calls, copy, seed, count } => {
            let mut kv = KvMap::new();
            flag(&mut kv, "paths.checkpoint", &checkpoint.map(|p| p.display().to_string()));
            flag(&mut kv, "paths.inputs", &input.map(|p| p.display().to_string()));
            flag(&mut kv, "sample.multiple", &multiple);
            flag(&mut kv, "sample.output_side_px", &output_side);
            flag(&mut kv, "sample.anchor", &anchor);
            flag(&mut kv, "sample.target", &target);
            flag(&mut kv, "sample.trajectory", &trajectory);
            flag(&mut kv, "sample.ddim_calls", &ddim_calls);
            if copy {
                kv.set("sample.copy", true);
            }
            flag(&mut kv, "sample.seed", &seed);
            flag(&mut kv, "sample.count", &count);
            let cfg = resolve(&common, kv)?;
            cmd_sample(&cfg, out)
        }
        Command::Eval { common, generated, inputs, scale, cutoff } => {
            let mut kv = KvMap::new();
            flag(&mut kv, "paths.generated", &generated.map(|p| p.display().to_string()));
            flag(&mut kv, "paths.inputs", &inputs.map(|p| p.display().to_string()));
            flag(&mut kv, "eval.scale", &scale);
            flag(&mut kv, "eval.cutoff", &cutoff);
            let cfg = resolve(&common, kv)?;
            cmd_eval(&cfg, out)
        }
        Command::RpeDump { anchor, target, k, ka, kt, dim } => {
            let anchor: CropRegion = anchor.parse().map_err(|e: PositionError| CliError::Usage(format!("--anchor: {e}")))?;
            let target: CropRegion = target.parse().map_err(|e: PositionError| CliError::Usage(format!("--target: {e}")))?;
            let text = rpe_dump(&anchor, &target, ka.unwrap_or(k), kt.unwrap_or(k), dim)?;
            out.write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>")))
        }
        Command::Bench { common, checkpoint, input, multiples, output_side, ddim_calls, repeats } => {
            let mut kv = KvMap::new();
            flag(&mut kv, "paths.checkpoint", &checkpoint.map(|p| p.display().to_string()));
            flag(&mut kv, "paths.inputs", &input.map(|p| p.display().to_string()));
            flag(&mut kv, "bench.multiples", &multiples);
            flag(&mut kv, "sample.output_side_px", &output_side);
            flag(&mut kv, "sample.ddim_calls", &ddim_calls);
            flag(&mut kv, "bench.repeats", &repeats);
            let cfg = resolve(&common, kv)?;
            cmd_bench(&cfg, out)
        }
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let m = &cfg.train.model;
    Ok(match &cfg.data {
        DataSource::Synthetic { count, seed, noise_amplitude } => {
            let spec = SynthSpec { noise_amplitude: *noise_amplitude, ..SynthSpec::default() };
            let ds = Dataset::synthetic(spec, *count, *seed, m.image_side.max(16))?;
            if m.channels == 3 {
                ds
            } else {
                let names = (0..ds.len()).map(|i| ds.name(i).unwrap_or_default().to_string()).collect();
                Dataset::from_images(names, ds.images().iter().map(|i| i.with_channels(m.channels)).collect(), ds.resolution())?
            }
        }
        DataSource::Folder(dir) => load_folder(dir, m.image_side, m.channels)?,
    })
}

fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let mut state = match resume {
        Some(p) => {
            let st = load_checkpoint(p)?;
            if st.config().model != cfg.train.model {
                return Err(CheckpointError::ShapeMismatch("resumed checkpoint was trained with different model dimensions".into()).into());
            }
            st
        }
        None => TrainState::new(cfg.train.clone())?,
    };
    let data = load_dataset(cfg)?;
    prepare_output(cfg)?;
    let log_path = cfg.output_dir.join("train.log");
    let mut log = fs::OpenOptions::new().create(true).append(true).open(&log_path).map_err(io_err(&log_path))?;
    let ck_path = cfg.output_dir.join("checkpoint.bin");
    let (every, log_every) = (cfg.checkpoint_every, cfg.log_every);
    let mut io_failure = None;
    state.run(&data, cfg.train.iterations, |st, entry| {
        if let Err(e) = writeln!(log, "{entry}") {
            io_failure = Some(e);
        }
        if log_every > 0 && entry.iteration % log_every == 0 {
            eprintln!("iter {} loss {:.5}", entry.iteration, entry.loss);
        }
        if every > 0 && entry.iteration % every == 0 {
            save_checkpoint(st, &ck_path)?;
        }
        Ok(())
    })?;
    if let Some(e) = io_failure {
        return Err(CliError::Io { path: log_path, source: e });
    }
    save_checkpoint(&state, &ck_path)?;
    writeln!(out, "trained {} iterations, checkpoint {}", state.iteration(), ck_path.display()).map_err(io_err(&ck_path))
}

fn load_model(cfg: &RunConfig) -> Result<(Denoiser, crate::diffusion::NoiseSchedule), CliError> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| CliError::Usage("a checkpoint is required (--checkpoint)".into()))?;
    let state = load_checkpoint(path)?;
    Ok((state.denoiser(), state.schedule().clone()))
}

fn input_files(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let p = cfg.inputs.as_ref().ok_or_else(|| CliError::Usage("an input image or folder is required (--input)".into()))?;
    if p.is_dir() {
        let files = list_images(p)?;
        if files.is_empty() {
            return Err(DataError::EmptyFolder(p.clone()).into());
        }
        Ok(files)
    } else {
        Ok(vec![p.clone()])
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("input").to_string()
}

fn cmd_sample(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let (model, sched) = load_model(cfg)?;
    let files = input_files(cfg)?;
    let traj = cfg.trajectory_for(sched.steps())?;
    prepare_output(cfg)?;
    let sc = SampleConfig { mode: cfg.mode(), trajectory: traj, copy: cfg.sample.copy, seed: cfg.sample.seed, count: cfg.sample.count };
    for file in files {
        let input = read_image(&file).map_err(|e| DataError::DecodeFailure { file: file.clone(), source: e })?;
        let name = stem(&file);
        for item in 0..sc.count as u64 {
            let res = outpaint_item(&model, &sched, &input, &sc, item)?;
            let base = format!("{name}_{item:03}");
            let img_path = cfg.output_dir.join(format!("{base}.png"));
            write_image(&img_path, &res.image)?;
            let side = Sidecar {
                input: name.clone(),
                placement: res.placement,
                scales: res.scales,
                output: (res.image.height(), res.image.width()),
                copy: sc.copy,
                seed: sc.seed,
                item,
                denoise_calls: res.denoise_calls,
                clamped: res.clamped,
            };
            let side_path = cfg.output_dir.join(format!("{base}.txt"));
            fs::write(&side_path, side.to_text()).map_err(io_err(&side_path))?;
            writeln!(out, "{} placement {} calls {} {:.1} ms", img_path.display(), res.placement, res.denoise_calls, res.elapsed_ms)
                .map_err(io_err(&img_path))?;
        }
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let gen_dir = cfg.generated.as_ref().ok_or_else(|| CliError::Usage("--generated is required".into()))?;
    let in_dir = cfg.inputs.as_ref().ok_or_else(|| CliError::Usage("--inputs is required".into()))?;
    let inputs = list_images(in_dir)?;
    let mut rows = Vec::new();
    for gen_path in list_images(gen_dir)? {
        let side_path = gen_path.with_extension("txt");
        let text = fs::read_to_string(&side_path).map_err(io_err(&side_path))?;
        let side = Sidecar::parse(&text)?;
        let input_path = inputs
            .iter()
            .find(|p| stem(p) == side.input)
            .ok_or_else(|| CliError::Usage(format!("no input named {:?} in {}", side.input, in_dir.display())))?;
        let generated = read_image(&gen_path).map_err(|e| DataError::DecodeFailure { file: gen_path.clone(), source: e })?;
        let input = read_image(input_path).map_err(|e| DataError::DecodeFailure { file: input_path.clone(), source: e })?;
        let region = side.placement.inside(generated.height(), generated.width()).ok_or_else(|| {
            CliError::Usage(format!("{}: placement {} is not inside the image", gen_path.display(), side.placement))
        })?;
        rows.push((stem(&gen_path), center_psnr(&generated, &input, &region, cfg.eval_scale)?));
    }
    if rows.is_empty() {
        return Err(DataError::EmptyFolder(gen_dir.clone()).into());
    }
    prepare_output(cfg)?;
    let results: Vec<_> = rows.iter().map(|(_, r)| *r).collect();
    let report = format_report(&rows, aggregate(&results, cfg.eval_cutoff), cfg.eval_scale, cfg.eval_cutoff);
    let path = cfg.output_dir.join("eval_report.txt");
    fs::write(&path, &report).map_err(io_err(&path))?;
    out.write_all(report.as_bytes()).map_err(io_err(&path))
}

fn cmd_bench(cfg: &RunConfig, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let (model, sched) = match &cfg.checkpoint {
        Some(_) => load_model(cfg)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let model = Denoiser::init(cfg.train.model.clone(), &mut rng).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
            let sched = cfg.train.schedule.build(cfg.train.model.timesteps).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
            (model, sched)
        }
    };
    let input = match &cfg.inputs {
        Some(p) => read_image(p).map_err(|e| DataError::DecodeFailure { file: p.clone(), source: e })?,
        None => synth_image(&SynthSpec::default(), 0, 0, model.config().image_side.max(16)),
    };
    let traj = cfg.trajectory_for(sched.steps())?;
    prepare_output(cfg)?;
    let rows = bench_sampling(&model, &sched, &input, &cfg.bench_multiples, cfg.sample.output_side, &traj, cfg.bench_repeats, cfg.sample.seed)?;
    let report = format_bench_report(&rows);
    let path = cfg.output_dir.join("bench.txt");
    fs::write(&path, &report).map_err(io_err(&path))?;
    out.write_all(report.as_bytes()).map_err(io_err(&path))
}

/// Real number in at most nine significant digits, shortest form.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

/// Relative grid plus its sin-cos embedding, as text.
pub fn rpe_dump(anchor: &CropRegion, target: &CropRegion, ka: usize, kt: usize, dim: usize) -> Result<String, CliError> {
    let grid = relative_grid(anchor, target, ka, kt)?;
    let emb = sincos_embed(&grid, dim, DEFAULT_FREQ_BASE)?;
    let join = |v: &mut dyn Iterator<Item = f64>| v.map(fmt_sig9).collect::<Vec<_>>().join(" ");
    let mut s = String::new();
    let _ = writeln!(s, "K_a={ka} K_t={kt} D={dim}");
    let _ = writeln!(s, "rows {}", join(&mut grid.rows.iter().copied()));
    let _ = writeln!(s, "cols {}", join(&mut grid.cols.iter().copied()));
    for row in emb.matrix().rows() {
        let _ = writeln!(s, "{}", join(&mut row.iter().copied()));
    }
    Ok(s)
}

/// Parsed form of [`rpe_dump`] output.
#[derive(Debug, Clone, PartialEq)]
pub struct RpeDump {
    pub anchor_grid: usize,
    pub target_grid: usize,
    pub dim: usize,
    pub rows: Vec<f64>,
    pub cols: Vec<f64>,
    pub embedding: Array2<f64>,
}

pub fn parse_rpe_dump(text: &str) -> Result<RpeDump, CliError> {
    let bad = |m: String| CliError::Dump(m);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty input".into()))?;
    let mut vals = [None; 3];
    for (i, (part, key)) in header.split(' ').zip(["K_a=", "K_t=", "D="]).enumerate() {
        let v = part.strip_prefix(key).ok_or_else(|| bad(format!("expected {key} in header")))?;
        vals[i] = Some(v.parse::<usize>().map_err(|e| bad(format!("{key}{v}: {e}")))?);
    }
    let [Some(ka), Some(kt), Some(dim)] = vals else {
        return Err(bad("incomplete header".into()));
    };
    if ka == 0 || kt == 0 || dim == 0 || kt > 4096 || dim > 1 << 16 {
        return Err(bad("grid sizes out of range".into()));
    }
    let numbers = |line: &str, n: usize| -> Result<Vec<f64>, CliError> {
        let v: Vec<f64> = line.split(' ').map(|p| p.parse::<f64>().map_err(|e| bad(format!("{p:?}: {e}")))).collect::<Result<_, _>>()?;
        if v.len() != n {
            return Err(bad(format!("expected {n} values, got {}", v.len())));
        }
        Ok(v)
    };
    let axis = |line: Option<&str>, key: &str| -> Result<Vec<f64>, CliError> {
        let line = line.ok_or_else(|| bad(format!("missing {key} line")))?;
        let rest = line.strip_prefix(key).and_then(|r| r.strip_prefix(' ')).ok_or_else(|| bad(format!("expected {key} line")))?;
        numbers(rest, kt)
    };
    let rows = axis(lines.next(), "rows")?;
    let cols = axis(lines.next(), "cols")?;
    let len = kt * kt;
    let mut embedding = Array2::zeros((len, dim));
    for i in 0..len {
        let line = lines.next().ok_or_else(|| bad(format!("missing embedding row {i}")))?;
        for (j, v) in numbers(line, dim)?.into_iter().enumerate() {
            embedding[[i, j]] = v;
        }
    }
    if lines.next().is_some() {
        return Err(bad("trailing lines".into()));
    }
    Ok(RpeDump { anchor_grid: ka, target_grid: kt, dim, rows, cols, embedding })
}
