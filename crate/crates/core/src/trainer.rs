//! Training loop: crop pairs, relative positions, noising, MSE, AdamW, and
//! the binary checkpoint format.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{self, format_list, format_range, parse_list, parse_range, ConfigError, KvMap, ScheduleConfig};
use crate::data::Dataset;
use crate::diffusion::{standard_normal, NoiseSchedule};
use crate::image::{resized_crop, Image};
use crate::model::{loss_and_grad, Conditioning, Denoiser, ModelConfig, ModelError, Network, TrainSample};
use crate::position::{relative_grid, sample_crop_pair, CropRegion, PositionError, Range, DEFAULT_ASPECT};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("iteration {iteration}, batch item {batch_index}: {source}")]
    Step { iteration: u64, batch_index: usize, source: ModelError },
    #[error("iteration {iteration}, batch item {batch_index}: cannot build views: {reason}")]
    Input { iteration: u64, batch_index: usize, reason: String },
    #[error("iteration {iteration}: loss is not finite")]
    NonFiniteLoss { iteration: u64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("checkpoint version mismatch: expected {expected}, found {}", found.map(|v| v.to_string()).unwrap_or_else(|| "unrecognised header".into()))]
    VersionMismatch { expected: u32, found: Option<u32> },
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
}

/// How training crop pairs are drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum CropMode {
    /// Independent random crops for anchor and target.
    Continuous,
    /// Target is the whole image, anchor its centered region at one of these
    /// area multiples.
    Discrete(Vec<f64>),
}

impl fmt::Display for CropMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CropMode::Continuous => f.write_str("continuous"),
            CropMode::Discrete(m) => write!(f, "discrete:{}", format_list(m)),
        }
    }
}

impl FromStr for CropMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "continuous" {
            return Ok(Self::Continuous);
        }
        match s.strip_prefix("discrete:") {
            Some(list) => Ok(Self::Discrete(parse_list(list)?)),
            None => Err(format!("expected continuous or discrete:<multiples>, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub anchor_scale: Range,
    pub target_scale: Range,
    pub aspect: Range,
    pub crop_mode: CropMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            schedule: ScheduleConfig::scaled_for(model.timesteps),
            model,
            iterations: 5000,
            batch_size: 8,
            learning_rate: 2e-4,
            weight_decay: 0.03,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            anchor_scale: Range::new(0.15, 0.5),
            target_scale: Range::new(0.8, 1.0),
            aspect: DEFAULT_ASPECT,
            crop_mode: CropMode::Continuous,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        self.model.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        self.schedule.build(self.model.timesteps).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.learning_rate * self.weight_decay < 1.0) {
            return bad(format!("weight decay {} out of range", self.weight_decay));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        for r in [self.anchor_scale, self.target_scale] {
            r.check_scale().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        }
        self.aspect.check_aspect().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        if let CropMode::Discrete(m) = &self.crop_mode {
            if m.is_empty() || m.iter().any(|&x| !(x >= 1.0 && x.is_finite())) {
                return bad(format!("discrete multiples {m:?} must be a non-empty list of reals >= 1"));
            }
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        config::write_model(&self.model, kv);
        config::write_schedule(&self.schedule, kv);
        kv.set("train.iterations", self.iterations);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.learning_rate", self.learning_rate);
        kv.set("train.weight_decay", self.weight_decay);
        kv.set("train.adam_beta1", self.adam_beta1);
        kv.set("train.adam_beta2", self.adam_beta2);
        kv.set("train.adam_eps", self.adam_eps);
        kv.set("train.anchor_scale", format_range(self.anchor_scale));
        kv.set("train.target_scale", format_range(self.target_scale));
        kv.set("train.aspect", format_range(self.aspect));
        kv.set("train.crop_mode", &self.crop_mode);
        kv.set("train.seed", self.seed);
    }

    /// Consumes the model, diffusion and train keys of `kv`, defaulting
    /// anything absent.
    pub fn read_kv(kv: &mut KvMap) -> Result<Self, ConfigError> {
        let d = TrainConfig::default();
        let model = config::read_model(kv)?;
        let schedule = config::read_schedule(kv, model.timesteps)?;
        Ok(Self {
            model,
            schedule,
            iterations: kv.take_or("train.iterations", d.iterations)?,
            batch_size: kv.take_or("train.batch_size", d.batch_size)?,
            learning_rate: kv.take_or("train.learning_rate", d.learning_rate)?,
            weight_decay: kv.take_or("train.weight_decay", d.weight_decay)?,
            adam_beta1: kv.take_or("train.adam_beta1", d.adam_beta1)?,
            adam_beta2: kv.take_or("train.adam_beta2", d.adam_beta2)?,
            adam_eps: kv.take_or("train.adam_eps", d.adam_eps)?,
            anchor_scale: kv.take_with("train.anchor_scale", d.anchor_scale, parse_range)?,
            target_scale: kv.take_with("train.target_scale", d.target_scale, parse_range)?,
            aspect: kv.take_with("train.aspect", d.aspect, parse_range)?,
            crop_mode: kv.take_or("train.crop_mode", d.crop_mode)?,
            seed: kv.take_or("train.seed", d.seed)?,
        })
    }

    pub fn to_text(&self) -> String {
        let mut kv = KvMap::new();
        self.write_kv(&mut kv);
        kv.render()
    }
}

/// Adam with decoupled weight decay. Moments are kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl AdamW {
    pub fn new(len: usize, lr: f64, weight_decay: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, weight_decay, beta1, beta2, eps, m: vec![0.0; len], v: vec![0.0; len], steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powf(self.steps as f64);
        let c2 = 1.0 - self.beta2.powf(self.steps as f64);
        let decay = 1.0 - self.lr * self.weight_decay;
        for i in 0..params.len() {
            let g = grad[i] as f64;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            params[i] = (params[i] as f64 * decay - self.lr * update) as f32;
        }
    }
}

/// Anchor centered in a `height x width` frame with `1/multiple` of its area.
pub fn centered_pair(height: u32, width: u32, multiple: f64) -> Result<(CropRegion, CropRegion), PositionError> {
    if !(multiple >= 1.0 && multiple.is_finite()) {
        return Err(PositionError::InvalidMultiple(multiple));
    }
    let side = |n: u32| ((n as f64 / multiple.sqrt() + 0.5).floor() as u32).clamp(1, n);
    let (h, w) = (side(height), side(width));
    let anchor = CropRegion::new((height - h) / 2, (width - w) / 2, h, w)?;
    Ok((anchor, CropRegion::full(height, width)?))
}

/// One training log line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub iteration: u64,
    pub loss: f64,
    pub wallclock_ms: u128,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:.6e} {}", self.iteration, self.loss, self.wallclock_ms)
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone)]
pub struct TrainState {
    cfg: TrainConfig,
    net: Network,
    sched: NoiseSchedule,
    params: Vec<f32>,
    opt: AdamW,
    iteration: u64,
    rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh parameters drawn from the seeded stream.
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = Network::new(cfg.model.clone()).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        let params = net.init_params(&mut rng);
        Self::assemble(cfg, params, None, 0, rng)
    }

    fn assemble(
        cfg: TrainConfig,
        params: Vec<f32>,
        opt: Option<AdamW>,
        iteration: u64,
        rng: ChaCha8Rng,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let net = Network::new(cfg.model.clone()).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        let sched = cfg.schedule.build(cfg.model.timesteps).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        let opt = opt.unwrap_or_else(|| {
            AdamW::new(params.len(), cfg.learning_rate, cfg.weight_decay, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        });
        Ok(Self { cfg, net, sched, params, opt, iteration, rng })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn denoiser(&self) -> Denoiser {
        Denoiser::from_params(self.cfg.model.clone(), self.params.clone()).expect("layout matches")
    }

    fn crop_pair(&mut self, img: &Image) -> Result<(CropRegion, CropRegion), PositionError> {
        let (h, w) = (img.height() as u32, img.width() as u32);
        match &self.cfg.crop_mode {
            CropMode::Continuous => {
                let pair = sample_crop_pair(h, w, self.cfg.anchor_scale, self.cfg.target_scale, self.cfg.aspect, &mut self.rng)?;
                Ok((pair.anchor, pair.target))
            }
            CropMode::Discrete(list) => {
                let m = list[self.rng.gen_range(0..list.len())];
                centered_pair(h, w, m)
            }
        }
    }

    /// Draws crops, timestep and noise for one image.
    pub fn make_sample(&mut self, img: &Image) -> Result<TrainSample, String> {
        let m = self.cfg.model.clone();
        if img.channels() != m.channels {
            return Err(format!("image has {} channels, model expects {}", img.channels(), m.channels));
        }
        let codec = m.codec();
        let (anchor, target) = self.crop_pair(img).map_err(|e| e.to_string())?;
        let side = m.image_side;
        let va = resized_crop(img, &anchor, side).map_err(|e| e.to_string())?;
        let vt = resized_crop(img, &target, side).map_err(|e| e.to_string())?;
        let z_a = codec.encode(&va).map_err(|e| e.to_string())?;
        let z0 = codec.encode(&vt).map_err(|e| e.to_string())?;
        let k = m.grid();
        let grid = relative_grid(&anchor, &target, k, k).map_err(|e| e.to_string())?;
        let t = self.rng.gen_range(1..=m.timesteps);
        let eps = standard_normal(m.tokens(), m.token_width(), &mut self.rng);
        Ok(TrainSample { z_a, z0, cond: Conditioning::Grid(grid), t, eps })
    }

    /// One optimiser update on `batch`; returns the batch mean loss.
    pub fn train_step(&mut self, batch: &[&Image]) -> Result<f64, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let iteration = self.iteration + 1;
        let mut samples = Vec::with_capacity(batch.len());
        for (i, img) in batch.iter().enumerate() {
            let s = self.make_sample(img).map_err(|reason| TrainError::Input { iteration, batch_index: i, reason })?;
            samples.push(s);
        }
        self.step_on_samples(&samples)
    }

    /// Update on prepared samples. Gradients are averaged item by item so a
    /// failure can name its batch index.
    pub fn step_on_samples(&mut self, samples: &[TrainSample]) -> Result<f64, TrainError> {
        if samples.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let iteration = self.iteration + 1;
        let scale = 1.0 / samples.len() as f32;
        let mut grad = vec![0.0f32; self.params.len()];
        let mut loss = 0.0;
        for (i, s) in samples.iter().enumerate() {
            let (l, g) = loss_and_grad(&self.net, &self.params, std::slice::from_ref(s), &self.sched)
                .map_err(|source| TrainError::Step { iteration, batch_index: i, source })?;
            loss += l / samples.len() as f64;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b * scale);
        }
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration });
        }
        self.opt.step(&mut self.params, &grad);
        self.iteration = iteration;
        Ok(loss)
    }

    /// Runs until `until` iterations are done, drawing batches uniformly
    /// with replacement. `on_step` sees every log entry.
    pub fn run<F>(&mut self, data: &Dataset, until: u64, mut on_step: F) -> Result<(), TrainError>
    where
        F: FnMut(&TrainState, &LogEntry) -> Result<(), TrainError>,
    {
        if data.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let start = Instant::now();
        while self.iteration < until {
            let idx: Vec<usize> = (0..self.cfg.batch_size).map(|_| self.rng.gen_range(0..data.len())).collect();
            let batch: Vec<&Image> = idx.iter().map(|&i| data.get(i).expect("index in range")).collect();
            let loss = self.train_step(&batch)?;
            let entry = LogEntry { iteration: self.iteration, loss, wallclock_ms: start.elapsed().as_millis() };
            on_step(self, &entry)?;
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OUTPNTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialises a training state.
///
/// Layout, little-endian: magic, version `u32`, config length `u32`, config
/// text, iteration `u64`, optimiser step count `u64`, rng seed `[u8; 32]`,
/// stream `u64`, word position `u128`, parameter count `u64`, parameters as
/// `f32`, first then second moments as `f64`, CRC-32 of everything before it.
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let cfg = state.cfg.to_text();
    let n = state.params.len();
    let mut out = Vec::with_capacity(64 + cfg.len() + n * 20);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&state.iteration.to_le_bytes());
    out.extend_from_slice(&state.opt.steps.to_le_bytes());
    out.extend_from_slice(&state.rng.get_seed());
    out.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for p in &state.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    for m in state.opt.m.iter().chain(&state.opt.v) {
        out.extend_from_slice(&m.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(8).map_err(|_| CheckpointError::VersionMismatch { expected: CHECKPOINT_VERSION, found: None })?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::VersionMismatch { expected: CHECKPOINT_VERSION, found: None });
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch { expected: CHECKPOINT_VERSION, found: Some(version) });
    }
    if bytes.len() < 4 {
        return Err(CheckpointError::Corrupt("truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    if crc32fast::hash(body) != stored {
        return Err(CheckpointError::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: r.pos };
    let cfg_len = u32::from_le_bytes(r.array()?) as usize;
    let text = std::str::from_utf8(r.take(cfg_len)?).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut kv = KvMap::parse(text)?;
    let cfg = TrainConfig::read_kv(&mut kv)?;
    kv.finish()?;
    let iteration = u64::from_le_bytes(r.array()?);
    let steps = u64::from_le_bytes(r.array()?);
    let seed: [u8; 32] = r.array()?;
    let stream = u64::from_le_bytes(r.array()?);
    let word_pos = u128::from_le_bytes(r.array()?);
    let n = u64::from_le_bytes(r.array()?);
    let expected = cfg.model.param_count();
    if n != expected as u64 {
        return Err(CheckpointError::ShapeMismatch(format!("{n} parameters stored, config needs {expected}")));
    }
    let n = n as usize;
    let params: Vec<f32> = r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let mut moment = || -> Result<Vec<f64>, CheckpointError> {
        Ok(r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let m = moment()?;
    let v = moment()?;
    if r.pos != body.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let opt = AdamW { m, v, steps, ..AdamW::new(0, cfg.learning_rate, cfg.weight_decay, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) };
    TrainState::assemble(cfg, params, Some(opt), iteration, rng).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(state))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads and insists on the given model dimensions.
pub fn load_checkpoint_for(path: &Path, model: &ModelConfig) -> Result<TrainState, CheckpointError> {
    let state = load_checkpoint(path)?;
    if &state.cfg.model != model {
        return Err(CheckpointError::ShapeMismatch(format!(
            "checkpoint model {:?} differs from requested {:?}",
            state.cfg.model, model
        )));
    }
    Ok(state)
}
