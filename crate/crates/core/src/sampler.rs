//! Outpainting from a trained denoiser: one conditioning pass per output,
//! DDPM or DDIM trajectories, optional paste of the input.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{CodecError, PatchSequence};
use crate::config::{ConfigError, KvMap};
use crate::diffusion::{ddim_step, ddpm_step, ddpm_step_from_x0, standard_normal, x0_to_eps, DiffusionError, NoiseSchedule};
use crate::image::{resize_bilinear, Image, ImageError};
use crate::model::{Conditioning, Denoiser, ModelConfig, ModelError, PredictionTarget};
use crate::position::{mode_to_regions, relative_grid, CropRegion, OutpaintMode, PositionError};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("model parameters are not initialised")]
    UntrainedModel,
    #[error("invalid sampling config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Position(#[from] PositionError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Anything that maps `(z_t, z_a, E, t)` to a prediction.
pub trait DenoiseModel {
    fn config(&self) -> &ModelConfig;

    fn is_initialized(&self) -> bool {
        true
    }

    fn denoise(&self, z_t: &PatchSequence, z_a: &PatchSequence, cond: &Conditioning, t: usize) -> Result<PatchSequence, ModelError>;
}

impl DenoiseModel for Denoiser {
    fn config(&self) -> &ModelConfig {
        Denoiser::config(self)
    }

    fn is_initialized(&self) -> bool {
        Denoiser::is_initialized(self)
    }

    fn denoise(&self, z_t: &PatchSequence, z_a: &PatchSequence, cond: &Conditioning, t: usize) -> Result<PatchSequence, ModelError> {
        Denoiser::denoise(self, z_t, z_a, cond, t)
    }
}

/// Which timesteps the reverse chain visits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trajectory {
    /// Every timestep `T, T-1, ..., 1` with ancestral noise.
    Ddpm,
    /// Deterministic jumps along a strictly decreasing list ending at 0.
    Ddim(Vec<usize>),
}

impl Trajectory {
    /// DDIM over `calls` evenly spaced timesteps.
    pub fn ddim_uniform(calls: usize, sched: &NoiseSchedule) -> Self {
        Trajectory::Ddim(sched.strided(calls))
    }

    pub fn validate(&self, steps: usize) -> Result<(), SampleError> {
        if let Trajectory::Ddim(list) = self {
            if list.len() < 2 || list[0] > steps || *list.last().unwrap() != 0 {
                return Err(SampleError::InvalidConfig(format!("ddim steps {list:?} must start at most at {steps} and end at 0")));
            }
            if list.windows(2).any(|w| w[1] >= w[0]) {
                return Err(SampleError::InvalidConfig(format!("ddim steps {list:?} must strictly decrease")));
            }
        }
        Ok(())
    }

    /// Number of network evaluations this trajectory makes.
    pub fn calls(&self, steps: usize) -> usize {
        match self {
            Trajectory::Ddpm => steps,
            Trajectory::Ddim(list) => list.len() - 1,
        }
    }
}

impl fmt::Display for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trajectory::Ddpm => f.write_str("ddpm"),
            Trajectory::Ddim(l) => {
                let s: Vec<String> = l.iter().map(|t| t.to_string()).collect();
                write!(f, "ddim:{}", s.join(","))
            }
        }
    }
}

impl FromStr for Trajectory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "ddpm" {
            return Ok(Self::Ddpm);
        }
        let list = s.strip_prefix("ddim:").ok_or_else(|| format!("expected ddpm or ddim:<steps>, got {s:?}"))?;
        list.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>().map(Self::Ddim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub mode: OutpaintMode,
    pub trajectory: Trajectory,
    pub copy: bool,
    pub seed: u64,
    /// Samples drawn per input.
    pub count: usize,
}

/// Where the anchor lands in the output frame. May reach outside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Placement {
    pub top: i64,
    pub left: i64,
    pub height: u32,
    pub width: u32,
}

impl Placement {
    /// `anchor` expressed relative to `target`'s top-left corner.
    pub fn between(anchor: &CropRegion, target: &CropRegion) -> Self {
        Self {
            top: anchor.top() as i64 - target.top() as i64,
            left: anchor.left() as i64 - target.left() as i64,
            height: anchor.height(),
            width: anchor.width(),
        }
    }

    /// Overlap with a `height x width` frame as `(y0, x0, y1, x1)`, half open.
    pub fn clip(&self, height: usize, width: usize) -> Option<(usize, usize, usize, usize)> {
        let y0 = self.top.max(0);
        let x0 = self.left.max(0);
        let y1 = (self.top + self.height as i64).min(height as i64);
        let x1 = (self.left + self.width as i64).min(width as i64);
        (y0 < y1 && x0 < x1).then_some((y0 as usize, x0 as usize, y1 as usize, x1 as usize))
    }

    /// The placement as a region when it lies wholly inside the frame.
    pub fn inside(&self, height: usize, width: usize) -> Option<CropRegion> {
        let (y0, x0, y1, x1) = self.clip(height, width)?;
        let whole = y1 - y0 == self.height as usize && x1 - x0 == self.width as usize;
        whole.then(|| CropRegion::new(y0 as u32, x0 as u32, self.height, self.width).ok()).flatten()
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.top, self.left, self.height, self.width)
    }
}

impl FromStr for Placement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let p: Vec<&str> = s.split(',').map(str::trim).collect();
        if p.len() != 4 {
            return Err(format!("expected top,left,height,width, got {s:?}"));
        }
        let e = |x: &str| format!("bad number {x:?}");
        Ok(Self {
            top: p[0].parse().map_err(|_| e(p[0]))?,
            left: p[1].parse().map_err(|_| e(p[1]))?,
            height: p[2].parse().map_err(|_| e(p[2]))?,
            width: p[3].parse().map_err(|_| e(p[3]))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutpaintResult {
    /// `H x W x channels`, clamped to [-1, 1].
    pub image: Image,
    pub placement: Placement,
    /// Placement size over input size, per axis.
    pub scales: (f64, f64),
    pub elapsed_ms: f64,
    pub denoise_calls: usize,
    /// Values that needed clamping.
    pub clamped: usize,
}

/// Generates the target region around `input`.
///
/// The input is the anchor view; it is resized to the model resolution and
/// encoded once. The reverse chain runs at model resolution and the decoded
/// result is resized to the target region's size.
pub fn outpaint<M: DenoiseModel, R: Rng + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    input: &Image,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<OutpaintResult, SampleError> {
    let start = Instant::now();
    if !model.is_initialized() {
        return Err(SampleError::UntrainedModel);
    }
    let m = model.config();
    if sched.steps() != m.timesteps {
        return Err(SampleError::InvalidConfig(format!(
            "schedule has {} steps, model was built for {}",
            sched.steps(),
            m.timesteps
        )));
    }
    cfg.trajectory.validate(m.timesteps)?;
    let (anchor, target) = mode_to_regions(&cfg.mode)?;
    let k = m.grid();
    let cond = Conditioning::Grid(relative_grid(&anchor, &target, k, k)?);
    let codec = m.codec();
    let side = m.image_side;
    let z_a = codec.encode(&resize_bilinear(&input.with_channels(m.channels), side, side)?)?;

    let mut z = standard_normal(m.tokens(), m.token_width(), rng);
    let mut calls = 0;
    match &cfg.trajectory {
        Trajectory::Ddpm => {
            for t in (1..=m.timesteps).rev() {
                let out = model.denoise(&z, &z_a, &cond, t)?;
                calls += 1;
                z = match m.prediction {
                    PredictionTarget::Noise => ddpm_step(&z, &out, t, sched, rng)?,
                    PredictionTarget::X0 => ddpm_step_from_x0(&z, &out, t, sched, rng)?,
                };
            }
        }
        Trajectory::Ddim(list) => {
            for w in list.windows(2) {
                let out = model.denoise(&z, &z_a, &cond, w[0])?;
                calls += 1;
                let eps = match m.prediction {
                    PredictionTarget::Noise => out,
                    PredictionTarget::X0 => x0_to_eps(&z, &out, w[0], sched)?,
                };
                z = ddim_step(&z, &eps, w[0], w[1], sched)?;
            }
        }
    }

    let decoded = codec.decode(&z)?;
    let mut image = resize_bilinear(&decoded, target.height() as usize, target.width() as usize)?;
    let clamped = image.clamp_unit();
    let placement = Placement::between(&anchor, &target);
    let scales = (
        placement.height as f64 / input.height() as f64,
        placement.width as f64 / input.width() as f64,
    );
    if cfg.copy {
        image = copy_paste(&image, input, &placement)?;
    }
    Ok(OutpaintResult {
        image,
        placement,
        scales,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        denoise_calls: calls,
        clamped,
    })
}

/// Sample `item` of a batch, with its own random stream.
pub fn outpaint_item<M: DenoiseModel>(
    model: &M,
    sched: &NoiseSchedule,
    input: &Image,
    cfg: &SampleConfig,
    item: u64,
) -> Result<OutpaintResult, SampleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(item);
    outpaint(model, sched, input, cfg, &mut rng)
}

/// Pastes `input`, resized to the placement size, over `generated`.
pub fn copy_paste(generated: &Image, input: &Image, placement: &Placement) -> Result<Image, ImageError> {
    let mut out = generated.clone();
    let Some((y0, x0, y1, x1)) = placement.clip(generated.height(), generated.width()) else {
        return Ok(out);
    };
    let src = resize_bilinear(&input.with_channels(generated.channels()), placement.height as usize, placement.width as usize)?;
    for y in y0..y1 {
        let sy = (y as i64 - placement.top) as usize;
        for x in x0..x1 {
            let sx = (x as i64 - placement.left) as usize;
            for c in 0..generated.channels() {
                out.set(y, x, c, src.get(sy, sx, c));
            }
        }
    }
    Ok(out)
}

/// Timing of one multiple.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub multiple: f64,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub denoise_calls: usize,
}

impl fmt::Display for BenchRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:.3} {:.3} {:.3} {}", self.multiple, self.median_ms, self.p10_ms, self.p90_ms, self.denoise_calls)
    }
}

/// Nearest-rank percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

/// Times `repeats` outpaintings per multiple at a fixed output side.
/// Repeats are interleaved across multiples so drift hits all of them alike.
#[allow(clippy::too_many_arguments)]
pub fn bench_sampling<M: DenoiseModel>(
    model: &M,
    sched: &NoiseSchedule,
    input: &Image,
    multiples: &[f64],
    output_side: u32,
    trajectory: &Trajectory,
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRow>, SampleError> {
    if repeats == 0 || multiples.is_empty() {
        return Err(SampleError::InvalidConfig("bench needs at least one multiple and one repeat".into()));
    }
    let mut times = vec![Vec::with_capacity(repeats); multiples.len()];
    let mut calls = vec![0; multiples.len()];
    for r in 0..repeats {
        for (i, &multiple) in multiples.iter().enumerate() {
            let cfg = SampleConfig {
                mode: OutpaintMode::Multiple { multiple, output_side },
                trajectory: trajectory.clone(),
                copy: false,
                seed,
                count: 1,
            };
            let res = outpaint_item(model, sched, input, &cfg, r as u64)?;
            times[i].push(res.elapsed_ms);
            calls[i] = res.denoise_calls;
        }
    }
    Ok(multiples
        .iter()
        .zip(times)
        .zip(calls)
        .map(|((&multiple, mut t), denoise_calls)| {
            t.sort_by(f64::total_cmp);
            BenchRow { multiple, median_ms: median(&t), p10_ms: percentile(&t, 0.1), p90_ms: percentile(&t, 0.9), denoise_calls }
        })
        .collect())
}

pub fn format_bench_report(rows: &[BenchRow]) -> String {
    let mut out = String::from("# multiple median_ms p10_ms p90_ms denoise_calls\n");
    for r in rows {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}

/// Per-image metadata written next to each generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sidecar {
    /// File stem of the input image.
    pub input: String,
    pub placement: Placement,
    pub scales: (f64, f64),
    pub output: (usize, usize),
    pub copy: bool,
    pub seed: u64,
    pub item: u64,
    pub denoise_calls: usize,
    pub clamped: usize,
}

impl Sidecar {
    pub fn to_text(&self) -> String {
        let mut kv = KvMap::new();
        kv.set("input", &self.input);
        kv.set("placement", self.placement);
        kv.set("scales", format!("{},{}", self.scales.0, self.scales.1));
        kv.set("output", format!("{},{}", self.output.0, self.output.1));
        kv.set("copy", self.copy);
        kv.set("seed", self.seed);
        kv.set("item", self.item);
        kv.set("denoise_calls", self.denoise_calls);
        kv.set("clamped", self.clamped);
        kv.render()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut kv = KvMap::parse(text)?;
        let pair = |s: &str| -> Result<(String, String), String> {
            let (a, b) = s.split_once(',').ok_or("expected a,b")?;
            Ok((a.trim().to_string(), b.trim().to_string()))
        };
        let scales = kv.take_with("scales", (0.0, 0.0), |s| {
            let (a, b) = pair(s)?;
            Ok((a.parse::<f64>().map_err(|e| e.to_string())?, b.parse::<f64>().map_err(|e| e.to_string())?))
        })?;
        let output = kv.take_with("output", (0, 0), |s| {
            let (a, b) = pair(s)?;
            Ok((a.parse::<usize>().map_err(|e| e.to_string())?, b.parse::<usize>().map_err(|e| e.to_string())?))
        })?;
        let sc = Self {
            input: kv.take("input")?,
            placement: kv.take("placement")?,
            scales,
            output,
            copy: kv.take_or("copy", false)?,
            seed: kv.take_or("seed", 0)?,
            item: kv.take_or("item", 0)?,
            denoise_calls: kv.take_or("denoise_calls", 0)?,
            clamped: kv.take_or("clamped", 0)?,
        };
        kv.finish()?;
        Ok(sc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::PatchCodec;
    use crate::config::ScheduleConfig;
    use crate::data::{synth_image, SynthSpec};
    use std::cell::Cell;

    fn cfg16() -> ModelConfig {
        ModelConfig { image_side: 16, patch_side: 4, channels: 3, hidden: 16, heads: 2, ffn_hidden: 32, enc_blocks: 1, dec_blocks: 1, timesteps: 20, ..ModelConfig::default() }
    }

    /// Returns the exact noise that maps `z_t` back to a fixed `z0`.
    struct Oracle {
        cfg: ModelConfig,
        sched: NoiseSchedule,
        z0: PatchSequence,
        calls: Cell<usize>,
    }

    impl DenoiseModel for Oracle {
        fn config(&self) -> &ModelConfig {
            &self.cfg
        }

        fn denoise(&self, z_t: &PatchSequence, _: &PatchSequence, _: &Conditioning, t: usize) -> Result<PatchSequence, ModelError> {
            self.calls.set(self.calls.get() + 1);
            Ok(x0_to_eps(z_t, &self.z0, t, &self.sched)?)
        }
    }

    fn oracle() -> (Oracle, Image) {
        let cfg = cfg16();
        let sched = ScheduleConfig::scaled_for(20).build(20).unwrap();
        let img = synth_image(&SynthSpec::default(), 0, 0, 16);
        let z0 = PatchCodec::new(16, 4, 3).unwrap().encode(&img).unwrap();
        (Oracle { cfg, sched, z0, calls: Cell::new(0) }, img)
    }

    fn sample_cfg(mode: OutpaintMode, trajectory: Trajectory, copy: bool) -> SampleConfig {
        SampleConfig { mode, trajectory, copy, seed: 5, count: 1 }
    }

    fn max_diff(a: &Image, b: &Image) -> f32 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn exact_noise_oracle_recovers_target() {
        let (o, img) = oracle();
        let mode = OutpaintMode::Multiple { multiple: 1.0, output_side: 16 };
        for traj in [Trajectory::Ddpm, Trajectory::Ddim((0..=20).rev().collect()), Trajectory::ddim_uniform(5, &o.sched)] {
            let res = outpaint_item(&o, &o.sched.clone(), &img, &sample_cfg(mode, traj.clone(), false), 0).unwrap();
            assert!(max_diff(&res.image, &img) < 1e-5, "{traj}");
            assert_eq!(res.denoise_calls, traj.calls(20));
            assert_eq!(res.placement, Placement { top: 0, left: 0, height: 16, width: 16 });
        }
    }

    #[test]
    fn call_count_ignores_multiple() {
        let (o, img) = oracle();
        let sched = o.sched.clone();
        for multiple in [1.0, 2.25, 5.0, 11.7] {
            o.calls.set(0);
            let mode = OutpaintMode::Multiple { multiple, output_side: 48 };
            let res = outpaint_item(&o, &sched, &img, &sample_cfg(mode, Trajectory::ddim_uniform(7, &sched), false), 0).unwrap();
            assert_eq!((res.denoise_calls, o.calls.get()), (7, 7));
            assert_eq!((res.image.height(), res.image.width()), (48, 48));
        }
    }

    #[test]
    fn seeds_control_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Denoiser::init(cfg16(), &mut rng).unwrap();
        let mut params = model.params().to_vec();
        params.iter_mut().for_each(|p| *p += rng.gen_range(-0.05..0.05));
        let model = Denoiser::from_params(cfg16(), params).unwrap();
        let sched = ScheduleConfig::scaled_for(20).build(20).unwrap();
        let img = synth_image(&SynthSpec::default(), 1, 0, 24);
        let mode = OutpaintMode::Multiple { multiple: 2.25, output_side: 24 };
        let cfg = sample_cfg(mode, Trajectory::Ddpm, true);
        let a = outpaint_item(&model, &sched, &img, &cfg, 0).unwrap();
        let b = outpaint_item(&model, &sched, &img, &cfg, 0).unwrap();
        let c = outpaint_item(&model, &sched, &img, &SampleConfig { seed: 6, ..cfg.clone() }, 0).unwrap();
        assert_eq!(a.image, b.image);
        assert_ne!(a.image, c.image);
        assert_eq!(a.placement, Placement { top: 4, left: 4, height: 16, width: 16 });
        let inner = copy_paste(&c.image, &img, &a.placement).unwrap();
        assert_eq!(inner, c.image);
        assert!(a.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn untrained_model_is_refused() {
        let model = Denoiser::uninitialized(cfg16()).unwrap();
        let sched = ScheduleConfig::scaled_for(20).build(20).unwrap();
        let img = Image::zeros(16, 16, 3);
        let cfg = sample_cfg(OutpaintMode::Multiple { multiple: 1.0, output_side: 16 }, Trajectory::Ddpm, false);
        assert!(matches!(outpaint_item(&model, &sched, &img, &cfg, 0), Err(SampleError::UntrainedModel)));
    }

    #[test]
    fn disjoint_explicit_mode() {
        let (o, img) = oracle();
        let sched = o.sched.clone();
        let anchor = CropRegion::new(0, 0, 16, 16).unwrap();
        let target = CropRegion::new(0, 32, 16, 16).unwrap();
        let cfg = sample_cfg(OutpaintMode::Explicit { anchor, target }, Trajectory::ddim_uniform(4, &sched), true);
        let res = outpaint_item(&o, &sched, &img, &cfg, 0).unwrap();
        assert_eq!(res.placement, Placement { top: 0, left: -32, height: 16, width: 16 });
        assert_eq!(res.placement.clip(16, 16), None);
        let plain = outpaint_item(&o, &sched, &img, &SampleConfig { copy: false, ..cfg }, 0).unwrap();
        assert_eq!(res.image, plain.image);
    }

    #[test]
    fn paste_geometry() {
        let gen = Image::filled(6, 6, 1, -1.0);
        let input = Image::filled(2, 2, 1, 0.5);
        let whole = copy_paste(&gen, &Image::filled(6, 6, 1, 0.25), &Placement { top: 0, left: 0, height: 6, width: 6 }).unwrap();
        assert!(whole.data().iter().all(|&v| v == 0.25));
        let p = Placement { top: -1, left: 4, height: 3, width: 3 };
        let out = copy_paste(&gen, &input, &p).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let inside = y < 2 && x >= 4;
                assert_eq!(out.get(y, x, 0), if inside { 0.5 } else { -1.0 }, "{y},{x}");
            }
        }
        assert_eq!(copy_paste(&out, &input, &p).unwrap(), out);
        assert_eq!(p.inside(6, 6), None);
        assert_eq!(Placement { top: 1, left: 1, height: 2, width: 3 }.inside(6, 6), Some(CropRegion::new(1, 1, 2, 3).unwrap()));
    }

    #[test]
    fn trajectory_validation_and_text() {
        assert!(Trajectory::Ddim(vec![20, 10, 0]).validate(20).is_ok());
        assert!(Trajectory::Ddim(vec![21, 0]).validate(20).is_err());
        assert!(Trajectory::Ddim(vec![20, 20, 0]).validate(20).is_err());
        assert!(Trajectory::Ddim(vec![20, 5]).validate(20).is_err());
        assert!(Trajectory::Ddim(vec![0]).validate(20).is_err());
        let t: Trajectory = "ddim:20,10,0".parse().unwrap();
        assert_eq!(t.to_string().parse::<Trajectory>().unwrap(), t);
        assert_eq!("ddpm".parse::<Trajectory>().unwrap(), Trajectory::Ddpm);
    }

    #[test]
    fn percentiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert_eq!((percentile(&v, 0.1), percentile(&v, 0.9), median(&v)), (1.0, 9.0, 5.5));
        assert_eq!((median(&[3.0]), percentile(&[3.0], 0.1)), (3.0, 3.0));
    }

    #[test]
    fn bench_rows_are_well_formed() {
        let (o, img) = oracle();
        let sched = o.sched.clone();
        for repeats in [1, 3] {
            let rows = bench_sampling(&o, &sched, &img, &[2.25, 5.0], 32, &Trajectory::ddim_uniform(4, &sched), repeats, 0).unwrap();
            let text = format_bench_report(&rows);
            assert_eq!(text.lines().count(), 3);
            for line in text.lines().skip(1) {
                assert_eq!(line.split(' ').count(), 5);
            }
            assert!(rows.iter().all(|r| r.denoise_calls == 4 && r.p10_ms <= r.median_ms && r.median_ms <= r.p90_ms));
        }
    }

    #[test]
    fn sidecar_round_trip() {
        let s = Sidecar {
            input: "cat".into(),
            placement: Placement { top: 32, left: 32, height: 128, width: 128 },
            scales: (2.0, 2.0),
            output: (192, 192),
            copy: true,
            seed: 4,
            item: 1,
            denoise_calls: 20,
            clamped: 3,
        };
        assert_eq!(Sidecar::parse(&s.to_text()).unwrap(), s);
        assert!(Sidecar::parse("input = a\n").is_err());
        assert!(Sidecar::parse("input = a\nplacement = 1,2,3,4\nextra = 1").is_err());
    }
}
