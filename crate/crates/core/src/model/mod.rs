//! The position-aware denoiser.
//!
//! Pipeline for one sample:
//!
//! ```text
//! [z_t | z_a] -> linear -> + time(t) (+ anchor lattice PE)
//!   -> encoder blocks -> norm = z_g
//!   -> softmax((E W_q)(z_g W_k)^T / sqrt(D)) (z_g W_v) = z_d
//!   -> decoder blocks -> norm -> linear -> patch grid -> kxk conv -> sequence
//! ```
//!
//! Forward and backward are written out by hand over a flat parameter
//! vector so that the same code runs in `f32` for training and in `f64`
//! for finite-difference checks.

pub mod layers;
pub mod params;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use thiserror::Error;

use crate::codec::{CodecError, PatchCodec, PatchSequence};
use crate::diffusion::{q_sample, DiffusionError, NoiseSchedule};
use crate::position::{sincos_axis, sincos_embed, EmbedVariant, PosEmbedding, PositionError, RelativeGrid, DEFAULT_FREQ_BASE};

use layers::*;
pub use layers::Scalar;
pub use params::{ParamLayout, Slot};
use params::{BlockSlots, NormSlots};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation after {0}")]
    NonFiniteActivation(&'static str),
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("parameter vector has {got} entries, layout needs {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error(transparent)]
    Position(#[from] PositionError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// What the network output stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredictionTarget {
    Noise,
    X0,
}

impl fmt::Display for PredictionTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredictionTarget::Noise => "noise",
            PredictionTarget::X0 => "x0",
        })
    }
}

impl FromStr for PredictionTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noise" => Ok(Self::Noise),
            "x0" => Ok(Self::X0),
            other => Err(format!("unknown prediction target {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Side of the (square) model resolution in pixels.
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    /// Hidden width `D`.
    pub hidden: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub conv_kernel: usize,
    pub pe_variant: EmbedVariant,
    /// Hidden width of the learnable positional map.
    pub pe_hidden: usize,
    /// Add the integer-lattice embedding to the anchor tokens.
    pub anchor_pe: bool,
    pub prediction: PredictionTarget,
    /// Number of diffusion timesteps the model is conditioned on.
    pub timesteps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            patch_side: 8,
            channels: 3,
            hidden: 32,
            heads: 4,
            ffn_hidden: 128,
            enc_blocks: 2,
            dec_blocks: 2,
            conv_kernel: 3,
            pe_variant: EmbedVariant::SinCos,
            pe_hidden: 32,
            anchor_pe: true,
            prediction: PredictionTarget::Noise,
            timesteps: 200,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.image_side == 0 || self.patch_side == 0 || self.channels == 0 {
            return bad("image, patch and channel sizes must be positive".into());
        }
        if !self.image_side.is_multiple_of(self.patch_side) {
            return bad(format!("patch {} does not divide image side {}", self.patch_side, self.image_side));
        }
        if self.hidden == 0 || !self.hidden.is_multiple_of(4) {
            return bad(format!("hidden width {} must be a positive multiple of 4", self.hidden));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide hidden width {}", self.heads, self.hidden));
        }
        if self.ffn_hidden == 0 || self.pe_hidden == 0 {
            return bad("feedforward widths must be positive".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv kernel {} must be odd", self.conv_kernel));
        }
        if self.timesteps == 0 {
            return bad("timesteps must be >= 1".into());
        }
        Ok(())
    }

    pub fn codec(&self) -> PatchCodec {
        PatchCodec::new(self.image_side, self.patch_side, self.channels).expect("validated config")
    }

    /// Patches per side `K`.
    pub fn grid(&self) -> usize {
        self.image_side / self.patch_side
    }

    /// Sequence length `L`.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Token width `C`.
    pub fn token_width(&self) -> usize {
        self.channels * self.patch_side * self.patch_side
    }

    pub fn param_count(&self) -> usize {
        ParamLayout::new(self).total
    }
}

/// Positional query fed to the cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub enum Conditioning {
    /// Target grid; the model builds `E` according to its configured variant.
    Grid(RelativeGrid),
    /// A ready-made `E`, used as is.
    Embedding(PosEmbedding),
}

impl Conditioning {
    pub fn grid(&self) -> Option<&RelativeGrid> {
        match self {
            Conditioning::Grid(g) => Some(g),
            Conditioning::Embedding(_) => None,
        }
    }
}

struct BlockCache<T> {
    n1: NormCache<T>,
    xn1: Array2<T>,
    attn: MhaCache<T>,
    n2: NormCache<T>,
    xn2: Array2<T>,
    pre_act: Array2<T>,
    act: Array2<T>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache<T> {
    x_in: Array2<T>,
    time_raw: Array2<T>,
    pe: Option<(Array2<T>, Array2<T>, Array2<T>)>,
    e: Array2<T>,
    enc: Vec<BlockCache<T>>,
    enc_norm: NormCache<T>,
    z_g: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Array2<T>,
    dec: Vec<BlockCache<T>>,
    dec_norm: NormCache<T>,
    dec_out: Array2<T>,
    head_img: Vec<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Cross-attention probabilities (`L x L`, rows sum to one).
    pub fn cross_attention(&self) -> &Array2<T> {
        &self.probs
    }
}

/// Parameter-free description of the network; parameters are passed in.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: ModelConfig,
    layout: ParamLayout,
    /// image flat index -> sequence flat index
    perm: Vec<usize>,
    anchor_pe: Array2<f64>,
}

fn gelu_map<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(gelu_scalar)
}

fn views2<'a, T>(g: &'a mut [T], a: Slot, b: Slot) -> (ArrayViewMut2<'a, T>, ArrayViewMut1<'a, T>) {
    let [ga, gb] = split_slots(g, [a, b]);
    (ArrayViewMut2::from_shape((a.rows, a.cols), ga).unwrap(), ArrayViewMut1::from(gb))
}

/// Disjoint mutable windows of one buffer.
pub fn split_slots<'a, T, const N: usize>(buf: &'a mut [T], slots: [Slot; N]) -> [&'a mut [T]; N] {
    let mut order: Vec<usize> = (0..N).collect();
    order.sort_by_key(|&i| slots[i].offset);
    let mut out: [Option<&'a mut [T]>; N] = std::array::from_fn(|_| None);
    let mut rest = buf;
    let mut base = 0;
    for i in order {
        let s = slots[i];
        assert!(s.offset >= base, "overlapping slots");
        let (_, tail) = std::mem::take(&mut rest).split_at_mut(s.offset - base);
        let (mine, tail) = tail.split_at_mut(s.len());
        out[i] = Some(mine);
        rest = tail;
        base = s.offset + s.len();
    }
    out.map(|o| o.expect("every slot assigned"))
}

fn to_t<T: Scalar>(a: &Array2<f64>) -> Array2<T> {
    a.mapv(T::c)
}

impl Network {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let layout = ParamLayout::new(&cfg);
        let codec = cfg.codec();
        let side = cfg.image_side;
        let mut perm = vec![0; side * side * cfg.channels];
        for y in 0..side {
            for x in 0..side {
                for c in 0..cfg.channels {
                    let (r, k) = codec.locate(y, x, c);
                    perm[(y * side + x) * cfg.channels + c] = r * codec.width() + k;
                }
            }
        }
        let anchor_pe = sincos_embed(&RelativeGrid::identity(cfg.grid()), cfg.hidden, DEFAULT_FREQ_BASE)?.into_matrix();
        Ok(Self { cfg, layout, perm, anchor_pe })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        ParamLayout::init(&self.cfg, rng)
    }

    fn seq_to_img<T: Scalar>(&self, seq: &Array2<T>) -> Vec<T> {
        let flat = seq.as_slice().expect("standard layout");
        self.perm.iter().map(|&i| flat[i]).collect()
    }

    fn img_to_seq<T: Scalar>(&self, img: &[T]) -> Array2<T> {
        let mut out = Array2::zeros((self.cfg.tokens(), self.cfg.token_width()));
        let flat = out.as_slice_mut().expect("standard layout");
        for (&i, &v) in self.perm.iter().zip(img) {
            flat[i] = v;
        }
        out
    }

    fn check_seq(&self, what: &str, a: (usize, usize)) -> Result<(), ModelError> {
        let want = (self.cfg.tokens(), self.cfg.token_width());
        if a != want {
            return Err(ModelError::ShapeMismatch(format!("{what} is {a:?}, expected {want:?}")));
        }
        Ok(())
    }

    fn query<T: Scalar>(&self, p: &[T], cond: &Conditioning) -> Result<(Array2<T>, Option<(Array2<T>, Array2<T>, Array2<T>)>), ModelError> {
        let (l, d) = (self.cfg.tokens(), self.cfg.hidden);
        match cond {
            Conditioning::Embedding(e) => {
                if e.matrix().dim() != (l, d) {
                    return Err(ModelError::ShapeMismatch(format!("E is {:?}, expected {:?}", e.matrix().dim(), (l, d))));
                }
                Ok((to_t(e.matrix()), None))
            }
            Conditioning::Grid(g) => {
                if g.len() != l {
                    return Err(ModelError::ShapeMismatch(format!("grid has {} patches, expected {l}", g.len())));
                }
                match (self.cfg.pe_variant, &self.layout.pe_map) {
                    (EmbedVariant::None, _) => Ok((Array2::zeros((l, d)), None)),
                    (EmbedVariant::SinCos, _) => Ok((to_t(sincos_embed(g, d, DEFAULT_FREQ_BASE)?.matrix()), None)),
                    (EmbedVariant::Learnable, Some((l1, l2))) => {
                        let coords: Array2<T> = to_t(&g.coord_matrix());
                        let pre = linear(&coords, l1.w.mat(p), Some(l1.b.vec(p)));
                        let act = gelu_map(&pre);
                        let e = linear(&act, l2.w.mat(p), Some(l2.b.vec(p)));
                        Ok((e, Some((coords, pre, act))))
                    }
                    (EmbedVariant::Learnable, None) => unreachable!("layout built from the same config"),
                }
            }
        }
    }

    fn block_forward<T: Scalar>(&self, p: &[T], b: &BlockSlots, x: Array2<T>) -> (Array2<T>, BlockCache<T>) {
        let (xn1, n1) = layer_norm(&x, b.ln1.g.vec(p), b.ln1.b.vec(p));
        let (att, attn) =
            self_attention(&xn1, b.qkv.w.mat(p), b.qkv.b.vec(p), b.proj.w.mat(p), b.proj.b.vec(p), self.cfg.heads);
        let x1 = &x + &att;
        let (xn2, n2) = layer_norm(&x1, b.ln2.g.vec(p), b.ln2.b.vec(p));
        let pre_act = linear(&xn2, b.ff1.w.mat(p), Some(b.ff1.b.vec(p)));
        let act = gelu_map(&pre_act);
        let out = &x1 + &linear(&act, b.ff2.w.mat(p), Some(b.ff2.b.vec(p)));
        (out, BlockCache { n1, xn1, attn, n2, xn2, pre_act, act })
    }

    fn block_backward<T: Scalar>(&self, p: &[T], b: &BlockSlots, c: &BlockCache<T>, dy: Array2<T>, g: &mut [T]) -> Array2<T> {
        let mut dx1 = dy.clone();
        let (dw, db) = views2(g, b.ff2.w, b.ff2.b);
        let mut dact = linear_backward(&c.act, b.ff2.w.mat(p), &dy, dw, Some(db), true).unwrap();
        ndarray::Zip::from(&mut dact).and(&c.pre_act).for_each(|d, &x| *d *= gelu_grad(x));
        let (dw, db) = views2(g, b.ff1.w, b.ff1.b);
        let dxn2 = linear_backward(&c.xn2, b.ff1.w.mat(p), &dact, dw, Some(db), true).unwrap();
        let (dg, dbn) = views_norm(g, &b.ln2);
        dx1 += &layer_norm_backward(&c.n2, b.ln2.g.vec(p), &dxn2, dg, dbn);
        let [gqw, gqb, gow, gob] = split_slots(g, [b.qkv.w, b.qkv.b, b.proj.w, b.proj.b]);
        let dxn1 = self_attention_backward(
            &c.xn1,
            &c.attn,
            b.qkv.w.mat(p),
            b.proj.w.mat(p),
            &dx1,
            ArrayViewMut2::from_shape((b.qkv.w.rows, b.qkv.w.cols), gqw).unwrap(),
            ArrayViewMut1::from(gqb),
            ArrayViewMut2::from_shape((b.proj.w.rows, b.proj.w.cols), gow).unwrap(),
            ArrayViewMut1::from(gob),
            self.cfg.heads,
        );
        let (dg, dbn) = views_norm(g, &b.ln1);
        dx1 + layer_norm_backward(&c.n1, b.ln1.g.vec(p), &dxn1, dg, dbn)
    }

    /// Runs the denoiser; returns the `L x C` output and the activations.
    pub fn forward<T: Scalar>(
        &self,
        p: &[T],
        z_t: &Array2<T>,
        z_a: &Array2<T>,
        cond: &Conditioning,
        t: usize,
    ) -> Result<(Array2<T>, ForwardCache<T>), ModelError> {
        let cfg = &self.cfg;
        let lay = &self.layout;
        if p.len() != lay.total {
            return Err(ModelError::ParamCount { expected: lay.total, got: p.len() });
        }
        self.check_seq("z_t", z_t.dim())?;
        self.check_seq("z_a", z_a.dim())?;
        if t == 0 || t > cfg.timesteps {
            return Err(ModelError::TimestepOutOfRange { t, max: cfg.timesteps });
        }
        let (l, d) = (cfg.tokens(), cfg.hidden);

        let x_in = ndarray::concatenate![Axis(1), *z_t, *z_a];
        let mut h = linear(&x_in, lay.input.w.mat(p), Some(lay.input.b.vec(p)));
        let mut raw = vec![0.0; d];
        sincos_axis(t as f64, DEFAULT_FREQ_BASE, &mut raw);
        let time_raw = Array2::from_shape_vec((1, d), raw.into_iter().map(T::c).collect()).unwrap();
        let temb = linear(&time_raw, lay.time.w.mat(p), Some(lay.time.b.vec(p)));
        h += &temb.row(0);
        if cfg.anchor_pe {
            h += &to_t::<T>(&self.anchor_pe);
        }

        let mut enc = Vec::with_capacity(lay.encoder.len());
        for b in &lay.encoder {
            let (out, c) = self.block_forward(p, b, h);
            enc.push(c);
            h = out;
        }
        let (z_g, enc_norm) = layer_norm(&h, lay.enc_norm.g.vec(p), lay.enc_norm.b.vec(p));
        if !z_g.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFiniteActivation("encoder"));
        }

        let (e, pe) = self.query(p, cond)?;
        let q = e.dot(&lay.cross_q.mat(p));
        let k = z_g.dot(&lay.cross_k.mat(p));
        let v = z_g.dot(&lay.cross_v.mat(p));
        let scale = T::one() / T::c(d as f64).sqrt();
        let (mut h, probs) = attention(q.view(), k.view(), v.view(), scale);

        let mut dec = Vec::with_capacity(lay.decoder.len());
        for b in &lay.decoder {
            let (out, c) = self.block_forward(p, b, h);
            dec.push(c);
            h = out;
        }
        let (dec_out, dec_norm) = layer_norm(&h, lay.dec_norm.g.vec(p), lay.dec_norm.b.vec(p));
        let head = linear(&dec_out, lay.head.w.mat(p), Some(lay.head.b.vec(p)));
        let head_img = self.seq_to_img(&head);
        let smoothed = conv2d(
            &head_img,
            cfg.image_side,
            cfg.channels,
            lay.conv_w.vec(p).as_slice().unwrap(),
            lay.conv_b.vec(p).as_slice().unwrap(),
            cfg.conv_kernel,
        );
        let out = self.img_to_seq(&smoothed);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFiniteActivation("output head"));
        }
        debug_assert_eq!(out.dim(), (l, cfg.token_width()));
        let cache = ForwardCache {
            x_in,
            time_raw,
            pe,
            e,
            enc,
            enc_norm,
            z_g,
            q,
            k,
            v,
            probs,
            dec,
            dec_norm,
            dec_out,
            head_img,
        };
        Ok((out, cache))
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d output`.
    pub fn backward<T: Scalar>(&self, p: &[T], cache: &ForwardCache<T>, dout: &Array2<T>, grad: &mut [T]) {
        let cfg = &self.cfg;
        let lay = &self.layout;
        let d = cfg.hidden;

        let dimg = self.seq_to_img(&dout.as_standard_layout().to_owned());
        let [gk, gb] = split_slots(grad, [lay.conv_w, lay.conv_b]);
        let dhead_img = conv2d_backward(
            &cache.head_img,
            cfg.image_side,
            cfg.channels,
            lay.conv_w.vec(p).as_slice().unwrap(),
            cfg.conv_kernel,
            &dimg,
            gk,
            gb,
        );
        let dhead = self.img_to_seq(&dhead_img);
        let (dw, db) = views2(grad, lay.head.w, lay.head.b);
        let ddec_out = linear_backward(&cache.dec_out, lay.head.w.mat(p), &dhead, dw, Some(db), true).unwrap();
        let (dg, dbn) = views_norm(grad, &lay.dec_norm);
        let mut dh = layer_norm_backward(&cache.dec_norm, lay.dec_norm.g.vec(p), &ddec_out, dg, dbn);
        for (b, c) in lay.decoder.iter().zip(&cache.dec).rev() {
            dh = self.block_backward(p, b, c, dh, grad);
        }

        let scale = T::one() / T::c(d as f64).sqrt();
        let (dq, dk, dv) =
            attention_backward(cache.q.view(), cache.k.view(), cache.v.view(), &cache.probs, dh.view(), scale);
        let mut gq = lay.cross_q.mat_mut(grad);
        gq += &cache.e.t().dot(&dq);
        let mut gk = lay.cross_k.mat_mut(grad);
        gk += &cache.z_g.t().dot(&dk);
        let mut gv = lay.cross_v.mat_mut(grad);
        gv += &cache.z_g.t().dot(&dv);
        let dz_g = dk.dot(&lay.cross_k.mat(p).t()) + dv.dot(&lay.cross_v.mat(p).t());

        if let (Some((coords, pre, act)), Some((l1, l2))) = (&cache.pe, &lay.pe_map) {
            let de = dq.dot(&lay.cross_q.mat(p).t());
            let (dw, db) = views2(grad, l2.w, l2.b);
            let mut dact = linear_backward(act, l2.w.mat(p), &de, dw, Some(db), true).unwrap();
            ndarray::Zip::from(&mut dact).and(pre).for_each(|g, &x| *g *= gelu_grad(x));
            let (dw, db) = views2(grad, l1.w, l1.b);
            linear_backward(coords, l1.w.mat(p), &dact, dw, Some(db), false);
        }

        let (dg, dbn) = views_norm(grad, &lay.enc_norm);
        let mut dh = layer_norm_backward(&cache.enc_norm, lay.enc_norm.g.vec(p), &dz_g, dg, dbn);
        for (b, c) in lay.encoder.iter().zip(&cache.enc).rev() {
            dh = self.block_backward(p, b, c, dh, grad);
        }

        let dtime = dh.sum_axis(Axis(0)).insert_axis(Axis(0));
        let (dw, db) = views2(grad, lay.time.w, lay.time.b);
        linear_backward(&cache.time_raw, lay.time.w.mat(p), &dtime, dw, Some(db), false);
        let (dw, db) = views2(grad, lay.input.w, lay.input.b);
        linear_backward(&cache.x_in, lay.input.w.mat(p), &dh, dw, Some(db), false);
    }

    /// Convenience forward on `f64` sequences with parameters of type `T`.
    pub fn denoise<T: Scalar>(
        &self,
        p: &[T],
        z_t: &PatchSequence,
        z_a: &PatchSequence,
        cond: &Conditioning,
        t: usize,
    ) -> Result<PatchSequence, ModelError> {
        let (out, _) = self.forward(p, &to_t(z_t.values()), &to_t(z_a.values()), cond, t)?;
        Ok(PatchSequence(out.mapv(|v| v.f64())))
    }
}

fn views_norm<'a, T>(g: &'a mut [T], n: &NormSlots) -> (ArrayViewMut1<'a, T>, ArrayViewMut1<'a, T>) {
    let [a, b] = split_slots(g, [n.g, n.b]);
    (ArrayViewMut1::from(a), ArrayViewMut1::from(b))
}

/// One training example for [`loss_and_grad`].
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub z_a: PatchSequence,
    pub z0: PatchSequence,
    pub cond: Conditioning,
    pub t: usize,
    pub eps: PatchSequence,
}

/// Mean squared error over batch and entries, with its exact gradient.
pub fn loss_and_grad<T: Scalar>(
    net: &Network,
    p: &[T],
    batch: &[TrainSample],
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<T>), ModelError> {
    let mut grad = vec![T::zero(); p.len()];
    if batch.is_empty() {
        return Ok((0.0, grad));
    }
    let n = (batch.len() * net.cfg.tokens() * net.cfg.token_width()) as f64;
    let mut loss = 0.0;
    for s in batch {
        let z_t = q_sample(&s.z0, s.t, &s.eps, sched)?;
        let (out, cache) = net.forward(p, &to_t(z_t.values()), &to_t(s.z_a.values()), &s.cond, s.t)?;
        let target = match net.cfg.prediction {
            PredictionTarget::Noise => &s.eps,
            PredictionTarget::X0 => &s.z0,
        };
        let target: Array2<T> = to_t(target.values());
        let diff = &out - &target;
        loss += diff.iter().map(|v| v.f64() * v.f64()).sum::<f64>();
        let dout = diff.mapv(|v| v * T::c(2.0 / n));
        net.backward(p, &cache, &dout, &mut grad);
    }
    Ok((loss / n, grad))
}

/// Flat-vector helpers used by the optimiser and gradient checks.
pub fn as_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.f64()).collect()
}

pub fn from_f64<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::c(x)).collect()
}

/// Trained (or freshly initialised) weights plus their network.
#[derive(Debug, Clone)]
pub struct Denoiser {
    net: Network,
    params: Vec<f32>,
    initialized: bool,
}

impl Denoiser {
    /// All-zero parameters flagged as uninitialised.
    pub fn uninitialized(cfg: ModelConfig) -> Result<Self, ModelError> {
        let net = Network::new(cfg)?;
        let params = vec![0.0; net.param_count()];
        Ok(Self { net, params, initialized: false })
    }

    pub fn init<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        let net = Network::new(cfg)?;
        let params = net.init_params(rng);
        Ok(Self { net, params, initialized: true })
    }

    pub fn from_params(cfg: ModelConfig, params: Vec<f32>) -> Result<Self, ModelError> {
        let net = Network::new(cfg)?;
        if params.len() != net.param_count() {
            return Err(ModelError::ParamCount { expected: net.param_count(), got: params.len() });
        }
        Ok(Self { net, params, initialized: true })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn denoise(
        &self,
        z_t: &PatchSequence,
        z_a: &PatchSequence,
        cond: &Conditioning,
        t: usize,
    ) -> Result<PatchSequence, ModelError> {
        self.net.denoise(&self.params, z_t, z_a, cond, t)
    }
}

/// Sinusoidal-only helper exposed for inspection.
pub fn timestep_embedding(t: usize, dim: usize) -> Array1<f64> {
    let mut raw = vec![0.0; dim];
    sincos_axis(t as f64, DEFAULT_FREQ_BASE, &mut raw);
    Array1::from(raw)
}
