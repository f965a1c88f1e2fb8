//! Flat parameter layout: every tensor is a named window into one vector.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;

use super::layers::Scalar;
use super::ModelConfig;
use crate::position::EmbedVariant;

/// Window `[offset, offset + rows * cols)` viewed as a row-major matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn mat<'a, T>(&self, p: &'a [T]) -> ArrayView2<'a, T> {
        ArrayView2::from_shape((self.rows, self.cols), &p[self.range()]).expect("slot in bounds")
    }

    pub fn mat_mut<'a, T>(&self, p: &'a mut [T]) -> ArrayViewMut2<'a, T> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut p[self.range()]).expect("slot in bounds")
    }

    pub fn vec<'a, T>(&self, p: &'a [T]) -> ArrayView1<'a, T> {
        ArrayView1::from(&p[self.range()])
    }

    pub fn vec_mut<'a, T>(&self, p: &'a mut [T]) -> ArrayViewMut1<'a, T> {
        ArrayViewMut1::from(&mut p[self.range()])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearSlots {
    pub w: Slot,
    pub b: Slot,
}

#[derive(Debug, Clone, Copy)]
pub struct NormSlots {
    pub g: Slot,
    pub b: Slot,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockSlots {
    pub ln1: NormSlots,
    pub qkv: LinearSlots,
    pub proj: LinearSlots,
    pub ln2: NormSlots,
    pub ff1: LinearSlots,
    pub ff2: LinearSlots,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub input: LinearSlots,
    pub time: LinearSlots,
    pub pe_map: Option<(LinearSlots, LinearSlots)>,
    pub encoder: Vec<BlockSlots>,
    pub enc_norm: NormSlots,
    pub cross_q: Slot,
    pub cross_k: Slot,
    pub cross_v: Slot,
    pub decoder: Vec<BlockSlots>,
    pub dec_norm: NormSlots,
    pub head: LinearSlots,
    pub conv_w: Slot,
    pub conv_b: Slot,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// Uniform in `+-1/sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
    Identity,
}

struct Builder {
    next: usize,
    inits: Vec<(Slot, Init)>,
}

impl Builder {
    fn slot(&mut self, rows: usize, cols: usize, init: Init) -> Slot {
        let s = Slot { offset: self.next, rows, cols };
        self.next += s.len();
        self.inits.push((s, init));
        s
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize) -> LinearSlots {
        LinearSlots { w: self.slot(fan_in, fan_out, Init::FanIn(fan_in)), b: self.slot(1, fan_out, Init::Zeros) }
    }

    fn norm(&mut self, d: usize) -> NormSlots {
        NormSlots { g: self.slot(1, d, Init::Ones), b: self.slot(1, d, Init::Zeros) }
    }

    fn block(&mut self, d: usize, ffn: usize) -> BlockSlots {
        BlockSlots {
            ln1: self.norm(d),
            qkv: self.linear(d, 3 * d),
            proj: self.linear(d, d),
            ln2: self.norm(d),
            ff1: self.linear(d, ffn),
            ff2: self.linear(ffn, d),
        }
    }
}

fn build(cfg: &ModelConfig) -> (ParamLayout, Vec<(Slot, Init)>) {
    let d = cfg.hidden;
    let c = cfg.token_width();
    let mut b = Builder { next: 0, inits: Vec::new() };
    let input = b.linear(2 * c, d);
    let time = b.linear(d, d);
    let pe_map = (cfg.pe_variant == EmbedVariant::Learnable).then(|| (b.linear(2, cfg.pe_hidden), b.linear(cfg.pe_hidden, d)));
    let encoder = (0..cfg.enc_blocks).map(|_| b.block(d, cfg.ffn_hidden)).collect();
    let enc_norm = b.norm(d);
    let cross_q = b.slot(d, d, Init::FanIn(d));
    let cross_k = b.slot(d, d, Init::FanIn(d));
    let cross_v = b.slot(d, d, Init::FanIn(d));
    let decoder = (0..cfg.dec_blocks).map(|_| b.block(d, cfg.ffn_hidden)).collect();
    let dec_norm = b.norm(d);
    let head = LinearSlots { w: b.slot(d, c, Init::Zeros), b: b.slot(1, c, Init::Zeros) };
    let k = cfg.conv_kernel;
    let conv_w = b.slot(cfg.channels, cfg.channels * k * k, Init::Identity);
    let conv_b = b.slot(1, cfg.channels, Init::Zeros);
    let layout = ParamLayout {
        input,
        time,
        pe_map,
        encoder,
        enc_norm,
        cross_q,
        cross_k,
        cross_v,
        decoder,
        dec_norm,
        head,
        conv_w,
        conv_b,
        total: b.next,
    };
    (layout, b.inits)
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        build(cfg).0
    }

    /// Fresh parameters: fan-in uniform weights, unit norms, zero output head,
    /// identity smoothing kernel.
    pub fn init<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Vec<T> {
        let (layout, inits) = build(cfg);
        let mut p = vec![T::zero(); layout.total];
        let k = cfg.conv_kernel;
        for (slot, init) in inits {
            let dst = &mut p[slot.range()];
            match init {
                Init::Zeros => {}
                Init::Ones => dst.iter_mut().for_each(|v| *v = T::one()),
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    dst.iter_mut().for_each(|v| *v = T::c(rng.gen_range(-bound..bound)));
                }
                Init::Identity => {
                    let ch = cfg.channels;
                    for c in 0..ch {
                        dst[((c * ch + c) * k + k / 2) * k + k / 2] = T::one();
                    }
                }
            }
        }
        p
    }
}
