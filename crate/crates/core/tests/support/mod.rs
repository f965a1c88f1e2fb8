//! Helpers shared by the integration tests.
#![allow(dead_code)]

use outpaint_core::diffusion::{linear_schedule, standard_normal};
use outpaint_core::model::{loss_and_grad, Conditioning, ModelConfig, Network, PredictionTarget, TrainSample};
use outpaint_core::position::{relative_grid, CropRegion, EmbedVariant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny(variant: EmbedVariant, prediction: PredictionTarget) -> ModelConfig {
    // L = 4 tokens of width C = 4 (1 channel, 2x2 patches), D = 8
    ModelConfig {
        image_side: 4,
        patch_side: 2,
        channels: 1,
        hidden: 8,
        heads: 2,
        ffn_hidden: 16,
        enc_blocks: 1,
        dec_blocks: 1,
        conv_kernel: 3,
        pe_variant: variant,
        pe_hidden: 6,
        anchor_pe: true,
        prediction,
        timesteps: 50,
    }
}

pub fn batch(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<TrainSample> {
    let (l, c) = (cfg.tokens(), cfg.token_width());
    (0..2)
        .map(|i| {
            let anchor = CropRegion::new(3 + i, 2, 9, 11).unwrap();
            let target = CropRegion::new(0, 1 + i, 17, 14).unwrap();
            let grid = relative_grid(&anchor, &target, cfg.grid(), cfg.grid()).unwrap();
            TrainSample {
                z_a: standard_normal(l, c, rng),
                z0: standard_normal(l, c, rng),
                cond: Conditioning::Grid(grid),
                t: rng.gen_range(1..=cfg.timesteps),
                eps: standard_normal(l, c, rng),
            }
        })
        .collect()
}

pub fn max_rel_error(cfg: ModelConfig, seed: u64, probes: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::new(cfg.clone()).unwrap();
    let mut p: Vec<f64> = net.init_params(&mut rng);
    // the head starts at zero; perturb everything so every path carries gradient
    for v in p.iter_mut() {
        *v += rng.gen_range(-0.3..0.3);
    }
    let sched = linear_schedule(cfg.timesteps, 1e-4, 0.05).unwrap();
    let b = batch(&cfg, &mut rng);
    let (_, grad) = loss_and_grad(&net, &p, &b, &sched).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = rng.gen_range(0..p.len());
        let orig = p[i];
        p[i] = orig + h;
        let (lp, _) = loss_and_grad(&net, &p, &b, &sched).unwrap();
        p[i] = orig - h;
        let (lm, _) = loss_and_grad(&net, &p, &b, &sched).unwrap();
        p[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / (fd.abs().max(grad[i].abs()).max(1e-6));
        worst = worst.max(rel);
    }
    worst
}


/// Initial parameters with every entry nudged, so the zero head no longer
/// hides the rest of the network.
pub fn perturbed(net: &Network, seed: u64, amp: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<f64> = net.init_params(&mut rng);
    for v in p.iter_mut() {
        *v += rng.gen_range(-amp..amp);
    }
    p
}
