//! Structural properties of the denoiser.

mod support;

use ndarray::{s, Array2};
use outpaint_core::codec::PatchSequence;
use outpaint_core::diffusion::{linear_schedule, standard_normal};
use outpaint_core::model::{as_f64, loss_and_grad, Conditioning, ModelConfig, ModelError, Network, PredictionTarget};
use outpaint_core::position::{relative_grid, sincos_embed, CropRegion, EmbedVariant, PosEmbedding, RelativeGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{batch, perturbed, tiny};

/// L = 4 tokens, C = 8 entries each, D = 16.
fn small() -> ModelConfig {
    ModelConfig {
        image_side: 4,
        patch_side: 2,
        channels: 2,
        hidden: 16,
        heads: 4,
        ffn_hidden: 32,
        enc_blocks: 1,
        dec_blocks: 2,
        timesteps: 10,
        ..ModelConfig::default()
    }
}

fn inputs(cfg: &ModelConfig, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, c) = (cfg.tokens(), cfg.token_width());
    (standard_normal(l, c, &mut rng).into_values(), standard_normal(l, c, &mut rng).into_values())
}

fn grid(cfg: &ModelConfig, shift: u32) -> Conditioning {
    let k = cfg.grid();
    let a = CropRegion::new(10, 10, 20, 20).unwrap();
    let t = CropRegion::new(shift, 4, 40, 36).unwrap();
    Conditioning::Grid(relative_grid(&a, &t, k, k).unwrap())
}

#[test]
fn output_shape_and_errors() {
    let cfg = small();
    assert_eq!((cfg.tokens(), cfg.token_width(), cfg.hidden), (4, 8, 16));
    let net = Network::new(cfg.clone()).unwrap();
    let p = perturbed(&net, 1, 0.1);
    let (zt, za) = inputs(&cfg, 2);
    let (out, _) = net.forward(&p, &zt, &za, &grid(&cfg, 0), 3).unwrap();
    assert_eq!(out.dim(), (4, 8));
    assert!(matches!(net.forward(&p, &zt, &za, &grid(&cfg, 0), 0), Err(ModelError::TimestepOutOfRange { .. })));
    assert!(matches!(net.forward(&p, &zt, &za, &grid(&cfg, 0), 11), Err(ModelError::TimestepOutOfRange { .. })));
    assert!(matches!(net.forward(&p[1..], &zt, &za, &grid(&cfg, 0), 3), Err(ModelError::ParamCount { .. })));
    let short = zt.slice(s![..3, ..]).to_owned();
    assert!(matches!(net.forward(&p, &short, &za, &grid(&cfg, 0), 3), Err(ModelError::ShapeMismatch(_))));
    let wrong_grid = Conditioning::Grid(RelativeGrid::identity(3));
    assert!(matches!(net.forward(&p, &zt, &za, &wrong_grid, 3), Err(ModelError::ShapeMismatch(_))));
    let mut bad = p.clone();
    bad[0] = f64::NAN;
    assert!(matches!(net.forward(&bad, &zt, &za, &grid(&cfg, 0), 3), Err(ModelError::NonFiniteActivation(_))));
}

#[test]
fn fresh_parameters_predict_zero() {
    let cfg = small();
    let net = Network::new(cfg.clone()).unwrap();
    let p: Vec<f64> = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    let (zt, za) = inputs(&cfg, 3);
    let (out, _) = net.forward(&p, &zt, &za, &grid(&cfg, 0), 5).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn single_token_attends_fully() {
    let cfg = ModelConfig { image_side: 2, patch_side: 2, ..small() };
    assert_eq!(cfg.tokens(), 1);
    let net = Network::new(cfg.clone()).unwrap();
    let p = perturbed(&net, 4, 0.2);
    let (zt, za) = inputs(&cfg, 5);
    let (_, cache) = net.forward(&p, &zt, &za, &Conditioning::Grid(RelativeGrid::identity(1)), 2).unwrap();
    assert_eq!(cache.cross_attention().dim(), (1, 1));
    assert!((cache.cross_attention()[[0, 0]] - 1.0).abs() < 1e-15);
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = small();
    let net = Network::new(cfg.clone()).unwrap();
    let p = perturbed(&net, 6, 0.5);
    let (zt, za) = inputs(&cfg, 7);
    let (_, cache) = net.forward(&p, &zt, &za, &grid(&cfg, 3), 9).unwrap();
    for row in cache.cross_attention().rows() {
        assert!(row.iter().all(|&v| v > 0.0));
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn query_permutation_permutes_output() {
    // with a 1x1 smoothing kernel every stage after the query is per token
    let cfg = ModelConfig { conv_kernel: 1, image_side: 8, ..small() };
    let net = Network::new(cfg.clone()).unwrap();
    let p = perturbed(&net, 8, 0.3);
    let (zt, za) = inputs(&cfg, 9);
    let k = cfg.grid();
    let g = relative_grid(&CropRegion::new(5, 5, 10, 10).unwrap(), &CropRegion::new(0, 0, 30, 30).unwrap(), k, k).unwrap();
    let e = sincos_embed(&g, cfg.hidden, 10_000.0).unwrap().into_matrix();
    let perm = [3usize, 0, 15, 7, 1, 2, 4, 5, 6, 8, 9, 10, 11, 12, 14, 13];
    let mut ep = e.clone();
    for (i, &j) in perm.iter().enumerate() {
        ep.row_mut(i).assign(&e.row(j));
    }
    let (out, _) = net.forward(&p, &zt, &za, &Conditioning::Embedding(PosEmbedding(e)), 4).unwrap();
    let (outp, _) = net.forward(&p, &zt, &za, &Conditioning::Embedding(PosEmbedding(ep)), 4).unwrap();
    for (i, &j) in perm.iter().enumerate() {
        for c in 0..cfg.token_width() {
            assert!((outp[[i, c]] - out[[j, c]]).abs() < 1e-12);
        }
    }
}

#[test]
fn conditioning_changes_output_and_forward_is_deterministic() {
    let cfg = small();
    let net = Network::new(cfg.clone()).unwrap();
    let p = perturbed(&net, 10, 0.3);
    let (zt, za) = inputs(&cfg, 11);
    let (a, _) = net.forward(&p, &zt, &za, &grid(&cfg, 0), 4).unwrap();
    let (b, _) = net.forward(&p, &zt, &za, &grid(&cfg, 0), 4).unwrap();
    let (c, _) = net.forward(&p, &zt, &za, &grid(&cfg, 30), 4).unwrap();
    let (d, _) = net.forward(&p, &zt, &za, &grid(&cfg, 0), 5).unwrap();
    assert_eq!(a, b);
    assert!((&a - &c).iter().any(|v| v.abs() > 1e-6));
    assert!((&a - &d).iter().any(|v| v.abs() > 1e-6));
    let none = ModelConfig { pe_variant: EmbedVariant::None, ..cfg.clone() };
    let net_none = Network::new(none).unwrap();
    let (x, _) = net_none.forward(&p, &zt, &za, &grid(&cfg, 0), 4).unwrap();
    let (y, _) = net_none.forward(&p, &zt, &za, &grid(&cfg, 30), 4).unwrap();
    assert_eq!(x, y);
}

#[test]
fn f32_and_f64_agree() {
    let cfg = small();
    let net = Network::new(cfg.clone()).unwrap();
    let p = perturbed(&net, 12, 0.3);
    let p32: Vec<f32> = p.iter().map(|&v| v as f32).collect();
    let (zt, za) = inputs(&cfg, 13);
    let (zt, za) = (PatchSequence(zt), PatchSequence(za));
    let a = net.denoise(&p, &zt, &za, &grid(&cfg, 0), 4).unwrap();
    let b = net.denoise(&p32, &zt, &za, &grid(&cfg, 0), 4).unwrap();
    let err = (a.values() - b.values()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-4, "{err}");
}

#[test]
fn sharded_gradient_matches_full_batch() {
    let cfg = tiny(EmbedVariant::SinCos, PredictionTarget::Noise);
    let net = Network::new(cfg.clone()).unwrap();
    let p = perturbed(&net, 14, 0.3);
    let sched = linear_schedule(cfg.timesteps, 1e-4, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let b = [batch(&cfg, &mut rng), batch(&cfg, &mut rng)].concat();
    let (loss, grad) = loss_and_grad(&net, &p, &b, &sched).unwrap();
    let (l1, g1) = loss_and_grad(&net, &p, &b[..1], &sched).unwrap();
    let (l2, g2) = loss_and_grad(&net, &p, &b[1..], &sched).unwrap();
    let n = b.len() as f64;
    assert!((loss - (l1 + 3.0 * l2) / n).abs() < 1e-12);
    for i in 0..grad.len() {
        assert!((grad[i] - (g1[i] + 3.0 * g2[i]) / n).abs() < 1e-6);
    }
}

#[test]
fn duplicated_batch_changes_nothing() {
    let cfg = tiny(EmbedVariant::Learnable, PredictionTarget::X0);
    let net = Network::new(cfg.clone()).unwrap();
    let p: Vec<f32> = as_f64(&perturbed(&net, 16, 0.3)).iter().map(|&v| v as f32).collect();
    let sched = linear_schedule(cfg.timesteps, 1e-4, 0.05).unwrap();
    let b = batch(&cfg, &mut ChaCha8Rng::seed_from_u64(17));
    let (l, g) = loss_and_grad(&net, &p, &b, &sched).unwrap();
    let (l2, g2) = loss_and_grad(&net, &p, &[b.clone(), b].concat(), &sched).unwrap();
    assert!((l - l2).abs() < 1e-6 * l.abs().max(1.0));
    for (a, b) in g.iter().zip(&g2) {
        assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-3));
    }
}
