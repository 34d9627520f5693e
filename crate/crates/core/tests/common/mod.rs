//! Shared fixtures for the integration test targets: the central
//! finite-difference harness, a tiny model configuration, and synthetic
//! window builders.

use std::sync::Arc;

use heliofuse_core::autodiff::{Tape, Var};
use heliofuse_core::config::ModelConfig;
use heliofuse_core::data::{PlantMeta, SampleWindow};
use heliofuse_core::model::{Batch, FusionNet, PlanSource};
use heliofuse_core::nn::collect_grads;
use heliofuse_core::rng::SeedTree;
use heliofuse_core::tensor::Tensor;

pub const FD_H: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-8;

/// Gap metric for one gradient entry: 0 when within the absolute floor,
/// otherwise the relative error against the larger magnitude.
pub fn fd_gap(analytic: f64, numeric: f64) -> f64 {
    let gap = (analytic - numeric).abs();
    if gap <= FD_ABS_FLOOR {
        0.0
    } else {
        gap / analytic.abs().max(numeric.abs())
    }
}

/// Check d(f)/d(inputs) against central differences for every coordinate.
/// Returns the worst gap metric seen.
pub fn fd_check<F>(inputs: &[Tensor], f: F, label: &str) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    assert_eq!(tape.value(loss).numel(), 1, "{label}: loss must be scalar");
    tape.backward(loss).expect(label);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.param(x.clone())).collect();
        let l = f(&mut t, &vs);
        t.data(l)[0]
    };

    let mut worst = 0.0_f64;
    for (pi, input) in inputs.iter().enumerate() {
        for ci in 0..input.data.len() {
            let mut plus = inputs.to_vec();
            plus[pi].data[ci] += FD_H;
            let mut minus = inputs.to_vec();
            minus[pi].data[ci] -= FD_H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
            let a = analytic[pi][ci];
            let gap = fd_gap(a, numeric);
            assert!(
                gap < FD_REL_TOL,
                "{label}: input {pi} coord {ci}: analytic {a} vs numeric {numeric} (gap {gap:.3e})"
            );
            worst = worst.max(gap);
        }
    }
    worst
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut SeedTree::new(seed).rng())
}

/// Tiny full-model configuration: dim 8, depth 1, heads 1, 4x4 images with
/// 2x2 patches, T = 4, both quantizers on, dropout and masking off so the
/// forward pass is a deterministic function of the parameters.
pub fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        patch_size: [2, 2],
        image_size: [4, 4],
        dim: 8,
        depth: 1,
        heads: 1,
        dim_head: 8,
        mlp_ratio: 2,
        dropout: 0.0,
        decoder_dim: 8,
        decoder_depth: 1,
        decoder_heads: 1,
        decoder_dim_head: 8,
        ctx_masking_ratio: 0.0,
        ts_masking_ratio: 0.0,
        t_in: 4,
        t_out: 4,
        aux_channels: 3,
        vq_codes: 6,
        vq_stages: 2,
        vq_in_ts: true,
        vq_in_ctx: true,
        ..ModelConfig::default()
    }
}

pub fn fake_window(seed: u64, cfg: &ModelConfig, plant: &str) -> SampleWindow {
    let mut rng = SeedTree::new(seed).rng();
    let t = cfg.t_in;
    SampleWindow {
        x_ts: Tensor::rand_uniform(&[t, cfg.ts_channels], 0.0, 1.0, &mut rng),
        x_ctx: Arc::new(Tensor::rand_uniform(
            &[t, cfg.ctx_channels, cfg.image_size[0], cfg.image_size[1]],
            0.0,
            1.0,
            &mut rng,
        )),
        x_aux: Tensor::randn(&[t, cfg.aux_channels], 1.0, &mut rng),
        y: Tensor::rand_uniform(&[t, cfg.ts_channels], 0.0, 1.0, &mut rng),
        plant: PlantMeta {
            plant_id: plant.into(),
            lat: 0.3,
            lon: -0.2,
            capacity: 1000.0,
        },
        t0: 24,
    }
}

/// Full-model gradient check. The forward pass quantizes with plans frozen
/// at the base point, so the finite differences probe exactly the function
/// the straight-through estimator defines (codes and indices held fixed,
/// gradients copied through the quantizer). Returns (worst gap, checked
/// coordinate count).
pub fn model_fd_check(cfg: &ModelConfig, seed: u64) -> (f64, usize) {
    let mut net = FusionNet::new(cfg, seed).expect("net");
    let ws: Vec<SampleWindow> = (0..2).map(|i| fake_window(seed * 1000 + i, cfg, "p")).collect();
    let refs: Vec<&SampleWindow> = ws.iter().collect();
    let batch = Batch::from_windows(&refs, cfg).expect("batch");
    let mut warm_rng = SeedTree::new(seed).child("warm").rng();
    net.warm_start_vq(&batch, &mut warm_rng).expect("warm start");

    // base pass: record plans, compute analytic gradients of the full loss
    let mut tape = Tape::new();
    let mut rng = SeedTree::new(0).rng();
    let (out, lifted) = net
        .forward_traced(&mut tape, &batch, true, &mut rng, PlanSource::Fresh)
        .expect("forward");
    let y = tape.constant(batch.y.clone());
    let diff = tape.sub(out.y_hat, y).unwrap();
    let sq = tape.mul(diff, diff).unwrap();
    let mse = tape.mean_all(sq).unwrap();
    let commit_w = tape.scale(out.commit, cfg.vq_commit_weight).unwrap();
    let loss = tape.add(mse, commit_w).unwrap();
    tape.backward(loss).expect("backward");
    let grads = collect_grads(&tape, &lifted);
    let plans = out.plans;

    let eval_loss = |net: &FusionNet| -> f64 {
        let mut t = Tape::new();
        let mut r = SeedTree::new(0).rng();
        let (o, _) = net
            .forward_traced(&mut t, &batch, true, &mut r, PlanSource::Reuse(&plans))
            .expect("fd forward");
        let y = t.constant(batch.y.clone());
        let d = t.sub(o.y_hat, y).unwrap();
        let s = t.mul(d, d).unwrap();
        let m = t.mean_all(s).unwrap();
        let cw = t.scale(o.commit, cfg.vq_commit_weight).unwrap();
        let l = t.add(m, cw).unwrap();
        t.data(l)[0]
    };

    let mut worst = 0.0_f64;
    let mut checked = 0usize;
    for id in 0..net.store.len() {
        let n = net.store.value(id).data.len();
        for ci in 0..n {
            let orig = net.store.value(id).data[ci];
            net.store.value_mut(id).data[ci] = orig + FD_H;
            let plus = eval_loss(&net);
            net.store.value_mut(id).data[ci] = orig - FD_H;
            let minus = eval_loss(&net);
            net.store.value_mut(id).data[ci] = orig;
            let numeric = (plus - minus) / (2.0 * FD_H);
            let analytic = grads[id].as_ref().map_or(0.0, |g| g[ci]);
            let gap = fd_gap(analytic, numeric);
            assert!(
                gap < FD_REL_TOL,
                "model fd: param {} coord {ci}: analytic {analytic} vs numeric {numeric} (gap {gap:.3e})",
                net.store.name(id)
            );
            worst = worst.max(gap);
            checked += 1;
        }
    }
    (worst, checked)
}
