use super::*;
use crate::model::{init_params, ModelConfig, Stage};
use crate::patch::{sample_mask, MaskPlan};
use crate::tensor::{Graph, Rng, StreamLabel, Tensor};
use proptest::prelude::*;

fn plan(masked: Vec<Vec<usize>>, n: usize) -> MaskPlan {
    let visible = masked.iter().map(|m| (0..n).filter(|i| !m.contains(i)).collect()).collect();
    MaskPlan {
        n_patches: n,
        visible,
        masked,
    }
}

fn loss_value(pred: &Tensor<f64>, target: &Tensor<f64>, p: &MaskPlan, alpha: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let v = g.leaf(pred.clone());
    let l = mae_loss(&mut g, v, target, p, alpha).unwrap();
    g.scalar(l)
}

#[test]
fn toy_loss_value() {
    let p = plan(vec![vec![0]], 2);
    let pred = Tensor::new(&[1, 2, 1], vec![1.0, 1.0]).unwrap();
    let target = Tensor::zeros(&[1, 2, 1]);
    assert!((loss_value(&pred, &target, &p, 0.1) - 1.1).abs() < 1e-15);
    assert_eq!(loss_value(&target, &target, &p, 0.1), 0.0);
    assert!((loss_value(&pred, &target, &p, 0.0) - 1.0).abs() < 1e-15);
}

#[test]
fn loss_ignores_dummy_row() {
    let p = plan(vec![vec![1]], 2);
    let pred = Tensor::new(&[1, 3, 1], vec![0.0, 2.0, 100.0]).unwrap();
    let target = Tensor::zeros(&[1, 2, 1]);
    assert!((loss_value(&pred, &target, &p, 0.5) - 4.0).abs() < 1e-15);
}

#[test]
fn loss_rejects_mismatched_plan() {
    let p = plan(vec![vec![0]], 2);
    let mut g = Graph::<f64>::new();
    let v = g.leaf(Tensor::zeros(&[1, 3, 1]));
    assert!(mae_loss(&mut g, v, &Tensor::zeros(&[1, 3, 1]), &p, 0.1).is_err());
}

#[test]
fn patch_mse_agrees_with_loss() {
    let mut rng = Rng::new(3, StreamLabel::Mask);
    let p = sample_mask(3, 16, 0.75, &mut rng).unwrap();
    let pred = Tensor::new(&[3, 16, 4], (0..192).map(|_| rng.normal()).collect()).unwrap();
    let target = Tensor::new(&[3, 16, 4], (0..192).map(|_| rng.normal()).collect()).unwrap();
    let (m, v) = patch_mse(pred.data(), target.data(), &p, 4);
    assert!((loss_value(&pred, &target, &p, 0.3) - (m + 0.3 * v)).abs() < 1e-12);
}

#[test]
fn cross_entropy_values() {
    let mut g = Graph::<f64>::new();
    let l = g.constant(&[2, 10], vec![0.0; 20]).unwrap();
    let ce = cross_entropy(&mut g, l, &[0, 9]).unwrap();
    assert!((g.scalar(ce) - 10f64.ln()).abs() < 1e-12);
    let mut logits = vec![0.0; 10];
    logits[0] = 1000.0;
    let l = g.constant(&[1, 10], logits).unwrap();
    let ce = cross_entropy(&mut g, l, &[0]).unwrap();
    assert!(g.scalar(ce).abs() < 1e-12);
    let l = g.constant(&[1, 10], vec![0.0; 10]).unwrap();
    assert!(cross_entropy(&mut g, l, &[10]).is_err());
    assert!(cross_entropy(&mut g, l, &[0, 1]).is_err());
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut rng = Rng::new(8, StreamLabel::Init);
    let (b, c) = (5, 7);
    let logits: Vec<f64> = (0..b * c).map(|_| 3.0 * rng.normal()).collect();
    let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
    let mut expected = 0.0;
    for (row, &y) in logits.chunks(c).zip(&labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expected -= (row[y].exp() / z).ln();
    }
    expected /= b as f64;
    let mut g = Graph::<f64>::new();
    let l = g.constant(&[b, c], logits).unwrap();
    let ce = cross_entropy(&mut g, l, &labels).unwrap();
    assert!((g.scalar(ce) - expected).abs() < 1e-10);
}

fn hyper(wd: f64) -> AdamHyper {
    AdamHyper {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: wd,
    }
}

#[test]
fn adamw_single_step() {
    let (mut th, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
    adam_kernel(&mut th, &[1.0], &mut m, &mut v, 1, 0.1, 0.05, &hyper(0.05));
    let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.1 * 0.05;
    assert!((th[0] - expected).abs() < 1e-15);
    assert!((th[0] - 0.895).abs() < 1e-8);

    let (mut th, mut m, mut v) = ([0.7f64], [0.0], [0.0]);
    adam_kernel(&mut th, &[0.0], &mut m, &mut v, 1, 0.1, 0.0, &hyper(0.0));
    assert_eq!(th[0], 0.7);
}

/// Reference AdamW for one scalar, written from the update equations.
fn reference_adamw(theta0: f64, steps: usize, lr: f64, wd: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
    let mut out = Vec::new();
    for t in 1..=steps {
        let g = 2.0 * th;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        th -= lr * wd * th;
        th -= lr * mh / (vh.sqrt() + eps);
        out.push(th);
    }
    out
}

#[test]
fn adamw_matches_scalar_reference_on_square() {
    let expected = reference_adamw(1.5, 3, 0.05, 0.05);
    let (mut th, mut m, mut v) = ([1.5f64], [0.0], [0.0]);
    for (t, e) in expected.iter().enumerate() {
        let g = [2.0 * th[0]];
        adam_kernel(&mut th, &g, &mut m, &mut v, t as u64 + 1, 0.05, 0.05, &hyper(0.05));
        assert!((th[0] - e).abs() < 1e-12);
    }
}

#[test]
fn adamw_step_exempts_norms_and_biases() {
    let cfg = ModelConfig {
        embed_dim: 4,
        enc_depth: 1,
        heads: 1,
        image_side: 3,
        ..Default::default()
    };
    let mut p = init_params::<f64>(&cfg, Stage::Finetune, &mut Rng::new(0, StreamLabel::Init));
    let before = p.clone();
    let zeros: Vec<Vec<f64>> = p.entries().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let grads: Vec<&[f64]> = zeros.iter().map(|z| z.as_slice()).collect();
    let mut st = OptState::new(&p);
    adamw_step(&mut p, &grads, &mut st, 0.1, |_| 1.0, &hyper(0.5)).unwrap();
    assert_eq!(st.t, 1);
    for ((info, a), (_, b)) in p.entries().iter().zip(before.entries()) {
        if info.decays() {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y * 0.95).abs() < 1e-15, "{}", info.name);
            }
        } else {
            assert_eq!(a.data(), b.data(), "{}", info.name);
        }
    }
    let short = &grads[..grads.len() - 1];
    assert!(adamw_step(&mut p, short, &mut st, 0.1, |_| 1.0, &hyper(0.5)).is_err());
}

proptest! {
    #[test]
    fn adamw_without_decay_is_adam(theta in -3.0f64..3.0, grads in proptest::collection::vec(-2.0f64..2.0, 1..6), lr in 1e-4f64..0.1) {
        let (mut a, mut ma, mut va) = ([theta], [0.0], [0.0]);
        let (mut b, mut mb, mut vb) = ([theta], [0.0], [0.0]);
        for (t, g) in grads.iter().enumerate() {
            adam_kernel(&mut a, &[*g], &mut ma, &mut va, t as u64 + 1, lr, 0.0, &hyper(0.05));
            // Plain Adam.
            mb[0] = 0.9 * mb[0] + 0.1 * g;
            vb[0] = 0.999 * vb[0] + 0.001 * g * g;
            let mh = mb[0] / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = vb[0] / (1.0 - 0.999f64.powi(t as i32 + 1));
            b[0] -= lr * mh / (vh.sqrt() + 1e-8);
        }
        prop_assert!((a[0] - b[0]).abs() < 1e-12);
    }

    #[test]
    fn mae_loss_monotone_in_alpha(seed in 0u64..500, a1 in 0.0f64..2.0, a2 in 0.0f64..2.0) {
        let mut rng = Rng::new(seed, StreamLabel::Mask);
        let p = sample_mask(2, 9, 0.5, &mut rng).unwrap();
        let pred = Tensor::new(&[2, 9, 3], (0..54).map(|_| rng.normal()).collect()).unwrap();
        let target = Tensor::new(&[2, 9, 3], (0..54).map(|_| rng.normal()).collect()).unwrap();
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        prop_assert!(loss_value(&pred, &target, &p, lo) <= loss_value(&pred, &target, &p, hi));
    }

    #[test]
    fn schedule_is_bounded(step in 0u64..20_000, spe in 1usize..50, min_frac in 0.0f64..1.0) {
        let r = Recipe { total_epochs: 100, warmup_epochs: 10, min_lr_fraction: min_frac, ..Recipe::pretrain() };
        let lr = lr_at(step, spe, &r);
        prop_assert!(lr >= 0.0);
        prop_assert!(lr <= r.peak_lr() * (1.0 + 1e-12));
    }
}

#[test]
fn schedule_anchor_points() {
    let pre = Recipe::pretrain();
    let spe = 7;
    let warm = (pre.warmup_epochs * spe) as u64;
    let total = (pre.total_epochs * spe) as u64;
    assert_eq!(lr_at(0, spe, &pre), 0.0);
    assert_eq!(lr_at(warm, spe, &pre), pre.peak_lr());
    assert!((pre.peak_lr() - 8.25e-4).abs() <= 8.25e-4 * f64::EPSILON);
    let ft = Recipe::finetune();
    assert_eq!(ft.peak_lr(), 3.0e-3);
    assert_eq!(lr_at((ft.warmup_epochs * spe) as u64, spe, &ft), 3.0e-3);
    let mid = (warm + total) / 2;
    assert!((lr_at(mid, spe, &pre) - 0.5 * pre.peak_lr()).abs() < 1e-15);
    assert!(lr_at(total, spe, &pre).abs() < 1e-12);
    let floor = Recipe {
        min_lr_fraction: 0.2,
        ..pre.clone()
    };
    assert!((lr_at(total, spe, &floor) - 0.2 * floor.peak_lr()).abs() < 1e-12);
    assert!((lr_at(mid, spe, &floor) - 0.6 * floor.peak_lr()).abs() < 1e-15);
    let w = warm as f64;
    assert!((lr_at_time(w - 1e-9, spe, &pre) - lr_at_time(w, spe, &pre)).abs() < 1e-12);
}

#[test]
fn layerwise_multipliers() {
    let f = layerwise_factors(15, 0.75);
    assert_eq!(f[14], 1.0);
    assert_eq!(f[12], 0.75 * 0.75);
    assert!((f[0] - 0.75f64.powi(14)).abs() < 1e-15);
    assert!((f[0] - 0.0178).abs() < 1e-4);
    assert!(f.windows(2).all(|w| w[0] < w[1]));
    assert!(f.iter().all(|&x| x > 0.0 && x <= 1.0));
}

#[test]
fn recipe_validation() {
    assert!(Recipe::pretrain().validate().is_ok());
    assert!(Recipe::finetune().validate().is_ok());
    assert!(Recipe { warmup_epochs: 4000, ..Recipe::pretrain() }.validate().is_err());
    assert!(Recipe { base_lr: 0.0, ..Recipe::pretrain() }.validate().is_err());
}
