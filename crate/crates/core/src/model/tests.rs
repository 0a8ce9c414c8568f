use super::*;
use crate::tensor::{finite_diff_check_f64, Graph, Mode, Rng, StreamLabel, Tensor};
use proptest::prelude::*;

fn small() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        enc_depth: 2,
        dec_depth: 2,
        heads: 2,
        mlp_ratio: 2,
        patch_side: 3,
        image_side: 6,
        dropout_p: 0.1,
        n_classes: 5,
        mask_ratio: 0.5,
        alpha: 0.1,
    }
}

fn random_tensor(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

/// Perturbs every parameter so norms and biases are non-trivial.
fn jitter(p: &mut ModelParams<Tensor<f64>>, seed: u64) {
    let mut rng = Rng::new(seed, StreamLabel::Init);
    p.for_each_mut(|_, t| t.data_mut().iter_mut().for_each(|v| *v += 0.3 * rng.normal()));
}

// ---- direct-formula oracle ------------------------------------------------

fn o_linear(x: &[Vec<f64>], l: &Linear<Tensor<f64>>) -> Vec<Vec<f64>> {
    let (fi, fo) = (l.weight.shape()[0], l.weight.shape()[1]);
    let w = l.weight.data();
    x.iter()
        .map(|row| {
            (0..fo)
                .map(|j| {
                    let b = l.bias.as_ref().map_or(0.0, |b| b.data()[j]);
                    b + (0..fi).map(|i| row[i] * w[i * fo + j]).sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn o_norm(x: &[Vec<f64>], n: &Norm<Tensor<f64>>) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mu = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + LN_EPS).sqrt() * n.gamma.data()[i] + n.beta.data()[i])
                .collect()
        })
        .collect()
}

fn o_add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// One sample `[T, D]` through a block in eval mode.
fn o_block(x: &[Vec<f64>], p: &Block<Tensor<f64>>, heads: usize) -> Vec<Vec<f64>> {
    let t = x.len();
    let d = x[0].len();
    let hd = d / heads;
    let h = o_norm(x, &p.ln1);
    let qkv = o_linear(&h, &p.qkv);
    let mut mixed = vec![vec![0.0; d]; t];
    for head in 0..heads {
        let q = |i: usize, c: usize| qkv[i][head * hd + c];
        let k = |i: usize, c: usize| qkv[i][d + head * hd + c];
        let v = |i: usize, c: usize| qkv[i][2 * d + head * hd + c];
        for i in 0..t {
            let s: Vec<f64> = (0..t)
                .map(|j| (0..hd).map(|c| q(i, c) * k(j, c)).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..hd {
                mixed[i][head * hd + c] = (0..t).map(|j| e[j] / z * v(j, c)).sum();
            }
        }
    }
    let x = o_add(x, &o_linear(&mixed, &p.attn_out));
    let h = o_norm(&x, &p.ln2);
    let h: Vec<Vec<f64>> = o_linear(&h, &p.mlp1)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    o_add(&x, &o_linear(&h, &p.mlp2))
}

fn rows(t: &Tensor<f64>, sample: usize) -> Vec<Vec<f64>> {
    let s = t.shape();
    let (n, d) = (s[1], s[2]);
    (0..n).map(|i| t.data()[(sample * n + i) * d..(sample * n + i + 1) * d].to_vec()).collect()
}

fn flat(r: &[Vec<f64>]) -> Vec<f64> {
    r.iter().flatten().copied().collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- init and parameter tree ----------------------------------------------

#[test]
fn init_norms_and_bounds() {
    let cfg = ModelConfig::default();
    let p = init_params::<f32>(&cfg, Stage::Pretrain, &mut Rng::new(0, StreamLabel::Init));
    for (info, t) in p.entries() {
        match info.kind {
            ParamKind::NormGamma => assert!(t.data().iter().all(|&v| v == 1.0), "{}", info.name),
            ParamKind::NormBeta => assert!(t.data().iter().all(|&v| v == 0.0), "{}", info.name),
            _ => {}
        }
    }
    let bound = 1.0 / 27f32.sqrt();
    let pe = p.encoder.patch_embed.weight.data();
    assert!(pe.iter().all(|v| v.abs() <= bound));
    assert!(pe.iter().any(|v| v.abs() > 0.9 * bound));
    let b = &p.encoder.blocks[0].mlp2;
    let hb = 1.0 / 384f32.sqrt();
    assert!(b.weight.data().iter().chain(b.bias.as_ref().unwrap().data()).all(|v| v.abs() <= hb));
    let pos = p.encoder.pos.data();
    let std = (pos.iter().map(|v| (v * v) as f64).sum::<f64>() / pos.len() as f64).sqrt();
    assert!((std - 0.02).abs() < 0.001, "pos std {std}");
}

#[test]
fn init_is_deterministic() {
    let cfg = small();
    let a = init_params::<f32>(&cfg, Stage::Pretrain, &mut Rng::new(9, StreamLabel::Init));
    let b = init_params::<f32>(&cfg, Stage::Pretrain, &mut Rng::new(9, StreamLabel::Init));
    let c = init_params::<f32>(&cfg, Stage::Pretrain, &mut Rng::new(10, StreamLabel::Init));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn bias_only_inside_blocks_and_head() {
    let p = init_params::<f32>(&small(), Stage::Pretrain, &mut Rng::new(0, StreamLabel::Init));
    assert!(p.encoder.patch_embed.bias.is_none());
    assert!(p.encoder.proj.bias.is_none());
    assert!(p.decoder.as_ref().unwrap().proj.bias.is_none());
    let f = init_params::<f32>(&small(), Stage::Finetune, &mut Rng::new(0, StreamLabel::Init));
    assert!(f.head.as_ref().unwrap().bias.is_some());
    assert!(f.decoder.is_none());
    for (info, _) in p.entries() {
        if info.kind == ParamKind::Bias {
            assert!(info.name.contains(".blocks."), "{}", info.name);
        }
    }
}

#[test]
fn names_unique_and_orders_agree() {
    let mut p = init_params::<f32>(&small(), Stage::Pretrain, &mut Rng::new(0, StreamLabel::Init));
    let names: Vec<String> = p.entries().into_iter().map(|(i, _)| i.name).collect();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    let mut_names: Vec<String> = p.entries_mut().into_iter().map(|(i, _)| i.name).collect();
    assert_eq!(names, mut_names);
}

#[test]
fn layerwise_groups_cover_encoder_and_head() {
    let cfg = ModelConfig::default();
    let p = init_params::<f32>(&cfg, Stage::Finetune, &mut Rng::new(0, StreamLabel::Init));
    assert_eq!(p.group_count(), 15);
    for (info, _) in p.entries() {
        let g = info.group.unwrap();
        let expected = if info.name.starts_with("encoder.patch_embed") || info.name == "encoder.pos" {
            0
        } else if let Some(rest) = info.name.strip_prefix("encoder.blocks.") {
            rest.split('.').next().unwrap().parse::<usize>().unwrap() + 1
        } else if info.name.starts_with("head") {
            14
        } else {
            13
        };
        assert_eq!(g, expected, "{}", info.name);
    }
}

#[test]
fn finetune_param_count() {
    let cfg = ModelConfig::default();
    let c = count_params(&cfg, Stage::Finetune);
    assert_eq!(block_params(&cfg), 297_024);
    assert_eq!(c.get("encoder.blocks"), Some(3_564_288));
    assert_eq!(c.get("encoder.patch_embed"), Some(5_184));
    assert_eq!(c.get("encoder.pos"), Some(27_840));
    assert_eq!(c.get("encoder.norm"), Some(384));
    assert_eq!(c.get("encoder.proj"), Some(36_864));
    assert_eq!(c.get("head"), Some(1_930));
    assert_eq!(c.total(), 3_636_490);
    assert_eq!((c.total() as f64 / 1e4).round() / 100.0, REFERENCE_PARAMS_M);
    let c100 = ModelConfig {
        n_classes: 100,
        ..cfg.clone()
    };
    assert_eq!(count_params(&c100, Stage::Finetune).total() - c.total(), 17_370);
}

#[test]
fn analytic_count_matches_built_tensors() {
    for cfg in [ModelConfig::default(), small(), ModelConfig { n_classes: 100, ..Default::default() }] {
        for stage in [Stage::Pretrain, Stage::Finetune] {
            let p = init_params::<f32>(&cfg, stage, &mut Rng::new(1, StreamLabel::Init));
            assert_eq!(p.numel() as u64, count_params(&cfg, stage).total());
        }
    }
}

#[test]
fn degenerate_count() {
    let cfg = ModelConfig {
        enc_depth: 0,
        ..small()
    };
    let c = count_params(&cfg, Stage::Finetune);
    let core = c.get("encoder.patch_embed").unwrap() + c.get("encoder.pos").unwrap();
    assert_eq!(core, 27 * 8 + 5 * 8);
    assert_eq!(c.get("encoder.blocks"), Some(0));
}

// ---- cost model ----------------------------------------------------------

#[test]
fn block_macs_single_token() {
    let cfg = ModelConfig::default();
    assert_eq!(block_macs(&cfg, 1, MacConvention::Full), 295_296);
    assert_eq!(block_macs(&cfg, 1, MacConvention::LinearOnly), 295_296 - 2 * 192);
}

/// Independent tally: enumerate every matrix product as (rows, inner, cols).
fn spreadsheet_macs(cfg: &ModelConfig, t: u64, full: bool) -> u64 {
    let d = cfg.embed_dim as u64;
    let hd = cfg.head_dim() as u64;
    let mut products: Vec<(u64, u64, u64)> = vec![(t, 27, d)];
    for _ in 0..cfg.enc_depth {
        products.push((t, d, 3 * d));
        if full {
            for _ in 0..cfg.heads {
                products.push((t, hd, t));
                products.push((t, t, hd));
            }
        }
        products.push((t, d, d));
        products.push((t, d, 2 * d));
        products.push((t, 2 * d, d));
    }
    products.push((t, d, d));
    products.push((1, d, cfg.n_classes as u64));
    products.iter().map(|(m, k, n)| m * k * n).sum()
}

#[test]
fn finetune_macs_double_entry() {
    let cfg = ModelConfig::default();
    let full = count_macs(&cfg, Stage::Finetune, 145, MacConvention::Full).total();
    let lin = count_macs(&cfg, Stage::Finetune, 145, MacConvention::LinearOnly).total();
    assert_eq!(full, spreadsheet_macs(&cfg, 145, true));
    assert_eq!(lin, spreadsheet_macs(&cfg, 145, false));
    assert_eq!(full, 616_128_960);
    assert!((full as f64 / 1e9 - REFERENCE_MACS_G).abs() > 0.3);
    let report = inspect_report(&cfg);
    assert!(report.contains("3636490"));
    assert!(report.contains("discrepancy"));
    assert!(report.contains("linear_only"));
}

#[test]
fn mac_convention_parse() {
    assert_eq!("full".parse::<MacConvention>().unwrap(), MacConvention::Full);
    assert_eq!("linear_only".parse::<MacConvention>().unwrap(), MacConvention::LinearOnly);
    assert!(matches!("flops".parse::<MacConvention>(), Err(ModelError::UnknownConvention(_))));
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    assert!(ModelConfig { heads: 5, ..Default::default() }.validate().is_err());
    assert!(ModelConfig { patch_side: 5, ..Default::default() }.validate().is_err());
    assert!(ModelConfig { mask_ratio: 1.0, ..Default::default() }.validate().is_err());
    assert!(ModelConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
    assert_eq!(ModelConfig::default().n_tokens(), 145);
}

// ---- forward passes ------------------------------------------------------

#[test]
fn single_token_attention_is_one() {
    let cfg = ModelConfig::default();
    let p = init_params::<f32>(&cfg, Stage::Finetune, &mut Rng::new(0, StreamLabel::Init));
    let mut g = Graph::<f32>::new();
    let v = bind(&mut g, &p);
    let x = g.constant(&[2, 1, 192], vec![0.5; 384]).unwrap();
    let mut fwd = Fwd::eval().with_probe();
    block_forward(&mut g, x, &v.encoder.blocks[0], &cfg, &mut fwd).unwrap();
    let probs = g.attention_probs(fwd.attn_probe.unwrap()[0]).unwrap();
    assert_eq!(probs.shape(), &[2, 3, 1, 1]);
    assert!(probs.data().iter().all(|&a| a == 1.0));
}

#[test]
fn zero_block_is_identity() {
    let cfg = small();
    let mut p = init_params::<f64>(&cfg, Stage::Pretrain, &mut Rng::new(0, StreamLabel::Init));
    for b in p.encoder.blocks.iter_mut() {
        for l in [&mut b.qkv, &mut b.attn_out, &mut b.mlp1, &mut b.mlp2] {
            l.weight.data_mut().fill(0.0);
            l.bias.as_mut().unwrap().data_mut().fill(0.0);
        }
    }
    let mut g = Graph::<f64>::new();
    let v = bind(&mut g, &p);
    let x_t = random_tensor(&[2, 5, 8], &mut Rng::new(1, StreamLabel::Init), 1.0);
    let x = g.leaf(x_t.clone());
    let mut fwd = Fwd::eval();
    let mut y = x;
    for b in &v.encoder.blocks {
        y = block_forward(&mut g, y, b, &cfg, &mut fwd).unwrap();
    }
    assert_eq!(g.value(y), x_t.data());
}

#[test]
fn block_matches_direct_oracle() {
    let cfg = small();
    let mut p = init_params::<f64>(&cfg, Stage::Pretrain, &mut Rng::new(3, StreamLabel::Init));
    jitter(&mut p, 4);
    for t in [1, 2, 7] {
        let x_t = random_tensor(&[2, t, 8], &mut Rng::new(5, StreamLabel::Init), 1.0);
        let mut g = Graph::<f64>::new();
        let v = bind(&mut g, &p);
        let x = g.leaf(x_t.clone());
        let y = block_forward(&mut g, x, &v.encoder.blocks[0], &cfg, &mut Fwd::eval()).unwrap();
        let expected: Vec<f64> = (0..2).flat_map(|b| flat(&o_block(&rows(&x_t, b), &p.encoder.blocks[0], 2))).collect();
        assert!(max_diff(g.value(y), &expected) < 1e-12, "T={t}");
    }
}

#[test]
fn decoder_matches_direct_oracle() {
    let cfg = small();
    let mut p = init_params::<f64>(&cfg, Stage::Pretrain, &mut Rng::new(6, StreamLabel::Init));
    jitter(&mut p, 7);
    let n = cfg.n_tokens();
    let x_t = random_tensor(&[2, n, 8], &mut Rng::new(8, StreamLabel::Init), 1.0);
    let mut g = Graph::<f64>::new();
    let v = bind(&mut g, &p);
    let x = g.leaf(x_t.clone());
    let y = decoder_forward(&mut g, x, v.decoder.as_ref().unwrap(), &cfg, &mut Fwd::eval()).unwrap();
    assert_eq!(g.shape(y), &[2, n, 27]);
    let dec = p.decoder.as_ref().unwrap();
    let expected: Vec<f64> = (0..2)
        .flat_map(|b| {
            let mut r = rows(&x_t, b);
            for blk in &dec.blocks {
                r = o_block(&r, blk, 2);
            }
            flat(&o_linear(&o_norm(&r, &dec.norm), &dec.proj))
        })
        .collect();
    assert!(max_diff(g.value(y), &expected) < 1e-12);
}

#[test]
fn zero_decoder_gives_zero_output() {
    let cfg = small();
    let mut p = init_params::<f32>(&cfg, Stage::Pretrain, &mut Rng::new(0, StreamLabel::Init));
    let dec = p.decoder.as_mut().unwrap();
    dec.proj.weight.data_mut().fill(0.0);
    let mut g = Graph::<f32>::new();
    let v = bind(&mut g, &p);
    let x = g.constant(&[1, 5, 8], (0..40).map(|i| i as f32).collect()).unwrap();
    let y = decoder_forward(&mut g, x, v.decoder.as_ref().unwrap(), &cfg, &mut Fwd::eval()).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn dummy_embedding_is_its_position() {
    let cfg = ModelConfig::default();
    let p = init_params::<f32>(&cfg, Stage::Pretrain, &mut Rng::new(2, StreamLabel::Init));
    let mut g = Graph::<f32>::new();
    let v = bind(&mut g, &p);
    let mut data: Vec<f32> = (0..37 * 27).map(|i| (i % 11) as f32 * 0.1 - 0.5).collect();
    data[36 * 27..].fill(0.0);
    let tokens = g.constant(&[1, 37, 27], data).unwrap();
    let idx = vec![(0..36).map(|i| i * 4).chain([144]).collect::<Vec<_>>()];
    let e = embed_tokens(&mut g, tokens, &idx, &v.encoder).unwrap();
    assert_eq!(&g.value(e)[36 * 192..], &p.encoder.pos.data()[144 * 192..]);
    let out = encoder_forward(&mut g, tokens, &idx, &v.encoder, &cfg, &mut Fwd::eval()).unwrap();
    assert_eq!(g.shape(out), &[1, 37, 192]);
}

#[test]
fn encoder_index_out_of_range() {
    let cfg = small();
    let p = init_params::<f32>(&cfg, Stage::Pretrain, &mut Rng::new(0, StreamLabel::Init));
    let mut g = Graph::<f32>::new();
    let v = bind(&mut g, &p);
    let tokens = g.constant(&[1, 2, 27], vec![0.0; 54]).unwrap();
    let r = encoder_forward(&mut g, tokens, &[vec![0, 99]], &v.encoder, &cfg, &mut Fwd::eval());
    assert!(r.is_err());
}

#[test]
fn attention_rows_sum_to_one_in_every_layer() {
    let cfg = ModelConfig::default();
    let p = init_params::<f32>(&cfg, Stage::Pretrain, &mut Rng::new(3, StreamLabel::Init));
    let mut rng = Rng::new(4, StreamLabel::Mask);
    let seq = Tensor::new(&[2, 145, 27], (0..2 * 145 * 27).map(|_| rng.normal() as f32).collect()).unwrap();
    let plan = crate::patch::sample_mask(2, 144, 0.75, &mut rng).unwrap();
    let mut g = Graph::<f32>::new();
    let v = bind(&mut g, &p);
    let mut fwd = Fwd::train(Rng::new(0, StreamLabel::Dropout)).with_probe();
    let pred = mae_forward(&mut g, &seq, &plan, &v, &cfg, &mut fwd).unwrap();
    assert_eq!(g.shape(pred), &[2, 145, 27]);
    let probes = fwd.attn_probe.unwrap();
    assert_eq!(probes.len(), 16);
    for a in probes {
        let probs = g.attention_probs(a).unwrap();
        let t = *probs.shape().last().unwrap();
        for row in probs.data().chunks(t) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn classify_shapes_and_head_bias() {
    let cfg = ModelConfig::default();
    let mut p = init_params::<f32>(&cfg, Stage::Finetune, &mut Rng::new(5, StreamLabel::Init));
    let mut rng = Rng::new(6, StreamLabel::Init);
    let data: Vec<f32> = (0..2 * 145 * 27).map(|_| rng.normal() as f32).collect();
    let run = |p: &ModelParams<Tensor<f32>>| {
        let mut g = Graph::<f32>::new();
        let v = bind(&mut g, p);
        let x = g.constant(&[2, 145, 27], data.clone()).unwrap();
        let y = classify_forward(&mut g, x, &v, &cfg, &mut Fwd::eval()).unwrap();
        assert_eq!(g.shape(y), &[2, 10]);
        g.value(y).to_vec()
    };
    let a = run(&p);
    assert_eq!(a, run(&p));
    let head = p.head.as_mut().unwrap();
    head.weight.data_mut().fill(0.0);
    let bias: Vec<f32> = (0..10).map(|i| i as f32 - 4.5).collect();
    head.bias.as_mut().unwrap().data_mut().copy_from_slice(&bias);
    let b = run(&p);
    assert_eq!(&b[..10], &bias[..]);
    assert_eq!(&b[10..], &bias[..]);
}

#[test]
fn dropout_only_changes_training_pass() {
    let cfg = small();
    let p = init_params::<f32>(&cfg, Stage::Finetune, &mut Rng::new(5, StreamLabel::Init));
    let run = |mode: Mode, seed: u64| {
        let mut g = Graph::<f32>::new();
        let v = bind(&mut g, &p);
        let x = g.constant(&[1, 5, 27], (0..135).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let mut fwd = Fwd {
            mode,
            rng: Rng::new(seed, StreamLabel::Dropout),
            attn_probe: None,
        };
        let y = classify_forward(&mut g, x, &v, &cfg, &mut fwd).unwrap();
        g.value(y).to_vec()
    };
    assert_eq!(run(Mode::Eval, 1), run(Mode::Eval, 2));
    assert_eq!(run(Mode::Train, 1), run(Mode::Train, 1));
    assert_ne!(run(Mode::Train, 1), run(Mode::Train, 2));
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        dropout_p: 0.0,
        ..small()
    };
    let mut p = init_params::<f64>(&cfg, Stage::Finetune, &mut Rng::new(11, StreamLabel::Init));
    jitter(&mut p, 12);
    let x = random_tensor(&[2, 5, 27], &mut Rng::new(13, StreamLabel::Init), 1.0);
    let report = finite_diff_check_f64(
        |g, x| {
            let v = bind(g, &p);
            let logits = classify_forward(g, x, &v, &cfg, &mut Fwd::eval())?;
            g.cross_entropy(logits, &[1, 3])
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoder_is_permutation_equivariant(seed in 0u64..1000, swaps in proptest::collection::vec((0usize..5, 0usize..5), 1..6)) {
        let cfg = small();
        let p = init_params::<f64>(&cfg, Stage::Pretrain, &mut Rng::new(seed, StreamLabel::Init));
        let x = random_tensor(&[1, 5, 27], &mut Rng::new(seed + 1, StreamLabel::Init), 1.0);
        let idx: Vec<usize> = vec![3, 0, 4, 1, 2];
        let mut perm: Vec<usize> = (0..5).collect();
        for (a, b) in swaps {
            perm.swap(a, b);
        }
        let run = |order: &[usize]| {
            let mut g = Graph::<f64>::new();
            let v = bind(&mut g, &p);
            let data: Vec<f64> = order.iter().flat_map(|&r| x.data()[r * 27..(r + 1) * 27].to_vec()).collect();
            let t = g.constant(&[1, 5, 27], data).unwrap();
            let ids = vec![order.iter().map(|&r| idx[r]).collect::<Vec<_>>()];
            let y = encoder_forward(&mut g, t, &ids, &v.encoder, &cfg, &mut Fwd::eval()).unwrap();
            g.value(y).to_vec()
        };
        let base = run(&[0, 1, 2, 3, 4]);
        let permuted = run(&perm);
        for (j, &r) in perm.iter().enumerate() {
            for c in 0..8 {
                prop_assert!((permuted[j * 8 + c] - base[r * 8 + c]).abs() < 1e-5);
            }
        }
    }
}
