use super::*;

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
}

fn approx_slice(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn matmul_identity_and_dot() {
    let mut g = Graph::<f64>::new();
    let i = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = g.constant(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c), &[3.0, 4.0, 5.0, 6.0]);

    let r = g.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
    let col = g.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
    let d = g.matmul(r, col).unwrap();
    assert_eq!(g.value(d), &[11.0]);
    assert_eq!(g.shape(d), &[1, 1]);
}

fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(1, StreamLabel::Init);
    let a = rand_tensor(&mut rng, &[4, 5]);
    let b = rand_tensor(&mut rng, &[5, 6]);
    let expected = triple_loop(a.data(), b.data(), 4, 5, 6);
    let mut g = Graph::<f64>::new();
    let (va, vb) = (g.leaf(a), g.leaf(b));
    let c = g.matmul(va, vb).unwrap();
    approx_slice(g.value(c), &expected, 1e-6);
}

#[test]
fn batched_matmul_broadcasts_leading_dims() {
    let mut rng = Rng::new(2, StreamLabel::Init);
    let a = rand_tensor(&mut rng, &[2, 3, 4, 5]);
    let b = rand_tensor(&mut rng, &[3, 5, 2]);
    let mut g = Graph::<f64>::new();
    let (va, vb) = (g.leaf(a.clone()), g.leaf(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    assert_eq!(g.shape(c), &[2, 3, 4, 2]);
    for outer in 0..2 {
        for h in 0..3 {
            let ai = &a.data()[(outer * 3 + h) * 20..(outer * 3 + h + 1) * 20];
            let bi = &b.data()[h * 10..(h + 1) * 10];
            let got = &g.value(c)[(outer * 3 + h) * 8..(outer * 3 + h + 1) * 8];
            approx_slice(got, &triple_loop(ai, bi, 4, 5, 2), 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
    match g.matmul(a, b) {
        Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(&[2], vec![0.0, 0.0]).unwrap();
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5]);

    let x = g.constant(&[2], vec![1000.0, 0.0]).unwrap();
    let y = g.softmax(x, 0).unwrap();
    approx_slice(g.value(y), &[1.0, 0.0], 1e-6);

    let mut rng = Rng::new(3, StreamLabel::Init);
    let v = rand_tensor(&mut rng, &[7]);
    let denom: f64 = v.data().iter().map(|x| x.exp()).sum();
    let expected: Vec<f64> = v.data().iter().map(|x| x.exp() / denom).collect();
    let x = g.leaf(v);
    let y = g.softmax(x, 0).unwrap();
    approx_slice(g.value(y), &expected, 1e-12);
}

#[test]
fn softmax_rows_sum_to_one_on_any_axis() {
    let mut rng = Rng::new(4, StreamLabel::Init);
    let t = rand_tensor(&mut rng, &[3, 4, 5]).cast::<f32>();
    let mut g = Graph::<f32>::new();
    let x = g.leaf(t);
    let y = g.softmax(x, 1).unwrap();
    let v = g.value(y);
    for o in 0..3 {
        for i in 0..5 {
            let s: f32 = (0..4).map(|j| v[(o * 4 + j) * 5 + i]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let ones = g.constant(&[3], vec![1.0; 3]).unwrap();
    let zeros = g.constant(&[3], vec![0.0; 3]).unwrap();
    let x = g.constant(&[3], vec![5.0; 3]).unwrap();
    let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert_eq!(g.value(y), &[0.0, 0.0, 0.0]);

    let ones = g.constant(&[2], vec![1.0; 2]).unwrap();
    let zeros = g.constant(&[2], vec![0.0; 2]).unwrap();
    let x = g.constant(&[2], vec![1.0, 3.0]).unwrap();
    let y = g.layer_norm(x, ones, zeros, 1e-15).unwrap();
    approx_slice(g.value(y), &[-1.0, 1.0], 1e-9);

    assert!(g.layer_norm(x, ones, zeros, 0.0).is_err());
}

#[test]
fn layer_norm_moments() {
    let mut rng = Rng::new(5, StreamLabel::Init);
    let t = rand_tensor(&mut rng, &[3, 8]);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t);
    let ones = g.constant(&[8], vec![1.0; 8]).unwrap();
    let zeros = g.constant(&[8], vec![0.0; 8]).unwrap();
    let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
    for row in g.value(y).chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }
}

#[test]
fn relu_and_dropout() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
    let y = g.relu(x);
    assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);

    let mut rng = Rng::new(6, StreamLabel::Dropout);
    let same = g.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
    assert_eq!(g.value(same), g.value(x));
    let eval = g.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
    assert_eq!(g.value(eval), g.value(x));
    assert!(g.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
    assert!(g.dropout(x, -0.1, Mode::Train, &mut rng).is_err());

    let ones = g.constant(&[1_000_000], vec![1.0; 1_000_000]).unwrap();
    let d = g.dropout(ones, 0.1, Mode::Train, &mut rng).unwrap();
    let mean = g.value(d).iter().map(|&v| v as f64).sum::<f64>() / 1e6;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
}

#[test]
fn dropout_masks_are_reproducible() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&[1000], vec![1.0; 1000]).unwrap();
        let mut rng = Rng::new(99, StreamLabel::Dropout);
        let y = g.dropout(x, 0.1, Mode::Train, &mut rng).unwrap();
        g.value(y).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn gather_scatter_rows() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let all = g.gather_rows(x, &[0, 1, 2]).unwrap();
    assert_eq!(g.value(all), g.value(x));

    let zeros = g.constant(&[3, 2], vec![0.0; 6]).unwrap();
    let row = g.constant(&[1, 2], vec![7.0, 7.0]).unwrap();
    let s = g.scatter_rows(zeros, &[1], row).unwrap();
    assert_eq!(g.value(s), &[0.0, 0.0, 7.0, 7.0, 0.0, 0.0]);

    assert!(matches!(
        g.gather_rows(x, &[3]),
        Err(TensorError::IndexOutOfRange { index: 3, .. })
    ));
    let two = g.constant(&[2, 2], vec![0.0; 4]).unwrap();
    assert!(g.scatter_rows(zeros, &[1, 1], two).is_err());
}

#[test]
fn gather_then_scatter_with_inverse_indices_is_identity() {
    let mut rng = Rng::new(8, StreamLabel::Shuffle);
    let t = rand_tensor(&mut rng, &[10, 3]);
    let mut perm: Vec<usize> = (0..10).collect();
    rng.shuffle(&mut perm);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t.clone());
    let gathered = g.gather_rows(x, &perm).unwrap();
    let base = g.constant(&[10, 3], vec![0.0; 30]).unwrap();
    let back = g.scatter_rows(base, &perm, gathered).unwrap();
    assert_eq!(g.value(back), t.data());
}

#[test]
fn backward_simple_derivatives() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap().with_grad());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap().with_grad());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad());
    assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.backward(s), Err(TensorError::GraphConsumed));
}

#[test]
fn unreachable_params_get_zero_grad() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad());
    let unused = g.leaf(Tensor::new(&[4], vec![1.0; 4]).unwrap().with_grad());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(unused).unwrap(), &[0.0; 4]);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(&[1, 10], vec![0.0; 10]).unwrap();
    let l = g.cross_entropy(x, &[3]).unwrap();
    assert!((g.scalar(l) - 10f64.ln()).abs() < 1e-12);

    let mut logits = vec![0.0; 10];
    logits[0] = 1000.0;
    let x = g.constant(&[1, 10], logits).unwrap();
    let l = g.cross_entropy(x, &[0]).unwrap();
    assert!(g.scalar(l).abs() < 1e-12);
    assert!(g.cross_entropy(x, &[10]).is_err());

    let mut rng = Rng::new(9, StreamLabel::Init);
    let t = rand_tensor(&mut rng, &[4, 5]);
    let labels = [0usize, 4, 2, 2];
    let expected = t
        .data()
        .chunks(5)
        .zip(&labels)
        .map(|(row, &y)| -(row[y].exp() / row.iter().map(|v| v.exp()).sum::<f64>()).ln())
        .sum::<f64>()
        / 4.0;
    let x = g.leaf(t);
    let l = g.cross_entropy(x, &labels).unwrap();
    assert!((g.scalar(l) - expected).abs() < 1e-10);
}

#[test]
fn finite_diff_of_sum_is_exact() {
    let mut rng = Rng::new(10, StreamLabel::Init);
    let x = rand_tensor(&mut rng, &[6]);
    let report = finite_diff_check_f64(|g, v| Ok(g.sum(v)), &x, 1e-5).unwrap();
    assert!(report.max_rel_error <= 1e-9, "{}", report.max_rel_error);
}

#[test]
fn finite_diff_of_cross_entropy() {
    let mut rng = Rng::new(11, StreamLabel::Init);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let report = finite_diff_check_f64(|g, v| g.cross_entropy(v, &[1, 3, 0]), &x, 1e-5).unwrap();
    assert!(report.max_rel_error <= 1e-6, "{}", report.max_rel_error);
}

#[test]
fn permute_and_narrow_round_trip() {
    let mut rng = Rng::new(12, StreamLabel::Init);
    let t = rand_tensor(&mut rng, &[2, 3, 4]);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t.clone());
    let p = g.permute(x, &[2, 0, 1]).unwrap();
    assert_eq!(g.shape(p), &[4, 2, 3]);
    assert_eq!(g.value(p)[6 + 3 + 2], t.data()[12 + 2 * 4 + 1]);
    let back = g.permute(p, &[1, 2, 0]).unwrap();
    assert_eq!(g.value(back), t.data());
    let n = g.narrow(x, 1, 1, 2).unwrap();
    assert_eq!(g.shape(n), &[2, 2, 4]);
    assert_eq!(g.value(n)[0], t.data()[4]);
    assert!(g.permute(x, &[0, 0, 1]).is_err());
    assert!(g.narrow(x, 1, 2, 2).is_err());
}

/// Attention built from primitive ops, used as the oracle for the fused op.
fn composite_attention(g: &mut Graph<f64>, qkv: Var, heads: usize) -> Result<Var> {
    let s = g.shape(qkv).to_vec();
    let (b, t, d) = (s[0], s[1], s[2] / 3);
    let hd = d / heads;
    let x = g.reshape(qkv, &[b, t, 3, heads, hd])?;
    let x = g.permute(x, &[2, 0, 3, 1, 4])?;
    let part = |g: &mut Graph<f64>, i| -> Result<Var> {
        let v = g.narrow(x, 0, i, 1)?;
        g.reshape(v, &[b, heads, t, hd])
    };
    let (q, k, v) = (part(g, 0)?, part(g, 1)?, part(g, 2)?);
    let kt = g.permute(k, &[0, 1, 3, 2])?;
    let sc = g.matmul(q, kt)?;
    let sc = g.scale(sc, 1.0 / (hd as f64).sqrt());
    let p = g.softmax(sc, 3)?;
    let o = g.matmul(p, v)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    g.reshape(o, &[b, t, d])
}

#[test]
fn fused_attention_matches_composite() {
    let mut rng = Rng::new(21, StreamLabel::Init);
    for (b, t, d, h) in [(2, 5, 6, 2), (1, 1, 4, 1), (3, 7, 9, 3)] {
        let x = rand_tensor(&mut rng, &[b, t, 3 * d]);
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x.clone().with_grad());
        let fused = g.attention(xv, h).unwrap();
        let probs = g.attention_probs(fused).unwrap();
        assert_eq!(probs.shape(), &[b, h, t, t]);
        for row in probs.data().chunks(t) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let comp = composite_attention(&mut g, xv, h).unwrap();
        approx_slice(g.value(fused), g.value(comp), 1e-12);
    }
    let mut g = Graph::<f64>::new();
    let bad = g.constant(&[1, 2, 8], vec![0.0; 16]).unwrap();
    assert!(g.attention(bad, 3).is_err());
}

#[test]
fn fused_attention_gradient() {
    let mut rng = Rng::new(22, StreamLabel::Init);
    let x = rand_tensor(&mut rng, &[2, 4, 12]);
    let w = rand_tensor(&mut rng, &[2, 4, 4]);
    let report = finite_diff_check_f64(
        |g, x| {
            let y = g.attention(x, 2)?;
            g.weighted_sum(y, w.data().to_vec())
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn fast_exp_accuracy() {
    use super::scalar::exp_f32;
    let mut worst = 0f64;
    let mut x = -87.0f32;
    while x < 88.0 {
        let exact = (x as f64).exp();
        worst = worst.max(((exp_f32(x) as f64) - exact).abs() / exact);
        x += 0.0137;
    }
    assert!(worst < 3e-7, "worst relative error {worst}");
    assert_eq!(exp_f32(0.0), 1.0);
    assert_eq!(exp_f32(-1000.0), exp_f32(-87.3));
}
