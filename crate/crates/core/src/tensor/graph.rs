use super::{Result, Rng, Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// `(lhs offset, rhs offset)` per output matrix.
    offsets: Vec<(usize, usize)>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, plan: MatMulPlan },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Narrow { a: Var, axis: usize, start: usize },
    Softmax { a: Var, axis: usize },
    Attention { qkv: Var, heads: usize, probs: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Relu { a: Var },
    Dropout { a: Var, mask: Vec<T> },
    GatherRows { a: Var, idx: Vec<usize> },
    ScatterRows { base: Var, rows: Var, idx: Vec<usize> },
    Sum { a: Var },
    WeightedSum { a: Var, w: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    leaf: bool,
    op: Op<T>,
}

/// Dynamically recorded computation. Nodes are appended in evaluation order,
/// which is a topological order by construction.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn is_suffix(full: &[usize], tail: &[usize]) -> bool {
    tail.len() <= full.len() && &full[full.len() - tail.len()..] == tail
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Offsets into `src` (laid out with `src_shape`) visited in row-major order
/// of the permuted output.
fn permuted_offsets(src_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let strides = contiguous_strides(src_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| src_shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let total = numel(&out_shape);
    let mut offsets = Vec::with_capacity(total);
    if total == 0 {
        return offsets;
    }
    let rank = out_shape.len();
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..rank).rev() {
            counter[d] += 1;
            off += out_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            off -= out_strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    offsets
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, inputs: &[Var], op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            leaf: false,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an owned tensor, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: tensor.into_data(),
            grad: None,
            requires_grad,
            leaf: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a copy of a trainable parameter; it always receives a gradient.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        let t = Tensor::new(tensor.shape(), tensor.data().to_vec()).expect("consistent tensor");
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.clone()).expect("consistent node")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    // ---- linear algebra -------------------------------------------------

    /// Batched matrix product `[..., M, K] x [..., K, N]` with broadcasting
    /// over the leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(mismatch());
        }
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let (plan, out_shape) = if sb.len() == 2 {
            // Fold all leading dims of the lhs into one tall matrix.
            let m = numel(&sa[..sa.len() - 1]);
            let mut out_shape = sa[..sa.len() - 1].to_vec();
            out_shape.push(n);
            (
                MatMulPlan {
                    m,
                    k,
                    n,
                    offsets: vec![(0, 0)],
                },
                out_shape,
            )
        } else {
            let m = sa[sa.len() - 2];
            let ba = &sa[..sa.len() - 2];
            let bb = &sb[..sb.len() - 2];
            let rank = ba.len().max(bb.len());
            let pad = |s: &[usize]| {
                let mut p = vec![1; rank - s.len()];
                p.extend_from_slice(s);
                p
            };
            let (pa, pb) = (pad(ba), pad(bb));
            let mut batch = Vec::with_capacity(rank);
            for (&x, &y) in pa.iter().zip(&pb) {
                if x == y || y == 1 {
                    batch.push(x);
                } else if x == 1 {
                    batch.push(y);
                } else {
                    return Err(mismatch());
                }
            }
            let (sta, stb) = (contiguous_strides(&pa), contiguous_strides(&pb));
            let total = numel(&batch);
            let mut offsets = Vec::with_capacity(total);
            let mut idx = vec![0usize; rank];
            for _ in 0..total {
                let (mut oa, mut ob) = (0, 0);
                for d in 0..rank {
                    if pa[d] != 1 {
                        oa += idx[d] * sta[d];
                    }
                    if pb[d] != 1 {
                        ob += idx[d] * stb[d];
                    }
                }
                offsets.push((oa * m * k, ob * k * n));
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    if idx[d] < batch[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            let mut out_shape = batch;
            out_shape.push(m);
            out_shape.push(n);
            (MatMulPlan { m, k, n, offsets }, out_shape)
        };
        let mut out = vec![T::zero(); numel(&out_shape)];
        {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            let (m, k, n) = (plan.m, plan.k, plan.n);
            for (i, &(oa, ob)) in plan.offsets.iter().enumerate() {
                T::gemm(
                    m,
                    k,
                    n,
                    &va[oa..oa + m * k],
                    (k as isize, 1),
                    &vb[ob..ob + k * n],
                    (n as isize, 1),
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        Ok(self.push(out_shape, out, &[a, b], Op::MatMul { a, b, plan }))
    }

    // ---- element-wise ---------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<usize>, Vec<T>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let shape = sa.to_vec();
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = Vec::with_capacity(va.len());
        if !vb.is_empty() {
            for chunk in va.chunks_exact(vb.len()) {
                out.extend(chunk.iter().zip(vb).map(|(&x, &y)| f(x, y)));
            }
        }
        Ok((shape, out))
    }

    /// `a + b`, where `b`'s shape must be a trailing suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(shape, out, &[a, b], Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(shape, out, &[a, b], Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(shape, out, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, &[a], Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, &[a], Op::Relu { a })
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                msg: format!("drop probability {p} outside [0, 1)"),
            });
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let keep_scale = T::of(1.0 / (1.0 - p));
        let p32 = p as f32;
        let n = self.nodes[a.0].value.len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.uniform_f32() < p32 {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(&x, &s)| x * s)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a], Op::Dropout { a, mask }))
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.nodes[a.0].value.clone();
        Ok(self.push(shape.to_vec(), value, &[a], Op::Reshape { a }))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&ax| ax < shape.len() && !std::mem::replace(&mut seen[ax], true));
        if !valid {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("axes {axes:?} are not a permutation for shape {shape:?}"),
            });
        }
        let src = &self.nodes[a.0].value;
        let out: Vec<T> = permuted_offsets(&shape, axes).into_iter().map(|o| src[o]).collect();
        let out_shape = axes.iter().map(|&ax| shape[ax]).collect();
        Ok(self.push(
            out_shape,
            out,
            &[a],
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "narrow",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let src = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(out_shape, out, &[a], Op::Narrow { a, axis, start }))
    }

    /// Rows of `a` viewed as `[rows, last_dim]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let d = *shape.last().ok_or(TensorError::InvalidArgument {
            op: "gather_rows",
            msg: "scalar input".into(),
        })?;
        let rows = numel(shape) / d.max(1);
        let src = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![idx.len(), d],
            out,
            &[a],
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Copy of `base` (viewed as `[N, D]`) with rows `idx[r]` replaced by `rows[r]`.
    pub fn scatter_rows(&mut self, base: Var, idx: &[usize], rows: Var) -> Result<Var> {
        let sb = self.shape(base).to_vec();
        let sr = self.shape(rows).to_vec();
        let d = *sb.last().unwrap_or(&0);
        if d == 0 || sr.last() != Some(&d) || numel(&sr) != idx.len() * d {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_rows",
                lhs: sb,
                rhs: sr,
            });
        }
        let n = numel(&sb) / d;
        let mut seen = vec![false; n];
        for &i in idx {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter_rows",
                    index: i,
                    len: n,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(TensorError::InvalidArgument {
                    op: "scatter_rows",
                    msg: format!("duplicate index {i}"),
                });
            }
        }
        let mut out = self.nodes[base.0].value.clone();
        let src = &self.nodes[rows.0].value;
        for (r, &i) in idx.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&src[r * d..(r + 1) * d]);
        }
        Ok(self.push(
            sb,
            out,
            &[base, rows],
            Op::ScatterRows {
                base,
                rows,
                idx: idx.to_vec(),
            },
        ))
    }

    // ---- normalization ---------------------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                msg: format!("axis {axis} for shape {shape:?}"),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = &self.nodes[a.0].value;
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        Ok(self.push(shape, out, &[a], Op::Softmax { a, axis }))
    }

    /// Multi-head scaled dot-product self-attention on packed projections
    /// `[B, T, 3D]` (query, key, value blocks along the last axis), giving
    /// `[B, T, D]`. Scores are scaled by `1 / sqrt(D / heads)`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(qkv).to_vec();
        if shape.len() != 3 || heads == 0 || !shape[2].is_multiple_of(3 * heads) {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                msg: format!("shape {shape:?} cannot be split into q, k, v for {heads} heads"),
            });
        }
        let (b, t) = (shape[0], shape[1]);
        let d = shape[2] / 3;
        let hd = d / heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let (row, tt) = (3 * d as isize, t * t);
        let src = &self.nodes[qkv.0].value;
        let mut probs = vec![T::zero(); b * heads * tt];
        let mut out = vec![T::zero(); b * t * d];
        for bi in 0..b {
            let base = bi * t * 3 * d;
            for h in 0..heads {
                let p = &mut probs[(bi * heads + h) * tt..][..tt];
                let (q, k, v) = (base + h * hd, base + d + h * hd, base + 2 * d + h * hd);
                T::gemm_ex(t, hd, t, scale, &src[q..], (row, 1), &src[k..], (1, row), T::zero(), p, (t as isize, 1));
                for r in p.chunks_mut(t) {
                    let max = r.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for x in r.iter_mut() {
                        *x = (*x - max).exp_kernel();
                    }
                    for &x in r.iter() {
                        sum += x;
                    }
                    let inv = T::one() / sum;
                    r.iter_mut().for_each(|x| *x *= inv);
                }
                let o = &mut out[bi * t * d + h * hd..];
                T::gemm_ex(t, t, hd, T::one(), p, (t as isize, 1), &src[v..], (row, 1), T::zero(), o, (d as isize, 1));
            }
        }
        Ok(self.push(
            vec![b, t, d],
            out,
            &[qkv],
            Op::Attention { qkv, heads, probs },
        ))
    }

    /// Attention probabilities `[B, heads, T, T]` recorded by an
    /// [`Graph::attention`] node, available until `backward`.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        match &node.op {
            Op::Attention { heads, probs, .. } => {
                let (b, t) = (node.shape[0], node.shape[1]);
                Tensor::new(&[b, *heads, t, t], probs.clone()).ok()
            }
            _ => None,
        }
    }

    /// Layer normalization over the last axis (biased variance, `eps` inside the root).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let eps = T::of(eps);
        let inv_d = T::one() / T::of(d as f64);
        let src = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let rows = src.len() / d;
        let mut out = Vec::with_capacity(src.len());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in src.chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            out.extend(row.iter().zip(g).zip(b).map(|((&v, &gj), &bj)| (v - mean) * rstd * gj + bj));
            means.push(mean);
            rstds.push(rstd);
        }
        Ok(self.push(
            shape,
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    // ---- reductions and losses ------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().copied().sum::<T>();
        self.push(vec![], vec![s], &[a], Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// `sum_i w[i] * a[i]` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, w: Vec<T>) -> Result<Var> {
        if w.len() != self.nodes[a.0].value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                lhs: self.shape(a).to_vec(),
                rhs: vec![w.len()],
            });
        }
        let s = self.nodes[a.0]
            .value
            .iter()
            .zip(&w)
            .map(|(&x, &wi)| x * wi)
            .sum::<T>();
        Ok(self.push(vec![], vec![s], &[a], Op::WeightedSum { a, w }))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                len: c,
            });
        }
        let src = &self.nodes[logits.0].value;
        let mut probs = Vec::with_capacity(src.len());
        let mut total = T::zero();
        for (row, &label) in src.chunks(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - (row[label] - max);
            probs.extend(row.iter().map(|&v| (v - max - lse).exp()));
        }
        let loss = total / T::of(labels.len() as f64);
        Ok(self.push(
            vec![],
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ---- backward -------------------------------------------------------

    fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(node.grad.take().unwrap_or_else(|| vec![T::zero(); n]))
    }

    fn put_grad(&mut self, v: Var, g: Vec<T>) {
        self.nodes[v.0].grad = Some(g);
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&Self, &mut [T])) {
        if let Some(mut g) = self.take_grad(v) {
            f(self, &mut g);
            self.put_grad(v, g);
        }
    }

    /// Reverse-mode sweep from a scalar `loss`. Afterwards every leaf with
    /// `requires_grad` holds a gradient and the recorded ops are released.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        if self.nodes[loss.0].requires_grad {
            self.nodes[loss.0].grad = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].leaf {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_node(i, op, &g);
        }
        for node in self.nodes.iter_mut() {
            if node.leaf && node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![T::zero(); node.value.len()]);
            }
            node.op = Op::Leaf;
        }
        Ok(())
    }

    /// Gradient of `a + sign * b` with `b` broadcast over `a`'s leading dims.
    fn backprop_sum_pair(&mut self, a: Var, b: Var, sign: T, g: &[T]) {
        self.accumulate(a, |_, ga| {
            for (gj, &gi) in ga.iter_mut().zip(g) {
                *gj += gi;
            }
        });
        self.accumulate(b, |_, gb| {
            for chunk in g.chunks_exact(gb.len().max(1)) {
                for (x, &gi) in gb.iter_mut().zip(chunk) {
                    *x += sign * gi;
                }
            }
        });
    }

    fn backprop_node(&mut self, i: usize, op: Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                let MatMulPlan { m, k, n, offsets } = plan;
                self.accumulate(a, |s, ga| {
                    let vb = &s.nodes[b.0].value;
                    for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            &vb[ob..ob + k * n],
                            (1, n as isize),
                            T::one(),
                            &mut ga[oa..oa + m * k],
                        );
                    }
                });
                self.accumulate(b, |s, gb| {
                    let va = &s.nodes[a.0].value;
                    for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                        T::gemm(
                            k,
                            m,
                            n,
                            &va[oa..oa + m * k],
                            (1, k as isize),
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            T::one(),
                            &mut gb[ob..ob + k * n],
                        );
                    }
                });
            }
            Op::Add { a, b } => self.backprop_sum_pair(a, b, T::one(), g),
            Op::Sub { a, b } => self.backprop_sum_pair(a, b, -T::one(), g),
            Op::Mul { a, b } => {
                self.accumulate(a, |s, ga| {
                    let vb = &s.nodes[b.0].value;
                    for (gc, ch) in ga.chunks_exact_mut(vb.len().max(1)).zip(g.chunks_exact(vb.len().max(1))) {
                        for ((gj, &gi), &y) in gc.iter_mut().zip(ch).zip(vb) {
                            *gj += gi * y;
                        }
                    }
                });
                self.accumulate(b, |s, gb| {
                    let va = &s.nodes[a.0].value;
                    let nb = gb.len().max(1);
                    for (ch, xa) in g.chunks_exact(nb).zip(va.chunks_exact(nb)) {
                        for ((x, &gi), &ai) in gb.iter_mut().zip(ch).zip(xa) {
                            *x += gi * ai;
                        }
                    }
                });
            }
            Op::Scale { a, c } => self.accumulate(a, |_, ga| {
                for (gj, &gi) in ga.iter_mut().zip(g) {
                    *gj += gi * c;
                }
            }),
            Op::Reshape { a } => self.accumulate(a, |_, ga| {
                for (gj, &gi) in ga.iter_mut().zip(g) {
                    *gj += gi;
                }
            }),
            Op::Permute { a, axes } => self.accumulate(a, |s, ga| {
                let offsets = permuted_offsets(&s.nodes[a.0].shape, &axes);
                for (&o, &gi) in offsets.iter().zip(g) {
                    ga[o] += gi;
                }
            }),
            Op::Narrow { a, axis, start } => {
                let len = self.nodes[i].shape[axis];
                self.accumulate(a, |s, ga| {
                    let (outer, dim, inner) = axis_split(&s.nodes[a.0].shape, axis);
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        let src = o * len * inner;
                        for (d, &gi) in ga[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let shape = self.nodes[i].shape.clone();
                let y = std::mem::take(&mut self.nodes[i].value);
                self.accumulate(a, |_, ga| {
                    let (outer, n, inner) = axis_split(&shape, axis);
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + ii;
                            let dot = (0..n).map(|j| g[at(j)] * y[at(j)]).sum::<T>();
                            for j in 0..n {
                                ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
                self.nodes[i].value = y;
            }
            Op::Attention { qkv, heads, probs } => {
                let shape = self.nodes[i].shape.clone();
                let (b, t, d) = (shape[0], shape[1], shape[2]);
                let hd = d / heads;
                let scale = T::one() / T::of(hd as f64).sqrt();
                let (row, tt, ts) = (3 * d as isize, t * t, t as isize);
                self.accumulate(qkv, |s, gq| {
                    let src = &s.nodes[qkv.0].value;
                    let mut dp = vec![T::zero(); tt];
                    for bi in 0..b {
                        let base = bi * t * 3 * d;
                        for h in 0..heads {
                            let p = &probs[(bi * heads + h) * tt..][..tt];
                            let (q, k, v) = (base + h * hd, base + d + h * hd, base + 2 * d + h * hd);
                            let go = &g[bi * t * d + h * hd..];
                            T::gemm_ex(t, hd, t, T::one(), go, (d as isize, 1), &src[v..], (1, row), T::zero(), &mut dp, (ts, 1));
                            T::gemm_ex(t, t, hd, T::one(), p, (1, ts), go, (d as isize, 1), T::one(), &mut gq[v..], (row, 1));
                            for (dr, pr) in dp.chunks_mut(t).zip(p.chunks(t)) {
                                let dot = dr.iter().zip(pr).map(|(&x, &y)| x * y).sum::<T>();
                                for (x, &y) in dr.iter_mut().zip(pr) {
                                    *x = y * (*x - dot) * scale;
                                }
                            }
                            T::gemm_ex(t, t, hd, T::one(), &dp, (ts, 1), &src[k..], (row, 1), T::one(), &mut gq[q..], (row, 1));
                            T::gemm_ex(t, t, hd, T::one(), &dp, (1, ts), &src[q..], (row, 1), T::one(), &mut gq[k..], (row, 1));
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let d = *self.nodes[i].shape.last().unwrap();
                let inv_d = T::one() / T::of(d as f64);
                self.accumulate(x, |s, gx| {
                    let vx = &s.nodes[x.0].value;
                    let gam = &s.nodes[gamma.0].value;
                    for (r, (row_g, row_x)) in g.chunks(d).zip(vx.chunks(d)).enumerate() {
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for j in 0..d {
                            let xh = (row_x[j] - mu) * rs;
                            let dxh = row_g[j] * gam[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        let (m1, m2) = (sum_dxh * inv_d, sum_dxh_xh * inv_d);
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let xh = (row_x[j] - mu) * rs;
                            out[j] += rs * (row_g[j] * gam[j] - m1 - xh * m2);
                        }
                    }
                });
                self.accumulate(gamma, |s, gg| {
                    let vx = &s.nodes[x.0].value;
                    for (r, (row_g, row_x)) in g.chunks(d).zip(vx.chunks(d)).enumerate() {
                        for j in 0..d {
                            gg[j] += row_g[j] * (row_x[j] - mean[r]) * rstd[r];
                        }
                    }
                });
                self.accumulate(beta, |_, gb| {
                    for row_g in g.chunks(d) {
                        for (b, &gi) in gb.iter_mut().zip(row_g) {
                            *b += gi;
                        }
                    }
                });
            }
            Op::Relu { a } => self.accumulate(a, |s, ga| {
                let va = &s.nodes[a.0].value;
                for ((gj, &gi), &x) in ga.iter_mut().zip(g).zip(va) {
                    if x > T::zero() {
                        *gj += gi;
                    }
                }
            }),
            Op::Dropout { a, mask } => self.accumulate(a, |_, ga| {
                for ((gj, &gi), &mk) in ga.iter_mut().zip(g).zip(&mask) {
                    *gj += gi * mk;
                }
            }),
            Op::GatherRows { a, idx } => {
                let d = self.nodes[i].shape[1];
                self.accumulate(a, |_, ga| {
                    for (r, &src) in idx.iter().enumerate() {
                        for (gj, &gi) in ga[src * d..(src + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *gj += gi;
                        }
                    }
                });
            }
            Op::ScatterRows { base, rows, idx } => {
                let d = *self.nodes[i].shape.last().unwrap();
                self.accumulate(base, |_, gb| {
                    let mut replaced = vec![false; g.len() / d];
                    for &r in &idx {
                        replaced[r] = true;
                    }
                    for (r, (dst, src)) in gb.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        if !replaced[r] {
                            for (x, &y) in dst.iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    }
                });
                self.accumulate(rows, |_, gr| {
                    for (r, &dst) in idx.iter().enumerate() {
                        for (x, &y) in gr[r * d..(r + 1) * d].iter_mut().zip(&g[dst * d..(dst + 1) * d]) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Sum { a } => self.accumulate(a, |_, ga| {
                for gj in ga.iter_mut() {
                    *gj += g[0];
                }
            }),
            Op::WeightedSum { a, w } => self.accumulate(a, |_, ga| {
                for (gj, &wi) in ga.iter_mut().zip(&w) {
                    *gj += g[0] * wi;
                }
            }),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => self.accumulate(logits, |_, gl| {
                let c = probs.len() / labels.len();
                let scale = g[0] / T::of(labels.len() as f64);
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { T::one() } else { T::zero() };
                        gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }),
        }
    }
}
