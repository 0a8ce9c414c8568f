use crate::model::{init_params, mae_forward, Fwd, ModelConfig, ModelParams, Stage};
use crate::optim::mae_loss;
use crate::patch::{append_dummy, sample_mask, MaskPlan};
use crate::tensor::{finite_diff_check, Graph, Mode, Result, Rng, Scalar, ScalarFn, StreamLabel, Tensor, Var};

/// Central-difference step.
const STEP: f64 = 1e-4;
/// Error denominators are at least this fraction of the largest gradient.
pub const GRAD_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Self::F64 => "64-bit",
            Self::F32 => "32-bit",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Self::F64 => 1e-6,
            Self::F32 => 1e-3,
        }
    }
}

/// Worst relative error of one check across all seeds.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub precision: Precision,
    pub seeds: u64,
    pub max_rel_error: f64,
    pub worst_seed: u64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.precision.tolerance()
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Matmul,
    MatmulRhs,
    BatchedMatmul,
    Add,
    AddBroadcastRhs,
    Sub,
    Mul,
    MulBroadcastRhs,
    Scale,
    Relu,
    Dropout,
    Reshape,
    Permute,
    Narrow,
    GatherRows,
    ScatterBase,
    ScatterRows,
    Softmax,
    Attention,
    LayerNormX,
    LayerNormGamma,
    LayerNormBeta,
    Sum,
    Mean,
    CrossEntropy,
}

const OPS: [(Op, &str); 25] = [
    (Op::Matmul, "matmul (lhs)"),
    (Op::MatmulRhs, "matmul (rhs)"),
    (Op::BatchedMatmul, "batched matmul"),
    (Op::Add, "add"),
    (Op::AddBroadcastRhs, "add (broadcast rhs)"),
    (Op::Sub, "sub"),
    (Op::Mul, "mul"),
    (Op::MulBroadcastRhs, "mul (broadcast rhs)"),
    (Op::Scale, "scale"),
    (Op::Relu, "relu"),
    (Op::Dropout, "dropout"),
    (Op::Reshape, "reshape"),
    (Op::Permute, "permute"),
    (Op::Narrow, "narrow"),
    (Op::GatherRows, "gather_rows"),
    (Op::ScatterBase, "scatter_rows (base)"),
    (Op::ScatterRows, "scatter_rows (rows)"),
    (Op::Softmax, "softmax"),
    (Op::Attention, "attention"),
    (Op::LayerNormX, "layer_norm (x)"),
    (Op::LayerNormGamma, "layer_norm (gamma)"),
    (Op::LayerNormBeta, "layer_norm (beta)"),
    (Op::Sum, "sum"),
    (Op::Mean, "mean"),
    (Op::CrossEntropy, "cross_entropy"),
];

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).expect("shape matches data")
}

fn constant<T: Scalar>(g: &mut Graph<T>, t: &Tensor<f64>) -> Result<Var> {
    g.constant(t.shape(), t.data().iter().map(|&v| T::of(v)).collect())
}

/// One primitive applied to the checked input, reduced to a scalar with
/// fixed random weights so every output element contributes.
struct PrimitiveCase {
    op: Op,
    seed: u64,
    aux: Vec<Tensor<f64>>,
}

impl PrimitiveCase {
    fn new(op: Op, seed: u64) -> (Self, Tensor<f64>) {
        let mut rng = Rng::new(seed, StreamLabel::Init).fork(op as u64);
        let mut n = |shape: &[usize]| normal(&mut rng, shape);
        let (x, aux) = match op {
            Op::Matmul => (n(&[3, 4]), vec![n(&[4, 5])]),
            Op::MatmulRhs => (n(&[4, 5]), vec![n(&[3, 4])]),
            Op::BatchedMatmul => (n(&[2, 3, 4]), vec![n(&[4, 2])]),
            Op::Add | Op::Sub | Op::Mul => (n(&[2, 3, 4]), vec![n(&[2, 3, 4])]),
            Op::AddBroadcastRhs | Op::MulBroadcastRhs => (n(&[4]), vec![n(&[2, 3, 4])]),
            Op::Relu => {
                let mut x = n(&[3, 5]);
                x.data_mut().iter_mut().for_each(|v| *v += 0.1 * v.signum());
                (x, vec![])
            }
            Op::GatherRows => (n(&[4, 3]), vec![]),
            Op::ScatterBase => (n(&[5, 3]), vec![n(&[2, 3])]),
            Op::ScatterRows => (n(&[2, 3]), vec![n(&[5, 3])]),
            Op::Attention => (n(&[2, 4, 12]), vec![]),
            Op::LayerNormX => (n(&[3, 6]), vec![n(&[6]), n(&[6])]),
            Op::LayerNormGamma => (n(&[6]), vec![n(&[3, 6]), n(&[6])]),
            Op::LayerNormBeta => (n(&[6]), vec![n(&[3, 6]), n(&[6])]),
            Op::CrossEntropy => (n(&[4, 5]), vec![]),
            _ => (n(&[2, 3, 4]), vec![]),
        };
        (Self { op, seed, aux }, x)
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let aux = self.aux.iter().map(|t| constant(g, t)).collect::<Result<Vec<_>>>()?;
        let a = aux.first().copied();
        Ok(match self.op {
            Op::Matmul | Op::BatchedMatmul => g.matmul(x, a.unwrap())?,
            Op::MatmulRhs => g.matmul(a.unwrap(), x)?,
            Op::Add => g.add(x, a.unwrap())?,
            Op::AddBroadcastRhs => g.add(a.unwrap(), x)?,
            Op::Sub => g.sub(x, a.unwrap())?,
            Op::Mul => g.mul(x, a.unwrap())?,
            Op::MulBroadcastRhs => g.mul(a.unwrap(), x)?,
            Op::Scale => g.scale(x, T::of(-1.7)),
            Op::Relu => g.relu(x),
            Op::Dropout => {
                let mut rng = Rng::new(self.seed, StreamLabel::Dropout);
                g.dropout(x, 0.3, Mode::Train, &mut rng)?
            }
            Op::Reshape => g.reshape(x, &[4, 6])?,
            Op::Permute => g.permute(x, &[2, 0, 1])?,
            Op::Narrow => g.narrow(x, 1, 1, 2)?,
            Op::GatherRows => g.gather_rows(x, &[2, 0, 2, 3])?,
            Op::ScatterBase => g.scatter_rows(x, &[4, 1], a.unwrap())?,
            Op::ScatterRows => g.scatter_rows(a.unwrap(), &[4, 1], x)?,
            Op::Softmax => g.softmax(x, 1)?,
            Op::Attention => g.attention(x, 2)?,
            Op::LayerNormX => g.layer_norm(x, aux[0], aux[1], 1e-5)?,
            Op::LayerNormGamma => g.layer_norm(aux[0], x, aux[1], 1e-5)?,
            Op::LayerNormBeta => g.layer_norm(aux[0], aux[1], x, 1e-5)?,
            Op::Sum => g.sum(x),
            Op::Mean => g.mean(x),
            Op::CrossEntropy => g.cross_entropy(x, &[1, 4, 0, 1])?,
        })
    }
}

fn reduce<T: Scalar>(g: &mut Graph<T>, y: Var, seed: u64) -> Result<Var> {
    let n = g.value(y).len();
    let mut rng = Rng::new(seed, StreamLabel::Init).fork(u64::MAX);
    let w = (0..n).map(|_| T::of(rng.uniform_range(0.5, 1.5))).collect();
    g.weighted_sum(y, w)
}

impl ScalarFn for PrimitiveCase {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.apply(g, x)?;
        reduce(g, y, self.seed)
    }
}

/// A one-block encoder and decoder MAE loss as a function of all its
/// parameters, flattened into one vector.
struct MaeCase {
    cfg: ModelConfig,
    template: ModelParams<Tensor<f64>>,
    images: Tensor<f64>,
    plan: MaskPlan,
    seed: u64,
}

impl MaeCase {
    fn new(seed: u64) -> (Self, Tensor<f64>) {
        let cfg = ModelConfig {
            embed_dim: 8,
            enc_depth: 1,
            dec_depth: 1,
            heads: 2,
            image_side: 6,
            mask_ratio: 0.5,
            ..ModelConfig::default()
        };
        let template = init_params::<f64>(&cfg, Stage::Pretrain, &mut Rng::new(seed, StreamLabel::Init));
        let mut rng = Rng::new(seed, StreamLabel::Augment);
        let images = normal(&mut rng, &[2, cfg.n_patches(), cfg.token_dim()]);
        let plan = sample_mask(2, cfg.n_patches(), cfg.mask_ratio, &mut Rng::new(seed, StreamLabel::Mask))
            .expect("valid mask ratio");
        let flat: Vec<f64> = template.entries().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let x = Tensor::new(&[flat.len()], flat).expect("flat parameter vector");
        (
            Self {
                cfg,
                template,
                images,
                plan,
                seed,
            },
            x,
        )
    }
}

impl ScalarFn for MaeCase {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut offset = 0;
        let mut failure = None;
        let params = self.template.map(|_, t| {
            let v = g
                .narrow(x, 0, offset, t.numel())
                .and_then(|v| g.reshape(v, t.shape()))
                .unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    x
                });
            offset += t.numel();
            v
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let tokens: Tensor<T> = self.images.cast();
        let seq = append_dummy(&tokens, self.cfg.n_patches()).map_err(into_tensor_error)?;
        let mut fwd = Fwd::train(Rng::new(self.seed, StreamLabel::Dropout));
        let pred = mae_forward(g, &seq, &self.plan, &params, &self.cfg, &mut fwd).map_err(into_tensor_error)?;
        mae_loss(g, pred, &tokens, &self.plan, self.cfg.alpha).map_err(into_tensor_error)
    }
}

fn into_tensor_error(e: crate::patch::PatchError) -> crate::tensor::TensorError {
    match e {
        crate::patch::PatchError::Tensor(t) => t,
        other => crate::tensor::TensorError::InvalidArgument {
            op: "mae_loss",
            msg: other.to_string(),
        },
    }
}

fn check(f: &impl ScalarFn, x: &Tensor<f64>, precision: Precision) -> Result<f64> {
    let report = match precision {
        Precision::F64 => finite_diff_check::<f64>(f, x, STEP)?,
        Precision::F32 => finite_diff_check::<f32>(f, x, STEP)?,
    };
    Ok(report.max_scaled_error(GRAD_FLOOR))
}

/// Finite-difference checks of every primitive and of a one-block MAE loss,
/// at both precisions, over seeds `0..seeds`.
pub fn gradcheck_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for precision in [Precision::F64, Precision::F32] {
        let mut run = |name: &'static str, errors: Vec<f64>| {
            let (worst_seed, max_rel_error) = errors
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |b, (i, &e)| if e > b.1 { (i as u64, e) } else { b });
            results.push(CheckResult {
                name,
                precision,
                seeds,
                max_rel_error,
                worst_seed,
            });
        };
        for (op, name) in OPS {
            let errors = (0..seeds)
                .map(|seed| {
                    let (case, x) = PrimitiveCase::new(op, seed);
                    check(&case, &x, precision)
                })
                .collect::<Result<Vec<_>>>()?;
            run(name, errors);
        }
        let errors = (0..seeds)
            .map(|seed| {
                let (case, x) = MaeCase::new(seed);
                check(&case, &x, precision)
            })
            .collect::<Result<Vec<_>>>()?;
        run("1-block MAE loss", errors);
    }
    Ok(results)
}
