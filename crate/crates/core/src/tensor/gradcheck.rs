use super::{Graph, Result, Scalar, Tensor, Var};

/// A scalar-valued function of one tensor, evaluable at any precision.
///
/// Closures cannot be generic over the scalar type, so checks that need the
/// 32-bit path implement this on a small struct.
pub trait ScalarFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;
}

/// Adapter for 64-bit-only closures.
pub struct F64Fn<F>(pub F);

impl<F> F64Fn<F>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    fn call(&self, g: &mut Graph<f64>, x: Var) -> Result<Var> {
        (self.0)(g, x)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// `|numeric - analytic| / (|analytic| + 1e-8)`.
pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / (analytic.abs() + 1e-8)
}

impl GradCheckReport {
    /// Largest `|numeric - analytic| / max(|analytic|, |numeric|, floor)`
    /// where `floor = floor_fraction * max|numeric|`. Elements whose true
    /// gradient vanishes are then judged against the gradient scale rather
    /// than against rounding noise.
    pub fn max_scaled_error(&self, floor_fraction: f64) -> f64 {
        let scale = self.numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (floor_fraction * scale).max(1e-12);
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(&a, &n)| (n - a).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

pub fn summarize(analytic: Vec<f64>, numeric: Vec<f64>) -> GradCheckReport {
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(n, a))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    }
}

fn central_differences(
    x: &Tensor<f64>,
    h: f64,
    mut eval: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let mut at = |offset: f64| {
            probe.data_mut()[i] = orig + offset;
            eval(&probe)
        };
        let (f2, f1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
        probe.data_mut()[i] = orig;
        numeric.push((8.0 * (f1 - m1) - (f2 - m2)) / (12.0 * h));
    }
    Ok(numeric)
}

fn analytic_grad<T: Scalar>(
    x: &Tensor<f64>,
    f: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<Vec<f64>> {
    let mut g = Graph::<T>::new();
    let xv = g.leaf(x.cast::<T>().with_grad());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    Ok(g.grad(xv)
        .expect("leaf with requires_grad has a gradient")
        .iter()
        .map(|v| v.to_f64_lossless())
        .collect())
}

/// Max relative error between the reverse-mode gradient of `f`, computed at
/// precision `T`, and 64-bit fourth-order central differences with step `h`.
pub fn finite_diff_check<T: Scalar>(f: &impl ScalarFn, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport> {
    let analytic = analytic_grad::<T>(x, |g, v| f.eval(g, v))?;
    let numeric = central_differences(x, h, |p| {
        let mut g = Graph::<f64>::new();
        let v = g.leaf(p.clone());
        let out = f.eval(&mut g, v)?;
        Ok(g.scalar(out))
    })?;
    Ok(summarize(analytic, numeric))
}

/// 64-bit check for a plain closure.
pub fn finite_diff_check_f64<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let f = F64Fn(f);
    let analytic = analytic_grad::<f64>(x, |g, v| f.call(g, v))?;
    let numeric = central_differences(x, h, |p| {
        let mut g = Graph::<f64>::new();
        let v = g.leaf(p.clone());
        let out = f.call(&mut g, v)?;
        Ok(g.scalar(out))
    })?;
    Ok(summarize(analytic, numeric))
}
