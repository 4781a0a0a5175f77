use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Graph, Tensor, TensorError, Var};

/// Denominator floor for the relative error, so gradients that are
/// (analytically) zero are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compare reverse-mode gradients of the scalar function `f` with central
/// differences `(f(x+h) - f(x-h)) / 2h`, element by element.
///
/// The relative error of each element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let first = eval(&f, inputs)?;
    let second = eval(&f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut entries = Vec::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        for (j, &x0) in t.data().iter().enumerate() {
            work[i].data_mut()[j] = x0 + h;
            let up = eval(&f, &work)?;
            work[i].data_mut()[j] = x0 - h;
            let down = eval(&f, &work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][j];
            let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            entries.push(GradCheckEntry { input: i, index: j, analytic: a, numeric, rel_err });
        }
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    let mean_rel_err = if entries.is_empty() {
        0.0
    } else {
        entries.iter().map(|e| e.rel_err).sum::<f64>() / entries.len() as f64
    };
    Ok(GradCheckReport { entries, max_rel_err, mean_rel_err, tol, passed: max_rel_err < tol })
}

/// Result of [`op_suite`] for one op.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Case = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>);

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let normal = StandardNormal;
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Values at least 0.1 away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

/// `sum(y * w)` for a fixed random `w`, so every output element carries a
/// distinct weight.
fn project(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var, TensorError> {
    let w = g.input(w.clone());
    let m = g.mul(y, w)?;
    g.sum(m, None)
}

fn case(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + 'static) -> Case {
    (inputs, Box::new(f))
}

/// Output shape of `f` on `inputs`, used to size the projection weights.
fn out_shape(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>) -> Result<Vec<usize>, TensorError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    Ok(g.shape(y).to_vec())
}

/// Wrap a tensor-valued op into a scalar case with random projection.
fn projected<F>(rng: &mut ChaCha8Rng, inputs: Vec<Tensor<f64>>, f: F) -> Result<Case, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + 'static,
{
    let shape = out_shape(&inputs, &f)?;
    let w = randn(rng, &shape);
    Ok(case(inputs, move |g, v| {
        let y = f(g, v)?;
        project(g, y, &w)
    }))
}

const SUITE_OPS: [&str; 22] = [
    "matmul", "conv2d", "relu", "gelu", "layer_norm", "batch_norm_train", "batch_norm_eval", "softmax", "sum", "mean",
    "add", "mul", "scale", "mse", "cross_entropy", "embedding_lookup", "concat", "slice", "avg_pool", "global_avg_pool",
    "max_pool", "reshape",
];

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn instance(op: &str, rng: &mut ChaCha8Rng) -> Result<Case, TensorError> {
    let (r, c) = (dim(rng, 1, 4), dim(rng, 2, 5));
    match op {
        "matmul" => {
            let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            let (ta, tb) = (rng.random_bool(0.5), rng.random_bool(0.5));
            let a = randn(rng, &if ta { [k, m] } else { [m, k] });
            let b = randn(rng, &if tb { [n, k] } else { [k, n] });
            projected(rng, vec![a, b], move |g, v| g.matmul_t(v[0], v[1], ta, tb))
        }
        "conv2d" => {
            let (n, ci, co, k) = (rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
            let (h, w) = (rng.random_range(k..=5), rng.random_range(k..=5));
            let (stride, pad) = (rng.random_range(1..=2), rng.random_range(0..=1));
            let x = randn(rng, &[n, ci, h, w]);
            let wt = randn(rng, &[co, ci, k, k]);
            projected(rng, vec![x, wt], move |g, v| g.conv2d(v[0], v[1], stride, pad))
        }
        "relu" => {
            let x = away_from_zero(rng, &[r, c]);
            projected(rng, vec![x], |g, v| Ok(g.relu(v[0])))
        }
        "gelu" => {
            let x = randn(rng, &[r, c]);
            projected(rng, vec![x], |g, v| Ok(g.gelu(v[0])))
        }
        "layer_norm" => {
            let (x, gamma, beta) = (randn(rng, &[r, c]), randn(rng, &[c]), randn(rng, &[c]));
            projected(rng, vec![x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))
        }
        "batch_norm_train" => {
            let ch = rng.random_range(1..=3);
            let (x, gamma, beta) = (randn(rng, &[2, ch, 2, 2]), randn(rng, &[ch]), randn(rng, &[ch]));
            projected(rng, vec![x, gamma, beta], |g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0))
        }
        "batch_norm_eval" => {
            let ch = rng.random_range(1..=3);
            let (x, gamma, beta) = (randn(rng, &[2, ch, 2, 2]), randn(rng, &[ch]), randn(rng, &[ch]));
            let mean = randn(rng, &[ch]).into_data();
            let var: Vec<f64> = randn(rng, &[ch]).data().iter().map(|v| 0.5 + v.abs()).collect();
            projected(rng, vec![x, gamma, beta], move |g, v| g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5))
        }
        "softmax" => {
            let x = randn(rng, &[r, c]);
            projected(rng, vec![x], |g, v| g.softmax(v[0]))
        }
        "sum" | "mean" => {
            let axis = [None, Some(0), Some(1)][rng.random_range(0..3)];
            let x = randn(rng, &[r, c]);
            if op == "sum" {
                projected(rng, vec![x], move |g, v| g.sum(v[0], axis))
            } else {
                projected(rng, vec![x], move |g, v| g.mean(v[0], axis))
            }
        }
        "add" | "mul" => {
            let b_shape = [vec![r, c], vec![1, c], vec![c], vec![r, 1]][rng.random_range(0..4)].clone();
            let (a, b) = (randn(rng, &[r, c]), randn(rng, &b_shape));
            if op == "add" {
                projected(rng, vec![a, b], |g, v| g.add(v[0], v[1]))
            } else {
                projected(rng, vec![a, b], |g, v| g.mul(v[0], v[1]))
            }
        }
        "scale" => {
            let k = randn(rng, &[1]).item();
            let x = randn(rng, &[r, c]);
            projected(rng, vec![x], move |g, v| Ok(g.scale(v[0], k)))
        }
        "mse" => {
            let (a, b) = (randn(rng, &[r, c]), randn(rng, &[r, c]));
            Ok(case(vec![a, b], |g, v| g.mse(v[0], v[1])))
        }
        "cross_entropy" => {
            let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
            let weights: Option<Vec<f64>> =
                rng.random_bool(0.5).then(|| (0..c).map(|_| rng.random_range(0.2..2.0)).collect());
            let x = randn(rng, &[r, c]);
            Ok(case(vec![x], move |g, v| g.cross_entropy(v[0], &targets, weights.as_deref())))
        }
        "embedding_lookup" => {
            let idx: Vec<usize> = (0..dim(rng, 1, 6)).map(|_| rng.random_range(0..r)).collect();
            let table = randn(rng, &[r, c]);
            projected(rng, vec![table], move |g, v| g.embedding_lookup(v[0], &idx))
        }
        "concat" => {
            let axis = rng.random_range(0..2);
            let other = if axis == 0 { [dim(rng, 1, 3), c] } else { [r, dim(rng, 1, 3)] };
            let (a, b) = (randn(rng, &[r, c]), randn(rng, &other));
            projected(rng, vec![a, b], move |g, v| g.concat(&[v[0], v[1]], axis))
        }
        "slice" => {
            let axis = rng.random_range(0..2);
            let len = [r, c][axis];
            let start = rng.random_range(0..len);
            let end = rng.random_range(start + 1..=len);
            let x = randn(rng, &[r, c]);
            projected(rng, vec![x], move |g, v| g.slice(v[0], axis, start, end))
        }
        "avg_pool" | "max_pool" => {
            let k = rng.random_range(1..=2);
            let s = rng.random_range(1..=2);
            let (h, w) = (rng.random_range(k..=5), rng.random_range(k..=5));
            let (n, ch) = (dim(rng, 1, 2), dim(rng, 1, 2));
            let x = randn(rng, &[n, ch, h, w]);
            if op == "avg_pool" {
                projected(rng, vec![x], move |g, v| g.avg_pool(v[0], k, s))
            } else {
                let pad = rng.random_range(0..=k / 2);
                projected(rng, vec![x], move |g, v| g.max_pool(v[0], k, s, pad))
            }
        }
        "global_avg_pool" => {
            let shape = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
            let x = randn(rng, &shape);
            projected(rng, vec![x], |g, v| g.global_avg_pool(v[0]))
        }
        "reshape" => {
            let x = randn(rng, &[r, c]);
            projected(rng, vec![x], move |g, v| g.reshape(v[0], &[c, r]))
        }
        _ => unreachable!("unknown op {op}"),
    }
}

/// Grad-check every differentiable op on `instances` random shapes and
/// values each, in f64.
pub fn op_suite(instances: usize, seed: u64, h: f64, tol: f64) -> Result<Vec<OpCheck>, TensorError> {
    let mut out = Vec::with_capacity(SUITE_OPS.len());
    for (k, op) in SUITE_OPS.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut max_rel_err = 0.0f64;
        for _ in 0..instances {
            let (inputs, f) = instance(op, &mut rng)?;
            let r = grad_check(&*f, &inputs, h, tol)?;
            max_rel_err = max_rel_err.max(r.max_rel_err);
        }
        out.push(OpCheck { op, instances, max_rel_err, passed: max_rel_err < tol });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_at_one_passes() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let y = g.relu(v[0]);
                g.sum(y, None)
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed);
        assert!((r.entries[0].analytic - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let res = grad_check(
            |g, v| {
                calls.set(calls.get() + 1.0);
                let y = g.scale(v[0], calls.get());
                g.sum(y, None)
            },
            &[x],
            1e-5,
            1e-4,
        );
        assert!(matches!(res, Err(TensorError::NonDeterministic { .. })));
    }
}
