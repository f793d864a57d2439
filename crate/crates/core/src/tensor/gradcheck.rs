//! Central finite-difference checks for tape gradients, run in `f64`.

use super::params::{Graph, ParamStore};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Number of scalar inputs compared.
    pub checked: usize,
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences with step `h`, perturbing every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, floor: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let empty = ParamStore::new();
    check_with_store(&empty, inputs, h, floor, |g, vars| f(g, vars))
}

/// As [`check`], with the parameters of `store` bound as constants.
pub fn check_with_store<F>(store: &ParamStore, inputs: &[Tensor<f64>], h: f64, floor: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::frozen(store);
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::frozen(store);
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
        for j in 0..x.len() {
            let orig = x.data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

type Build = fn(&mut Tape<f64>, &[Var], &[Tensor<f64>]) -> Result<Var>;

/// One named differentiable op: the shapes of its random inputs and a
/// closure reducing its output to a scalar. `aux` holds fixed random
/// tensors (not differentiated) used to weight outputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Vec<usize>>,
    pub aux: Vec<Vec<usize>>,
    pub avoid_zero: bool,
    /// Finite-difference step.
    pub h: f64,
    pub build: Build,
}

fn weighted_sum(tape: &mut Tape<f64>, out: Var, w: &Tensor<f64>) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(w.reshape(&shape)?);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

macro_rules! case {
    ($name:expr, [$($i:expr),*], [$($a:expr),*], $avoid:expr, $build:expr) => {
        OpCase {
            name: $name,
            inputs: vec![$($i.to_vec()),*],
            aux: vec![$($a.to_vec()),*],
            avoid_zero: $avoid,
            h: 1e-3,
            build: $build,
        }
    };
}

/// Every primitive op on the tape, each reduced to a scalar.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case!("add", [[3, 4], [3, 4]], [[12]], false, |t, v, a| { let y = t.add(v[0], v[1])?; weighted_sum(t, y, &a[0]) }),
        case!("sub", [[3, 4], [3, 4]], [[12]], false, |t, v, a| { let y = t.sub(v[0], v[1])?; weighted_sum(t, y, &a[0]) }),
        case!("mul", [[3, 4], [3, 4]], [[12]], false, |t, v, a| { let y = t.mul(v[0], v[1])?; weighted_sum(t, y, &a[0]) }),
        case!("add_row", [[2, 3, 4], [4]], [[24]], false, |t, v, a| { let y = t.add_row(v[0], v[1])?; weighted_sum(t, y, &a[0]) }),
        case!("mul_row", [[2, 3, 4], [4]], [[24]], false, |t, v, a| { let y = t.mul_row(v[0], v[1])?; weighted_sum(t, y, &a[0]) }),
        case!("scale", [[5]], [[5]], false, |t, v, a| { let y = t.scale(v[0], -1.7); weighted_sum(t, y, &a[0]) }),
        case!("add_scalar", [[5]], [[5]], false, |t, v, a| { let y = t.add_scalar(v[0], 0.3); let y = t.square(y); weighted_sum(t, y, &a[0]) }),
        case!("leaky_relu", [[10]], [[10]], true, |t, v, a| { let y = t.leaky_relu(v[0], 0.01); weighted_sum(t, y, &a[0]) }),
        case!("relu", [[10]], [[10]], true, |t, v, a| { let y = t.relu(v[0]); weighted_sum(t, y, &a[0]) }),
        case!("sigmoid", [[10]], [[10]], false, |t, v, a| { let y = t.sigmoid(v[0]); weighted_sum(t, y, &a[0]) }),
        case!("tanh", [[10]], [[10]], false, |t, v, a| { let y = t.tanh(v[0]); weighted_sum(t, y, &a[0]) }),
        case!("exp", [[10]], [[10]], false, |t, v, a| { let y = t.exp(v[0]); weighted_sum(t, y, &a[0]) }),
        case!("square", [[10]], [[10]], false, |t, v, a| { let y = t.square(v[0]); weighted_sum(t, y, &a[0]) }),
        case!("sum", [[2, 5]], [], false, |t, v, _| { let y = t.square(v[0]); Ok(t.sum(y)) }),
        case!("mean", [[2, 5]], [], false, |t, v, _| { let y = t.square(v[0]); Ok(t.mean(y)) }),
        case!("reshape", [[2, 6]], [[12]], false, |t, v, a| { let y = t.reshape(v[0], &[3, 4])?; let y = t.square(y); weighted_sum(t, y, &a[0]) }),
        case!("permute", [[2, 3, 4]], [[24]], false, |t, v, a| { let y = t.permute(v[0], &[2, 0, 1])?; weighted_sum(t, y, &a[0]) }),
        case!("concat", [[2, 3, 2], [2, 1, 2]], [[16]], false, |t, v, a| { let y = t.concat(&[v[0], v[1]], 1)?; let y = t.square(y); weighted_sum(t, y, &a[0]) }),
        case!("narrow", [[2, 5, 3]], [[12]], false, |t, v, a| { let y = t.narrow(v[0], 1, 1, 2)?; weighted_sum(t, y, &a[0]) }),
        case!("index_select", [[4, 3]], [[15]], false, |t, v, a| { let y = t.index_select(v[0], &[2, 0, 2, 3, 1])?; let y = t.square(y); weighted_sum(t, y, &a[0]) }),
        case!("linear", [[2, 3, 4], [5, 4], [5]], [[30]], false, |t, v, a| { let y = t.linear(v[0], v[1], Some(v[2]))?; let y = t.square(y); weighted_sum(t, y, &a[0]) }),
        case!("matmul", [[3, 4], [4, 2]], [[6]], false, |t, v, a| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y, &a[0]) }),
        case!("bmm", [[2, 3, 4], [2, 4, 5]], [[30]], false, |t, v, a| { let y = t.bmm(v[0], v[1], false)?; weighted_sum(t, y, &a[0]) }),
        case!("bmm_trans_b", [[2, 3, 4], [2, 5, 4]], [[30]], false, |t, v, a| { let y = t.bmm(v[0], v[1], true)?; weighted_sum(t, y, &a[0]) }),
        case!("conv2d", [[2, 2, 5, 5], [3, 2, 3, 3], [3]], [[54]], false, |t, v, a| { let y = t.conv2d(v[0], v[1], v[2])?; weighted_sum(t, y, &a[0]) }),
        case!("conv_transpose2d", [[2, 3, 3, 3], [3, 2, 3, 3], [2]], [[100]], false, |t, v, a| { let y = t.conv_transpose2d(v[0], v[1], v[2])?; weighted_sum(t, y, &a[0]) }),
        // third derivatives of the normalisation are large enough that the
        // truncation error at h = 1e-3 alone reaches ~3e-4
        OpCase {
            h: 1e-4,
            ..case!("layer_norm", [[3, 6], [6], [6]], [[18]], false, |t, v, a| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, &a[0])
            })
        },
        case!("softmax", [[3, 5]], [[15]], false, |t, v, a| { let y = t.softmax(v[0]); weighted_sum(t, y, &a[0]) }),
        case!("cross_entropy", [[4, 6]], [], false, |t, v, _| t.cross_entropy_weighted(v[0], &[1, 5, 0, 3], vec![0.1, 0.4, 0.2, 0.3])),
        case!("weighted_sq_err", [[3, 4], [3, 4]], [], false, |t, v, _| t.weighted_sq_err(v[0], v[1], vec![0.5, 1.5, 0.25])),
        case!("mse", [[3, 4], [3, 4]], [], false, |t, v, _| t.mse(v[0], v[1])),
        case!("gaussian_heatmaps", [[2, 4]], [[2 * 2 * 6 * 5]], false, |t, v, a| {
            let p = t.sigmoid(v[0]);
            let y = t.gaussian_heatmaps(p, 6, 5, 0.3)?;
            weighted_sum(t, y, &a[0])
        }),
        case!("wkv", [[2, 5, 3], [2, 5, 3], [3], [3]], [[30]], false, |t, v, a| {
            let y = t.wkv(v[0], v[1], v[2], v[3])?;
            weighted_sum(t, y, &a[0])
        }),
        case!("time_shift", [[2, 4, 3]], [[24]], false, |t, v, a| { let y = t.time_shift(v[0])?; weighted_sum(t, y, &a[0]) }),
        case!("mlp3", [[4, 5], [8, 5], [8], [8, 8], [8], [3, 8], [3]], [[12]], false, |t, v, a| {
            let h = t.linear(v[0], v[1], Some(v[2]))?;
            let h = t.tanh(h);
            let h = t.linear(h, v[3], Some(v[4]))?;
            let h = t.sigmoid(h);
            let y = t.linear(h, v[5], Some(v[6]))?;
            weighted_sum(t, y, &a[0])
        }),
    ]
}

/// Draws uniform `[-1, 1]` inputs for `case` and checks its gradients.
pub fn run_case<R: rand::Rng>(case: &OpCase, rng: &mut R) -> Result<GradCheck> {
    let mut draw = |shape: &[usize], avoid: bool| {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..=1.0);
                if avoid && x.abs() < 0.05 { x.signum() * 0.05 + x } else { x }
            })
            .collect();
        Tensor::new(shape, data)
    };
    let inputs = case.inputs.iter().map(|s| draw(s, case.avoid_zero)).collect::<Result<Vec<_>>>()?;
    let aux = case.aux.iter().map(|s| draw(s, false)).collect::<Result<Vec<_>>>()?;
    let build = case.build;
    check(&inputs, case.h, 1e-2, |t, v| build(t, v, &aux))
}
