//! Central finite-difference checks for tape gradients, in f64.

use crate::autodiff::{Tape, Var};
use crate::model::Denoiser;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::tokens::TokenizedPrompt;

pub const STEP: f64 = 1e-6;

/// Builds a scalar from `inputs`; runs on both recording and inference tapes.
pub type Graph<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var> + 'a;

/// `||a - b|| / max(||a||, ||b||)`, or the absolute distance when both
/// vectors are (near) zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn numeric_gradient(len: usize, f: impl Fn(usize, f64) -> crate::Result<f64>) -> crate::Result<Vec<f64>> {
    (0..len)
        .map(|i| Ok((f(i, STEP)? - f(i, -STEP)?) / (2.0 * STEP)))
        .collect()
}

fn bumped(t: &Tensor<f64>, i: usize, delta: f64) -> crate::Result<Tensor<f64>> {
    let mut d = t.to_vec();
    d[i] += delta;
    Tensor::new(t.shape(), d)
}

/// Worst relative error between analytic and numeric gradients of `f`
/// over all of its inputs.
pub fn check_graph(inputs: &[Tensor<f64>], f: &Graph) -> crate::Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let eval = |moved: &[Tensor<f64>]| -> crate::Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = moved.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let numeric = numeric_gradient(inputs[k].numel(), |i, delta| {
            let mut moved = inputs.to_vec();
            moved[k] = bumped(&inputs[k], i, delta)?;
            eval(&moved)
        })?;
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Worst per-parameter relative error of the noise-prediction loss
/// `mse(model(z, t, tokens), target)`, with the parameter's name.
pub fn check_denoiser(
    model: &Denoiser<f64>,
    z: &Tensor<f64>,
    t: usize,
    tokens: &TokenizedPrompt,
    target: &Tensor<f64>,
) -> crate::Result<(f64, String)> {
    let loss_on = |m: &Denoiser<f64>, tape: &mut Tape<f64>| -> crate::Result<(Var, Vec<Var>)> {
        let vars = m.bind(tape);
        let zv = tape.constant(z.clone());
        let tv = tape.constant(target.clone());
        let pred = m.forward_on_tape(tape, &vars, zv, t, tokens, None)?;
        Ok((tape.mse(pred, tv)?, vars))
    };
    let mut tape = Tape::new();
    let (loss, vars) = loss_on(model, &mut tape)?;
    tape.backward(loss)?;

    let mut worst = (0.0, String::new());
    for (k, (name, p)) in model.params().iter().enumerate() {
        let analytic = tape.grad(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]);
        let numeric = numeric_gradient(p.numel(), |i, delta| {
            let mut m = model.clone();
            m.params_mut()[name.as_str()] = bumped(p, i, delta)?;
            let mut tape = Tape::inference();
            let (l, _) = loss_on(&m, &mut tape)?;
            tape.value(l).item()
        })?;
        let err = relative_error(&analytic, &numeric);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    Ok(worst)
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub graph: Box<Graph<'static>>,
}

/// Reduces a tensor to a scalar through a fixed random projection, so
/// every output element gets a distinct weight.
fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = SeededRng::new(seed);
    let w = tape.constant(rng.normal_tensor(tape.value(x).shape(), 1.0));
    let p = tape.mul(x, w)?;
    tape.mean(p)
}

type RawCase = (&'static str, Vec<Tensor<f64>>, Box<Graph<'static>>);

/// One small graph per differentiable tape operation, on random inputs.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = SeededRng::new(seed);
    let mut r = |shape: &[usize]| rng.normal_tensor::<f64>(shape, 1.0);
    let cases: Vec<RawCase> = vec![
        ("matmul", vec![r(&[2, 3, 4]), r(&[4, 5])], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 1)
        })),
        ("matmul_nt", vec![r(&[2, 3, 4]), r(&[2, 5, 4])], Box::new(|t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            project(t, y, 2)
        })),
        ("add", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, 3)
        })),
        ("sub", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, 4)
        })),
        ("mul", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, 5)
        })),
        ("scale", vec![r(&[5])], Box::new(|t, v| {
            let y = t.scale(v[0], -1.7)?;
            project(t, y, 6)
        })),
        ("add_bias", vec![r(&[2, 3, 4]), r(&[4])], Box::new(|t, v| {
            let y = t.add_bias(v[0], v[1])?;
            project(t, y, 7)
        })),
        ("silu", vec![r(&[3, 4])], Box::new(|t, v| {
            let y = t.silu(v[0])?;
            project(t, y, 8)
        })),
        ("layer_norm", vec![r(&[3, 6]), r(&[6]), r(&[6])], Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            project(t, y, 9)
        })),
        ("embedding", vec![r(&[5, 3])], Box::new(|t, v| {
            let y = t.embedding(v[0], &[4, 0, 4, 2])?;
            project(t, y, 10)
        })),
        ("mean", vec![r(&[3, 4])], Box::new(|t, v| t.mean(v[0]))),
        ("mse", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| t.mse(v[0], v[1]))),
        ("softmax", vec![r(&[2, 3, 5])], Box::new(|t, v| {
            let y = t.softmax(v[0])?;
            project(t, y, 11)
        })),
        ("permute", vec![r(&[2, 3, 4])], Box::new(|t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            project(t, y, 12)
        })),
        ("reshape", vec![r(&[2, 6])], Box::new(|t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            project(t, y, 13)
        })),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, graph)| OpCase { name, inputs, graph })
        .collect()
}
