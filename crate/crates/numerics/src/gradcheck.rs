use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels::AttentionLayout;
use crate::tape::{attention, Tape, Var};
use crate::tensor::Tensor;

/// Largest relative disagreement between tape gradients and central
/// differences of `f` over every element of `params`.
///
/// Relative error per element is `|a - n| / max(1e-8, |a| + |n|)`. `f` must be
/// deterministic (no active dropout).
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    Ok(finite_diff_errors(f, params, &[eps])?.into_iter().fold(0.0, f64::max))
}

/// Per-parameter worst relative error, same convention as
/// [`finite_diff_check`].
///
/// Each element is differenced at every step in `steps` and scored by the
/// closest one. Large steps lose accuracy near kinks and small ones drown
/// tiny gradients in roundoff; a genuinely wrong gradient disagrees at all of
/// them.
pub fn finite_diff_errors<F>(f: F, params: &[Tensor], steps: &[f64]) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.variable(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<'_>> = values.iter().map(|p| tape.constant(p.clone())).collect();
        Ok(f(&tape, &vars)?.value().data()[0])
    };

    let mut worst = vec![0.0_f64; params.len()];
    let mut work: Vec<Tensor> = params.to_vec();
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let original = params[p].data()[i];
            let a = analytic[p].data()[i];
            let mut best = f64::INFINITY;
            for &eps in steps {
                work[p].data_mut()[i] = original + eps;
                let plus = eval(&work)?;
                work[p].data_mut()[i] = original - eps;
                let minus = eval(&work)?;
                work[p].data_mut()[i] = original;
                let numeric = (plus - minus) / (2.0 * eps);
                best = best.min((a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs()));
            }
            worst[p] = worst[p].max(best);
        }
    }
    Ok(worst)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Push `x` through a fixed random linear readout to get a scalar.
fn readout<'t>(x: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = x.tape().constant(random(&x.shape(), seed));
    Ok(x.mul(w)?.sum())
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>);

/// Worst relative gradient error of every differentiable op at random
/// inputs, with central step `eps`.
pub fn op_gradient_suite(eps: f64) -> Result<Vec<(&'static str, f64)>> {
    let cases: Vec<OpCase> = vec![
        ("add", vec![random(&[3, 4], 1), random(&[3, 4], 2)], Box::new(|_, v| readout(v[0].add(v[1])?, 9))),
        ("add-broadcast", vec![random(&[2, 3, 4], 1), random(&[4], 2)], Box::new(|_, v| readout(v[0].add(v[1])?, 9))),
        ("sub", vec![random(&[3, 4], 1), random(&[4], 2)], Box::new(|_, v| readout(v[0].sub(v[1])?, 9))),
        ("mul", vec![random(&[3, 4], 1), random(&[3, 4], 2)], Box::new(|_, v| readout(v[0].mul(v[1])?, 9))),
        ("mul-broadcast", vec![random(&[3, 4], 1), random(&[1, 4], 2)], Box::new(|_, v| readout(v[0].mul(v[1])?, 9))),
        ("scale", vec![random(&[3, 4], 1)], Box::new(|_, v| readout(v[0].scale(-1.7), 9))),
        ("matmul-3d", vec![random(&[2, 3, 4], 1), random(&[4, 5], 2)], Box::new(|_, v| readout(v[0].matmul(v[1])?, 9))),
        ("concat", vec![random(&[3, 2], 1), random(&[3, 4], 2)], Box::new(|_, v| readout(v[0].concat(v[1])?, 9))),
        ("transpose", vec![random(&[3, 5], 1)], Box::new(|_, v| readout(v[0].transpose()?, 9))),
        ("reshape", vec![random(&[3, 4], 1)], Box::new(|_, v| readout(v[0].reshape(&[2, 6])?, 9))),
        ("softmax-last", vec![random(&[3, 4], 1)], Box::new(|_, v| readout(v[0].softmax(1)?, 9))),
        ("softmax-first", vec![random(&[3, 4], 1)], Box::new(|_, v| readout(v[0].softmax(0)?, 9))),
        ("sigmoid", vec![random(&[3, 4], 1)], Box::new(|_, v| readout(v[0].sigmoid(), 9))),
        ("relu", vec![random(&[3, 4], 1)], Box::new(|_, v| readout(v[0].relu(), 9))),
        (
            "layer_norm",
            vec![random(&[3, 6], 1), random(&[6], 2), random(&[6], 3)],
            Box::new(|_, v| readout(v[0].layer_norm(v[1], v[2])?, 9)),
        ),
        ("gather", vec![random(&[5, 3], 1)], Box::new(|_, v| readout(v[0].gather_rows(&[4, 0, 4, 2])?, 9))),
        ("dropout", vec![random(&[4, 4], 1)], Box::new(|_, v| readout(v[0].dropout(0.3, 77, true)?, 9))),
        ("segment_max", vec![random(&[6, 3], 1)], Box::new(|_, v| readout(v[0].segment_max(&[0..2, 2..6, 3..4])?, 9))),
        ("cross_entropy", vec![random(&[4, 5], 1)], Box::new(|_, v| v[0].cross_entropy(&[1, 4, 0, 2], &[true, false, true, true]))),
        ("mean", vec![random(&[3, 4], 1)], Box::new(|_, v| v[0].mul(v[0]).map(|x| x.mean()))),
        (
            "attention",
            vec![random(&[5, 4], 1), random(&[6, 4], 2), random(&[6, 4], 3)],
            Box::new(|_, v| {
                let mut layout = AttentionLayout::new();
                layout.push(0..3, vec![0, 1, 2], true);
                layout.push(3..5, vec![5, 3, 1, 1], false);
                readout(attention(v[0], v[1], v[2], 2, Arc::new(layout))?, 9)
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, params, f)| Ok((name, finite_diff_check(|tape, v| f(tape, v), &params, eps)?)))
        .collect()
}
