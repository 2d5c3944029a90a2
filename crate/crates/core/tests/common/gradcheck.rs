//! Central finite-difference oracle for the autodiff primitives.
//!
//! Each case maps random f64 inputs to an output tensor. The scalar under
//! test is `sum(output ∘ R)` for a fixed random projection `R`, so every
//! output element contributes a distinct weight.

use tablediff::numerics::{concat, Rng, Tape, Tensor, Var};
use tablediff::Result;

pub const H: f64 = 1e-5;

pub type Build = for<'t> fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>;

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
    /// Inputs within this distance of a kink are redrawn.
    pub avoid: Option<fn(f64) -> bool>,
}

fn case(name: &'static str, shapes: &[&[usize]], build: Build) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build,
        avoid: None,
    }
}

pub fn cases() -> Vec<Case> {
    let mut v = vec![
        case("matmul", &[&[3, 4], &[4, 2]], |x| x[0].matmul(x[1])),
        case("matmul_batched", &[&[2, 3, 4], &[2, 4, 5]], |x| x[0].matmul(x[1])),
        case("conv2d", &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], |x| {
            x[0].conv2d(x[1], Some(x[2]), 2, 1)
        }),
        case("conv2d_nopad", &[&[1, 2, 4, 4], &[3, 2, 2, 2]], |x| x[0].conv2d(x[1], None, 1, 0)),
        case("transposed_conv2d", &[&[2, 3, 3, 3], &[3, 2, 4, 4], &[2]], |x| {
            x[0].transposed_conv2d(x[1], Some(x[2]), 2, 1)
        }),
        case("add", &[&[3, 4], &[3, 4]], |x| x[0].add(x[1])),
        case("sub", &[&[3, 4], &[3, 4]], |x| x[0].sub(x[1])),
        case("mul", &[&[3, 4], &[3, 4]], |x| x[0].mul(x[1])),
        case("scalar_scale", &[&[5]], |x| x[0].scalar_scale(-1.7)),
        case("add_scalar", &[&[5]], |x| x[0].add_scalar(0.3)),
        case("gelu", &[&[3, 4]], |x| x[0].gelu()),
        case("silu", &[&[3, 4]], |x| x[0].silu()),
        case("tanh", &[&[3, 4]], |x| x[0].tanh()),
        case("exp", &[&[3, 4]], |x| x[0].exp()),
        case("layer_norm", &[&[4, 6]], |x| x[0].layer_norm(1e-5)),
        case("softmax_last", &[&[3, 5]], |x| x[0].softmax(1)),
        case("softmax_first", &[&[3, 5]], |x| x[0].softmax(0)),
        case("reshape", &[&[2, 6]], |x| x[0].reshape([3, 4])),
        case("transpose", &[&[2, 3, 4]], |x| x[0].transpose(&[2, 0, 1])),
        case("slice", &[&[3, 5, 2]], |x| x[0].slice(1, 1, 4)),
        case("concat", &[&[2, 3], &[2, 2]], |x| concat(&[x[0], x[1]], 1)),
        case("expand", &[&[2, 1, 3]], |x| x[0].expand(1, 4)),
        case("mean", &[&[3, 4]], |x| x[0].mean()),
        case("sum", &[&[3, 4]], |x| x[0].sum()),
        case("mse_loss", &[&[3, 4], &[3, 4]], |x| x[0].mse_loss(x[1])),
    ];
    v.push(Case {
        name: "clamp",
        shapes: vec![vec![3, 4]],
        build: |x| x[0].clamp(-1.0, 1.0),
        avoid: Some(|v| (v.abs() - 1.0).abs() < 1e-3),
    });
    v
}

fn projected(build: Build, inputs: &[Tensor<f64>], proj: Option<&Tensor<f64>>) -> Result<(f64, Tensor<f64>)> {
    let tape = Tape::<f64>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&vars)?;
    let val = out.value();
    let r = match proj {
        Some(r) => r.clone(),
        None => Tensor::from_fn(val.shape().to_vec(), |i| ((i as f64 + 1.0) * 0.618).fract() * 2.0 - 1.0),
    };
    let s: f64 = val.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
    Ok((s, r))
}

/// Max relative error between autodiff and central differences.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-3)`; the floor keeps
/// near-zero gradients from dominating.
pub fn max_rel_error(c: &Case, rng: &mut Rng) -> Result<f64> {
    let inputs: Vec<Tensor<f64>> = c
        .shapes
        .iter()
        .map(|s| {
            Tensor::from_fn(s.clone(), |_| loop {
                let v = rng.uniform_range(-2.0, 2.0);
                if !c.avoid.is_some_and(|bad| bad(v)) {
                    break v;
                }
            })
        })
        .collect();
    let (_, proj) = projected(c.build, &inputs, None)?;

    let tape = Tape::<f64>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (c.build)(&vars)?;
    let r = tape.constant(proj.clone());
    let loss = out.mul(r)?.sum()?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let fp = projected(c.build, &plus, Some(&proj))?.0;
            let fm = projected(c.build, &minus, Some(&proj))?.0;
            let numeric = (fp - fm) / (2.0 * H);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
