//! Central finite-difference checks of analytic gradients (64-bit).

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;

/// Default finite-difference step.
pub const STEP: f64 = 1e-5;

/// Below this magnitude gradients are compared absolutely rather than
/// relatively; central differences in f64 carry roughly 1e-10 of noise.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (input index, element index, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
        .collect();
    check_subset(inputs, &all, f)
}

/// Like [`check`] but only for the listed (input, element) pairs.
pub fn check_subset<F>(inputs: &[Tensor<f64>], entries: &[(usize, usize)], f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let graph = Graph::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = f(&graph, &vars)?;
    loss.backward()?;
    let analytic: Vec<Option<Tensor<f64>>> = vars.iter().map(|v| v.grad()).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vs: Vec<Var<f64>> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vs)?.item())
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut work = inputs.to_vec();
    for &(i, e) in entries {
        let orig = work[i].data()[e];
        work[i].data_mut()[e] = orig + STEP;
        let plus = eval(&work)?;
        work[i].data_mut()[e] = orig - STEP;
        let minus = eval(&work)?;
        work[i].data_mut()[e] = orig;
        let numeric = (plus - minus) / (2.0 * STEP);
        let a = analytic[i].as_ref().map_or(0.0, |g| g.data()[e]);
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = Some((i, e, a, numeric));
            }
        }
    }
    Ok(report)
}

type Case = for<'a, 'g> fn(&'a [Var<'g, f64>]) -> Result<Var<'g, f64>>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

/// One check per differentiable tape operation, each reduced to a scalar
/// through a nonlinearity so that the backward pass sees a varied upstream
/// gradient.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b = random(&mut rng, &[3, 4], -1.0, 1.0);
    let pos = random(&mut rng, &[2, 3, 4], 0.5, 1.5);
    let cases: Vec<(&str, Case)> = vec![
        ("add", |v| Ok(v[0].add(&v[1])?.square().sum())),
        ("sub", |v| Ok(v[0].sub(&v[1])?.square().sum())),
        ("mul", |v| Ok(v[0].mul(&v[1])?.sum())),
        ("div", |v| Ok(v[1].div(&v[2])?.sum())),
        ("neg", |v| Ok(v[0].neg().mul(&v[2])?.square().sum())),
        ("exp", |v| Ok(v[0].exp().sum())),
        ("ln", |v| Ok(v[2].ln().sum())),
        ("sqrt", |v| Ok(v[2].sqrt().sum())),
        ("abs", |v| Ok(v[0].abs().mul(&v[0])?.sum())),
        ("sigmoid", |v| Ok(v[0].sigmoid().square().sum())),
        ("gelu", |v| Ok(v[0].gelu().square().sum())),
        ("relu", |v| Ok(v[0].relu().mul(&v[0])?.sum())),
        ("scale", |v| Ok(v[0].scale(-2.5).add_scalar(1.0).square().sum())),
        ("matmul", |v| Ok(v[0].matmul(&v[1].transpose()?)?.square().sum())),
        ("softmax", |v| Ok(v[0].softmax()?.square().sum())),
        ("layer_norm", |v| Ok(v[0].layer_norm(1e-5).mul(&v[1])?.sum())),
        ("permute", |v| {
            Ok(v[0]
                .permute(&[2, 0, 1])?
                .reshape(&[4, 6])?
                .narrow(1, 1, 3)?
                .square()
                .sum())
        }),
        ("transpose", |v| {
            Ok(v[0].transpose()?.mul(&v[2].transpose()?)?.square().sum())
        }),
        ("sum_axis", |v| Ok(v[0].sum_axis(1)?.square().sum())),
        ("mean_axis", |v| Ok(v[0].mean_axis(0)?.square().sum())),
        ("mean", |v| Ok(v[0].square().mean())),
        ("concat", |v| {
            Ok(Var::concat(&[v[0].narrow(0, 0, 1)?, v[1].reshape(&[1, 3, 4])?], 0)?
                .square()
                .sum())
        }),
        ("concat_last", |v| Ok(Var::concat(&[v[0], v[2]], 2)?.square().sum())),
        ("gather", |v| {
            Ok(v[0]
                .reshape(&[6, 4])?
                .gather_rows(Arc::from(vec![5, 0, 5, 2]))?
                .square()
                .sum())
        }),
        ("scatter", |v| {
            Ok(v[1]
                .scatter_rows(Arc::from(vec![4, 1, 4]), 6)?
                .square()
                .mul(&v[0].reshape(&[6, 4])?)?
                .sum())
        }),
        ("dwconv", |v| {
            let x = v[0].reshape(&[1, 2, 3, 4])?;
            let k = Var::concat(&[v[1], v[1].scale(0.5), v[1].narrow(0, 0, 3)?], 0)?;
            let k = k.reshape(&[9, 4])?.narrow(0, 0, 9)?.reshape(&[3, 3, 4])?;
            Ok(x.dwconv3x3(&k)?.square().sum())
        }),
        ("replace", |v| {
            let mask: Vec<bool> = (0..24).map(|i| i % 3 == 0).collect();
            Ok(v[0].replace_masked(&mask, &[0.25; 24])?.square().sum())
        }),
    ];
    let mut out = Vec::new();
    for (name, case) in cases {
        out.push((name, check(&[a.clone(), b.clone(), pos.clone()], |_, v| case(v))?));
    }
    // Sampling positions stay clear of integer coordinates, where the
    // interpolant has a kink.
    let img = random(&mut rng, &[6, 7, 3], 0.0, 1.0);
    let pts: Vec<f64> = (0..10)
        .flat_map(|_| [rng.gen_range(0.2..5.8), rng.gen_range(0.2..4.8)])
        .map(|x: f64| if (x - x.round()).abs() < 0.05 { x + 0.1 } else { x })
        .collect();
    let coords = Tensor::new([10, 2], pts)?;
    out.push((
        "bilinear",
        check(&[img, coords], |_, v| Ok(v[0].bilinear_sample(&v[1])?.0.square().sum()))?,
    ));
    Ok(out)
}
