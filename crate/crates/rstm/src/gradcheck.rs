//! Central finite-difference verification of tape gradients.
//!
//! Always runs in 64-bit; 32-bit rounding makes the stated tolerances
//! unreachable.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Relative-error denominator floor.
const FLOOR: f64 = 1e-8;

/// Max relative error between tape gradients and central differences over
/// every coordinate of every input.
///
/// `build` registers nothing itself; it receives the inputs already on the
/// tape (in order) and must return a scalar loss variable.
pub fn grad_check<F>(build: &F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId>,
{
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    grad_check_coords(build, inputs, eps, FLOOR, &coords)
}

/// Like [`grad_check`] but only probes up to `max_per_input` randomly chosen
/// coordinates per input tensor. Analytic gradients are still computed for
/// everything; only the finite-difference probes are subsampled.
pub fn grad_check_sampled<F, R: Rng>(
    build: &F,
    inputs: &[Tensor<f64>],
    eps: f64,
    max_per_input: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId>,
{
    grad_check_sampled_with_floor(build, inputs, eps, max_per_input, FLOOR, rng)
}

/// [`grad_check_sampled`] with an explicit denominator floor. Deep graphs
/// with sum losses carry ~1e-11 absolute central-difference noise, so
/// coordinates whose true gradient sits below that scale can only be
/// compared absolutely; a floor around 1e-6 expresses that.
pub fn grad_check_sampled_with_floor<F, R: Rng>(
    build: &F,
    inputs: &[Tensor<f64>],
    eps: f64,
    max_per_input: usize,
    floor: f64,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId>,
{
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            if n <= max_per_input {
                (0..n).collect()
            } else {
                let mut idx: Vec<usize> = sample(rng, n, max_per_input).into_vec();
                idx.sort_unstable();
                idx
            }
        })
        .collect();
    grad_check_coords(build, inputs, eps, floor, &coords)
}

fn grad_check_coords<F>(
    build: &F,
    inputs: &[Tensor<f64>],
    eps: f64,
    floor: f64,
    coords: &[Vec<usize>],
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("leaf gradient").to_vec())
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<VarId> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let loss = build(&mut t, &ids)?;
        Ok(t.value(loss).data()[0])
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for t in &mut work {
        t.requires_grad = false;
    }

    let mut max_err = 0.0f64;
    for (ti, coord_list) in coords.iter().enumerate() {
        for &ci in coord_list {
            let orig = work[ti].data()[ci];
            let mut central = |h: f64| -> Result<f64> {
                work[ti].data_mut()[ci] = orig + h;
                let fp = eval(&work)?;
                work[ti].data_mut()[ci] = orig - h;
                let fm = eval(&work)?;
                work[ti].data_mut()[ci] = orig;
                Ok((fp - fm) / (2.0 * h))
            };
            // Richardson extrapolation of the central difference cancels
            // the O(eps^2) truncation term.
            let d1 = central(eps)?;
            let d2 = central(eps / 2.0)?;
            let numeric = (4.0 * d2 - d1) / 3.0;
            let a = analytic[ti][ci];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Convenience wrapper checking a single-input scalar function.
pub fn grad_check_single<F>(f: &F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, VarId) -> Result<VarId>,
{
    grad_check(&|tape: &mut Tape<f64>, ids: &[VarId]| f(tape, ids[0]), &[x.clone()], eps)
}

/// Gradient-checks one transformer block variant end to end: the block input
/// and every parameter are probed against central differences of a sum-of-
/// outputs loss. `max_per_input` limits probes per tensor (None = all).
pub fn block_grad_check<R: Rng>(
    spec: &crate::blocks::BlockSpec,
    n: usize,
    h: usize,
    w: usize,
    eps: f64,
    max_per_input: Option<usize>,
    rng: &mut R,
) -> Result<f64> {
    use crate::blocks::{transformer_block_forward, BlockVars, ParamCursor};

    spec.validate()?;
    let descs = spec.param_descs();
    let names: Vec<String> = descs.iter().map(|d| d.name.clone()).collect();
    let mut inputs: Vec<Tensor<f64>> = Vec::with_capacity(descs.len() + 1);
    let x_data: Vec<f64> = (0..n * h * w * spec.dim)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    inputs.push(Tensor::new(&[n, h, w, spec.dim], x_data)?);
    for d in &descs {
        inputs.push(d.materialize::<f64, _>(rng));
    }

    let spec2 = spec.clone();
    let build = move |tape: &mut Tape<f64>, ids: &[VarId]| -> Result<VarId> {
        let mut cur = ParamCursor::new(&names, &ids[1..]);
        let vars = BlockVars::from_cursor("", spec2.clone(), &mut cur)?;
        let y = transformer_block_forward(tape, ids[0], &vars)?;
        Ok(tape.sum_all(y))
    };
    match max_per_input {
        Some(m) => grad_check_sampled(&build, &inputs, eps, m, rng),
        None => grad_check(&build, &inputs, eps),
    }
}
