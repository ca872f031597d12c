use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{value_and_grad, Bound, ParameterSet, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// Max over checked entries of `|analytic - numeric| / (|numeric| + 1e-8)`.
    pub max_rel_error: f64,
    /// `(parameter, flat index)` where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

fn sample_entries(params: &ParameterSet<f64>, max_entries: usize, seed: u64) -> Vec<(String, usize)> {
    let all: Vec<(String, usize)> = params
        .trainable()
        .flat_map(|(name, v)| (0..v.len()).map(move |i| (name.to_string(), i)))
        .collect();
    if all.len() <= max_entries {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, all.len(), max_entries).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| all[i].clone()).collect()
}

fn central_difference<F>(params: &ParameterSet<f64>, f: &F, name: &str, i: usize, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut shifted = params.clone();
    let base = shifted.get(name)?.as_slice().expect("standard layout")[i];
    shifted.get_mut(name)?.as_slice_mut().expect("standard layout")[i] = base + step;
    let plus = value_and_grad(&shifted, |t, b| f(t, b))?.0;
    shifted.get_mut(name)?.as_slice_mut().expect("standard layout")[i] = base - step;
    let minus = value_and_grad(&shifted, |t, b| f(t, b))?.0;
    Ok((plus - minus) / (2.0 * step))
}

fn check_step(step: f64) -> Result<()> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {step}")));
    }
    Ok(())
}

/// Compares reverse-mode gradients of the scalar graph `f` against central
/// finite differences, both in `f64`, on up to `max_entries` parameter
/// entries sampled with `seed`.
pub fn finite_diff_check<F>(params: &ParameterSet<f64>, f: F, step: f64, max_entries: usize, seed: u64) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    check_step(step)?;
    let (_, grads) = value_and_grad(params, |t, b| f(t, b))?;
    let mut report = FdReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for (name, i) in sample_entries(params, max_entries, seed) {
        let numeric = central_difference(params, &f, &name, i, step)?;
        let analytic = grads[name.as_str()].as_slice().expect("standard layout")[i];
        let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-8);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((name, i));
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Checks `f32` reverse-mode gradients of `f32_graph` against an `f64`
/// central-difference oracle computed on `f64_graph`, which must describe
/// the same function. The parameters are taken from `params` (rounded to
/// `f32` for the analytic pass).
pub fn finite_diff_check_f32<F32, F64>(
    params: &ParameterSet<f64>,
    f32_graph: F32,
    f64_graph: F64,
    step: f64,
    max_entries: usize,
    seed: u64,
) -> Result<FdReport>
where
    F32: Fn(&mut Tape<f32>, &Bound) -> Result<Var>,
    F64: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    check_step(step)?;
    // Evaluate the oracle at exactly the f32-representable point.
    let p32: ParameterSet<f32> = params.cast();
    let p64: ParameterSet<f64> = p32.cast();
    let (_, grads) = value_and_grad(&p32, |t, b| f32_graph(t, b))?;
    let mut report = FdReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for (name, i) in sample_entries(&p64, max_entries, seed) {
        let numeric = central_difference(&p64, &f64_graph, &name, i, step)?;
        let analytic = grads[name.as_str()].as_slice().expect("standard layout")[i] as f64;
        let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-8);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((name, i));
        }
        report.checked += 1;
    }
    Ok(report)
}
