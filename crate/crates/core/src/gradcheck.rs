//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{DType, Tensor};

/// Floor of the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;
pub const DEFAULT_STEP: f64 = 1e-5;
/// How many times a step is divided by ten when it straddles a ReLU kink.
pub const KINK_RETRIES: usize = 3;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per input (sampled by `seed`).
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Coordinates whose step had to shrink to stay off a ReLU kink.
    pub kink_retries: usize,
    /// Coordinates still straddling a kink at the smallest step.
    pub kinked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Output values of `f` and the kink signature of the evaluation.
fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(Vec<Tensor>, u64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let outs = f(&mut tape, &vars)?;
    let values: Vec<Tensor> = outs.iter().map(|&o| tape.value(o).clone()).collect();
    if let Some(t) = values.iter().find(|t| !t.all_finite()) {
        return Err(Error::Evaluation(format!(
            "function output {:?} is not finite",
            t.dims()
        )));
    }
    Ok((values, tape.kink_signature()))
}

fn scalar_only<F>(f: F) -> impl Fn(&mut Tape, &[Var]) -> Result<Vec<Var>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    move |t, v| {
        let out = f(t, v)?;
        if t.value(out).len() != 1 {
            return Err(Error::shape(format!(
                "gradient check needs a scalar function, got {:?}",
                t.dims(out)
            )));
        }
        Ok(vec![out])
    }
}

/// Analytic gradients of the scalar `f` with respect to every input.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let one = [Tensor::scalar(1.0)];
    let (value, g) = analytic_vjp(&scalar_only(f), &one, inputs)?;
    Ok((value, g))
}

/// Gradients of `Σ_k ⟨r_k, y_k⟩` for outputs `y_k = f(x)_k` and fixed
/// cotangents `r_k`, with the value of that sum.
pub fn analytic_vjp<F>(f: &F, cotangents: &[Tensor], inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let outs = f(&mut tape, &vars)?;
    check_cotangents(&tape, &outs, cotangents)?;
    let mut total: Option<Var> = None;
    for (&y, r) in outs.iter().zip(cotangents) {
        let y = tape.reshape(y, r.dims())?;
        let rv = tape.leaf(r.clone());
        let p = tape.mul(y, rv)?;
        let s = tape.sum(p);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::usage("gradient check needs at least one output"))?;
    let value = tape.value(total).item();
    if !value.is_finite() {
        return Err(Error::Evaluation(format!("function value {value} is not finite")));
    }
    let grads = tape.backward(total)?;
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();
    Ok((value, g))
}

fn check_cotangents(tape: &Tape, outs: &[Var], cotangents: &[Tensor]) -> Result<()> {
    if outs.len() != cotangents.len() {
        return Err(Error::shape(format!(
            "{} outputs but {} cotangents",
            outs.len(),
            cotangents.len()
        )));
    }
    for (&y, r) in outs.iter().zip(cotangents) {
        if tape.value(y).len() != r.len() {
            return Err(Error::shape(format!(
                "output {:?} does not match cotangent {:?}",
                tape.dims(y),
                r.dims()
            )));
        }
    }
    Ok(())
}

/// `Σ_k ⟨r_k, y⁺_k − y⁻_k⟩`. Differencing before the reduction keeps the
/// rounding of large output sums out of the quotient.
fn projected_difference(plus: &[Tensor], minus: &[Tensor], cotangents: &[Tensor]) -> f64 {
    let mut acc = 0.0;
    for ((p, m), r) in plus.iter().zip(minus).zip(cotangents) {
        for ((&a, &b), &w) in p.data().iter().zip(m.data()).zip(r.data()) {
            acc += w * (a - b);
        }
    }
    acc
}

/// Compares analytic gradients of `f` against central differences
/// `(f(x+h·e) − f(x−h·e)) / 2h` and returns the worst relative error.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    vjp_check(scalar_only(f), &[Tensor::scalar(1.0)], inputs, opts)
}

/// [`grad_check`] for the scalar `Σ_k ⟨r_k, f(x)_k⟩` of a multi-output `f`.
///
/// A step whose two evaluations leave the linear piece of any ReLU (see
/// [`Tape::kink_signature`]) is divided by ten, up to [`KINK_RETRIES`] times.
pub fn vjp_check<F>(f: F, cotangents: &[Tensor], inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    if let Some(t) = inputs.iter().find(|t| t.dtype() != DType::F64) {
        return Err(Error::usage(format!(
            "gradient checks run in f64, got {}",
            t.dtype()
        )));
    }
    let (_, analytic) = analytic_vjp(&f, cotangents, inputs)?;
    let (_, base_sig) = evaluate(&f, inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
        kink_retries: 0,
        kinked: 0,
    };
    for (idx, grad) in analytic.iter().enumerate() {
        let n = inputs[idx].len();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for &i in &coords {
            let x0 = inputs[idx].data()[i];
            let mut step = opts.step;
            let mut attempt = 0;
            let numeric = loop {
                work[idx].set(i, x0 + step);
                let (yp, sp) = evaluate(&f, &work)?;
                work[idx].set(i, x0 - step);
                let (ym, sm) = evaluate(&f, &work)?;
                work[idx].set(i, x0);
                let numeric = projected_difference(&yp, &ym, cotangents) / (2.0 * step);
                // a quotient across a kink mixes two slopes
                if sp == base_sig && sm == base_sig {
                    break numeric;
                }
                if attempt == KINK_RETRIES {
                    report.kinked += 1;
                    break numeric;
                }
                if attempt == 0 {
                    report.kink_retries += 1;
                }
                attempt += 1;
                step /= 10.0;
            };
            let a = grad.data()[i];
            let e = rel_err(a, numeric);
            report.coords_checked += 1;
            if e > report.max_rel_err || report.coords_checked == 1 {
                report.max_rel_err = e;
                report.worst_input = idx;
                report.worst_coord = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input convenience form with the default step.
pub fn grad_check_one<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        step,
        ..Default::default()
    };
    let report = grad_check(|t, v| f(t, v[0]), std::slice::from_ref(x), &opts)?;
    Ok(report.max_rel_err)
}
