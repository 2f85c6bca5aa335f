//! Central finite-difference verification of tape gradients.

use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{rng_from_seed, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub tolerance: f64,
    pub step: f64,
    /// Seed of the fixed cotangent used to reduce non-scalar outputs.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            tolerance: 1e-4,
            step: 1e-4,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub per_input_errors: Vec<f64>,
    pub passed: bool,
}

/// Inputs closer than `SINGULAR_WINDOW * h` to a kink or pole of a norm-based
/// op are rejected. The relative truncation error of the central difference
/// grows like `(h / r)^2` there, and reaches 1e-4 around `r = 400 h`.
pub const SINGULAR_WINDOW: f64 = 1000.0;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for one input: 1% of its largest analytic gradient entry,
/// and at least `1e-6`. Entries far below the gradient's own scale carry the
/// `O(h^2)` truncation error of the central difference, which would otherwise
/// dominate their relative error.
pub fn error_floor(analytic: &Tensor) -> f64 {
    let max = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (1e-2 * max).max(1e-6)
}

fn reduce(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return tape.reshape(out, vec![]);
    }
    let mut rng = rng_from_seed(seed);
    let cot = Tensor::randn(tape.shape(out).to_vec(), 1.0, &mut rng);
    let c = tape.constant(cot);
    let p = tape.mul(out, c)?;
    Ok(tape.sum(p))
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor], seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = reduce(&mut tape, out, seed)?;
    Ok(tape.value(loss).item())
}

/// Compares reverse-mode gradients of `f` at `inputs` with central differences
/// `(f(x+h) - f(x-h)) / 2h`, element by element. Non-scalar outputs are reduced
/// with a fixed random cotangent.
///
/// Returns [`Error::Singular`] when [`Tape::min_radius`] falls inside
/// `SINGULAR_WINDOW * h`.
pub fn grad_check<F>(
    name: &str,
    f: F,
    inputs: &[Tensor],
    config: GradCheckConfig,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if config.step <= 0.0 {
        return Err(Error::config("grad_check", "step must be positive"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.min_radius() < SINGULAR_WINDOW * config.step {
        return Err(Error::Singular {
            op: "grad_check",
            msg: format!(
                "{}: input lies {:e} from a singular point, inside the finite-difference window",
                name,
                tape.min_radius()
            ),
        });
    }
    let loss = reduce(&mut tape, out, config.seed)?;
    let grads = tape.backward(loss)?;

    let h = config.step;
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads.tensor(&tape, *var);
        let floor = error_floor(&analytic);
        let mut worst: f64 = 0.0;
        for e in 0..inputs[idx].numel() {
            let orig = inputs[idx].data()[e];
            work[idx].data_mut()[e] = orig + h;
            let fp = eval_scalar(&f, &work, config.seed)?;
            work[idx].data_mut()[e] = orig - h;
            let fm = eval_scalar(&f, &work, config.seed)?;
            work[idx].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[e];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::numeric(
                    "grad_check",
                    format!(
                        "{}: non-finite gradient at input {} element {} (analytic {}, numeric {})",
                        name, idx, e, a, numeric
                    ),
                ));
            }
            worst = worst.max(relative_error(a, numeric, floor));
        }
        per_input.push(worst);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        op_name: name.to_string(),
        max_rel_error,
        per_input_errors: per_input,
        passed: max_rel_error <= config.tolerance,
    })
}
