//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward pass of the function under
//! test, so it is independent of the backward implementation it verifies.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default step for central differences in 64-bit arithmetic.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative floor of the error denominator. The floor used for a check is
/// `REL_FLOOR · max(1, |f|)`: central differences of `f` carry round-off of
/// order `ε|f|/h`, so gradients below the floor are compared absolutely at
/// that resolution.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Shape("gradient check needs a scalar output".into()));
    }
    Ok(v.item())
}

/// Check every coordinate of every input marked `requires_grad`.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_sampled(inputs, f, usize::MAX, 0)
}

/// Check at most `per_input` randomly chosen coordinates of each input.
pub fn check_sampled<F>(
    inputs: &[Tensor],
    f: F,
    per_input: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).item();
    let grads = tape.backward(out)?;
    let floor = REL_FLOOR * f0.abs().max(1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        let n = input.numel();
        let analytic = grads.get_or_zeros(vars[k], n);
        let coords: Vec<usize> = if per_input >= n {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, per_input).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let x0 = input.data()[i];
            probe[k].data_mut()[i] = x0 + DEFAULT_STEP;
            let fp = eval(&probe, &f)?;
            probe[k].data_mut()[i] = x0 - DEFAULT_STEP;
            let fm = eval(&probe, &f)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * DEFAULT_STEP);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.coords_checked += 1;
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_input = k;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
