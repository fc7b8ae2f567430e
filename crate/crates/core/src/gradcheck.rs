//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function; it shares no
//! code with the tape's backward rules. Derivatives use the five-point
//! central stencil `(8(f₊₁ − f₋₁) − (f₊₂ − f₋₂)) / 12h`, whose O(h⁴)
//! truncation error stays far below the tolerance even on deep compositions.
//!
//! Bilinear sampling is only piecewise smooth, so a stencil can straddle a
//! lattice crossing. A probe that is not well inside the tolerance at `STEP` is re-evaluated at
//! each of `REFINE` smaller steps and keeps its best agreement; a wrong
//! backward rule disagrees at every step.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Step used for central differences at 64-bit.
pub const STEP: f64 = 1e-4;
/// Fallback steps for probes that straddle a kink.
pub const REFINE: [f64; 2] = [1e-5, 1e-6];
/// Largest acceptable relative error between analytic and numeric gradients.
pub const TOLERANCE: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<40} {:>6} elems  max rel err {:.3e}  {}",
            self.name,
            self.checked,
            self.max_rel_err,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compare tape gradients of `f` against central differences.
///
/// `f` maps the inputs (all registered as parameters on a fresh tape) to a
/// scalar. At most `max_per_input` randomly chosen elements of each input are
/// probed; `usize::MAX` probes all of them.
pub fn check(
    name: &str,
    inputs: &[Tensor<f64>],
    max_per_input: usize,
    rng: &mut impl Rng,
    f: impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
) -> Result<GradReport> {
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let mut grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.take_or_zeros(v)).collect()
    };
    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut report = GradReport {
        name: name.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let mut idx: Vec<usize> = (0..input.len()).collect();
        if idx.len() > max_per_input {
            idx.shuffle(rng);
            idx.truncate(max_per_input);
        }
        for i in idx {
            let orig = input.data()[i];
            let a = analytic[which].data()[i];
            let mut numeric_at = |h: f64| -> Result<f64> {
                let mut at = |k: f64| -> Result<f64> {
                    probe[which].data_mut()[i] = orig + k * h;
                    eval(&probe)
                };
                let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
                probe[which].data_mut()[i] = orig;
                Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
            };
            let mut numeric = numeric_at(STEP)?;
            let mut e = rel_err(a, numeric);
            for h in REFINE {
                if e < 1e-2 * TOLERANCE {
                    break;
                }
                let n = numeric_at(h)?;
                if rel_err(a, n) < e {
                    numeric = n;
                    e = rel_err(a, n);
                }
            }
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some((which, i, a, numeric));
            }
        }
    }
    Ok(report)
}

/// A fixed random projection turning any output into a scalar loss with O(1)
/// gradients everywhere: `Σ out ⊙ R`.
pub fn project<'t>(out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::uniform(out.shape(), 1.0, &mut rng);
    Ok(out.mul(out.tape().constant(r))?.sum())
}
