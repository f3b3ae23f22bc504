//! Central finite-difference verification of analytical backwards.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Step used by central differences; inputs are 64-bit.
pub const FD_STEP: f64 = 1e-5;

/// A forward function paired with its vector-Jacobian product.
///
/// `forward` maps the input tensors to one output; `backward` maps
/// `(inputs, upstream cotangent)` to one cotangent per input, shapes
/// mirroring the inputs exactly.
pub struct OpGradPair<'a> {
    pub forward: Box<dyn Fn(&[Tensor]) -> Result<Tensor> + 'a>,
    pub backward: Box<dyn Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>> + 'a>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error per input tensor, in input order.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Input index and flat coordinate of the worst offender.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Relative error with the denominator floored at `scale`. The floor keeps
/// finite-difference roundoff on near-zero coordinates from dominating;
/// `scale` is a small fraction of the largest gradient in the same tensor,
/// so any error on a coordinate that matters still registers.
fn rel_err(a: f64, n: f64, scale: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(scale)
}

/// Compare the analytical backward against central finite differences of the
/// scalar probe `L = sum(forward(x) * r)` for a fixed random cotangent `r`.
///
/// Returns the max relative error over every coordinate of every input.
/// Aborts when the forward output is non-finite.
pub fn grad_check(
    op: &OpGradPair,
    inputs: &[Tensor],
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let base = (op.forward)(inputs)?;
    if !base.all_finite() {
        return Err(Error::NonFinite { op: "grad_check forward" });
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let cotangent = Tensor::new(
        base.shape().to_vec(),
        (0..base.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let analytic = (op.backward)(inputs, &cotangent)?;
    if analytic.len() != inputs.len() {
        return Err(Error::Dimension {
            op: "grad_check",
            detail: format!(
                "backward returned {} cotangents for {} inputs",
                analytic.len(),
                inputs.len()
            ),
        });
    }

    let probe = |xs: &[Tensor]| -> Result<f64> {
        let out = (op.forward)(xs)?;
        if !out.all_finite() {
            return Err(Error::NonFinite { op: "grad_check forward" });
        }
        Ok(out.iter().zip(cotangent.iter()).map(|(a, b)| a * b).sum())
    };

    let mut per_input = vec![0.0_f64; inputs.len()];
    let mut worst = (0usize, 0usize);
    let mut max_err = 0.0_f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let scale = 1e-3 * analytic[ti].max_abs() + 1e-4;
        for ci in 0..input.len() {
            let orig = input.data()[ci];
            work[ti].data_mut()[ci] = orig + FD_STEP;
            let plus = probe(&work)?;
            work[ti].data_mut()[ci] = orig - FD_STEP;
            let minus = probe(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = rel_err(analytic[ti].data()[ci], numeric, scale);
            if err > per_input[ti] {
                per_input[ti] = err;
            }
            if err > max_err {
                max_err = err;
                worst = (ti, ci);
            }
        }
    }
    Ok(GradCheckReport {
        per_input,
        max_rel_err: max_err,
        tolerance,
        worst,
    })
}

/// Deterministic random tensor for tests and CLI demos.
pub fn random_tensor(shape: Vec<usize>, rng: &mut StdRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}
