//! Central-difference gradient verification at double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nnkit::tape::{Tape, Var};
use crate::nnkit::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over every checked entry.
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// False when any analytic or numeric gradient was NaN/Inf.
    pub finite: bool,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.finite && self.max_rel_error < tol
    }
}

/// Checks every entry of every input.
pub fn grad_check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(inputs, eps, usize::MAX, 0, f)
}

/// Like [`grad_check`], but checks at most `max_per_input` randomly chosen entries per input.
///
/// `f` may return a value of any shape; it is reduced to a scalar by a fixed pseudo-random
/// projection so that every output entry contributes to the checked gradient.
pub fn grad_check_sampled<F>(
    inputs: &[Tensor<f64>],
    eps: f64,
    max_per_input: usize,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let out = f(&mut tape, &vars)?;
    let out_shape = tape.value(out).shape();
    let proj = Tensor::from_fn(out_shape, |_| rng.random_range(-1.0..1.0));
    let loss = tape.dot(out, proj.clone())?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let o = f(&mut t, &vs)?;
        let l = t.dot(o, proj.clone())?;
        Ok(t.value(l).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        finite: true,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[ii])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let idx: Vec<usize> = if input.len() <= max_per_input {
            (0..input.len()).collect()
        } else {
            (0..max_per_input)
                .map(|_| rng.random_range(0..input.len()))
                .collect()
        };
        for j in idx {
            let orig = input.data()[j];
            work[ii].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[ii].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[ii].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            report.checked += 1;
            if !numeric.is_finite() || !a.is_finite() {
                report.finite = false;
                report.worst = Some((ii, j));
                continue;
            }
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((ii, j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_map_is_exact() {
        let x = random([3, 4, 1, 1], 1);
        let w = random([2, 4, 1, 1], 2);
        let b = random([2, 1, 1, 1], 3);
        let r = grad_check(&[x, w, b], 1e-5, |t, v| t.linear(v[0], v[1], v[2])).unwrap();
        assert!(r.passed(1e-8), "{r:?}");
        let x = random([1, 2, 3, 3], 4);
        let r = grad_check(&[x], 1e-5, |t, v| Ok(t.scale(v[0], 3.0))).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn conv_on_random_input() {
        let x = random([1, 2, 6, 6], 5);
        let w = random([3, 2, 3, 3], 6);
        let b = random([3, 1, 1, 1], 7);
        let r = grad_check(&[x, w, b], 1e-5, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)).unwrap();
        assert!(r.passed(1e-4), "{r:?}");
        let x = random([2, 2, 7, 5], 8);
        let w = random([2, 2, 3, 3], 9);
        let r = grad_check(&[x, w], 1e-5, |t, v| t.conv2d(v[0], v[1], None, 2, 1)).unwrap();
        assert!(r.passed(1e-4), "{r:?}");
    }

    #[test]
    fn non_finite_is_reported_not_raised() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![f64::NAN, 1.0]).unwrap();
        let r = grad_check(&[x], 1e-5, |t, v| Ok(t.scale(v[0], 2.0))).unwrap();
        assert!(!r.finite);
        assert!(!r.passed(1.0));
    }
}
