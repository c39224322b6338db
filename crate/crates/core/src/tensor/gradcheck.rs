use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Offset added to |analytic| in the relative-error denominator.
const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// Tape and finite-difference derivatives at `worst`.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Largest `|fd - g|` among coordinates whose relative error exceeds the
    /// tolerance; zero when none do.
    pub max_abs_err_failing: f64,
    pub coordinates: usize,
    pub passed: bool,
}

/// Compares tape gradients of a scalar function against central differences.
///
/// For each coordinate the error is `|fd - g| / (|g| + 1e-8)`; the report
/// holds the maximum over all coordinates of all inputs.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let mut tape = Tape::new();
    let leaves: Vec<_> = inputs.iter().map(|x| tape.leaf(x)).collect();
    let loss = f(&mut tape, &leaves)?;
    if loss.len() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor<f64>> = leaves.iter().map(|l| grads.get_or_zeros(l)).collect();

    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let mut perturbed = inputs.to_vec();
        let mut data = perturbed[which].to_vec();
        data[coord] += delta;
        perturbed[which] = Tensor::new(inputs[which].shape(), data)?;
        let mut tape = Tape::no_grad();
        let value = f(&mut tape, &perturbed)?;
        value.item().ok_or_else(|| Error::NonScalarLoss(value.shape().to_vec()))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        max_abs_err_failing: 0.0,
        coordinates: 0,
        passed: true,
    };
    for (which, x) in inputs.iter().enumerate() {
        for coord in 0..x.len() {
            let fd = (eval(which, coord, h)? - eval(which, coord, -h)?) / (2.0 * h);
            let g = analytic[which].data()[coord];
            let rel = (fd - g).abs() / (g.abs() + REL_FLOOR);
            report.coordinates += 1;
            if rel >= tol {
                report.max_abs_err_failing = report.max_abs_err_failing.max((fd - g).abs());
            }
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((which, coord));
                report.worst_analytic = g;
                report.worst_numeric = fd;
            }
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    grad_check_many(|tape, xs| f(tape, &xs[0]), std::slice::from_ref(x), h, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(&[4], vec![0.3, -1.0, 2.5, 7.0]).unwrap();
        let report = grad_check(|tape, x| tape.sum(x, None), &x, 1e-5, 1e-4).unwrap();
        assert!(report.passed);
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // detach() hides the dependence from the tape, so the analytic
        // gradient is zero while the numeric one is not.
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let report = grad_check(
            |tape, x| {
                let hidden = x.detach();
                let sq = tape.square(&hidden)?;
                let y = tape.add(&sq, x)?;
                tape.sum(&y, None)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
    }
}
