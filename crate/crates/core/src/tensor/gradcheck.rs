//! Central-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Relative error with an absolute floor of 1, so tiny gradients are
/// compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Checks the gradient of a scalar-valued graph against central differences.
///
/// `f` rebuilds the graph from leaves on a fresh tape each call; the returned
/// value is the maximum relative error over every element of every input.
pub fn gradient_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |points: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&mut tape, &vars)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::Graph("gradient_check needs a scalar loss".into()));
        }
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let mut worst = 0.0f64;
    let mut points: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            points[ti].data_mut()[ei] = orig + h;
            let plus = eval(&points)?;
            points[ti].data_mut()[ei] = orig - h;
            let minus = eval(&points)?;
            points[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic[ti].data()[ei], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_graph_is_exact() {
        let x = Tensor::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let err = gradient_check(
            |tape, vars| {
                let y = tape.scale(vars[0], 2.0)?;
                tape.sum_all(y)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn quadratic_graph_matches() {
        let x = Tensor::new(vec![4], vec![0.7, -1.3, 0.2, 2.4]).unwrap();
        let err = gradient_check(
            |tape, vars| {
                let y = tape.mul(vars[0], vars[0])?;
                tape.sum_all(y)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn two_input_product() {
        let a = Tensor::new(vec![2], vec![1.5, -0.5]).unwrap();
        let b = Tensor::new(vec![2], vec![0.25, 3.0]).unwrap();
        let err = gradient_check(
            |tape, vars| {
                let y = tape.mul(vars[0], vars[1])?;
                tape.sum_all(y)
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn rel_err_floors_small_denominators() {
        assert_eq!(rel_err(1e-9, 0.0), 1e-9);
        assert!((rel_err(2.0, 4.0) - 0.5).abs() < 1e-15);
    }
}
