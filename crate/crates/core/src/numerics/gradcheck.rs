//! Central finite-difference oracle for the reverse-mode gradients.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare `backward` against extrapolated central differences on every
/// coordinate of `x`, returning the worst relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    Ok(finite_diff_probe(f, x, h, &all)?
        .iter()
        .map(|p| p.relative_error())
        .fold(0.0, f64::max))
}

/// One coordinate of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

/// Analytic and central-difference derivatives at the given coordinates,
/// the latter extrapolated from steps `h` and `h/2`.
pub fn finite_diff_probe<F>(f: F, x: &Tensor<f64>, h: f64, coords: &[usize]) -> Result<Vec<Probe>>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    if !x.is_finite() {
        return Err(Error::Invalid("finite_diff_check input must be finite".into()));
    }
    if let Some(&bad) = coords.iter().find(|&&i| i >= x.numel()) {
        return Err(Error::Invalid(format!("coordinate {bad} outside {} elements", x.numel())));
    }
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&tape, xv)?;
    let analytic = tape
        .backward(out)?
        .take(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(probe, false);
        let y = f(&tape, v)?.value().item();
        if !y.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_check",
                shape: vec![],
                context: String::from(", objective evaluation"),
            });
        }
        Ok(y)
    };

    coords
        .iter()
        .map(|&i| {
            let central = |h: f64| -> Result<f64> {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                Ok((eval(plus)? - eval(minus)?) / (2.0 * h))
            };
            // Richardson extrapolation cancels the h² error term.
            let numeric = (4.0 * central(h / 2.0)? - central(h)?) / 3.0;
            Ok(Probe {
                index: i,
                analytic: analytic.data()[i],
                numeric,
            })
        })
        .collect()
}
