//! Central finite differences, used to cross-check analytic gradients.

use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor for [`relative_error`]; below this both gradients are
/// treated as zero-scale and the comparison becomes absolute.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every coordinate `i`.
pub fn numeric_gradient<F>(x: &Tensor, h: f64, mut f: F) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Largest [`relative_error`] over matching elements.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.25]).unwrap();
        let g = numeric_gradient(&x, 1e-4, |t| Ok(t.data().iter().map(|v| v * v).sum())).unwrap();
        let exact = x.map(|v| 2.0 * v);
        assert!(max_relative_error(&exact, &g) < 1e-9);
    }
}
