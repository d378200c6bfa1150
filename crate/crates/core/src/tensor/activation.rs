use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::Tensor;

/// Standard normal CDF.
#[inline]
pub fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    x * phi_cdf(x)
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    phi_cdf(x) + x * pdf
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(input: &Tensor) -> Tensor {
    input.map(gelu_scalar)
}

pub fn gelu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    input
        .zip_map(grad_out, |x, g| gelu_grad_scalar(x) * g)
        .expect("shapes checked by caller")
}

pub fn tanh(input: &Tensor) -> Tensor {
    input.map(f64::tanh)
}

/// Backward of tanh given its output `y`.
pub fn tanh_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    output
        .zip_map(grad_out, |y, g| (1.0 - y * y) * g)
        .expect("shapes checked by caller")
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// erf by its Maclaurin series, summed until terms vanish.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term.abs() > 1e-20 {
            n += 1.0;
            term *= -x * x / n;
            sum += term / (2.0 * n + 1.0);
        }
        2.0 / PI.sqrt() * sum
    }

    #[test]
    fn gelu_anchor_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-9);
        let oracle = 0.5 * (1.0 + erf_series(FRAC_1_SQRT_2));
        assert!((gelu_scalar(1.0) - oracle).abs() < 1e-12);
    }

    #[test]
    fn erf_matches_series_on_a_grid() {
        for i in -30..=30 {
            let x = i as f64 / 10.0;
            assert!((libm::erf(x) - erf_series(x)).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for i in -20..=20 {
            let x = i as f64 / 5.0;
            let h = 1e-5;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid_scalar(-800.0), 0.0);
        assert_eq!(sigmoid_scalar(800.0), 1.0);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
    }
}
