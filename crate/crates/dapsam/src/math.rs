//! Scalar activation functions.

const FRAC_1_SQRT_2PI: f64 = 0.3989422804014327;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// GELU with the exact Gaussian-CDF definition (not the tanh approximation).
pub fn gelu(x: f64) -> f64 {
    x * norm_cdf(x)
}

/// d/dx gelu(x) = Phi(x) + x * phi(x)
pub fn gelu_grad(x: f64) -> f64 {
    norm_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_known_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(2.0) - 0.8807970779778823).abs() < 1e-15);
        assert!((sigmoid(-2.0) - (1.0 - 0.8807970779778823)).abs() < 1e-15);
    }

    #[test]
    fn gelu_known_values() {
        assert_eq!(gelu(0.0), 0.0);
        // gelu(1) = 1 * Phi(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-12);
        // symmetry: gelu(x) + gelu(-x) = x * (Phi(x) - Phi(-x)) ... spot value
        assert!((gelu(-1.0) + 0.15865525393145707).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-2.5, -1.0, -0.1, 0.0, 0.3, 1.7, 3.0] {
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(
                (gelu_grad(x) - num).abs() < 1e-8,
                "x={}: {} vs {}",
                x,
                gelu_grad(x),
                num
            );
        }
    }
}
