//! Scalar activation functions and their derivatives.

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `x * sigmoid(x)`.
#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_prime(x: f64) -> f64 {
    silu_prime_with(x, sigmoid(x))
}

#[inline]
pub fn silu_second(x: f64) -> f64 {
    silu_second_with(x, sigmoid(x))
}

/// `silu'(x)` given `s = sigmoid(x)`.
#[inline]
pub fn silu_prime_with(x: f64, s: f64) -> f64 {
    s * (1.0 + x * (1.0 - s))
}

/// `silu''(x)` given `s = sigmoid(x)`.
#[inline]
pub fn silu_second_with(x: f64, s: f64) -> f64 {
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}

/// Derivative of relu; zero at the origin.
#[inline]
pub fn relu_indicator(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}
