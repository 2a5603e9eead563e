//! Scalar math shims and small numeric helpers.
//!
//! `core` has no transcendental functions, so everything routes through
//! `libm`. Keeping the calls behind one module also pins down the exact
//! functions used, which matters for bit-for-bit reproducibility claims.

/// Natural exponential.
#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

/// Natural logarithm.
#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

/// Square root.
#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

/// Hyperbolic tangent.
#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

/// `ln(sum_i exp(x_i))` with the usual max-subtraction guard, so that
/// widely spread logits (e.g. after dividing by a tiny temperature) do
/// not overflow.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "log_sum_exp of an empty slice");
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    if m.is_infinite() {
        // All entries -inf: the sum is zero, its log -inf.
        return m;
    }
    let mut s = 0.0;
    for &x in xs {
        s += exp(x - m);
    }
    m + ln(s)
}

/// Draw a uniform f64 in [0, 1) from 53 random bits.
pub fn uniform_f64(rng: &mut impl rand_core::RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draw via Box–Muller. Uses two uniforms per call;
/// simple and deterministic, which is all initialization needs.
pub fn normal_f64(rng: &mut impl rand_core::RngCore) -> f64 {
    let u1 = loop {
        let u = uniform_f64(rng);
        if u > 0.0 {
            break u;
        }
    };
    let u2 = uniform_f64(rng);
    sqrt(-2.0 * ln(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}
