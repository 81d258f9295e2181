//! Finite-difference helpers shared by the verification suite and tests.

/// Fourth-order central difference of `f` at `x` with step `h`.
pub fn central_difference<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    let (p1, m1) = (f(x + h), f(x - h));
    let (p2, m2) = (f(x + 2.0 * h), f(x - 2.0 * h));
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
