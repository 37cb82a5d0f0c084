//! Cutoff profiles shared by the beam, test-function and metric code.

/// Quintic smoothstep `s³(10 − 15s + 6s²)`, clamped to `[0, 1]`. C² at both ends.
pub fn smoothstep(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s >= 1.0 {
        1.0
    } else {
        s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
    }
}

/// Radial plateau cutoff: 1 on `[0, inner]`, smoothstep down to 0 at `outer`.
pub fn plateau(r: f64, inner: f64, outer: f64) -> f64 {
    if r <= inner {
        1.0
    } else if r >= outer {
        0.0
    } else {
        1.0 - smoothstep((r - inner) / (outer - inner))
    }
}

fn flat(u: f64) -> [f64; 3] {
    // e^{-1/u} and its first two derivatives
    if u <= 0.0 {
        return [0.0, 0.0, 0.0];
    }
    let f = (-1.0 / u).exp();
    let u2 = u * u;
    [f, f / u2, f * (1.0 / (u2 * u2) - 2.0 / (u2 * u))]
}

/// C^∞ transition rising from 0 at `u = 0` to 1 at `u = 1`, with first and
/// second derivatives in `u`.
pub fn smooth_transition(u: f64) -> [f64; 3] {
    if u <= 0.0 {
        return [0.0, 0.0, 0.0];
    }
    if u >= 1.0 {
        return [1.0, 0.0, 0.0];
    }
    let [a, a1, a2] = flat(u);
    let [b, b1, b2] = flat(1.0 - u);
    // d/du of b(1-u) flips sign of odd derivatives
    let (b1, b2) = (-b1, b2);
    let s = a + b;
    let s1 = a1 + b1;
    let s2 = a2 + b2;
    let v = a / s;
    let v1 = (a1 * s - a * s1) / (s * s);
    let v2 = (a2 * s - a * s2) / (s * s) - 2.0 * v1 * s1 / s;
    [v, v1, v2]
}
