//! Bare-bones 3-vector arithmetic on `[f64; 3]`.
//!
//! Everything here is hot-path trivial; pulling in a linear algebra crate
//! for dots and crosses would be overkill when ndarray already handles the
//! big matrices.

pub type V3 = [f64; 3];

#[inline]
pub fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn norm2(a: V3) -> f64 {
    dot(a, a)
}

#[inline]
pub fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn neg(a: V3) -> V3 {
    [-a[0], -a[1], -a[2]]
}

/// Integer combination m1*b1 + m2*b2 + m3*b3.
#[inline]
pub fn int_comb(m: [i64; 3], b: &[V3; 3]) -> V3 {
    [
        m[0] as f64 * b[0][0] + m[1] as f64 * b[1][0] + m[2] as f64 * b[2][0],
        m[0] as f64 * b[0][1] + m[1] as f64 * b[1][1] + m[2] as f64 * b[2][1],
        m[0] as f64 * b[0][2] + m[1] as f64 * b[1][2] + m[2] as f64 * b[2][2],
    ]
}
