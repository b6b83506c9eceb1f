//! Scalar loops shared by the forward and backward passes.
//!
//! Every reduction here runs in a fixed order that depends only on the
//! operand length, so a row's result never depends on which other rows share
//! its buffer. The KV-prefix equivalence checks rely on that.

use crate::numerics::tensor::Float;

/// Dot product with eight fixed accumulator lanes.
#[inline]
pub fn dot<S: Float>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 8;
    let mut acc = [S::zero(); 8];
    for c in 0..chunks {
        let ab = &a[c * 8..c * 8 + 8];
        let bb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += ab[l] * bb[l];
        }
    }
    let mut tail = S::zero();
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<S: Float>(alpha: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// In-place numerically stable softmax of one row.
pub fn softmax_row<S: Float>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = S::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Rotary angle for pair `pair` of a head of width `head_dim`.
pub fn rope_angle(position: usize, pair: usize, head_dim: usize, base: f64) -> f64 {
    let exponent = (2 * pair) as f64 / head_dim as f64;
    position as f64 / base.powf(exponent)
}

/// Rotate consecutive pairs of every head in `row` by the position's angles;
/// `sign = -1` applies the inverse rotation.
pub fn rope_row<S: Float>(row: &mut [S], position: usize, head_dim: usize, base: f64, sign: f64) {
    let pairs = head_dim / 2;
    let mut cs = Vec::with_capacity(pairs);
    for p in 0..pairs {
        let theta = sign * rope_angle(position, p, head_dim, base);
        cs.push((S::from_f64_lossy(theta.cos()), S::from_f64_lossy(theta.sin())));
    }
    for head in row.chunks_exact_mut(head_dim) {
        for (p, &(c, s)) in cs.iter().enumerate() {
            let x0 = head[2 * p];
            let x1 = head[2 * p + 1];
            head[2 * p] = x0 * c - x1 * s;
            head[2 * p + 1] = x0 * s + x1 * c;
        }
    }
}

pub fn silu<S: Float>(x: S) -> S {
    x / (S::one() + (-x).exp())
}

pub fn sigmoid<S: Float>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..19).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn rope_inverse_roundtrip() {
        let mut row: Vec<f64> = (0..8).map(|i| i as f64 + 1.0).collect();
        let orig = row.clone();
        rope_row(&mut row, 17, 4, 10000.0, 1.0);
        rope_row(&mut row, 17, 4, 10000.0, -1.0);
        for (a, b) in row.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
