//! Dense row-major tensors over f64.
//!
//! Deliberately small: a shape vector, a flat buffer, and the handful of
//! elementwise/reduction helpers the numeric modules need. Hot kernels
//! (convolutions, attention, bilinear sampling) index the flat buffer
//! directly rather than going through checked accessors.
//!
//! Convention: images are `[channels, height, width]`, depth maps are
//! `[height, width]`, conv weights are `[out_c, in_c, kh, kw]`.

use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Build from an existing buffer. Panics if the length does not match.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "buffer length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    /// Standard-normal fill, deterministic for a given RNG state.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    // ── indexing ────────────────────────────────────────────────────────

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(c * self.shape[1] + y) * self.shape[2] + x] = v;
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip on mismatched shapes");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy on mismatched shapes");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn clamp_inplace(&mut self, lo: f64, hi: f64) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }

    /// Round every entry to the nearest f32. Keeps parameter tensors exactly
    /// representable in the 32-bit on-disk format so save/load is lossless.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "dot on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    /// Sum of squared entries.
    pub fn sqnorm(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sqnorm().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    /// `‖self − other‖ / max(‖other‖, floor)`; the floor avoids a blow-up
    /// when comparing against an all-zero reference.
    pub fn rel_err(&self, other: &Tensor) -> f64 {
        self.sub(other).norm() / other.norm().max(1e-12)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn from_vec_checks_length() {
        let t = Tensor::from_vec(&[2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn at3_matches_row_major_layout() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(t.at3(1, 2, 3), (1 * 3 * 4 + 2 * 4 + 3) as f64);
    }

    #[test]
    fn axpy_and_dot_agree_with_manual_loops() {
        let mut rng = rng::stream(1, "tensor-test", 0);
        let a = Tensor::randn(&[5, 7], &mut rng);
        let b = Tensor::randn(&[5, 7], &mut rng);
        let mut c = a.clone();
        c.axpy(2.5, &b);
        let want: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x + 2.5 * y) * x)
            .sum();
        assert!((c.dot(&a) - want).abs() < 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn quantize_f32_is_idempotent() {
        let mut rng = rng::stream(2, "tensor-test", 0);
        let mut t = Tensor::randn(&[64], &mut rng);
        t.quantize_f32();
        let once = t.clone();
        t.quantize_f32();
        assert_eq!(t, once);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a = Tensor::randn(&[16], &mut rng::stream(3, "t", 0));
        let b = Tensor::randn(&[16], &mut rng::stream(3, "t", 0));
        assert_eq!(a, b);
    }
}
