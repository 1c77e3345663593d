//! Dense row-major tensors over a scalar type chosen at compile time.
//!
//! Experiments run in `f32`; tests and gradient oracles run the same code in
//! `f64` by instantiating the generic items with the other element type.

use std::fmt::{Debug, Display};

use num_traits::Float;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Scalar element of a [`Tensor`].
pub trait Element:
    Float + std::ops::AddAssign + std::ops::SubAssign + std::ops::MulAssign + Copy + Debug + Display + Send + Sync + 'static
{
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// One uniform draw in [-1, 1), consuming exactly one native-width word
    /// (u32 for f32, u64 for f64) from `rng`.
    fn uniform_pm1<R: RngCore + ?Sized>(rng: &mut R) -> Self;

    /// Fills `out` with uniform draws in [-1, 1), consuming one word per
    /// entry in order. Equivalent to repeated [`Element::uniform_pm1`].
    fn fill_uniform_pm1<R: RngCore + ?Sized>(rng: &mut R, out: &mut [Self]);

    /// One standard-normal draw.
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

#[inline(always)]
fn u32_to_pm1(x: u32) -> f32 {
    // Top 24 bits -> [0, 1) on a 2^24 grid, then affine map to [-1, 1).
    ((x >> 8) as f32) * (2.0 / (1u32 << 24) as f32) - 1.0
}

#[inline(always)]
fn u64_to_pm1(x: u64) -> f64 {
    ((x >> 11) as f64) * (2.0 / (1u64 << 53) as f64) - 1.0
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }

    #[inline(always)]
    fn uniform_pm1<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        u32_to_pm1(rng.next_u32())
    }

    fn fill_uniform_pm1<R: RngCore + ?Sized>(rng: &mut R, out: &mut [Self]) {
        let mut words = [0u32; 256];
        let mut rest = out;
        while !rest.is_empty() {
            let take = rest.len().min(words.len());
            rng.fill(&mut words[..take]);
            for (o, &w) in rest[..take].iter_mut().zip(&words[..take]) {
                *o = u32_to_pm1(w);
            }
            rest = &mut rest[take..];
        }
    }

    #[inline(always)]
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }

    #[inline(always)]
    fn uniform_pm1<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        u64_to_pm1(rng.next_u64())
    }

    fn fill_uniform_pm1<R: RngCore + ?Sized>(rng: &mut R, out: &mut [Self]) {
        let mut words = [0u64; 256];
        let mut rest = out;
        while !rest.is_empty() {
            let take = rest.len().min(words.len());
            rng.fill(&mut words[..take]);
            for (o, &w) in rest[..take].iter_mut().zip(&words[..take]) {
                *o = u64_to_pm1(w);
            }
            rest = &mut rest[take..];
        }
    }

    #[inline(always)]
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

/// Dense row-major tensor with an optional gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch {
                context: "Tensor::from_vec",
                expected: shape.to_vec(),
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Gradient buffer, allocating a zeroed one on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
        self.grad.as_mut().unwrap().as_mut_slice()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Simultaneous mutable access to values and (if allocated) gradients.
    pub fn data_and_grad_mut(&mut self) -> (&mut [T], Option<&mut [T]>) {
        (&mut self.data, self.grad.as_deref_mut())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(T::zero());
        }
    }

    pub fn drop_grad(&mut self) {
        self.grad = None;
    }

    /// Casts element-wise into another element type; gradients are dropped.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
            grad: None,
        }
    }
}

/// `out (+)= a · b` for row-major `a: m×k`, `b: k×n`, `out: m×n`.
pub fn mm<T: Element>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if !acc {
        out.fill(T::zero());
    }
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out (+)= aᵀ · b` for `a: m×k`, `b: m×n`, `out: k×n`.
pub fn mm_at_b<T: Element>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if !acc {
        out.fill(T::zero());
    }
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let out_row = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out (+)= a · bᵀ` for `a: m×k`, `b: n×k`, `out: m×n`.
pub fn mm_a_bt<T: Element>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            let o = &mut out[i * n + j];
            if acc {
                *o += s;
            } else {
                *o = s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    out[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn mm_matches_hand_example() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut out = [0.0; 4];
        mm(&mut out, &a, &b, 2, 3, 2, false);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_variants_match_naive() {
        let mut rng_state = 1u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) as f64) / (1u64 << 31) as f64 - 0.5
        };
        let (m, k, n) = (4, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| next()).collect();

        let want = naive_mm(&a, &b, m, k, n);

        let mut got = vec![0.0; m * n];
        mm(&mut got, &a, &b, m, k, n, false);
        assert_eq!(got, want);

        // aᵀ·b with a stored transposed reproduces the same product.
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for l in 0..k {
                at[l * m + i] = a[i * k + l];
            }
        }
        let mut got2 = vec![0.0; m * n];
        mm_at_b(&mut got2, &at, &b, k, m, n, false);
        for (x, y) in got2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // a·bᵀ with b stored transposed likewise.
        let mut bt = vec![0.0; n * k];
        for l in 0..k {
            for j in 0..n {
                bt[j * k + l] = b[l * n + j];
            }
        }
        let mut got3 = vec![0.0; m * n];
        mm_a_bt(&mut got3, &a, &bt, m, k, n, false);
        for (x, y) in got3.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulate_adds_on_top() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let b = [2.0, 3.0, 4.0, 5.0];
        let mut out = [1.0; 4];
        mm(&mut out, &a, &b, 2, 2, 2, true);
        assert_eq!(out, [3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn bulk_uniform_fill_matches_single_draws() {
        use rand::SeedableRng;
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut b = a.clone();

        let mut bulk32 = vec![0f32; 777];
        f32::fill_uniform_pm1(&mut a, &mut bulk32);
        let single32: Vec<f32> = (0..777).map(|_| f32::uniform_pm1(&mut b)).collect();
        assert_eq!(bulk32, single32);

        let mut bulk64 = vec![0f64; 333];
        f64::fill_uniform_pm1(&mut a, &mut bulk64);
        let single64: Vec<f64> = (0..333).map(|_| f64::uniform_pm1(&mut b)).collect();
        assert_eq!(bulk64, single64);

        assert!(bulk32.iter().all(|x| (-1.0..1.0).contains(x)));
        assert!(bulk64.iter().all(|x| (-1.0..1.0).contains(x)));
    }

    #[test]
    fn cast_roundtrip_preserves_f32_values() {
        let t = Tensor::<f32>::from_vec(&[3], vec![0.5, -1.25, 3.0]).unwrap();
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert_eq!(t.data(), back.data());
    }
}
