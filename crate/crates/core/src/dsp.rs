//! FFT-based convolution and correlation helpers.

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::num::Real;

fn spectrum<T: Real>(planner: &mut FftPlanner<T>, x: &[T], n: usize) -> Vec<Complex<T>> {
    let mut buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
    buf.resize(n, Complex::new(T::zero(), T::zero()));
    planner.plan_fft_forward(n).process(&mut buf);
    buf
}

/// Full linear convolution, length `a.len() + b.len() - 1`.
pub fn convolve<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    if a.len().min(b.len()) <= 32 {
        let mut out = vec![T::zero(); out_len];
        for (i, &x) in a.iter().enumerate() {
            for (j, &y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        return out;
    }
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fa = spectrum(&mut planner, a, n);
    let mut prod: Vec<Complex<T>> = spectrum(&mut planner, b, n)
        .into_iter()
        .zip(fa)
        .map(|(x, y)| x * y)
        .collect();
    planner.plan_fft_inverse(n).process(&mut prod);
    let scale = T::one() / T::of(n as f64);
    prod.into_iter().take(out_len).map(|c| c.re * scale).collect()
}

/// `r[k] = Σ_t a[t] b[t + k]` for `k in 0..max_lag`, zero outside the
/// supports.
pub fn cross_correlation<T: Real>(a: &[T], b: &[T], max_lag: usize) -> Vec<T> {
    let n = (a.len() + b.len() + max_lag).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fa = spectrum(&mut planner, a, n);
    let mut prod: Vec<Complex<T>> = spectrum(&mut planner, b, n)
        .into_iter()
        .zip(fa)
        .map(|(y, x)| x.conj() * y)
        .collect();
    planner.plan_fft_inverse(n).process(&mut prod);
    let scale = T::one() / T::of(n as f64);
    prod.into_iter().take(max_lag).map(|c| c.re * scale).collect()
}

pub fn energy<T: Real>(x: &[T]) -> T {
    x.iter().map(|&v| v * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for i in 0..a.len() {
            for j in 0..b.len() {
                out[i + j] += a[i] * b[j];
            }
        }
        out
    }

    #[test]
    fn fft_convolution_matches_direct() {
        let a: Vec<f64> = (0..300).map(|i| ((i * 37 % 101) as f64 - 50.0) / 50.0).collect();
        let b: Vec<f64> = (0..77).map(|i| ((i * 13 % 29) as f64 - 14.0) / 14.0).collect();
        let fast = convolve(&a, &b);
        let slow = naive_conv(&a, &b);
        for (x, y) in fast.iter().zip(&slow) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn correlation_lags() {
        let a = [1.0f64, 2.0, 3.0];
        let b = [0.0f64, 1.0, 2.0, 3.0, 0.0];
        let r = cross_correlation(&a, &b, 3);
        assert!((r[0] - 8.0).abs() < 1e-12);
        assert!((r[1] - 14.0).abs() < 1e-12);
        assert!((r[2] - 8.0).abs() < 1e-12);
    }
}
