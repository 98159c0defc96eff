//! Short-time Fourier analysis and overlap-add synthesis.
//!
//! Frames start at sample 0 (no centering) and the signal is zero padded at
//! the end so that the last frame is complete. Analysis and synthesis use
//! the same window; the synthesis side is rescaled so that the product of
//! the two windows overlap-adds to one.

use std::ops::Range;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    /// `sin(π (t + ½) / L)`, the square root of a periodic Hann window.
    Cosine,
    /// Periodic Hann; needs at least 75 % overlap for reconstruction.
    Hann,
}

impl Window {
    pub fn coefficients<T: Real>(self, len: usize) -> Vec<T> {
        let l = len as f64;
        (0..len)
            .map(|t| {
                let t = t as f64;
                T::of(match self {
                    Window::Cosine => (std::f64::consts::PI * (t + 0.5) / l).sin(),
                    Window::Hann => 0.5 - 0.5 * (2.0 * std::f64::consts::PI * t / l).cos(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_size: usize,
    pub hop: usize,
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            frame_size: 2048,
            hop: 1024,
            window: Window::Cosine,
        }
    }
}

impl StftConfig {
    pub fn n_freq(&self) -> usize {
        self.frame_size / 2 + 1
    }

    /// Checks the framing and returns the synthesis gain that makes
    /// `Σ_n w(t - nH)² · gain = 1`.
    pub fn validate(&self) -> Result<f64> {
        if self.frame_size < 2 || self.frame_size % 2 != 0 {
            return Err(Error::Config(format!("frame size {} must be even and ≥ 2", self.frame_size)));
        }
        if self.hop == 0 || self.hop > self.frame_size {
            return Err(Error::Config(format!(
                "hop {} must be in 1..={}",
                self.hop, self.frame_size
            )));
        }
        if self.frame_size % self.hop != 0 {
            return Err(Error::Config(format!(
                "hop {} must divide the frame size {}",
                self.hop, self.frame_size
            )));
        }
        let w: Vec<f64> = self.window.coefficients(self.frame_size);
        let sums: Vec<f64> = (0..self.hop)
            .map(|t| (t..self.frame_size).step_by(self.hop).map(|i| w[i] * w[i]).sum())
            .collect();
        let mean = sums.iter().sum::<f64>() / sums.len() as f64;
        if sums.iter().any(|s| (s - mean).abs() > 1e-10 * mean) {
            return Err(Error::Config(format!(
                "{:?} window with frame {} and hop {} does not overlap-add to a constant",
                self.window, self.frame_size, self.hop
            )));
        }
        Ok(1.0 / mean)
    }

    pub fn n_frames(&self, signal_len: usize) -> usize {
        if signal_len <= self.frame_size {
            1
        } else {
            (signal_len - self.frame_size).div_ceil(self.hop) + 1
        }
    }
}

/// One-sided STFT, `data[[f, n]]` with `f < frame_size / 2 + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram<T: Real> {
    pub data: Array2<Complex<T>>,
    pub config: StftConfig,
    pub sample_rate: u32,
    /// Length of the analysed signal before padding.
    pub signal_len: usize,
}

impl<T: Real> Spectrogram<T> {
    pub fn n_freq(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }

    /// Samples covered by a full set of overlapping frames; reconstruction
    /// is exact there.
    pub fn interior(&self) -> Range<usize> {
        let start = self.config.frame_size - self.config.hop;
        let end = (self.n_frames() - 1) * self.config.hop + self.config.hop;
        start.min(self.signal_len)..end.min(self.signal_len)
    }

    pub fn zeros_like(&self) -> Self {
        Spectrogram {
            data: Array2::from_elem(self.data.dim(), Complex::new(T::zero(), T::zero())),
            ..self.clone()
        }
    }

    pub fn power(&self) -> Array2<T> {
        power(&self.data)
    }
}

/// Elementwise squared modulus.
pub fn power<T: Real>(data: &Array2<Complex<T>>) -> Array2<T> {
    data.mapv(|c| c.norm_sqr())
}

/// Reusable FFT plans and windows for one configuration.
pub struct Stft<T: Real> {
    config: StftConfig,
    window: Vec<T>,
    synthesis_gain: T,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Real> Stft<T> {
    pub fn new(config: StftConfig) -> Result<Self> {
        let gain = config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Stft {
            config,
            window: config.window.coefficients(config.frame_size),
            synthesis_gain: T::of(gain),
            forward: planner.plan_fft_forward(config.frame_size),
            inverse: planner.plan_fft_inverse(config.frame_size),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn analyze(&self, signal: &[T], sample_rate: u32) -> Spectrogram<T> {
        let l = self.config.frame_size;
        let hop = self.config.hop;
        let n_frames = self.config.n_frames(signal.len());
        let n_freq = self.config.n_freq();
        let mut data = Array2::from_elem((n_freq, n_frames), Complex::new(T::zero(), T::zero()));
        let mut buf = vec![Complex::new(T::zero(), T::zero()); l];
        for n in 0..n_frames {
            let start = n * hop;
            for (t, b) in buf.iter_mut().enumerate() {
                let x = signal.get(start + t).copied().unwrap_or_else(T::zero);
                *b = Complex::new(x * self.window[t], T::zero());
            }
            self.forward.process(&mut buf);
            for f in 0..n_freq {
                data[[f, n]] = buf[f];
            }
        }
        Spectrogram {
            data,
            config: self.config,
            sample_rate,
            signal_len: signal.len(),
        }
    }

    /// Overlap-add synthesis, truncated to the original signal length.
    pub fn synthesize(&self, spec: &Spectrogram<T>) -> Vec<T> {
        let l = self.config.frame_size;
        let hop = self.config.hop;
        let n_frames = spec.n_frames();
        let full = (n_frames - 1) * hop + l;
        let mut out = vec![T::zero(); full.max(spec.signal_len)];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); l];
        let scale = self.synthesis_gain / T::of(l as f64);
        for n in 0..n_frames {
            for f in 0..=l / 2 {
                buf[f] = spec.data[[f, n]];
            }
            // Hermitian completion; DC and Nyquist must be real
            buf[0].im = T::zero();
            buf[l / 2].im = T::zero();
            for f in 1..l / 2 {
                buf[l - f] = buf[f].conj();
            }
            self.inverse.process(&mut buf);
            let start = n * hop;
            for t in 0..l {
                out[start + t] += buf[t].re * self.window[t] * scale;
            }
        }
        out.truncate(spec.signal_len);
        out
    }
}

pub fn stft<T: Real>(signal: &[T], config: StftConfig, sample_rate: u32) -> Result<Spectrogram<T>> {
    Ok(Stft::new(config)?.analyze(signal, sample_rate))
}

pub fn istft<T: Real>(spec: &Spectrogram<T>) -> Result<Vec<T>> {
    Ok(Stft::new(spec.config)?.synthesize(spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn default_config_has_1025_bins() {
        let spec = stft(&vec![0.0f64; 16000], StftConfig::default(), 16000).unwrap();
        assert_eq!(spec.n_freq(), 1025);
        assert_eq!(spec.n_frames(), 15);
    }

    #[test]
    fn zero_in_zero_out() {
        let spec = stft(&vec![0.0f64; 5000], StftConfig::default(), 16000).unwrap();
        assert!(spec.data.iter().all(|c| c.norm() == 0.0));
        assert!(spec.power().iter().all(|&v| v == 0.0));
        assert!(istft(&spec.zeros_like()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_centred_sinusoid_peaks_at_its_bin() {
        let cfg = StftConfig::default();
        let bin = 100;
        let x: Vec<f64> = (0..20000)
            .map(|t| (2.0 * std::f64::consts::PI * bin as f64 * t as f64 / 2048.0).cos())
            .collect();
        let v = stft(&x, cfg, 16000).unwrap().power();
        for n in 0..v.ncols() - 1 {
            let col = v.column(n);
            let argmax = (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
            assert_eq!(argmax, bin);
        }
    }

    #[test]
    fn rejects_non_cola() {
        let bad = StftConfig {
            frame_size: 2048,
            hop: 1024,
            window: Window::Hann,
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let too_big = StftConfig {
            hop: 4096,
            ..StftConfig::default()
        };
        assert!(too_big.validate().is_err());
        let hann = StftConfig {
            frame_size: 1024,
            hop: 256,
            window: Window::Hann,
        };
        assert!(hann.validate().is_ok());
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = StftConfig {
            frame_size: 256,
            hop: 128,
            window: Window::Cosine,
        };
        let x = noise(1000, 2);
        let v = stft(&x, cfg, 8000).unwrap().power();
        let w: Vec<f64> = Window::Cosine.coefficients(256);
        for n in 0..v.ncols() {
            let frame_energy: f64 = (0..256)
                .map(|t| (x.get(n * 128 + t).copied().unwrap_or(0.0) * w[t]).powi(2))
                .sum();
            // one-sided sum counts interior bins once
            let col = v.column(n);
            let two_sided = 2.0 * col.sum() - col[0] - col[128];
            assert!((two_sided / 256.0 - frame_energy).abs() < 1e-9 * frame_energy.max(1.0));
        }
    }

    #[test]
    fn round_trip_default_config() {
        let x = noise(40000, 1);
        let spec = stft(&x, StftConfig::default(), 16000).unwrap();
        let y = istft(&spec).unwrap();
        let r = spec.interior();
        assert!(rel_err(&y[r.clone()], &x[r]) < 1e-10);
    }

    #[test]
    fn round_trip_f32() {
        let x: Vec<f32> = noise(9000, 3).into_iter().map(|v| v as f32).collect();
        let spec = stft(&x, StftConfig::default(), 16000).unwrap();
        let y = istft(&spec).unwrap();
        let r = spec.interior();
        let err: f32 = y[r.clone()].iter().zip(&x[r.clone()]).map(|(a, b)| (a - b).powi(2)).sum::<f32>().sqrt();
        let norm: f32 = x[r].iter().map(|a| a * a).sum::<f32>().sqrt();
        assert!(err / norm < 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn linear_and_reconstructing(seed in 0u64..1000, len in 600usize..3000, a in -3.0f64..3.0) {
            let cfg = StftConfig { frame_size: 256, hop: 128, window: Window::Cosine };
            let x1 = noise(len, seed);
            let x2 = noise(len, seed + 7);
            let s1 = stft(&x1, cfg, 8000).unwrap();
            let s2 = stft(&x2, cfg, 8000).unwrap();
            let mix: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| a * p + q).collect();
            let sm = stft(&mix, cfg, 8000).unwrap();
            for ((m, p), q) in sm.data.iter().zip(&s1.data).zip(&s2.data) {
                prop_assert!((m - (p * a + q)).norm() < 1e-9);
            }
            let sum = Spectrogram { data: &s1.data + &s2.data, ..s1.clone() };
            let y = istft(&sum).unwrap();
            let r = s1.interior();
            let target: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| p + q).collect();
            prop_assert!(rel_err(&y[r.clone()], &target[r]) < 1e-10);
        }

        #[test]
        fn power_ignores_phase(re in -5.0f64..5.0, im in -5.0f64..5.0, theta in 0.0f64..6.3) {
            let z = Array2::from_elem((1, 1), Complex::new(re, im));
            let rotated = z.mapv(|c| c * Complex::from_polar(1.0, theta));
            prop_assert!((power(&z)[[0, 0]] - power(&rotated)[[0, 0]]).abs() < 1e-10);
        }
    }

    #[test]
    fn power_of_3_4i_is_25() {
        let z = Array2::from_elem((1, 1), Complex::new(3.0f64, 4.0));
        assert_eq!(power(&z)[[0, 0]], 25.0);
    }
}
