//! Room impulse responses from image sources.

use std::f64::consts::PI;
use std::path::Path;

use super::geometry::Vec3;
use super::images::{audible_images, ImageSource};
use super::room::Room;
use crate::error::{Error, Result};

/// Length of the windowed-sinc fractional delay kernel.
pub const KERNEL_TAPS: usize = 81;
const HALF_KERNEL: i64 = (KERNEL_TAPS / 2) as i64;

#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
    /// (source id, microphone id)
    pub reference: (usize, usize),
}

impl Rir {
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::corpus::write_wav_f32(path, &self.taps, self.sample_rate)
    }
}

fn hann(k: usize) -> f64 {
    0.5 - 0.5 * (2.0 * PI * k as f64 / (KERNEL_TAPS - 1) as f64).cos()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Adds `amplitude · δ(t - delay)` band-limited by an 81-tap Hann-windowed
/// sinc. `delay` is in samples; taps falling before index 0 are dropped.
pub fn add_fractional_impulse(buf: &mut [f64], delay: f64, amplitude: f64) {
    let center = delay.floor() as i64;
    for k in 0..KERNEL_TAPS {
        let n = center - HALF_KERNEL + k as i64;
        if n < 0 || n as usize >= buf.len() {
            continue;
        }
        buf[n as usize] += amplitude * hann(k) * sinc(n as f64 - delay);
    }
}

/// Sum of `attenuation / (4π d)` fractional-delay pulses at `d / c`.
pub fn rir_from_images(room: &Room, images: &[ImageSource], receiver: Vec3, reference: (usize, usize)) -> Rir {
    let fs = room.sample_rate as f64;
    let c = room.speed_of_sound;
    let max_delay = images
        .iter()
        .map(|img| img.distance_to(receiver) / c * fs)
        .fold(0.0, f64::max);
    let len = max_delay.floor() as usize + HALF_KERNEL as usize + 2;
    let mut taps = vec![0.0; len];
    for img in images {
        let d = img.distance_to(receiver);
        add_fractional_impulse(&mut taps, d / c * fs, img.attenuation / (4.0 * PI * d));
    }
    Rir {
        taps,
        sample_rate: room.sample_rate,
        reference,
    }
}

pub fn synthesize_rir(room: &Room, source: Vec3, mic: Vec3, max_order: usize) -> Result<Rir> {
    let images = audible_images(room, source, mic, max_order)?;
    Ok(rir_from_images(room, &images, mic, (0, 0)))
}

/// Energy decay curve in dB (Schroeder backward integration), normalized to
/// 0 dB at t = 0.
pub fn energy_decay_db(taps: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut edc: Vec<f64> = taps
        .iter()
        .rev()
        .map(|&h| {
            acc += h * h;
            acc
        })
        .collect();
    edc.reverse();
    let total = edc.first().copied().unwrap_or(0.0);
    edc.iter()
        .map(|&e| 10.0 * (e / total).max(1e-300).log10())
        .collect()
}

/// T60 in seconds extrapolated from a least-squares line fit of the decay
/// curve between `-5` dB and `-5 - range_db` dB (range 20 gives T20).
pub fn t60_schroeder(taps: &[f64], sample_rate: u32, range_db: f64) -> Result<f64> {
    let edc = energy_decay_db(taps);
    let (hi, lo) = (-5.0, -5.0 - range_db);
    let pts: Vec<(f64, f64)> = edc
        .iter()
        .enumerate()
        .filter(|(_, &e)| e <= hi && e >= lo)
        .map(|(i, &e)| (i as f64 / sample_rate as f64, e))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Input(format!(
            "decay curve does not span -5 to {lo} dB"
        )));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let me = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - me)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let slope = cov / var;
    if !(slope < 0.0) {
        return Err(Error::Input("decay curve is not decreasing".into()));
    }
    Ok(-60.0 / slope)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_field_pulse() {
        let room = Room::shoebox([8.0, 8.0, 4.0], 0.4, 16000).unwrap();
        let src = Vec3::new(2.0, 2.0, 2.0);
        let mic = Vec3::new(4.1, 3.3, 1.7);
        let d = src.distance(mic);
        let rir = synthesize_rir(&room, src, mic, 0).unwrap();
        let delay = d / 343.0 * 16000.0;
        let mut expected = vec![0.0; rir.taps.len()];
        add_fractional_impulse(&mut expected, delay, 1.0 / (4.0 * PI * d));
        assert_eq!(rir.taps, expected);
        // band-limited pulse peaks at the nearest sample
        let peak = rir
            .taps
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        assert_eq!(peak, delay.round() as usize);
        let sum: f64 = rir.taps.iter().sum();
        assert!((sum - 1.0 / (4.0 * PI * d)).abs() < 0.01 / (4.0 * PI * d));
    }

    #[test]
    fn integer_delay_is_a_single_tap() {
        let mut buf = vec![0.0; 200];
        add_fractional_impulse(&mut buf, 100.0, 2.0);
        assert!((buf[100] - 2.0).abs() < 1e-12);
        let rest: f64 = buf.iter().enumerate().filter(|(i, _)| *i != 100).map(|(_, v)| v.abs()).sum();
        assert!(rest < 1e-12);
    }

    #[test]
    fn full_absorption_kills_reflections() {
        let room = Room::shoebox([5.0, 4.0, 3.0], 1.0, 16000).unwrap();
        let src = Vec3::new(1.0, 1.2, 1.5);
        let mic = Vec3::new(3.5, 2.5, 1.2);
        let direct = synthesize_rir(&room, src, mic, 0).unwrap();
        let full = synthesize_rir(&room, src, mic, 3).unwrap();
        let n = direct.taps.len();
        assert!(full.taps[..n].iter().zip(&direct.taps).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(full.taps[n..].iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn exponential_decay_t60() {
        // h(t) = exp(-6.9078 t / T) decays 60 dB in T seconds
        let fs = 16000;
        let t60 = 0.25;
        let taps: Vec<f64> = (0..fs)
            .map(|i| (-3.0 * 10f64.ln() * i as f64 / fs as f64 / t60).exp())
            .collect();
        let est = t60_schroeder(&taps, fs, 20.0).unwrap();
        assert!((est - t60).abs() < 0.01, "{est}");
    }
}
