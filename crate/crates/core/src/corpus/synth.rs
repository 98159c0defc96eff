//! Deterministic synthetic signals.
//!
//! [`synth_speech_like`] produces simple fixtures with controllable spectral
//! support. [`synth_utterance`] produces a crude voiced/unvoiced speech
//! imitation from a [`SpeakerModel`] (pitch range, vowel formants,
//! fricative bands), which is enough structure for speaker dictionaries to be
//! informative.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{AudioClip, Corpus};

/// Fade applied to both ends of the fixtures.
const TAPER_S: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SynthKind {
    /// Harmonics of `f0` restricted to `band` (Hz).
    Harmonic { f0: f64, band: (f64, f64) },
    /// Sinusoidal frequency sweep inside `band`.
    Chirp { band: (f64, f64) },
    /// White noise band-limited to `band` by FFT masking.
    FilteredNoise { band: (f64, f64) },
}

fn taper(x: &mut [f64], sample_rate: u32) {
    let n = ((TAPER_S * sample_rate as f64) as usize).min(x.len() / 2);
    for i in 0..n {
        let g = 0.5 - 0.5 * (PI * i as f64 / n as f64).cos();
        x[i] *= g;
        let last = x.len() - 1 - i;
        x[last] *= g;
    }
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / rms);
    }
}

pub fn synth_speech_like(kind: SynthKind, duration_s: f64, seed: u64, sample_rate: u32) -> AudioClip {
    let n = (duration_s * sample_rate as f64).round().max(1.0) as usize;
    let fs = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; n];
    let name = match kind {
        SynthKind::Harmonic { f0, band } => {
            let mut h = 1;
            while h as f64 * f0 <= band.1.min(fs / 2.0) {
                let f = h as f64 * f0;
                if f >= band.0 {
                    let amp = rng.gen_range(0.5..1.0) / h as f64;
                    let phase = rng.gen_range(0.0..2.0 * PI);
                    for (t, v) in x.iter_mut().enumerate() {
                        *v += amp * (2.0 * PI * f * t as f64 / fs + phase).sin();
                    }
                }
                h += 1;
            }
            "harmonic"
        }
        SynthKind::Chirp { band } => {
            let margin = 0.1 * (band.1 - band.0);
            let (lo, hi) = (band.0 + margin, band.1 - margin);
            let center = 0.5 * (lo + hi);
            let depth = 0.5 * (hi - lo);
            let rate = rng.gen_range(0.5..2.0);
            let mut phase = rng.gen_range(0.0..2.0 * PI);
            for (t, v) in x.iter_mut().enumerate() {
                let f = center + depth * (2.0 * PI * rate * t as f64 / fs).sin();
                phase += 2.0 * PI * f / fs;
                *v = phase.sin();
            }
            "chirp"
        }
        SynthKind::FilteredNoise { band } => {
            let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(rng.gen_range(-1.0..1.0), 0.0)).collect();
            let mut planner = FftPlanner::new();
            planner.plan_fft_forward(n).process(&mut buf);
            for (k, c) in buf.iter_mut().enumerate() {
                let f = k.min(n - k) as f64 * fs / n as f64;
                if f < band.0 || f > band.1 {
                    *c = Complex::new(0.0, 0.0);
                }
            }
            planner.plan_fft_inverse(n).process(&mut buf);
            for (v, c) in x.iter_mut().zip(&buf) {
                *v = c.re / n as f64;
            }
            "noise"
        }
    };
    taper(&mut x, sample_rate);
    normalize_rms(&mut x, 0.1);
    AudioClip {
        samples: x,
        sample_rate,
        speaker_id: None,
        utterance_id: format!("{name}-{seed}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerModel {
    pub id: String,
    pub gender: Gender,
    /// Mean fundamental frequency, Hz.
    pub f0: f64,
    /// Vowel formant triples (F1, F2, F3), Hz.
    pub vowels: Vec<[f64; 3]>,
    /// Fricative noise bands, Hz.
    pub fricatives: Vec<(f64, f64)>,
    /// Spectral tilt exponent of the glottal source.
    pub tilt: f64,
}

/// Average adult male formants of six vowels.
const VOWELS: [[f64; 3]; 6] = [
    [270.0, 2290.0, 3010.0],
    [530.0, 1840.0, 2480.0],
    [730.0, 1090.0, 2440.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
    [640.0, 1190.0, 2390.0],
];

const FRICATIVES: [(f64, f64); 3] = [(3800.0, 7500.0), (2300.0, 5500.0), (1200.0, 7000.0)];

pub fn synthetic_speaker(id: &str, gender: Gender, seed: u64) -> SpeakerModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f0, scale) = match gender {
        Gender::Male => (rng.gen_range(95.0..135.0), rng.gen_range(0.92..1.05)),
        Gender::Female => (rng.gen_range(175.0..240.0), rng.gen_range(1.12..1.25)),
    };
    let vowels = VOWELS
        .iter()
        .map(|v| {
            let mut out = [0.0; 3];
            for (o, &f) in out.iter_mut().zip(v) {
                *o = f * scale * rng.gen_range(0.93..1.07);
            }
            out
        })
        .collect();
    let fricatives = FRICATIVES
        .iter()
        .map(|&(lo, hi)| (lo * rng.gen_range(0.9..1.1), (hi * rng.gen_range(0.9..1.1)).min(7900.0)))
        .collect();
    SpeakerModel {
        id: id.to_string(),
        gender,
        f0,
        vowels,
        fricatives,
        tilt: rng.gen_range(0.8..1.3),
    }
}

fn formant_gain(f: f64, formants: &[f64; 3]) -> f64 {
    formants
        .iter()
        .map(|&fc| {
            let bw = 60.0 + 0.06 * fc;
            let r = f / fc;
            1.0 / ((1.0 - r * r).powi(2) + (f * bw / (fc * fc)).powi(2)).sqrt()
        })
        .product()
}

fn smooth_env(len: usize, attack: usize) -> impl Fn(usize) -> f64 {
    move |i| {
        let a = attack.min(len / 2).max(1);
        if i < a {
            0.5 - 0.5 * (PI * i as f64 / a as f64).cos()
        } else if i >= len - a {
            0.5 - 0.5 * (PI * (len - i) as f64 / a as f64).cos()
        } else {
            1.0
        }
    }
}

/// One utterance of `duration_s` seconds: syllables made of an optional
/// fricative followed by a pitched vowel, separated by short pauses.
pub fn synth_utterance(speaker: &SpeakerModel, duration_s: f64, seed: u64, sample_rate: u32) -> AudioClip {
    let fs = sample_rate as f64;
    let n = (duration_s * fs).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5eec);
    let mut x = vec![0.0; n];
    let nyq = 0.95 * fs / 2.0;
    let mut pos = (rng.gen_range(0.0..0.15) * fs) as usize;
    while pos < n {
        if rng.gen_bool(0.35) {
            let len = (rng.gen_range(0.05..0.12) * fs) as usize;
            let (lo, hi) = speaker.fricatives[rng.gen_range(0..speaker.fricatives.len())];
            let noise = synth_speech_like(SynthKind::FilteredNoise { band: (lo, hi) }, len as f64 / fs, rng.gen(), sample_rate);
            let gain = rng.gen_range(0.15..0.4);
            let env = smooth_env(len, len / 4);
            for i in 0..len.min(n.saturating_sub(pos)) {
                x[pos + i] += gain * env(i) * noise.samples[i];
            }
            pos += len;
        }
        if pos >= n {
            break;
        }
        let len = (rng.gen_range(0.12..0.3) * fs) as usize;
        let vowel = speaker.vowels[rng.gen_range(0..speaker.vowels.len())];
        let pitch = speaker.f0 * rng.gen_range(0.85..1.15);
        let glide = rng.gen_range(-0.15..0.1);
        let loud = rng.gen_range(0.6..1.0);
        let env = smooth_env(len, (0.02 * fs) as usize);
        let n_harm = (nyq / (pitch * 0.85)) as usize;
        let phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        let mut theta = 0.0;
        for i in 0..len.min(n - pos) {
            let prog = i as f64 / len as f64;
            let f0 = pitch * (1.0 + glide * prog);
            theta += 2.0 * PI * f0 / fs;
            let mut s = 0.0;
            for (h, ph) in phases.iter().enumerate() {
                let f = (h + 1) as f64 * f0;
                if f > nyq {
                    break;
                }
                let amp = formant_gain(f, &vowel) / ((h + 1) as f64).powf(speaker.tilt);
                s += amp * ((h + 1) as f64 * theta + ph).sin();
            }
            x[pos + i] += loud * env(i) * s;
        }
        pos += len;
        let pause = if rng.gen_bool(0.15) {
            rng.gen_range(0.2..0.4)
        } else {
            rng.gen_range(0.02..0.12)
        };
        pos += (pause * fs) as usize;
    }
    taper(&mut x, sample_rate);
    normalize_rms(&mut x, 0.05);
    AudioClip {
        samples: x,
        sample_rate,
        speaker_id: Some(speaker.id.clone()),
        utterance_id: format!("{}-u{seed}", speaker.id),
    }
}

/// `n_male + n_female` synthetic speakers with `utterances` clips each.
/// Speaker ids are `m00, m01, …, f00, f01, …`; utterance ids `<spk>-uNN`.
pub fn synthetic_corpus(
    n_male: usize,
    n_female: usize,
    utterances: usize,
    duration_s: f64,
    seed: u64,
    sample_rate: u32,
) -> (Corpus, Vec<SpeakerModel>) {
    let mut models = Vec::new();
    for i in 0..n_male {
        models.push(synthetic_speaker(&format!("m{i:02}"), Gender::Male, seed.wrapping_add(1000 + i as u64)));
    }
    for i in 0..n_female {
        models.push(synthetic_speaker(&format!("f{i:02}"), Gender::Female, seed.wrapping_add(2000 + i as u64)));
    }
    let mut speakers = BTreeMap::new();
    for (k, model) in models.iter().enumerate() {
        let clips = (0..utterances)
            .map(|u| {
                let useed = seed.wrapping_mul(31).wrapping_add((k * 1000 + u) as u64);
                let mut clip = synth_utterance(model, duration_s, useed, sample_rate);
                clip.utterance_id = format!("{}-u{u:02}", model.id);
                clip
            })
            .collect();
        speakers.insert(model.id.clone(), clips);
    }
    (
        Corpus {
            speakers,
            rejects: Vec::new(),
        },
        models,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn band_energy(x: &[f64], fs: f64, lo: f64, hi: f64) -> f64 {
        let n = x.len();
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        buf.iter()
            .take(n / 2 + 1)
            .enumerate()
            .filter(|(k, _)| {
                let f = *k as f64 * fs / n as f64;
                f >= lo && f <= hi
            })
            .map(|(_, c)| c.norm_sqr())
            .sum()
    }

    #[test]
    fn same_seed_same_samples() {
        let k = SynthKind::Chirp { band: (300.0, 900.0) };
        assert_eq!(synth_speech_like(k, 0.5, 3, 16000), synth_speech_like(k, 0.5, 3, 16000));
        let spk = synthetic_speaker("m00", Gender::Male, 1);
        assert_eq!(synth_utterance(&spk, 1.0, 9, 16000), synth_utterance(&spk, 1.0, 9, 16000));
    }

    #[test]
    fn harmonic_peaks_at_multiples_of_f0() {
        let clip = synth_speech_like(SynthKind::Harmonic { f0: 200.0, band: (0.0, 2000.0) }, 1.0, 5, 16000);
        let fs = 16000.0;
        let n = clip.samples.len();
        let mut buf: Vec<Complex<f64>> = clip.samples.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let mag: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm()).collect();
        // bins are 1 Hz apart
        for h in 1..=10 {
            let k = (h as f64 * 200.0 * n as f64 / fs) as usize;
            let neighbourhood = mag[k - 50..k + 50].iter().cloned().fold(0.0, f64::max);
            assert_eq!(mag[k], neighbourhood, "harmonic {h}");
        }
        let between = mag[300];
        assert!(between < 1e-3 * mag[200]);
    }

    #[test]
    fn disjoint_bands_leak_below_minus_40_db() {
        let fs = 16000.0;
        let a = synth_speech_like(SynthKind::Harmonic { f0: 180.0, band: (0.0, 2000.0) }, 2.0, 1, 16000);
        let b = synth_speech_like(SynthKind::Chirp { band: (3000.0, 5000.0) }, 2.0, 2, 16000);
        let a_in = band_energy(&a.samples, fs, 0.0, 2000.0);
        let a_out = band_energy(&a.samples, fs, 3000.0, 5000.0);
        let b_in = band_energy(&b.samples, fs, 3000.0, 5000.0);
        let b_out = band_energy(&b.samples, fs, 0.0, 2000.0);
        assert!(10.0 * (a_out / a_in).log10() < -40.0);
        assert!(10.0 * (b_out / b_in).log10() < -40.0);
    }

    #[test]
    fn utterance_has_speech_like_range() {
        let spk = synthetic_speaker("f00", Gender::Female, 4);
        let clip = synth_utterance(&spk, 2.0, 1, 16000);
        assert_eq!(clip.samples.len(), 32000);
        assert!(clip.samples.iter().all(|v| v.is_finite() && v.abs() < 1.0));
        let lo = band_energy(&clip.samples, 16000.0, 50.0, 4000.0);
        let hi = band_energy(&clip.samples, 16000.0, 4000.0, 8000.0);
        assert!(lo > hi);
    }

    #[test]
    fn corpus_layout() {
        let (corpus, models) = synthetic_corpus(2, 1, 3, 0.5, 11, 16000);
        assert_eq!(models.len(), 3);
        let ids: Vec<_> = corpus.speakers.keys().cloned().collect();
        assert_eq!(ids, ["f00", "m00", "m01"]);
        assert_eq!(corpus.speakers["m01"][2].utterance_id, "m01-u02");
    }
}
