//! Approximate transfer functions built from a few known echoes.
//!
//! Each (source, microphone) channel is modelled as a sum of unit-gain
//! delayed impulses: the direct path plus the echoes of the `K` image
//! microphones nearest to the real one,
//! `H(ω) = Σ_k α e^{-iω (o + τ_k)}`, with `τ_0 = 0` and `o` an optional
//! inter-microphone offset of the direct path.

use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustics::{audible_images, Room, Vec3};
use crate::error::{Error, Result};
use crate::num::Real;

/// Deepest reflection order searched for image microphones.
pub const MAX_IMAGE_ORDER: usize = 12;

/// How channels are modelled in a separation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChannelMode {
    /// Channels learned from the mixture, starting from a random guess.
    Learn,
    /// Anechoic mixture with direct-path channels.
    Anechoic,
    /// Reverberant mixture modelled by the direct path plus `K` echoes.
    /// `Echoes(0)` ignores the reverberation altogether.
    Echoes(usize),
}

impl ChannelMode {
    /// Sparsity weight used with a universal dictionary.
    pub fn default_gamma(self) -> f64 {
        match self {
            ChannelMode::Learn => 1e-1,
            ChannelMode::Anechoic => 10.0,
            ChannelMode::Echoes(0) => 10.0,
            ChannelMode::Echoes(1) => 1e-3,
            ChannelMode::Echoes(_) => 0.0,
        }
    }

    /// The nine modes of the reference sweep: learn, anechoic, K = 0..=6.
    pub fn standard_sweep() -> Vec<ChannelMode> {
        let mut modes = vec![ChannelMode::Learn, ChannelMode::Anechoic];
        modes.extend((0..=6).map(ChannelMode::Echoes));
        modes
    }

    pub fn echoes(self) -> usize {
        match self {
            ChannelMode::Echoes(k) => k,
            _ => 0,
        }
    }
}

impl fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelMode::Learn => f.write_str("learn"),
            ChannelMode::Anechoic => f.write_str("anechoic"),
            ChannelMode::Echoes(k) => write!(f, "k{k}"),
        }
    }
}

impl FromStr for ChannelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "learn" => return Ok(ChannelMode::Learn),
            "anechoic" => return Ok(ChannelMode::Anechoic),
            "no-echoes" | "no_echoes" | "noechoes" => return Ok(ChannelMode::Echoes(0)),
            _ => {}
        }
        let digits = t
            .strip_prefix("echoes-")
            .or_else(|| t.strip_prefix("k="))
            .or_else(|| t.strip_prefix('k'))
            .unwrap_or(&t);
        digits
            .parse()
            .map(ChannelMode::Echoes)
            .map_err(|_| Error::Config(format!("unknown channel mode '{s}'")))
    }
}

impl Serialize for ChannelMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ChannelMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where the zero of each channel's delays sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelayReference {
    /// Every (source, mic) direct path at zero: only echo timing is kept.
    PerChannel,
    /// Per source, the earliest direct path across microphones at zero;
    /// the other microphones keep their direct-path lag as `offset_s`.
    #[default]
    PerSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMic {
    pub position: Vec3,
    pub wall_sequence: Vec<usize>,
    /// Extra travel time of the echo relative to the direct path, seconds.
    pub relative_delay_s: f64,
}

/// Delays and gains of one (source, mic) channel. `delays_s[0] == 0` is the
/// direct path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoChannel {
    pub delays_s: Vec<f64>,
    pub amplitudes: Vec<f64>,
    /// Direct-path lag applied to the whole channel, seconds.
    pub offset_s: f64,
}

/// Echo channels `channels[j][m]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoModel {
    pub echoes: usize,
    pub amplitude: f64,
    pub reference: DelayReference,
    pub channels: Vec<Vec<EchoChannel>>,
}

/// The `k` audible images of each microphone nearest to it, as seen from
/// `source`, with their delays relative to the direct path.
pub fn k_nearest_image_mics(room: &Room, mics: &[Vec3], source: Vec3, k: usize) -> Result<Vec<Vec<ImageMic>>> {
    room.check_inside(source, "source")?;
    let c = room.speed_of_sound;
    mics.iter()
        .map(|&mic| {
            if k == 0 {
                room.check_inside(mic, "microphone")?;
                return Ok(Vec::new());
            }
            // An image's parent is never farther from the mic than the image,
            // so a couple of orders beyond k covers the k nearest even when
            // some parents are not audible.
            let mut images = audible_images(room, mic, source, (k + 2).min(MAX_IMAGE_ORDER))?;
            images.retain(|img| img.order > 0);
            images.sort_by(|a, b| {
                a.distance_to(mic)
                    .total_cmp(&b.distance_to(mic))
                    .then_with(|| a.wall_sequence.cmp(&b.wall_sequence))
            });
            if images.len() < k {
                return Err(Error::NotEnoughImages {
                    requested: k,
                    available: images.len(),
                });
            }
            let direct = source.distance(mic);
            Ok(images
                .into_iter()
                .take(k)
                .map(|img| ImageMic {
                    relative_delay_s: (source.distance(img.position) - direct) / c,
                    position: img.position,
                    wall_sequence: img.wall_sequence,
                })
                .collect())
        })
        .collect()
}

/// Echo model for every (source, mic) pair with all gains equal to
/// `amplitude`.
pub fn echo_model(
    room: &Room,
    mics: &[Vec3],
    sources: &[Vec3],
    k: usize,
    amplitude: f64,
    reference: DelayReference,
) -> Result<EchoModel> {
    let c = room.speed_of_sound;
    let channels = sources
        .iter()
        .map(|&src| {
            let per_mic = k_nearest_image_mics(room, mics, src, k)?;
            let direct: Vec<f64> = mics.iter().map(|&m| src.distance(m) / c).collect();
            let earliest = direct.iter().cloned().fold(f64::INFINITY, f64::min);
            Ok(per_mic
                .into_iter()
                .zip(&direct)
                .map(|(imgs, &d)| {
                    let mut delays_s = vec![0.0];
                    delays_s.extend(imgs.iter().map(|i| i.relative_delay_s));
                    delays_s.sort_by(f64::total_cmp);
                    EchoChannel {
                        amplitudes: vec![amplitude; delays_s.len()],
                        delays_s,
                        offset_s: match reference {
                            DelayReference::PerChannel => 0.0,
                            DelayReference::PerSource => d - earliest,
                        },
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(EchoModel {
        echoes: k,
        amplitude,
        reference,
        channels,
    })
}

/// Complex channel `h[[f, m, j]]` and its squared modulus `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix<T: Real> {
    pub h: Array3<Complex<T>>,
    pub q: Array3<T>,
    pub provenance: ChannelMode,
    pub warnings: Vec<String>,
}

impl<T: Real> ChannelMatrix<T> {
    pub fn n_freq(&self) -> usize {
        self.h.dim().0
    }

    pub fn n_mics(&self) -> usize {
        self.h.dim().1
    }

    pub fn n_sources(&self) -> usize {
        self.h.dim().2
    }

    pub fn from_h(h: Array3<Complex<T>>, provenance: ChannelMode) -> Self {
        let q = h.mapv(|c| c.norm_sqr());
        ChannelMatrix {
            h,
            q,
            provenance,
            warnings: Vec::new(),
        }
    }

    /// Channel with `h ≡ 1`.
    pub fn flat(n_freq: usize, n_mics: usize, n_sources: usize, provenance: ChannelMode) -> Self {
        Self::from_h(
            Array3::from_elem((n_freq, n_mics, n_sources), Complex::new(T::one(), T::zero())),
            provenance,
        )
    }

    /// Same channel with the source axis reordered: source `j` of the result
    /// is source `order[j]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let (f, m, _) = self.h.dim();
        let h = Array3::from_shape_fn((f, m, order.len()), |(a, b, c)| self.h[[a, b, order[c]]]);
        ChannelMatrix {
            warnings: self.warnings.clone(),
            ..Self::from_h(h, self.provenance)
        }
    }
}

/// Evaluates every echo channel at the one-sided STFT bin frequencies
/// `f · sample_rate / frame_size`.
pub fn build_channels<T: Real>(
    model: &EchoModel,
    n_freq: usize,
    frame_size: usize,
    sample_rate: u32,
) -> ChannelMatrix<T> {
    let n_src = model.channels.len();
    let n_mics = model.channels.first().map_or(0, Vec::len);
    let frame_s = frame_size as f64 / sample_rate as f64;
    let mut warnings = Vec::new();
    let mut h = Array3::from_elem((n_freq, n_mics, n_src), Complex::new(T::zero(), T::zero()));
    for (j, per_mic) in model.channels.iter().enumerate() {
        for (m, ch) in per_mic.iter().enumerate() {
            let last = ch.delays_s.last().copied().unwrap_or(0.0) + ch.offset_s;
            if last >= frame_s {
                let msg = format!(
                    "source {j} mic {m}: echo at {:.1} ms exceeds the {:.1} ms frame",
                    last * 1e3,
                    frame_s * 1e3
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
            for f in 0..n_freq {
                let omega = 2.0 * std::f64::consts::PI * f as f64 * sample_rate as f64 / frame_size as f64;
                let z: Complex<f64> = ch
                    .delays_s
                    .iter()
                    .zip(&ch.amplitudes)
                    .map(|(&t, &a)| Complex::from_polar(a, -omega * (t + ch.offset_s)))
                    .sum();
                h[[f, m, j]] = Complex::new(T::of(z.re), T::of(z.im));
            }
        }
    }
    let mut out = ChannelMatrix::from_h(h, ChannelMode::Echoes(model.echoes));
    out.warnings = warnings;
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    Anechoic,
    NoEchoes,
    LearnInit,
}

/// Reference channels: flat for the anechoic and no-echo baselines, random
/// (strictly positive power, uniform phase) for learning.
pub fn baseline_channels<T: Real>(
    kind: Baseline,
    n_freq: usize,
    n_mics: usize,
    n_sources: usize,
    seed: u64,
) -> ChannelMatrix<T> {
    match kind {
        Baseline::Anechoic => ChannelMatrix::flat(n_freq, n_mics, n_sources, ChannelMode::Anechoic),
        Baseline::NoEchoes => ChannelMatrix::flat(n_freq, n_mics, n_sources, ChannelMode::Echoes(0)),
        Baseline::LearnInit => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = Array3::from_shape_simple_fn((n_freq, n_mics, n_sources), || {
                let power: f64 = rng.gen_range(0.5..1.5);
                let phase: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                let z = Complex::from_polar(power.sqrt(), phase);
                Complex::new(T::of(z.re), T::of(z.im))
            });
            ChannelMatrix::from_h(h, ChannelMode::Learn)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(delays: &[f64]) -> EchoModel {
        EchoModel {
            echoes: delays.len() - 1,
            amplitude: 1.0,
            reference: DelayReference::PerChannel,
            channels: vec![vec![EchoChannel {
                delays_s: delays.to_vec(),
                amplitudes: vec![1.0; delays.len()],
                offset_s: 0.0,
            }]],
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in ChannelMode::standard_sweep() {
            assert_eq!(m.to_string().parse::<ChannelMode>().unwrap(), m);
        }
        assert_eq!("no-echoes".parse::<ChannelMode>().unwrap(), ChannelMode::Echoes(0));
        assert_eq!("3".parse::<ChannelMode>().unwrap(), ChannelMode::Echoes(3));
        assert!("banana".parse::<ChannelMode>().is_err());
    }

    #[test]
    fn gamma_table() {
        let g: Vec<f64> = ChannelMode::standard_sweep().iter().map(|m| m.default_gamma()).collect();
        assert_eq!(g, [1e-1, 10.0, 10.0, 1e-3, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn direct_path_only_is_flat() {
        let ch: ChannelMatrix<f64> = build_channels(&single(&[0.0]), 1025, 2048, 16000);
        assert!(ch.h.iter().all(|c| (c - Complex::new(1.0, 0.0)).norm() < 1e-15));
        assert!(ch.q.iter().all(|&q| q == 1.0));
        let nb: ChannelMatrix<f64> = baseline_channels(Baseline::NoEchoes, 1025, 1, 1, 0);
        assert_eq!(nb.h, ch.h);
        assert_eq!(nb.q, ch.q);
    }

    #[test]
    fn one_echo_comb() {
        let tau = 0.37e-3;
        let ch: ChannelMatrix<f64> = build_channels(&single(&[0.0, tau]), 1025, 2048, 16000);
        for f in 0..1025 {
            let w = 2.0 * std::f64::consts::PI * f as f64 * 16000.0 / 2048.0;
            assert!((ch.q[[f, 0, 0]] - (2.0 + 2.0 * (w * tau).cos())).abs() < 1e-12);
        }
    }

    #[test]
    fn notch_where_phase_is_pi() {
        // bin 64 is 500 Hz; a 1 ms delay puts it at phase π
        let ch: ChannelMatrix<f64> = build_channels(&single(&[0.0, 1e-3]), 1025, 2048, 16000);
        assert!(ch.q[[64, 0, 0]] < 1e-20);
    }

    #[test]
    fn long_delay_warns() {
        let ch: ChannelMatrix<f64> = build_channels(&single(&[0.0, 0.2]), 5, 2048, 16000);
        assert_eq!(ch.warnings.len(), 1);
    }

    #[test]
    fn learn_init_is_seeded_and_positive() {
        let a: ChannelMatrix<f64> = baseline_channels(Baseline::LearnInit, 10, 3, 2, 5);
        let b: ChannelMatrix<f64> = baseline_channels(Baseline::LearnInit, 10, 3, 2, 5);
        assert_eq!(a, b);
        assert!(a.q.iter().all(|&q| q > 0.0));
        let an: ChannelMatrix<f64> = baseline_channels(Baseline::Anechoic, 10, 3, 2, 5);
        let first = an.q[[0, 0, 0]];
        assert!(an.q.iter().all(|&q| q == first));
    }

    #[test]
    fn broadside_echo_is_twice_the_wall_distance() {
        let room = Room::shoebox([40.0, 40.0, 40.0], 0.4, 16000).unwrap();
        let mic = Vec3::new(0.5, 20.0, 20.0);
        // far away on the wall normal through the mic
        let src = Vec3::new(39.0, 20.0, 20.0);
        let imgs = k_nearest_image_mics(&room, &[mic], src, 1).unwrap();
        assert_eq!(imgs[0][0].wall_sequence, [0]);
        assert!((imgs[0][0].relative_delay_s - 2.0 * 0.5 / 343.0).abs() < 1e-12);
    }

    #[test]
    fn k_zero_and_too_many() {
        let room = Room::shoebox([4.0, 5.0, 3.0], 0.4, 16000).unwrap();
        let mic = Vec3::new(1.0, 1.0, 1.0);
        let src = Vec3::new(3.0, 3.5, 1.5);
        let model = echo_model(&room, &[mic], &[src], 0, 1.0, DelayReference::PerChannel).unwrap();
        assert_eq!(model.channels[0][0].delays_s, [0.0]);
        let err = k_nearest_image_mics(&room, &[mic], src, 100_000).unwrap_err();
        assert!(matches!(err, Error::NotEnoughImages { .. }));
    }

    #[test]
    fn echoes_add_spatial_diversity() {
        let room = Room::default_seven_wall(0.4, 16000).unwrap();
        let mics = crate::acoustics::default_array();
        let src = [Vec3::new(3.2, 2.4, 1.5)];
        let var = |k| {
            let model = echo_model(&room, &mics, &src, k, 1.0, DelayReference::PerChannel).unwrap();
            let ch: ChannelMatrix<f64> = build_channels(&model, 1025, 2048, 16000);
            let mut total = 0.0;
            for f in 0..1025 {
                let vals: Vec<f64> = (0..3).map(|m| ch.q[[f, m, 0]]).collect();
                let mean = vals.iter().sum::<f64>() / 3.0;
                total += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            }
            total
        };
        assert_eq!(var(0), 0.0);
        assert!(var(2) > 0.0);
    }
}
