//! Multichannel IS-NMF separation by multiplicative updates, with channel
//! powers either fixed to an echo model or learned.

use ndarray::{s, Array2, Array3, ArrayView2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::echomodel::{ChannelMatrix, ChannelMode};
use crate::error::{Error, Result};
use crate::nmf::{
    activation_ratios, apply_ratio, channel_ratios, first_descent, model_powers, mu_cost, random_positive,
    renormalize_channels, source_powers,
};
use crate::num::Real;
use crate::spectral::{istft, Spectrogram};

pub const DEFAULT_MU_ITERATIONS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DictionaryMode {
    /// Every source uses the concatenation of all training speakers.
    Universal,
    /// Each source uses the block of its own speaker.
    Speaker,
}

impl std::fmt::Display for DictionaryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DictionaryMode::Universal => "universal",
            DictionaryMode::Speaker => "speaker",
        })
    }
}

impl std::str::FromStr for DictionaryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "universal" => Ok(DictionaryMode::Universal),
            "speaker" | "speaker-specific" => Ok(DictionaryMode::Speaker),
            _ => Err(Error::Config(format!("unknown dictionary mode '{s}'"))),
        }
    }
}

/// Default sparsity weight: the per-mode table with a universal dictionary,
/// none with speaker dictionaries.
pub fn default_gamma(mode: ChannelMode, dict: DictionaryMode) -> f64 {
    match dict {
        DictionaryMode::Universal => mode.default_gamma(),
        DictionaryMode::Speaker => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuRunConfig {
    pub channel_mode: ChannelMode,
    pub gamma: f64,
    pub iterations: usize,
    pub dictionary_mode: DictionaryMode,
    pub seed: u64,
    pub reference_mic: usize,
}

impl MuRunConfig {
    pub fn new(channel_mode: ChannelMode, dictionary_mode: DictionaryMode, seed: u64) -> Self {
        MuRunConfig {
            channel_mode,
            gamma: default_gamma(channel_mode, dictionary_mode),
            iterations: DEFAULT_MU_ITERATIONS,
            dictionary_mode,
            seed,
            reference_mic: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be finite and non-negative, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MuOutput<T: Real> {
    /// Waveform of each source at the reference microphone.
    pub estimates: Vec<Vec<T>>,
    /// `masks[j][m]`, `[F, N]`.
    pub masks: Vec<Vec<Array2<T>>>,
    pub cost_trace: Vec<f64>,
    pub activations: Vec<Array2<T>>,
    pub channel_power: Array3<T>,
}

/// Seed for a source's activations, derived from its dictionary and channel
/// so that relabelling the sources relabels the result.
pub(crate) fn source_seed<T: Real>(seed: u64, dict: ArrayView2<'_, T>, channel: impl Iterator<Item = T>) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for v in dict.iter().copied().chain(channel) {
        hasher.update(v.to_f64_lossy().to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub(crate) fn check_mixture<T: Real>(mix: &[Spectrogram<T>]) -> Result<(usize, usize)> {
    let first = mix.first().ok_or_else(|| Error::Input("no microphone signals".into()))?;
    let dim = first.data.dim();
    if mix.iter().any(|s| s.data.dim() != dim) {
        return Err(Error::Shape("microphone spectrograms differ in shape".into()));
    }
    if mix.iter().all(|s| s.data.iter().all(|c| c.norm_sqr() == T::zero())) {
        return Err(Error::Input("mixture is silent".into()));
    }
    Ok(dim)
}

fn check_sizes<T: Real>(
    mix: &[Spectrogram<T>],
    channels: &ChannelMatrix<T>,
    dicts: &[ArrayView2<'_, T>],
) -> Result<(usize, usize)> {
    let (n_freq, n_frames) = check_mixture(mix)?;
    if channels.q.dim() != (n_freq, mix.len(), dicts.len()) {
        return Err(Error::Shape(format!(
            "channel shape {:?} for {} bins, {} mics, {} sources",
            channels.q.dim(),
            n_freq,
            mix.len(),
            dicts.len()
        )));
    }
    if let Some(d) = dicts.iter().find(|d| d.nrows() != n_freq) {
        return Err(Error::Shape(format!("dictionary has {} bins, spectra have {n_freq}", d.nrows())));
    }
    Ok((n_freq, n_frames))
}

/// Fits the activations (and the channel powers in learn mode) to the
/// microphone power spectrograms, then reconstructs each source at the
/// reference microphone with power-ratio masks. The cost trace holds the
/// regularized cost after each iteration.
pub fn separate_mu<T: Real>(
    mix: &[Spectrogram<T>],
    channels: &ChannelMatrix<T>,
    dicts: &[ArrayView2<'_, T>],
    config: &MuRunConfig,
) -> Result<MuOutput<T>> {
    config.validate()?;
    let (_, n_frames) = check_sizes(mix, channels, dicts)?;
    if config.reference_mic >= mix.len() {
        return Err(Error::Input(format!(
            "reference mic {} of {}",
            config.reference_mic,
            mix.len()
        )));
    }
    let v: Vec<Array2<T>> = mix.iter().map(Spectrogram::power).collect();
    let gamma = T::of(config.gamma);
    let learn = config.channel_mode == ChannelMode::Learn;
    let mut q = channels.q.clone();
    let mut z: Vec<Array2<T>> = dicts
        .iter()
        .enumerate()
        .map(|(j, d)| {
            let seed = source_seed(config.seed, *d, q.slice(s![.., .., j]).iter().copied());
            random_positive((d.ncols(), n_frames), &mut ChaCha8Rng::seed_from_u64(seed))
        })
        .collect();
    let mut vhat = model_powers(&q, &source_powers(dicts, &z));
    let mut cost = mu_cost(&v, &vhat, &z, gamma);
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let ratios = activation_ratios(&v, &vhat, dicts, &q, gamma);
        if let Some(((nz, nv), c)) = first_descent(cost, &[1.0, 0.5], |e| {
            let nz: Vec<_> = z.iter().zip(&ratios).map(|(z, r)| apply_ratio(z, r, e)).collect();
            let nv = model_powers(&q, &source_powers(dicts, &nz));
            let c = mu_cost(&v, &nv, &nz, gamma);
            ((nz, nv), c)
        }) {
            z = nz;
            vhat = nv;
            cost = c;
        }
        if learn {
            let p = source_powers(dicts, &z);
            let ratio = channel_ratios(&v, &vhat, &p);
            if let Some(((nq, nz, nv), c)) = first_descent(cost, &[1.0, 0.5, 0.25], |e| {
                let mut nq = q.clone();
                Zip::from(&mut nq).and(&ratio).for_each(|q, &r| *q *= r.powf(e));
                let mut nz = z.clone();
                renormalize_channels(&mut nq, &mut nz);
                let nv = model_powers(&nq, &p);
                let c = mu_cost(&v, &nv, &nz, gamma);
                ((nq, nz, nv), c)
            }) {
                q = nq;
                z = nz;
                vhat = nv;
                cost = c;
            }
        }
        if !cost.is_finite() {
            return Err(Error::Numerical {
                iteration: it,
                message: format!("cost is {cost}"),
            });
        }
        trace.push(cost.to_f64_lossy());
    }
    let masks = power_masks(&q, &source_powers(dicts, &z));
    let estimates = select_mask_output(mix, &masks, config.reference_mic)?;
    Ok(MuOutput {
        estimates,
        masks,
        cost_trace: trace,
        activations: z,
        channel_power: q,
    })
}

/// `M_jm = q_jm ⊙ P_j / Σ_j' q_j'm ⊙ P_j'`; bins where every source is zero
/// are split evenly.
pub fn power_masks<T: Real>(q: &Array3<T>, p: &[Array2<T>]) -> Vec<Vec<Array2<T>>> {
    let (_, n_mics, n_src) = q.dim();
    let even = T::one() / T::of(n_src as f64);
    let mut masks: Vec<Vec<Array2<T>>> = (0..n_src).map(|_| Vec::with_capacity(n_mics)).collect();
    for m in 0..n_mics {
        let parts: Vec<Array2<T>> = p
            .iter()
            .enumerate()
            .map(|(j, pj)| {
                let mut out = pj.clone();
                Zip::from(out.rows_mut())
                    .and(q.slice(s![.., m, j]))
                    .for_each(|mut row, &qf| row.mapv_inplace(|x| x * qf));
                out
            })
            .collect();
        let mut total = Array2::zeros(p[0].raw_dim());
        for part in &parts {
            total += part;
        }
        for (j, mut part) in parts.into_iter().enumerate() {
            Zip::from(&mut part)
                .and(&total)
                .for_each(|x, &t| *x = if t > T::zero() { *x / t } else { even });
            masks[j].push(part);
        }
    }
    masks
}

/// Applies `masks[j][reference_mic]` to that microphone's STFT and
/// resynthesizes each source.
pub fn select_mask_output<T: Real>(
    mix: &[Spectrogram<T>],
    masks: &[Vec<Array2<T>>],
    reference_mic: usize,
) -> Result<Vec<Vec<T>>> {
    let y = mix
        .get(reference_mic)
        .ok_or_else(|| Error::Input(format!("reference mic {reference_mic} of {}", mix.len())))?;
    masks
        .iter()
        .map(|per_mic| {
            let mask = per_mic
                .get(reference_mic)
                .ok_or_else(|| Error::Input(format!("no mask for mic {reference_mic}")))?;
            if mask.dim() != y.data.dim() {
                return Err(Error::Shape(format!("mask {:?} vs spectrogram {:?}", mask.dim(), y.data.dim())));
            }
            let mut spec = y.clone();
            Zip::from(&mut spec.data).and(mask).for_each(|c, &g| *c = c.scale(g));
            istft(&spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::echomodel::ChannelMatrix;
    use crate::nmf::random_positive;
    use crate::spectral::{stft, StftConfig};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn small_cfg() -> StftConfig {
        StftConfig {
            frame_size: 64,
            hop: 32,
            ..StftConfig::default()
        }
    }

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    fn mixture(mics: usize, len: usize, seed: u64) -> Vec<Spectrogram<f64>> {
        (0..mics)
            .map(|m| stft(&noise(len, seed + m as u64), small_cfg(), 16000).unwrap())
            .collect()
    }

    fn dicts(n: usize, atoms: usize, seed: u64) -> Vec<Array2<f64>> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| random_positive((33, atoms), &mut r)).collect()
    }

    #[test]
    fn single_source_returns_the_mixture() {
        let mix = mixture(2, 640, 1);
        let d = dicts(1, 4, 2);
        let dv: Vec<_> = d.iter().map(|d| d.view()).collect();
        let ch = ChannelMatrix::flat(33, 2, 1, ChannelMode::Echoes(0));
        let mut cfg = MuRunConfig::new(ChannelMode::Echoes(0), DictionaryMode::Speaker, 3);
        cfg.iterations = 5;
        let out = separate_mu(&mix, &ch, &dv, &cfg).unwrap();
        assert!(out.masks[0].iter().all(|m| m.iter().all(|&x| x == 1.0)));
        let y = istft(&mix[0]).unwrap();
        for (a, b) in out.estimates[0].iter().zip(&y) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn cost_never_increases_in_any_mode() {
        let mix = mixture(3, 1280, 5);
        let d = dicts(2, 5, 6);
        let dv: Vec<_> = d.iter().map(|d| d.view()).collect();
        for mode in [ChannelMode::Learn, ChannelMode::Echoes(0), ChannelMode::Echoes(1)] {
            let ch = match mode {
                ChannelMode::Learn => crate::echomodel::baseline_channels(crate::echomodel::Baseline::LearnInit, 33, 3, 2, 9),
                _ => {
                    let mut r = ChaCha8Rng::seed_from_u64(11);
                    let h = Array3::from_shape_simple_fn((33, 3, 2), || {
                        num_complex::Complex::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))
                    });
                    ChannelMatrix::from_h(h, mode)
                }
            };
            let mut cfg = MuRunConfig::new(mode, DictionaryMode::Universal, 4);
            cfg.iterations = 60;
            let out = separate_mu(&mix, &ch, &dv, &cfg).unwrap();
            assert_eq!(out.cost_trace.len(), 60);
            for w in out.cost_trace.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9), "{mode}: {} -> {}", w[0], w[1]);
            }
            for per_mic in &out.masks {
                assert!(per_mic.iter().all(|m| m.iter().all(|&x| (0.0..=1.0).contains(&x))));
            }
            let sum = &out.masks[0][1] + &out.masks[1][1];
            assert!(sum.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn flat_channels_and_shared_dictionary_are_symmetric() {
        let mix = mixture(2, 960, 7);
        let d = dicts(1, 6, 8);
        let dv = [d[0].view(), d[0].view()];
        let ch = ChannelMatrix::flat(33, 2, 2, ChannelMode::Anechoic);
        let mut cfg = MuRunConfig::new(ChannelMode::Anechoic, DictionaryMode::Universal, 1);
        cfg.iterations = 20;
        let out = separate_mu(&mix, &ch, &dv, &cfg).unwrap();
        // swapping the labels of the two sources cannot change the cost
        let swapped = [out.activations[1].clone(), out.activations[0].clone()];
        let v: Vec<_> = mix.iter().map(Spectrogram::power).collect();
        let c1 = mu_cost(&v, &model_powers(&ch.q, &source_powers(&dv, &out.activations)), &out.activations, 10.0);
        let c2 = mu_cost(&v, &model_powers(&ch.q, &source_powers(&dv, &swapped)), &swapped, 10.0);
        assert_relative_eq!(c1, c2, max_relative = 1e-14);
    }

    #[test]
    fn relabelling_sources_relabels_outputs() {
        let mix = mixture(2, 960, 12);
        let d = dicts(2, 4, 13);
        let mut r = ChaCha8Rng::seed_from_u64(14);
        let h = Array3::from_shape_simple_fn((33, 2, 2), || num_complex::Complex::new(r.gen_range(0.1..1.0), 0.0));
        let ch = ChannelMatrix::from_h(h, ChannelMode::Echoes(2));
        let mut cfg = MuRunConfig::new(ChannelMode::Echoes(2), DictionaryMode::Speaker, 2);
        cfg.iterations = 15;
        let a = separate_mu(&mix, &ch, &[d[0].view(), d[1].view()], &cfg).unwrap();
        let b = separate_mu(&mix, &ch.permuted(&[1, 0]), &[d[1].view(), d[0].view()], &cfg).unwrap();
        assert_eq!(a.estimates[0], b.estimates[1]);
        assert_eq!(a.estimates[1], b.estimates[0]);
    }

    #[test]
    fn silent_mixture_is_rejected() {
        let silent = vec![stft(&vec![0.0; 640], small_cfg(), 16000).unwrap()];
        let d = dicts(1, 2, 1);
        let ch = ChannelMatrix::flat(33, 1, 1, ChannelMode::Anechoic);
        let cfg = MuRunConfig::new(ChannelMode::Anechoic, DictionaryMode::Speaker, 0);
        assert!(separate_mu(&silent, &ch, &[d[0].view()], &cfg).is_err());
    }

    #[test]
    fn mask_output_properties() {
        let mix = mixture(1, 960, 21);
        let (f, n) = mix[0].data.dim();
        let mut r = ChaCha8Rng::seed_from_u64(22);
        let m0 = Array2::from_shape_simple_fn((f, n), || r.gen_range(0.0..1.0));
        let m1 = m0.mapv(|x| 1.0 - x);
        let out = select_mask_output(&mix, &[vec![m0.clone()], vec![m1]], 0).unwrap();
        let y = istft(&mix[0]).unwrap();
        for t in 0..y.len() {
            assert_relative_eq!(out[0][t] + out[1][t], y[t], epsilon = 1e-12);
        }
        let energy = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        assert!(energy(&out[0]) + energy(&out[1]) <= energy(&y) * (1.0 + 1e-9));
        let zero = select_mask_output(&mix, &[vec![Array2::zeros((f, n))]], 0).unwrap();
        assert!(zero[0].iter().all(|&x| x == 0.0));
        assert!(select_mask_output(&mix, &[vec![m0]], 3).is_err());
    }
}
