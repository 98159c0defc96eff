//! Itakura-Saito NMF: divergence, dictionary training and the
//! multiplicative updates shared by both separators.
//!
//! Shapes: power spectrograms are `[F, N]`, dictionaries `[F, A]`,
//! activations `[A, N]` and channel powers `q[[f, m, j]]`.

use std::ops::Range;
use std::path::Path;

use ndarray::{concatenate, s, Array2, Array3, ArrayBase, ArrayView2, Axis, Data, Dimension, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::num::Real;

pub const DEFAULT_TRAIN_ITERATIONS: usize = 400;

#[inline]
fn d_is<T: Real>(v: T, vhat: T) -> T {
    let r = v.max(T::FLOOR) / vhat.max(T::FLOOR);
    r - r.ln() - T::one()
}

/// Sum of elementwise `v/v̂ − log(v/v̂) − 1`.
pub fn is_divergence<T, S1, S2, D>(v: &ArrayBase<S1, D>, vhat: &ArrayBase<S2, D>) -> Result<T>
where
    T: Real,
    S1: Data<Elem = T>,
    S2: Data<Elem = T>,
    D: Dimension,
{
    if v.shape() != vhat.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", v.shape(), vhat.shape())));
    }
    if let Some(bad) = vhat.iter().find(|&&x| !(x > T::zero() && x.is_finite())) {
        return Err(Error::Domain(format!("model power must be positive and finite, got {bad}")));
    }
    if let Some(bad) = v.iter().find(|&&x| !(x >= T::zero() && x.is_finite())) {
        return Err(Error::Domain(format!("observed power must be non-negative, got {bad}")));
    }
    Ok(is_divergence_floored(v, vhat))
}

/// Same as [`is_divergence`] without validation; both arguments are floored.
pub fn is_divergence_floored<T, S1, S2, D>(v: &ArrayBase<S1, D>, vhat: &ArrayBase<S2, D>) -> T
where
    T: Real,
    S1: Data<Elem = T>,
    S2: Data<Elem = T>,
    D: Dimension,
{
    Zip::from(v).and(vhat).fold(T::zero(), |acc, &a, &b| acc + d_is(a, b))
}

/// Seeded uniform `(0.5, 1.5)` matrix.
pub fn random_positive<T: Real>(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<T> {
    Array2::from_shape_simple_fn(shape, || T::of(rng.gen_range(0.5..1.5)))
}

pub fn floor_in_place<T: Real, D: Dimension>(x: &mut ndarray::Array<T, D>) {
    x.mapv_inplace(|v| v.max(T::FLOOR));
}

/// `x ⊙ r^e`, elementwise.
pub fn apply_ratio<T: Real>(x: &Array2<T>, ratio: &Array2<T>, exponent: T) -> Array2<T> {
    let mut out = x.clone();
    if exponent == T::one() {
        Zip::from(&mut out).and(ratio).for_each(|o, &r| *o *= r);
    } else {
        Zip::from(&mut out).and(ratio).for_each(|o, &r| *o *= r.powf(exponent));
    }
    out
}

/// Tries the exponents in order and keeps the first candidate whose cost
/// does not exceed `current`.
pub fn first_descent<S, T: Real>(current: T, exponents: &[f64], mut trial: impl FnMut(T) -> (S, T)) -> Option<(S, T)> {
    exponents.iter().find_map(|&e| {
        let (state, cost) = trial(T::of(e));
        (cost <= current).then_some((state, cost))
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub speaker: String,
    pub start: usize,
    pub end: usize,
}

impl Block {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    UnitSum,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the training spectra.
    pub input_hash: String,
    pub seed: u64,
    pub iterations: usize,
    pub atoms_per_speaker: usize,
}

/// Non-negative spectral atoms grouped in per-speaker blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary<T: Real> {
    atoms: Array2<T>,
    blocks: Vec<Block>,
    pub normalization: Normalization,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct DictionaryFile {
    n_freq: usize,
    blocks: Vec<Block>,
    normalization: Normalization,
    provenance: Provenance,
    /// One inner vector per atom.
    atoms: Vec<Vec<f64>>,
}

impl<T: Real> Dictionary<T> {
    /// Floors the atoms, rescales each column to unit sum and checks that the
    /// blocks partition the columns.
    pub fn new(mut atoms: Array2<T>, blocks: Vec<Block>, provenance: Provenance) -> Result<Self> {
        let n_atoms = atoms.ncols();
        let mut next = 0;
        for b in &blocks {
            if b.start != next || b.end <= b.start {
                return Err(Error::Shape(format!(
                    "block '{}' {}..{} does not continue at {next}",
                    b.speaker, b.start, b.end
                )));
            }
            next = b.end;
        }
        if next != n_atoms || n_atoms == 0 {
            return Err(Error::Shape(format!("blocks cover {next} of {n_atoms} atoms")));
        }
        if atoms.iter().any(|x| !(x.is_finite() && *x >= T::zero())) {
            return Err(Error::Domain("dictionary entries must be finite and non-negative".into()));
        }
        floor_in_place(&mut atoms);
        for mut col in atoms.columns_mut() {
            let sum = col.sum();
            col.mapv_inplace(|v| v / sum);
        }
        Ok(Dictionary {
            atoms,
            blocks,
            normalization: Normalization::UnitSum,
            provenance,
        })
    }

    pub fn atoms(&self) -> ArrayView2<'_, T> {
        self.atoms.view()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn n_freq(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn block(&self, speaker: &str) -> Option<ArrayView2<'_, T>> {
        self.blocks
            .iter()
            .find(|b| b.speaker == speaker)
            .map(|b| self.atoms.slice(s![.., b.range()]))
    }

    /// Dictionary made of the listed speakers' blocks, in that order.
    pub fn subset(&self, speakers: &[&str]) -> Result<Self> {
        let mut views = Vec::with_capacity(speakers.len());
        let mut blocks = Vec::with_capacity(speakers.len());
        let mut start = 0;
        for &spk in speakers {
            let view = self
                .block(spk)
                .ok_or_else(|| Error::Input(format!("speaker '{spk}' is not in the dictionary")))?;
            blocks.push(Block {
                speaker: spk.to_string(),
                start,
                end: start + view.ncols(),
            });
            start += view.ncols();
            views.push(view);
        }
        let atoms = concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Dictionary {
            atoms,
            blocks,
            normalization: self.normalization,
            provenance: self.provenance.clone(),
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = DictionaryFile {
            n_freq: self.n_freq(),
            blocks: self.blocks.clone(),
            normalization: self.normalization,
            provenance: self.provenance.clone(),
            atoms: self.atoms.columns().into_iter().map(|c| c.iter().map(|v| v.to_f64_lossy()).collect()).collect(),
        };
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(f), &file)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let file: DictionaryFile = serde_json::from_reader(std::io::BufReader::new(f))?;
        let n_atoms = file.atoms.len();
        if file.atoms.iter().any(|a| a.len() != file.n_freq) {
            return Err(Error::Shape(format!("{}: atom length differs from n_freq", path.display())));
        }
        let atoms = Array2::from_shape_fn((file.n_freq, n_atoms), |(f, a)| T::of(file.atoms[a][f]));
        let mut dict = Dictionary::new(atoms, file.blocks, file.provenance)?;
        dict.normalization = file.normalization;
        Ok(dict)
    }
}

pub struct SpeakerSpectra<T> {
    pub speaker: String,
    /// Power spectrograms `[F, N_i]`.
    pub spectra: Vec<Array2<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub atoms_per_speaker: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            atoms_per_speaker: 10,
            iterations: DEFAULT_TRAIN_ITERATIONS,
            seed: 0,
        }
    }
}

/// Single-channel IS-NMF `v ≈ w h`. Returns unit-sum columns of `w`, the
/// matching `h` and the cost after each iteration.
pub fn fit_is_nmf<T: Real>(
    v: ArrayView2<'_, T>,
    atoms: usize,
    iterations: usize,
    rng: &mut ChaCha8Rng,
) -> (Array2<T>, Array2<T>, Vec<f64>) {
    let (n_freq, n_frames) = v.dim();
    let mean = v.mean().unwrap_or_else(T::zero).max(T::FLOOR);
    let mut w: Array2<T> = random_positive((n_freq, atoms), rng);
    let mut h: Array2<T> = random_positive::<T>((atoms, n_frames), rng).mapv(|x| x * mean / T::of(atoms as f64));
    let model = |w: &Array2<T>, h: &Array2<T>| {
        let mut vh = w.dot(h);
        floor_in_place(&mut vh);
        vh
    };
    let mut vhat = model(&w, &h);
    let mut cost = is_divergence_floored(&v, &vhat);
    let mut trace = Vec::with_capacity(iterations);
    // Exponent 1/2 is the majorize-minimize step and always descends.
    let exponents = [1.0, 0.5];
    for _ in 0..iterations {
        let (a, b) = weights(v, &vhat);
        let ratio = ratio_of(&w.t().dot(&a), &w.t().dot(&b), T::zero());
        if let Some(((nh, nv), c)) = first_descent(cost, &exponents, |e| {
            let nh = apply_ratio(&h, &ratio, e);
            let nv = model(&w, &nh);
            let c = is_divergence_floored(&v, &nv);
            ((nh, nv), c)
        }) {
            h = nh;
            vhat = nv;
            cost = c;
        }
        let (a, b) = weights(v, &vhat);
        let ratio = ratio_of(&a.dot(&h.t()), &b.dot(&h.t()), T::zero());
        if let Some(((nw, nv), c)) = first_descent(cost, &exponents, |e| {
            let mut nw = apply_ratio(&w, &ratio, e);
            floor_in_place(&mut nw);
            let nv = model(&nw, &h);
            let c = is_divergence_floored(&v, &nv);
            ((nw, nv), c)
        }) {
            w = nw;
            vhat = nv;
            cost = c;
        }
        trace.push(cost.to_f64_lossy());
    }
    for (mut col, mut row) in w.columns_mut().into_iter().zip(h.rows_mut()) {
        let sum = col.sum();
        col.mapv_inplace(|x| x / sum);
        row.mapv_inplace(|x| x * sum);
    }
    (w, h, trace)
}

/// `(v ⊙ v̂^{-2}, v̂^{-1})`
fn weights<T: Real>(v: ArrayView2<'_, T>, vhat: &Array2<T>) -> (Array2<T>, Array2<T>) {
    let mut a = Array2::zeros(v.raw_dim());
    let mut b = Array2::zeros(v.raw_dim());
    Zip::from(&mut a).and(&mut b).and(v).and(vhat).for_each(|a, b, &x, &y| {
        let inv = T::one() / y;
        *a = x * inv * inv;
        *b = inv;
    });
    (a, b)
}

/// `num / (den + γ)`, with `0/0` read as 1.
fn ratio_of<T: Real>(num: &Array2<T>, den: &Array2<T>, gamma: T) -> Array2<T> {
    let mut out = num.clone();
    Zip::from(&mut out).and(den).for_each(|n, &d| {
        let d = d + gamma;
        *n = if d > T::zero() { *n / d } else { T::one() };
    });
    out
}

/// Hash of a list of spectra, for provenance.
pub fn spectra_hash<T: Real>(speakers: &[SpeakerSpectra<T>]) -> String {
    let mut hasher = Sha256::new();
    for spk in speakers {
        hasher.update(spk.speaker.as_bytes());
        for s in &spk.spectra {
            hasher.update((s.nrows() as u64).to_le_bytes());
            hasher.update((s.ncols() as u64).to_le_bytes());
            for v in s.iter() {
                hasher.update(v.to_f64_lossy().to_le_bytes());
            }
        }
    }
    format!("{:x}", hasher.finalize())
}

/// Trains one block of atoms per speaker and concatenates them. Also returns
/// each speaker's cost trace.
pub fn train_dictionary<T: Real>(
    speakers: &[SpeakerSpectra<T>],
    config: &TrainConfig,
) -> Result<(Dictionary<T>, Vec<Vec<f64>>)> {
    if speakers.is_empty() {
        return Err(Error::Input("no training spectra".into()));
    }
    if config.atoms_per_speaker == 0 {
        return Err(Error::Config("atoms_per_speaker must be at least 1".into()));
    }
    let n_freq = speakers[0].spectra.first().map_or(0, |s| s.nrows());
    for spk in speakers {
        if spk.spectra.is_empty() || spk.spectra.iter().all(|s| s.ncols() == 0) {
            return Err(Error::Input(format!("speaker '{}' has no training frames", spk.speaker)));
        }
        if spk.spectra.iter().any(|s| s.nrows() != n_freq) {
            return Err(Error::Shape(format!("speaker '{}': inconsistent frequency bins", spk.speaker)));
        }
    }
    let fits: Vec<(Array2<T>, Vec<f64>)> = speakers
        .par_iter()
        .enumerate()
        .map(|(i, spk)| {
            let views: Vec<_> = spk.spectra.iter().map(|s| s.view()).collect();
            let v = concatenate(Axis(1), &views).expect("row counts checked");
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let (w, _, trace) = fit_is_nmf(v.view(), config.atoms_per_speaker, config.iterations, &mut rng);
            (w, trace)
        })
        .collect();
    let views: Vec<_> = fits.iter().map(|(w, _)| w.view()).collect();
    let atoms = concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let k = config.atoms_per_speaker;
    let blocks = speakers
        .iter()
        .enumerate()
        .map(|(i, s)| Block {
            speaker: s.speaker.clone(),
            start: i * k,
            end: (i + 1) * k,
        })
        .collect();
    let provenance = Provenance {
        input_hash: spectra_hash(speakers),
        seed: config.seed,
        iterations: config.iterations,
        atoms_per_speaker: k,
    };
    let dict = Dictionary::new(atoms, blocks, provenance)?;
    Ok((dict, fits.into_iter().map(|(_, t)| t).collect()))
}

/// `P_j = D_j Z_j` for every source.
pub fn source_powers<T: Real>(dicts: &[ArrayView2<'_, T>], z: &[Array2<T>]) -> Vec<Array2<T>> {
    dicts.iter().zip(z).map(|(d, z)| d.dot(z)).collect()
}

/// `V̂_m = Σ_j diag(q_jm) P_j`, floored.
pub fn model_powers<T: Real>(q: &Array3<T>, p: &[Array2<T>]) -> Vec<Array2<T>> {
    let (n_freq, n_mics, _) = q.dim();
    let n_frames = p.first().map_or(0, |p| p.ncols());
    (0..n_mics)
        .map(|m| {
            let mut vh = Array2::zeros((n_freq, n_frames));
            for (j, pj) in p.iter().enumerate() {
                Zip::from(vh.rows_mut())
                    .and(pj.rows())
                    .and(q.slice(s![.., m, j]))
                    .for_each(|mut out, row, &qf| out.scaled_add(qf, &row));
            }
            floor_in_place(&mut vh);
            vh
        })
        .collect()
}

/// Regularized multichannel cost `Σ_m d_IS(V_m | V̂_m) + γ Σ_j ‖Z_j‖₁`.
pub fn mu_cost<T: Real>(v: &[Array2<T>], vhat: &[Array2<T>], z: &[Array2<T>], gamma: T) -> T {
    let fit: T = v.iter().zip(vhat).map(|(a, b)| is_divergence_floored(a, b)).sum();
    if gamma == T::zero() {
        return fit;
    }
    fit + gamma * z.iter().map(|z| z.sum()).sum()
}

/// Per-source multiplicative factors `[Σ_m (diag(q_jm) D_j)ᵀ (V_m ⊙ V̂_m^{-2})] /
/// [Σ_m (diag(q_jm) D_j)ᵀ V̂_m^{-1} + γ]`.
pub fn activation_ratios<T: Real>(
    v: &[Array2<T>],
    vhat: &[Array2<T>],
    dicts: &[ArrayView2<'_, T>],
    q: &Array3<T>,
    gamma: T,
) -> Vec<Array2<T>> {
    let w: Vec<_> = v.iter().zip(vhat).map(|(v, vh)| weights(v.view(), vh)).collect();
    dicts
        .iter()
        .enumerate()
        .map(|(j, d)| {
            let mut a = Array2::zeros(v[0].raw_dim());
            let mut b = Array2::zeros(v[0].raw_dim());
            for (m, (wa, wb)) in w.iter().enumerate() {
                Zip::from(a.rows_mut())
                    .and(b.rows_mut())
                    .and(wa.rows())
                    .and(wb.rows())
                    .and(q.slice(s![.., m, j]))
                    .for_each(|mut a, mut b, ra, rb, &qf| {
                        a.scaled_add(qf, &ra);
                        b.scaled_add(qf, &rb);
                    });
            }
            ratio_of(&d.t().dot(&a), &d.t().dot(&b), gamma)
        })
        .collect()
}

/// Factors for `q_jm[f]`: `Σ_n P_j V_m V̂_m^{-2} / Σ_n P_j V̂_m^{-1}`, with
/// `0/0` read as 1.
pub fn channel_ratios<T: Real>(v: &[Array2<T>], vhat: &[Array2<T>], p: &[Array2<T>]) -> Array3<T> {
    let n_freq = v.first().map_or(0, |v| v.nrows());
    let mut out = Array3::ones((n_freq, v.len(), p.len()));
    for (m, (vm, vh)) in v.iter().zip(vhat).enumerate() {
        let (a, b) = weights(vm.view(), vh);
        for (j, pj) in p.iter().enumerate() {
            for f in 0..n_freq {
                let pr = pj.row(f);
                let num = pr.dot(&a.row(f));
                let den = pr.dot(&b.row(f));
                if den > T::zero() {
                    out[[f, m, j]] = num / den;
                }
            }
        }
    }
    out
}

/// Rescales each source's channel to `Σ_{f,m} q_jm[f] = F·M` and pushes the
/// inverse scale into its activations. The model powers are unchanged.
pub fn renormalize_channels<T: Real>(q: &mut Array3<T>, z: &mut [Array2<T>]) {
    let (n_freq, n_mics, _) = q.dim();
    let target = T::of((n_freq * n_mics) as f64);
    for (j, zj) in z.iter_mut().enumerate() {
        let mut qj = q.slice_mut(s![.., .., j]);
        let sum = qj.sum();
        if sum > T::zero() && sum.is_finite() {
            let scale = target / sum;
            qj.mapv_inplace(|x| x * scale);
            zj.mapv_inplace(|x| x / scale);
        }
    }
}

fn check_shapes<T: Real>(v: &[Array2<T>], dicts: &[ArrayView2<'_, T>], q: &Array3<T>, z: &[Array2<T>]) -> Result<()> {
    let Some(first) = v.first() else {
        return Err(Error::Shape("no microphone spectra".into()));
    };
    let (n_freq, n_frames) = first.dim();
    if v.iter().any(|x| x.dim() != (n_freq, n_frames)) {
        return Err(Error::Shape("microphone spectra differ in shape".into()));
    }
    if q.dim() != (n_freq, v.len(), dicts.len()) {
        return Err(Error::Shape(format!(
            "channel shape {:?}, expected ({n_freq}, {}, {})",
            q.dim(),
            v.len(),
            dicts.len()
        )));
    }
    if z.len() != dicts.len() {
        return Err(Error::Shape(format!("{} activations for {} sources", z.len(), dicts.len())));
    }
    for (j, (d, zj)) in dicts.iter().zip(z).enumerate() {
        if d.nrows() != n_freq || zj.dim() != (d.ncols(), n_frames) {
            return Err(Error::Shape(format!(
                "source {j}: dictionary {:?}, activations {:?}, spectra ({n_freq}, {n_frames})",
                d.dim(),
                zj.dim()
            )));
        }
    }
    Ok(())
}

/// One plain multiplicative step on every `Z_j`, against the model computed
/// from the current `Z`.
pub fn mu_update_activations<T: Real>(
    v: &[Array2<T>],
    dicts: &[ArrayView2<'_, T>],
    q: &Array3<T>,
    z: &[Array2<T>],
    gamma: T,
) -> Result<Vec<Array2<T>>> {
    check_shapes(v, dicts, q, z)?;
    let vhat = model_powers(q, &source_powers(dicts, z));
    let ratios = activation_ratios(v, &vhat, dicts, q, gamma);
    Ok(z.iter().zip(&ratios).map(|(z, r)| apply_ratio(z, r, T::one())).collect())
}

/// One plain multiplicative step on `q`, followed by renormalization.
/// Returns the new channel powers and the rescaled activations.
pub fn mu_update_channel<T: Real>(
    v: &[Array2<T>],
    dicts: &[ArrayView2<'_, T>],
    z: &[Array2<T>],
    q: &Array3<T>,
) -> Result<(Array3<T>, Vec<Array2<T>>)> {
    check_shapes(v, dicts, q, z)?;
    let p = source_powers(dicts, z);
    let vhat = model_powers(q, &p);
    let mut q = q * &channel_ratios(v, &vhat, &p);
    let mut z = z.to_vec();
    renormalize_channels(&mut q, &mut z);
    Ok((q, z))
}
