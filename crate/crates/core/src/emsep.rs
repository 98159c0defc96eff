//! EM separation with complex Gaussian sources whose variances follow an
//! NMF model, mixed through known (or learned) complex channels plus white
//! noise.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Zip};
use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::echomodel::{ChannelMatrix, ChannelMode};
use crate::error::{Error, Result};
use crate::musep::{check_mixture, source_seed};
use crate::nmf::{apply_ratio, first_descent, is_divergence_floored, random_positive, source_powers};
use crate::num::Real;
use crate::spectral::{istft, Spectrogram};

pub const DEFAULT_EM_ITERATIONS: usize = 300;
pub const DEFAULT_NOISE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmRunConfig {
    pub channel_mode: ChannelMode,
    pub iterations: usize,
    /// Noise variance relative to the mean mixture power of each bin.
    pub noise_floor: f64,
    pub seed: u64,
    pub reference_mic: usize,
}

impl EmRunConfig {
    pub fn new(channel_mode: ChannelMode, seed: u64) -> Self {
        EmRunConfig {
            channel_mode,
            iterations: DEFAULT_EM_ITERATIONS,
            noise_floor: DEFAULT_NOISE_FLOOR,
            seed,
            reference_mic: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.noise_floor > 0.0 && self.noise_floor.is_finite()) {
            return Err(Error::Config(format!("noise_floor must be positive, got {}", self.noise_floor)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EmOutput<T: Real> {
    /// Spatial image of each source at the reference microphone.
    pub estimates: Vec<Vec<T>>,
    /// Negative log-likelihood after each iteration.
    pub cost_trace: Vec<f64>,
    pub activations: Vec<Array2<T>>,
    pub channels: Array3<Complex<T>>,
    /// Bins where the mixture covariance needed extra regularization.
    pub regularized_solves: usize,
}

/// Small dense Hermitian positive-definite factorization, row-major.
struct Cholesky<T> {
    n: usize,
    l: Vec<Complex<T>>,
}

impl<T: Real> Cholesky<T> {
    fn new(a: &[Complex<T>], n: usize) -> Option<Self> {
        let mut l = vec![Complex::new(T::zero(), T::zero()); n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = a[i * n + j];
                for k in 0..j {
                    sum -= l[i * n + k] * l[j * n + k].conj();
                }
                if i == j {
                    if !(sum.re > T::zero()) || !sum.re.is_finite() {
                        return None;
                    }
                    l[i * n + i] = Complex::new(sum.re.sqrt(), T::zero());
                } else {
                    l[i * n + j] = sum / l[j * n + j].re;
                }
            }
        }
        Some(Cholesky { n, l })
    }

    fn log_det(&self) -> T {
        let two = T::one() + T::one();
        (0..self.n).map(|i| two * self.l[i * self.n + i].re.ln()).sum()
    }

    /// `A^{-1} b`
    fn solve(&self, b: &[Complex<T>]) -> Vec<Complex<T>> {
        let n = self.n;
        let mut x = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                let t = self.l[i * n + k] * x[k];
                x[i] -= t;
            }
            x[i] = x[i] / self.l[i * n + i].re;
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let t = self.l[k * n + i].conj() * x[k];
                x[i] -= t;
            }
            x[i] = x[i] / self.l[i * n + i].re;
        }
        x
    }
}

/// Factors `a`, adding a growing multiple of its mean diagonal when the
/// plain factorization fails. The flag is set when regularization was used.
fn regularized_cholesky<T: Real>(a: &mut [Complex<T>], n: usize) -> Option<(Cholesky<T>, bool)> {
    if let Some(c) = Cholesky::new(a, n) {
        return Some((c, false));
    }
    let scale = (0..n).map(|i| a[i * n + i].re.abs()).sum::<T>() / T::of(n as f64);
    let scale = scale.max(T::FLOOR);
    let mut delta = T::of(1e-10) * scale;
    for _ in 0..12 {
        for i in 0..n {
            a[i * n + i].re += delta;
        }
        if let Some(c) = Cholesky::new(a, n) {
            return Some((c, true));
        }
        delta = delta * T::of(10.0);
    }
    None
}

/// Mixture covariance `Σ_j v_j h_j h_jᴴ + σ² I` at one bin.
fn mixture_covariance<T: Real>(h: &[Complex<T>], n_mics: usize, var: &[T], noise: T) -> Vec<Complex<T>> {
    let n_src = var.len();
    let mut cov = vec![Complex::new(T::zero(), T::zero()); n_mics * n_mics];
    for a in 0..n_mics {
        cov[a * n_mics + a].re = noise;
        for b in 0..n_mics {
            for (j, &v) in var.iter().enumerate() {
                cov[a * n_mics + b] += h[a * n_src + j] * h[b * n_src + j].conj() * v;
            }
        }
    }
    cov
}

/// `Σ_{f,n} yᴴ Σ_Y^{-1} y + log det Σ_Y` with
/// `Σ_Y[f,n] = Σ_j v_j[f,n] h_j[f] h_j[f]ᴴ + noise[f] I`.
/// `y[m]` and `var[j]` are `[F, N]`, `h[[f, m, j]]`.
pub fn em_loglik<T: Real>(
    y: &[Array2<Complex<T>>],
    h: &Array3<Complex<T>>,
    var: &[Array2<T>],
    noise: &[T],
) -> Result<T> {
    let (n_freq, n_mics, n_src) = h.dim();
    if y.len() != n_mics || var.len() != n_src || noise.len() != n_freq {
        return Err(Error::Shape(format!(
            "{} mics, {} variances and {} noise levels for channels {:?}",
            y.len(),
            var.len(),
            noise.len(),
            h.dim()
        )));
    }
    let n_frames = y.first().map_or(0, |y| y.ncols());
    if y.iter().any(|y| y.dim() != (n_freq, n_frames)) || var.iter().any(|v| v.dim() != (n_freq, n_frames)) {
        return Err(Error::Shape("spectra and variances must all be [F, N]".into()));
    }
    let mut total = T::zero();
    for f in 0..n_freq {
        let hf: Vec<Complex<T>> = h.slice(s![f, .., ..]).iter().copied().collect();
        for n in 0..n_frames {
            let v: Vec<T> = var.iter().map(|v| v[[f, n]]).collect();
            let cov = mixture_covariance(&hf, n_mics, &v, noise[f]);
            let chol = Cholesky::new(&cov, n_mics)
                .ok_or_else(|| Error::Domain(format!("covariance at bin ({f}, {n}) is not positive definite")))?;
            let yv: Vec<Complex<T>> = y.iter().map(|y| y[[f, n]]).collect();
            let u = chol.solve(&yv);
            let quad: T = yv.iter().zip(&u).map(|(a, b)| (a.conj() * b).re).sum();
            total += quad + chol.log_det();
        }
    }
    Ok(total)
}

/// Posterior statistics of one E-step.
struct EStep<T: Real> {
    nll: T,
    /// `x̂_j`, `[F, N]` each.
    mean: Vec<Array2<Complex<T>>>,
    /// `E|x_j|²`
    power: Vec<Array2<T>>,
    /// Per bin `Σ_n y x̂ᴴ` (`M×J`) and `Σ_n E[x xᴴ]` (`J×J`), row-major.
    cross: Option<(Vec<Vec<Complex<T>>>, Vec<Vec<Complex<T>>>)>,
    regularized: usize,
}

fn e_step<T: Real>(
    y: &[Array2<Complex<T>>],
    h: &Array3<Complex<T>>,
    var: &[Array2<T>],
    noise: &[T],
    with_cross: bool,
) -> Result<EStep<T>> {
    let (n_freq, n_mics, n_src) = h.dim();
    let n_frames = y[0].ncols();
    let zero = Complex::new(T::zero(), T::zero());
    let mut mean = vec![Array2::from_elem((n_freq, n_frames), zero); n_src];
    let mut power = vec![Array2::zeros((n_freq, n_frames)); n_src];
    let mut cross = with_cross.then(|| {
        (
            vec![vec![zero; n_mics * n_src]; n_freq],
            vec![vec![zero; n_src * n_src]; n_freq],
        )
    });
    let mut nll = T::zero();
    let mut regularized = 0;
    for f in 0..n_freq {
        let hf: Vec<Complex<T>> = h.slice(s![f, .., ..]).iter().copied().collect();
        let cols: Vec<Vec<Complex<T>>> = (0..n_src).map(|j| (0..n_mics).map(|m| hf[m * n_src + j]).collect()).collect();
        for n in 0..n_frames {
            let v: Vec<T> = var.iter().map(|v| v[[f, n]]).collect();
            let mut cov = mixture_covariance(&hf, n_mics, &v, noise[f]);
            let (chol, reg) = regularized_cholesky(&mut cov, n_mics).ok_or_else(|| Error::Numerical {
                iteration: 0,
                message: format!("mixture covariance at bin ({f}, {n}) cannot be factored"),
            })?;
            regularized += usize::from(reg);
            let yv: Vec<Complex<T>> = y.iter().map(|y| y[[f, n]]).collect();
            let u = chol.solve(&yv);
            nll += yv.iter().zip(&u).map(|(a, b)| (a.conj() * b).re).sum::<T>() + chol.log_det();
            // Σ_Y^{-1} h_j
            let sh: Vec<Vec<Complex<T>>> = cols.iter().map(|c| chol.solve(c)).collect();
            let mut xhat = vec![zero; n_src];
            for j in 0..n_src {
                let hu: Complex<T> = cols[j].iter().zip(&u).map(|(h, u)| h.conj() * u).sum();
                xhat[j] = hu * v[j];
                let hsh: T = cols[j].iter().zip(&sh[j]).map(|(h, s)| (h.conj() * s).re).sum();
                let post = (v[j] - v[j] * v[j] * hsh).max(T::zero());
                mean[j][[f, n]] = xhat[j];
                power[j][[f, n]] = xhat[j].norm_sqr() + post;
            }
            if let Some((ryx, rxx)) = cross.as_mut() {
                for m in 0..n_mics {
                    for j in 0..n_src {
                        ryx[f][m * n_src + j] += yv[m] * xhat[j].conj();
                    }
                }
                for a in 0..n_src {
                    for b in 0..n_src {
                        let hsh: Complex<T> = cols[a].iter().zip(&sh[b]).map(|(h, s)| h.conj() * s).sum();
                        let mut post = -hsh * (v[a] * v[b]);
                        if a == b {
                            post.re += v[a];
                        }
                        rxx[f][a * n_src + b] += xhat[a] * xhat[b].conj() + post;
                    }
                }
            }
        }
    }
    Ok(EStep {
        nll,
        mean,
        power,
        cross,
        regularized,
    })
}

/// Closed-form channel update `H = R_yx R_xx^{-1}` per bin, each source's
/// column rotated so that its first entry is real and non-negative. Bins with
/// a singular `R_xx` keep their channel.
fn update_channels<T: Real>(h: &mut Array3<Complex<T>>, ryx: &[Vec<Complex<T>>], rxx: &[Vec<Complex<T>>]) {
    let (n_freq, n_mics, n_src) = h.dim();
    for f in 0..n_freq {
        let Some(chol) = Cholesky::new(&rxx[f], n_src) else {
            log::debug!("bin {f}: source covariance is singular, channel kept");
            continue;
        };
        for m in 0..n_mics {
            // row m of H solves R_xxᵀ hᵀ = r_yxᵀ; R_xx is Hermitian so use conjugates
            let row: Vec<Complex<T>> = (0..n_src).map(|j| ryx[f][m * n_src + j].conj()).collect();
            let sol = chol.solve(&row);
            for j in 0..n_src {
                h[[f, m, j]] = sol[j].conj();
            }
        }
        for j in 0..n_src {
            let first = h[[f, 0, j]];
            let r = first.norm();
            if r > T::zero() {
                let rot = first.conj() / r;
                for m in 0..n_mics {
                    h[[f, m, j]] = h[[f, m, j]] * rot;
                }
            }
        }
    }
}

/// Noise variance per bin: `noise_floor` times the mean mixture power.
pub fn noise_levels<T: Real>(y: &[Array2<Complex<T>>], noise_floor: f64) -> Vec<T> {
    let (n_freq, n_frames) = y[0].dim();
    let count = T::of((y.len() * n_frames.max(1)) as f64);
    (0..n_freq)
        .map(|f| {
            let p: T = y.iter().map(|y| y.row(f).iter().map(|c| c.norm_sqr()).sum::<T>()).sum();
            (T::of(noise_floor) * p / count).max(T::FLOOR)
        })
        .collect()
}

fn floored_powers<T: Real>(dicts: &[ArrayView2<'_, T>], z: &[Array2<T>]) -> Vec<Array2<T>> {
    let mut p = source_powers(dicts, z);
    for p in &mut p {
        p.mapv_inplace(|x| x.max(T::FLOOR));
    }
    p
}

/// Generalized EM: exact E-step, one safeguarded IS-MU step on each `Z_j`
/// against the posterior powers, and in learn mode the closed-form channel
/// update. Dictionaries stay fixed.
pub fn separate_em<T: Real>(
    mix: &[Spectrogram<T>],
    channels: &ChannelMatrix<T>,
    dicts: &[ArrayView2<'_, T>],
    config: &EmRunConfig,
) -> Result<EmOutput<T>> {
    config.validate()?;
    let (n_freq, n_frames) = check_mixture(mix)?;
    if channels.h.dim() != (n_freq, mix.len(), dicts.len()) {
        return Err(Error::Shape(format!(
            "channel shape {:?} for {n_freq} bins, {} mics, {} sources",
            channels.h.dim(),
            mix.len(),
            dicts.len()
        )));
    }
    if let Some(d) = dicts.iter().find(|d| d.nrows() != n_freq) {
        return Err(Error::Shape(format!("dictionary has {} bins, spectra have {n_freq}", d.nrows())));
    }
    if config.reference_mic >= mix.len() {
        return Err(Error::Input(format!("reference mic {} of {}", config.reference_mic, mix.len())));
    }
    let learn = config.channel_mode == ChannelMode::Learn;
    let y: Vec<Array2<Complex<T>>> = mix.iter().map(|s| s.data.clone()).collect();
    let noise = noise_levels(&y, config.noise_floor);
    let mut h = channels.h.clone();
    let mut z: Vec<Array2<T>> = dicts
        .iter()
        .enumerate()
        .map(|(j, d)| {
            let seed = source_seed(config.seed, *d, channels.q.slice(s![.., .., j]).iter().copied());
            random_positive((d.ncols(), n_frames), &mut ChaCha8Rng::seed_from_u64(seed))
        })
        .collect();
    let mut trace = Vec::with_capacity(config.iterations);
    let mut regularized = 0;
    let mut estep = e_step(&y, &h, &floored_powers(dicts, &z), &noise, learn)?;
    for it in 0..config.iterations {
        regularized += estep.regularized;
        // Z step: fit D_j Z_j to the posterior powers
        let target = &estep.power;
        let aux = |z: &[Array2<T>]| -> T {
            floored_powers(dicts, z)
                .iter()
                .zip(target)
                .map(|(p, t)| is_divergence_floored(t, p))
                .sum()
        };
        let p = floored_powers(dicts, &z);
        let ratios: Vec<Array2<T>> = dicts
            .iter()
            .zip(&p)
            .zip(target)
            .map(|((d, p), t)| {
                let mut a = Array2::zeros(p.raw_dim());
                let mut b = Array2::zeros(p.raw_dim());
                Zip::from(&mut a).and(&mut b).and(p).and(t).for_each(|a, b, &p, &t| {
                    let inv = T::one() / p;
                    *a = t * inv * inv;
                    *b = inv;
                });
                let num = d.t().dot(&a);
                let den = d.t().dot(&b);
                Zip::from(num.view()).and(&den).map_collect(|&n, &d| if d > T::zero() { n / d } else { T::one() })
            })
            .collect();
        if let Some((nz, _)) = first_descent(aux(&z), &[1.0, 0.5], |e| {
            let nz: Vec<_> = z.iter().zip(&ratios).map(|(z, r)| apply_ratio(z, r, e)).collect();
            let c = aux(&nz);
            (nz, c)
        }) {
            z = nz;
        }
        if let Some((ryx, rxx)) = estep.cross.as_ref() {
            update_channels(&mut h, ryx, rxx);
        }
        estep = e_step(&y, &h, &floored_powers(dicts, &z), &noise, learn).map_err(|e| match e {
            Error::Numerical { message, .. } => Error::Numerical { iteration: it, message },
            other => other,
        })?;
        if !estep.nll.is_finite() {
            return Err(Error::Numerical {
                iteration: it,
                message: format!("negative log-likelihood is {}", estep.nll),
            });
        }
        trace.push(estep.nll.to_f64_lossy());
    }
    regularized += estep.regularized;
    if regularized > 0 {
        log::warn!("{regularized} mixture covariances needed extra regularization");
    }
    let reference = mix[config.reference_mic].clone();
    let estimates = estep
        .mean
        .iter()
        .enumerate()
        .map(|(j, xj)| {
            let mut spec = reference.clone();
            let gain: Array1<Complex<T>> = h.slice(s![.., config.reference_mic, j]).to_owned();
            Zip::from(spec.data.rows_mut())
                .and(xj.rows())
                .and(&gain)
                .for_each(|mut out, x, &g| Zip::from(&mut out).and(&x).for_each(|o, &x| *o = g * x));
            istft(&spec)
        })
        .collect::<Result<_>>()?;
    Ok(EmOutput {
        estimates,
        cost_trace: trace,
        activations: z,
        channels: h,
        regularized_solves: regularized,
    })
}
