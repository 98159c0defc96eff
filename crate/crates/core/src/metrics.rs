//! SDR and SIR with time-invariant filter projections.
//!
//! Each estimate is split into `s_target` (its projection on `filter_len`
//! delayed copies of the matched reference), `e_interf` (the rest of its
//! projection on delayed copies of all references) and `e_artif` (the
//! residual).

use serde::{Deserialize, Serialize};

use crate::dsp::{convolve, cross_correlation};
use crate::error::{Error, Result};

pub const DEFAULT_FILTER_LEN: usize = 512;
/// Magnitude reported for ratios with a zero numerator or denominator.
pub const DB_CAP: f64 = 300.0;
const RIDGE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Indexed by reference source.
    pub sdr: Vec<f64>,
    pub sir: Vec<f64>,
    /// `permutation[j]` is the estimate matched with reference `j`.
    pub permutation: Vec<usize>,
    /// Set when the reference or its matched estimate has no energy.
    pub degenerate: Vec<bool>,
}

impl EvalResult {
    pub fn mean_sir(&self) -> f64 {
        self.sir.iter().sum::<f64>() / self.sir.len() as f64
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn safe_db(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        DB_CAP
    } else if num == 0.0 {
        -DB_CAP
    } else {
        (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
    }
}

/// Dense symmetric positive-definite factorization (lower, row-major).
struct SpdFactor {
    n: usize,
    l: Vec<f64>,
}

impl SpdFactor {
    fn new(a: &[f64], n: usize) -> Result<Self> {
        let mut l = a.to_vec();
        for j in 0..n {
            let (done, rest) = l.split_at_mut(j * n);
            let row_j = &mut rest[..n];
            let _ = done;
            let d = row_j[j] - row_j[..j].iter().map(|v| v * v).sum::<f64>();
            if !(d > 0.0) {
                return Err(Error::Numerical {
                    iteration: j,
                    message: "reference correlation matrix is not positive definite".into(),
                });
            }
            row_j[j] = d.sqrt();
            for v in row_j[j + 1..].iter_mut() {
                *v = 0.0;
            }
            let pivot = row_j[j];
            let row_j: Vec<f64> = row_j[..j].to_vec();
            for i in j + 1..n {
                let row_i = &mut l[i * n..(i + 1) * n];
                let dot: f64 = row_i[..j].iter().zip(&row_j).map(|(a, b)| a * b).sum();
                row_i[j] = (row_i[j] - dot) / pivot;
            }
        }
        Ok(SpdFactor { n, l })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            let dot: f64 = row.iter().zip(&x[..i]).map(|(a, b)| a * b).sum();
            x[i] = (x[i] - dot) / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        x
    }
}

/// Projector onto the span of `filter_len` delays of a set of references.
struct Projector<'a> {
    refs: Vec<&'a [f64]>,
    filter_len: usize,
    factor: SpdFactor,
}

impl<'a> Projector<'a> {
    fn new(refs: Vec<&'a [f64]>, filter_len: usize) -> Result<Self> {
        let l = filter_len;
        let n = refs.len() * l;
        let mut g = vec![0.0; n * n];
        for (i, ri) in refs.iter().enumerate() {
            for (k, rk) in refs.iter().enumerate().skip(i) {
                // <r_i(· − a), r_k(· − b)> = xc_ik[a − b] for a ≥ b, xc_ki[b − a] otherwise
                let xc_ik = cross_correlation(ri, rk, l);
                let xc_ki = cross_correlation(rk, ri, l);
                for a in 0..l {
                    for b in 0..l {
                        let v = if a >= b { xc_ik[a - b] } else { xc_ki[b - a] };
                        g[(i * l + a) * n + k * l + b] = v;
                        g[(k * l + b) * n + i * l + a] = v;
                    }
                }
            }
        }
        let mean_diag = (0..n).map(|i| g[i * n + i]).sum::<f64>() / n as f64;
        for i in 0..n {
            g[i * n + i] += RIDGE * mean_diag;
        }
        let factor = SpdFactor::new(&g, n)?;
        Ok(Projector { refs, filter_len, factor })
    }

    /// Projection of `x`, length `x.len() + filter_len − 1`.
    fn project(&self, x: &[f64]) -> Vec<f64> {
        let l = self.filter_len;
        let rhs: Vec<f64> = self.refs.iter().flat_map(|r| cross_correlation(r, x, l)).collect();
        let coef = self.factor.solve(&rhs);
        let mut out = vec![0.0; x.len() + l - 1];
        for (r, c) in self.refs.iter().zip(coef.chunks(l)) {
            for (o, v) in out.iter_mut().zip(convolve(c, r)) {
                *o += v;
            }
        }
        out
    }
}

/// Target, interference and artifact terms of one estimate against
/// reference `target` (all of length `n + filter_len − 1`).
fn decompose(all: &Projector<'_>, own: &Projector<'_>, estimate: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let s_target = own.project(estimate);
    let p_all = all.project(estimate);
    let e_interf: Vec<f64> = p_all.iter().zip(&s_target).map(|(a, b)| a - b).collect();
    let mut e_artif: Vec<f64> = p_all.iter().map(|v| -v).collect();
    for (a, e) in e_artif.iter_mut().zip(estimate) {
        *a += e;
    }
    (s_target, e_interf, e_artif)
}

/// SDR/SIR of every estimate against every reference, with the estimate to
/// reference matching that maximizes the mean SIR. Signals are truncated to
/// the shortest length.
pub fn bss_eval(estimates: &[Vec<f64>], references: &[Vec<f64>], filter_len: usize) -> Result<EvalResult> {
    let n_src = references.len();
    if n_src == 0 || estimates.len() != n_src {
        return Err(Error::Input(format!(
            "{} estimates for {} references",
            estimates.len(),
            n_src
        )));
    }
    if filter_len == 0 {
        return Err(Error::Config("filter_len must be at least 1".into()));
    }
    let len = estimates.iter().chain(references).map(Vec::len).min().unwrap_or(0);
    if len == 0 {
        return Err(Error::Input("empty signal".into()));
    }
    let refs: Vec<&[f64]> = references.iter().map(|r| &r[..len]).collect();
    let ests: Vec<&[f64]> = estimates.iter().map(|e| &e[..len]).collect();
    let silent_ref: Vec<bool> = refs.iter().map(|r| energy(r) == 0.0).collect();
    let live: Vec<&[f64]> = refs.iter().zip(&silent_ref).filter(|(_, &s)| !s).map(|(r, _)| *r).collect();
    let all = if live.is_empty() {
        None
    } else {
        Some(Projector::new(live, filter_len)?)
    };
    // sdr[j][e], sir[j][e]: reference j against estimate e
    let mut sdr = vec![vec![-DB_CAP; n_src]; n_src];
    let mut sir = vec![vec![-DB_CAP; n_src]; n_src];
    for j in 0..n_src {
        if silent_ref[j] {
            continue;
        }
        let own = Projector::new(vec![refs[j]], filter_len)?;
        let all = all.as_ref().expect("reference j is live");
        for (e, est) in ests.iter().enumerate() {
            if energy(est) == 0.0 {
                continue;
            }
            let (target, interf, artif) = decompose(all, &own, est);
            let t = energy(&target);
            let noise: Vec<f64> = interf.iter().zip(&artif).map(|(a, b)| a + b).collect();
            sdr[j][e] = safe_db(t, energy(&noise));
            sir[j][e] = safe_db(t, energy(&interf));
        }
    }
    let permutation = permutations(n_src)
        .into_iter()
        .max_by(|a, b| {
            let score = |p: &Vec<usize>| p.iter().enumerate().map(|(j, &e)| sir[j][e]).sum::<f64>();
            // prefer the earliest permutation on ties
            score(a).total_cmp(&score(b)).then_with(|| b.cmp(a))
        })
        .expect("at least one permutation");
    Ok(EvalResult {
        sdr: permutation.iter().enumerate().map(|(j, &e)| sdr[j][e]).collect(),
        sir: permutation.iter().enumerate().map(|(j, &e)| sir[j][e]).collect(),
        degenerate: permutation
            .iter()
            .enumerate()
            .map(|(j, &e)| silent_ref[j] || energy(ests[e]) == 0.0)
            .collect(),
        permutation,
    })
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}
