//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use echosep::acoustics::{Room, Vec3};
use ndarray::{Array2, Array3};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

pub fn key(p: Vec3) -> (i64, i64, i64) {
    let q = |x: f64| (x * 1e6).round() as i64;
    (q(p.x), q(p.y), q(p.z))
}

/// Every wall sequence of length `1..=max_order` without immediate repeats.
pub fn sequences(n_walls: usize, max_order: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut level: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_order {
        let mut next = Vec::new();
        for s in &level {
            for w in 0..n_walls {
                if s.last() != Some(&w) {
                    let mut t = s.clone();
                    t.push(w);
                    next.push(t);
                }
            }
        }
        out.extend(next.iter().cloned());
        level = next;
    }
    out
}

/// Mirrors along the sequence, requiring each intermediate image to face the
/// wall it is mirrored across.
pub fn mirror(room: &Room, point: Vec3, seq: &[usize]) -> Option<Vec3> {
    seq.iter().try_fold(point, |p, &w| {
        let plane = room.walls()[w].plane();
        (plane.signed_distance(p) < -TOL).then(|| plane.reflect(p))
    })
}

pub fn brute_images(room: &Room, point: Vec3, max_order: usize) -> BTreeSet<(i64, i64, i64)> {
    let mut set: BTreeSet<_> = sequences(room.walls().len(), max_order)
        .iter()
        .filter_map(|s| mirror(room, point, s))
        .map(key)
        .collect();
    set.insert(key(point));
    set
}

pub fn segment_hits_wall(room: &Room, from: Vec3, to: Vec3, w: usize) -> Option<Vec3> {
    let wall = &room.walls()[w];
    let plane = wall.plane();
    let (a, b) = (plane.signed_distance(from), plane.signed_distance(to));
    if !(a < TOL && b > 0.0) {
        return None;
    }
    let t = -a / (b - a);
    if !(-TOL..1.0).contains(&t) {
        return None;
    }
    let hit = from + (to - from) * t;
    wall.contains_on_plane(hit, TOL).then_some(hit)
}

/// A specular path exists when, walking back from the receiver, each segment
/// towards the current image crosses the next wall of the sequence inside
/// its polygon. Convexity rules out occlusion.
pub fn path_exists(room: &Room, source: Vec3, receiver: Vec3, seq: &[usize]) -> Option<Vec3> {
    let image = seq.iter().fold(source, |p, &w| room.walls()[w].plane().reflect(p));
    let mut start = receiver;
    let mut target = image;
    for &w in seq.iter().rev() {
        start = segment_hits_wall(room, start, target, w)?;
        target = room.walls()[w].plane().reflect(target);
    }
    (target.distance(source) < TOL).then_some(image)
}

pub fn brute_audible(room: &Room, source: Vec3, receiver: Vec3, max_order: usize) -> BTreeSet<(i64, i64, i64)> {
    let mut set: BTreeSet<_> = sequences(room.walls().len(), max_order)
        .iter()
        .filter_map(|s| path_exists(room, source, receiver, s))
        .map(key)
        .collect();
    set.insert(key(source));
    set
}

pub fn random_inside(room: &Room, rng: &mut ChaCha8Rng) -> Vec3 {
    let (lo, hi) = room.bounds();
    loop {
        let p = Vec3::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y), rng.gen_range(lo.z..hi.z));
        if room.contains(p, 0.1) {
            return p;
        }
    }
}

pub fn rooms() -> Vec<(&'static str, Room)> {
    vec![
        ("shoebox", Room::shoebox([4.0, 6.0, 3.0], 0.4, 16000).unwrap()),
        (
            "triangular prism",
            Room::extruded(&[[0.0, 0.0], [5.0, 0.0], [1.5, 4.0]], 2.7, 0.3, 16000).unwrap(),
        ),
        ("seven-wall", Room::default_seven_wall(0.4, 16000).unwrap()),
    ]
}


fn c(re: f64, im: f64) -> Complex<f64> {
    Complex::new(re, im)
}

pub fn rand_c(r: &mut ChaCha8Rng) -> Complex<f64> {
    c(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))
}

/// Dense inverse and determinant by Gauss-Jordan elimination.
pub fn dense_inv_det(a: &[Complex<f64>], n: usize) -> (Vec<Complex<f64>>, Complex<f64>) {
    let mut m = a.to_vec();
    let mut inv: Vec<Complex<f64>> = (0..n * n).map(|i| if i % (n + 1) == 0 { c(1.0, 0.0) } else { c(0.0, 0.0) }).collect();
    let mut det = c(1.0, 0.0);
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x * n + col].norm().total_cmp(&m[y * n + col].norm())).unwrap();
        if piv != col {
            for k in 0..n {
                m.swap(piv * n + k, col * n + k);
                inv.swap(piv * n + k, col * n + k);
            }
            det = -det;
        }
        let p = m[col * n + col];
        det *= p;
        for k in 0..n {
            m[col * n + k] /= p;
            inv[col * n + k] /= p;
        }
        for r in 0..n {
            if r != col {
                let fac = m[r * n + col];
                for k in 0..n {
                    let (a, b) = (m[col * n + k], inv[col * n + k]);
                    m[r * n + k] -= fac * a;
                    inv[r * n + k] -= fac * b;
                }
            }
        }
    }
    (inv, det)
}

/// `Σ_{f,n} tr(y yᴴ Σ⁻¹) + ln det Σ` with every covariance built and inverted
/// densely.
pub fn dense_loglik(y: &[Array2<Complex<f64>>], h: &Array3<Complex<f64>>, var: &[Array2<f64>], noise: &[f64]) -> f64 {
    let (nf, nm, nj) = h.dim();
    let nn = y[0].ncols();
    let mut total = 0.0;
    for f in 0..nf {
        for n in 0..nn {
            let mut cov = vec![c(0.0, 0.0); nm * nm];
            for a in 0..nm {
                for b in 0..nm {
                    for j in 0..nj {
                        cov[a * nm + b] += h[[f, a, j]] * h[[f, b, j]].conj() * var[j][[f, n]];
                    }
                }
                cov[a * nm + a] += noise[f];
            }
            let (inv, det) = dense_inv_det(&cov, nm);
            let mut tr = c(0.0, 0.0);
            for a in 0..nm {
                for b in 0..nm {
                    tr += y[a][[f, n]] * y[b][[f, n]].conj() * inv[b * nm + a];
                }
            }
            total += tr.re + det.re.ln();
        }
    }
    total
}

pub fn random_loglik_problem(
    nm: usize,
    nj: usize,
    nf: usize,
    nn: usize,
    seed: u64,
) -> (Vec<Array2<Complex<f64>>>, Array3<Complex<f64>>, Vec<Array2<f64>>, Vec<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let y = (0..nm).map(|_| Array2::from_shape_simple_fn((nf, nn), || rand_c(&mut r))).collect();
    let h = Array3::from_shape_simple_fn((nf, nm, nj), || rand_c(&mut r));
    let var = (0..nj).map(|_| Array2::from_shape_simple_fn((nf, nn), || r.gen_range(0.1..2.0))).collect();
    let noise = (0..nf).map(|_| r.gen_range(0.01..0.1)).collect();
    (y, h, var, noise)
}

pub fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()
}
