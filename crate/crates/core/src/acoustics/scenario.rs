//! Source/microphone placements and reverberant mixture rendering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::Vec3;
use super::images::audible_images;
use super::rir::{rir_from_images, Rir};
use super::room::Room;
use crate::corpus::AudioClip;
use crate::dsp::convolve;
use crate::error::{Error, Result};

/// Rejection-sampling attempts allowed per source.
pub const MAX_TRIES_PER_SOURCE: usize = 10_000;
pub const DEFAULT_MAX_ORDER: usize = 10;
/// Minimum clearance between a sampled source and any wall.
pub const WALL_MARGIN: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub room: Room,
    pub mic_positions: Vec<Vec3>,
    pub source_positions: Vec<Vec3>,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        for (i, &m) in self.mic_positions.iter().enumerate() {
            self.room.check_inside(m, &format!("microphone {i}"))?;
        }
        for (i, &s) in self.source_positions.iter().enumerate() {
            self.room.check_inside(s, &format!("source {i}"))?;
        }
        Ok(())
    }

    pub fn array_centroid(&self) -> Vec3 {
        centroid(&self.mic_positions)
    }

    /// Same room and microphones, restricted to the listed sources.
    pub fn with_sources(&self, ids: &[usize]) -> Scenario {
        Scenario {
            room: self.room.clone(),
            mic_positions: self.mic_positions.clone(),
            source_positions: ids.iter().map(|&i| self.source_positions[i]).collect(),
            seed: self.seed,
        }
    }
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().fold(Vec3::default(), |a, &p| a + p) * (1.0 / points.len() as f64)
}

/// Horizontal equilateral triangle centred on `center`; `rotation` (radians)
/// is the angle of the first vertex around the vertical axis.
pub fn triangle_array(center: Vec3, edge: f64, rotation: f64) -> Vec<Vec3> {
    let radius = edge / 3f64.sqrt();
    (0..3)
        .map(|i| {
            let a = rotation + i as f64 * 2.0 * std::f64::consts::PI / 3.0;
            center + Vec3::new(radius * a.cos(), radius * a.sin(), 0.0)
        })
        .collect()
}

/// Default array: 0.3 m triangle near the (0, 0) corner of the default room.
pub fn default_array() -> Vec<Vec3> {
    triangle_array(Vec3::new(0.8, 0.8, 1.2), 0.3, 0.0)
}

/// Draws `n_sources` positions whose distance to the array centroid lies in
/// `dist_range`, and returns every unordered pair at least `min_pair_dist`
/// apart, in lexicographic order.
pub fn sample_scenarios(
    room: &Room,
    mics: &[Vec3],
    n_sources: usize,
    dist_range: (f64, f64),
    min_pair_dist: f64,
    seed: u64,
) -> Result<(Scenario, Vec<(usize, usize)>)> {
    if n_sources < 2 {
        return Err(Error::Input(format!("need at least 2 sources, got {n_sources}")));
    }
    if mics.is_empty() {
        return Err(Error::Input("no microphones".into()));
    }
    let (dmin, dmax) = dist_range;
    if !(dmin >= 0.0 && dmax >= dmin) {
        return Err(Error::Input(format!("invalid distance range {dist_range:?}")));
    }
    for (i, &m) in mics.iter().enumerate() {
        room.check_inside(m, &format!("microphone {i}"))?;
    }
    let center = centroid(mics);
    let (lo, hi) = room.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sources = Vec::with_capacity(n_sources);
    for s in 0..n_sources {
        let mut placed = None;
        for _ in 0..MAX_TRIES_PER_SOURCE {
            let p = Vec3::new(
                rng.gen_range(lo.x..hi.x),
                rng.gen_range(lo.y..hi.y),
                rng.gen_range(lo.z..hi.z),
            );
            let d = p.distance(center);
            if d >= dmin && d <= dmax && room.contains(p, WALL_MARGIN) {
                placed = Some(p);
                break;
            }
        }
        match placed {
            Some(p) => sources.push(p),
            None => {
                return Err(Error::Infeasible(format!(
                    "could not place source {s} within {dist_range:?} m of the array after {MAX_TRIES_PER_SOURCE} tries"
                )))
            }
        }
    }
    let pairs = valid_pairs(&sources, min_pair_dist);
    Ok((
        Scenario {
            room: room.clone(),
            mic_positions: mics.to_vec(),
            source_positions: sources,
            seed,
        },
        pairs,
    ))
}

pub fn valid_pairs(sources: &[Vec3], min_pair_dist: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..sources.len() {
        for j in i + 1..sources.len() {
            if sources[i].distance(sources[j]) >= min_pair_dist {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Rendered microphone signals with the per-(source, mic) spatial images
/// they are the sum of.
#[derive(Debug, Clone)]
pub struct Mixture {
    /// `mics[m]`
    pub mics: Vec<Vec<f64>>,
    /// `images[j][m]` = source j convolved with the RIR from j to m.
    pub images: Vec<Vec<Vec<f64>>>,
    pub rirs: Vec<Vec<Rir>>,
    pub sample_rate: u32,
}

impl Mixture {
    pub fn len(&self) -> usize {
        self.mics.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All RIRs `rirs[j][m]` of a scenario.
pub fn scenario_rirs(scenario: &Scenario, max_order: usize) -> Result<Vec<Vec<Rir>>> {
    scenario.validate()?;
    let room = &scenario.room;
    scenario
        .source_positions
        .iter()
        .enumerate()
        .map(|(j, &src)| {
            scenario
                .mic_positions
                .iter()
                .enumerate()
                .map(|(m, &mic)| {
                    let images = audible_images(room, src, mic, max_order)?;
                    Ok(rir_from_images(room, &images, mic, (j, m)))
                })
                .collect()
        })
        .collect()
}

pub fn render_mixture(scenario: &Scenario, sources: &[AudioClip], max_order: usize) -> Result<Mixture> {
    let rate = scenario.room.sample_rate;
    if sources.len() != scenario.source_positions.len() {
        return Err(Error::Input(format!(
            "{} signals for {} source positions",
            sources.len(),
            scenario.source_positions.len()
        )));
    }
    if let Some(bad) = sources.iter().find(|c| c.sample_rate != rate) {
        return Err(Error::Input(format!(
            "clip {} is at {} Hz, room is at {rate} Hz",
            bad.utterance_id, bad.sample_rate
        )));
    }
    let rirs = scenario_rirs(scenario, max_order)?;
    render_with_rirs(&rirs, sources, rate)
}

pub fn render_with_rirs(rirs: &[Vec<Rir>], sources: &[AudioClip], sample_rate: u32) -> Result<Mixture> {
    let images: Vec<Vec<Vec<f64>>> = sources
        .iter()
        .zip(rirs)
        .map(|(clip, per_mic)| per_mic.iter().map(|r| convolve(&clip.samples, &r.taps)).collect())
        .collect();
    let n_mics = rirs.first().map_or(0, Vec::len);
    let len = images.iter().flatten().map(Vec::len).max().unwrap_or(0);
    let mut images = images;
    for img in images.iter_mut().flatten() {
        img.resize(len, 0.0);
    }
    let mics = (0..n_mics)
        .map(|m| {
            let mut y = vec![0.0; len];
            for src in &images {
                for (acc, &v) in y.iter_mut().zip(&src[m]) {
                    *acc += v;
                }
            }
            y
        })
        .collect();
    Ok(Mixture {
        mics,
        images,
        rirs: rirs.to_vec(),
        sample_rate,
    })
}
