//! Image-source enumeration.
//!
//! Images are generated breadth first. A child image is produced by mirroring
//! its parent across a wall only if the parent lies strictly in front of that
//! wall (on the interior side), which is necessary for the specular path to
//! exist. Positions reached by several wall sequences are kept once, at their
//! lowest order. Whether an image is actually heard at a given receiver is
//! decided afterwards by unfolding the path from the receiver (see
//! [`trace_path`]), which does not depend on which of the equivalent wall
//! sequences was stored.

use std::collections::HashSet;

use super::geometry::Vec3;
use super::room::Room;
use crate::error::Result;

/// Positions closer than this are treated as the same image.
const DEDUP_GRID: f64 = 1e-7;
const TRACE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSource {
    pub position: Vec3,
    pub order: usize,
    /// Walls in the order the sound hits them, source side first.
    pub wall_sequence: Vec<usize>,
    /// Product of the per-bounce reflection gains.
    pub attenuation: f64,
}

impl ImageSource {
    pub fn distance_to(&self, receiver: Vec3) -> f64 {
        self.position.distance(receiver)
    }

    pub fn delay_s(&self, receiver: Vec3, speed_of_sound: f64) -> f64 {
        self.distance_to(receiver) / speed_of_sound
    }

    /// Mirrors the image back through its wall sequence (last wall first).
    pub fn unfold(&self, room: &Room) -> Vec3 {
        self.wall_sequence
            .iter()
            .rev()
            .fold(self.position, |p, &w| room.walls()[w].plane().reflect(p))
    }
}

fn grid_key(p: Vec3) -> (i64, i64, i64) {
    (
        (p.x / DEDUP_GRID).round() as i64,
        (p.y / DEDUP_GRID).round() as i64,
        (p.z / DEDUP_GRID).round() as i64,
    )
}

fn attenuation(room: &Room, seq: &[usize]) -> f64 {
    seq.iter().map(|&w| room.wall_gain(w)).product()
}

/// All geometrically valid images of `point` up to `max_order` reflections,
/// deduplicated by position. The order-0 image (the point itself) is first;
/// images are sorted by order, then by wall sequence.
pub fn enumerate_images(room: &Room, point: Vec3, max_order: usize) -> Result<Vec<ImageSource>> {
    room.check_inside(point, "image-source origin")?;

    let mut seen = HashSet::new();
    seen.insert(grid_key(point));
    let mut all = vec![ImageSource {
        position: point,
        order: 0,
        wall_sequence: Vec::new(),
        attenuation: 1.0,
    }];
    let mut frontier = vec![0usize];

    for order in 1..=max_order {
        let mut next = Vec::new();
        for &parent_idx in &frontier {
            for (w, wall) in room.walls().iter().enumerate() {
                let parent = &all[parent_idx];
                if parent.wall_sequence.last() == Some(&w) {
                    continue;
                }
                if wall.plane().signed_distance(parent.position) >= -TRACE_TOL {
                    continue;
                }
                let position = wall.plane().reflect(parent.position);
                if !seen.insert(grid_key(position)) {
                    continue;
                }
                let mut wall_sequence = parent.wall_sequence.clone();
                wall_sequence.push(w);
                let attenuation = parent.attenuation * room.wall_gain(w);
                all.push(ImageSource {
                    position,
                    order,
                    wall_sequence,
                    attenuation,
                });
                next.push(all.len() - 1);
            }
        }
        // stable order within a level
        next.sort_by(|&a, &b| all[a].wall_sequence.cmp(&all[b].wall_sequence));
        frontier = next;
    }
    all.sort_by(|a, b| a.order.cmp(&b.order).then_with(|| a.wall_sequence.cmp(&b.wall_sequence)));
    Ok(all)
}

/// Walks the specular path backwards from `receiver` towards `image` for
/// `order` bounces. Returns the wall sequence (source side first) if the
/// unfolded path lands on `source`.
pub fn trace_path(room: &Room, receiver: Vec3, image: Vec3, order: usize, source: Vec3) -> Option<Vec<usize>> {
    let mut start = receiver;
    let mut target = image;
    let mut last: Option<usize> = None;
    let mut seq = Vec::with_capacity(order);
    for _ in 0..order {
        let dir = target - start;
        let mut best: Option<(f64, usize)> = None;
        for (w, wall) in room.walls().iter().enumerate() {
            if Some(w) == last {
                continue;
            }
            let denom = wall.plane().normal.dot(dir);
            if denom <= 0.0 {
                continue;
            }
            let t = -wall.plane().signed_distance(start) / denom;
            if t < -TRACE_TOL {
                continue;
            }
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, w));
            }
        }
        let (t, w) = best?;
        if t >= 1.0 - 1e-12 {
            return None;
        }
        let hit = start + dir * t;
        let wall = &room.walls()[w];
        if !wall.contains_on_plane(hit, TRACE_TOL) {
            return None;
        }
        seq.push(w);
        target = wall.plane().reflect(target);
        start = hit;
        last = Some(w);
    }
    if target.distance(source) > TRACE_TOL {
        return None;
    }
    seq.reverse();
    Some(seq)
}

/// Images of `source` up to `max_order` that reach `receiver` through a valid
/// specular path. The wall sequence and attenuation of each returned image
/// come from the traced path.
pub fn audible_images(room: &Room, source: Vec3, receiver: Vec3, max_order: usize) -> Result<Vec<ImageSource>> {
    room.check_inside(receiver, "receiver")?;
    let candidates = enumerate_images(room, source, max_order)?;
    Ok(candidates
        .into_iter()
        .filter_map(|img| {
            let seq = trace_path(room, receiver, img.position, img.order, source)?;
            Some(ImageSource {
                attenuation: attenuation(room, &seq),
                wall_sequence: seq,
                ..img
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shoebox() -> Room {
        Room::shoebox([4.0, 6.0, 3.0], 0.4, 16000).unwrap()
    }

    #[test]
    fn order_zero_is_the_point() {
        let imgs = enumerate_images(&shoebox(), Vec3::new(1.0, 1.0, 1.0), 0).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].position, Vec3::new(1.0, 1.0, 1.0));
        assert_eq!(imgs[0].attenuation, 1.0);
        assert!(imgs[0].wall_sequence.is_empty());
    }

    #[test]
    fn first_order_shoebox() {
        let room = shoebox();
        let imgs = enumerate_images(&room, Vec3::new(1.0, 1.0, 1.0), 1).unwrap();
        assert_eq!(imgs.len(), 7);
        let across_x0 = imgs.iter().find(|i| i.wall_sequence == [0]).unwrap();
        assert!(across_x0.position.distance(Vec3::new(-1.0, 1.0, 1.0)) < 1e-12);
        assert!((across_x0.attenuation - 0.6).abs() < 1e-12);
    }

    #[test]
    fn images_unfold_to_source() {
        let room = Room::default_seven_wall(0.4, 16000).unwrap();
        let src = Vec3::new(2.2, 3.1, 1.4);
        for img in enumerate_images(&room, src, 4).unwrap() {
            assert_eq!(img.order, img.wall_sequence.len());
            assert!(img.unfold(&room).distance(src) < 1e-9);
        }
    }

    #[test]
    fn point_outside_is_rejected() {
        assert!(enumerate_images(&shoebox(), Vec3::new(5.0, 1.0, 1.0), 1).is_err());
    }

    #[test]
    fn all_shoebox_images_are_audible() {
        // in a box every mirror image corresponds to a real path
        let room = shoebox();
        let src = Vec3::new(1.0, 1.0, 1.0);
        let rx = Vec3::new(2.5, 4.0, 1.7);
        let all = enumerate_images(&room, src, 3).unwrap();
        let heard = audible_images(&room, src, rx, 3).unwrap();
        assert_eq!(all.len(), heard.len());
    }
}
