//! Minimal 3D vector algebra and planar convex polygons.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        [v.x, v.y, v.z]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Oriented plane `normal · x = offset` with unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }

    pub fn reflect(&self, p: Vec3) -> Vec3 {
        p - self.normal * (2.0 * self.signed_distance(p))
    }
}

/// Unit normal of a planar polygon by Newell's method, oriented so that the
/// vertices run counter-clockwise around it.
pub fn newell_normal(vertices: &[Vec3]) -> Vec3 {
    let mut n = Vec3::default();
    for (i, a) in vertices.iter().enumerate() {
        let b = vertices[(i + 1) % vertices.len()];
        n.x += (a.y - b.y) * (a.z + b.z);
        n.y += (a.z - b.z) * (a.x + b.x);
        n.z += (a.x - b.x) * (a.y + b.y);
    }
    n.normalized()
}

/// Whether `p` (assumed on the polygon's plane) lies inside the convex polygon
/// whose vertices run counter-clockwise around `normal`.
pub fn point_in_convex_polygon(vertices: &[Vec3], normal: Vec3, p: Vec3, tol: f64) -> bool {
    vertices.iter().enumerate().all(|(i, &a)| {
        let b = vertices[(i + 1) % vertices.len()];
        let edge = b - a;
        let len = edge.norm();
        // signed distance of p to the edge line, positive inside
        normal.dot(edge.cross(p - a)) / len >= -tol
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_is_an_involution() {
        let plane = Plane {
            normal: Vec3::new(1.0, 1.0, 0.0).normalized(),
            offset: 0.7,
        };
        let p = Vec3::new(0.3, -2.0, 5.0);
        let back = plane.reflect(plane.reflect(p));
        assert!(back.distance(p) < 1e-12);
        assert!((plane.signed_distance(plane.reflect(p)) + plane.signed_distance(p)).abs() < 1e-12);
    }

    #[test]
    fn newell_follows_winding() {
        let square = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        let n = newell_normal(&square);
        assert!((n.z - 1.0).abs() < 1e-12);
        assert!(point_in_convex_polygon(&square, n, Vec3::new(0.5, 0.5, 0.0), 0.0));
        assert!(!point_in_convex_polygon(&square, n, Vec3::new(1.5, 0.5, 0.0), 1e-9));
    }
}
