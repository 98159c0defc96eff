//! Convex polyhedral rooms.

use serde::{Deserialize, Serialize};

use super::geometry::{newell_normal, point_in_convex_polygon, Plane, Vec3};
use crate::error::{Error, Result};

pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;

const GEOMETRY_TOL: f64 = 1e-9;

/// How a wall's absorption coefficient turns into a per-bounce amplitude gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReflectionModel {
    /// Gain `1 - a`.
    #[default]
    Amplitude,
    /// Gain `sqrt(1 - a)`, `a` being the absorbed fraction of energy.
    Energy,
}

impl ReflectionModel {
    pub fn gain(self, absorption: f64) -> f64 {
        match self {
            ReflectionModel::Amplitude => 1.0 - absorption,
            ReflectionModel::Energy => (1.0 - absorption).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallSpec {
    pub vertices: Vec<Vec3>,
    pub absorption: f64,
}

/// A planar convex wall. Vertices run counter-clockwise around the outward
/// normal.
#[derive(Debug, Clone, PartialEq)]
pub struct Wall {
    vertices: Vec<Vec3>,
    plane: Plane,
    pub absorption: f64,
}

impl Wall {
    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn plane(&self) -> &Plane {
        &self.plane
    }

    pub fn contains_on_plane(&self, p: Vec3, tol: f64) -> bool {
        point_in_convex_polygon(&self.vertices, self.plane.normal, p, tol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "RoomSpec", try_from = "RoomSpec")]
pub struct Room {
    walls: Vec<Wall>,
    pub speed_of_sound: f64,
    pub sample_rate: u32,
    pub reflection: ReflectionModel,
}

/// Serialized form of a [`Room`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub walls: Vec<WallSpec>,
    #[serde(default = "default_c")]
    pub speed_of_sound: f64,
    pub sample_rate: u32,
    #[serde(default)]
    pub reflection: ReflectionModel,
}

fn default_c() -> f64 {
    DEFAULT_SPEED_OF_SOUND
}

impl From<Room> for RoomSpec {
    fn from(room: Room) -> Self {
        RoomSpec {
            walls: room
                .walls
                .into_iter()
                .map(|w| WallSpec {
                    vertices: w.vertices,
                    absorption: w.absorption,
                })
                .collect(),
            speed_of_sound: room.speed_of_sound,
            sample_rate: room.sample_rate,
            reflection: room.reflection,
        }
    }
}

impl TryFrom<RoomSpec> for Room {
    type Error = Error;

    fn try_from(spec: RoomSpec) -> Result<Self> {
        let mut room = Room::from_walls(spec.walls, spec.sample_rate)?;
        if !(spec.speed_of_sound > 0.0) {
            return Err(Error::Geometry("speed of sound must be positive".into()));
        }
        room.speed_of_sound = spec.speed_of_sound;
        room.reflection = spec.reflection;
        Ok(room)
    }
}

impl Room {
    /// Builds a room from its walls. The walls must bound a convex region;
    /// outward normals are derived from the vertex centroid.
    pub fn from_walls(walls: Vec<WallSpec>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Geometry("sample rate must be positive".into()));
        }
        if walls.len() < 4 {
            return Err(Error::Geometry(format!(
                "a closed room needs at least 4 walls, got {}",
                walls.len()
            )));
        }
        let all: Vec<Vec3> = walls.iter().flat_map(|w| w.vertices.iter().copied()).collect();
        let centroid = all.iter().fold(Vec3::default(), |acc, &v| acc + v) * (1.0 / all.len() as f64);

        let mut built = Vec::with_capacity(walls.len());
        for (i, spec) in walls.into_iter().enumerate() {
            if spec.vertices.len() < 3 {
                return Err(Error::Geometry(format!("wall {i} has fewer than 3 vertices")));
            }
            if !(0.0..=1.0).contains(&spec.absorption) {
                return Err(Error::Geometry(format!(
                    "wall {i} absorption {} outside [0, 1]",
                    spec.absorption
                )));
            }
            let mut vertices = spec.vertices;
            let mut normal = newell_normal(&vertices);
            if !normal.is_finite() {
                return Err(Error::Geometry(format!("wall {i} is degenerate")));
            }
            let offset = normal.dot(vertices[0]);
            if normal.dot(centroid) > offset {
                normal = -normal;
                vertices.reverse();
            }
            let plane = Plane {
                normal,
                offset: normal.dot(vertices[0]),
            };
            let scale = vertices.iter().map(|v| v.norm()).fold(1.0, f64::max);
            if vertices
                .iter()
                .any(|&v| plane.signed_distance(v).abs() > 1e-7 * scale)
            {
                return Err(Error::Geometry(format!("wall {i} is not planar")));
            }
            built.push(Wall {
                vertices,
                plane,
                absorption: spec.absorption,
            });
        }

        for (i, w) in built.iter().enumerate() {
            if all.iter().any(|&v| w.plane.signed_distance(v) > 1e-7) {
                return Err(Error::Geometry(format!(
                    "room is not convex: vertices lie outside wall {i}"
                )));
            }
        }
        if built.iter().any(|w| w.plane.signed_distance(centroid) > -GEOMETRY_TOL) {
            return Err(Error::Geometry("walls do not enclose a bounded region".into()));
        }

        Ok(Room {
            walls: built,
            speed_of_sound: DEFAULT_SPEED_OF_SOUND,
            sample_rate,
            reflection: ReflectionModel::default(),
        })
    }

    /// Axis-aligned box `[0, lx] × [0, ly] × [0, lz]`. Wall order:
    /// x = 0, x = lx, y = 0, y = ly, z = 0, z = lz.
    pub fn shoebox(dims: [f64; 3], absorption: f64, sample_rate: u32) -> Result<Self> {
        let [lx, ly, lz] = dims;
        if dims.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Geometry(format!("invalid shoebox dimensions {dims:?}")));
        }
        let v = |x, y, z| Vec3::new(x, y, z);
        let faces = vec![
            vec![v(0., 0., 0.), v(0., ly, 0.), v(0., ly, lz), v(0., 0., lz)],
            vec![v(lx, 0., 0.), v(lx, ly, 0.), v(lx, ly, lz), v(lx, 0., lz)],
            vec![v(0., 0., 0.), v(lx, 0., 0.), v(lx, 0., lz), v(0., 0., lz)],
            vec![v(0., ly, 0.), v(lx, ly, 0.), v(lx, ly, lz), v(0., ly, lz)],
            vec![v(0., 0., 0.), v(lx, 0., 0.), v(lx, ly, 0.), v(0., ly, 0.)],
            vec![v(0., 0., lz), v(lx, 0., lz), v(lx, ly, lz), v(0., ly, lz)],
        ];
        Room::from_walls(
            faces
                .into_iter()
                .map(|vertices| WallSpec { vertices, absorption })
                .collect(),
            sample_rate,
        )
    }

    /// Convex floor polygon extruded from z = 0 to `height`. Wall order: one
    /// vertical wall per floor edge (edge i joins vertex i and i + 1), then the
    /// floor, then the ceiling.
    pub fn extruded(floor: &[[f64; 2]], height: f64, absorption: f64, sample_rate: u32) -> Result<Self> {
        if floor.len() < 3 {
            return Err(Error::Geometry("floor plan needs at least 3 corners".into()));
        }
        if !(height > 0.0) {
            return Err(Error::Geometry(format!("invalid room height {height}")));
        }
        let n = floor.len();
        let mut walls = Vec::with_capacity(n + 2);
        for i in 0..n {
            let [ax, ay] = floor[i];
            let [bx, by] = floor[(i + 1) % n];
            walls.push(WallSpec {
                vertices: vec![
                    Vec3::new(ax, ay, 0.0),
                    Vec3::new(bx, by, 0.0),
                    Vec3::new(bx, by, height),
                    Vec3::new(ax, ay, height),
                ],
                absorption,
            });
        }
        let ground: Vec<Vec3> = floor.iter().map(|&[x, y]| Vec3::new(x, y, 0.0)).collect();
        let ceiling: Vec<Vec3> = floor.iter().map(|&[x, y]| Vec3::new(x, y, height)).collect();
        walls.push(WallSpec {
            vertices: ground,
            absorption,
        });
        walls.push(WallSpec {
            vertices: ceiling,
            absorption,
        });
        Room::from_walls(walls, sample_rate)
    }

    /// Seven-wall room used by the experiments: a 5 m × 5 m floor with one
    /// corner cut, 2.5 m high. The microphone array sits near the (0, 0)
    /// corner.
    pub fn default_seven_wall(absorption: f64, sample_rate: u32) -> Result<Self> {
        Room::extruded(&DEFAULT_FLOOR, DEFAULT_HEIGHT, absorption, sample_rate)
    }

    pub fn walls(&self) -> &[Wall] {
        &self.walls
    }

    pub fn wall_gain(&self, wall: usize) -> f64 {
        self.reflection.gain(self.walls[wall].absorption)
    }

    /// Whether `p` is strictly inside every wall, by at least `margin` meters.
    pub fn contains(&self, p: Vec3, margin: f64) -> bool {
        p.is_finite()
            && self
                .walls
                .iter()
                .all(|w| w.plane.signed_distance(p) < -margin.max(GEOMETRY_TOL))
    }

    pub fn check_inside(&self, p: Vec3, what: &str) -> Result<()> {
        if self.contains(p, 0.0) {
            Ok(())
        } else {
            Err(Error::Geometry(format!(
                "{what} at ({:.3}, {:.3}, {:.3}) is not strictly inside the room",
                p.x, p.y, p.z
            )))
        }
    }

    /// Axis-aligned bounding box (min, max).
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        for v in self.walls.iter().flat_map(|w| w.vertices.iter()) {
            lo = Vec3::new(lo.x.min(v.x), lo.y.min(v.y), lo.z.min(v.z));
            hi = Vec3::new(hi.x.max(v.x), hi.y.max(v.y), hi.z.max(v.z));
        }
        (lo, hi)
    }

    pub fn volume_and_surface(&self) -> (f64, f64) {
        // divergence theorem over the triangulated boundary
        let mut volume = 0.0;
        let mut surface = 0.0;
        for w in &self.walls {
            let v = &w.vertices;
            let mut area_vec = Vec3::default();
            for i in 1..v.len() - 1 {
                area_vec = area_vec + (v[i] - v[0]).cross(v[i + 1] - v[0]) * 0.5;
            }
            let area = area_vec.norm();
            surface += area;
            volume += area * w.plane.offset / 3.0;
        }
        (volume, surface)
    }
}

pub const DEFAULT_FLOOR: [[f64; 2]; 5] = [[0.0, 0.0], [5.0, 0.0], [5.0, 3.5], [3.5, 5.0], [0.0, 5.0]];
pub const DEFAULT_HEIGHT: f64 = 2.5;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shoebox_contains_and_normals_point_out() {
        let room = Room::shoebox([4.0, 6.0, 3.0], 0.4, 16000).unwrap();
        assert_eq!(room.walls().len(), 6);
        assert!(room.contains(Vec3::new(1.0, 1.0, 1.0), 0.0));
        assert!(!room.contains(Vec3::new(-0.1, 1.0, 1.0), 0.0));
        assert!(!room.contains(Vec3::new(0.0, 1.0, 1.0), 0.0));
        let n0 = room.walls()[0].plane().normal;
        assert!((n0.x + 1.0).abs() < 1e-12);
        let (v, s) = room.volume_and_surface();
        assert!((v - 72.0).abs() < 1e-9);
        assert!((s - 2.0 * (24.0 + 12.0 + 18.0)).abs() < 1e-9);
    }

    #[test]
    fn default_room_has_seven_walls() {
        let room = Room::default_seven_wall(0.4, 16000).unwrap();
        assert_eq!(room.walls().len(), 7);
        assert!(!room.contains(Vec3::new(4.5, 4.5, 1.0), 0.0));
        assert!(room.contains(Vec3::new(4.0, 4.0, 1.0), 0.0));
    }

    #[test]
    fn rejects_bad_absorption_and_nonconvex() {
        assert!(Room::shoebox([4.0, 6.0, 3.0], 1.5, 16000).is_err());
        let concave = [[0.0, 0.0], [4.0, 0.0], [2.0, 1.0], [4.0, 4.0], [0.0, 4.0]];
        assert!(Room::extruded(&concave, 3.0, 0.2, 16000).is_err());
    }

    #[test]
    fn json_round_trip() {
        let room = Room::default_seven_wall(0.3, 16000).unwrap();
        let json = serde_json::to_string(&room).unwrap();
        let back: Room = serde_json::from_str(&json).unwrap();
        assert_eq!(room, back);
    }
}
