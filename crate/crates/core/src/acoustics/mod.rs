//! Geometric room acoustics: convex rooms, image sources, impulse responses
//! and mixture rendering.

pub mod geometry;
pub mod images;
pub mod rir;
pub mod room;
pub mod scenario;

pub use geometry::Vec3;
pub use images::{audible_images, enumerate_images, trace_path, ImageSource};
pub use rir::{energy_decay_db, synthesize_rir, t60_schroeder, Rir};
pub use room::{ReflectionModel, Room, RoomSpec, WallSpec};
pub use scenario::{
    centroid, default_array, render_mixture, render_with_rirs, sample_scenarios, scenario_rirs, triangle_array,
    valid_pairs, Mixture, Scenario, DEFAULT_MAX_ORDER,
};
