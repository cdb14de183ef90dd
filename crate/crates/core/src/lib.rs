//! Optical pump-map and microwave-mode overlap toolkit for optically pumped
//! solid-state masers.
//!
//! The core is generic over the scalar type (`f32` or `f64`, see [`num::Real`]);
//! the aliases below fix it to `f64`, which is what the CLI uses.

pub mod config;
pub mod emfield;
pub mod fom;
pub mod geom;
pub mod grid;
pub mod linalg;
pub mod num;
pub mod optics;
pub mod pipeline;
pub mod scene;
pub mod source;
pub mod spectrum;
pub mod tracer;

pub use num::Real;

pub type Scene = scene::Scene<f64>;
pub type VoxelGrid = grid::VoxelGrid<f64>;
pub type GridSpec = grid::GridSpec<f64>;
pub type FieldMap = emfield::FieldMap<f64>;
pub type TraceResult = tracer::TraceResult<f64>;
pub type LedSource = source::LedSource<f64>;
pub type Vec3 = geom::Vec3<f64>;

pub type SceneF32 = scene::Scene<f32>;
pub type VoxelGridF32 = grid::VoxelGrid<f32>;
pub type FieldMapF32 = emfield::FieldMap<f32>;
pub type TraceResultF32 = tracer::TraceResult<f32>;
