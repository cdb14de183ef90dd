//! End-to-end helpers: config → scene → trace → normalized overlap.

use crate::emfield::FieldMap;
use crate::fom::{overlap_delta, uniform_delta, FomError};
use crate::geom::{Axis, Vec3};
use crate::grid::GridSpec;
use crate::num::Real;
use crate::scene::{build_scene, Configuration, RegionTag, Scene, SceneConfig, SceneError};
use crate::source::LedSource;
use crate::tracer::{mean_absorption_depth, trace, TraceError, TraceOptions, TraceResult};

/// Default voxel pitch in mm.
pub const DEFAULT_PITCH_MM: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Fom(#[from] FomError),
}

/// Grid over the crystal, or a single voxel at the waveguide end when the
/// scene has no crystal (meter runs).
pub fn scene_grid_spec<T: Real>(scene: &Scene<T>, pitch: T) -> Result<GridSpec<T>, TraceError> {
    match scene.region_bbox(RegionTag::Crystal) {
        Some(b) => GridSpec::covering(b, pitch).map_err(|e| TraceError::InvalidArgument(e.to_string())),
        None => Ok(GridSpec {
            origin: scene.apex - Vec3::new(pitch, pitch, pitch) * T::lit(0.5),
            dims: [1, 1, 1],
            pitch,
        }),
    }
}

/// Builds the scene for `config` and traces it with the configured LED.
pub fn trace_config<T: Real>(
    config: &SceneConfig,
    opts: &TraceOptions,
    pitch_mm: f64,
    config_hash: &str,
) -> Result<(Scene<T>, TraceResult<T>), PipelineError> {
    let scene: Scene<T> = build_scene(config)?;
    let source = LedSource::for_scene(&scene, T::lit(config.led.total_power_w));
    let spec = scene_grid_spec(&scene, T::lit(pitch_mm))?;
    let result = trace(&scene, &source, spec, opts, config_hash)?;
    Ok((scene, result))
}

/// Δ of a trace and of uniform pumping over the same crystal voxels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap<T> {
    pub delta: T,
    pub delta_uniform: T,
}

pub fn overlap_of<T: Real>(result: &TraceResult<T>, field: &FieldMap<T>) -> Result<Overlap<T>, FomError> {
    let grid = result.grid.normalized_to_region(RegionTag::Crystal)?;
    Ok(Overlap {
        delta: overlap_delta(&grid, field, RegionTag::Crystal)?,
        delta_uniform: uniform_delta(field, &result.grid, RegionTag::Crystal)?,
    })
}

/// Power-weighted mean distance travelled into the crystal before absorption:
/// height above the lower face for butt coupling, distance from the apex for
/// invasive tips.
pub fn mean_depth_mm<T: Real>(result: &TraceResult<T>, scene: &Scene<T>, config: &SceneConfig) -> Result<T, TraceError> {
    match config.configuration {
        Configuration::Invasive => {
            let g = &result.grid;
            let (mut num, mut den) = (T::zero(), T::zero());
            for k in 0..g.dims[2] {
                for j in 0..g.dims[1] {
                    for i in 0..g.dims[0] {
                        let v = g.values[g.index(i, j, k)];
                        if v != T::zero() {
                            num += v * (g.center(i, j, k) - scene.apex).norm();
                            den += v;
                        }
                    }
                }
            }
            if den > T::zero() {
                Ok(num / den)
            } else {
                Err(TraceError::NoAbsorption)
            }
        }
        _ => mean_absorption_depth(result, Axis::Z, T::lit(config.crystal.base_z_mm)),
    }
}

/// Scene parameters a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    TipAngle,
    Alpha,
    InsertionDepth,
    CrystalDiameter,
}

impl SweepParam {
    pub const NAMES: [&'static str; 4] = ["tip-angle", "alpha", "insertion-depth", "crystal-diameter"];

    pub fn column(self) -> &'static str {
        match self {
            SweepParam::TipAngle => "tip_full_angle_deg",
            SweepParam::Alpha => "absorption_per_mm",
            SweepParam::InsertionDepth => "insertion_depth_mm",
            SweepParam::CrystalDiameter => "crystal_diameter_mm",
        }
    }

    pub fn apply(self, config: &mut SceneConfig, value: f64) {
        match self {
            SweepParam::TipAngle => config.tip_full_angle_deg = value,
            SweepParam::Alpha => config.crystal.absorption_per_mm = value,
            SweepParam::InsertionDepth => config.crystal.insertion_depth_mm = Some(value),
            SweepParam::CrystalDiameter => config.crystal.diameter_mm = value,
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "tip-angle" => SweepParam::TipAngle,
            "alpha" => SweepParam::Alpha,
            "insertion-depth" => SweepParam::InsertionDepth,
            "crystal-diameter" => SweepParam::CrystalDiameter,
            _ => {
                return Err(format!(
                    "`{s}` is not sweepable (expected one of: {})",
                    Self::NAMES.join(", ")
                ))
            }
        })
    }
}

/// `steps` evenly spaced values from `from` to `to` inclusive.
pub fn linspace(from: f64, to: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![from],
        _ => (0..steps)
            .map(|i| from + (to - from) * i as f64 / (steps - 1) as f64)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linspace_endpoints() {
        assert_eq!(linspace(1.0, 4.0, 4), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(linspace(2.0, 9.0, 1), vec![2.0]);
        assert!(linspace(0.0, 1.0, 0).is_empty());
    }

    #[test]
    fn sweep_params_parse_and_apply() {
        let mut c = SceneConfig::new(Configuration::Invasive, crate::scene::TipStyle::Wedge);
        for (name, v) in SweepParam::NAMES.iter().zip([50.0, 3.0, 5.5, 9.0]) {
            name.parse::<SweepParam>().unwrap().apply(&mut c, v);
        }
        assert_eq!(c.tip_full_angle_deg, 50.0);
        assert_eq!(c.crystal.absorption_per_mm, 3.0);
        assert_eq!(c.crystal.insertion_depth_mm, Some(5.5));
        assert_eq!(c.crystal.diameter_mm, 9.0);
        assert!("rod-length".parse::<SweepParam>().is_err());
    }
}
