//! Monte Carlo photon transport: Fresnel reflection/refraction with total
//! internal reflection, continuous Beer–Lambert deposition into a voxel grid,
//! and a power budget (absorbed, escaped, retro-reflected, detected, terminated).
//!
//! Rays are processed in fixed-size batches; batch `b` always draws from
//! random stream `(seed, b)`. Workers own contiguous runs of batches and their
//! partial results are merged pairwise in a fixed order, so a given
//! `(seed, workers)` pair reproduces bit-for-bit.

use rand::Rng;
use thiserror::Error;

use crate::geom::{Axis, Vec3};
use crate::grid::{GridSpec, VoxelGrid};
use crate::num::Real;
use crate::optics::fresnel;
use crate::scene::{RegionTag, Scene, SceneError, SURFACE_EPS};
use crate::source::{rng_stream, RaySource};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("grid too small: {0} region extends beyond the voxel grid")]
    GridTooSmall(&'static str),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("no absorbed power")]
    NoAbsorption,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceOptions {
    pub n_rays: u64,
    pub seed: u64,
    pub workers: usize,
    pub batch_size: u64,
    /// Russian roulette starts once a ray's weight falls below this fraction of its initial weight.
    pub weight_cutoff: f64,
    pub survival_probability: f64,
    pub max_bounces: u32,
}

impl TraceOptions {
    pub fn new(n_rays: u64, seed: u64) -> Self {
        Self {
            n_rays,
            seed,
            workers: 1,
            batch_size: 4096,
            weight_cutoff: 1e-4,
            survival_probability: 0.5,
            max_bounces: 10_000,
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceResult<T> {
    pub grid: VoxelGrid<T>,
    pub emitted_w: T,
    pub absorbed_w: T,
    pub escaped_w: T,
    pub retro_reflected_w: T,
    pub detector_w: T,
    /// Net weight removed by roulette and the bounce limit. Roulette survivors
    /// borrow weight, so this can be slightly negative; its expectation is the
    /// bounce-limit loss.
    pub terminated_w: T,
    pub bounce_limited_w: T,
    pub rays_traced: u64,
    pub seed: u64,
    pub workers: usize,
    pub config_hash: String,
    pub warnings: Vec<String>,
    absorbed_sq: T,
    detector_sq: T,
}

impl<T: Real> TraceResult<T> {
    fn empty(grid: VoxelGrid<T>) -> Self {
        Self {
            grid,
            emitted_w: T::zero(),
            absorbed_w: T::zero(),
            escaped_w: T::zero(),
            retro_reflected_w: T::zero(),
            detector_w: T::zero(),
            terminated_w: T::zero(),
            bounce_limited_w: T::zero(),
            rays_traced: 0,
            seed: 0,
            workers: 1,
            config_hash: String::new(),
            warnings: Vec::new(),
            absorbed_sq: T::zero(),
            detector_sq: T::zero(),
        }
    }

    fn merge(&mut self, other: &Self) {
        self.grid.accumulate(&other.grid);
        self.emitted_w += other.emitted_w;
        self.absorbed_w += other.absorbed_w;
        self.escaped_w += other.escaped_w;
        self.retro_reflected_w += other.retro_reflected_w;
        self.detector_w += other.detector_w;
        self.terminated_w += other.terminated_w;
        self.bounce_limited_w += other.bounce_limited_w;
        self.rays_traced += other.rays_traced;
        self.absorbed_sq += other.absorbed_sq;
        self.detector_sq += other.detector_sq;
    }

    /// Sum of all sinks; equals `emitted_w` to rounding.
    pub fn budget_total(&self) -> T {
        self.absorbed_w + self.escaped_w + self.retro_reflected_w + self.detector_w + self.terminated_w
    }

    /// Relative energy-conservation error of the budget.
    pub fn conservation_error(&self) -> T {
        ((self.budget_total() - self.emitted_w) / self.emitted_w).abs()
    }

    pub fn absorbed_fraction(&self) -> T {
        self.absorbed_w / self.emitted_w
    }

    pub fn detector_fraction(&self) -> T {
        self.detector_w / self.emitted_w
    }

    fn std_error(&self, sum: T, sum_sq: T) -> T {
        let n = T::lit(self.rays_traced as f64);
        if self.rays_traced < 2 {
            return T::zero();
        }
        let mean = sum / n;
        let var = ((sum_sq / n - mean * mean) * n / (n - T::one())).max(T::zero());
        (var / n).sqrt() / (self.emitted_w / n)
    }

    /// One-sigma statistical error of `absorbed_fraction`.
    pub fn absorbed_fraction_std_error(&self) -> T {
        self.std_error(self.absorbed_w, self.absorbed_sq)
    }

    /// One-sigma statistical error of `detector_fraction`.
    pub fn detector_fraction_std_error(&self) -> T {
        self.std_error(self.detector_w, self.detector_sq)
    }
}

/// Grid covering the crystal region of `scene` at `pitch`.
pub fn crystal_grid_spec<T: Real>(scene: &Scene<T>, pitch: T) -> Result<GridSpec<T>, TraceError> {
    let bbox = scene
        .region_bbox(RegionTag::Crystal)
        .ok_or(TraceError::InvalidArgument("scene has no crystal region".into()))?;
    GridSpec::covering(bbox, pitch).map_err(|e| TraceError::InvalidArgument(e.to_string()))
}

/// Traces `opts.n_rays` rays from `source` through `scene`.
pub fn trace<T: Real, S: RaySource<T> + ?Sized>(
    scene: &Scene<T>,
    source: &S,
    grid_spec: GridSpec<T>,
    opts: &TraceOptions,
    config_hash: &str,
) -> Result<TraceResult<T>, TraceError> {
    if opts.n_rays == 0 {
        return Err(TraceError::InvalidArgument("ray count must be at least 1".into()));
    }
    if opts.workers == 0 || opts.batch_size == 0 {
        return Err(TraceError::InvalidArgument("workers and batch size must be at least 1".into()));
    }
    if !(opts.survival_probability > 0.0 && opts.survival_probability <= 1.0) {
        return Err(TraceError::InvalidArgument("survival probability must lie in (0, 1]".into()));
    }
    let covered = grid_spec.bbox().padded(T::lit(1e-9));
    for s in &scene.solids {
        let sink = matches!(s.tag, RegionTag::Emitter | RegionTag::Detector);
        if s.material.is_absorbing() && !sink && !(covered.contains(s.bbox.min) && covered.contains(s.bbox.max)) {
            return Err(TraceError::GridTooSmall(s.tag.name()));
        }
    }

    let template = VoxelGrid::for_scene(grid_spec, scene);
    let n_batches = opts.n_rays.div_ceil(opts.batch_size);
    let workers = (opts.workers as u64).min(n_batches).max(1) as usize;
    let weight = source.ray_weight(opts.n_rays);

    let run_worker = |w: usize| -> Result<TraceResult<T>, TraceError> {
        let lo = n_batches * w as u64 / workers as u64;
        let hi = n_batches * (w as u64 + 1) / workers as u64;
        let mut acc = TraceResult::empty(template.clone());
        for b in lo..hi {
            let mut rng = rng_stream(opts.seed, b);
            let first = b * opts.batch_size;
            let last = (first + opts.batch_size).min(opts.n_rays);
            for _ in first..last {
                match source.launch(&mut rng, weight) {
                    Some(ray) => trace_ray(scene, ray, opts, &mut rng, &mut acc)?,
                    None => {
                        acc.emitted_w += weight;
                        acc.retro_reflected_w += weight;
                        acc.rays_traced += 1;
                    }
                }
            }
        }
        Ok(acc)
    };

    let mut parts: Vec<TraceResult<T>> = if workers == 1 {
        vec![run_worker(0)?]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers).map(|w| s.spawn(move || run_worker(w))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("trace worker panicked"))
                .collect::<Result<Vec<_>, _>>()
        })?
    };

    // fixed pairwise merge tree
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.merge(&b);
            }
            next.push(a);
        }
        parts = next;
    }
    let mut result = parts.pop().expect("at least one worker");
    result.seed = opts.seed;
    result.workers = workers;
    result.config_hash = config_hash.to_string();
    if result.bounce_limited_w > result.emitted_w * T::lit(1e-3) {
        result.warnings.push(format!(
            "nonconvergence: bounce limit hit for {:.4}% of emitted power",
            100.0 * (result.bounce_limited_w / result.emitted_w).to_f64_lossy()
        ));
    }
    Ok(result)
}

fn trace_ray<T: Real, R: Rng>(
    scene: &Scene<T>,
    mut ray: crate::scene::Ray<T>,
    opts: &TraceOptions,
    rng: &mut R,
    acc: &mut TraceResult<T>,
) -> Result<(), TraceError> {
    let initial = ray.weight;
    let cutoff = initial * T::lit(opts.weight_cutoff);
    let survive = opts.survival_probability;
    let boost = T::one() / T::lit(survive);
    let mut absorbed_here = T::zero();
    let mut detected_here = T::zero();
    let mut bounces = 0u32;
    acc.emitted_w += initial;
    acc.rays_traced += 1;

    loop {
        let Some(hit) = scene.intersect(&ray)? else {
            acc.escaped_w += ray.weight;
            break;
        };
        let medium = scene.material(hit.before);
        let alpha = medium.absorption_coefficient;
        if alpha > T::zero() && alpha.is_finite() {
            let dep = acc
                .grid
                .deposit_segment(ray.origin, ray.direction, hit.distance, alpha, ray.weight);
            acc.absorbed_w += dep;
            absorbed_here += dep;
            ray.weight -= dep;
        }

        bounces += 1;
        if bounces >= opts.max_bounces {
            acc.terminated_w += ray.weight;
            acc.bounce_limited_w += ray.weight;
            break;
        }

        if hit.edge {
            ray.origin = hit.point + ray.direction * T::lit(SURFACE_EPS);
            continue;
        }

        let next = scene.material(hit.after);
        if next.is_perfect_absorber() {
            match hit.region_tag_after {
                RegionTag::Emitter => acc.retro_reflected_w += ray.weight,
                RegionTag::Detector => {
                    acc.detector_w += ray.weight;
                    detected_here += ray.weight;
                }
                _ => {
                    let dep = acc.grid.deposit_segment(hit.point, ray.direction, T::zero(), T::infinity(), ray.weight);
                    acc.absorbed_w += dep;
                    absorbed_here += dep;
                }
            }
            break;
        }

        let f = fresnel(medium.refractive_index, next.refractive_index, -ray.direction.dot(hit.normal));
        let reflect = f.is_tir() || (f.reflectance > T::zero() && T::lit(rng.gen::<f64>()) < f.reflectance);
        ray.direction = if reflect {
            ray.direction.reflect(hit.normal)
        } else {
            f.transmit_direction(ray.direction, hit.normal)
                .expect("refraction exists when not totally reflected")
        };
        ray.origin = hit.point;

        if ray.weight < cutoff {
            if rng.gen::<f64>() < survive {
                acc.terminated_w -= ray.weight * (boost - T::one());
                ray.weight *= boost;
            } else {
                acc.terminated_w += ray.weight;
                break;
            }
        }
    }
    acc.absorbed_sq += absorbed_here * absorbed_here;
    acc.detector_sq += detected_here * detected_here;
    Ok(())
}

/// Power-weighted mean deposition depth along `axis`, measured from the
/// entry-face coordinate `entry` in the direction of increasing `axis`.
pub fn mean_absorption_depth<T: Real>(result: &TraceResult<T>, axis: Axis, entry: T) -> Result<T, TraceError> {
    if !(result.absorbed_w > T::zero()) {
        return Err(TraceError::NoAbsorption);
    }
    grid_mean_depth(&result.grid, axis, entry)
}

/// [`mean_absorption_depth`] for a bare grid.
pub fn grid_mean_depth<T: Real>(grid: &VoxelGrid<T>, axis: Axis, entry: T) -> Result<T, TraceError> {
    grid.centroid(axis).map(|c| c - entry).ok_or(TraceError::NoAbsorption)
}

/// Deposition centroid as a point (diagnostic).
pub fn deposition_centroid<T: Real>(grid: &VoxelGrid<T>) -> Option<Vec3<T>> {
    Some(Vec3::new(grid.centroid(Axis::X)?, grid.centroid(Axis::Y)?, grid.centroid(Axis::Z)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_scene, Configuration, Material, Solid, SceneConfig, TipStyle};
    use crate::source::{CollimatedBeam, LedSource};

    /// Normal-incidence pencil beam just below a slab of thickness `t` and absorption `alpha`.
    fn slab_scene(alpha: f64, n_slab: f64, n_outside: f64, t: f64) -> (Scene<f64>, CollimatedBeam<f64>) {
        let outside = Material::new("outer", n_outside, 0.0).unwrap();
        let slab = Material::new("slab", n_slab, alpha).unwrap();
        let solids = vec![
            Solid::aa_box(Vec3::new(-1.0, -1.0, -0.5), Vec3::new(1.0, 1.0, 0.0), outside, RegionTag::Coupling),
            Solid::aa_box(Vec3::new(-1.0, -1.0, 0.0), Vec3::new(1.0, 1.0, t), slab, RegionTag::Crystal),
        ];
        let scene = Scene::from_solids(solids, Material::new("ambient", n_outside, 0.0).unwrap()).unwrap();
        let src = CollimatedBeam {
            origin: Vec3::new(0.05, 0.05, -0.25),
            direction: Vec3::new(0.0, 0.0, 1.0),
            power: 1.0,
            wavelength_nm: 570.0,
        };
        (scene, src)
    }

    #[test]
    fn zero_rays_rejected() {
        let (scene, src) = slab_scene(2.0, 1.0, 1.0, 1.0);
        let spec = crystal_grid_spec(&scene, 0.1).unwrap();
        let e = trace(&scene, &src, spec, &TraceOptions::new(0, 1), "").unwrap_err();
        assert!(matches!(e, TraceError::InvalidArgument(_)));
    }

    #[test]
    fn grid_must_cover_absorbers() {
        let (scene, src) = slab_scene(2.0, 1.0, 1.0, 1.0);
        let mut spec = crystal_grid_spec(&scene, 0.1).unwrap();
        spec.dims[2] -= 2;
        let e = trace(&scene, &src, spec, &TraceOptions::new(10, 1), "").unwrap_err();
        assert_eq!(e, TraceError::GridTooSmall("crystal"));
    }

    #[test]
    fn non_absorbing_scene_conserves_power() {
        let mut c = SceneConfig::new(Configuration::Invasive, TipStyle::Wedge);
        c.crystal.absorption_per_mm = 0.0;
        let scene: Scene<f64> = build_scene(&c).unwrap();
        let src = LedSource::for_scene(&scene, 1.0);
        let spec = crystal_grid_spec(&scene, 0.2).unwrap();
        let r = trace(&scene, &src, spec, &TraceOptions::new(2000, 3), "h").unwrap();
        assert_eq!(r.absorbed_w, 0.0);
        let rest = r.escaped_w + r.detector_w + r.retro_reflected_w + r.terminated_w;
        assert!(((rest - r.emitted_w) / r.emitted_w).abs() < 1e-9);
        assert!((r.emitted_w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn index_matched_slab_absorbs_closed_form_fraction() {
        let (scene, src) = slab_scene(2.0, 1.0, 1.0, 1.0);
        let spec = crystal_grid_spec(&scene, 0.1).unwrap();
        let r = trace(&scene, &src, spec, &TraceOptions::new(1000, 9), "").unwrap();
        let expect = 1.0 - (-2.0f64).exp();
        assert!((r.absorbed_fraction() - expect).abs() < 1e-12);
        assert!(r.conservation_error() < 1e-9);
        assert!(((r.grid.total() - r.absorbed_w) / r.absorbed_w).abs() < 1e-9);
    }

    #[test]
    fn worker_count_changes_only_rounding_and_same_workers_reproduce() {
        let scene: Scene<f64> = build_scene(&SceneConfig::new(Configuration::Butt, TipStyle::Flat)).unwrap();
        let src = LedSource::for_scene(&scene, 1.0);
        let spec = crystal_grid_spec(&scene, 0.25).unwrap();
        let mut opts = TraceOptions::new(6000, 11);
        opts.batch_size = 500;
        let a = trace(&scene, &src, spec, &opts, "").unwrap();
        let b = trace(&scene, &src, spec, &opts, "").unwrap();
        assert_eq!(a, b);
        let c = trace(&scene, &src, spec, &opts.clone().with_workers(3), "").unwrap();
        let d = trace(&scene, &src, spec, &opts.clone().with_workers(3), "").unwrap();
        assert_eq!(c, d);
        assert!(((a.absorbed_w - c.absorbed_w) / a.absorbed_w).abs() < 1e-12);
    }

    #[test]
    fn mean_depth_of_uniform_grid() {
        let mut g = VoxelGrid::<f64>::zeros(GridSpec {
            origin: Vec3::zero(),
            dims: [1, 1, 10],
            pitch: 0.1,
        });
        g.values.iter_mut().for_each(|v| *v = 1.0);
        assert!((grid_mean_depth(&g, Axis::Z, 0.0).unwrap() - 0.5).abs() < 1e-15);
        g.values.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(grid_mean_depth(&g, Axis::Z, 0.0), Err(TraceError::NoAbsorption));
    }
}
