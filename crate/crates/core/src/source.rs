//! Flat rectangular Lambertian LED emitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::Vec3;
use crate::num::Real;
use crate::optics::fresnel;
use crate::scene::{Ray, Scene};
use crate::spectrum::Spectrum;

/// Deterministic random stream for one work unit: the same `(seed, index)`
/// always yields the same sequence, independent of thread scheduling.
pub fn rng_stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Per-point seed for sweeps, derived from a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    use rand::RngCore;
    rng_stream(master, index ^ 0x5eed_0000_0000_0000).next_u64()
}

/// Anything that launches weighted rays.
pub trait RaySource<T: Real>: Sync {
    fn total_power(&self) -> T;
    fn sample_ray(&self, rng: &mut ChaCha8Rng, weight: T) -> Ray<T>;

    /// Draws a ray and passes it through the emitter's exit interface.
    /// `None` means the ray was reflected back into the emitter.
    fn launch(&self, rng: &mut ChaCha8Rng, weight: T) -> Option<Ray<T>> {
        Some(self.sample_ray(rng, weight))
    }

    /// Weight carried by each of `n_rays` rays; the weights sum to the total power.
    fn ray_weight(&self, n_rays: u64) -> T {
        self.total_power() / T::lit(n_rays as f64)
    }
}

/// Pencil beam: every ray starts at `origin` heading along `direction`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollimatedBeam<T> {
    pub origin: Vec3<T>,
    pub direction: Vec3<T>,
    pub power: T,
    pub wavelength_nm: T,
}

impl<T: Real> RaySource<T> for CollimatedBeam<T> {
    fn total_power(&self) -> T {
        self.power
    }

    fn sample_ray(&self, _rng: &mut ChaCha8Rng, weight: T) -> Ray<T> {
        Ray {
            origin: self.origin,
            direction: self.direction,
            weight,
            wavelength_nm: self.wavelength_nm,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LedSource<T> {
    /// Centre of the emitting face; the face normal is +z.
    pub face_center: Vec3<T>,
    /// Full width (x) and height (y) of the face, mm.
    pub face_extent: (T, T),
    pub total_power: T,
    pub emission: Spectrum<T>,
    /// (index the Lambertian profile refers to, index above the face).
    pub launch_indices: (T, T),
    cdf: Vec<T>,
}

impl<T: Real> RaySource<T> for LedSource<T> {
    fn total_power(&self) -> T {
        self.total_power
    }

    fn sample_ray(&self, rng: &mut ChaCha8Rng, weight: T) -> Ray<T> {
        LedSource::sample_ray(self, rng, weight)
    }

    fn launch(&self, rng: &mut ChaCha8Rng, weight: T) -> Option<Ray<T>> {
        let mut ray = LedSource::sample_ray(self, rng, weight);
        let (n1, n2) = self.launch_indices;
        if n1 == n2 {
            return Some(ray);
        }
        let normal = Vec3::new(T::zero(), T::zero(), -T::one());
        let f = fresnel(n1, n2, ray.direction.z);
        if f.is_tir() || T::lit(rng.gen::<f64>()) < f.reflectance {
            return None;
        }
        ray.direction = f.transmit_direction(ray.direction, normal)?;
        Some(ray)
    }
}

impl<T: Real> LedSource<T> {
    pub fn new(face_center: Vec3<T>, face_extent: (T, T), total_power: T, emission: Spectrum<T>) -> Self {
        assert!(total_power > T::zero(), "LED power must be positive");
        let cdf = emission.normalized_cdf();
        Self {
            face_center,
            face_extent,
            total_power,
            emission,
            launch_indices: (T::one(), T::one()),
            cdf,
        }
    }

    /// LED sitting on the emitter face of a built scene, with the bundled spectrum.
    pub fn for_scene(scene: &Scene<T>, total_power: T) -> Self {
        Self::new(scene.led_center, scene.led_extent, total_power, Spectrum::bundled_led())
            .with_launch_indices(scene.led_launch_indices.0, scene.led_launch_indices.1)
    }

    pub fn with_launch_indices(mut self, emission_index: T, medium_index: T) -> Self {
        self.launch_indices = (emission_index, medium_index);
        self
    }

    /// Uniform position on the face, cosine-weighted direction into the
    /// front hemisphere, wavelength drawn from the emission spectrum.
    pub fn sample_ray<R: Rng + ?Sized>(&self, rng: &mut R, weight: T) -> Ray<T> {
        let half = T::lit(0.5);
        let u: T = T::lit(rng.gen::<f64>()) - half;
        let v: T = T::lit(rng.gen::<f64>()) - half;
        let origin = self.face_center + Vec3::new(u * self.face_extent.0, v * self.face_extent.1, T::zero());

        let cos_theta = T::lit(rng.gen::<f64>()).sqrt();
        let sin_theta = (T::one() - cos_theta * cos_theta).max(T::zero()).sqrt();
        let phi = T::lit(2.0 * std::f64::consts::PI * rng.gen::<f64>());
        let direction = Vec3::new(sin_theta * phi.cos(), sin_theta * phi.sin(), cos_theta);

        let wavelength_nm = self.sample_wavelength(T::lit(rng.gen::<f64>()));
        Ray {
            origin,
            direction,
            weight,
            wavelength_nm,
        }
    }

    pub fn ray_weight(&self, n_rays: u64) -> T {
        RaySource::ray_weight(self, n_rays)
    }

    fn sample_wavelength(&self, u: T) -> T {
        let s = self.emission.samples();
        let i = self.cdf.partition_point(|c| *c < u).clamp(1, s.len() - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let f = if c1 > c0 { (u - c0) / (c1 - c0) } else { T::zero() };
        s[i - 1].0 + (s[i].0 - s[i - 1].0) * f
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn led() -> LedSource<f64> {
        LedSource::new(Vec3::new(1.0, -2.0, 3.0), (3.2, 2.6), 2.0, Spectrum::bundled_led())
    }

    #[test]
    fn same_stream_same_rays() {
        let s = led();
        let w = s.ray_weight(10);
        let a: Vec<_> = {
            let mut r = rng_stream(7, 3);
            (0..100).map(|_| s.sample_ray(&mut r, w)).collect()
        };
        let b: Vec<_> = {
            let mut r = rng_stream(7, 3);
            (0..100).map(|_| s.sample_ray(&mut r, w)).collect()
        };
        assert_eq!(a, b);
        let mut other = rng_stream(7, 4);
        assert_ne!(a[0], s.sample_ray(&mut other, w));
    }

    #[test]
    fn weights_are_divided_not_sampled() {
        let s = led();
        let n = 1000u64;
        let w = s.ray_weight(n);
        let total: f64 = (0..n).map(|_| w).sum();
        assert!((total - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rays_stay_on_face_and_in_front_hemisphere() {
        let s = led();
        let mut r = rng_stream(1, 0);
        for _ in 0..10_000 {
            let ray = s.sample_ray(&mut r, 1.0);
            assert!((ray.origin.x - 1.0).abs() <= 1.6 && (ray.origin.y + 2.0).abs() <= 1.3);
            assert_eq!(ray.origin.z, 3.0);
            assert!(ray.direction.z >= 0.0);
            assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
            assert!(ray.wavelength_nm >= 500.0 && ray.wavelength_nm <= 660.0);
        }
    }

    #[test]
    fn launch_from_air_narrows_cone_to_critical_angle() {
        let s = led().with_launch_indices(1.0, 1.458);
        let mut r = rng_stream(2, 0);
        let cos_c = (1.0 - 1.0 / (1.458f64 * 1.458)).sqrt();
        let (mut kept, n) = (0usize, 20_000);
        for _ in 0..n {
            if let Some(ray) = s.launch(&mut r, 1.0) {
                kept += 1;
                assert!(ray.direction.z >= cos_c - 1e-12);
                assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
            }
        }
        let frac = kept as f64 / n as f64;
        assert!(frac > 0.85 && frac < 0.97, "{frac}");
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(42, 0), derive_seed(42, 1));
        assert_eq!(derive_seed(42, 5), derive_seed(42, 5));
    }
}
