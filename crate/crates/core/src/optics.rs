//! Unpolarized Fresnel reflection and Snell refraction at a dielectric interface.

use crate::geom::Vec3;
use crate::num::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fresnel<T> {
    /// Power reflectance averaged over s and p polarizations.
    pub reflectance: T,
    /// Cosine of the refraction angle, `None` under total internal reflection.
    pub cos_transmitted: Option<T>,
    eta: T,
    cos_incident: T,
}

impl<T: Real> Fresnel<T> {
    pub fn transmittance(&self) -> T {
        T::one() - self.reflectance
    }

    pub fn is_tir(&self) -> bool {
        self.cos_transmitted.is_none()
    }

    /// Refracted direction for an incident unit `direction` hitting a surface
    /// whose unit `normal` points against it.
    pub fn transmit_direction(&self, direction: Vec3<T>, normal: Vec3<T>) -> Option<Vec3<T>> {
        let cos_t = self.cos_transmitted?;
        let d = direction * self.eta + normal * (self.eta * self.cos_incident - cos_t);
        // renormalize to keep |d| = 1 to rounding over many bounces
        d.normalized()
    }
}

/// Fresnel response going from index `n1` into `n2` at incidence cosine `cos_incident`.
pub fn fresnel<T: Real>(n1: T, n2: T, cos_incident: T) -> Fresnel<T> {
    let cos_i = cos_incident.min(T::one()).max(T::zero());
    let eta = n1 / n2;
    if n1 == n2 {
        return Fresnel {
            reflectance: T::zero(),
            cos_transmitted: Some(cos_i),
            eta,
            cos_incident: cos_i,
        };
    }
    let sin2_t = eta * eta * (T::one() - cos_i * cos_i);
    if sin2_t >= T::one() {
        return Fresnel {
            reflectance: T::one(),
            cos_transmitted: None,
            eta,
            cos_incident: cos_i,
        };
    }
    let cos_t = (T::one() - sin2_t).sqrt();
    let rs = (n1 * cos_i - n2 * cos_t) / (n1 * cos_i + n2 * cos_t);
    let rp = (n2 * cos_i - n1 * cos_t) / (n2 * cos_i + n1 * cos_t);
    let half = T::lit(0.5);
    Fresnel {
        reflectance: (half * (rs * rs + rp * rp)).min(T::one()),
        cos_transmitted: Some(cos_t),
        eta,
        cos_incident: cos_i,
    }
}
