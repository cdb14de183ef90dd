//! Small 3-vector type used for ray positions, directions and surface normals.

use std::ops::{Add, AddAssign, Div, Index, Mul, Neg, Sub};

use crate::num::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn from_f64(v: [f64; 3]) -> Self {
        Self::new(T::lit(v[0]), T::lit(v[1]), T::lit(v[2]))
    }

    pub fn to_f64(self) -> [f64; 3] {
        [
            self.x.to_f64_lossy(),
            self.y.to_f64_lossy(),
            self.z.to_f64_lossy(),
        ]
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> T {
        self.dot(self)
    }

    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    /// Unit vector in the same direction, or `None` for a zero or non-finite vector.
    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        if n > T::zero() && n.is_finite() {
            Some(self / n)
        } else {
            None
        }
    }

    pub fn axis(self, axis: Axis) -> T {
        match axis {
            Axis::X => self.x,
            Axis::Y => self.y,
            Axis::Z => self.z,
        }
    }

    /// Distance from the z axis.
    pub fn radial(self) -> T {
        self.x.hypot(self.y)
    }

    /// Mirror reflection of a direction about a surface with unit normal `n`.
    pub fn reflect(self, n: Self) -> Self {
        self - n * (lit2::<T>() * self.dot(n))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

#[inline]
fn lit2<T: Real>() -> T {
    T::one() + T::one()
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> AddAssign for Vec3<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T: Real> Div<T> for Vec3<T> {
    type Output = Self;
    fn div(self, s: T) -> Self {
        Self::new(self.x / s, self.y / s, self.z / s)
    }
}

impl<T> Index<Axis> for Vec3<T> {
    type Output = T;
    fn index(&self, axis: Axis) -> &T {
        match axis {
            Axis::X => &self.x,
            Axis::Y => &self.y,
            Axis::Z => &self.z,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(format!("unknown axis `{other}`")),
        }
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb<T> {
    pub min: Vec3<T>,
    pub max: Vec3<T>,
}

impl<T: Real> Aabb<T> {
    pub fn new(min: Vec3<T>, max: Vec3<T>) -> Self {
        Self { min, max }
    }

    pub fn union(self, o: Self) -> Self {
        Self::new(
            Vec3::new(
                self.min.x.min(o.min.x),
                self.min.y.min(o.min.y),
                self.min.z.min(o.min.z),
            ),
            Vec3::new(
                self.max.x.max(o.max.x),
                self.max.y.max(o.max.y),
                self.max.z.max(o.max.z),
            ),
        )
    }

    pub fn padded(self, pad: T) -> Self {
        let p = Vec3::new(pad, pad, pad);
        Self::new(self.min - p, self.max + p)
    }

    pub fn contains(&self, p: Vec3<T>) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    /// True when the interiors overlap by more than `tol` along every axis.
    pub fn overlaps(&self, o: &Self, tol: T) -> bool {
        Axis::ALL.iter().all(|&a| {
            let lo = self.min.axis(a).max(o.min.axis(a));
            let hi = self.max.axis(a).min(o.max.axis(a));
            hi - lo > tol
        })
    }

    pub fn extent(&self) -> Vec3<T> {
        self.max - self.min
    }

    /// Parametric interval `[t0, t1]` of a ray inside the box, if any.
    pub fn ray_interval(&self, origin: Vec3<T>, dir: Vec3<T>) -> Option<(T, T)> {
        let mut t0 = T::neg_infinity();
        let mut t1 = T::infinity();
        for a in Axis::ALL {
            let o = origin.axis(a);
            let d = dir.axis(a);
            let (lo, hi) = (self.min.axis(a), self.max.axis(a));
            if d == T::zero() {
                if o < lo || o > hi {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((lo - o) / d, (hi - o) / d);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_and_reflect() {
        let x = Vec3::<f64>::new(1.0, 0.0, 0.0);
        let y = Vec3::new(0.0, 1.0, 0.0);
        assert_eq!(x.cross(y), Vec3::new(0.0, 0.0, 1.0));
        let d = Vec3::<f64>::new(1.0, 0.0, -1.0).normalized().unwrap();
        let r = d.reflect(Vec3::new(0.0, 0.0, 1.0));
        assert!((r.z - d.z.abs()).abs() < 1e-15);
        assert!(Vec3::<f64>::zero().normalized().is_none());
    }

    #[test]
    fn box_interval() {
        let b = Aabb::new(Vec3::<f64>::zero(), Vec3::new(1.0, 1.0, 1.0));
        let (t0, t1) = b
            .ray_interval(Vec3::new(0.5, 0.5, -1.0), Vec3::new(0.0, 0.0, 1.0))
            .unwrap();
        assert_eq!((t0, t1), (1.0, 2.0));
        assert!(b
            .ray_interval(Vec3::new(2.0, 0.5, -1.0), Vec3::new(0.0, 0.0, 1.0))
            .is_none());
    }
}
