//! Regular voxel grid of absorbed optical power density (W·mm⁻³) with a
//! per-voxel region tag, plus the `VGD1` binary file format.
//!
//! `VGD1` layout (little-endian): magic `VGD1`; `u32` nx, ny, nz; `f64` origin
//! x, y, z (mm); `f64` pitch (mm); one `u8` region tag per voxel; one `f64`
//! value per voxel. Voxels are ordered x-fastest, z-slowest.

use std::io::{Read, Write};

use thiserror::Error;

use crate::geom::{Aabb, Axis, Vec3};
use crate::num::Real;
use crate::scene::{RegionTag, Scene};

pub const VGD1_MAGIC: &[u8; 4] = b"VGD1";

#[derive(Debug, Error)]
pub enum GridError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed VGD1 data: {0}")]
    Malformed(String),
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("region `{0}` has no voxels")]
    RegionEmpty(&'static str),
    #[error("region `{0}` holds no power to normalize")]
    NothingToNormalize(&'static str),
}

/// Placement and resolution of a voxel grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec<T> {
    pub origin: Vec3<T>,
    pub dims: [usize; 3],
    pub pitch: T,
}

impl<T: Real> GridSpec<T> {
    /// Smallest grid of cubic voxels anchored at `bbox.min` that covers `bbox`.
    pub fn covering(bbox: Aabb<T>, pitch: T) -> Result<Self, GridError> {
        if !(pitch > T::zero()) {
            return Err(GridError::Invalid("pitch must be positive".into()));
        }
        let e = bbox.extent();
        let n = |len: T| -> usize {
            let cells = (len / pitch - T::lit(1e-9)).ceil().to_usize().unwrap_or(1);
            cells.max(1)
        };
        Ok(Self {
            origin: bbox.min,
            dims: [n(e.x), n(e.y), n(e.z)],
            pitch,
        })
    }

    pub fn bbox(&self) -> Aabb<T> {
        let ext = Vec3::new(
            self.pitch * T::lit(self.dims[0] as f64),
            self.pitch * T::lit(self.dims[1] as f64),
            self.pitch * T::lit(self.dims[2] as f64),
        );
        Aabb::new(self.origin, self.origin + ext)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid<T> {
    pub origin: Vec3<T>,
    pub dims: [usize; 3],
    pub pitch: T,
    pub values: Vec<T>,
    pub region: Vec<RegionTag>,
}

impl<T: Real> VoxelGrid<T> {
    pub fn zeros(spec: GridSpec<T>) -> Self {
        Self {
            origin: spec.origin,
            dims: spec.dims,
            pitch: spec.pitch,
            values: vec![T::zero(); spec.len()],
            region: vec![RegionTag::Air; spec.len()],
        }
    }

    /// Empty grid whose region mask classifies each voxel centre against `scene`.
    pub fn for_scene(spec: GridSpec<T>, scene: &Scene<T>) -> Self {
        let mut g = Self::zeros(spec);
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                for i in 0..g.dims[0] {
                    let idx = g.index(i, j, k);
                    g.region[idx] = scene.contains(g.center(i, j, k));
                }
            }
        }
        g
    }

    pub fn spec(&self) -> GridSpec<T> {
        GridSpec {
            origin: self.origin,
            dims: self.dims,
            pitch: self.pitch,
        }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3<T> {
        let h = T::lit(0.5);
        self.origin
            + Vec3::new(
                (T::lit(i as f64) + h) * self.pitch,
                (T::lit(j as f64) + h) * self.pitch,
                (T::lit(k as f64) + h) * self.pitch,
            )
    }

    pub fn voxel_volume(&self) -> T {
        self.pitch * self.pitch * self.pitch
    }

    /// Voxel containing `p`, clamped onto the grid.
    pub fn voxel_of(&self, p: Vec3<T>) -> [usize; 3] {
        let g = (p - self.origin) / self.pitch;
        let clamp = |v: T, n: usize| -> usize {
            let f = v.floor();
            if f <= T::zero() {
                0
            } else {
                f.to_usize().unwrap_or(n - 1).min(n - 1)
            }
        };
        [
            clamp(g.x, self.dims[0]),
            clamp(g.y, self.dims[1]),
            clamp(g.z, self.dims[2]),
        ]
    }

    /// Σ value · pitch³ over all voxels (W).
    pub fn total(&self) -> T {
        self.values.iter().copied().sum::<T>() * self.voxel_volume()
    }

    /// Σ value · pitch³ over voxels tagged `tag` (W).
    pub fn region_integral(&self, tag: RegionTag) -> T {
        self.values
            .iter()
            .zip(&self.region)
            .filter(|(_, r)| **r == tag)
            .map(|(v, _)| *v)
            .sum::<T>()
            * self.voxel_volume()
    }

    pub fn region_count(&self, tag: RegionTag) -> usize {
        self.region.iter().filter(|r| **r == tag).count()
    }

    pub fn scale(&mut self, factor: T) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    /// Copy rescaled so the power inside `tag` integrates to 1 W.
    pub fn normalized_to_region(&self, tag: RegionTag) -> Result<Self, GridError> {
        if self.region_count(tag) == 0 {
            return Err(GridError::RegionEmpty(tag.name()));
        }
        let total = self.region_integral(tag);
        if !(total > T::zero()) {
            return Err(GridError::NothingToNormalize(tag.name()));
        }
        let mut g = self.clone();
        g.scale(T::one() / total);
        Ok(g)
    }

    /// Uniform density over `tag` integrating to 1 W; zero elsewhere.
    pub fn uniform_over(&self, tag: RegionTag) -> Result<Self, GridError> {
        let n = self.region_count(tag);
        if n == 0 {
            return Err(GridError::RegionEmpty(tag.name()));
        }
        let density = T::one() / (T::lit(n as f64) * self.voxel_volume());
        let mut g = self.clone();
        for (v, r) in g.values.iter_mut().zip(&g.region) {
            *v = if *r == tag { density } else { T::zero() };
        }
        Ok(g)
    }

    /// Adds `other` voxel by voxel; grids must share their layout.
    pub fn accumulate(&mut self, other: &Self) {
        assert_eq!(self.dims, other.dims, "grid layout mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
    }

    /// Deposits the Beer–Lambert loss of a ray segment into the voxels it
    /// crosses. Each voxel receives `weight·(e^{-αt₀} − e^{-αt₁})` for its
    /// sub-segment `[t₀, t₁]`. Returns the total deposited power.
    pub fn deposit_segment(&mut self, start: Vec3<T>, dir: Vec3<T>, length: T, alpha: T, weight: T) -> T {
        let inv_vol = T::one() / self.voxel_volume();
        if alpha.is_infinite() {
            let [i, j, k] = self.voxel_of(start);
            let idx = self.index(i, j, k);
            self.values[idx] += weight * inv_vol;
            return weight;
        }
        if !(alpha > T::zero()) || !(length > T::zero()) || !(weight > T::zero()) {
            return T::zero();
        }
        let g0 = (start - self.origin) / self.pitch;
        let mut cell = self.voxel_of(start);
        let mut t_max = [T::infinity(); 3];
        let mut t_delta = [T::infinity(); 3];
        let mut step = [0isize; 3];
        for a in Axis::ALL {
            let ai = a.index();
            let d = dir.axis(a);
            if d > T::zero() {
                step[ai] = 1;
                t_delta[ai] = self.pitch / d;
                t_max[ai] = (T::lit((cell[ai] + 1) as f64) - g0.axis(a)) * self.pitch / d;
            } else if d < T::zero() {
                step[ai] = -1;
                t_delta[ai] = -self.pitch / d;
                t_max[ai] = (g0.axis(a) - T::lit(cell[ai] as f64)) * self.pitch / -d;
            }
            if t_max[ai] < T::zero() {
                t_max[ai] = T::zero();
            }
        }

        let mut t = T::zero();
        let mut surviving = weight; // weight · e^{-α t}
        let mut deposited = T::zero();
        loop {
            let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            let t_next = t_max[a].min(length);
            let dep = surviving * -(-alpha * (t_next - t)).exp_m1();
            let idx = self.index(cell[0], cell[1], cell[2]);
            let last = t_next >= length;
            let dep = if last {
                // close the telescoping sum exactly
                (weight * -(-alpha * length).exp_m1() - deposited).max(T::zero())
            } else {
                dep
            };
            self.values[idx] += dep * inv_vol;
            deposited += dep;
            if last {
                break;
            }
            surviving = weight * (-alpha * t_next).exp();
            t = t_next;
            let next = cell[a] as isize + step[a];
            if next < 0 || next >= self.dims[a] as isize {
                // segment leaves the grid by rounding; remainder stays in this voxel
                let rest = (weight * -(-alpha * length).exp_m1() - deposited).max(T::zero());
                self.values[idx] += rest * inv_vol;
                deposited += rest;
                break;
            }
            cell[a] = next as usize;
            t_max[a] += t_delta[a];
        }
        deposited
    }

    /// Power-weighted mean voxel-centre coordinate along `axis`.
    pub fn centroid(&self, axis: Axis) -> Option<T> {
        let mut num = T::zero();
        let mut den = T::zero();
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    let v = self.values[self.index(i, j, k)];
                    if v != T::zero() {
                        num += v * self.center(i, j, k).axis(axis);
                        den += v;
                    }
                }
            }
        }
        (den > T::zero()).then(|| num / den)
    }

    /// Sums values along `axis` and returns the 2-D map with its two remaining
    /// axes `(a, b)` as `(map[b][a], dims_a, dims_b)`. Σ map · pitch³ = total().
    pub fn project(&self, axis: Axis) -> (Vec<Vec<T>>, [Axis; 2]) {
        let rest = match axis {
            Axis::X => [Axis::Y, Axis::Z],
            Axis::Y => [Axis::X, Axis::Z],
            Axis::Z => [Axis::X, Axis::Y],
        };
        let (na, nb) = (self.dims[rest[0].index()], self.dims[rest[1].index()]);
        let mut map = vec![vec![T::zero(); na]; nb];
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    let ijk = [i, j, k];
                    let (a, b) = (ijk[rest[0].index()], ijk[rest[1].index()]);
                    map[b][a] += self.values[self.index(i, j, k)];
                }
            }
        }
        (map, rest)
    }

    /// Copy with `f(voxel centre)` multiplied into every value.
    pub fn weighted_by(&self, f: impl Fn(Vec3<T>) -> T) -> Self {
        let mut g = self.clone();
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    let idx = self.index(i, j, k);
                    if g.values[idx] != T::zero() {
                        g.values[idx] *= f(self.center(i, j, k));
                    }
                }
            }
        }
        g
    }

    pub fn write_vgd1<W: Write>(&self, mut w: W) -> Result<(), GridError> {
        let mut buf = Vec::with_capacity(48 + self.values.len() * 9);
        buf.extend_from_slice(VGD1_MAGIC);
        for d in self.dims {
            let d = u32::try_from(d).map_err(|_| GridError::Invalid("dimension exceeds u32".into()))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in self.origin.to_f64() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.pitch.to_f64_lossy().to_le_bytes());
        buf.extend(self.region.iter().map(|r| r.code()));
        for v in &self.values {
            buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_vgd1<R: Read>(mut r: R) -> Result<Self, GridError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != VGD1_MAGIC {
            return Err(GridError::Malformed("bad magic".into()));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = cur.u32()? as usize;
            if *d == 0 {
                return Err(GridError::Malformed("zero dimension".into()));
            }
        }
        let origin = Vec3::from_f64([cur.f64()?, cur.f64()?, cur.f64()?]);
        let pitch = cur.f64()?;
        if !(pitch > 0.0 && pitch.is_finite()) {
            return Err(GridError::Malformed("pitch must be positive".into()));
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| GridError::Malformed("dimensions overflow".into()))?;
        let region = cur
            .take(n)?
            .iter()
            .map(|c| RegionTag::from_code(*c).ok_or_else(|| GridError::Malformed(format!("unknown region tag {c}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let v = cur.f64()?;
            if !(v >= 0.0) {
                return Err(GridError::Malformed("negative or NaN voxel value".into()));
            }
            values.push(T::lit(v));
        }
        if cur.pos != bytes.len() {
            return Err(GridError::Malformed("trailing bytes".into()));
        }
        Ok(Self {
            origin,
            dims,
            pitch: T::lit(pitch),
            values,
            region,
        })
    }
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8], GridError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| GridError::Malformed("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32, GridError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, GridError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
