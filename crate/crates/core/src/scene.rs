//! Optical geometry: LED die, coupling layer, quartz waveguide, gain crystal and
//! a virtual detector, each a convex solid (cylinder and/or half-spaces).
//!
//! Solids are ordered by precedence. Where two solids overlap the later one
//! owns the volume, so the crystal is listed before the waveguide and the
//! waveguide tip carves its way into it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Aabb, Vec3};
use crate::num::Real;

/// Crossings closer than this (mm) to the ray origin belong to the surface the
/// ray starts on. Events closer together than this are treated as one crossing.
pub const SURFACE_EPS: f64 = 1e-9;

/// Upper bound on solids per scene; keeps intersection allocation-free.
pub const MAX_SOLIDS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("degenerate ray: direction has zero length")]
    DegenerateRay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionTag {
    Air,
    Waveguide,
    Crystal,
    Coupling,
    Detector,
    /// The LED die. Light returning onto it is tallied as retro-reflected.
    Emitter,
}

impl RegionTag {
    pub fn code(self) -> u8 {
        match self {
            RegionTag::Air => 0,
            RegionTag::Waveguide => 1,
            RegionTag::Crystal => 2,
            RegionTag::Coupling => 3,
            RegionTag::Detector => 4,
            RegionTag::Emitter => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => RegionTag::Air,
            1 => RegionTag::Waveguide,
            2 => RegionTag::Crystal,
            3 => RegionTag::Coupling,
            4 => RegionTag::Detector,
            5 => RegionTag::Emitter,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionTag::Air => "air",
            RegionTag::Waveguide => "waveguide",
            RegionTag::Crystal => "crystal",
            RegionTag::Coupling => "coupling",
            RegionTag::Detector => "detector",
            RegionTag::Emitter => "emitter",
        }
    }
}

impl std::str::FromStr for RegionTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        [
            RegionTag::Air,
            RegionTag::Waveguide,
            RegionTag::Crystal,
            RegionTag::Coupling,
            RegionTag::Detector,
            RegionTag::Emitter,
        ]
        .into_iter()
        .find(|t| t.name() == s)
        .ok_or_else(|| format!("unknown region `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Material<T> {
    pub name: String,
    pub refractive_index: T,
    /// Beer–Lambert coefficient in mm⁻¹. `+inf` marks a perfect absorber.
    pub absorption_coefficient: T,
}

impl<T: Real> Material<T> {
    pub fn new(name: &str, refractive_index: T, absorption_coefficient: T) -> Result<Self, SceneError> {
        if !(refractive_index >= T::one()) || !refractive_index.is_finite() {
            return Err(SceneError::InvalidConfig(format!(
                "material `{name}`: refractive index must be >= 1"
            )));
        }
        if !(absorption_coefficient >= T::zero()) {
            return Err(SceneError::InvalidConfig(format!(
                "material `{name}`: absorption coefficient must be >= 0"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            refractive_index,
            absorption_coefficient,
        })
    }

    pub fn air() -> Self {
        Self::new("air", T::one(), T::zero()).unwrap()
    }

    pub fn is_absorbing(&self) -> bool {
        self.absorption_coefficient > T::zero()
    }

    pub fn is_perfect_absorber(&self) -> bool {
        self.absorption_coefficient.is_infinite()
    }
}

/// Closed half-space `normal · p <= offset`, `normal` unit length and outward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfSpace<T> {
    pub normal: Vec3<T>,
    pub offset: T,
}

impl<T: Real> HalfSpace<T> {
    pub fn new(normal: Vec3<T>, point_on_plane: Vec3<T>) -> Self {
        let normal = normal.normalized().expect("half-space normal must be nonzero");
        Self {
            normal,
            offset: normal.dot(point_on_plane),
        }
    }

    pub fn signed_distance(&self, p: Vec3<T>) -> T {
        self.normal.dot(p) - self.offset
    }
}

/// Infinite circular cylinder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cylinder<T> {
    pub center: Vec3<T>,
    pub axis: Vec3<T>,
    pub radius: T,
}

impl<T: Real> Cylinder<T> {
    fn radial_part(&self, v: Vec3<T>) -> Vec3<T> {
        v - self.axis * v.dot(self.axis)
    }

    pub fn outward_normal(&self, p: Vec3<T>) -> Vec3<T> {
        self.radial_part(p - self.center)
            .normalized()
            .unwrap_or(Vec3::new(T::one(), T::zero(), T::zero()))
    }

    pub fn contains(&self, p: Vec3<T>) -> bool {
        self.radial_part(p - self.center).norm_squared() <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolidKind {
    FiniteCylinder,
    Box,
    CylinderClippedByHalfSpaces,
}

/// Which bounding surface of a solid an interval endpoint lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Wall,
    Plane(usize),
}

#[derive(Debug, Clone, Copy)]
struct Crossing<T> {
    t: T,
    surface: Surface,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solid<T> {
    pub kind: SolidKind,
    pub cylinder: Option<Cylinder<T>>,
    pub planes: Vec<HalfSpace<T>>,
    pub material: Material<T>,
    pub tag: RegionTag,
    pub bbox: Aabb<T>,
}

impl<T: Real> Solid<T> {
    /// Cylinder of `radius` along +z from `z0` to `z1`.
    pub fn z_cylinder(radius: T, z0: T, z1: T, material: Material<T>, tag: RegionTag) -> Self {
        let o = T::zero();
        let one = T::one();
        Self {
            kind: SolidKind::FiniteCylinder,
            cylinder: Some(Cylinder {
                center: Vec3::zero(),
                axis: Vec3::new(o, o, one),
                radius,
            }),
            planes: vec![
                HalfSpace::new(Vec3::new(o, o, -one), Vec3::new(o, o, z0)),
                HalfSpace::new(Vec3::new(o, o, one), Vec3::new(o, o, z1)),
            ],
            material,
            tag,
            bbox: Aabb::new(Vec3::new(-radius, -radius, z0), Vec3::new(radius, radius, z1)),
        }
    }

    pub fn aa_box(min: Vec3<T>, max: Vec3<T>, material: Material<T>, tag: RegionTag) -> Self {
        let o = T::zero();
        let one = T::one();
        let planes = vec![
            HalfSpace::new(Vec3::new(-one, o, o), min),
            HalfSpace::new(Vec3::new(one, o, o), max),
            HalfSpace::new(Vec3::new(o, -one, o), min),
            HalfSpace::new(Vec3::new(o, one, o), max),
            HalfSpace::new(Vec3::new(o, o, -one), min),
            HalfSpace::new(Vec3::new(o, o, one), max),
        ];
        Self {
            kind: SolidKind::Box,
            cylinder: None,
            planes,
            material,
            tag,
            bbox: Aabb::new(min, max),
        }
    }

    pub fn contains(&self, p: Vec3<T>) -> bool {
        self.cylinder.map_or(true, |c| c.contains(p))
            && self.planes.iter().all(|h| h.signed_distance(p) <= T::zero())
    }

    pub fn surface_normal(&self, surface: Surface, p: Vec3<T>) -> Vec3<T> {
        match surface {
            Surface::Wall => self.cylinder.expect("wall surface on cylinder").outward_normal(p),
            Surface::Plane(i) => self.planes[i].normal,
        }
    }

    /// Entry and exit crossings of the infinite line `origin + t·dir`.
    fn interval(&self, origin: Vec3<T>, dir: Vec3<T>) -> Option<(Crossing<T>, Crossing<T>)> {
        let mut t_in = Crossing { t: T::neg_infinity(), surface: Surface::Wall };
        let mut t_out = Crossing { t: T::infinity(), surface: Surface::Wall };
        let tiny = T::lit(1e-300).max(T::min_positive_value());

        if let Some(c) = self.cylinder {
            let dp = c.radial_part(dir);
            let op = c.radial_part(origin - c.center);
            let a = dp.norm_squared();
            let cc = op.norm_squared() - c.radius * c.radius;
            if a <= tiny {
                if cc > T::zero() {
                    return None;
                }
            } else {
                let b = op.dot(dp);
                let disc = b * b - a * cc;
                if disc < T::zero() {
                    return None;
                }
                let sq = disc.sqrt();
                // numerically stable pair of roots
                let q = if b > T::zero() { -(b + sq) } else { -b + sq };
                let (mut r0, mut r1) = if q == T::zero() {
                    (T::zero(), T::zero())
                } else {
                    (q / a, cc / q)
                };
                if r0 > r1 {
                    std::mem::swap(&mut r0, &mut r1);
                }
                t_in = Crossing { t: r0, surface: Surface::Wall };
                t_out = Crossing { t: r1, surface: Surface::Wall };
            }
        }

        for (i, h) in self.planes.iter().enumerate() {
            let denom = h.normal.dot(dir);
            let dist = h.offset - h.normal.dot(origin);
            if denom.abs() <= tiny {
                if dist < T::zero() {
                    return None;
                }
                continue;
            }
            let t = dist / denom;
            if denom < T::zero() {
                if t > t_in.t {
                    t_in = Crossing { t, surface: Surface::Plane(i) };
                }
            } else if t < t_out.t {
                t_out = Crossing { t, surface: Surface::Plane(i) };
            }
        }
        (t_in.t < t_out.t).then_some((t_in, t_out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    pub direction: Vec3<T>,
    /// Statistical power carried, W.
    pub weight: T,
    pub wavelength_nm: T,
}

impl<T: Real> Ray<T> {
    pub fn new(origin: Vec3<T>, direction: Vec3<T>) -> Self {
        Self {
            origin,
            direction,
            weight: T::one(),
            wavelength_nm: T::zero(),
        }
    }

    pub fn at(&self, t: T) -> Vec3<T> {
        self.origin + self.direction * t
    }
}

/// Index of the owning solid, `None` for ambient air.
pub type Owner = Option<usize>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit<T> {
    pub distance: T,
    pub point: Vec3<T>,
    /// Unit normal oriented against the incoming ray.
    pub normal: Vec3<T>,
    pub before: Owner,
    pub after: Owner,
    pub region_tag_after: RegionTag,
    /// More than one surface was crossed within [`SURFACE_EPS`] (edge or apex).
    pub edge: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TipStyle {
    Flat,
    Wedge,
    Spear,
}

impl TipStyle {
    pub fn facet_count(self) -> usize {
        match self {
            TipStyle::Flat => 0,
            TipStyle::Wedge => 2,
            TipStyle::Spear => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Configuration {
    /// Shaped waveguide tip embedded in the crystal.
    Invasive,
    /// Flat waveguide end pressed against a solid crystal.
    Butt,
    /// Flat waveguide end facing an energy meter across an air gap.
    Meter,
}

#[derive(Debug, Clone)]
pub struct Scene<T> {
    pub solids: Vec<Solid<T>>,
    pub ambient: Material<T>,
    pub bounding_box: Aabb<T>,
    pub tip_style: TipStyle,
    /// Full angle between opposite tip facets in degrees (0 for flat).
    pub tip_full_angle_deg: T,
    pub configuration: Configuration,
    /// Apex (or flat end centre) of the waveguide, on the rod axis.
    pub apex: Vec3<T>,
    /// Height along the axis where the facets meet the shank.
    pub shank_end_z: T,
    /// Emitting face of the LED: centre and full extents (x, y).
    pub led_center: Vec3<T>,
    pub led_extent: (T, T),
    /// Index the Lambertian profile is specified in, and index of the medium
    /// directly above the emitting face.
    pub led_launch_indices: (T, T),
}

impl<T: Real> Scene<T> {
    /// Assembles a scene from explicit solids. `configuration`/tip metadata are
    /// informational; validation only checks bounds and detector uniqueness.
    pub fn from_solids(solids: Vec<Solid<T>>, ambient: Material<T>) -> Result<Self, SceneError> {
        if solids.is_empty() {
            return Err(SceneError::InvalidConfig("scene has no solids".into()));
        }
        let mut bbox = solids[0].bbox;
        for s in &solids {
            if !(s.bbox.min.is_finite() && s.bbox.max.is_finite()) {
                return Err(SceneError::InvalidConfig("unbounded solid".into()));
            }
            bbox = bbox.union(s.bbox);
        }
        if solids.len() > MAX_SOLIDS {
            return Err(SceneError::InvalidConfig(format!("more than {MAX_SOLIDS} solids")));
        }
        if solids.iter().filter(|s| s.tag == RegionTag::Detector).count() > 1 {
            return Err(SceneError::InvalidConfig("more than one detector".into()));
        }
        let bounding_box = bbox.padded(T::one());
        Ok(Self {
            solids,
            ambient,
            bounding_box,
            tip_style: TipStyle::Flat,
            tip_full_angle_deg: T::zero(),
            configuration: Configuration::Butt,
            apex: Vec3::zero(),
            shank_end_z: T::zero(),
            led_center: Vec3::zero(),
            led_extent: (T::zero(), T::zero()),
            led_launch_indices: (T::one(), T::one()),
        })
    }

    pub fn material(&self, owner: Owner) -> &Material<T> {
        owner.map_or(&self.ambient, |i| &self.solids[i].material)
    }

    pub fn tag(&self, owner: Owner) -> RegionTag {
        owner.map_or(RegionTag::Air, |i| self.solids[i].tag)
    }

    pub fn owner_at(&self, p: Vec3<T>) -> Owner {
        self.solids.iter().rposition(|s| s.contains(p))
    }

    /// Region tag of the highest-precedence solid containing `p`.
    pub fn contains(&self, p: Vec3<T>) -> RegionTag {
        self.tag(self.owner_at(p))
    }

    pub fn solids_tagged(&self, tag: RegionTag) -> impl Iterator<Item = &Solid<T>> {
        self.solids.iter().filter(move |s| s.tag == tag)
    }

    /// Bounding box of every solid carrying `tag`.
    pub fn region_bbox(&self, tag: RegionTag) -> Option<Aabb<T>> {
        self.solids_tagged(tag).map(|s| s.bbox).reduce(Aabb::union)
    }

    /// Nearest crossing along the ray at which the owning region changes.
    /// `None` means the ray leaves the scene through ambient air.
    pub fn intersect(&self, ray: &Ray<T>) -> Result<Option<Hit<T>>, SceneError> {
        let dir = ray.direction;
        if !(dir.norm_squared() > T::zero()) {
            return Err(SceneError::DegenerateRay);
        }
        let eps = T::lit(SURFACE_EPS);

        let n = self.solids.len();
        let mut intervals: [Option<(Crossing<T>, Crossing<T>)>; MAX_SOLIDS] = [None; MAX_SOLIDS];
        let mut event_buf = [(T::zero(), 0usize, false); 2 * MAX_SOLIDS];
        let mut n_events = 0;
        for (k, s) in self.solids.iter().enumerate() {
            if let Some((a, b)) = s.interval(ray.origin, dir) {
                if b.t > eps {
                    if a.t > eps {
                        event_buf[n_events] = (a.t, k, true);
                        n_events += 1;
                    }
                    event_buf[n_events] = (b.t, k, false);
                    n_events += 1;
                    intervals[k] = Some((a, b));
                }
            }
        }
        if n_events == 0 {
            return Ok(None);
        }
        let events = &mut event_buf[..n_events];
        // insertion sort: a handful of events
        for i in 1..events.len() {
            let mut j = i;
            while j > 0 && events[j - 1].0 > events[j].0 {
                events.swap(j - 1, j);
                j -= 1;
            }
        }
        let intervals = &intervals[..n];

        let owner_on = |t: T| -> Owner {
            intervals
                .iter()
                .rposition(|iv| iv.map_or(false, |(a, b)| a.t < t && t < b.t))
        };

        let mut seg_start = T::zero();
        let mut i = 0;
        while i < events.len() {
            let t_hit = events[i].0;
            let mut j = i + 1;
            while j < events.len() && events[j].0 - t_hit <= eps {
                j += 1;
            }
            let t_next = if j < events.len() { events[j].0 } else { t_hit + T::one() };
            let before = owner_on(T::lit(0.5) * (seg_start + t_hit));
            let after = owner_on(T::lit(0.5) * (events[j - 1].0 + t_next));
            if before != after {
                let cluster = &events[i..j];
                // Surface belongs to whichever owner has a crossing here; prefer the
                // higher-precedence one when both do (coincident faces).
                let pick = |owner: Owner, entering: bool| {
                    owner.and_then(|k| cluster.iter().find(|e| e.1 == k && e.2 == entering))
                };
                let (prefer_after, prefer_before) = (pick(after, true), pick(before, false));
                let chosen = match (prefer_after, prefer_before, after, before) {
                    (Some(a), Some(b), Some(ka), Some(kb)) => {
                        if ka > kb {
                            a
                        } else {
                            b
                        }
                    }
                    (Some(a), _, _, _) => a,
                    (None, Some(b), _, _) => b,
                    _ => &cluster[0],
                };
                let (t, k, entering) = *chosen;
                let (ia, ib) = intervals[k].expect("event solid has an interval");
                let surface = if entering { ia.surface } else { ib.surface };
                let point = ray.at(t);
                let mut normal = self.solids[k].surface_normal(surface, point);
                if normal.dot(dir) > T::zero() {
                    normal = -normal;
                }
                let edge = cluster.len() > 1 && {
                    let n0 = normal;
                    cluster.iter().any(|&(te, ke, ent)| {
                        let (ca, cb) = intervals[ke].unwrap();
                        let s = if ent { ca.surface } else { cb.surface };
                        let n = self.solids[ke].surface_normal(s, ray.at(te));
                        n.dot(n0).abs() < T::one() - T::lit(1e-9)
                    })
                };
                return Ok(Some(Hit {
                    distance: t,
                    point,
                    normal,
                    before,
                    after,
                    region_tag_after: self.tag(after),
                    edge,
                }));
            }
            seg_start = events[j - 1].0;
            i = j;
        }
        Ok(None)
    }

    /// Polylines where each tip facet meets the cylindrical shank (ellipse arcs),
    /// sampled with `samples` points around the rod.
    pub fn tip_boundary_curves(&self, samples: usize) -> Vec<Vec<Vec3<T>>> {
        let Some(rod) = self.solids.iter().find(|s| s.tag == RegionTag::Waveguide) else {
            return Vec::new();
        };
        let Some(cyl) = rod.cylinder else { return Vec::new() };
        let facets: Vec<&HalfSpace<T>> = rod
            .planes
            .iter()
            .filter(|h| h.normal.z > T::zero() && h.normal.z < T::one() - T::lit(1e-12))
            .collect();
        let r = cyl.radius;
        let mut curves = Vec::new();
        for (fi, f) in facets.iter().enumerate() {
            let first_curve = curves.len();
            let mut current: Vec<Vec3<T>> = Vec::new();
            let mut starts_at_zero = false;
            for s in 0..=samples {
                let phi = T::lit(2.0 * std::f64::consts::PI * s as f64 / samples as f64);
                let (x, y) = (r * phi.cos(), r * phi.sin());
                let z = (f.offset - f.normal.x * x - f.normal.y * y) / f.normal.z;
                let p = Vec3::new(x, y, z);
                let lowest = facets.iter().enumerate().all(|(gi, g)| {
                    gi == fi || (g.offset - g.normal.x * x - g.normal.y * y) / g.normal.z >= z
                });
                if lowest {
                    if s == 0 {
                        starts_at_zero = true;
                    }
                    current.push(p);
                } else if !current.is_empty() {
                    curves.push(std::mem::take(&mut current));
                }
            }
            if !current.is_empty() {
                if starts_at_zero && curves.len() > first_curve {
                    // arc crosses phi = 0: join its tail onto its head
                    let head = std::mem::take(&mut curves[first_curve]);
                    current.extend(head.into_iter().skip(1));
                    curves[first_curve] = current;
                } else {
                    curves.push(current);
                }
            }
        }
        curves
    }

    /// Wavefront OBJ wireframe of the scene: solid outlines and tip boundary
    /// curves as polylines. Debug view only.
    pub fn wireframe_obj(&self, samples: usize) -> String {
        let mut out = String::from("# pumpmap scene wireframe\n");
        let mut count = 0usize;
        let mut push_line = |out: &mut String, name: &str, pts: &[Vec3<T>]| {
            out.push_str(&format!("o {name}\n"));
            for p in pts {
                let [x, y, z] = p.to_f64();
                out.push_str(&format!("v {x} {y} {z}\n"));
            }
            let idx: Vec<String> = (count + 1..=count + pts.len()).map(|i| i.to_string()).collect();
            out.push_str(&format!("l {}\n", idx.join(" ")));
            count += pts.len();
        };
        for (k, s) in self.solids.iter().enumerate() {
            let name = format!("{}_{k}", s.tag.name());
            if let Some(c) = s.cylinder {
                let r = c.radius;
                for h in s.planes.iter().filter(|h| h.normal.z.abs() >= T::one() - T::lit(1e-12)) {
                    let z = h.offset / h.normal.z;
                    let ring: Vec<Vec3<T>> = (0..=samples)
                        .map(|i| {
                            let phi = T::lit(2.0 * std::f64::consts::PI * i as f64 / samples as f64);
                            Vec3::new(r * phi.cos(), r * phi.sin(), z)
                        })
                        .collect();
                    push_line(&mut out, &format!("{name}_rim"), &ring);
                }
            } else {
                let (a, b) = (s.bbox.min, s.bbox.max);
                let corners = |z: T| {
                    vec![
                        Vec3::new(a.x, a.y, z),
                        Vec3::new(b.x, a.y, z),
                        Vec3::new(b.x, b.y, z),
                        Vec3::new(a.x, b.y, z),
                        Vec3::new(a.x, a.y, z),
                    ]
                };
                push_line(&mut out, &format!("{name}_bottom"), &corners(a.z));
                push_line(&mut out, &format!("{name}_top"), &corners(b.z));
            }
        }
        for (i, curve) in self.tip_boundary_curves(samples).iter().enumerate() {
            push_line(&mut out, &format!("facet_shank_{i}"), curve);
        }
        out
    }
}

/// Geometry and materials of a pumping configuration, in the cavity frame (mm):
/// the rod axis is the cavity axis and `z` is height above the cavity floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub configuration: Configuration,
    #[serde(default = "default_tip_style")]
    pub tip_style: TipStyle,
    #[serde(default = "default_tip_angle")]
    pub tip_full_angle_deg: f64,
    #[serde(default)]
    pub rod: RodConfig,
    #[serde(default)]
    pub led: LedConfig,
    #[serde(default)]
    pub coupling: CouplingConfig,
    #[serde(default)]
    pub crystal: CrystalConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
}

fn default_tip_style() -> TipStyle {
    TipStyle::Wedge
}

fn default_tip_angle() -> f64 {
    40.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RodConfig {
    pub diameter_mm: f64,
    /// From the input face to the apex (or flat output face).
    pub length_mm: f64,
    pub refractive_index: f64,
}

impl Default for RodConfig {
    fn default() -> Self {
        Self {
            diameter_mm: 5.0,
            length_mm: 130.0,
            refractive_index: 1.458,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LedConfig {
    pub width_mm: f64,
    pub height_mm: f64,
    pub die_thickness_mm: f64,
    pub total_power_w: f64,
    /// Refractive index of the medium in which the emission is Lambertian
    /// (1.0: the datasheet profile in air). Rays are refracted from it into the
    /// coupling layer with Fresnel losses.
    pub emission_index: f64,
}

impl Default for LedConfig {
    fn default() -> Self {
        Self {
            width_mm: 3.2,
            height_mm: 2.6,
            die_thickness_mm: 0.2,
            total_power_w: 1.0,
            emission_index: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingConfig {
    pub thickness_mm: f64,
    /// Defaults to the rod index (index-matched interface).
    pub refractive_index: Option<f64>,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self {
            thickness_mm: 0.05,
            refractive_index: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrystalConfig {
    pub diameter_mm: f64,
    pub length_mm: f64,
    /// Height of the crystal's lower face above the cavity floor.
    pub base_z_mm: f64,
    /// Invasive only: height of the tip apex above the crystal's lower face.
    /// Defaults to the facet height plus 0.5 mm.
    pub insertion_depth_mm: Option<f64>,
    pub refractive_index: f64,
    pub absorption_per_mm: f64,
}

impl Default for CrystalConfig {
    fn default() -> Self {
        Self {
            diameter_mm: 8.0,
            length_mm: 8.0,
            base_z_mm: 6.0,
            insertion_depth_mm: None,
            refractive_index: 1.65,
            absorption_per_mm: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Air gap between the waveguide output face and the meter surface.
    pub gap_mm: f64,
    pub diameter_mm: f64,
    pub thickness_mm: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            gap_mm: 0.5,
            diameter_mm: 45.0,
            thickness_mm: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn new(configuration: Configuration, tip_style: TipStyle) -> Self {
        Self {
            configuration,
            tip_style,
            tip_full_angle_deg: default_tip_angle(),
            rod: RodConfig::default(),
            led: LedConfig::default(),
            coupling: CouplingConfig::default(),
            crystal: CrystalConfig::default(),
            detector: DetectorConfig::default(),
        }
    }

    /// Axial height of the faceted tip for the configured angle and rod.
    pub fn tip_height_mm(&self) -> f64 {
        match self.effective_tip_style() {
            TipStyle::Flat => 0.0,
            _ => {
                let half = 0.5 * self.tip_full_angle_deg.to_radians();
                0.5 * self.rod.diameter_mm / half.tan()
            }
        }
    }

    pub fn effective_tip_style(&self) -> TipStyle {
        match self.configuration {
            Configuration::Invasive => self.tip_style,
            Configuration::Butt | Configuration::Meter => TipStyle::Flat,
        }
    }

    pub fn insertion_depth_mm(&self) -> f64 {
        self.crystal
            .insertion_depth_mm
            .unwrap_or(self.tip_height_mm() + 0.5)
    }

    /// Height of the waveguide apex (or flat end) in the cavity frame.
    pub fn apex_z_mm(&self) -> f64 {
        match self.configuration {
            Configuration::Invasive => self.crystal.base_z_mm + self.insertion_depth_mm(),
            Configuration::Butt | Configuration::Meter => self.crystal.base_z_mm,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), SceneError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(SceneError::InvalidConfig(format!("{name} must be positive, got {v}")))
    }
}

/// Builds and validates the scene for a configuration.
pub fn build_scene<T: Real>(config: &SceneConfig) -> Result<Scene<T>, SceneError> {
    let c = config;
    positive("rod.diameter_mm", c.rod.diameter_mm)?;
    positive("rod.length_mm", c.rod.length_mm)?;
    positive("led.width_mm", c.led.width_mm)?;
    positive("led.height_mm", c.led.height_mm)?;
    positive("led.die_thickness_mm", c.led.die_thickness_mm)?;
    positive("led.total_power_w", c.led.total_power_w)?;
    if !(c.led.emission_index >= 1.0 && c.led.emission_index.is_finite()) {
        return Err(SceneError::InvalidConfig("led.emission_index must be >= 1".into()));
    }
    positive("coupling.thickness_mm", c.coupling.thickness_mm)?;
    positive("crystal.diameter_mm", c.crystal.diameter_mm)?;
    positive("crystal.length_mm", c.crystal.length_mm)?;
    let style = c.effective_tip_style();
    if style != TipStyle::Flat && !(c.tip_full_angle_deg > 0.0 && c.tip_full_angle_deg < 180.0) {
        return Err(SceneError::InvalidConfig(format!(
            "tip_full_angle_deg must lie in (0, 180), got {}",
            c.tip_full_angle_deg
        )));
    }
    let rod_r = 0.5 * c.rod.diameter_mm;
    let half_diag = 0.5 * c.led.width_mm.hypot(c.led.height_mm);
    if half_diag > rod_r {
        return Err(SceneError::InvalidConfig(
            "LED face is not covered by the waveguide input face".into(),
        ));
    }

    let quartz = Material::new("fused-quartz", T::lit(c.rod.refractive_index), T::zero())?;
    let fluid = Material::new(
        "coupling-fluid",
        T::lit(c.coupling.refractive_index.unwrap_or(c.rod.refractive_index)),
        T::zero(),
    )?;
    let crystal_mat = Material::new(
        "ptc:ptp",
        T::lit(c.crystal.refractive_index),
        T::lit(c.crystal.absorption_per_mm),
    )?;
    // The die is a sink: anything returning onto it is counted, not re-emitted.
    let die_mat = Material::new("led-die", T::one(), T::infinity())?;
    let meter_mat = Material::new("energy-meter", T::one(), T::infinity())?;

    let apex_z = c.apex_z_mm();
    let tip_h = c.tip_height_mm();
    let shank_end = apex_z - tip_h;
    let input_z = apex_z - c.rod.length_mm;
    if c.rod.length_mm <= tip_h {
        return Err(SceneError::InvalidConfig("rod shorter than its tip".into()));
    }
    let led_z = input_z - c.coupling.thickness_mm;

    let mut solids: Vec<Solid<T>> = Vec::new();
    let (hw, hh) = (0.5 * c.led.width_mm, 0.5 * c.led.height_mm);
    solids.push(Solid::aa_box(
        Vec3::from_f64([-hw, -hh, led_z - c.led.die_thickness_mm]),
        Vec3::from_f64([hw, hh, led_z]),
        die_mat,
        RegionTag::Emitter,
    ));
    solids.push(Solid::z_cylinder(
        T::lit(rod_r),
        T::lit(led_z),
        T::lit(input_z),
        fluid,
        RegionTag::Coupling,
    ));

    let crystal_r = 0.5 * c.crystal.diameter_mm;
    let crystal_z0 = c.crystal.base_z_mm;
    let crystal_z1 = crystal_z0 + c.crystal.length_mm;
    match c.configuration {
        Configuration::Invasive => {
            if crystal_r <= rod_r {
                return Err(SceneError::InvalidConfig(
                    "crystal must be wider than the waveguide it surrounds".into(),
                ));
            }
            if !(crystal_z0 < shank_end && apex_z < crystal_z1) {
                return Err(SceneError::InvalidConfig(
                    "crystal must strictly contain the waveguide tip".into(),
                ));
            }
            solids.push(Solid::z_cylinder(
                T::lit(crystal_r),
                T::lit(crystal_z0),
                T::lit(crystal_z1),
                crystal_mat,
                RegionTag::Crystal,
            ));
        }
        Configuration::Butt => {
            solids.push(Solid::z_cylinder(
                T::lit(crystal_r),
                T::lit(crystal_z0),
                T::lit(crystal_z1),
                crystal_mat,
                RegionTag::Crystal,
            ));
        }
        Configuration::Meter => {
            positive("detector.gap_mm", c.detector.gap_mm)?;
            positive("detector.diameter_mm", c.detector.diameter_mm)?;
            positive("detector.thickness_mm", c.detector.thickness_mm)?;
            let z0 = apex_z + c.detector.gap_mm;
            solids.push(Solid::z_cylinder(
                T::lit(0.5 * c.detector.diameter_mm),
                T::lit(z0),
                T::lit(z0 + c.detector.thickness_mm),
                meter_mat,
                RegionTag::Detector,
            ));
        }
    }

    let mut rod = Solid::z_cylinder(
        T::lit(rod_r),
        T::lit(input_z),
        T::lit(apex_z),
        quartz,
        RegionTag::Waveguide,
    );
    let apex = Vec3::from_f64([0.0, 0.0, apex_z]);
    if style != TipStyle::Flat {
        rod.kind = SolidKind::CylinderClippedByHalfSpaces;
        rod.planes.pop();
        for n in facet_normals::<T>(style, c.tip_full_angle_deg) {
            rod.planes.push(HalfSpace::new(n, apex));
        }
    }
    solids.push(rod);

    // Overlap check: only the waveguide may carve the crystal.
    let tol = T::lit(1e-9);
    for i in 0..solids.len() {
        for j in i + 1..solids.len() {
            let (a, b) = (&solids[i], &solids[j]);
            let carve = matches!(
                (a.tag, b.tag),
                (RegionTag::Crystal, RegionTag::Waveguide) | (RegionTag::Waveguide, RegionTag::Crystal)
            ) && c.configuration == Configuration::Invasive;
            if !carve && a.bbox.overlaps(&b.bbox, tol) {
                return Err(SceneError::InvalidConfig(format!(
                    "regions `{}` and `{}` overlap",
                    a.tag.name(),
                    b.tag.name()
                )));
            }
        }
    }

    let mut scene = Scene::from_solids(solids, Material::air())?;
    scene.tip_style = style;
    scene.tip_full_angle_deg = if style == TipStyle::Flat {
        T::zero()
    } else {
        T::lit(c.tip_full_angle_deg)
    };
    scene.configuration = c.configuration;
    scene.apex = apex;
    scene.shank_end_z = T::lit(shank_end);
    scene.led_center = Vec3::from_f64([0.0, 0.0, led_z]);
    scene.led_extent = (T::lit(c.led.width_mm), T::lit(c.led.height_mm));
    scene.led_launch_indices = (
        T::lit(c.led.emission_index),
        T::lit(c.coupling.refractive_index.unwrap_or(c.rod.refractive_index)),
    );
    Ok(scene)
}

/// Outward normals of the tip facets. Each facet makes half the full angle with
/// the rod axis and all of them pass through the apex.
pub fn facet_normals<T: Real>(style: TipStyle, full_angle_deg: f64) -> Vec<Vec3<T>> {
    let half = 0.5 * full_angle_deg.to_radians();
    let azimuths: &[f64] = match style {
        TipStyle::Flat => &[],
        TipStyle::Wedge => &[0.0, 180.0],
        TipStyle::Spear => &[90.0, 210.0, 330.0],
    };
    azimuths
        .iter()
        .map(|phi| {
            let phi = phi.to_radians();
            Vec3::from_f64([half.cos() * phi.cos(), half.cos() * phi.sin(), half.sin()])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(configuration: Configuration, style: TipStyle) -> SceneConfig {
        SceneConfig::new(configuration, style)
    }

    #[test]
    fn flat_tip_has_no_facets() {
        let s: Scene<f64> = build_scene(&cfg(Configuration::Butt, TipStyle::Flat)).unwrap();
        let rod = s.solids_tagged(RegionTag::Waveguide).next().unwrap();
        assert_eq!(rod.kind, SolidKind::FiniteCylinder);
        assert_eq!(rod.planes.len(), 2);
        assert!(s.tip_boundary_curves(64).is_empty());
    }

    #[test]
    fn wedge_normals_subtend_supplement_of_tip_angle() {
        let mut c = cfg(Configuration::Invasive, TipStyle::Wedge);
        c.tip_full_angle_deg = 53.13;
        let s: Scene<f64> = build_scene(&c).unwrap();
        let rod = s.solids_tagged(RegionTag::Waveguide).next().unwrap();
        let facets: Vec<_> = rod.planes.iter().filter(|h| h.normal.z > 0.0).collect();
        assert_eq!(facets.len(), 2);
        let angle = facets[0].normal.dot(facets[1].normal).acos().to_degrees();
        assert!((angle - 126.87).abs() < 1e-9, "{angle}");
    }

    #[test]
    fn facets_pass_through_apex_on_axis() {
        for style in [TipStyle::Wedge, TipStyle::Spear] {
            let s: Scene<f64> = build_scene(&cfg(Configuration::Invasive, style)).unwrap();
            assert_eq!((s.apex.x, s.apex.y), (0.0, 0.0));
            let rod = s.solids_tagged(RegionTag::Waveguide).next().unwrap();
            let facets: Vec<_> = rod.planes.iter().filter(|h| h.normal.z > 0.0).collect();
            assert_eq!(facets.len(), style.facet_count());
            for f in facets {
                assert!(f.signed_distance(s.apex).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spear_boundary_curves_are_planar_ellipses_on_the_shank() {
        let s: Scene<f64> = build_scene(&cfg(Configuration::Invasive, TipStyle::Spear)).unwrap();
        let curves = s.tip_boundary_curves(360);
        assert_eq!(curves.len(), 3);
        let rod = s.solids_tagged(RegionTag::Waveguide).next().unwrap();
        for curve in &curves {
            assert!(curve.len() > 50);
            for p in curve {
                assert!((p.radial() - 2.5).abs() < 1e-12);
                let on_facet = rod.planes.iter().any(|h| h.normal.z > 0.0 && h.signed_distance(*p).abs() < 1e-9);
                assert!(on_facet);
            }
        }
        let obj = s.wireframe_obj(90);
        assert_eq!(obj.matches("o facet_shank_").count(), 3);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = cfg(Configuration::Invasive, TipStyle::Wedge);
        c.tip_full_angle_deg = 180.0;
        assert!(build_scene::<f64>(&c).is_err());
        let mut c = cfg(Configuration::Butt, TipStyle::Flat);
        c.rod.diameter_mm = -1.0;
        assert!(matches!(build_scene::<f64>(&c), Err(SceneError::InvalidConfig(_))));
        let mut c = cfg(Configuration::Invasive, TipStyle::Wedge);
        c.crystal.insertion_depth_mm = Some(9.0);
        assert!(build_scene::<f64>(&c).is_err(), "apex above crystal top");
    }

    #[test]
    fn axial_ray_first_hit_is_coupling_quartz_plane() {
        let s: Scene<f64> = build_scene(&cfg(Configuration::Butt, TipStyle::Flat)).unwrap();
        let ray = Ray::new(s.led_center, Vec3::new(0.0, 0.0, 1.0));
        let hit = s.intersect(&ray).unwrap().unwrap();
        assert!((hit.distance - 0.05).abs() < 1e-12);
        assert_eq!(s.tag(hit.before), RegionTag::Coupling);
        assert_eq!(hit.region_tag_after, RegionTag::Waveguide);
        assert_eq!(hit.normal, Vec3::new(0.0, 0.0, -1.0));
    }

    #[test]
    fn grazing_wall_hit_has_radial_normal() {
        let s: Scene<f64> = build_scene(&cfg(Configuration::Butt, TipStyle::Flat)).unwrap();
        let origin = Vec3::new(0.0, 2.4, -50.0);
        let dir = Vec3::new(1.0, 0.0, 1e-3).normalized().unwrap();
        let hit = s.intersect(&Ray::new(origin, dir)).unwrap().unwrap();
        let radial = Vec3::new(hit.point.x, hit.point.y, 0.0).normalized().unwrap();
        assert!((hit.normal + radial).norm() < 1e-9, "{:?}", hit.normal);
        assert_eq!(hit.region_tag_after, RegionTag::Air);
    }

    #[test]
    fn containment_classifies_points() {
        let s: Scene<f64> = build_scene(&cfg(Configuration::Invasive, TipStyle::Wedge)).unwrap();
        let mid = s.apex.z - 65.0;
        assert_eq!(s.contains(Vec3::new(0.0, 0.0, mid)), RegionTag::Waveguide);
        let c = SceneConfig::new(Configuration::Invasive, TipStyle::Wedge);
        let zc = c.crystal.base_z_mm + 0.5 * c.crystal.length_mm;
        assert_eq!(s.contains(Vec3::new(4.1, 0.0, zc)), RegionTag::Air);
        assert_eq!(s.contains(Vec3::new(3.9, 0.0, zc)), RegionTag::Crystal);
        // just above the apex is crystal, just below is quartz
        assert_eq!(s.contains(s.apex + Vec3::new(0.0, 0.0, 1e-6)), RegionTag::Crystal);
        assert_eq!(s.contains(s.apex - Vec3::new(0.0, 0.0, 1e-6)), RegionTag::Waveguide);
    }

    #[test]
    fn zero_direction_is_degenerate() {
        let s: Scene<f64> = build_scene(&cfg(Configuration::Butt, TipStyle::Flat)).unwrap();
        let r = Ray::new(Vec3::zero(), Vec3::zero());
        assert_eq!(s.intersect(&r), Err(SceneError::DegenerateRay));
    }

    #[test]
    fn scene_builds_in_single_precision() {
        let s: Scene<f32> = build_scene(&cfg(Configuration::Invasive, TipStyle::Spear)).unwrap();
        let ray = Ray::new(s.led_center, Vec3::new(0.0, 0.0, 1.0f32));
        let hit = s.intersect(&ray).unwrap().unwrap();
        assert_eq!(hit.region_tag_after, RegionTag::Waveguide);
    }
}
