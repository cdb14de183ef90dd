//! Axisymmetric TE₀ cavity modes: E_φ(r, z) eigen-solver for a PEC cylinder
//! loaded with a dielectric ring and support, the derived |B|² map with
//! stored-energy normalization, bilinear sampling, and FMP1 file I/O.
//!
//! Lengths are in mm. Field maps are normalized so that
//! ∫ |B|²/(2μ₀) dV = 1 J with B the peak phasor amplitude.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec3;
use crate::grid::Cursor;
use crate::linalg::{symmetric_eigen, BandLu};
use crate::num::{Real, C_MM_PER_S, MU_0};

pub const FMP1_MAGIC: &[u8; 4] = b"FMP1";
/// Eigenpairs further than this relative distance from the target frequency are rejected.
pub const FREQUENCY_WINDOW: f64 = 0.3;
/// Largest accepted relative eigen residual ‖Au − λMu‖ / ‖λMu‖.
pub const RESIDUAL_BOUND: f64 = 1e-8;
/// Minimum number of mesh cells across the ring wall.
pub const MIN_RING_CELLS: f64 = 8.0;

#[derive(Debug, Error)]
pub enum EmError {
    #[error("invalid cavity: {0}")]
    InvalidSpec(String),
    #[error("mesh too coarse: {0}")]
    MeshTooCoarse(String),
    #[error("no qualifying TE0 mode within ±30% of {target_ghz} GHz")]
    NoModeFound { target_ghz: f64 },
    #[error("eigen-solver did not converge (residual {residual:e})")]
    NotConverged { residual: f64 },
    #[error("shifted operator is singular; move the target frequency slightly")]
    Singular,
    #[error("tuning failed: {0}")]
    Tuning(String),
    #[error("point (r = {r} mm, z = {z} mm) lies outside the field map")]
    OutOfDomain { r: f64, z: f64 },
    #[error("field map has zero stored energy")]
    ZeroEnergy,
    #[error("malformed field map: {0}")]
    Malformed(String),
    #[error("non-axisymmetric field data: {0}")]
    NonAxisymmetric(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<crate::grid::GridError> for EmError {
    fn from(e: crate::grid::GridError) -> Self {
        match e {
            crate::grid::GridError::Io(io) => EmError::Io(io),
            other => EmError::Malformed(other.to_string()),
        }
    }
}

fn default_ring_eps() -> f64 {
    318.0
}

fn default_support_eps() -> f64 {
    2.1
}

/// Dielectric ring resonator, coaxial with the cavity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingSpec {
    pub inner_radius_mm: f64,
    pub outer_radius_mm: f64,
    pub height_mm: f64,
    /// Height of the ring's lower face above the cavity floor.
    pub base_z_mm: f64,
    #[serde(default = "default_ring_eps")]
    pub permittivity: f64,
}

/// Annular stand resting on the cavity floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportSpec {
    pub inner_radius_mm: f64,
    pub outer_radius_mm: f64,
    pub height_mm: f64,
    #[serde(default = "default_support_eps")]
    pub permittivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavitySpec {
    pub radius_mm: f64,
    /// Ceiling position above the floor; the tuning parameter.
    pub height_mm: f64,
    #[serde(default)]
    pub ring: Option<RingSpec>,
    #[serde(default)]
    pub support: Option<SupportSpec>,
}

impl CavitySpec {
    /// Empty PEC cylinder.
    pub fn empty(radius_mm: f64, height_mm: f64) -> Self {
        Self {
            radius_mm,
            height_mm,
            ring: None,
            support: None,
        }
    }

    /// Reference loaded cavity: STO ring on a PTFE washer, ceiling untuned.
    pub fn reference() -> Self {
        Self {
            radius_mm: 16.0,
            height_mm: 20.0,
            ring: Some(RingSpec {
                inner_radius_mm: 4.5,
                outer_radius_mm: 7.25,
                height_mm: 7.0,
                base_z_mm: 6.0,
                permittivity: default_ring_eps(),
            }),
            support: Some(SupportSpec {
                inner_radius_mm: 4.5,
                outer_radius_mm: 7.25,
                height_mm: 6.0,
                permittivity: default_support_eps(),
            }),
        }
    }

    pub fn validate(&self) -> Result<(), EmError> {
        let bad = |m: String| Err(EmError::InvalidSpec(m));
        if !(self.radius_mm > 0.0 && self.radius_mm.is_finite()) {
            return bad("radius_mm must be positive".into());
        }
        if !(self.height_mm > 0.0 && self.height_mm.is_finite()) {
            return bad("height_mm must be positive".into());
        }
        if let Some(r) = &self.ring {
            if !(r.inner_radius_mm > 0.0) {
                return bad("ring bore must be nonempty (inner_radius_mm > 0)".into());
            }
            if !(r.outer_radius_mm > r.inner_radius_mm && r.outer_radius_mm < self.radius_mm) {
                return bad("ring must satisfy inner < outer < cavity radius".into());
            }
            if !(r.height_mm > 0.0 && r.base_z_mm >= 0.0 && r.base_z_mm + r.height_mm < self.height_mm) {
                return bad("ring must lie between floor and ceiling".into());
            }
            if !(r.permittivity >= 1.0 && r.permittivity.is_finite()) {
                return bad("ring permittivity must be >= 1".into());
            }
        }
        if let Some(s) = &self.support {
            if !(s.inner_radius_mm >= 0.0
                && s.outer_radius_mm > s.inner_radius_mm
                && s.outer_radius_mm < self.radius_mm)
            {
                return bad("support must satisfy 0 <= inner < outer < cavity radius".into());
            }
            if !(s.height_mm > 0.0 && s.height_mm < self.height_mm) {
                return bad("support height must lie in (0, cavity height)".into());
            }
            if let Some(r) = &self.ring {
                if s.height_mm > r.base_z_mm + 1e-12 {
                    return bad("support overlaps the ring".into());
                }
            }
            if !(s.permittivity >= 1.0 && s.permittivity.is_finite()) {
                return bad("support permittivity must be >= 1".into());
            }
        }
        Ok(())
    }

    /// Highest material interface below the ceiling.
    fn top_of_contents(&self) -> f64 {
        let ring = self.ring.as_ref().map_or(0.0, |r| r.base_z_mm + r.height_mm);
        let sup = self.support.as_ref().map_or(0.0, |s| s.height_mm);
        ring.max(sup)
    }

    /// (permittivity, is ring) of the material at (r, z).
    fn material_at(&self, r: f64, z: f64) -> (f64, bool) {
        if let Some(g) = &self.ring {
            if r > g.inner_radius_mm && r < g.outer_radius_mm && z > g.base_z_mm && z < g.base_z_mm + g.height_mm {
                return (g.permittivity, true);
            }
        }
        if let Some(s) = &self.support {
            if r > s.inner_radius_mm && r < s.outer_radius_mm && z < s.height_mm {
                return (s.permittivity, false);
            }
        }
        (1.0, false)
    }
}

/// Tensor-product mesh whose lines include every material interface.
#[derive(Debug, Clone)]
struct Mesh {
    r: Vec<f64>,
    z: Vec<f64>,
    /// Cell permittivity, r-fastest, (r.len()-1) × (z.len()-1).
    eps: Vec<f64>,
    ring: Vec<bool>,
}

fn subdivide(breaks: &mut Vec<f64>, pitch: f64, fixed_last: Option<usize>) -> (Vec<f64>, usize) {
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    let mut nodes = vec![breaks[0]];
    let mut last = 0;
    for w in 0..breaks.len() - 1 {
        let (a, b) = (breaks[w], breaks[w + 1]);
        let n = if w == breaks.len() - 2 && fixed_last.is_some() {
            fixed_last.unwrap()
        } else {
            ((b - a) / pitch - 1e-9).ceil().max(1.0) as usize
        };
        last = n;
        for k in 1..=n {
            nodes.push(if k == n { b } else { a + (b - a) * k as f64 / n as f64 });
        }
    }
    (nodes, last)
}

impl Mesh {
    fn build(spec: &CavitySpec, pitch: f64, top_cells: Option<usize>) -> Result<(Self, usize), EmError> {
        let mut rb = vec![0.0, spec.radius_mm];
        let mut zb = vec![0.0, spec.height_mm];
        if let Some(g) = &spec.ring {
            rb.extend([g.inner_radius_mm, g.outer_radius_mm]);
            zb.extend([g.base_z_mm, g.base_z_mm + g.height_mm]);
        }
        if let Some(s) = &spec.support {
            rb.extend([s.inner_radius_mm, s.outer_radius_mm]);
            zb.push(s.height_mm);
        }
        let (r, _) = subdivide(&mut rb, pitch, None);
        let (z, top) = subdivide(&mut zb, pitch, top_cells);
        let (nr, nz) = (r.len() - 1, z.len() - 1);
        let mut eps = Vec::with_capacity(nr * nz);
        let mut ring = Vec::with_capacity(nr * nz);
        for j in 0..nz {
            for i in 0..nr {
                let (e, is_ring) = spec.material_at(0.5 * (r[i] + r[i + 1]), 0.5 * (z[j] + z[j + 1]));
                eps.push(e);
                ring.push(is_ring);
            }
        }
        Ok((Self { r, z, eps, ring }, top))
    }
}

/// Discretized generalized eigenproblem A u = λ M u over interior nodes,
/// λ = k₀² in mm⁻².
struct Operator {
    mesh: Mesh,
    ni: usize,
    nj: usize,
    r_fast: bool,
    /// (diag, +r coupling, +z coupling) per unknown.
    diag: Vec<f64>,
    east: Vec<f64>,
    north: Vec<f64>,
    mass: Vec<f64>,
    ring_mass: Vec<f64>,
}

impl Operator {
    fn new(mesh: Mesh) -> Self {
        let (nr, nz) = (mesh.r.len() - 1, mesh.z.len() - 1);
        let (ni, nj) = (nr - 1, nz - 1);
        let n = ni * nj;
        let r_fast = ni <= nj;
        let mut op = Self {
            mesh,
            ni,
            nj,
            r_fast,
            diag: vec![0.0; n],
            east: vec![0.0; n],
            north: vec![0.0; n],
            mass: vec![0.0; n],
            ring_mass: vec![0.0; n],
        };
        let m = &op.mesh;
        for j in 1..nz {
            for i in 1..nr {
                let k = op.idx(i, j);
                let (r, rm, rp) = (m.r[i], m.r[i - 1], m.r[i + 1]);
                let (zm, z, zp) = (m.z[j - 1], m.z[j], m.z[j + 1]);
                let (hrm, hrp, hzm, hzp) = (r - rm, rp - r, z - zm, zp - z);
                let (wr, wz) = (0.5 * (hrm + hrp), 0.5 * (hzm + hzp));
                let (r_in, r_out) = (0.5 * (r + rm), 0.5 * (r + rp));
                op.diag[k] = wz * (r_out / hrp + r_in / hrm) + wz * wr / r + wr * r * (1.0 / hzp + 1.0 / hzm);
                op.east[k] = -wz * r_out / hrp;
                op.north[k] = -wr * r / hzp;
                let mut mass = 0.0;
                let mut ring = 0.0;
                for (ci, cj, hr, hz) in [
                    (i - 1, j - 1, hrm, hzm),
                    (i, j - 1, hrp, hzm),
                    (i - 1, j, hrm, hzp),
                    (i, j, hrp, hzp),
                ] {
                    let c = cj * nr + ci;
                    let w = m.eps[c] * 0.25 * hr * hz * r;
                    mass += w;
                    if m.ring[c] {
                        ring += w;
                    }
                }
                op.mass[k] = mass;
                op.ring_mass[k] = ring;
            }
        }
        op
    }

    fn len(&self) -> usize {
        self.ni * self.nj
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        if self.r_fast {
            (j - 1) * self.ni + (i - 1)
        } else {
            (i - 1) * self.nj + (j - 1)
        }
    }

    fn bandwidth(&self) -> usize {
        if self.r_fast {
            self.ni
        } else {
            self.nj
        }
    }

    /// Calls `f(row, col, value)` for every stored entry of the upper triangle
    /// including the diagonal.
    fn for_each_upper(&self, mut f: impl FnMut(usize, usize, f64)) {
        for j in 1..=self.nj {
            for i in 1..=self.ni {
                let k = self.idx(i, j);
                f(k, k, self.diag[k]);
                if i < self.ni {
                    f(k, self.idx(i + 1, j), self.east[k]);
                }
                if j < self.nj {
                    f(k, self.idx(i, j + 1), self.north[k]);
                }
            }
        }
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (k, v) in y.iter_mut().enumerate() {
            *v = self.diag[k] * x[k];
        }
        self.for_each_upper(|a, b, v| {
            if a != b {
                y[a] += v * x[b];
                y[b] += v * x[a];
            }
        });
    }

    fn shifted_lu(&self, sigma: f64) -> Result<BandLu<f64>, EmError> {
        let bw = self.bandwidth();
        let mut lu = BandLu::zeros(self.len(), bw, bw);
        self.for_each_upper(|a, b, v| {
            if a == b {
                lu.add(a, a, v - sigma * self.mass[a]);
            } else {
                lu.add(a, b, v);
                lu.add(b, a, v);
            }
        });
        lu.factorize().ok_or(EmError::Singular)
    }

    fn residual(&self, lambda: f64, u: &[f64]) -> f64 {
        let mut au = vec![0.0; u.len()];
        self.apply(u, &mut au);
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..u.len() {
            let lmu = lambda * self.mass[k] * u[k];
            num += (au[k] - lmu).powi(2);
            den += lmu * lmu;
        }
        (num / den).sqrt()
    }

    fn ring_fraction(&self, u: &[f64]) -> f64 {
        let (mut ring, mut total) = (0.0, 0.0);
        for k in 0..u.len() {
            ring += self.ring_mass[k] * u[k] * u[k];
            total += self.mass[k] * u[k] * u[k];
        }
        ring / total
    }

    fn m_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).zip(&self.mass).map(|((x, y), m)| x * y * m).sum()
    }

    /// Nodal E_φ on the full (nr+1)×(nz+1) node set, zeros on the boundary.
    fn expand(&self, u: &[f64]) -> Vec<f64> {
        let nr = self.ni + 1;
        let mut e = vec![0.0; (self.ni + 2) * (self.nj + 2)];
        for j in 1..=self.nj {
            for i in 1..=self.ni {
                e[j * (nr + 1) + i] = u[self.idx(i, j)];
            }
        }
        e
    }
}

struct Eigenpair {
    lambda: f64,
    vector: Vec<f64>,
    residual: f64,
    ring_fraction: Option<f64>,
}

fn freq_ghz(lambda: f64) -> f64 {
    C_MM_PER_S * lambda.max(0.0).sqrt() / (2.0 * std::f64::consts::PI) * 1e-9
}

fn lambda_of(freq_ghz: f64) -> f64 {
    let k = 2.0 * std::f64::consts::PI * freq_ghz * 1e9 / C_MM_PER_S;
    k * k
}

/// Shift-invert subspace iteration with Rayleigh–Ritz; returns the eigenpair
/// closest to the target that passes the mode filter.
fn find_mode(op: &Operator, target_ghz: f64, has_ring: bool) -> Result<Eigenpair, EmError> {
    let n = op.len();
    let p = 6.min(n);
    let sigma = lambda_of(target_ghz);
    let lu = op.shifted_lu(sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e01);
    let mut q: Vec<Vec<f64>> = (0..p).map(|_| (0..n).map(|_| rng.gen::<f64>() - 0.5).collect()).collect();
    let window = |lam: f64| (freq_ghz(lam) / target_ghz - 1.0).abs() <= FREQUENCY_WINDOW;
    let inner_tol = 0.01 * RESIDUAL_BOUND;
    let mut best_residual = f64::INFINITY;
    let mut stalled = 0;
    for _iter in 0..300 {
        let mut y: Vec<Vec<f64>> = q
            .iter()
            .map(|col| {
                let mut b: Vec<f64> = col.iter().zip(&op.mass).map(|(x, m)| x * m).collect();
                lu.solve(&mut b);
                b
            })
            .collect();
        for k in 0..p {
            for _pass in 0..2 {
                for l in 0..k {
                    let c = op.m_dot(&y[l], &y[k]);
                    let (head, tail) = y.split_at_mut(k);
                    for (a, b) in tail[0].iter_mut().zip(&head[l]) {
                        *a -= c * b;
                    }
                }
            }
            let norm = op.m_dot(&y[k], &y[k]).sqrt();
            if !(norm > 1e-300) {
                return Err(EmError::Singular);
            }
            y[k].iter_mut().for_each(|v| *v /= norm);
        }
        let ay: Vec<Vec<f64>> = y
            .iter()
            .map(|col| {
                let mut out = vec![0.0; n];
                op.apply(col, &mut out);
                out
            })
            .collect();
        let mut h = vec![0.0; p * p];
        for a in 0..p {
            for b in a..p {
                let v: f64 = y[a].iter().zip(&ay[b]).map(|(x, z)| x * z).sum();
                h[a * p + b] = v;
                h[b * p + a] = v;
            }
        }
        let (theta, v) = symmetric_eigen(&h, p);
        q = (0..p)
            .map(|c| {
                let mut col = vec![0.0; n];
                for (k, yk) in y.iter().enumerate() {
                    let w = v[k * p + c];
                    for (a, b) in col.iter_mut().zip(yk) {
                        *a += w * b;
                    }
                }
                col
            })
            .collect();
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| (theta[a] - sigma).abs().partial_cmp(&(theta[b] - sigma).abs()).unwrap());
        let mut all_converged = true;
        let mut pending = None;
        for &c in &order {
            let res = op.residual(theta[c], &q[c]);
            if res > inner_tol {
                all_converged = false;
                pending = Some(res);
                break;
            }
            let ring = has_ring.then(|| op.ring_fraction(&q[c]));
            if window(theta[c]) && ring.map_or(true, |f| f > 0.5) {
                return Ok(Eigenpair {
                    lambda: theta[c],
                    vector: q[c].clone(),
                    residual: res,
                    ring_fraction: ring,
                });
            }
        }
        if all_converged {
            return Err(EmError::NoModeFound { target_ghz });
        }
        // accept a pair that stopped improving but satisfies the contract
        let res = pending.unwrap_or(f64::INFINITY);
        if res < 0.5 * best_residual {
            best_residual = res;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= 5 && res <= RESIDUAL_BOUND {
                let c = order[0];
                let ring = has_ring.then(|| op.ring_fraction(&q[c]));
                if window(theta[c]) && ring.map_or(true, |f| f > 0.5) {
                    return Ok(Eigenpair {
                        lambda: theta[c],
                        vector: q[c].clone(),
                        residual: op.residual(theta[c], &q[c]),
                        ring_fraction: ring,
                    });
                }
            }
        }
    }
    Err(EmError::NotConverged {
        residual: best_residual,
    })
}

/// Three-point derivative on a nonuniform stencil `(x0, x1, x2)` evaluated at `x[at]`.
fn deriv3(x: [f64; 3], f: [f64; 3], at: usize) -> f64 {
    let (h1, h2) = (x[1] - x[0], x[2] - x[1]);
    match at {
        0 => -(2.0 * h1 + h2) / (h1 * (h1 + h2)) * f[0] + (h1 + h2) / (h1 * h2) * f[1] - h1 / (h2 * (h1 + h2)) * f[2],
        1 => -h2 / (h1 * (h1 + h2)) * f[0] + (h2 - h1) / (h1 * h2) * f[1] + h1 / (h2 * (h1 + h2)) * f[2],
        _ => h2 / (h1 * (h1 + h2)) * f[0] - (h1 + h2) / (h1 * h2) * f[1] + (2.0 * h2 + h1) / (h2 * (h1 + h2)) * f[2],
    }
}

fn stencil(n: usize, i: usize) -> (usize, usize) {
    if i == 0 {
        (0, 0)
    } else if i == n {
        (n - 2, 2)
    } else {
        (i - 1, 1)
    }
}

/// Normalized |B|² map of an axisymmetric mode on a uniform (r, z) node grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap<T> {
    pub nr: usize,
    pub nz: usize,
    pub r0: T,
    pub z0: T,
    pub dr: T,
    pub dz: T,
    pub frequency_ghz: T,
    /// Node values, r-fastest, in T for 1 J of stored magnetic energy.
    pub b_r: Vec<T>,
    pub b_z: Vec<T>,
    pub b2: Vec<T>,
    /// Position of the symmetry axis in the scene's x-y plane.
    pub axis_xy: (T, T),
    /// Share of electric energy inside the ring (solver output only).
    pub ring_energy_fraction: Option<T>,
    pub residual: Option<T>,
    /// Stored energy the data carried before renormalization on import.
    pub renormalized_from_j: Option<T>,
}

impl<T: Real> FieldMap<T> {
    /// Builds a map from component arrays; does not normalize.
    pub fn from_components(
        nr: usize,
        nz: usize,
        origin: (T, T),
        spacing: (T, T),
        frequency_ghz: T,
        b_r: Vec<T>,
        b_z: Vec<T>,
    ) -> Result<Self, EmError> {
        if nr < 2 || nz < 2 {
            return Err(EmError::Malformed("need at least 2×2 nodes".into()));
        }
        if b_r.len() != nr * nz || b_z.len() != nr * nz {
            return Err(EmError::Malformed("component arrays do not match the node count".into()));
        }
        if !(spacing.0 > T::zero() && spacing.1 > T::zero()) {
            return Err(EmError::Malformed("spacings must be positive".into()));
        }
        if b_r.iter().chain(&b_z).any(|v| !v.is_finite()) {
            return Err(EmError::Malformed("non-finite field value".into()));
        }
        let b2 = b_r.iter().zip(&b_z).map(|(a, b)| *a * *a + *b * *b).collect();
        Ok(Self {
            nr,
            nz,
            r0: origin.0,
            z0: origin.1,
            dr: spacing.0,
            dz: spacing.1,
            frequency_ghz,
            b_r,
            b_z,
            b2,
            axis_xy: (T::zero(), T::zero()),
            ring_energy_fraction: None,
            residual: None,
            renormalized_from_j: None,
        })
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize) -> usize {
        j * self.nr + i
    }

    pub fn r_max(&self) -> T {
        self.r0 + self.dr * T::lit((self.nr - 1) as f64)
    }

    pub fn z_max(&self) -> T {
        self.z0 + self.dz * T::lit((self.nz - 1) as f64)
    }

    /// ∫ |B|²/(2μ₀) dV over the body of revolution, trapezoidal, in J.
    pub fn stored_energy_j(&self) -> T {
        let two_pi = T::lit(2.0 * std::f64::consts::PI);
        let mut sum = T::zero();
        for j in 0..self.nz {
            let wz = if j == 0 || j == self.nz - 1 { T::lit(0.5) } else { T::one() };
            for i in 0..self.nr {
                let wr = if i == 0 || i == self.nr - 1 { T::lit(0.5) } else { T::one() };
                let r = self.r0 + self.dr * T::lit(i as f64);
                sum += wz * wr * r * self.b2[self.node(i, j)];
            }
        }
        // mm³ → m³
        sum * two_pi * self.dr * self.dz * T::lit(1e-9) / T::lit(2.0 * MU_0)
    }

    /// Rescales all components so the stored energy is 1 J.
    pub fn normalize(&mut self) -> Result<(), EmError> {
        let w = self.stored_energy_j();
        if !(w > T::zero() && w.is_finite()) {
            return Err(EmError::ZeroEnergy);
        }
        let s = (T::one() / w).sqrt();
        self.b_r.iter_mut().for_each(|v| *v *= s);
        self.b_z.iter_mut().for_each(|v| *v *= s);
        let s2 = T::one() / w;
        self.b2.iter_mut().for_each(|v| *v *= s2);
        Ok(())
    }

    pub fn normalized(mut self) -> Result<Self, EmError> {
        self.normalize()?;
        Ok(self)
    }

    /// Same field moved rigidly by `offset` (mm).
    pub fn translated(&self, offset: Vec3<T>) -> Self {
        let mut f = self.clone();
        f.axis_xy = (f.axis_xy.0 + offset.x, f.axis_xy.1 + offset.y);
        f.z0 += offset.z;
        f
    }

    /// Bilinear |B|² at cylindrical coordinates relative to the axis.
    pub fn sample_b2_rz(&self, r: T, z: T) -> Result<T, EmError> {
        let fr = (r - self.r0) / self.dr;
        let fz = (z - self.z0) / self.dz;
        let tol = T::lit(1e-9);
        let (nr1, nz1) = (T::lit((self.nr - 1) as f64), T::lit((self.nz - 1) as f64));
        if !(fr >= -tol && fr <= nr1 + tol && fz >= -tol && fz <= nz1 + tol) {
            return Err(EmError::OutOfDomain {
                r: r.to_f64_lossy(),
                z: z.to_f64_lossy(),
            });
        }
        let fr = fr.max(T::zero()).min(nr1);
        let fz = fz.max(T::zero()).min(nz1);
        let i = fr.floor().to_usize().unwrap().min(self.nr - 2);
        let j = fz.floor().to_usize().unwrap().min(self.nz - 2);
        let (tr, tz) = (fr - T::lit(i as f64), fz - T::lit(j as f64));
        let v00 = self.b2[self.node(i, j)];
        let v10 = self.b2[self.node(i + 1, j)];
        let v01 = self.b2[self.node(i, j + 1)];
        let v11 = self.b2[self.node(i + 1, j + 1)];
        let one = T::one();
        Ok((one - tr) * (one - tz) * v00 + tr * (one - tz) * v10 + (one - tr) * tz * v01 + tr * tz * v11)
    }

    /// Bilinear |B|² at a scene point.
    pub fn sample_b2(&self, p: Vec3<T>) -> Result<T, EmError> {
        let r = (p.x - self.axis_xy.0).hypot(p.y - self.axis_xy.1);
        self.sample_b2_rz(r, p.z)
    }

    pub fn write_fmp1<W: Write>(&self, mut w: W) -> Result<(), EmError> {
        let mut buf = Vec::with_capacity(52 + self.b_r.len() * 16);
        buf.extend_from_slice(FMP1_MAGIC);
        for d in [self.nr, self.nz] {
            let d = u32::try_from(d).map_err(|_| EmError::Malformed("dimension exceeds u32".into()))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in [self.r0, self.z0, self.dr, self.dz, self.frequency_ghz] {
            buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        for v in self.b_r.iter().chain(&self.b_z) {
            buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads an FMP1 file verbatim (no renormalization).
    pub fn read_fmp1<R: Read>(mut r: R) -> Result<Self, EmError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != FMP1_MAGIC {
            return Err(EmError::Malformed("bad magic".into()));
        }
        let nr = cur.u32()? as usize;
        let nz = cur.u32()? as usize;
        let [r0, z0, dr, dz, f] = [cur.f64()?, cur.f64()?, cur.f64()?, cur.f64()?, cur.f64()?];
        if [r0, z0, dr, dz, f].iter().any(|v| !v.is_finite()) {
            return Err(EmError::Malformed("non-finite header value".into()));
        }
        let n = nr
            .checked_mul(nz)
            .ok_or_else(|| EmError::Malformed("dimensions overflow".into()))?;
        if bytes.len() != 52 + n * 16 {
            return Err(EmError::Malformed(format!(
                "expected {} bytes for {nr}×{nz} nodes, found {}",
                52 + n * 16,
                bytes.len()
            )));
        }
        let read = |cur: &mut Cursor| -> Result<Vec<T>, EmError> { (0..n).map(|_| Ok(T::lit(cur.f64()?))).collect() };
        let b_r = read(&mut cur)?;
        let b_z = read(&mut cur)?;
        Self::from_components(nr, nz, (T::lit(r0), T::lit(z0)), (T::lit(dr), T::lit(dz)), T::lit(f), b_r, b_z)
    }

    /// Reads an FMP1 file, checks it describes an axisymmetric map and
    /// renormalizes it to 1 J, recording the original energy if it differed.
    pub fn import_fmp1<R: Read>(r: R) -> Result<Self, EmError> {
        let mut f = Self::read_fmp1(r)?;
        if f.r0 < T::zero() {
            return Err(EmError::NonAxisymmetric(
                "radial coordinate starts below zero (Cartesian slice?)".into(),
            ));
        }
        if f.r0 == T::zero() {
            let peak = f.b2.iter().copied().fold(T::zero(), T::max).sqrt();
            let axis_br = (0..f.nz).map(|j| f.b_r[f.node(0, j)].abs()).fold(T::zero(), T::max);
            if axis_br > peak * T::lit(1e-6) {
                return Err(EmError::NonAxisymmetric("radial field does not vanish on the axis".into()));
            }
        }
        let w = f.stored_energy_j();
        if (w - T::one()).abs() > T::lit(1e-6) {
            f.normalize()?;
            f.renormalized_from_j = Some(w);
        }
        Ok(f)
    }
}

/// Solves for the TE0 mode nearest `target_ghz` and returns its normalized map.
pub fn solve_te0_mode<T: Real>(spec: &CavitySpec, mesh_pitch_mm: f64, target_ghz: f64) -> Result<FieldMap<T>, EmError> {
    solve_inner(spec, mesh_pitch_mm, target_ghz, None)
}

fn check_mesh(spec: &CavitySpec, pitch: f64) -> Result<(), EmError> {
    if !(pitch > 0.0 && pitch.is_finite()) {
        return Err(EmError::InvalidSpec("mesh pitch must be positive".into()));
    }
    if let Some(g) = &spec.ring {
        let cells = (g.outer_radius_mm - g.inner_radius_mm) / pitch;
        if cells < MIN_RING_CELLS - 1e-9 {
            return Err(EmError::MeshTooCoarse(format!(
                "{cells:.2} cells across the ring wall, need at least {MIN_RING_CELLS}"
            )));
        }
    }
    let min_dim = spec.radius_mm.min(spec.height_mm);
    if min_dim / pitch < MIN_RING_CELLS {
        return Err(EmError::MeshTooCoarse(format!(
            "pitch {pitch} mm leaves fewer than {MIN_RING_CELLS} cells across the cavity"
        )));
    }
    Ok(())
}

fn solve_inner<T: Real>(
    spec: &CavitySpec,
    pitch: f64,
    target_ghz: f64,
    top_cells: Option<usize>,
) -> Result<FieldMap<T>, EmError> {
    spec.validate()?;
    if !(target_ghz > 0.0 && target_ghz.is_finite()) {
        return Err(EmError::InvalidSpec("target frequency must be positive".into()));
    }
    check_mesh(spec, pitch)?;
    let (mesh, _) = Mesh::build(spec, pitch, top_cells)?;
    let op = Operator::new(mesh);
    let pair = find_mode(&op, target_ghz, spec.ring.is_some())?;
    if !(pair.residual <= RESIDUAL_BOUND) {
        return Err(EmError::NotConverged { residual: pair.residual });
    }
    let e = op.expand(&pair.vector);
    let (rn, zn) = (&op.mesh.r, &op.mesh.z);
    let (nr, nz) = (rn.len() - 1, zn.len() - 1);
    let at = |i: usize, j: usize| e[j * (nr + 1) + i];

    // B_r = -∂E/∂z, B_z = (1/r) ∂(rE)/∂r (common 1/ω factor dropped by normalization)
    let mut br = vec![0.0; (nr + 1) * (nz + 1)];
    let mut bz = vec![0.0; (nr + 1) * (nz + 1)];
    for j in 0..=nz {
        let (sj, pj) = stencil(nz, j);
        for i in 0..=nr {
            let k = j * (nr + 1) + i;
            br[k] = if i == 0 {
                0.0
            } else {
                -deriv3([zn[sj], zn[sj + 1], zn[sj + 2]], [at(i, sj), at(i, sj + 1), at(i, sj + 2)], pj)
            };
            bz[k] = if i == 0 {
                let (r1, r2) = (rn[1], rn[2]);
                let (e1, e2) = (at(1, j), at(2, j));
                2.0 * (e1 * r2.powi(3) - e2 * r1.powi(3)) / (r1 * r2 * (r2 * r2 - r1 * r1))
            } else {
                let (si, pi) = stencil(nr, i);
                let x = [rn[si], rn[si + 1], rn[si + 2]];
                let g = [x[0] * at(si, j), x[1] * at(si + 1, j), x[2] * at(si + 2, j)];
                deriv3(x, g, pi) / rn[i]
            };
        }
    }

    // resample onto a uniform node grid
    let onr = (spec.radius_mm / pitch).round().max(2.0) as usize;
    let onz = (spec.height_mm / pitch).round().max(2.0) as usize;
    let (dr, dz) = (spec.radius_mm / onr as f64, spec.height_mm / onz as f64);
    let locate = |xs: &[f64], x: f64| -> (usize, f64) {
        let k = xs.partition_point(|v| *v <= x).clamp(1, xs.len() - 1) - 1;
        (k, ((x - xs[k]) / (xs[k + 1] - xs[k])).clamp(0.0, 1.0))
    };
    let mut out_r = Vec::with_capacity((onr + 1) * (onz + 1));
    let mut out_z = Vec::with_capacity((onr + 1) * (onz + 1));
    for j in 0..=onz {
        let (kj, tz) = locate(zn, if j == onz { spec.height_mm } else { j as f64 * dz });
        for i in 0..=onr {
            let (ki, tr) = locate(rn, if i == onr { spec.radius_mm } else { i as f64 * dr });
            let bil = |a: &[f64]| {
                let v = |ii: usize, jj: usize| a[jj * (nr + 1) + ii];
                (1.0 - tr) * (1.0 - tz) * v(ki, kj)
                    + tr * (1.0 - tz) * v(ki + 1, kj)
                    + (1.0 - tr) * tz * v(ki, kj + 1)
                    + tr * tz * v(ki + 1, kj + 1)
            };
            out_r.push(T::lit(bil(&br)));
            out_z.push(T::lit(bil(&bz)));
        }
    }
    let mut f = FieldMap::from_components(
        onr + 1,
        onz + 1,
        (T::zero(), T::zero()),
        (T::lit(dr), T::lit(dz)),
        T::lit(freq_ghz(pair.lambda)),
        out_r,
        out_z,
    )?;
    f.normalize()?;
    f.ring_energy_fraction = pair.ring_fraction.map(T::lit);
    f.residual = Some(T::lit(pair.residual));
    Ok(f)
}

/// Result of ceiling tuning.
#[derive(Debug, Clone)]
pub struct Tuned<T> {
    pub spec: CavitySpec,
    pub field: FieldMap<T>,
    /// Sign of d(frequency)/d(ceiling height) observed over the bracket.
    pub slope_sign: i8,
    pub evaluations: usize,
}

/// Moves the ceiling by bisection until the mode sits within `tol_ghz` of the target.
/// The bracket defaults to [top of ring + 2 mm, top of ring + 2 × cavity radius].
pub fn tune_ceiling<T: Real>(
    spec: &CavitySpec,
    target_ghz: f64,
    mesh_pitch_mm: f64,
    tol_ghz: f64,
    bracket_mm: Option<(f64, f64)>,
) -> Result<Tuned<T>, EmError> {
    spec.validate()?;
    let top = spec.top_of_contents();
    let (lo, hi) = bracket_mm.unwrap_or((top + 2.0, top + 2.0 * spec.radius_mm));
    if !(lo > top && hi > lo) {
        return Err(EmError::Tuning(format!("invalid ceiling bracket [{lo}, {hi}] mm")));
    }
    let mut probe = spec.clone();
    probe.height_mm = hi;
    check_mesh(&probe, mesh_pitch_mm)?;
    // fixed cell count above the contents keeps f(h) continuous
    let (_, top_cells) = Mesh::build(&probe, mesh_pitch_mm, None)?;
    let mut evaluations = 0;
    let mut eval = |h: f64| -> Result<(f64, FieldMap<T>), EmError> {
        evaluations += 1;
        let mut s = spec.clone();
        s.height_mm = h;
        let f: FieldMap<T> = solve_inner(&s, mesh_pitch_mm, target_ghz, Some(top_cells))?;
        Ok((f.frequency_ghz.to_f64_lossy(), f))
    };
    let (f_lo, m_lo) = eval(lo)?;
    let (f_hi, m_hi) = eval(hi)?;
    let slope_sign: i8 = if f_hi > f_lo { 1 } else { -1 };
    let (fmin, fmax) = (f_lo.min(f_hi), f_lo.max(f_hi));
    if !(target_ghz >= fmin && target_ghz <= fmax) {
        return Err(EmError::Tuning(format!(
            "target {target_ghz} GHz outside the reachable range [{fmin:.6}, {fmax:.6}] GHz"
        )));
    }
    let finish = |h: f64, field: FieldMap<T>, evaluations: usize| {
        let mut s = spec.clone();
        s.height_mm = h;
        Ok(Tuned {
            spec: s,
            field,
            slope_sign,
            evaluations,
        })
    };
    if (f_lo - target_ghz).abs() <= tol_ghz {
        return finish(lo, m_lo, evaluations);
    }
    if (f_hi - target_ghz).abs() <= tol_ghz {
        return finish(hi, m_hi, evaluations);
    }
    let (mut a, mut b, mut fa) = (lo, hi, f_lo);
    for _ in 0..60 {
        let m = 0.5 * (a + b);
        let (fm, map) = eval(m)?;
        if (fm - target_ghz).abs() <= tol_ghz {
            return finish(m, map, evaluations);
        }
        if (fm - fa) * (f_hi - f_lo) < 0.0 {
            return Err(EmError::Tuning("frequency is not monotone in ceiling height".into()));
        }
        if (fm > target_ghz) == (fa > target_ghz) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Err(EmError::Tuning("bisection did not reach the tolerance".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subdivision_hits_interfaces() {
        let (nodes, last) = subdivide(&mut vec![0.0, 10.0, 4.5, 8.0], 1.0, None);
        for b in [0.0, 4.5, 8.0, 10.0] {
            assert!(nodes.iter().any(|v| *v == b));
        }
        assert!(nodes.windows(2).all(|w| w[1] - w[0] <= 1.0 + 1e-12));
        assert_eq!(last, 2);
    }

    #[test]
    fn deriv3_exact_for_quadratics() {
        let f = |x: f64| 3.0 * x * x - 2.0 * x + 1.0;
        let df = |x: f64| 6.0 * x - 2.0;
        let x = [0.3, 0.7, 1.6];
        for at in 0..3 {
            let d = deriv3(x, [f(x[0]), f(x[1]), f(x[2])], at);
            assert!((d - df(x[at])).abs() < 1e-12);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(CavitySpec::reference().validate().is_ok());
        let mut s = CavitySpec::reference();
        s.ring.as_mut().unwrap().inner_radius_mm = 0.0;
        assert!(matches!(s.validate(), Err(EmError::InvalidSpec(_))));
        let mut s = CavitySpec::reference();
        s.ring.as_mut().unwrap().outer_radius_mm = 20.0;
        assert!(s.validate().is_err());
        let mut s = CavitySpec::reference();
        s.ring.as_mut().unwrap().permittivity = 0.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn coarse_mesh_rejected() {
        let e = solve_te0_mode::<f64>(&CavitySpec::reference(), 1.0, 1.45).unwrap_err();
        assert!(matches!(e, EmError::MeshTooCoarse(_)));
    }

    #[test]
    fn operator_is_symmetric() {
        let (mesh, _) = Mesh::build(&CavitySpec::reference(), 1.0, None).unwrap();
        let op = Operator::new(mesh);
        let n = op.len();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let (mut ax, mut ay) = (vec![0.0; n], vec![0.0; n]);
        op.apply(&x, &mut ax);
        op.apply(&y, &mut ay);
        let a: f64 = y.iter().zip(&ax).map(|(u, v)| u * v).sum();
        let b: f64 = x.iter().zip(&ay).map(|(u, v)| u * v).sum();
        assert!((a - b).abs() < 1e-10 * a.abs());
    }

    #[test]
    fn energy_normalization_and_sampling() {
        let (nr, nz) = (5, 4);
        let b_z: Vec<f64> = (0..nr * nz).map(|k| 1.0 + (k % nr) as f64 + 2.0 * (k / nr) as f64).collect();
        let mut f = FieldMap::from_components(nr, nz, (0.0, 0.0), (0.5, 0.25), 1.0, vec![0.0; nr * nz], b_z).unwrap();
        f.normalize().unwrap();
        assert!((f.stored_energy_j() - 1.0).abs() < 1e-12);
        let node = f.b2[f.node(2, 1)];
        assert_eq!(f.sample_b2_rz(1.0, 0.25).unwrap(), node);
        assert_eq!(f.sample_b2(Vec3::new(0.6, 0.8, 0.25)).unwrap(), node);
        let c = f.sample_b2_rz(0.25, 0.125).unwrap();
        let mean = 0.25 * (f.b2[0] + f.b2[1] + f.b2[nr] + f.b2[nr + 1]);
        assert!((c - mean).abs() < 1e-12 * mean);
        assert!(matches!(f.sample_b2_rz(2.5, 0.0), Err(EmError::OutOfDomain { .. })));
    }
}
