//! Mode-solver oracles: closed-form TE011, tuning, convergence, file round trips.

use std::f64::consts::PI;

use pumpmap_core::emfield::{solve_te0_mode, tune_ceiling, CavitySpec, FieldMap, RESIDUAL_BOUND};
use pumpmap_core::fom::uniform_delta;
use pumpmap_core::geom::Vec3;
use pumpmap_core::grid::{GridSpec, VoxelGrid};
use pumpmap_core::num::MU_0;
use pumpmap_core::scene::{Material, RegionTag, Scene, Solid};

const C0: f64 = 299_792_458.0;
/// First root of J1 (= first extremum of J0).
const X01P: f64 = 3.831_705_970_207_512;
const TARGET_GHZ: f64 = 1.4496;

fn bessel_j(n: i32, x: f64) -> f64 {
    // power series; plenty for x < 5
    let mut term = (0.5 * x).powi(n) / (1..=n).map(f64::from).product::<f64>();
    let mut sum = term;
    for k in 1..60 {
        term *= -(0.25 * x * x) / (k as f64 * (k + n) as f64);
        sum += term;
    }
    sum
}

fn te011_ghz(a_mm: f64, l_mm: f64) -> f64 {
    let kr = X01P / (a_mm * 1e-3);
    let kz = PI / (l_mm * 1e-3);
    C0 / (2.0 * PI) * (kr * kr + kz * kz).sqrt() * 1e-9
}

fn reference_field(pitch: f64) -> FieldMap<f64> {
    let mut spec = CavitySpec::reference();
    spec.height_mm = 20.625;
    solve_te0_mode(&spec, pitch, TARGET_GHZ).unwrap()
}

#[test]
fn bessel_helper_matches_tables() {
    assert!((bessel_j(0, 1.0) - 0.765_197_686_557_966_6).abs() < 1e-14);
    assert!((bessel_j(1, 2.0) - 0.576_724_807_756_873_4).abs() < 1e-14);
    assert!(bessel_j(1, X01P).abs() < 1e-14);
}

#[test]
fn empty_cavity_te011_matches_closed_form() {
    let (a, l) = (40.0, 30.0);
    let exact = te011_ghz(a, l);
    assert!((exact - 6.772).abs() < 1e-3);
    let f: FieldMap<f64> = solve_te0_mode(&CavitySpec::empty(a, l), 0.5, exact).unwrap();
    let rel = (f.frequency_ghz / exact - 1.0).abs();
    assert!(rel < 0.005, "f = {} GHz vs {exact}", f.frequency_ghz);
    assert!(f.residual.unwrap() <= RESIDUAL_BOUND);

    // B_r vanishes on the axis; on-axis B_z peaks at mid-height
    let peak = f.b2.iter().copied().fold(0.0, f64::max).sqrt();
    for j in 0..f.nz {
        assert!(f.b_r[f.node(0, j)].abs() <= 1e-9 * peak);
    }
    let (jmax, _) = (0..f.nz)
        .map(|j| (j, f.b_z[f.node(0, j)].abs()))
        .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    let z_peak = f.z0 + f.dz * jmax as f64;
    assert!((z_peak - 0.5 * l).abs() <= f.dz, "B_z peak at z = {z_peak}");
    assert!((f.stored_energy_j() - 1.0).abs() < 1e-9);
}

#[test]
fn reference_cavity_tunes_to_target() {
    let t = tune_ceiling::<f64>(&CavitySpec::reference(), TARGET_GHZ, 0.25, 1e-3, None).unwrap();
    assert!((t.field.frequency_ghz - TARGET_GHZ).abs() <= 1e-3, "tuned to {}", t.field.frequency_ghz);
    assert!(t.field.residual.unwrap() <= RESIDUAL_BOUND);
    assert!(t.field.ring_energy_fraction.unwrap() > 0.5);
    assert_eq!(t.slope_sign, -1);
}

#[test]
fn raising_the_ceiling_lowers_the_frequency() {
    let mut prev = f64::INFINITY;
    for h in [18.0, 19.5, 21.0, 23.0, 26.0] {
        let mut spec = CavitySpec::reference();
        spec.height_mm = h;
        let f: FieldMap<f64> = solve_te0_mode(&spec, 0.3, TARGET_GHZ).unwrap();
        assert!(f.frequency_ghz < prev, "h = {h}: {} GHz", f.frequency_ghz);
        prev = f.frequency_ghz;
    }
}

fn crystal_grid(pitch: f64) -> VoxelGrid<f64> {
    let crystal = Material::new("crystal", 1.65, 2.0).unwrap();
    let scene = Scene::from_solids(
        vec![Solid::z_cylinder(4.0, 6.0, 12.0, crystal, RegionTag::Crystal)],
        Material::air(),
    )
    .unwrap();
    let spec = GridSpec::covering(scene.region_bbox(RegionTag::Crystal).unwrap(), pitch).unwrap();
    VoxelGrid::for_scene(spec, &scene)
}

#[test]
fn halving_the_mesh_pitch_converges() {
    let coarse = reference_field(0.3);
    let fine = reference_field(0.15);
    let df = (coarse.frequency_ghz / fine.frequency_ghz - 1.0).abs();
    assert!(df < 0.002, "frequency moved {df}");
    let grid = crystal_grid(0.1);
    let dc = uniform_delta(&coarse, &grid, RegionTag::Crystal).unwrap();
    let dfine = uniform_delta(&fine, &grid, RegionTag::Crystal).unwrap();
    assert!((dc / dfine - 1.0).abs() < 0.01, "delta {dc} vs {dfine}");
}

#[test]
fn fmp1_round_trip_is_bit_exact() {
    let f = reference_field(0.3);
    let mut a = Vec::new();
    f.write_fmp1(&mut a).unwrap();
    let g = FieldMap::<f64>::read_fmp1(a.as_slice()).unwrap();
    let mut b = Vec::new();
    g.write_fmp1(&mut b).unwrap();
    assert_eq!(a, b);
    assert_eq!(f.b_r, g.b_r);
    assert_eq!(f.b_z, g.b_z);
    let h = FieldMap::<f64>::import_fmp1(a.as_slice()).unwrap();
    assert_eq!(h.renormalized_from_j, None);
}

#[test]
fn two_joule_import_halves_b_squared() {
    let f = reference_field(0.3);
    let s = 2f64.sqrt();
    let doubled = FieldMap::from_components(
        f.nr,
        f.nz,
        (f.r0, f.z0),
        (f.dr, f.dz),
        f.frequency_ghz,
        f.b_r.iter().map(|v| v * s).collect(),
        f.b_z.iter().map(|v| v * s).collect(),
    )
    .unwrap();
    let mut bytes = Vec::new();
    doubled.write_fmp1(&mut bytes).unwrap();
    let imported = FieldMap::<f64>::import_fmp1(bytes.as_slice()).unwrap();
    let w = imported.renormalized_from_j.unwrap();
    assert!((w - 2.0).abs() < 1e-9);
    for (a, b) in imported.b2.iter().zip(&doubled.b2) {
        assert!((a - 0.5 * b).abs() <= 1e-12 * b.abs().max(1e-30));
    }
}

#[test]
fn non_axisymmetric_import_rejected() {
    let n = 4;
    let bad = FieldMap::from_components(n, n, (-1.0, 0.0), (1.0, 1.0), 1.0, vec![1.0; n * n], vec![1.0; n * n]).unwrap();
    let mut bytes = Vec::new();
    bad.write_fmp1(&mut bytes).unwrap();
    assert!(FieldMap::<f64>::import_fmp1(bytes.as_slice()).is_err());
}

/// 16-point Gauss–Legendre nodes and weights on [-1, 1].
fn gauss_legendre() -> Vec<(f64, f64)> {
    let n = 16;
    (1..=n)
        .map(|i| {
            let mut x = (PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                x -= p1 / dp;
                if (p1 / dp).abs() < 1e-16 {
                    break;
                }
            }
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

#[test]
fn analytic_te011_field_gives_exact_uniform_delta() {
    let (a, l) = (16.0, 20.0);
    let kr = X01P / a;
    let kz = PI / l;
    let b2 = |r: f64, z: f64| {
        let br = -kz * bessel_j(1, kr * r) * (kz * z).cos();
        let bz = kr * bessel_j(0, kr * r) * (kz * z).sin();
        br * br + bz * bz
    };
    // closed-form energy: ∫|B|² dV = 2π (a² L / 4) J0(x)² (kr² + kz²), in mm³
    let energy_mm3 = 2.0 * PI * a * a * l / 4.0 * bessel_j(0, X01P).powi(2) * (kr * kr + kz * kz);
    let scale2 = 2.0 * MU_0 / (energy_mm3 * 1e-9);

    let h = 0.05;
    let (nr, nz) = ((a / h) as usize + 1, (l / h) as usize + 1);
    let mut br = Vec::with_capacity(nr * nz);
    let mut bz = Vec::with_capacity(nr * nz);
    for j in 0..nz {
        for i in 0..nr {
            let (r, z) = (i as f64 * h, j as f64 * h);
            br.push(-kz * bessel_j(1, kr * r) * (kz * z).cos());
            bz.push(kr * bessel_j(0, kr * r) * (kz * z).sin());
        }
    }
    let field = FieldMap::from_components(nr, nz, (0.0, 0.0), (h, h), 0.0, br, bz)
        .unwrap()
        .normalized()
        .unwrap();

    // region: r < 4, 6 < z < 12; exact mean of |B|² by Gauss–Legendre
    let (rc, z0, z1) = (4.0, 6.0, 12.0);
    let gl = gauss_legendre();
    let mut integral = 0.0;
    for &(xr, wr) in &gl {
        let r = 0.5 * rc * (xr + 1.0);
        for &(xz, wz) in &gl {
            let z = z0 + 0.5 * (z1 - z0) * (xz + 1.0);
            integral += wr * wz * r * b2(r, z);
        }
    }
    integral *= 2.0 * PI * 0.5 * rc * 0.5 * (z1 - z0);
    let volume = PI * rc * rc * (z1 - z0);
    let exact = scale2 * integral / volume;

    let grid = crystal_grid(0.05);
    let delta = uniform_delta(&field, &grid, RegionTag::Crystal).unwrap();
    assert!((delta / exact - 1.0).abs() < 1e-3, "delta {delta} vs exact {exact}");

    // the translated field over the translated grid gives the same Δ
    let off = Vec3::new(1.5, -2.0, 0.75);
    let mut moved = grid.clone();
    moved.origin = moved.origin + off;
    let d2 = uniform_delta(&field.translated(off), &moved, RegionTag::Crystal).unwrap();
    assert!((d2 / delta - 1.0).abs() < 1e-12);
}
