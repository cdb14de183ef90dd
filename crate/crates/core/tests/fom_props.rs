//! Overlap-integral properties: exact quadrature, bilinearity, invariances, convergence.

use proptest::prelude::*;
use pumpmap_core::emfield::{solve_te0_mode, CavitySpec, FieldMap};
use pumpmap_core::fom::{overlap_delta, overlap_delta_raw, FomError};
use pumpmap_core::geom::Vec3;
use pumpmap_core::grid::{GridSpec, VoxelGrid};
use pumpmap_core::pipeline::{overlap_of, trace_config};
use pumpmap_core::scene::{Configuration, Material, RegionTag, Scene, SceneConfig, Solid, TipStyle};
use pumpmap_core::tracer::TraceOptions;

/// |B|² = c0 + c1·z, independent of r (bilinear interpolation is then exact).
fn linear_field(c0: f64, c1: f64) -> FieldMap<f64> {
    let (nr, nz) = (9, 11);
    let mut bz = Vec::new();
    for j in 0..nz {
        for _ in 0..nr {
            bz.push((c0 + c1 * j as f64).sqrt());
        }
    }
    FieldMap::from_components(nr, nz, (0.0, 0.0), (1.0, 1.0), 1.0, vec![0.0; nr * nz], bz).unwrap()
}

/// Box region [0,2]×[0,1]×[1,3] mm on a grid aligned with it.
fn box_grid(pitch: f64, rho: impl Fn(Vec3<f64>) -> f64) -> VoxelGrid<f64> {
    let m = Material::new("crystal", 1.6, 1.0).unwrap();
    let scene = Scene::from_solids(
        vec![Solid::aa_box(Vec3::new(0.0, 0.0, 1.0), Vec3::new(2.0, 1.0, 3.0), m, RegionTag::Crystal)],
        Material::air(),
    )
    .unwrap();
    let spec = GridSpec::covering(scene.region_bbox(RegionTag::Crystal).unwrap(), pitch).unwrap();
    let mut g = VoxelGrid::for_scene(spec, &scene);
    for k in 0..g.dims[2] {
        for j in 0..g.dims[1] {
            for i in 0..g.dims[0] {
                let idx = g.index(i, j, k);
                g.values[idx] = rho(g.center(i, j, k));
            }
        }
    }
    g
}

#[test]
fn separable_polynomial_overlap_is_exact() {
    let (c0, c1) = (0.7, 0.25);
    let field = linear_field(c0, c1);
    let rho = |p: Vec3<f64>| (1.0 + 0.3 * p.x) * (1.0 + 0.2 * p.y);
    // ∫(1+.3x)dx over [0,2] = 2.6; ∫(1+.2y)dy over [0,1] = 1.1; ∫(c0+c1 z)dz over [1,3] = 2c0 + 4c1
    let exact = 2.6 * 1.1 * (2.0 * c0 + 4.0 * c1);
    for pitch in [0.25, 0.1, 0.05] {
        let g = box_grid(pitch, rho);
        let d = overlap_delta_raw(&g, &field, RegionTag::Crystal).unwrap();
        assert!((d / exact - 1.0).abs() < 1e-12, "pitch {pitch}: {d} vs {exact}");
    }
}

#[test]
fn unnormalized_inputs_are_rejected() {
    let field = linear_field(1.0, 0.0);
    let g = box_grid(0.25, |_| 1.0);
    assert!(matches!(
        overlap_delta(&g, &field, RegionTag::Crystal),
        Err(FomError::Unnormalized(_))
    ));
    let g = g.normalized_to_region(RegionTag::Crystal).unwrap();
    let field = field.normalized().unwrap();
    assert!(overlap_delta(&g, &field, RegionTag::Crystal).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn delta_is_bilinear(a in 0.01..10.0f64, b in 0.01..10.0f64, s in 0.1..5.0f64, c1 in 0.0..1.0f64) {
        let field = linear_field(0.5, c1);
        let g1 = box_grid(0.25, |p| 1.0 + p.x * p.y);
        let g2 = box_grid(0.25, |p| (p.z - 1.0).powi(2));
        let mut mix = g1.clone();
        for (m, (x, y)) in mix.values.iter_mut().zip(g1.values.iter().zip(&g2.values)) {
            *m = a * x + b * y;
        }
        let d1 = overlap_delta_raw(&g1, &field, RegionTag::Crystal).unwrap();
        let d2 = overlap_delta_raw(&g2, &field, RegionTag::Crystal).unwrap();
        let dm = overlap_delta_raw(&mix, &field, RegionTag::Crystal).unwrap();
        prop_assert!((dm - (a * d1 + b * d2)).abs() <= 1e-12 * dm.abs());

        let scaled = FieldMap::from_components(
            field.nr, field.nz, (field.r0, field.z0), (field.dr, field.dz), 1.0,
            field.b_r.clone(), field.b_z.iter().map(|v| v * s).collect(),
        ).unwrap();
        let ds = overlap_delta_raw(&g1, &scaled, RegionTag::Crystal).unwrap();
        prop_assert!((ds - s * s * d1).abs() <= 1e-12 * ds.abs());
    }

    #[test]
    fn rigid_translation_leaves_delta_unchanged(dx in -2.0..2.0f64, dy in -2.0..2.0f64, dz in -0.5..0.5f64) {
        let field = linear_field(0.5, 0.3);
        let g = box_grid(0.25, |p| 1.0 + p.x);
        let off = Vec3::new(dx, dy, dz);
        let mut moved = g.clone();
        moved.origin = moved.origin + off;
        let d0 = overlap_delta_raw(&g, &field, RegionTag::Crystal).unwrap();
        let d1 = overlap_delta_raw(&moved, &field.translated(off), RegionTag::Crystal).unwrap();
        prop_assert!((d1 / d0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_is_idempotent(c0 in 0.1..10.0f64, c1 in 0.0..3.0f64, k in 0.1..100.0f64) {
        let once = linear_field(c0, c1).normalized().unwrap();
        let twice = once.clone().normalized().unwrap();
        for (a, b) in once.b2.iter().zip(&twice.b2) {
            prop_assert!((a - b).abs() <= 1e-14 * a.abs());
        }
        let g = box_grid(0.5, |p| k * (1.0 + p.z));
        let n1 = g.normalized_to_region(RegionTag::Crystal).unwrap();
        let n2 = n1.normalized_to_region(RegionTag::Crystal).unwrap();
        prop_assert!((n1.region_integral(RegionTag::Crystal) - 1.0).abs() < 1e-12);
        for (a, b) in n1.values.iter().zip(&n2.values) {
            prop_assert!((a - b).abs() <= 1e-14 * a.abs());
        }
    }
}

#[test]
fn halving_the_voxel_pitch_changes_delta_by_under_two_percent() {
    let mut spec = CavitySpec::reference();
    spec.height_mm = 20.625;
    let field: FieldMap<f64> = solve_te0_mode(&spec, 0.3, 1.4496).unwrap();
    let mut inv = SceneConfig::new(Configuration::Invasive, TipStyle::Wedge);
    inv.tip_full_angle_deg = 90.0;
    inv.crystal.length_mm = 6.0;
    inv.crystal.base_z_mm = 4.0;
    inv.crystal.insertion_depth_mm = Some(5.9);
    let mut butt = SceneConfig::new(Configuration::Butt, TipStyle::Flat);
    butt.crystal.base_z_mm = 5.15;
    for cfg in [inv, butt] {
        let opts = TraceOptions::new(200_000, 31);
        let (_, coarse) = trace_config::<f64>(&cfg, &opts, 0.2, "").unwrap();
        let (_, fine) = trace_config::<f64>(&cfg, &opts, 0.1, "").unwrap();
        let dc = overlap_of(&coarse, &field).unwrap().delta;
        let df = overlap_of(&fine, &field).unwrap().delta;
        assert!((dc / df - 1.0).abs() < 0.02, "{:?}: {dc} vs {df}", cfg.configuration);
    }
}
