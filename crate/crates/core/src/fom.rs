//! Figures of merit: optical/microwave overlap Δ, uniform-pumping baseline,
//! cooperativity Γ, magnetic Q and the meter correction factor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emfield::{EmError, FieldMap};
use crate::grid::{GridError, VoxelGrid};
use crate::num::{Real, MU_0};
use crate::scene::RegionTag;
use crate::tracer::TraceResult;

/// Unit convention printed next to every Δ.
pub const DELTA_CONVENTION: &str = "T^2*W (rho normalized to 1 W absorbed in the region, |B|^2 to 1 J stored magnetic energy)";
/// Relative slack accepted when checking the 1 W / 1 J normalizations.
pub const NORMALIZATION_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FomError {
    #[error("unnormalized input: {0}")]
    Unnormalized(String),
    #[error("region `{0}` has no voxels")]
    RegionEmpty(&'static str),
    #[error("missing spin-system constant `{0}`")]
    MissingConstant(&'static str),
    #[error("invalid constant `{0}`: {1}")]
    InvalidConstant(&'static str, String),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("detector received no power")]
    ZeroDetectorPower,
    #[error(transparent)]
    Field(#[from] EmError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn check_region<T: Real>(grid: &VoxelGrid<T>, region: RegionTag) -> Result<(), FomError> {
    if grid.region_count(region) == 0 {
        Err(FomError::RegionEmpty(region.name()))
    } else {
        Ok(())
    }
}

/// Δ = Σ ρ̃·|B̃|²(centre)·pitch³ over voxels tagged `region`. Requires the grid
/// to integrate to 1 W over the region and the field to hold 1 J.
pub fn overlap_delta<T: Real>(grid: &VoxelGrid<T>, field: &FieldMap<T>, region: RegionTag) -> Result<T, FomError> {
    check_region(grid, region)?;
    let tol = T::lit(NORMALIZATION_TOL);
    let p = grid.region_integral(region);
    if (p - T::one()).abs() > tol {
        return Err(FomError::Unnormalized(format!(
            "optical density integrates to {p} W over `{}`, expected 1 W",
            region.name()
        )));
    }
    let w = field.stored_energy_j();
    if (w - T::one()).abs() > tol {
        return Err(FomError::Unnormalized(format!("field stores {w} J, expected 1 J")));
    }
    overlap_delta_raw(grid, field, region)
}

/// [`overlap_delta`] without the normalization checks.
pub fn overlap_delta_raw<T: Real>(grid: &VoxelGrid<T>, field: &FieldMap<T>, region: RegionTag) -> Result<T, FomError> {
    check_region(grid, region)?;
    let mut sum = T::zero();
    for k in 0..grid.dims[2] {
        for j in 0..grid.dims[1] {
            for i in 0..grid.dims[0] {
                let idx = grid.index(i, j, k);
                if grid.region[idx] != region {
                    continue;
                }
                let rho = grid.values[idx];
                // every region voxel must lie inside the field map, even unlit ones
                let b2 = field.sample_b2(grid.center(i, j, k))?;
                sum += rho * b2;
            }
        }
    }
    Ok(sum * grid.voxel_volume())
}

/// Δ for perfectly uniform absorption of 1 W over the region of `grid`.
pub fn uniform_delta<T: Real>(field: &FieldMap<T>, grid: &VoxelGrid<T>, region: RegionTag) -> Result<T, FomError> {
    let uniform = grid.uniform_over(region)?;
    overlap_delta(&uniform, field, region)
}

/// Scalars of the cooperativity formula. Every field must be supplied
/// explicitly; [`SpinSystemConstants::literature_placeholder`] is a labelled
/// stand-in, not measured data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SpinSystemConstants {
    /// Name of the value set, echoed in reports.
    #[serde(default)]
    pub profile: Option<String>,
    pub gyromagnetic_ratio_rad_per_s_t: Option<f64>,
    pub sigma2: Option<f64>,
    pub theta_isc_eff: Option<f64>,
    pub t1_eff_s: Option<f64>,
    pub t2_star_s: Option<f64>,
    pub omega_opt_rad_per_s: Option<f64>,
    pub q_loaded: Option<f64>,
}

impl SpinSystemConstants {
    /// Order-of-magnitude values for 0.1% pentacene:p-terphenyl at room
    /// temperature pumped near 570 nm. For exploration only.
    pub fn literature_placeholder() -> Self {
        Self {
            profile: Some("literature-placeholder".into()),
            gyromagnetic_ratio_rad_per_s_t: Some(crate::num::GAMMA_E),
            sigma2: Some(0.5),
            theta_isc_eff: Some(0.6),
            t1_eff_s: Some(135e-6),
            t2_star_s: Some(0.3e-6),
            omega_opt_rad_per_s: Some(2.0 * std::f64::consts::PI * 299_792_458.0 / 570e-9),
            q_loaded: Some(6000.0),
        }
    }

    fn get(v: Option<f64>, name: &'static str) -> Result<f64, FomError> {
        let v = v.ok_or(FomError::MissingConstant(name))?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(FomError::InvalidConstant(name, format!("{v} is not strictly positive")));
        }
        Ok(v)
    }

    /// γ²σ²·Θ·T₁·T₂*·Q_L/ω_opt in T⁻²·s, after validating every constant.
    pub fn prefactor(&self) -> Result<f64, FomError> {
        let gamma = Self::get(self.gyromagnetic_ratio_rad_per_s_t, "gyromagnetic_ratio_rad_per_s_t")?;
        let sigma2 = Self::get(self.sigma2, "sigma2")?;
        let theta = Self::get(self.theta_isc_eff, "theta_isc_eff")?;
        if theta > 1.0 {
            return Err(FomError::InvalidConstant("theta_isc_eff", format!("{theta} exceeds 1")));
        }
        let t1 = Self::get(self.t1_eff_s, "t1_eff_s")?;
        let t2 = Self::get(self.t2_star_s, "t2_star_s")?;
        let omega = Self::get(self.omega_opt_rad_per_s, "omega_opt_rad_per_s")?;
        let q = Self::get(self.q_loaded, "q_loaded")?;
        Ok(gamma * gamma * sigma2 * theta * t1 * t2 * q / omega)
    }
}

/// Γ = μ₀γ²σ²·(Θ T₁ T₂*/ω_opt)·Q_L·P·Δ / ∫|B̃|²dV with ∫|B̃|²dV = 2μ₀·(1 J).
pub fn cooperativity(constants: &SpinSystemConstants, delta_t2w: f64, pump_power_w: f64) -> Result<f64, FomError> {
    let pre = constants.prefactor()?;
    if !(pump_power_w >= 0.0) {
        return Err(FomError::NonPositive("pump power"));
    }
    if !(delta_t2w >= 0.0) {
        return Err(FomError::NonPositive("delta"));
    }
    let field_norm = 2.0 * MU_0 * 1.0;
    Ok(MU_0 * pre * pump_power_w * delta_t2w / field_norm)
}

/// Γ from how far a pulse energy exceeds the measured threshold.
pub fn gamma_from_threshold(pulse_energy_mj: f64, threshold_energy_mj: f64) -> Result<f64, FomError> {
    if !(threshold_energy_mj > 0.0) {
        return Err(FomError::NonPositive("threshold energy"));
    }
    if !(pulse_energy_mj >= 0.0) {
        return Err(FomError::NonPositive("pulse energy"));
    }
    Ok(pulse_energy_mj / threshold_energy_mj)
}

/// Magnetic quality factor Q_m = Q₀/Γ.
pub fn qm_from_gamma(q0: f64, gamma: f64) -> Result<f64, FomError> {
    if !(q0 > 0.0) {
        return Err(FomError::NonPositive("q0"));
    }
    if !(gamma > 0.0) {
        return Err(FomError::NonPositive("gamma"));
    }
    Ok(q0 / gamma)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionFactor {
    pub value: f64,
    /// One-sigma statistical error from both traces.
    pub std_error: f64,
    pub crystal_fraction: f64,
    pub detector_fraction: f64,
}

/// Crystal-absorbed fraction over meter-arrival fraction, from two independent traces.
pub fn correction_factor<T: Real>(
    crystal_run: &TraceResult<T>,
    meter_run: &TraceResult<T>,
) -> Result<CorrectionFactor, FomError> {
    let a = crystal_run.absorbed_fraction().to_f64_lossy();
    let d = meter_run.detector_fraction().to_f64_lossy();
    if !(d > 0.0) {
        return Err(FomError::ZeroDetectorPower);
    }
    let sa = crystal_run.absorbed_fraction_std_error().to_f64_lossy();
    let sd = meter_run.detector_fraction_std_error().to_f64_lossy();
    let value = a / d;
    let std_error = value * ((sa / a).powi(2) + (sd / d).powi(2)).sqrt();
    Ok(CorrectionFactor {
        value,
        std_error,
        crystal_fraction: a,
        detector_fraction: d,
    })
}

/// One row of an overlap report.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FomReport {
    pub label: String,
    pub delta: f64,
    pub delta_uniform: Option<f64>,
    /// Δ relative to a reference configuration (or to uniform pumping).
    pub ratio: Option<f64>,
    pub gamma: Option<f64>,
    pub q_m: Option<f64>,
    pub threshold_energy_mj: Option<f64>,
    pub correction_factor: Option<f64>,
    pub seeds: Vec<u64>,
    /// (name, sha256 hex) of configs and input files.
    pub digests: Vec<(String, String)>,
}

impl FomReport {
    pub const CSV_SCHEMA: &'static str = "# schema: pumpmap-overlap-report/1";
    pub const CSV_HEADER: &'static str =
        "label,delta_T2W,delta_uniform_T2W,ratio,gamma,qm,threshold_energy_mJ,correction_factor,seeds,hashes,convention";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
        let hashes = self
            .digests
            .iter()
            .map(|(n, h)| format!("{n}={h}"))
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "{},{:e},{},{},{},{},{},{},{},{},\"{}\"",
            self.label,
            self.delta,
            opt(self.delta_uniform),
            opt(self.ratio),
            opt(self.gamma),
            opt(self.q_m),
            opt(self.threshold_energy_mj),
            opt(self.correction_factor),
            seeds,
            hashes,
            DELTA_CONVENTION
        )
    }

    pub fn to_csv(rows: &[FomReport]) -> String {
        let mut s = format!("{}\n{}\n", Self::CSV_SCHEMA, Self::CSV_HEADER);
        for r in rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use crate::grid::GridSpec;

    fn const_field(b: f64) -> FieldMap<f64> {
        let (nr, nz) = (11, 11);
        let f = FieldMap::from_components(
            nr,
            nz,
            (0.0, -5.0),
            (1.0, 1.0),
            1.45,
            vec![0.0; nr * nz],
            vec![b.sqrt(); nr * nz],
        )
        .unwrap();
        f
    }

    fn crystal_grid() -> VoxelGrid<f64> {
        let mut g = VoxelGrid::zeros(GridSpec {
            origin: Vec3::new(-1.0, -1.0, -1.0),
            dims: [4, 4, 4],
            pitch: 0.5,
        });
        g.region.iter_mut().for_each(|r| *r = RegionTag::Crystal);
        g
    }

    #[test]
    fn single_voxel_delta_is_b_times_one_watt() {
        let mut g = crystal_grid();
        let idx = g.index(1, 2, 3);
        g.values[idx] = 1.0 / g.voxel_volume();
        let f = const_field(2.5);
        assert!((overlap_delta_raw(&g, &f, RegionTag::Crystal).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_inputs_rejected() {
        let mut g = crystal_grid();
        g.values[0] = 3.0;
        let f = const_field(1.0);
        assert!(matches!(overlap_delta(&g, &f, RegionTag::Crystal), Err(FomError::Unnormalized(_))));
        let g = g.normalized_to_region(RegionTag::Crystal).unwrap();
        // the synthetic field is not energy-normalized
        assert!(matches!(overlap_delta(&g, &f, RegionTag::Crystal), Err(FomError::Unnormalized(_))));
        let f = f.normalized().unwrap();
        assert!(overlap_delta(&g, &f, RegionTag::Crystal).is_ok());
    }

    #[test]
    fn empty_region() {
        let g = crystal_grid();
        let f = const_field(1.0);
        assert!(matches!(
            overlap_delta_raw(&g, &f, RegionTag::Detector),
            Err(FomError::RegionEmpty("detector"))
        ));
        assert!(uniform_delta(&f, &g, RegionTag::Detector).is_err());
    }

    #[test]
    fn threshold_and_qm_arithmetic() {
        assert!((gamma_from_threshold(6.0, 3.3).unwrap() - 1.818_181_818_181_818).abs() < 1e-15);
        assert_eq!(gamma_from_threshold(3.3, 3.3).unwrap(), 1.0);
        assert!((gamma_from_threshold(9.9, 3.3).unwrap() - 3.0).abs() < 1e-15);
        assert_eq!(qm_from_gamma(6000.0, 2.0).unwrap(), 3000.0);
        assert_eq!(qm_from_gamma(6000.0, 1.0).unwrap(), 6000.0);
        assert!((8900.0 / 4500.0f64 - 1.98).abs() < 0.005);
        assert!(gamma_from_threshold(1.0, 0.0).is_err());
        assert!(qm_from_gamma(6000.0, 0.0).is_err());
    }

    #[test]
    fn cooperativity_is_linear_and_needs_constants() {
        let c = SpinSystemConstants::literature_placeholder();
        assert_eq!(cooperativity(&c, 1e-3, 0.0).unwrap(), 0.0);
        let g1 = cooperativity(&c, 1e-3, 10.0).unwrap();
        let g2 = cooperativity(&c, 1e-3, 20.0).unwrap();
        assert_eq!(g2, 2.0 * g1);
        let mut c2 = c.clone();
        c2.q_loaded = Some(12000.0);
        assert_eq!(cooperativity(&c2, 1e-3, 10.0).unwrap(), 2.0 * g1);
        let mut missing = c.clone();
        missing.t2_star_s = None;
        assert!(matches!(
            cooperativity(&missing, 1e-3, 1.0),
            Err(FomError::MissingConstant("t2_star_s"))
        ));
        let mut bad = c;
        bad.theta_isc_eff = Some(1.5);
        assert!(matches!(cooperativity(&bad, 1e-3, 1.0), Err(FomError::InvalidConstant(..))));
    }

    #[test]
    fn report_csv_has_schema_and_header() {
        let r = FomReport {
            label: "invasive".into(),
            delta: 4.6e-3,
            seeds: vec![1, 2],
            digests: vec![("cfg".into(), "ab".into())],
            ..Default::default()
        };
        let csv = FomReport::to_csv(&[r]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], FomReport::CSV_SCHEMA);
        assert_eq!(lines[1], FomReport::CSV_HEADER);
        assert!(lines[2].starts_with("invasive,4.6e-3,"));
        assert!(lines[2].contains("1;2") && lines[2].contains("cfg=ab"));
    }
}
