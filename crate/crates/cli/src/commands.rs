//! Command implementations. Each writes its outputs plus a run manifest.

use std::fmt::Write as _;
use std::path::Path;

use pumpmap_core::config::{self, Loaded};
use pumpmap_core::emfield::{solve_te0_mode, tune_ceiling, CavitySpec, FMP1_MAGIC};
use pumpmap_core::fom::{
    cooperativity, correction_factor, gamma_from_threshold, overlap_delta, qm_from_gamma, uniform_delta, FomReport,
    SpinSystemConstants,
};
use pumpmap_core::geom::Axis;
use pumpmap_core::grid::VGD1_MAGIC;
use pumpmap_core::pipeline::{self, linspace};
use pumpmap_core::scene::{RegionTag, SceneConfig};
use pumpmap_core::source::derive_seed;
use pumpmap_core::tracer::TraceOptions;
use pumpmap_core::{FieldMap, TraceResult, VoxelGrid};

use crate::error::CliError;
use crate::manifest::{sidecar, RunManifest};
use crate::{CompareArgs, GammaOpts, InspectArgs, ModeArgs, OverlapArgs, SweepArgs, TraceArgs, TraceOpts};

type Result<T> = std::result::Result<T, CliError>;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Loads a config and records its verbatim text in the manifest.
fn load_config<C: serde::de::DeserializeOwned>(path: &Path, m: &mut RunManifest) -> Result<Loaded<C>> {
    let text = read_text(path)?;
    let loaded = config::parse_str(&text, &path.display().to_string())?;
    m.add_config(path, text);
    Ok(loaded)
}

fn load_field(path: &Path, m: &mut RunManifest) -> Result<(FieldMap, String)> {
    let bytes = read_bytes(path)?;
    let digest = m.add_input(path, &bytes);
    let field = FieldMap::import_fmp1(bytes.as_slice())?;
    if let Some(w) = field.renormalized_from_j {
        let msg = format!("{}: stored energy {w:e} J, renormalized to 1 J", path.display());
        eprintln!("warning: {msg}");
        m.warnings.push(msg);
    }
    Ok((field, digest))
}

fn check_opts(o: &TraceOpts) -> Result<u64> {
    if o.rays == 0 {
        return Err(CliError::BadArgs("--rays must be at least 1".into()));
    }
    if o.workers == 0 {
        return Err(CliError::BadArgs("--workers must be at least 1".into()));
    }
    if !(o.pitch_mm > 0.0 && o.pitch_mm.is_finite()) {
        return Err(CliError::BadArgs("--pitch-mm must be positive".into()));
    }
    o.seed
        .ok_or_else(|| CliError::BadArgs("no seed: pass --seed or set PUMPMAP_SEED".into()))
}

fn vgd_bytes(grid: &VoxelGrid) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    grid.write_vgd1(&mut buf)?;
    Ok(buf)
}

fn record_budget(m: &mut RunManifest, prefix: &str, r: &TraceResult) {
    let e = r.emitted_w;
    let mut put = |k: &str, v: f64| {
        m.results.insert(format!("{prefix}{k}"), v);
    };
    put("emitted_w", e);
    put("absorbed_fraction", r.absorbed_fraction());
    put("absorbed_fraction_std_error", r.absorbed_fraction_std_error());
    put("escaped_fraction", r.escaped_w / e);
    put("retro_reflected_fraction", r.retro_reflected_w / e);
    put("detector_fraction", r.detector_fraction());
    put("detector_fraction_std_error", r.detector_fraction_std_error());
    put("terminated_fraction", r.terminated_w / e);
    put("conservation_error", r.conservation_error());
    m.warnings.extend(r.warnings.iter().cloned());
}

fn print_budget(label: &str, r: &TraceResult) {
    let e = r.emitted_w;
    println!("{label}: {} rays, emitted {e:.6} W", r.rays_traced);
    println!(
        "  absorbed  {:.6} ± {:.6}",
        r.absorbed_fraction(),
        r.absorbed_fraction_std_error()
    );
    println!("  escaped   {:.6}", r.escaped_w / e);
    println!("  retro     {:.6}", r.retro_reflected_w / e);
    println!(
        "  detector  {:.6} ± {:.6}",
        r.detector_fraction(),
        r.detector_fraction_std_error()
    );
    println!("  terminated {:.3e}", r.terminated_w / e);
    println!("  conservation error {:.3e}", r.conservation_error());
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
}

fn trace_scene(cfg: &SceneConfig, o: &TraceOpts, seed: u64, digest: &str) -> Result<TraceResult> {
    let opts = TraceOptions::new(o.rays, seed).with_workers(o.workers);
    let (_, r) = pipeline::trace_config::<f64>(cfg, &opts, o.pitch_mm, digest)?;
    Ok(r)
}

pub fn trace(a: TraceArgs) -> Result<()> {
    let seed = check_opts(&a.opts)?;
    let mut m = RunManifest::start();
    m.seed = Some(seed);
    m.workers = Some(a.opts.workers);
    let cfg: Loaded<SceneConfig> = load_config(&a.config, &mut m)?;
    let r = trace_scene(&cfg.config, &a.opts, seed, &cfg.digest)?;
    print_budget(&a.config.display().to_string(), &r);
    record_budget(&mut m, "", &r);
    m.write_output(&a.out, &vgd_bytes(&r.grid)?)?;
    m.finish(&sidecar(&a.out))
}

pub fn mode(a: ModeArgs) -> Result<()> {
    let mut m = RunManifest::start();
    let spec: Loaded<CavitySpec> = load_config(&a.config, &mut m)?;
    let (spec, field) = if a.tune {
        let bracket = a.bracket_mm.as_ref().map(|b| (b[0], b[1]));
        let tuned = tune_ceiling::<f64>(&spec.config, a.target_ghz, a.pitch_mm, a.tol_ghz, bracket)?;
        println!(
            "tuned ceiling {:.6} mm after {} solves (frequency {} with rising ceiling)",
            tuned.spec.height_mm,
            tuned.evaluations,
            if tuned.slope_sign < 0 { "falls" } else { "rises" }
        );
        m.results.insert("ceiling_mm".into(), tuned.spec.height_mm);
        m.results.insert("tuning_solves".into(), tuned.evaluations as f64);
        (tuned.spec, tuned.field)
    } else {
        let f = solve_te0_mode::<f64>(&spec.config, a.pitch_mm, a.target_ghz)?;
        (spec.config, f)
    };
    println!("frequency {:.9} GHz", field.frequency_ghz);
    m.results.insert("frequency_ghz".into(), field.frequency_ghz);
    if let Some(res) = field.residual {
        println!("residual  {res:.3e}");
        m.results.insert("residual".into(), res);
    }
    if let Some(frac) = field.ring_energy_fraction {
        println!("ring electric-energy fraction {frac:.4}");
        m.results.insert("ring_energy_fraction".into(), frac);
    }
    let mut buf = Vec::new();
    field.write_fmp1(&mut buf)?;
    m.write_output(&a.out, &buf)?;
    if let Some(p) = &a.tuned_config {
        let text = toml::to_string(&spec).map_err(|e| CliError::Io(e.to_string()))?;
        m.write_output(p, text.as_bytes())?;
    }
    m.finish(&sidecar(&a.out))
}

/// Spin constants and pump power, when `--constants` is given.
fn load_gamma_inputs(g: &GammaOpts, m: &mut RunManifest) -> Result<Option<(SpinSystemConstants, f64)>> {
    let Some(path) = &g.constants else {
        return Ok(None);
    };
    let c: Loaded<SpinSystemConstants> = load_config(path, m)?;
    let p = g
        .pump_power_w
        .ok_or_else(|| CliError::BadArgs("--constants needs --pump-power-w".into()))?;
    if let Some(profile) = &c.config.profile {
        m.warnings.push(format!("spin constants profile: {profile}"));
    }
    Ok(Some((c.config, p)))
}

fn gamma_from_constants(c: &Option<(SpinSystemConstants, f64)>, delta: f64) -> Result<Option<f64>> {
    c.as_ref().map(|(c, p)| cooperativity(c, delta, *p)).transpose().map_err(Into::into)
}

pub fn overlap(a: OverlapArgs) -> Result<()> {
    let mut m = RunManifest::start();
    let grid_bytes = read_bytes(&a.grid)?;
    let grid_digest = m.add_input(&a.grid, &grid_bytes);
    let grid = VoxelGrid::read_vgd1(grid_bytes.as_slice())?;
    let (field, field_digest) = load_field(&a.field, &mut m)?;

    let norm = grid.normalized_to_region(a.region)?;
    let delta = overlap_delta(&norm, &field, a.region)?;
    let du = uniform_delta(&field, &grid, a.region)?;
    let constants = load_gamma_inputs(&a.gamma, &mut m)?;
    let gamma = match (&constants, a.pulse_energy_mj) {
        (Some(_), _) => gamma_from_constants(&constants, delta)?,
        (None, Some(e)) => Some(gamma_from_threshold(e, a.threshold_mj)?),
        (None, None) => None,
    };
    let q_m = match (a.q0, gamma) {
        (Some(q0), Some(g)) => Some(qm_from_gamma(q0, g)?),
        _ => None,
    };
    let seeds = match RunManifest::read(&sidecar(&a.grid)) {
        Ok(gm) => gm.seed.into_iter().collect(),
        Err(_) => Vec::new(),
    };
    let mut digests = vec![
        (a.grid.display().to_string(), grid_digest),
        (a.field.display().to_string(), field_digest),
    ];
    digests.extend(m.configs.iter().map(|(k, v)| (k.clone(), v.sha256.clone())));
    let report = FomReport {
        label: a.label.clone().unwrap_or_else(|| a.region.name().to_string()),
        delta,
        delta_uniform: Some(du),
        ratio: Some(delta / du),
        gamma,
        q_m,
        threshold_energy_mj: (a.gamma.constants.is_none() && a.pulse_energy_mj.is_some()).then_some(a.threshold_mj),
        correction_factor: None,
        seeds,
        digests,
    };
    println!("delta {delta:e} T^2/W  uniform {du:e} T^2/W  ratio {:.6}", delta / du);
    if let Some(g) = gamma {
        println!("gamma {g:e}");
    }
    if let Some(q) = q_m {
        println!("Q_m {q:e}");
    }
    m.results.insert("delta_t2w".into(), delta);
    m.results.insert("delta_uniform_t2w".into(), du);
    m.write_output(&a.out, FomReport::to_csv(&[report]).as_bytes())?;
    m.finish(&sidecar(&a.out))
}

/// Long-format CSV of a grid projected along `axis`, as column integrals
/// Σ value·pitch³ at each projected voxel centre.
fn projection_csv(grid: &VoxelGrid, axis: Axis, quantity: &str, units: &str) -> String {
    let (map, rest) = grid.project(axis);
    let v3 = grid.voxel_volume();
    let names = |a: Axis| match a {
        Axis::X => "x_mm",
        Axis::Y => "y_mm",
        Axis::Z => "z_mm",
    };
    let coord = |a: Axis, i: usize| grid.origin.axis(a) + grid.pitch * (i as f64 + 0.5);
    let mut s = format!(
        "# schema: pumpmap-projection/1\n# quantity: {quantity} summed along {} ({units})\n{},{},value\n",
        names(axis),
        names(rest[0]),
        names(rest[1])
    );
    for (b, row) in map.iter().enumerate() {
        for (ai, v) in row.iter().enumerate() {
            let _ = writeln!(s, "{:e},{:e},{:e}", coord(rest[0], ai), coord(rest[1], b), v * v3);
        }
    }
    s
}

fn write_projections(
    m: &mut RunManifest,
    dir: &Path,
    label: &str,
    rho: &VoxelGrid,
    field: &FieldMap,
    axis: Axis,
) -> Result<()> {
    let b2 = |p| field.sample_b2(p).unwrap_or(f64::NAN);
    // same voxel set as the overlap sum
    let mut rho = rho.clone();
    let mut ones = rho.clone();
    for ((v, one), r) in rho.values.iter_mut().zip(ones.values.iter_mut()).zip(&ones.region) {
        if *r != RegionTag::Crystal {
            *v = 0.0;
        }
        *one = if *r == RegionTag::Crystal { 1.0 } else { 0.0 };
    }
    let maps = [
        ("rho", rho.clone(), "normalized absorbed power density", "W"),
        ("b2", ones.weighted_by(b2), "|B|^2 over the crystal", "T^2/J mm^3"),
        ("product", rho.weighted_by(b2), "rho x |B|^2", "T^2/W"),
    ];
    for (name, g, what, units) in maps {
        let path = dir.join(format!("{label}_{name}.csv"));
        m.write_output(&path, projection_csv(&g, axis, what, units).as_bytes())?;
    }
    Ok(())
}

pub fn compare(a: CompareArgs) -> Result<()> {
    let seed = check_opts(&a.opts)?;
    let mut m = RunManifest::start();
    m.seed = Some(seed);
    m.workers = Some(a.opts.workers);
    let (field, field_digest) = load_field(&a.field, &mut m)?;
    let butt: Loaded<SceneConfig> = load_config(&a.butt, &mut m)?;
    let inv: Loaded<SceneConfig> = load_config(&a.invasive, &mut m)?;
    let meter: Option<Loaded<SceneConfig>> = a.meter.as_ref().map(|p| load_config(p, &mut m)).transpose()?;

    let runs = [("butt", &butt, derive_seed(seed, 0)), ("invasive", &inv, derive_seed(seed, 1))];
    let meter_run = match &meter {
        Some(c) => {
            let r = trace_scene(&c.config, &a.opts, derive_seed(seed, 2), &c.digest)?;
            print_budget("meter", &r);
            record_budget(&mut m, "meter.", &r);
            Some((r, derive_seed(seed, 2)))
        }
        None => None,
    };

    let mut rows = Vec::new();
    let mut butt_delta = None;
    let mut inv_grid = None;
    for (label, cfg, s) in runs {
        let r = trace_scene(&cfg.config, &a.opts, s, &cfg.digest)?;
        print_budget(label, &r);
        record_budget(&mut m, &format!("{label}."), &r);
        let o = pipeline::overlap_of(&r, &field)?;
        let rho = r.grid.normalized_to_region(RegionTag::Crystal)?;
        m.write_output(&a.out_dir.join(format!("{label}.vgd")), &vgd_bytes(&r.grid)?)?;
        write_projections(&mut m, &a.out_dir, label, &rho, &field, a.axis)?;
        let cf = match &meter_run {
            Some((mr, _)) => Some(correction_factor(&r, mr)?),
            None => None,
        };
        if let Some(c) = &cf {
            println!("  correction factor {:.4} ± {:.4}", c.value, c.std_error);
            m.results.insert(format!("{label}.correction_factor"), c.value);
            m.results.insert(format!("{label}.correction_factor_std_error"), c.std_error);
        }
        let base = *butt_delta.get_or_insert(o.delta);
        let mut seeds = vec![s];
        seeds.extend(meter_run.as_ref().filter(|_| cf.is_some()).map(|(_, ms)| *ms));
        let mut digests = vec![
            (cfg.path.clone(), cfg.digest.clone()),
            (a.field.display().to_string(), field_digest.clone()),
        ];
        if let (Some(mc), true) = (&meter, cf.is_some()) {
            digests.push((mc.path.clone(), mc.digest.clone()));
        }
        rows.push(FomReport {
            label: label.into(),
            delta: o.delta,
            delta_uniform: Some(o.delta_uniform),
            ratio: Some(o.delta / base),
            correction_factor: cf.map(|c| c.value),
            seeds,
            digests,
            ..Default::default()
        });
        m.results.insert(format!("{label}.delta_t2w"), o.delta);
        m.results.insert(format!("{label}.delta_uniform_t2w"), o.delta_uniform);
        if label == "invasive" {
            inv_grid = Some(r.grid);
        }
    }
    let base = butt_delta.unwrap_or(f64::NAN);
    if a.uniform {
        let g = inv_grid.as_ref().ok_or_else(|| CliError::Numeric("no invasive grid".into()))?;
        let du = uniform_delta(&field, g, RegionTag::Crystal)?;
        let rho = g.uniform_over(RegionTag::Crystal)?;
        write_projections(&mut m, &a.out_dir, "uniform", &rho, &field, a.axis)?;
        rows.push(FomReport {
            label: "uniform".into(),
            delta: du,
            delta_uniform: Some(du),
            ratio: Some(du / base),
            seeds: vec![derive_seed(seed, 1)],
            digests: vec![
                (inv.path.clone(), inv.digest.clone()),
                (a.field.display().to_string(), field_digest.clone()),
            ],
            ..Default::default()
        });
    }
    println!("label,delta_T2W,ratio_to_butt");
    for r in &rows {
        println!("{},{:e},{:.4}", r.label, r.delta, r.ratio.unwrap_or(f64::NAN));
    }
    m.write_output(&a.out_dir.join("report.csv"), FomReport::to_csv(&rows).as_bytes())?;
    m.finish(&a.out_dir.join("manifest.toml"))
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let seed = check_opts(&a.opts)?;
    let values = match (&a.values, a.from, a.to, a.steps) {
        (Some(v), ..) => v.clone(),
        (None, Some(f), Some(t), Some(n)) => linspace(f, t, n),
        _ => return Err(CliError::BadArgs("give --values or --from/--to/--steps".into())),
    };
    if values.is_empty() {
        return Err(CliError::BadArgs("sweep has no points".into()));
    }
    let mut m = RunManifest::start();
    m.seed = Some(seed);
    m.workers = Some(a.opts.workers);
    let base: Loaded<SceneConfig> = load_config(&a.config, &mut m)?;
    let field = a.field.as_ref().map(|p| load_field(p, &mut m)).transpose()?;
    let constants = load_gamma_inputs(&a.gamma, &mut m)?;
    if constants.is_some() && field.is_none() {
        return Err(CliError::BadArgs("--constants needs --field".into()));
    }
    let mut csv = format!(
        "# schema: pumpmap-sweep/1\nindex,{},seed,absorbed_fraction,absorbed_fraction_std_error,mean_depth_mm,delta_T2W,delta_uniform_T2W,gamma\n",
        a.param.column()
    );
    for (i, &v) in values.iter().enumerate() {
        let mut cfg = base.config.clone();
        a.param.apply(&mut cfg, v);
        let s = derive_seed(seed, i as u64);
        let opts = TraceOptions::new(a.opts.rays, s).with_workers(a.opts.workers);
        let (scene, r) = pipeline::trace_config::<f64>(&cfg, &opts, a.opts.pitch_mm, &base.digest)?;
        let depth = pipeline::mean_depth_mm(&r, &scene, &cfg)?;
        let (delta, du, gamma) = match &field {
            Some((f, _)) => {
                let o = pipeline::overlap_of(&r, f)?;
                (Some(o.delta), Some(o.delta_uniform), gamma_from_constants(&constants, o.delta)?)
            }
            None => (None, None, None),
        };
        let opt = |x: Option<f64>| x.map(|x| format!("{x:e}")).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{i},{v:e},{s},{:e},{:e},{depth:e},{},{},{}",
            r.absorbed_fraction(),
            r.absorbed_fraction_std_error(),
            opt(delta),
            opt(du),
            opt(gamma)
        );
        println!(
            "[{}/{}] {} = {v}: absorbed {:.5}, mean depth {depth:.4} mm{}",
            i + 1,
            values.len(),
            a.param.column(),
            r.absorbed_fraction(),
            delta.map(|d| format!(", delta {d:e}")).unwrap_or_default()
        );
        m.warnings.extend(r.warnings.iter().cloned());
    }
    m.write_output(&a.out, csv.as_bytes())?;
    m.finish(&sidecar(&a.out))
}

fn print_grid(path: &Path, g: &VoxelGrid) {
    println!("{}: VGD1 voxel grid", path.display());
    println!("  dims    {} x {} x {}", g.dims[0], g.dims[1], g.dims[2]);
    println!("  origin  ({}, {}, {}) mm", g.origin.x, g.origin.y, g.origin.z);
    println!("  pitch   {} mm", g.pitch);
    println!("  total   {:e} W", g.total());
    for tag in [
        RegionTag::Air,
        RegionTag::Waveguide,
        RegionTag::Crystal,
        RegionTag::Coupling,
        RegionTag::Detector,
        RegionTag::Emitter,
    ] {
        let n = g.region_count(tag);
        if n > 0 {
            println!("  {:<9} {n} voxels, {:e} W", tag.name(), g.region_integral(tag));
        }
    }
}

fn print_field(path: &Path, f: &FieldMap) {
    println!("{}: FMP1 field map", path.display());
    println!("  nodes   {} (r) x {} (z)", f.nr, f.nz);
    println!("  origin  r0 = {} mm, z0 = {} mm", f.r0, f.z0);
    println!("  spacing dr = {} mm, dz = {} mm", f.dr, f.dz);
    println!("  frequency {} GHz", f.frequency_ghz);
    println!("  stored energy {:e} J", f.stored_energy_j());
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let bytes = read_bytes(&a.file)?;
    if bytes.starts_with(VGD1_MAGIC) {
        print_grid(&a.file, &VoxelGrid::read_vgd1(bytes.as_slice())?);
        return Ok(());
    }
    if bytes.starts_with(FMP1_MAGIC) {
        print_field(&a.file, &FieldMap::read_fmp1(bytes.as_slice())?);
        return Ok(());
    }
    let text = String::from_utf8(bytes).map_err(|_| CliError::Io(format!("{}: unrecognized file", a.file.display())))?;
    if let Ok(m) = toml::from_str::<RunManifest>(&text) {
        println!("{}: run manifest ({})", a.file.display(), m.schema);
        println!("  tool     {}", m.tool_version);
        println!("  command  {}", m.command_line.join(" "));
        if let Some(s) = m.seed {
            println!("  seed     {s}");
        }
        for (k, c) in &m.configs {
            println!("  config   {k} sha256={}", c.sha256);
        }
        for (k, h) in m.inputs.iter().chain(&m.outputs) {
            println!("  file     {k} sha256={h}");
        }
        for (k, v) in &m.results {
            println!("  {k} = {v:e}");
        }
        return Ok(());
    }
    let kind = if config::parse_str::<SceneConfig>(&text, "").is_ok() {
        "scene config"
    } else if config::parse_str::<CavitySpec>(&text, "").is_ok() {
        "cavity config"
    } else if config::parse_str::<SpinSystemConstants>(&text, "").is_ok() {
        "spin-system constants"
    } else {
        return Err(CliError::Io(format!("{}: unrecognized file", a.file.display())));
    };
    println!("{}: {kind}, sha256 {}", a.file.display(), config::sha256_hex(text.as_bytes()));
    Ok(())
}
