//! One function per subcommand. Every pipeline run emits an
//! `AnalysisReport` JSON whose payload lists the produced artifacts with
//! their SHA-256 digests; runs with equal inputs, config, and seed produce
//! byte-identical outputs.

use crate::config::{
    ConfigSource, CorruptConfig, DenoiseConfig, OpticalConfig, RecoverConfig, SimulateConfig,
};
use opmicro::chsim::{self, ChParams, MaterialLaw};
use opmicro::denoise::{self, BlindSpotModel};
use opmicro::fieldstore::{
    load_stack, save_stack, sha256_file, write_npy, AnalysisReport, AxisLayout, Dtype, FrameStack,
    Provenance, ReportKind, ScalarField,
};
use opmicro::imetrics;
use opmicro::legendre::MaterialModel;
use opmicro::neutron::{
    self, DepthAxis, HalfCycleLabel, HalfCycleSplit, RadiographSet, N_HALF_CYCLES,
};
use opmicro::noisegen;
use opmicro::optical::{self, Phase};
use opmicro::recover::{self, LmOptions, ShootingProblem};
use opmicro::stxm::{
    self, CompositionMap, ReferenceSpectra, SamplingStrategy, SpectralKind, SpectralStack,
};
use opmicro::{Error, Result};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::Path;

/// Digest map for the `artifacts` payload entry; keys are file names.
fn artifact_digests(paths: &[&Path]) -> Result<serde_json::Value> {
    let mut map = BTreeMap::new();
    for p in paths {
        let name = p
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::invalid(format!("artifact path {} has no name", p.display())))?;
        map.insert(name.to_string(), sha256_file(p)?);
    }
    serde_json::to_value(map).map_err(|e| Error::invalid(format!("artifact digests: {e}")))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_layout(path: &Path, layout: &str) -> Result<FrameStack> {
    load_stack(path, AxisLayout::parse(layout)?)
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::invalid(format!("payload serialization: {e}")))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{e}")))?;
    w.write_record(header)
        .and_then(|_| rows.iter().try_for_each(|r| w.write_record(r)))
        .and_then(|_| w.flush().map_err(csv::Error::from))
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

pub fn simulate(config: Option<&Path>, out_dir: &Path, seed: u64) -> Result<()> {
    let src = ConfigSource::load(config)?;
    let cfg: SimulateConfig = src.section("simulate")?;
    let params = ChParams {
        omega: cfg.omega,
        kappa: cfg.kappa,
        nx: cfg.nx,
        ny: cfg.ny,
        domain_length: cfg.domain_length,
        dt: cfg.dt,
        n_frames: cfg.n_frames,
        frame_stride: cfg.frame_stride,
        c_floor: cfg.c_floor,
    };
    let law = MaterialLaw::GroundTruth { omega: cfg.omega };
    let c0 = chsim::random_initial_condition(&params, cfg.ic_mean, cfg.ic_amp, seed)?;
    let stack = chsim::simulate(&params, &law, &c0, seed)?;

    ensure_dir(out_dir)?;
    let stack_path = out_dir.join("stack.npy");
    save_stack(&stack, &stack_path)?;

    let mass0 = chsim::total_mass(stack.frame(0));
    let mass1 = chsim::total_mass(stack.frame(stack.n_frames() - 1));
    let payload = json!({
        "config": to_json(&cfg)?,
        "n_frames": stack.n_frames(),
        "shape": [params.ny, params.nx],
        "mass_initial": mass0,
        "mass_final": mass1,
        "artifacts": artifact_digests(&[&stack_path])?,
    });
    let report = AnalysisReport::new(
        ReportKind::Simulate,
        Provenance::new(src.digest, seed),
        payload,
    );
    report.write_json(&out_dir.join("report.json"))
}

pub fn corrupt(
    input: &Path,
    layout: &str,
    config: Option<&Path>,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let src = ConfigSource::load(config)?;
    let cfg: CorruptConfig = src.section("corrupt")?;
    let spec = cfg.to_spec();
    let stack = load_layout(input, layout)?;
    let noisy = noisegen::corrupt(&stack, &spec, seed)?;

    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    save_stack(&noisy, out)?;

    let mut prov = Provenance::new(src.digest, seed);
    prov.add_input("input", input)?;
    let payload = json!({
        "spec": to_json(&spec)?,
        "n_frames": noisy.n_frames(),
        "artifacts": artifact_digests(&[out])?,
    });
    AnalysisReport::new(ReportKind::Corrupt, prov, payload)
        .write_json(&out.with_extension("report.json"))
}

pub fn denoise(
    input: &Path,
    layout: &str,
    config: Option<&Path>,
    import: Option<&Path>,
    export_model: Option<&Path>,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let src = ConfigSource::load(config)?;
    let stack = load_layout(input, layout)?;

    let mut prov = Provenance::new(src.digest.clone(), seed);
    prov.add_input("input", input)?;

    let (denoised, spec_payload) = match import {
        Some(model_path) => {
            let model = BlindSpotModel::read_json(model_path)?;
            prov.add_input("model", model_path)?;
            (
                denoise::apply_blind_spot(&stack, &model)?,
                json!({"imported_model": model_path.display().to_string()}),
            )
        }
        None => {
            let cfg: DenoiseConfig = src.section("denoise")?;
            let spec = cfg.0;
            if let Some(model_path) = export_model {
                let model = denoise::fit_blind_spot(&stack, &spec, seed)?;
                model.write_json(model_path)?;
                (denoise::apply_blind_spot(&stack, &model)?, to_json(&spec)?)
            } else {
                (denoise::denoise_stack(&stack, &spec, seed)?, to_json(&spec)?)
            }
        }
    };

    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    save_stack(&denoised, out)?;

    let mut artifacts = vec![out.to_path_buf()];
    if import.is_none() {
        if let Some(m) = export_model {
            artifacts.push(m.to_path_buf());
        }
    }
    let refs: Vec<&Path> = artifacts.iter().map(|p| p.as_path()).collect();
    let payload = json!({
        "spec": spec_payload,
        "n_frames": denoised.n_frames(),
        "artifacts": artifact_digests(&refs)?,
    });
    AnalysisReport::new(ReportKind::Denoise, prov, payload)
        .write_json(&out.with_extension("report.json"))
}

pub fn metrics(
    reference: &Path,
    test: &Path,
    range: f64,
    layout: &str,
    out: Option<&Path>,
) -> Result<()> {
    let a = load_layout(reference, layout)?;
    let b = load_layout(test, layout)?;
    if a.channels() != 1 || b.channels() != 1 {
        return Err(Error::invalid("metrics need single-channel stacks"));
    }
    if a.n_frames() != b.n_frames() {
        return Err(Error::invalid(format!(
            "stacks have {} and {} frames",
            a.n_frames(),
            b.n_frames()
        )));
    }
    let mut per_frame = Vec::with_capacity(a.n_frames());
    let (mut sum_mse, mut sum_psnr, mut sum_ssim) = (0.0, 0.0, 0.0);
    for t in 0..a.n_frames() {
        let (fa, fb) = (a.frame(t), b.frame(t));
        let mse = imetrics::mse(fa, fb)?;
        let psnr = imetrics::psnr(fa, fb, range)?;
        let ssim = imetrics::ssim(fa, fb, range)?;
        sum_mse += mse;
        sum_psnr += psnr;
        sum_ssim += ssim;
        // Non-finite values (PSNR of identical frames) serialize as null.
        per_frame.push(json!({"mse": mse, "psnr": psnr, "ssim": ssim}));
    }
    let n = a.n_frames() as f64;
    let mut prov = Provenance::new(String::new(), 0);
    prov.add_input("reference", reference)?;
    prov.add_input("test", test)?;
    let payload = json!({
        "range": range,
        "per_frame": per_frame,
        "aggregate": {
            "mse": sum_mse / n,
            "psnr": sum_psnr / n,
            "ssim": sum_ssim / n,
        },
    });
    let report = AnalysisReport::new(ReportKind::Metrics, prov, payload);
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                ensure_dir(dir)?;
            }
            report.write_json(path)
        }
        None => {
            println!("{}", report.to_json()?);
            Ok(())
        }
    }
}

pub fn recover(
    data: &Path,
    layout: &str,
    config: Option<&Path>,
    out_dir: &Path,
    seed: u64,
) -> Result<()> {
    let src = ConfigSource::load(config)?;
    let cfg: RecoverConfig = src.section("recover")?;
    let stack = load_layout(data, layout)?;
    if stack.channels() != 1 {
        return Err(Error::invalid("recovery needs a single-channel stack"));
    }
    let (h, w) = stack.frame_shape();

    let indices: Vec<usize> = if cfg.n_snapshots == 0 {
        (0..stack.n_frames()).collect()
    } else {
        recover::select_snapshot_indices(stack.n_frames(), cfg.n_snapshots)?
    };
    let times = stack.times();
    let snapshots: Vec<(f64, ScalarField)> = indices
        .iter()
        .map(|&i| (times[i], stack.frame(i).clone()))
        .collect();

    // Grid spacing comes from the data when the sidecar records it.
    let dx = stack
        .meta
        .pixel_size
        .or(stack.frame(0).pixel_size)
        .unwrap_or(1.0 / w as f64);
    let params = ChParams {
        omega: cfg.omega,
        kappa: cfg.kappa,
        nx: w,
        ny: h,
        domain_length: dx * w as f64,
        dt: cfg.dt,
        n_frames: 2,
        frame_stride: 1,
        c_floor: cfg.c_floor,
    };
    let zeros = vec![0.0; cfg.degree + 1];
    let model0 = MaterialModel::new(
        cfg.degree,
        zeros.clone(),
        zeros,
        cfg.physical_prior,
        cfg.include_constant,
    )?;
    let problem = ShootingProblem::new(snapshots, params, model0, cfg.reg_lambda, cfg.obs_clip)?;
    let opts: LmOptions = cfg.lm_options();
    let result = if cfg.n_boot > 0 {
        recover::bootstrap_recovery_with(&problem, cfg.n_boot, seed, &opts, &opts)?
    } else {
        recover::levenberg_marquardt_with(&problem, &opts)?
    };
    let (grid, mu, d) = recover::evaluate_on_grid(&result.model)?;

    ensure_dir(out_dir)?;
    let curves_path = out_dir.join("curves.csv");
    let mut header = vec!["c", "mu_h", "d"];
    if result.bootstrap_band.is_some() {
        header.extend(["mu_std", "d_std"]);
    }
    let rows: Vec<Vec<String>> = (0..grid.len())
        .map(|i| {
            let mut row = vec![grid[i].to_string(), mu[i].to_string(), d[i].to_string()];
            if let Some(band) = &result.bootstrap_band {
                row.push(band.mu_std[i].to_string());
                row.push(band.d_std[i].to_string());
            }
            row
        })
        .collect();
    write_csv(&curves_path, &header, &rows)?;

    let mut prov = Provenance::new(src.digest, seed);
    prov.add_input("data", data)?;
    let payload = json!({
        "config": to_json(&cfg)?,
        "snapshot_indices": indices,
        "result": to_json(&result)?,
        "curve": {"c": grid, "mu_h": mu, "d": d},
        "artifacts": artifact_digests(&[&curves_path])?,
    });
    AnalysisReport::new(ReportKind::Recovery, prov, payload)
        .write_json(&out_dir.join("report.json"))
}

fn parse_spectral_kind(s: &str) -> Result<SpectralKind> {
    match s {
        "intensity" => Ok(SpectralKind::Intensity),
        "absorbance" => Ok(SpectralKind::Absorbance),
        "optical_density" => Ok(SpectralKind::OpticalDensity),
        other => Err(Error::invalid(format!(
            "unknown spectral kind {other:?} (intensity|absorbance|optical_density)"
        ))),
    }
}

fn parse_sampling(s: &str) -> Result<SamplingStrategy> {
    let (name, value) = s
        .split_once(':')
        .ok_or_else(|| Error::invalid(format!("sampling {s:?} must look like even:20 or edge:5")))?;
    let n: usize = value
        .parse()
        .map_err(|_| Error::invalid(format!("sampling count {value:?} is not an integer")))?;
    match name {
        "even" => Ok(SamplingStrategy::Even { n }),
        "edge" => Ok(SamplingStrategy::EdgeFocused { k: n }),
        other => Err(Error::invalid(format!("unknown sampling {other:?} (even|edge)"))),
    }
}

fn nearest_energy(energies: &[f64], target: f64) -> usize {
    let mut best = 0;
    for (i, e) in energies.iter().enumerate() {
        if (e - target).abs() < (energies[best] - target).abs() {
            best = i;
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
pub fn stxm_run(
    stack_path: &Path,
    layout: &str,
    refs_path: Option<&Path>,
    mode: &str,
    kind: &str,
    register: bool,
    bootstrap: usize,
    sampling: &str,
    out_dir: &Path,
    seed: u64,
) -> Result<()> {
    let raw = load_layout(stack_path, layout)?;
    if raw.channels() != 1 {
        return Err(Error::invalid("spectral stacks are single-channel"));
    }
    // Energies come from the sidecar when present, else the time axis.
    let energies = raw
        .meta
        .energies_ev
        .clone()
        .unwrap_or_else(|| raw.times().to_vec());
    let images: Vec<ScalarField> = raw.frames().to_vec();
    let mut stack = SpectralStack::new(energies, images, parse_spectral_kind(kind)?)?;

    let mut shifts_payload = serde_json::Value::Null;
    if register {
        let (registered, shifts) = stxm::register_stack(&stack)?;
        stack = registered;
        shifts_payload = to_json(&shifts)?;
    }
    if stack.kind == SpectralKind::Intensity {
        stack = stxm::optical_density(&stack)?;
    }

    // Full-grid references: user CSV, or the synthetic library matched to
    // the stack's energies.
    let full_refs = match refs_path {
        Some(p) => ReferenceSpectra::read_csv(p)?,
        None => stxm::synthetic_reference_spectra(stack.energies())?,
    };

    let map: CompositionMap = match mode {
        "two_energy" => {
            let i0 = nearest_energy(stack.energies(), stxm::TWO_ENERGY_EV[0]);
            let i1 = nearest_energy(stack.energies(), stxm::TWO_ENERGY_EV[1]);
            if i0 == i1 {
                return Err(Error::invalid(
                    "stack has no two distinct energies near the reference pair",
                ));
            }
            let (r0, r1) = match refs_path {
                // User references are indexed at the same nearest energies.
                Some(_) => (
                    nearest_energy(full_refs.energies(), stxm::TWO_ENERGY_EV[0]),
                    nearest_energy(full_refs.energies(), stxm::TWO_ENERGY_EV[1]),
                ),
                None => (i0, i1),
            };
            let refs2 = ReferenceSpectra::new(
                vec![full_refs.energies()[r0], full_refs.energies()[r1]],
                vec![full_refs.lfp()[r0], full_refs.lfp()[r1]],
                vec![full_refs.fp()[r0], full_refs.fp()[r1]],
            )?;
            stxm::composition_two_energy(stack.image(i0), stack.image(i1), &refs2)?
        }
        "nnls" => stxm::composition_nnls(&stack, &full_refs)?,
        other => Err(Error::invalid(format!(
            "unknown mode {other:?} (two_energy|nnls)"
        )))?,
    };

    ensure_dir(out_dir)?;
    let (h, w) = map.x.shape();
    let x_path = out_dir.join("x.npy");
    let valid_path = out_dir.join("valid.npy");
    write_npy(&x_path, map.x.as_slice(), &[h, w], Dtype::F64)?;
    write_npy(&valid_path, map.valid.as_slice(), &[h, w], Dtype::F64)?;
    let mut artifacts = vec![x_path, valid_path];

    let mut boot_payload = serde_json::Value::Null;
    if bootstrap > 0 {
        let strategy = parse_sampling(sampling)?;
        let out = stxm::bootstrap_sigma_x(&stack, &full_refs, bootstrap, strategy, seed)?;
        let sigma_path = out_dir.join("sigma.npy");
        write_npy(&sigma_path, out.sigma.as_slice(), &[h, w], Dtype::F64)?;
        artifacts.push(sigma_path);
        boot_payload = json!({
            "n_boot": out.n_boot,
            "sampling": sampling,
            "mean_sigma": out.mean_sigma,
        });
    }

    let n_valid = map.valid.as_slice().iter().filter(|&&v| v != 0.0).count();
    let mean_x = if n_valid > 0 {
        map.x
            .as_slice()
            .iter()
            .zip(map.valid.as_slice())
            .filter(|(_, &v)| v != 0.0)
            .map(|(x, _)| x)
            .sum::<f64>()
            / n_valid as f64
    } else {
        f64::NAN
    };

    let mut prov = Provenance::new(String::new(), seed);
    prov.add_input("stack", stack_path)?;
    if let Some(p) = refs_path {
        prov.add_input("references", p)?;
    }
    let refs: Vec<&Path> = artifacts.iter().map(|p| p.as_path()).collect();
    let payload = json!({
        "mode": mode,
        "kind": kind,
        "references": refs_path.map(|p| p.display().to_string()),
        "registered": register,
        "shifts": shifts_payload,
        "n_invalid": map.n_invalid,
        "mean_x": mean_x,
        "bootstrap": boot_payload,
        "artifacts": artifact_digests(&refs)?,
    });
    AnalysisReport::new(ReportKind::Stxm, prov, payload).write_json(&out_dir.join("report.json"))
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct CellGeom {
    px_per_cm: f64,
    cell_radius_cm: f64,
    /// (x, y) center of the cylindrical cell axis, in pixels.
    cell_center_px: (f64, f64),
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitSpec {
    boundaries: Vec<usize>,
    #[serde(default)]
    first: Option<String>,
    #[serde(default)]
    labels: Option<Vec<String>>,
}

fn parse_label(s: &str) -> Result<HalfCycleLabel> {
    match s {
        "charge" => Ok(HalfCycleLabel::Charge),
        "discharge" => Ok(HalfCycleLabel::Discharge),
        other => Err(Error::invalid(format!(
            "unknown half-cycle label {other:?} (charge|discharge)"
        ))),
    }
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

fn load_single_frame(path: &Path) -> Result<ScalarField> {
    let stack = load_stack(path, AxisLayout::parse("HW")?)?;
    Ok(stack.frame(0).clone())
}

pub fn neutron_run(
    intensity: &Path,
    layout: &str,
    open_beam: &Path,
    dark_current: &Path,
    split_path: &Path,
    geom_path: &Path,
    out_dir: &Path,
) -> Result<()> {
    let stack = load_layout(intensity, layout)?;
    if stack.channels() != 1 {
        return Err(Error::invalid("radiographs are single-channel"));
    }
    let ob = load_single_frame(open_beam)?;
    let dc = load_single_frame(dark_current)?;
    let geom: CellGeom = read_json_file(geom_path)?;
    let spec: SplitSpec = read_json_file(split_path)?;
    let split = match (&spec.first, &spec.labels) {
        (Some(first), None) => HalfCycleSplit::new(spec.boundaries.clone(), parse_label(first)?)?,
        (None, Some(labels)) => {
            let parsed: Result<Vec<HalfCycleLabel>> =
                labels.iter().map(|s| parse_label(s)).collect();
            HalfCycleSplit::from_parts(spec.boundaries.clone(), parsed?)?
        }
        _ => {
            return Err(Error::invalid(
                "split file needs exactly one of \"first\" or \"labels\"",
            ))
        }
    };

    let set = RadiographSet::new(
        stack,
        ob,
        dc,
        geom.px_per_cm,
        geom.cell_radius_cm,
        geom.cell_center_px,
    )?;
    let t_stack = neutron::normalize_transmission(&set)?;
    let (h, w) = t_stack.frame_shape();
    let thickness = neutron::thickness_profile(&set, w)?;
    let delta = neutron::delta_attenuation(&t_stack, &split, &thickness)?;

    let region = ScalarField::constant(h, w, 1.0)?;
    let fracs = neutron::half_cycle_active_fractions(&delta, &split, &region)?;
    let variability = neutron::local_variability(&delta)?;
    let last = delta.frame(delta.n_frames() - 1);
    let (mean_y, std_y) = neutron::depth_profile(last, DepthAxis::Y);
    let (mean_x, std_x) = neutron::depth_profile(last, DepthAxis::X);

    ensure_dir(out_dir)?;
    let delta_path = out_dir.join("delta_sigma.npy");
    save_stack(&delta, &delta_path)?;

    let frac_path = out_dir.join("active_fractions.csv");
    let label_str = |l: HalfCycleLabel| match l {
        HalfCycleLabel::Charge => "charge",
        HalfCycleLabel::Discharge => "discharge",
    };
    let rows: Vec<Vec<String>> = (0..N_HALF_CYCLES)
        .map(|i| {
            let f = &fracs[i];
            let (lo, hi) = f.window.map_or((-1i64, -1i64), |(a, b)| (a as i64, b as i64));
            vec![
                i.to_string(),
                label_str(split.label(i)).to_string(),
                f.fraction.to_string(),
                f.threshold.map_or(String::new(), |t| t.to_string()),
                lo.to_string(),
                hi.to_string(),
                f.degenerate.to_string(),
            ]
        })
        .collect();
    write_csv(
        &frac_path,
        &[
            "segment",
            "label",
            "fraction",
            "threshold",
            "window_lo",
            "window_hi",
            "degenerate",
        ],
        &rows,
    )?;

    let depth_csv = |path: &Path, mean: &[f64], std: &[f64]| -> Result<()> {
        let rows: Vec<Vec<String>> = (0..mean.len())
            .map(|i| vec![i.to_string(), mean[i].to_string(), std[i].to_string()])
            .collect();
        write_csv(path, &["index", "mean", "std"], &rows)
    };
    let depth_y_path = out_dir.join("depth_y.csv");
    let depth_x_path = out_dir.join("depth_x.csv");
    depth_csv(&depth_y_path, &mean_y, &std_y)?;
    depth_csv(&depth_x_path, &mean_x, &std_x)?;

    let mut prov = Provenance::new(String::new(), 0);
    prov.add_input("intensity", intensity)?;
    prov.add_input("open_beam", open_beam)?;
    prov.add_input("dark_current", dark_current)?;
    prov.add_input("split", split_path)?;
    prov.add_input("geometry", geom_path)?;
    let payload = json!({
        "geometry": {
            "px_per_cm": geom.px_per_cm,
            "cell_radius_cm": geom.cell_radius_cm,
            "cell_center_px": geom.cell_center_px,
        },
        "boundaries": split.boundaries(),
        "fractions": fracs.iter().map(|f| f.fraction).collect::<Vec<_>>(),
        "local_variability": variability,
        "artifacts": artifact_digests(&[&delta_path, &frac_path, &depth_y_path, &depth_x_path])?,
    });
    AnalysisReport::new(ReportKind::Neutron, prov, payload)
        .write_json(&out_dir.join("report.json"))
}

fn parse_phase(s: &str) -> Result<Phase> {
    match s {
        "background" => Ok(Phase::Background),
        "blue" => Ok(Phase::Blue),
        "red" => Ok(Phase::Red),
        "gold" => Ok(Phase::Gold),
        other => Err(Error::invalid(format!(
            "unknown phase {other:?} (background|blue|red|gold)"
        ))),
    }
}

pub fn optical_run(
    video: &Path,
    layout: &str,
    config: Option<&Path>,
    out_dir: &Path,
    seed: u64,
) -> Result<()> {
    let src = ConfigSource::load(config)?;
    let cfg: OpticalConfig = src.section("optical")?;
    let stack = load_layout(video, layout)?;
    let lab = optical::rgb_to_lab(&stack)?;
    let n = lab.n_frames();
    let (h, w) = lab.shape();

    if cfg.cluster_phases.len() != cfg.k {
        return Err(Error::invalid(format!(
            "cluster_phases lists {} phases for k = {}",
            cfg.cluster_phases.len(),
            cfg.k
        )));
    }
    let phase_of: Vec<Phase> = cfg
        .cluster_phases
        .iter()
        .map(|s| parse_phase(s))
        .collect::<Result<_>>()?;
    if cfg.background_cluster >= cfg.k {
        return Err(Error::invalid("background_cluster is out of range"));
    }
    if phase_of[cfg.background_cluster] != Phase::Background {
        return Err(Error::invalid(
            "cluster_phases must mark the background cluster as background",
        ));
    }

    let clusters = optical::kmeans_lab(&lab, cfg.k, seed)?;
    let seg_idx = if cfg.segment_frame < 0 {
        n - 1
    } else {
        let i = cfg.segment_frame as usize;
        if i >= n {
            return Err(Error::invalid(format!(
                "segment_frame {i} is outside the {n}-frame stack"
            )));
        }
        i
    };
    let pixel_size = cfg
        .pixel_size
        .or(stack.meta.pixel_size)
        .unwrap_or(1.0);
    let mut table = optical::segment_particles(
        &clusters.labels[seg_idx],
        cfg.background_cluster as u8,
        cfg.min_area,
        pixel_size,
    )?;

    let mask = match &cfg.mask_npy {
        Some(path) => {
            let (data, shape, _) = opmicro::fieldstore::read_npy(path)?;
            if shape != [h, w] {
                return Err(Error::invalid(format!(
                    "mask is {shape:?}, video frames are [{h}, {w}]"
                )));
            }
            ScalarField::from_vec(h, w, data)?
        }
        None => {
            let vals: Vec<f64> = table
                .label_map
                .iter()
                .map(|&id| if id > 0 { 1.0 } else { 0.0 })
                .collect();
            ScalarField::from_vec(h, w, vals)?
        }
    };

    let phase_frames = optical::apply_cluster_phases(&clusters.labels, &phase_of)?;
    let map = optical::classify_phases(&phase_frames, &mask, cfg.schedule.0..cfg.schedule.1)?;
    let soc = optical::soc_estimate(&map)?;
    optical::concentration_traces(&mut table, &map)?;

    // Population statistics are best-effort: small demos with one or two
    // particles still produce the per-particle outputs.
    let size_fit = match optical::size_distribution(&table) {
        Ok(f) => to_json(&f)?,
        Err(e) => {
            log::warn!("size distribution skipped: {e}");
            serde_json::Value::Null
        }
    };
    let kde = match optical::population_density(&table, n - 1, cfg.bandwidth) {
        Ok(g) => Some(g),
        Err(e) => {
            log::warn!("population density skipped: {e}");
            None
        }
    };

    ensure_dir(out_dir)?;
    let phases_path = out_dir.join("phases.npy");
    let mut phase_data = Vec::with_capacity(n * h * w);
    for t in 0..n {
        phase_data.extend(map.frame(t).iter().map(|&p| p as u8 as f64));
    }
    write_npy(&phases_path, &phase_data, &[n, h, w], Dtype::F64)?;

    let particles_path = out_dir.join("particles.csv");
    let mut header: Vec<String> = ["id", "area_px", "perimeter_px", "char_size"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..n).map(|t| format!("c_{t}")));
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<String>> = table
        .particles
        .iter()
        .map(|p| {
            let mut row = vec![
                p.id.to_string(),
                p.area_px.to_string(),
                p.perimeter_px.to_string(),
                p.char_size.to_string(),
            ];
            row.extend(p.conc_trace.iter().map(|c| c.to_string()));
            row
        })
        .collect();
    write_csv(&particles_path, &header_refs, &rows)?;

    let soc_path = out_dir.join("soc.csv");
    let times = lab.times();
    let soc_rows: Vec<Vec<String>> = (0..n)
        .map(|t| vec![t.to_string(), times[t].to_string(), soc[t].to_string()])
        .collect();
    write_csv(&soc_path, &["frame", "time", "soc"], &soc_rows)?;

    let mut artifacts = vec![phases_path, particles_path, soc_path];
    let mut kde_payload = serde_json::Value::Null;
    if let Some(grid) = &kde {
        let kde_path = out_dir.join("kde.npy");
        let (gh, gw) = (grid.size_centers.len(), grid.conc_centers.len());
        write_npy(
            &kde_path,
            grid.density.as_slice().expect("contiguous density grid"),
            &[gh, gw],
            Dtype::F64,
        )?;
        let axes_path = out_dir.join("kde_axes.csv");
        let axis_rows: Vec<Vec<String>> = (0..gh.max(gw))
            .map(|i| {
                vec![
                    grid.conc_centers
                        .get(i)
                        .map_or(String::new(), |v| v.to_string()),
                    grid.size_centers
                        .get(i)
                        .map_or(String::new(), |v| v.to_string()),
                ]
            })
            .collect();
        write_csv(&axes_path, &["conc", "size"], &axis_rows)?;
        kde_payload = json!({
            "bandwidth": grid.bandwidth,
            "integral": grid.integral(),
        });
        artifacts.push(kde_path);
        artifacts.push(axes_path);
    }

    let mut prov = Provenance::new(src.digest, seed);
    prov.add_input("video", video)?;
    if let Some(p) = &cfg.mask_npy {
        prov.add_input("mask", p)?;
    }
    let refs: Vec<&Path> = artifacts.iter().map(|p| p.as_path()).collect();
    let payload = json!({
        "config": to_json(&cfg)?,
        "centers": clusters.centers,
        "kmeans_iterations": clusters.iterations,
        "n_particles": table.particles.len(),
        "segment_frame": seg_idx,
        "pixel_size": pixel_size,
        "soc": soc,
        "size_fit": size_fit,
        "kde": kde_payload,
        "artifacts": artifact_digests(&refs)?,
    });
    AnalysisReport::new(ReportKind::Optical, prov, payload)
        .write_json(&out_dir.join("report.json"))
}

pub const REPORT_SCHEMA: &str = include_str!("../report.schema.json");

pub fn report_check(path: &Path, artifacts_dir: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("{}: not JSON: {e}", path.display())))?;
    let schema: serde_json::Value =
        serde_json::from_str(REPORT_SCHEMA).expect("embedded schema parses");
    let errors = crate::schema::validate(&schema, &value);
    if !errors.is_empty() {
        for e in &errors {
            eprintln!("schema violation: {e}");
        }
        return Err(Error::invalid(format!(
            "{}: {} schema violation(s)",
            path.display(),
            errors.len()
        )));
    }
    // Second route: the typed model must accept it too.
    let report = AnalysisReport::read_json(path)?;

    let mut checked = 0usize;
    if let Some(dir) = artifacts_dir {
        let digests = report
            .payload
            .get("artifacts")
            .and_then(|a| a.as_object())
            .ok_or_else(|| Error::invalid("report payload lists no artifacts"))?;
        for (name, digest) in digests {
            let want = digest
                .as_str()
                .ok_or_else(|| Error::invalid(format!("artifact {name}: digest is not a string")))?;
            let got = sha256_file(&dir.join(name))?;
            if got != want {
                return Err(Error::invalid(format!(
                    "artifact {name}: digest mismatch (report {want}, file {got})"
                )));
            }
            checked += 1;
        }
    }
    println!(
        "report OK: kind recorded, {} input(s), {} artifact(s) verified",
        report.provenance.inputs.len(),
        checked
    );
    Ok(())
}
