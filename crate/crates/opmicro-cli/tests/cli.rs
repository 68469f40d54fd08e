//! End-to-end tests of the `opmicro` binary: determinism, exit codes,
//! report validation, and the full pipelines on small synthetic inputs.

use opmicro::fieldstore::{read_npy, save_stack, FrameStack, ScalarField};
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_opmicro"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("binary runs").status.code().expect("exit code")
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn report_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&read(path)).expect("report parses")
}

const TINY_SIM: &str = "[simulate]\nnx = 16\nny = 16\nn_frames = 3\nframe_stride = 5\n";

#[test]
fn simulate_reruns_are_byte_identical_and_reports_validate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, TINY_SIM).unwrap();
    for name in ["a", "b"] {
        run_ok(
            bin()
                .args(["simulate", "--seed", "9", "--config"])
                .arg(&cfg)
                .arg("--out")
                .arg(dir.path().join(name)),
        );
    }
    assert_eq!(
        read(&dir.path().join("a/stack.npy")),
        read(&dir.path().join("b/stack.npy"))
    );
    assert_eq!(
        read(&dir.path().join("a/report.json")),
        read(&dir.path().join("b/report.json"))
    );

    // Both validation routes accept the emitted report, artifacts included.
    run_ok(
        bin()
            .arg("report")
            .arg(dir.path().join("a/report.json"))
            .arg("--artifacts-dir")
            .arg(dir.path().join("a")),
    );
}

#[test]
fn corrupt_depends_on_seed_and_denoise_metrics_chain_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, TINY_SIM).unwrap();
    run_ok(
        bin()
            .args(["simulate", "--seed", "1", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join("sim")),
    );
    let clean = dir.path().join("sim/stack.npy");

    for (name, seed) in [("n1.npy", "3"), ("n2.npy", "3"), ("n3.npy", "4")] {
        run_ok(
            bin()
                .args(["corrupt", "--seed", seed, "--in"])
                .arg(&clean)
                .arg("--out")
                .arg(dir.path().join(name)),
        );
    }
    assert_eq!(read(&dir.path().join("n1.npy")), read(&dir.path().join("n2.npy")));
    assert_ne!(read(&dir.path().join("n1.npy")), read(&dir.path().join("n3.npy")));

    run_ok(
        bin()
            .args(["denoise", "--in"])
            .arg(dir.path().join("n1.npy"))
            .arg("--out")
            .arg(dir.path().join("den.npy")),
    );
    run_ok(
        bin()
            .args(["metrics", "--ref"])
            .arg(&clean)
            .arg("--test")
            .arg(dir.path().join("den.npy"))
            .arg("--out")
            .arg(dir.path().join("metrics.json")),
    );
    let report = report_json(&dir.path().join("metrics.json"));
    let agg = &report["payload"]["aggregate"];
    assert!(agg["mse"].as_f64().unwrap() > 0.0);
    assert!(agg["ssim"].as_f64().unwrap() <= 1.0);
    run_ok(bin().arg("report").arg(dir.path().join("metrics.json")));
}

#[test]
fn blind_spot_model_export_then_import_reproduces_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        format!("{TINY_SIM}\n[denoise]\nkind = \"blind_spot\"\npatch_radius = 1\n"),
    )
    .unwrap();
    run_ok(
        bin()
            .args(["simulate", "--seed", "1", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join("sim")),
    );
    run_ok(
        bin()
            .args(["corrupt", "--seed", "3", "--in"])
            .arg(dir.path().join("sim/stack.npy"))
            .arg("--out")
            .arg(dir.path().join("noisy.npy")),
    );

    run_ok(
        bin()
            .args(["denoise", "--seed", "5", "--config"])
            .arg(&cfg)
            .arg("--in")
            .arg(dir.path().join("noisy.npy"))
            .arg("--export-model")
            .arg(dir.path().join("model.json"))
            .arg("--out")
            .arg(dir.path().join("d1.npy")),
    );
    run_ok(
        bin()
            .args(["denoise", "--in"])
            .arg(dir.path().join("noisy.npy"))
            .arg("--import")
            .arg(dir.path().join("model.json"))
            .arg("--out")
            .arg(dir.path().join("d2.npy")),
    );
    assert_eq!(read(&dir.path().join("d1.npy")), read(&dir.path().join("d2.npy")));

    // --import and --export-model are mutually exclusive (clap usage error).
    let code = exit_code(
        bin()
            .args(["denoise", "--in"])
            .arg(dir.path().join("noisy.npy"))
            .arg("--import")
            .arg(dir.path().join("model.json"))
            .arg("--export-model")
            .arg(dir.path().join("m2.json"))
            .arg("--out")
            .arg(dir.path().join("d3.npy")),
    );
    assert_eq!(code, 2);
}

#[test]
fn invalid_inputs_exit_2_and_numerical_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();

    // Missing input file: i/o failure.
    let code = exit_code(
        bin()
            .args(["corrupt", "--in"])
            .arg(dir.path().join("missing.npy"))
            .arg("--out")
            .arg(dir.path().join("x.npy")),
    );
    assert_eq!(code, 2);

    // Unknown config key: invalid input.
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[simulate]\nbogus = 1\n").unwrap();
    let code = exit_code(
        bin()
            .args(["simulate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join("sim")),
    );
    assert_eq!(code, 2);

    // Singular two-energy reference matrix: numerical failure.
    let f = ScalarField::constant(4, 4, 0.5).unwrap();
    let stack = FrameStack::new(vec![f.clone(), f], 1, Some(vec![706.0, 713.0])).unwrap();
    let stack_path = dir.path().join("spec.npy");
    save_stack(&stack, &stack_path).unwrap();
    let refs = dir.path().join("refs.csv");
    std::fs::write(&refs, "energy_ev,lfp,fp\n706.0,1.0,1.0\n713.0,2.0,2.0\n").unwrap();
    let code = exit_code(
        bin()
            .args(["stxm", "--mode", "two_energy", "--stack"])
            .arg(&stack_path)
            .arg("--refs")
            .arg(&refs)
            .arg("--out")
            .arg(dir.path().join("stxm")),
    );
    assert_eq!(code, 3);

    // Unknown flag: clap usage error, also 2.
    assert_eq!(exit_code(bin().args(["simulate", "--bogus-flag"])), 2);
}

#[test]
fn report_rejects_schema_violations_and_tampered_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, TINY_SIM).unwrap();
    run_ok(
        bin()
            .args(["simulate", "--seed", "2", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join("sim")),
    );
    let report_path = dir.path().join("sim/report.json");

    // Drop a required provenance field.
    let mut doc = report_json(&report_path);
    doc["provenance"]
        .as_object_mut()
        .unwrap()
        .remove("seed");
    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, serde_json::to_string(&doc).unwrap()).unwrap();
    assert_eq!(exit_code(bin().arg("report").arg(&broken)), 2);

    // Tamper with the stack after the run: digest check must fail.
    let stack_path = dir.path().join("sim/stack.npy");
    let mut bytes = read(&stack_path);
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&stack_path, bytes).unwrap();
    let code = exit_code(
        bin()
            .arg("report")
            .arg(&report_path)
            .arg("--artifacts-dir")
            .arg(dir.path().join("sim")),
    );
    assert_eq!(code, 2);
}

/// RGB video of one rectangle cycling blue -> red -> gold on a white field.
fn phase_video(dir: &Path) -> std::path::PathBuf {
    let colors = [[0.1, 0.2, 0.8], [0.85, 0.1, 0.1], [0.9, 0.75, 0.2]];
    let mut frames = Vec::new();
    for color in colors {
        for c in 0..3 {
            let mut data = vec![0.95; 20 * 20];
            for y in 4..12 {
                for x in 5..14 {
                    data[y * 20 + x] = color[c];
                }
            }
            frames.push(ScalarField::from_vec(20, 20, data).unwrap());
        }
    }
    let stack = FrameStack::new(frames, 3, Some(vec![0.0, 1.0, 2.0])).unwrap();
    let path = dir.join("video.npy");
    save_stack(&stack, &path).unwrap();
    path
}

#[test]
fn optical_pipeline_tracks_the_phase_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let video = phase_video(dir.path());
    run_ok(
        bin()
            .args(["optical", "--seed", "1", "--video"])
            .arg(&video)
            .arg("--out")
            .arg(dir.path().join("opt")),
    );

    let report = report_json(&dir.path().join("opt/report.json"));
    let soc: Vec<f64> = report["payload"]["soc"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let expect = [0.26, 0.55, 1.0];
    assert_eq!(soc.len(), 3);
    for (got, want) in soc.iter().zip(expect) {
        assert!((got - want).abs() < 1e-9, "soc {got} != {want}");
    }
    assert_eq!(report["payload"]["n_particles"], 1);

    let (phases, shape, _) = read_npy(&dir.path().join("opt/phases.npy")).unwrap();
    assert_eq!(shape, vec![3, 20, 20]);
    // Frame 0: the 8x9 rectangle is phase blue (1), the field background (0).
    let n_blue = phases[..400].iter().filter(|&&v| v == 1.0).count();
    assert_eq!(n_blue, 72);

    let particles = String::from_utf8(read(&dir.path().join("opt/particles.csv"))).unwrap();
    let row = particles.lines().nth(1).expect("one particle row");
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[1], "72");
}

#[test]
fn stxm_two_energy_recovers_a_synthetic_composition() {
    let dir = tempfile::tempdir().unwrap();
    let refs = opmicro::stxm::ReferenceSpectra::two_energy();
    let mut x = vec![0.2; 64];
    for v in &mut x[32..] {
        *v = 0.8;
    }
    let x_map = ScalarField::from_vec(8, 8, x.clone()).unwrap();
    let total = ScalarField::constant(8, 8, 1.0).unwrap();
    let spectral =
        opmicro::stxm::synthetic_absorbance_stack(&refs, &x_map, &total, None, 0).unwrap();
    let stack = FrameStack::new(
        spectral.images().to_vec(),
        1,
        Some(spectral.energies().to_vec()),
    )
    .unwrap();
    let stack_path = dir.path().join("spec.npy");
    save_stack(&stack, &stack_path).unwrap();

    run_ok(
        bin()
            .args(["stxm", "--mode", "two_energy", "--kind", "absorbance", "--stack"])
            .arg(&stack_path)
            .arg("--out")
            .arg(dir.path().join("out")),
    );
    let (got, shape, _) = read_npy(&dir.path().join("out/x.npy")).unwrap();
    assert_eq!(shape, vec![8, 8]);
    for (g, w) in got.iter().zip(&x) {
        assert!((g - w).abs() < 1e-9, "x {g} != {w}");
    }
    let report = report_json(&dir.path().join("out/report.json"));
    assert_eq!(report["payload"]["n_invalid"], 0);
}

#[test]
fn neutron_delta_is_zero_for_constant_transmission() {
    let dir = tempfile::tempdir().unwrap();
    let ob = ScalarField::constant(8, 10, 1000.0).unwrap();
    let dc = ScalarField::constant(8, 10, 50.0).unwrap();
    let frame = ScalarField::constant(8, 10, 50.0 + 950.0 * 0.6).unwrap();
    let stack = FrameStack::new(vec![frame; 16], 1, None).unwrap();

    let paths = ["intensity.npy", "ob.npy", "dc.npy"];
    save_stack(&stack, &dir.path().join(paths[0])).unwrap();
    save_stack(
        &FrameStack::single_channel(vec![ob], None).unwrap(),
        &dir.path().join(paths[1]),
    )
    .unwrap();
    save_stack(
        &FrameStack::single_channel(vec![dc], None).unwrap(),
        &dir.path().join(paths[2]),
    )
    .unwrap();
    std::fs::write(
        dir.path().join("split.json"),
        r#"{"boundaries":[0,2,4,6,8,10,12,14,16],"first":"charge"}"#,
    )
    .unwrap();
    std::fs::write(
        dir.path().join("geom.json"),
        r#"{"px_per_cm":2.0,"cell_radius_cm":3.0,"cell_center_px":[4.5,4.0]}"#,
    )
    .unwrap();

    run_ok(
        bin()
            .args(["neutron", "--layout", "THW", "--intensity"])
            .arg(dir.path().join(paths[0]))
            .arg("--ob")
            .arg(dir.path().join(paths[1]))
            .arg("--dc")
            .arg(dir.path().join(paths[2]))
            .arg("--split")
            .arg(dir.path().join("split.json"))
            .arg("--geom")
            .arg(dir.path().join("geom.json"))
            .arg("--out")
            .arg(dir.path().join("out")),
    );

    let (delta, shape, _) = read_npy(&dir.path().join("out/delta_sigma.npy")).unwrap();
    assert_eq!(shape, vec![16, 8, 10, 1]);
    assert!(delta.iter().all(|&v| v == 0.0), "constant transmission must give zero delta");
    let report = report_json(&dir.path().join("out/report.json"));
    for f in report["payload"]["fractions"].as_array().unwrap() {
        assert_eq!(f.as_f64().unwrap(), 0.0);
    }
    assert_eq!(report["payload"]["local_variability"].as_f64().unwrap(), 0.0);
}
