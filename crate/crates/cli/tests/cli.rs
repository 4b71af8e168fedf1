use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use inrct::io::read_sinogram;
use inrct::phantom::Phantom;
use inrct::{ScanGeometry, Sinogram};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn inrct(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_inrct"));
    cmd.args(args).env_remove("INRCT_WORKERS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}\nstdout: {}\nstderr: {}", out.status, stdout(out), stderr(out));
    stdout(out)
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tiny(dir: &Path, phantom: &str, extra: &str) -> PathBuf {
    let text = format!(
        r#"
seed = 4
output_dir = "{out}"

[geometry]
source_to_detector_mm = 600.0
source_to_isocenter_mm = 400.0
detector_rows = 1
detector_cols = 48
pixel_pitch_mm = [1.2, 1.2]
n_views = 24
mode = "fan2d"

[domain]
fov_mm = [32.0, 32.0, 2.0]
extended_mm = [128.0, 128.0, 2.0]

{phantom}

[encoder]
n_levels = 4
n_min = 4
n_max = 32
table_size = 1024
feature_dim = 2
restricted_levels = 2

[mlp]
hidden_layers = 1
hidden_width = 16

[sampling]
step_inside = 1.0
step_outside = 4.0

[train]
learning_rate = 5e-3
batch_rays = 32
max_iterations = 60
eval_every = 20
stop_psnr_delta = 0.0

[eval]
voxel_pitch_mm = 2.0
supersample = 2
{extra}
"#,
        out = dir.join("out").display()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

const HEAD: &str = "[phantom]\nbuiltin = \"head\"";

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn empty_phantom_gives_zero_payload_golden() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "[phantom]\nbuiltin = \"empty\"", "");
    let out = dir.path().join("zero.sino");
    ok(&inrct(&["simulate", "-c", s(&cfg), "-o", s(&out)], &[]));

    let mut golden = b"SINO0001".to_vec();
    for v in [24u32, 1, 48, 0] {
        golden.extend(v.to_le_bytes());
    }
    for v in [600.0f64, 400.0, 1.2, 1.2, 0.0, 2.0 * std::f64::consts::PI] {
        golden.extend(v.to_le_bytes());
    }
    golden.extend(vec![0u8; 24 * 48 * 4]);
    assert_eq!(std::fs::read(&out).unwrap(), golden);
    assert!(dir.path().join("zero.geometry.toml").exists());
    assert!(dir.path().join("out/manifest_simulate.json").exists());
}

#[test]
fn simulated_head_matches_analytic_projections() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), HEAD, "").to_string_lossy().into_owned();
    let desk = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("detector_cols = 48", "detector_cols = 256")
        .replace("pixel_pitch_mm = [1.2, 1.2]", "pixel_pitch_mm = [0.55, 0.55]")
        .replace("n_views = 24", "n_views = 120");
    std::fs::write(&cfg, desk).unwrap();
    let (a, b) = (dir.path().join("a.sino"), dir.path().join("b.sino"));
    ok(&inrct(&["simulate", "-c", &cfg, "-o", s(&a)], &[]));
    ok(&inrct(&["simulate", "-c", &cfg, "-o", s(&b)], &[("INRCT_WORKERS", "2")]));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap(), "reruns must be byte-identical");

    let sino = read_sinogram(&a).unwrap();
    let geom = ScanGeometry::fan2d(600.0, 400.0, 256, 0.55, 120).unwrap();
    assert_eq!(sino.geometry, geom);
    let phantom = Phantom::builtin("head", true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let i = rng.random_range(0..geom.n_rays());
        // The container stores f32, so the oracle is rounded the same way.
        let oracle = phantom.analytic_projection(&geom.ray_at(i).unwrap()) as f32 as f64;
        let got = sino.values[i];
        assert!((got - oracle).abs() <= 1e-9 * oracle.abs().max(1e-30), "ray {i}: {got} vs {oracle}");
    }
}

#[test]
fn config_errors_exit_2_and_list_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), HEAD, "");
    let bad = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("extended_mm = [128.0, 128.0, 2.0]", "extended_mm = [16.0, 128.0, 2.0]")
        .replace("step_outside = 4.0", "step_outside = 0.5")
        .replace("hidden_width = 16", "hidden_width = 16\ninput_dim = 5");
    std::fs::write(&cfg, bad).unwrap();
    let out = inrct(&["train", "-c", s(&cfg)], &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("input_dim") && err.contains("extended FOV") && err.contains("step"), "{err}");

    let no_phantom = tiny(dir.path(), "", "");
    assert_eq!(inrct(&["simulate", "-c", s(&no_phantom)], &[]).status.code(), Some(2));
    let out = inrct(&["train", "-c", s(&no_phantom)], &[("INRCT_WORKERS", "many")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_of_identical_volumes_is_infinite_psnr_and_unit_ssim() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), HEAD, "");
    let vol = dir.path().join("fbp.vol");
    ok(&inrct(&["fdk", "-c", s(&cfg), "-o", s(&vol)], &[]));
    let csv = dir.path().join("m.csv");
    let text = ok(&inrct(&["eval", "--recon", s(&vol), "--reference", s(&vol), "-o", s(&csv)], &[]));
    assert!(text.contains("PSNR inf dB, SSIM 1.0000"), "{text}");
    let row = std::fs::read_to_string(&csv).unwrap().lines().nth(1).unwrap().to_string();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[1], "inf");
    assert_eq!(fields[2].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn train_reconstruct_fdk_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), HEAD, "");
    let out_dir = dir.path().join("out");
    let (c1, c2) = (dir.path().join("c1.inr"), dir.path().join("c2.inr"));
    ok(&inrct(&["train", "-c", s(&cfg), "-o", s(&c1)], &[("INRCT_WORKERS", "1")]));
    ok(&inrct(&["train", "-c", s(&cfg), "-o", s(&c2)], &[("INRCT_WORKERS", "3")]));
    assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap(), "training must not depend on worker count");
    let log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("iteration,loss,psnr,wall_ms,phase"));
    assert_eq!(log.lines().filter(|l| l.ends_with(",eval")).count(), 3);

    let inr = dir.path().join("inr.vol");
    ok(&inrct(&["reconstruct", "-c", s(&cfg), "--checkpoint", s(&c1), "-o", s(&inr), "--png"], &[]));
    assert!(dir.path().join("inr.png").exists());
    let ext = dir.path().join("inr_ext.vol");
    ok(&inrct(&["reconstruct", "-c", s(&cfg), "--checkpoint", s(&c1), "--region", "extended", "-o", s(&ext)], &[]));
    let fbp = dir.path().join("fbp.vol");
    ok(&inrct(&["fdk", "-c", s(&cfg), "--extrapolate", "-o", s(&fbp)], &[]));
    let diff = dir.path().join("diff.png");
    let text = ok(&inrct(&["eval", "-c", s(&cfg), "--recon", s(&inr), "--diff-png", s(&diff), "--label", "inr"], &[]));
    assert!(text.starts_with("inr: PSNR "), "{text}");
    assert!(diff.exists());

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest_train.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["wall_clock_s"].as_f64().unwrap() > 0.0);
    assert_eq!(manifest["versions"]["sinogram_format"], "SINO0001");
    for cmd in ["reconstruct", "fdk", "eval"] {
        assert!(out_dir.join(format!("manifest_{cmd}.json")).exists(), "{cmd}");
    }

    // Resuming continues from the checkpoint with the same model shape.
    ok(&inrct(&["train", "-c", s(&cfg), "--resume", s(&c1), "--mode", "truncated", "-o", s(&c2)], &[]));
}

#[test]
fn non_finite_data_exits_3_with_diagnostic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let geom = ScanGeometry::fan2d(600.0, 400.0, 48, 1.2, 24).unwrap();
    let sino = Sinogram::from_values(geom.clone(), vec![f64::NAN; geom.n_rays()]).unwrap();
    inrct::io::write_sinogram(&dir.path().join("nan.sino"), &sino).unwrap();
    let cfg = tiny(dir.path(), "", "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("seed = 4", "seed = 4\nsinogram = \"nan.sino\"");
    std::fs::write(&cfg, text).unwrap();
    let out = inrct(&["train", "-c", s(&cfg)], &[]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(dir.path().join("out/diagnostic.inr").exists());
}

#[test]
fn single_setting_ablation_matches_plain_training() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = "[[ablate.settings]]\nlabel = \"same\"\nmode = \"extended\"\nrestricted_levels = 2\nstep_outside = 4.0\n";
    let cfg = tiny(dir.path(), HEAD, sweep);
    ok(&inrct(&["train", "-c", s(&cfg)], &[]));
    ok(&inrct(&["ablate", "-c", s(&cfg)], &[]));
    let out_dir = dir.path().join("out");
    let log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    let last_eval = log.lines().filter(|l| l.ends_with(",eval")).last().unwrap();
    let train_psnr: f64 = last_eval.split(',').nth(2).unwrap().parse().unwrap();
    let summary = std::fs::read_to_string(out_dir.join("ablation_summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    let fields: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(fields[0], "same");
    assert_eq!(fields[4], format!("{train_psnr:.4}"));
    assert_eq!(fields[6], "60");

    let empty = tiny(dir.path(), HEAD, "");
    assert_eq!(inrct(&["ablate", "-c", s(&empty)], &[]).status.code(), Some(2));
}
