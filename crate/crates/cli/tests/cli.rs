use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use codenoise::io::load_tensor;
use codenoise::metrics::read_rows;

fn codenoise(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_codenoise"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scene(start: usize, end: usize, motion: &str, cx: f64) -> String {
    format!(
        r#"
[[conditions.scenes]]
start = {start}
end = {end}
[conditions.scenes.scene]
motion = "{motion}"
velocity = 0.3
center = [{cx}, 2.0]
blob_width = 1.0
amplitude = 1.0
frame_shape = [4, 4]
"#
    )
}

fn small_manifest(mode: &str, frames: usize, window: usize, stride: usize) -> String {
    format!(
        r#"
mode = "{mode}"
seed = 3
[layout]
frames = {frames}
window = {window}
stride = {stride}
frame_shape = [4, 4]
[sampler]
steps = 8
guidance_scale = 2.0
{}
[denoiser]
kind = "analytic"
"#,
        scene(0, frames, "linear", 1.0)
    )
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run_ok(config: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let o = codenoise(&args);
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn generate_single_clip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "m.toml", &small_manifest("generate", 8, 8, 4));
    let out = dir.path().join("out");
    let stdout = run_ok(&cfg, &out, &[]);
    assert!(stdout.contains("clips 1"), "{stdout}");
    let video = load_tensor(&out.join("co_denoised_seed3.tensor")).unwrap();
    assert_eq!(video.num_frames(), 8);
    assert_eq!(video.frame_shape(), &[4, 4]);
    for name in ["manifest.toml", "metrics.csv", "summary.txt"] {
        assert!(out.join(name).exists(), "{name}");
    }
}

#[test]
fn repeat_twenty_gives_twenty_rows_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "m.toml", &small_manifest("ablate", 16, 8, 4));
    let out = dir.path().join("out");
    run_ok(&cfg, &out, &["--repeat", "20", "--seed", "100"]);
    let rows = read_rows(std::fs::File::open(out.join("metrics.csv")).unwrap()).unwrap();
    for method in ["co_denoised", "isolated"] {
        let mut seeds: Vec<u64> = rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.seed)
            .collect();
        seeds.sort();
        assert_eq!(seeds, (100..120).collect::<Vec<_>>(), "{method}");
    }

    let report_dir = dir.path().join("report");
    let o = codenoise(&[
        "report",
        out.join("metrics.csv").to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("co_denoised vs isolated: pairs 20"), "{text}");
    assert!(report_dir.join("isolated_frame_consistency.dat").exists());
}

#[test]
fn emitted_manifest_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    // 14 frames need 2 frames of padding on the stride-4 grid
    let cfg = write(dir.path(), "m.toml", &small_manifest("generate", 14, 8, 4));
    let first = dir.path().join("first");
    run_ok(&cfg, &first, &["--repeat", "2"]);
    let emitted = std::fs::read_to_string(first.join("manifest.toml")).unwrap();
    assert!(emitted.contains("pad = 2"), "{emitted}");

    let second = dir.path().join("second");
    run_ok(&first.join("manifest.toml"), &second, &["--workers", "3"]);
    for name in [
        "co_denoised_seed3.tensor",
        "co_denoised_seed4.tensor",
        "metrics.csv",
    ] {
        let a = std::fs::read(first.join(name)).unwrap();
        let b = std::fs::read(second.join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn train_then_sample_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let train = format!(
        r#"
mode = "train_one_shot"
[layout]
frames = 16
window = 8
stride = 4
frame_shape = [4, 4]
{}
[train]
epochs = 3
hidden = 8
time_features = 4
"#,
        scene(0, 16, "linear", 1.0)
    );
    let cfg = write(dir.path(), "train.toml", &train);
    let trained = dir.path().join("trained");
    let stdout = run_ok(&cfg, &trained, &[]);
    assert!(stdout.contains("convergence epoch"), "{stdout}");
    let ckpt = trained.join("model.ckpt");
    assert!(ckpt.exists());

    let gen = small_manifest("generate", 16, 8, 4).replace(
        "kind = \"analytic\"",
        &format!("kind = \"learned\"\ncheckpoint = \"{}\"", ckpt.display()),
    );
    let cfg = write(dir.path(), "gen.toml", &gen);
    let out = dir.path().join("gen");
    run_ok(&cfg, &out, &[]);
    let emitted = std::fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(emitted.contains("sha256 = "), "{emitted}");

    let tampered = emitted.replace("sha256 = \"", "sha256 = \"0");
    let cfg = write(dir.path(), "tampered.toml", &tampered);
    let o = codenoise(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("t").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = codenoise(&[
        "run",
        "--config",
        "/nonexistent/m.toml",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(1));

    let cfg = write(
        dir.path(),
        "bad.toml",
        &small_manifest("generate", 8, 8, 4).replace("generate", "teleport"),
    );
    let o = codenoise(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("configuration error"));
}

#[test]
fn divergence_exits_two_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let train = format!(
        r#"
mode = "train_one_shot"
[layout]
frames = 16
window = 8
stride = 4
frame_shape = [4, 4]
{}
[train]
epochs = 50
base_lr = 1e6
hidden = 8
time_features = 4
"#,
        scene(0, 16, "linear", 1.0)
    );
    let cfg = write(dir.path(), "train.toml", &train);
    let out = dir.path().join("out");
    let o = codenoise(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let diag = std::fs::read_to_string(out.join("diagnostic.txt")).unwrap();
    assert!(diag.starts_with("numerical failure"), "{diag}");
}

#[test]
fn malformed_csv_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write(
        dir.path(),
        "bad.csv",
        "run_id,method,frame_consistency,align_mean,align_var_x100,seed\na-1,a,0.5,0.5,0.1,1\na-2,a,oops,0.5,0.1,2\n",
    );
    let o = codenoise(&[
        "report",
        csv.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn report_needs_input() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write(
        dir.path(),
        "empty.csv",
        "run_id,method,frame_consistency,align_mean,align_var_x100,seed\n",
    );
    let o = codenoise(&[
        "report",
        csv.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}
