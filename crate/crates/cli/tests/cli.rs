use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use aam_cgd::bundle_io::load_bundle;
use tempfile::TempDir;

fn aam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aam-cgd"))
        .args(args)
        .env_remove("AAM_CGD_SEED")
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A synthetic dataset and a bundle trained on it, shared by every test.
struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn data(&self) -> std::path::PathBuf {
        self.dir.path().join("data")
    }

    fn bundle(&self) -> std::path::PathBuf {
        self.dir.path().join("model.aam")
    }
}

fn workspace() -> &'static Workspace {
    static WS: OnceLock<Workspace> = OnceLock::new();
    WS.get_or_init(|| {
        let ws = Workspace { dir: tempfile::tempdir().unwrap() };
        let synth = aam(&["synth", "--out", path(&ws.data()), "--count", "8", "--face-size", "60", "--seed", "3"]);
        assert!(synth.status.success(), "{}", stderr(&synth));
        let train = aam(&[
            "train",
            "--data",
            path(&ws.data()),
            "--face-size",
            "60",
            "--variance",
            "0.9",
            "--out",
            path(&ws.bundle()),
        ]);
        assert!(train.status.success(), "{}", stderr(&train));
        ws
    })
}

fn write_spec(dir: &Path, algorithms: &[&str]) -> std::path::PathBuf {
    let spec = serde_json::json!({
        "algorithms": algorithms,
        "trials": 1,
        "iters_per_scale": [3, 2],
        "seed": 11,
    });
    let p = dir.join("spec.json");
    fs::write(&p, spec.to_string()).unwrap();
    p
}

#[test]
fn training_on_an_empty_directory_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.aam");
    let o = aam(&["train", "--data", path(dir.path()), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no annotated images"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn trained_bundles_load_and_report_their_levels() {
    let ws = workspace();
    let bundle = load_bundle(&ws.bundle()).unwrap();
    bundle.validate().unwrap();
    assert_eq!(bundle.scales(), vec![0.5, 1.0]);
    let o = aam(&["inspect", "--bundle", path(&ws.bundle())]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("scale 0.5:") && text.contains("scale 1:"), "{text}");
}

#[test]
fn training_reports_the_retained_variance() {
    let ws = workspace();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.aam");
    let o = aam(&["train", "--data", path(&ws.data()), "--face-size", "60", "--scales", "1", "--variance", "0.75", "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("scale 1:")).unwrap().to_string();
    let retained: f64 = line.rsplit("retained=").next().unwrap().parse().unwrap();
    assert!(retained >= 0.75, "{line}");
}

#[test]
fn unknown_selectors_exit_with_the_valid_matrix() {
    let ws = workspace();
    let image = ws.data().join("face_0000.png");
    let o = aam(&["fit", "--bundle", path(&ws.bundle()), "--image", path(&image), "--algo", "SSD_Fwd_GN_Sch"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("unknown algorithm selector"), "{err}");
    assert!(err.contains("{SSD, PO}") && err.contains("{For, Inv, Asy, Bid}") && err.contains("{GN, N, W}"), "{err}");
}

#[test]
fn project_out_alternation_is_rejected() {
    let ws = workspace();
    let image = ws.data().join("face_0000.png");
    let o = aam(&["fit", "--bundle", path(&ws.bundle()), "--image", path(&image), "--algo", "PO_Asy_GN_Alt"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn fits_write_a_trace_per_iteration() {
    let ws = workspace();
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let image = ws.data().join("face_0001.png");
    let o = aam(&[
        "fit",
        "--bundle",
        path(&ws.bundle()),
        "--image",
        path(&image),
        "--algo",
        "ssd_asy_gn_alt",
        "--alpha",
        "0.2",
        "--iters",
        "3,2",
        "--seed",
        "4",
        "--out",
        path(&trace),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("SSD_Asy_GN_Alt "), "{}", stdout(&o));
    let text = fs::read_to_string(&trace).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert!(rows[0].starts_with("iteration,level,cost,normalized_cost,error,x0,y0"));
    assert!(rows.len() >= 2 && rows.len() <= 7);
    assert!(rows[1].starts_with("0,0,"));
}

#[test]
fn missing_landmarks_are_counted_as_warnings() {
    let ws = workspace();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir(&data).unwrap();
    for entry in fs::read_dir(ws.data()).unwrap() {
        let p = entry.unwrap().path();
        fs::copy(&p, data.join(p.file_name().unwrap())).unwrap();
    }
    for name in ["face_0002.pts", "face_0005.pts", "face_0006.pts"] {
        fs::remove_file(data.join(name)).unwrap();
    }
    let spec = write_spec(dir.path(), &["SSD_Asy_GN_Sch"]);
    let out = dir.path().join("out");
    let o = aam(&["bench", "--bundle", path(&ws.bundle()), "--data", path(&data), "--spec", path(&spec), "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("images: 5  fits per algorithm: 5  warnings: 3"), "{}", stdout(&o));
}

#[test]
fn benches_are_reproducible_and_list_every_algorithm() {
    let ws = workspace();
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), &["SSD_Asy_GN_Sch", "PO_Inv_GN", "SSD_Bid_W"]);
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = aam(&[
            "bench",
            "--bundle",
            path(&ws.bundle()),
            "--data",
            path(&ws.data()),
            "--spec",
            path(&spec),
            "--out",
            path(&out),
            "--seed",
            seed,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        (fs::read(out.join("stats.csv")).unwrap(), fs::read(out.join("curves.csv")).unwrap())
    };
    let a = run("a", "5");
    let b = run("b", "5");
    assert_eq!(a, b);
    let stats = String::from_utf8(a.0).unwrap();
    let rows: Vec<&str> = stats.lines().collect();
    assert_eq!(rows[0], "algorithm,p02,p03,p04,mean,std,median");
    assert_eq!(rows.len(), 4);
    let c = run("c", "6");
    assert_ne!(a.1, c.1);
}

#[test]
fn environment_seed_is_a_fallback() {
    let ws = workspace();
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), &["SSD_Asy_GN_Sch"]);
    let run = |name: &str, flag: Option<&str>, env: Option<&str>| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_aam-cgd"));
        cmd.args(["bench", "--bundle", path(&ws.bundle()), "--data", path(&ws.data()), "--spec", path(&spec), "--out", path(&out)])
            .env_remove("AAM_CGD_SEED");
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        if let Some(s) = env {
            cmd.env("AAM_CGD_SEED", s);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read(out.join("curves.csv")).unwrap()
    };
    assert_eq!(run("env", None, Some("9")), run("flag", Some("9"), None));
    assert_eq!(run("both", Some("9"), Some("1")), run("flag2", Some("9"), None));
    assert_eq!(run("spec", None, None), run("flag3", Some("11"), None));
}

#[test]
fn bad_arguments_are_usage_errors() {
    let ws = workspace();
    let o = aam(&["train", "--data", path(&ws.data()), "--scales", "0.3", "--out", "/nonexistent/x"]);
    assert_eq!(o.status.code(), Some(2));
    let o = aam(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = aam(&["train", "--data", path(&ws.data()), "--features", "sift", "--out", "/nonexistent/x"]);
    assert_eq!(o.status.code(), Some(2));
}
