use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_intrinsics4d");

const SMALL_JOB: &str = r#"
seed = 3

[field]
plane_resolution = 16
plane_channels = 4
keyframes = 4
hash_levels = 4
log2_table_size = 10
base_resolution = 4
finest_resolution = 32
hidden_width = 16

[renderer]
width = 24
height = 24
mesh_resolution = 20

[renderer.options]
samples_per_pixel = 4

[template.maps]
render_width = 64
render_height = 64
h_f = 8
w_f = 8

[distill.run]
iterations = 6
vid_every = 3
vid_frames = 3
checkpoint_every = 3

[distill.run.views]
width = 16
height = 16
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("job.toml"), SMALL_JOB).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(BIN);
        cmd.current_dir(self.dir.path()).arg("--config").arg(self.path("job.toml")).args(args);
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str], env: &[(&str, &str)]) -> String {
        let out = self.run(args, env);
        assert!(
            out.status.success(),
            "{args:?} failed: {}\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn checksums(m: &Value) -> Vec<(String, String)> {
    m["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| (a["path"].as_str().unwrap().to_string(), a["sha256"].as_str().unwrap().to_string()))
        .collect()
}

#[test]
fn selfcheck_passes_on_a_fresh_checkout() {
    let out = Command::new(BIN).arg("selfcheck").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{text}");
    assert!(text.lines().count() >= 10);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
}

#[test]
fn gradcheck_reports_errors_below_tolerance() {
    let out = Command::new(BIN).args(["gradcheck", "--probes", "64"]).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(out.status.code(), Some(0), "{text}");
    let err = |prefix: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(prefix)).unwrap();
        line.split_whitespace().nth(4).unwrap().parse().unwrap()
    };
    assert!(err("pointwise max relative error") < 1e-4, "{text}");
    assert!(err("render max relative error") < 1e-3, "{text}");
}

#[test]
fn render_is_reproducible_and_lists_every_artifact() {
    let ws = Workspace::new();
    let args = |out: &str| ["--out".to_string(), out.to_string(), "render".into(), "--xi".into(), "azimuth=0,elev=20".into(), "--t".into(), "0.5".into()];
    let a: Vec<String> = args("a").to_vec();
    let b: Vec<String> = args("b").to_vec();
    ws.ok(&a.iter().map(String::as_str).collect::<Vec<_>>(), &[]);
    ws.ok(&b.iter().map(String::as_str).collect::<Vec<_>>(), &[]);
    let (ma, mb) = (manifest(&ws.path("a")), manifest(&ws.path("b")));
    assert_eq!(checksums(&ma), checksums(&mb));
    assert_eq!(ma["seed"], 3);
    assert_eq!(ma["config_sha256"].as_str().unwrap().len(), 64);
    let names: Vec<String> = checksums(&ma).into_iter().map(|(p, _)| p).collect();
    for f in ["render_rgb.png", "render_rgb.exr", "render_albedo.png", "render_normal.png", "render_aovs.i4d"] {
        assert!(names.contains(&f.to_string()), "{names:?}");
        assert!(ws.path("a").join(f).is_file());
    }

    // A different seed changes the Monte Carlo estimate.
    ws.ok(&["--out", "c", "--seed", "4", "render", "--xi", "azimuth=0,elev=20", "--t", "0.5"], &[]);
    assert_ne!(checksums(&ma), checksums(&manifest(&ws.path("c"))));
}

#[test]
fn malformed_config_exits_one_with_the_key_path() {
    let ws = Workspace::new();
    std::fs::write(ws.path("job.toml"), "[renderer.options]\nsamples_per_pixle = 3\n").unwrap();
    let out = ws.run(&["render", "--xi", "azimuth=0", "--t", "0.5"], &[]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("renderer.options.samples_per_pixle"), "{err}");

    std::fs::write(ws.path("job.toml"), "[field]\nkeyframes = \"eight\"\n").unwrap();
    let out = ws.run(&["selfcheck"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("field.keyframes"));

    std::fs::write(ws.path("job.toml"), "[field]\nkeyframes = 1\n").unwrap();
    assert_eq!(ws.run(&["render", "--xi", "azimuth=0", "--t", "0.5"], &[]).status.code(), Some(1));
}

#[test]
fn invalid_arguments_and_inputs_exit_one() {
    let ws = Workspace::new();
    for args in [
        vec!["render", "--xi", "azimuth=0", "--t", "1.5"],
        vec!["render", "--xi", "tilt=3", "--t", "0.5"],
        vec!["--provider", "magic", "distill", "run"],
        vec!["template", "statemap", "--xi", "azimuth=0", "--t", "0.5"],
        vec!["frobnicate"],
    ] {
        assert_eq!(ws.run(&args, &[]).status.code(), Some(1), "{args:?}");
    }
    let out = ws.run(&["render", "--xi", "azimuth=0", "--t", "0.5"], &[("I4D_IO_CHECKPOINT", "missing.i4d")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("io.checkpoint"));
}

#[test]
fn environment_overrides_reach_the_resolved_config() {
    let ws = Workspace::new();
    let text = ws.ok(
        &["print-config"],
        &[("I4D_DISTILL_RUN__LR_GRID", "0.25"), ("I4D_RENDERER_WIDTH", "40"), ("I4D_SEED", "17")],
    );
    let doc: toml::Table = toml::from_str(&text).unwrap();
    assert_eq!(doc["seed"].as_integer(), Some(17));
    assert_eq!(doc["renderer"]["width"].as_integer(), Some(40));
    assert_eq!(doc["distill"]["run"]["lr_grid"].as_float(), Some(0.25));
    assert_eq!(ws.run(&["print-config"], &[("I4D_NOPE_KEY", "1")]).status.code(), Some(1));
}

#[test]
fn template_fit_statemap_and_mesh_export() {
    let ws = Workspace::new();
    let summary: Value = serde_json::from_str(ws.ok(&["--out", "tpl", "template", "fit"], &[]).trim()).unwrap();
    assert_eq!(summary["basis_dim"], 3);
    let first = checksums(&manifest(&ws.path("tpl")));
    assert_eq!(first.len(), 3);

    ws.ok(&["--out", "tpl", "template", "fit"], &[]);
    assert_eq!(checksums(&manifest(&ws.path("tpl"))), first);

    let summary: Value = serde_json::from_str(
        ws.ok(&["--out", "tpl", "template", "statemap", "--xi", "azimuth=30,elev=20", "--t", "0.25"], &[])
            .trim(),
    )
    .unwrap();
    assert_eq!(summary["shape"], serde_json::json!([8, 8, 3]));
    let (_, arrays) = intrinsics4d::io::tensorfile::read(&ws.path("tpl/statemap.i4d")).unwrap();
    assert_eq!(arrays[0].shape, vec![8, 8, 3]);
    assert!(arrays[0].to_f64().iter().all(|v| v.is_finite()));

    ws.ok(&["--out", "mesh", "export-mesh", "--t", "0.5"], &[]);
    let mesh = intrinsics4d::io::obj::read(&ws.path("mesh/mesh.obj")).unwrap();
    assert!(!mesh.faces.is_empty());
    assert_eq!(mesh.euler_characteristic(), 2);
    assert_eq!(checksums(&manifest(&ws.path("mesh")))[0].0, "mesh.obj");
}

#[test]
fn analytic_distillation_is_deterministic_and_does_not_touch_inputs() {
    let ws = Workspace::new();
    ws.ok(&["--out", "init", "distill", "run"], &[("I4D_DISTILL_RUN__ITERATIONS", "0")]);
    let init = ws.path("init/field.i4d");
    let before = std::fs::read(&init).unwrap();
    let env = [("I4D_IO_CHECKPOINT", "init/field.i4d")];
    let a: Value = serde_json::from_str(ws.ok(&["--out", "a", "distill", "run"], &env).trim()).unwrap();
    let b: Value = serde_json::from_str(ws.ok(&["--out", "b", "distill", "run"], &env).trim()).unwrap();
    assert_eq!(a["checkpoint_sha256"], b["checkpoint_sha256"]);
    assert_eq!(a["applied"], 6);
    assert!(a["held_out_psnr_mean"].as_f64().unwrap().is_finite());
    assert_eq!(checksums(&manifest(&ws.path("a"))), checksums(&manifest(&ws.path("b"))));
    let names: Vec<String> = checksums(&manifest(&ws.path("a"))).into_iter().map(|(p, _)| p).collect();
    assert_eq!(
        names,
        ["checkpoints/ckpt_000003.i4d", "checkpoints/ckpt_000006.i4d", "field.i4d", "metrics.ndjson"]
    );
    let lines = std::fs::read_to_string(ws.path("a/metrics.ndjson")).unwrap();
    assert_eq!(lines.lines().count(), 6);
    assert_eq!(std::fs::read(&init).unwrap(), before);

    // Writing over the input checkpoint is refused.
    let out = ws.run(&["--out", "init", "distill", "run"], &env);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(std::fs::read(&init).unwrap(), before);
}

#[test]
fn external_provider_over_spawned_echo_server() {
    let ws = Workspace::new();
    ws.ok(&["--out", "tpl", "template", "fit"], &[]);
    let provider = format!("external:spawn:{BIN} provider serve-echo");
    let summary: Value = serde_json::from_str(
        ws.ok(
            &["--out", "ext", "--provider", &provider, "distill", "run"],
            &[("I4D_IO_TEMPLATE", "tpl"), ("I4D_DISTILL_RUN__ITERATIONS", "3")],
        )
        .trim(),
    )
    .unwrap();
    assert_eq!(summary["iterations"], 3);
    assert_eq!(summary["skipped"], 0);

    let text = ws.ok(&["--provider", &provider, "provider", "conformance", "--valid", "10", "--malformed", "30"], &[]);
    let report: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["responses"], 10);
    assert_eq!(report["errors"], 30);
}

#[test]
fn unreachable_provider_is_a_runtime_failure() {
    let ws = Workspace::new();
    ws.ok(&["--out", "tpl", "template", "fit"], &[]);
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let provider = format!("external:tcp:{addr}");
    let out = ws.run(&["--out", "x", "--provider", &provider, "distill", "run"], &[("I4D_IO_TEMPLATE", "tpl")]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
