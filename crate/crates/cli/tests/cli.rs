use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn cdcgen(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdcgen"))
        .args(args)
        .env("CDCGEN_OUT_ROOT", root)
        .current_dir(root)
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = cdcgen(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(root: &Path, args: &[&str]) -> String {
    let out = cdcgen(root, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

const TINY: &str = r#"
name = "tiny"
seed = 3

[data]
kind = "pinwheel"
n_per_class = 60

[align]
steps = 12
batch_size = 16
log_every = 4

[cond]
steps = 12
batch_size = 16
log_every = 4

[eval]
samples_per_class = 40
cycle_samples = 50
max_points = 90

[eval.probe]
steps = 40
"#;

fn setup(config: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, config).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(dir.path(), &["train-align", "--confg", "x.toml"]);
    assert!(err.contains("--confg"), "{err}");
}

#[test]
fn missing_config_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(dir.path(), &["train-align", "--config", "nope.toml"]);
    assert!(err.contains("nope.toml"), "{err}");
}

#[test]
fn schema_violation_reports_position() {
    let (dir, cfg) = setup("name = \"x\"\n[data]\nkind = \"pinwheel\"\n[align]\nsteps = -4\n");
    let err = fails(dir.path(), &["train-align", "--config", s(&cfg)]);
    assert!(err.contains("line 5"), "{err}");
    assert!(!dir.path().join("x").exists());
}

#[test]
fn full_pipeline_is_reproducible() {
    let (dir, cfg) = setup(TINY);
    let root = dir.path();
    ok(root, &["gen-data", "--config", s(&cfg)]);
    assert!(root.join("tiny/data/target_eval_labels.csv").exists());
    let target_csv = fs::read_to_string(root.join("tiny/data/target.csv")).unwrap();
    assert!(target_csv.lines().skip(1).all(|l| l.ends_with(',')));

    ok(root, &["train-align", "--config", s(&cfg)]);
    let align = root.join("tiny/align.ckpt");
    let first = fs::read(&align).unwrap();
    let metrics = fs::read_to_string(root.join("tiny/metrics_align.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    // append-only run directory
    let err = fails(root, &["train-align", "--config", s(&cfg)]);
    assert!(err.contains("--overwrite"), "{err}");
    ok(root, &["train-align", "--config", s(&cfg), "--overwrite"]);
    assert_eq!(fs::read(&align).unwrap(), first);

    ok(
        root,
        &["train-cond", "--config", s(&cfg), "--from", s(&align)],
    );
    let cond = root.join("tiny/cond.ckpt");

    for out in ["a", "b"] {
        ok(
            root,
            &[
                "synthesize",
                "--from",
                s(&cond),
                "--class",
                "2",
                "--n",
                "5",
                "--seed",
                "7",
                "--out",
                out,
            ],
        );
    }
    let a = fs::read(root.join("a/samples.csv")).unwrap();
    assert_eq!(a, fs::read(root.join("b/samples.csv")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 6);

    ok(
        root,
        &[
            "translate",
            "--from",
            s(&cond),
            "--direction",
            "s2t",
            "--in",
            "tiny/data/source.csv",
            "--out",
            "moved",
        ],
    );
    ok(
        root,
        &[
            "translate",
            "--from",
            s(&cond),
            "--direction",
            "t2s",
            "--in",
            "moved/translated.csv",
            "--out",
            "back",
        ],
    );
    let src = fs::read_to_string(root.join("tiny/data/source.csv")).unwrap();
    let back = fs::read_to_string(root.join("back/translated.csv")).unwrap();
    for (a, b) in src.lines().zip(back.lines()).skip(1) {
        let p: Vec<f64> = a.split(',').take(2).map(|v| v.parse().unwrap()).collect();
        let q: Vec<f64> = b.split(',').take(2).map(|v| v.parse().unwrap()).collect();
        assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
    }

    let stdout = ok(root, &["eval", "--from", s(&cond), "--suite", "all"]);
    assert!(stdout.contains("cond_oracle_accuracy"), "{stdout}");
    let csv = fs::read_to_string(root.join("tiny/eval_all/eval.csv")).unwrap();
    for m in [
        "alignment_probe_accuracy",
        "silhouette_pooled",
        "cycle_max_error_source",
        "bits_per_dim_target",
    ] {
        assert!(csv.contains(m), "{csv}");
    }
    let proj = fs::read_to_string(root.join("tiny/eval_all/projection.csv")).unwrap();
    assert!(proj.starts_with("pc1,pc2,class,domain\n"));
    assert_eq!(proj.lines().count(), 181);

    // the cond suite refuses an alignment checkpoint
    fails(root, &["eval", "--from", s(&align), "--suite", "cond"]);
}

#[test]
fn generated_files_drive_a_second_run() {
    let (dir, cfg) = setup(TINY);
    let root = dir.path();
    ok(root, &["gen-data", "--config", s(&cfg), "--out", "files"]);
    let snippet = fs::read_to_string(root.join("files/data.toml")).unwrap();
    let cfg2 = root.join("files/run.toml");
    let body = TINY
        .replace("name = \"tiny\"", "name = \"from_files\"")
        .replace("kind = \"pinwheel\"\nn_per_class = 60\n", "");
    let body = body.replace("[data]\n", "");
    fs::write(&cfg2, format!("{body}\n{snippet}")).unwrap();
    ok(root, &["train-align", "--config", s(&cfg2)]);

    ok(root, &["train-align", "--config", s(&cfg)]);
    assert_eq!(
        fs::read(root.join("from_files/align.ckpt")).unwrap(),
        fs::read(root.join("tiny/align.ckpt")).unwrap(),
        "CSV round trip must preserve the data exactly"
    );
}

#[test]
fn labeled_target_is_refused() {
    let (dir, cfg) = setup(TINY);
    let root = dir.path();
    ok(root, &["gen-data", "--config", s(&cfg), "--out", "files"]);
    ok(root, &["train-align", "--config", s(&cfg)]);
    // a target file that still carries its classes
    let src = fs::read_to_string(root.join("files/source.csv")).unwrap();
    fs::write(root.join("files/labeled_target.csv"), &src).unwrap();
    let leak = format!(
        "{}\n[data]\nkind = \"points\"\nsource = \"files/source.csv\"\ntarget = \"files/labeled_target.csv\"\nclasses = 3\n",
        "name = \"leak\"\nseed = 3\n[cond]\nsteps = 2\nbatch_size = 8\n"
    );
    let leak_cfg = root.join("leak.toml");
    fs::write(&leak_cfg, leak).unwrap();
    let err = fails(
        root,
        &[
            "train-cond",
            "--config",
            s(&leak_cfg),
            "--from",
            s(&root.join("tiny/align.ckpt")),
        ],
    );
    assert!(err.contains("problem setting"), "{err}");
    assert!(!root.join("leak/cond.ckpt").exists());
    let err = fails(root, &["train-align", "--config", s(&leak_cfg)]);
    assert!(err.contains("problem setting"), "{err}");
}

#[test]
fn grad_check_passes_on_one_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["grad-check", "--seeds", "1"]);
    assert!(!out.contains("FAIL"), "{out}");
}

#[test]
fn digits_pipeline_writes_images() {
    let (dir, cfg) = setup(
        r#"
name = "img"
preset = "compact"
[data]
kind = "digits"
size = 8
per_class = 4
[align]
steps = 2
batch_size = 4
log_every = 1
[cond]
steps = 2
batch_size = 4
log_every = 1
"#,
    );
    let root = dir.path();
    ok(root, &["gen-data", "--config", s(&cfg)]);
    ok(root, &["train-align", "--config", s(&cfg)]);
    ok(
        root,
        &[
            "train-cond",
            "--config",
            s(&cfg),
            "--from",
            "img/align.ckpt",
        ],
    );
    ok(
        root,
        &[
            "synthesize",
            "--from",
            "img/cond.ckpt",
            "--class",
            "3",
            "--n",
            "2",
            "--out",
            "syn",
        ],
    );
    assert!(root.join("syn/samples-images.idx").exists());
    assert!(root.join("syn/samples-preview/samples_0001.pgm").exists());
    ok(
        root,
        &[
            "translate",
            "--from",
            "img/align.ckpt",
            "--direction",
            "t2s",
            "--in",
            "img/data/target-images.idx",
            "--out",
            "tr",
        ],
    );
    let bytes = fs::read(root.join("tr/translated-images.idx")).unwrap();
    assert_eq!(bytes.len(), 16 + 40 * 64);
}
