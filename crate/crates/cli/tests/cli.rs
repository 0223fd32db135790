use std::path::Path;
use std::process::{Command, Output};

fn echosynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_echosynth"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fixture(dir: &Path, patients: &str) -> std::path::PathBuf {
    let scans = dir.join("scans");
    ok(&echosynth(&["make-fixture", "--root", s(&scans), "--patients", patients, "--size", "32"]));
    let data = dir.join("data");
    let out = ok(&echosynth(&[
        "ingest",
        "--root",
        s(&scans),
        "--out",
        s(&data),
        "--resolution",
        "16",
        "--validation-patients",
        "2",
    ]));
    assert!(out.contains("8 records"), "{out}");
    data
}

#[test]
fn train_synthesize_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), "4");
    let run = dir.path().join("run");
    let train = ok(&echosynth(&[
        "train",
        "--mode",
        "unconditional",
        "--data",
        s(&data.join("train")),
        "--run-dir",
        s(&run),
        "--set",
        "max_iterations=3",
        "--set",
        "checkpoint_every=3",
        "--set",
        "model.image_size=16",
        "--set",
        "model.base_width=4",
    ]));
    assert!(train.contains("trained 3 iterations"), "{train}");
    let ckpt = run.join("checkpoints").join("step-00000003");
    assert!(run.join("run.json").is_file() && run.join("config.toml").is_file());

    let synth = dir.path().join("synth");
    let args = ["synthesize", "--checkpoint", s(&ckpt), "--out", s(&synth), "--count", "8", "--steps", "4", "--seed", "3"];
    ok(&echosynth(&args));
    let first = std::fs::read_to_string(synth.join("manifest.json")).unwrap();
    std::fs::remove_dir_all(&synth).unwrap();
    ok(&echosynth(&args));
    assert_eq!(std::fs::read_to_string(synth.join("manifest.json")).unwrap(), first);

    let eval = dir.path().join("eval");
    let md = ok(&echosynth(&[
        "evaluate",
        "--real",
        s(&data.join("validation")),
        "--synthetic",
        s(&synth),
        "--out",
        s(&eval),
        "--extractor",
        "random-projection:0:8:4",
        "--kid-subsets",
        "5",
    ]));
    assert!(md.contains("## Generation quality") && md.contains("raw MMD²"), "{md}");
    assert!(eval.join("report.json").is_file() && eval.join("report.md").is_file());

    let merged = dir.path().join("merged");
    let md = ok(&echosynth(&["report", s(&eval), "--out", s(&merged)]));
    assert!(md.contains("## Reference values"));
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path(), "3");
    let bad_key = echosynth(&[
        "train",
        "--mode",
        "text",
        "--data",
        s(&data.join("train")),
        "--run-dir",
        s(&dir.path().join("r")),
        "--set",
        "model.dept=2",
    ]);
    assert_eq!(bad_key.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("dept"));

    let blowup = echosynth(&[
        "train",
        "--mode",
        "unconditional",
        "--data",
        s(&data.join("train")),
        "--run-dir",
        s(&dir.path().join("blowup")),
        "--set",
        "max_iterations=20",
        "--set",
        "model.image_size=16",
        "--set",
        "model.base_width=4",
        "--set",
        "learning_rate=1e300",
    ]);
    assert_eq!(blowup.status.code(), Some(4));

    let overlap = echosynth(&[
        "downstream-seg",
        "--train",
        s(&data.join("train")),
        "--validation",
        s(&data.join("train")),
        "--out",
        s(&dir.path().join("seg")),
    ]);
    assert_eq!(overlap.status.code(), Some(3));

    let missing = echosynth(&["report", s(&dir.path().join("nope")), "--out", s(&dir.path().join("rep"))]);
    assert_eq!(missing.status.code(), Some(1));

    let zero = echosynth(&["make-fixture", "--root", s(&dir.path().join("x")), "--patients", "0"]);
    assert_eq!(zero.status.code(), Some(2));

    let locked = dir.path().join("locked");
    std::fs::create_dir_all(&locked).unwrap();
    std::fs::write(locked.join(".lock"), "").unwrap();
    let busy = echosynth(&["ingest", "--root", s(&dir.path().join("scans")), "--out", s(&locked)]);
    assert_eq!(busy.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&busy.stderr).contains("locked"));
}
