use std::path::Path;
use std::process::{Command, Output};

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aftermath"))
        .args(args)
        .env("AFTERMATH_OUT", out)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = run(out, args);
    assert_eq!(code(&o), 0, "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn smoke_pipeline_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    fn with<'a>(rest: &[&'a str]) -> Vec<&'a str> {
        rest.iter().copied().chain(["--preset", "smoke"]).collect()
    }

    ok(out, &with(&["gen-data", "--domains", "delta-flood,ridge-wildfire"]));
    assert!(out.join("data/delta-flood.jsonl").exists());
    assert!(out.join("data/resolved_config.json").exists());
    let again = ok(out, &with(&["gen-data", "--domains", "delta-flood,ridge-wildfire"]));
    assert!(again.contains("up to date"), "{again}");

    ok(out, &with(&["train-codec"]));
    ok(out, &with(&["train-generator"]));
    ok(out, &with(&["train-scorer"]));
    let ft = ok(out, &with(&["finetune-generator", "--target", "delta-flood"]));
    assert!(ft.contains("masked-token CE"), "{ft}");
    ok(out, &with(&["synthesize", "--target", "delta-flood"]));
    assert!(out.join("synthetic/delta-flood/synthetic.jsonl").exists());
    let trained = ok(out, &with(&["train", "--variant", "R4", "--target", "delta-flood", "--sources", "ridge-wildfire"]));
    assert!(trained.contains("AUPRC"), "{trained}");
    let ckpt = out.join("classifiers/R4-delta-flood-r0");
    let ckpt = ckpt.to_str().unwrap();
    ok(out, &with(&["evaluate", "--checkpoint", ckpt, "--domain", "delta-flood"]));

    let again = ok(out, &with(&["synthesize", "--target", "delta-flood"]));
    assert!(again.contains("up to date"), "{again}");

    // A different seed for an existing run names the key and both sources.
    let clash = run(out, &with(&["synthesize", "--target", "delta-flood", "--seed", "5"]));
    assert_eq!(code(&clash), 1);
    let msg = String::from_utf8_lossy(&clash.stderr);
    assert!(msg.contains("\"seed\"") && msg.contains("preset smoke") && msg.contains("--seed"), "{msg}");
    ok(out, &with(&["synthesize", "--target", "delta-flood", "--seed", "5", "--force"]));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    assert_eq!(code(&run(out, &["no-such-command"])), 1);
    assert_eq!(code(&run(out, &["--help"])), 0);
    assert_eq!(code(&run(out, &["gen-data", "--domains", "atlantis", "--preset", "smoke"])), 1);
    assert_eq!(code(&run(out, &["gen-data", "--set", "codec.bogus=1"])), 1);
    // No rendered data yet.
    assert_eq!(code(&run(out, &["evaluate", "--checkpoint", "nowhere", "--domain", "delta-flood", "--preset", "smoke"])), 2);
}
