use std::path::Path;
use std::process::{Command, Output};

fn masktab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_masktab"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path) {
    std::fs::write(
        dir.join("c.json"),
        r#"{"synth": {"n_labeled": 600, "n_unlabeled": 600},
            "train": {"pretrain": {"batch_size": 32, "total_steps": 6, "warmup_steps": 1}},
            "ablate": {"ladder": ["vanilla", "mask-embedding", "twin", "moe"]}}"#,
    )
    .unwrap();
}

#[test]
fn synth_twice_gives_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path());
    for out in ["a", "b"] {
        let o = masktab(&["synth", "--config", "c.json", "--seed", "7", "--out", out], tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["labeled.csv", "unlabeled.csv", "schema.json"] {
        let a = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn eval_with_missing_checkpoint_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let o = masktab(&["eval", "--checkpoint", "missing/"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing"), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
}

#[test]
fn ablate_table_has_one_row_per_rung() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path());
    let o = masktab(&["ablate", "--config", "c.json", "--out", "out"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(tmp.path().join("out/ablation.csv")).unwrap();
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["vanilla", "+mask-embedding", "+twin", "+moe"]);
    assert!(tmp.path().join("out/resolved_config.json").exists());
}

#[test]
fn unknown_subcommand_and_flag_exit_one_with_usage() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["synth", "--no-such-flag"][..]] {
        let o = masktab(args, tmp.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.json"), r#"{"trian": {}}"#).unwrap();
    let o = masktab(&["synth", "--config", "bad.json"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("trian"), "{}", stderr(&o));
}

#[test]
fn dry_run_touches_no_data() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path());
    let o = masktab(&["pretrain", "--config", "c.json", "--out", "out", "--dry-run"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("total_steps"));
    assert!(!tmp.path().join("out/checkpoint").exists());
}
