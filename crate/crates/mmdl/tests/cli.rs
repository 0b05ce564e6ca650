use std::path::Path;
use std::process::{Command, Output};

fn mmdl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmdl"))
        .args(args)
        .env("MMDL_LOG", "warn")
        .output()
        .expect("spawn mmdl")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(path: &Path, seed: &str) -> Output {
    mmdl(&["gen-data", "--out", path.to_str().unwrap(), "--seed", seed, "--train-episodes", "24", "--test-episodes", "12"])
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(mmdl(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mmdl(&["gen-data", "--out", "x", "--bogus"]).status.code(), Some(2));
    assert_eq!(mmdl(&["train", "--dataset", "d", "--out", "o", "--modality", "audio"]).status.code(), Some(2));
    let bad_lr = mmdl(&["train", "--dataset", "d", "--out", "o", "--lr", "0"]);
    assert_eq!(bad_lr.status.code(), Some(2));
    assert!(stderr(&bad_lr).starts_with("error: usage:"), "{}", stderr(&bad_lr));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.mmds"), dir.path().join("b.mmds"));
    assert!(gen(&a, "7").status.success());
    assert!(gen(&b, "7").status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("a.manifest.tsv")).unwrap(),
        std::fs::read(dir.path().join("b.manifest.tsv")).unwrap()
    );
}

#[test]
fn runtime_errors_exit_1_with_category() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.mmds");
    assert!(gen(&data, "1").status.success());
    let bytes = std::fs::read(&data).unwrap();
    std::fs::write(&data, &bytes[..bytes.len() / 2]).unwrap();
    let out = dir.path().join("run");
    let o = mmdl(&["train", "--dataset", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error: format: "), "{err}");
    assert_eq!(err.lines().count(), 1);
    assert!(!out.exists());

    let o = mmdl(&["eval", "--dataset", "nowhere.mmds", "--checkpoint", "nowhere.ckpt", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: io: "));
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.cfg");
    std::fs::write(&cfg, "# tiny\nseed = 7\ntrain-episodes=24\ntest-episodes = 12\n").unwrap();
    let (a, b, c) = (dir.path().join("a.mmds"), dir.path().join("b.mmds"), dir.path().join("c.mmds"));
    assert!(gen(&a, "7").status.success());
    let o = mmdl(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let o = mmdl(&["gen-data", "--config", cfg.to_str().unwrap(), "--seed", "8", "--out", c.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

    std::fs::write(&cfg, "no equals sign\n").unwrap();
    let o = mmdl(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_lists_flags_with_defaults() {
    let top = stdout(&mmdl(&["--help"]));
    for sub in ["gen-data", "train", "distill", "train-omnivore", "eval", "report", "gradcheck", "repro"] {
        assert!(top.contains(sub), "missing {sub}");
    }
    let train = stdout(&mmdl(&["train", "--help"]));
    for flag in [
        "--dataset",
        "--split",
        "[default: comp]",
        "--modality",
        "[default: rgb]",
        "--epochs",
        "[default: 20",
        "--batch-size",
        "[default: 32]",
        "--lr",
        "--tau",
        "[default: 10]",
        "--preset",
        "[default: desk]",
        "--seed",
        "[default: 1]",
        "--workers",
        "--config",
    ] {
        assert!(train.contains(flag), "train --help lacks {flag}:\n{train}");
    }
    let gen = stdout(&mmdl(&["gen-data", "--help"]));
    assert!(gen.contains("[default: 1200]") && gen.contains("[default: 480]"));
}

#[test]
fn gradcheck_passes() {
    let o = mmdl(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("check\tmax_rel_error\ttolerance\tstatus\n"));
    assert!(out.lines().skip(1).all(|l| l.ends_with("\tok")));
    for name in ["matmul", "softmax", "kd_loss", "model_rgb", "model_boxes"] {
        assert!(out.lines().any(|l| l.starts_with(&format!("{name}\t"))), "{name}");
    }
}

#[test]
fn train_eval_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    assert!(gen(&dir.path().join("d.mmds"), "2").status.success());
    let common = ["--epochs", "1", "--batch-size", "8"];
    for m in ["rgb", "boxes"] {
        let (data, out) = (p("d.mmds"), p(m));
        let mut args = vec!["train", "--dataset", &data, "--modality", m, "--out", &out];
        args.extend(common);
        let o = mmdl(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        let metrics = std::fs::read_to_string(dir.path().join(m).join("metrics.tsv")).unwrap();
        assert_eq!(metrics.lines().filter(|l| !l.starts_with('#')).count(), 1);
        let eval_out = p(&format!("eval-{m}"));
        let ckpt = p(&format!("{m}/model.ckpt"));
        let o = mmdl(&["eval", "--dataset", &p("d.mmds"), "--checkpoint", &ckpt, "--out", &eval_out]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).starts_with(&format!("{m}-baseline\t{m}\tcomp\t")));
    }
    let o = mmdl(&["eval", "--dataset", &p("d.mmds"), "--checkpoint", &p("rgb/model.ckpt"), "--modality", "boxes", "--out", &p("x")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: config:"));

    std::fs::write(dir.path().join("t.txt"), format!("{} rgb\n{} boxes\n", p("rgb/model.ckpt"), p("boxes/model.ckpt"))).unwrap();
    let o = mmdl(&["eval", "--dataset", &p("d.mmds"), "--teacher", &p("t.txt"), "--out", &p("eval-teacher")]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("teacher(rgb+boxes)\trgb+boxes\tcomp\t"));

    let o = mmdl(&["report", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tsv = std::fs::read_to_string(dir.path().join("report.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 4);
    assert!(tsv.lines().any(|l| l.starts_with("rgb-baseline\trgb\tcomp\t") && l.contains("\t+0.0\t+0.0\t")));
    let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(md.contains("## Teachers") && md.contains("paper, not reproduced"));
}
