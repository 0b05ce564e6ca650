use std::path::Path;

use mmdl::checkpoint;
use mmdl::dataset::{generate, Dataset, Family};
use mmdl::error::Error;
use mmdl::teacher::TeacherSpec;
use mmdl::trainer::{run_on, train_student, RunConfig, StudentHooks};
use mmdl_core::nets::Modality;
use mmdl_core::synth::GeneratorConfig;

fn tiny(seed: u64) -> Dataset {
    let cfg = GeneratorConfig {
        train_episodes: 40,
        test_episodes: 12,
        ..GeneratorConfig::default()
    };
    generate(&cfg, seed, 1).unwrap()
}

fn short(mut cfg: RunConfig, epochs: usize) -> RunConfig {
    cfg.optim.epochs = epochs;
    cfg.optim.batch_size = 8;
    cfg
}

fn baseline(m: Modality, out: &Path) -> RunConfig {
    short(RunConfig::baseline(m, Path::new("d.mmds"), Family::Comp, 1, out), 2)
}

fn data_lines(text: &str) -> usize {
    text.lines().filter(|l| !l.starts_with('#')).count()
}

#[test]
fn baseline_runs_are_deterministic_and_log_every_epoch() {
    let ds = tiny(1);
    let dir = tempfile::tempdir().unwrap();
    let cfg_a = short(RunConfig::baseline(Modality::Rgb, Path::new("d.mmds"), Family::Comp, 1, &dir.path().join("a")), 3);
    let cfg_b = RunConfig { out: dir.path().join("b"), ..cfg_a.clone() };
    let a = run_on(&cfg_a, &ds).unwrap();
    let b = run_on(&cfg_b, &ds).unwrap();
    assert_eq!(std::fs::read(&a.checkpoint).unwrap(), std::fs::read(&b.checkpoint).unwrap());
    let (ma, mb) = (std::fs::read_to_string(&a.metrics).unwrap(), std::fs::read_to_string(&b.metrics).unwrap());
    assert_eq!(ma, mb);
    assert_eq!(data_lines(&ma), 3);
    assert!(ma.contains(&format!("# config_hash={}", cfg_a.hash())));
    assert_eq!(a.trained.steps, 3 * 5);

    let other = RunConfig { seed: 2, ..cfg_a.clone() };
    assert_ne!(other.hash(), cfg_a.hash());
    assert_eq!(cfg_b.hash(), cfg_a.hash());
}

#[test]
fn student_views_match_and_desync_aborts() {
    let ds = tiny(2);
    let dir = tempfile::tempdir().unwrap();
    let mut members = Vec::new();
    for m in Modality::ALL {
        let out = dir.path().join(m.as_str());
        let art = run_on(&baseline(m, &out), &ds).unwrap();
        members.push((art.checkpoint, m));
    }
    let spec = TeacherSpec::new(members.clone()).unwrap();
    let before: Vec<Vec<u8>> = members.iter().map(|(p, _)| std::fs::read(p).unwrap()).collect();
    let teacher = spec.load().unwrap();
    let frozen: Vec<_> = teacher.members().to_vec();

    let cfg = short(RunConfig::student(spec, Path::new("d.mmds"), Family::Comp, 1, &dir.path().join("s")), 2);
    let trained = train_student(&cfg, &ds, &teacher, &StudentHooks::default()).unwrap();
    assert_eq!(trained.views_verified, 2 * 40);
    assert!(trained.view_hash.is_some());
    assert!(trained.epochs.iter().all(|e| e.extra.contains("views_verified=40/40")));
    for (a, b) in frozen.iter().zip(teacher.members()) {
        assert!(a.bit_eq(b));
    }
    let after: Vec<Vec<u8>> = members.iter().map(|(p, _)| std::fs::read(p).unwrap()).collect();
    assert_eq!(before, after);

    let again = train_student(&cfg, &ds, &teacher, &StudentHooks::default()).unwrap();
    assert_eq!(again.view_hash, trained.view_hash);
    assert!(again.params.bit_eq(&trained.params));

    let hooks = StudentHooks { desync_at_step: Some(3) };
    let err = train_student(&cfg, &ds, &teacher, &hooks).unwrap_err();
    assert!(matches!(err, Error::Core(mmdl_core::Error::Contract(_))), "{err}");
    assert!(err.to_string().contains("step 3"));
}

#[test]
fn omnivore_trains_three_times_longer_with_uniform_modalities() {
    let ds = tiny(3);
    let dir = tempfile::tempdir().unwrap();
    let base = run_on(&baseline(Modality::Rgb, &dir.path().join("rgb")), &ds).unwrap();
    let cfg = short(RunConfig::omnivore(Path::new("d.mmds"), Family::Comp, 1, &dir.path().join("omni")), 2);
    let cfg = RunConfig { optim: mmdl_core::optim::OptimHyper { epochs: 6, ..cfg.optim }, ..cfg };
    let omni = run_on(&cfg, &ds).unwrap();
    assert_eq!(omni.trained.steps, 3 * base.trained.steps);
    assert_eq!(omni.trained.epochs.len(), 6);
    let counts = omni.trained.kind_counts;
    let n: usize = counts.iter().sum();
    assert_eq!(n, 6 * 40);
    // Binomial(n, 1/3) two-sided 99% band.
    let (mean, sd) = (n as f64 / 3.0, (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt());
    assert!(counts.iter().all(|&c| (c as f64 - mean).abs() <= 2.576 * sd), "{counts:?}");
    let params = checkpoint::load(&omni.checkpoint).unwrap();
    assert_eq!(params.modality, Modality::Rgb);
}

#[test]
fn mismatched_configs_are_rejected() {
    let ds = tiny(4);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = baseline(Modality::Rgb, dir.path());
    cfg.optim.peak_lr = 0.0;
    assert!(matches!(run_on(&cfg, &ds), Err(Error::Core(mmdl_core::Error::Config(_)))));
    let spec = TeacherSpec::new(vec![(dir.path().join("missing.ckpt"), Modality::Flow)]).unwrap();
    let err = spec.load().unwrap_err();
    assert_eq!(err.category(), "checkpoint");
    assert!(TeacherSpec::new(vec![(dir.path().into(), Modality::Rgb), (dir.path().into(), Modality::Rgb)]).is_err());
}
