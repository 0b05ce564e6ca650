//! One PASS/FAIL line per acceptance criterion. The ordering claims (4a-4e)
//! are measured outcomes and are reported without failing the test; every
//! other criterion is asserted.

use std::path::Path;
use std::time::{Duration, Instant};

use mmdl::checkpoint;
use mmdl::dataset::{generate, Dataset, Family};
use mmdl::error::Error;
use mmdl::pipeline::{ordering_checks, repro, ReproOutcome, Settings};
use mmdl::teacher::TeacherSpec;
use mmdl::trainer::{run_on, train_student, RunConfig, StudentHooks};
use mmdl_core::gradcheck;
use mmdl_core::nets::{init_params, ArchConfig, Modality};
use mmdl_core::synth::GeneratorConfig;

#[path = "../../core/tests/support/oracles.rs"]
mod oracles;

const SEEDS: [u64; 3] = [1, 2, 3];

struct Ledger {
    lines: Vec<(String, bool, bool)>,
}

impl Ledger {
    fn record(&mut self, id: &str, passed: bool, gated: bool, detail: String) {
        let mark = if passed { "PASS" } else { "FAIL" };
        let line = format!("[{mark}] {id} {detail}");
        println!("{line}");
        self.lines.push((line, passed, gated));
    }
}

fn tiny_dataset(seed: u64) -> Dataset {
    let cfg = GeneratorConfig {
        train_episodes: 24,
        test_episodes: 12,
        ..GeneratorConfig::default()
    };
    generate(&cfg, seed, 1).unwrap()
}

fn oracles_within_tolerance(l: &mut Ledger) {
    let t = Instant::now();
    let results = oracles::all(oracles::INSTANCES);
    let elapsed = t.elapsed();
    let worst = results.iter().map(|r| r.max_abs_error).fold(0.0, f64::max);
    let ok = results.iter().all(|r| r.passed() && r.instances == oracles::INSTANCES) && elapsed < Duration::from_secs(5);
    let names: Vec<&str> = results.iter().map(|r| r.name).collect();
    l.record(
        "1",
        ok,
        true,
        format!(
            "oracles {} on {} instances: max error {worst:.1e} <= {:.0e}, {:.2}s < 5s",
            names.join(","),
            oracles::INSTANCES,
            oracles::TOLERANCE,
            elapsed.as_secs_f64()
        ),
    );
}

fn gradients_within_tolerance(l: &mut Ledger) {
    let t = Instant::now();
    let suite = gradcheck::suite().unwrap();
    let elapsed = t.elapsed();
    let failed: Vec<&str> = suite.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    let worst = suite.iter().map(|e| e.max_rel_error / e.tolerance).fold(0.0, f64::max);
    l.record(
        "2",
        failed.is_empty() && elapsed < Duration::from_secs(120),
        true,
        format!(
            "gradcheck {} checks, worst error/tolerance {worst:.2e}, failed {failed:?}, {:.1}s < 120s",
            suite.len(),
            elapsed.as_secs_f64()
        ),
    );
}

/// A student whose view sampler disagrees with the teacher's must abort.
fn desync_aborts() -> bool {
    let ds = tiny_dataset(5);
    let dir = tempfile::tempdir().unwrap();
    let mut members = Vec::new();
    for m in Modality::ALL {
        let mut cfg = RunConfig::baseline(m, Path::new("d.mmds"), Family::Comp, 1, &dir.path().join(m.as_str()));
        cfg.optim.epochs = 1;
        cfg.optim.batch_size = 8;
        members.push((run_on(&cfg, &ds).unwrap().checkpoint, m));
    }
    let spec = TeacherSpec::new(members).unwrap();
    let teacher = spec.load().unwrap();
    let mut cfg = RunConfig::student(spec, Path::new("d.mmds"), Family::Comp, 1, &dir.path().join("s"));
    cfg.optim.epochs = 1;
    cfg.optim.batch_size = 8;
    let hooks = StudentHooks { desync_at_step: Some(2) };
    matches!(
        train_student(&cfg, &ds, &teacher, &hooks),
        Err(Error::Core(mmdl_core::Error::Contract(_)))
    )
}

fn views_consistent(l: &mut Ledger, first: &ReproOutcome) {
    let aborts = desync_aborts();
    let (seen, verified) = (first.student_samples_seen, first.student_views_verified);
    l.record(
        "3",
        verified == seen && seen > 0 && aborts && first.teacher_frozen,
        true,
        format!(
            "view hashes matched {verified}/{seen}, forced desync aborts: {aborts}, teacher checkpoints unchanged: {}",
            first.teacher_frozen
        ),
    );
}

fn orderings_hold(l: &mut Ledger, runs: &[ReproOutcome], elapsed: Duration) {
    let rows: Vec<_> = runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    for c in ordering_checks(&rows).unwrap() {
        let id = format!("4{}", &c.id[1..]);
        match c.passed {
            Some(p) => l.record(&id, p, false, format!("{} (mean of {} seeds): {}", c.claim, runs.len(), c.detail)),
            None => println!("[RECORDED] {id} {}: {}", c.claim, c.detail),
        }
    }
    let omni_ok = runs.iter().all(|r| {
        let n: usize = r.omnivore_kinds.iter().sum();
        let (mean, sd) = (n as f64 / 3.0, (n as f64 * 2.0 / 9.0).sqrt());
        r.omnivore_steps == 3 * r.baseline_steps && r.omnivore_kinds.iter().all(|&c| (c as f64 - mean).abs() <= 2.576 * sd)
    });
    let kinds: Vec<[usize; 3]> = runs.iter().map(|r| r.omnivore_kinds).collect();
    l.record(
        "4-omnivore",
        omni_ok,
        true,
        format!("omnivore steps = 3x baseline and modality draws {kinds:?} inside the binomial 99% band"),
    );
    let minutes = elapsed.as_secs_f64() / 60.0;
    println!(
        "[RECORDED] 4-runtime {} seeds took {minutes:.1} min on {} core(s)",
        runs.len(),
        std::thread::available_parallelism().map_or(1, |n| n.get())
    );
}

fn report_is_reproducible(l: &mut Ledger, first: &Path, settings: &Settings, gen: &GeneratorConfig) {
    let again = tempfile::tempdir().unwrap();
    repro(1, again.path(), settings, gen, 1).unwrap();
    let a = std::fs::read(first.join("report.tsv")).unwrap();
    let b = std::fs::read(again.path().join("report.tsv")).unwrap();
    l.record(
        "5",
        a == b && !a.is_empty(),
        true,
        format!("report.tsv of two seed-1 runs byte-identical ({} bytes)", a.len()),
    );
}

fn formats_round_trip(l: &mut Ledger) {
    let ds = tiny_dataset(6);
    let bytes = ds.encode();
    let back = Dataset::decode(&bytes, Path::new("d.mmds"), |_| true).unwrap();
    let mut ok = back.encode() == bytes;
    let cut = |n: usize| matches!(Dataset::decode(&bytes[..n], Path::new("d.mmds"), |_| true), Err(Error::Format { .. }));
    ok &= [0, 7, bytes.len() / 2, bytes.len() - 1].into_iter().all(cut);
    let params = init_params(&ArchConfig::default(), Modality::Rgb, 2).unwrap();
    let ck = checkpoint::encode(&params);
    ok &= checkpoint::decode(&ck, Path::new("m.ckpt")).unwrap().bit_eq(&params);
    ok &= matches!(checkpoint::decode(&ck[..ck.len() - 1], Path::new("m.ckpt")), Err(Error::Format { .. }));
    l.record(
        "6",
        ok,
        true,
        "dataset and checkpoint round-trip byte-identically; truncations give format errors".into(),
    );
}

fn main() {
    let mut l = Ledger { lines: Vec::new() };
    oracles_within_tolerance(&mut l);
    gradients_within_tolerance(&mut l);
    formats_round_trip(&mut l);

    let settings = Settings::default();
    let gen = GeneratorConfig::default();
    let dirs: Vec<_> = SEEDS.iter().map(|_| tempfile::tempdir().unwrap()).collect();
    let t = Instant::now();
    let runs: Vec<ReproOutcome> = SEEDS
        .iter()
        .zip(&dirs)
        .map(|(&seed, dir)| repro(seed, dir.path(), &settings, &gen, 1).unwrap())
        .collect();
    let elapsed = t.elapsed();
    views_consistent(&mut l, &runs[0]);
    orderings_hold(&mut l, &runs, elapsed);
    report_is_reproducible(&mut l, dirs[0].path(), &settings, &gen);

    println!("\nacceptance summary:");
    for (line, _, gated) in &l.lines {
        println!("  {line}{}", if *gated { "" } else { " (reported)" });
    }
    let failed = l.lines.iter().filter(|(_, p, g)| *g && !p).count();
    if failed > 0 {
        eprintln!("{failed} gated criteria failed");
        std::process::exit(1);
    }
}
