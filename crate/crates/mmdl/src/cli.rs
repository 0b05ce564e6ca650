//! The `mmdl` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use sha2::{Digest, Sha256};

use mmdl_core::distill::InputKind;
use mmdl_core::gradcheck;
use mmdl_core::nets::Modality;
use mmdl_core::synth::GeneratorConfig;

use crate::checkpoint;
use crate::dataset::{generate, Dataset, Family};
use crate::error::{Error, Result};
use crate::pipeline::{self, Preset, Settings};
use crate::report::{emit_table, parse_tsv, Row, RGB_BASELINE};
use crate::teacher::TeacherSpec;
use crate::trainer::{self, hex16, RunConfig};
use crate::wire::read_file;

#[derive(Parser, Debug)]
#[command(
    name = "mmdl",
    version,
    about = "Multimodal distillation for action recognition on a synthetic compositional benchmark"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the benchmark container and its manifest.
    GenData {
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        size: GenSize,
        #[command(flatten)]
        common: Common,
    },
    /// Train a single-modality baseline.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Input modality.
        #[arg(long, default_value = "rgb")]
        modality: Modality,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hyper: Hyper,
        #[command(flatten)]
        common: Common,
    },
    /// Distill a teacher spec into an RGB student.
    Distill {
        #[command(flatten)]
        data: DataArgs,
        /// Teacher spec file (`path modality` per line).
        #[arg(long)]
        teacher: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hyper: Hyper,
        #[command(flatten)]
        common: Common,
    },
    /// Train the omnivorous model (three times the baseline epochs).
    TrainOmnivore {
        #[command(flatten)]
        data: DataArgs,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hyper: Hyper,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint or a teacher spec on a test split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Model checkpoint.
        #[arg(long, conflicts_with = "teacher", required_unless_present = "teacher")]
        checkpoint: Option<PathBuf>,
        /// Teacher spec file; members' logits are averaged.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Inference modality [default: the checkpoint's].
        #[arg(long)]
        modality: Option<Modality>,
        /// Directory receiving eval.tsv.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Collect every eval.tsv under --out into report.md and report.tsv.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Generate, train, distill, evaluate and report for one seed.
    Repro {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        size: GenSize,
        #[command(flatten)]
        hyper: Hyper,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Global seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Worker threads for generation; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// key=value file of flag defaults; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset file written by gen-data.
    #[arg(long)]
    dataset: PathBuf,
    /// Split family: standard|comp.
    #[arg(long, default_value = "comp")]
    split: Family,
}

#[derive(Args, Debug)]
struct GenSize {
    /// Episodes in each training split [default: 1200].
    #[arg(long)]
    train_episodes: Option<usize>,
    /// Episodes in each test split [default: 480].
    #[arg(long)]
    test_episodes: Option<usize>,
}

impl GenSize {
    fn config(&self) -> Result<GeneratorConfig> {
        let mut cfg = GeneratorConfig::default();
        cfg.train_episodes = self.train_episodes.unwrap_or(cfg.train_episodes);
        cfg.test_episodes = self.test_episodes.unwrap_or(cfg.test_episodes);
        cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct Hyper {
    /// Epochs [default: 20; the omnivore trains 3x as long].
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size [default: 32].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate [default: desk 4e-3, paper 5e-5].
    #[arg(long)]
    lr: Option<f64>,
    /// Distillation temperature [default: 10].
    #[arg(long)]
    tau: Option<f64>,
    /// Hyperparameter preset: desk|paper.
    #[arg(long, default_value = "desk")]
    preset: Preset,
}

impl Hyper {
    fn settings(&self) -> Result<Settings> {
        let s = Settings {
            preset: self.preset,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            tau: self.tau,
        };
        s.optim().validate().map_err(|e| Error::Usage(e.to_string()))?;
        s.distill().validate().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(s)
    }
}

/// Reads `key=value` lines (`#` comments) into `--key value` tokens.
fn config_tokens(path: &Path) -> Result<Vec<OsString>> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| Error::format(path, "not utf-8"))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Usage(format!("{}:{}: expected key=value", path.display(), n + 1)));
        };
        let k = k.trim();
        if k == "config" {
            return Err(Error::Usage(format!("{}: config files cannot nest", path.display())));
        }
        out.push(format!("--{k}").into());
        out.push(v.trim().into());
    }
    Ok(out)
}

/// Splices the `--config` file's pairs in right after the subcommand, so
/// later (explicit) flags override them.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        let s = a.to_string_lossy();
        if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        } else if s == "--config" {
            path = argv.get(i + 1).map(PathBuf::from);
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let Some(sub) = argv.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')) else {
        return Ok(argv);
    };
    let at = sub + 2;
    let mut out = argv[..at].to_vec();
    out.extend(config_tokens(&path)?);
    out.extend_from_slice(&argv[at..]);
    Ok(out)
}

fn command() -> clap::Command {
    Cli::command().mut_subcommands(|s| s.args_override_self(true))
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 2 on usage errors, 1 otherwise.
pub fn run(argv: Vec<OsString>) -> i32 {
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => return report_error(&e),
    };
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &Error) -> i32 {
    eprintln!("error: {}: {e}", e.category());
    if matches!(e, Error::Usage(_)) {
        2
    } else {
        1
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { out, size, common } => {
            let ds = generate(&size.config()?, common.seed, common.workers)?;
            ds.save(&out)?;
            println!("wrote {} ({} episodes)", out.display(), ds.records.len());
        }
        Cmd::Train {
            data,
            modality,
            out,
            hyper,
            common,
        } => {
            let settings = hyper.settings()?;
            let mut cfg = RunConfig::baseline(modality, &data.dataset, data.split, common.seed, &out);
            settings.apply(&mut cfg);
            finish(trainer::run(&cfg)?);
        }
        Cmd::Distill {
            data,
            teacher,
            out,
            hyper,
            common,
        } => {
            let settings = hyper.settings()?;
            let spec = TeacherSpec::read(&teacher)?;
            let mut cfg = RunConfig::student(spec, &data.dataset, data.split, common.seed, &out);
            settings.apply(&mut cfg);
            finish(trainer::run(&cfg)?);
        }
        Cmd::TrainOmnivore { data, out, hyper, common } => {
            let settings = hyper.settings()?;
            let mut cfg = RunConfig::omnivore(&data.dataset, data.split, common.seed, &out);
            settings.apply(&mut cfg);
            finish(trainer::run(&cfg)?);
        }
        Cmd::Eval {
            data,
            checkpoint,
            teacher,
            modality,
            out,
            common,
        } => {
            let ds = Dataset::load_family(&data.dataset, data.split)?;
            let row = match (checkpoint, teacher) {
                (Some(path), _) => eval_checkpoint(&path, modality, &ds, data.split, common.seed)?,
                (None, Some(spec_path)) => {
                    let spec = TeacherSpec::read(&spec_path)?;
                    let teacher = spec.load()?;
                    let ms = teacher.modalities();
                    let result = pipeline::evaluate_teacher(&teacher, &ds, data.split, &pipeline::teacher_name(&ms), common.seed)?;
                    Row {
                        result,
                        config_hash: pipeline::spec_hash(&spec, &out),
                    }
                }
                (None, None) => return Err(Error::Usage("eval needs --checkpoint or --teacher".into())),
            };
            let e = &row.result;
            println!("{}\t{}\t{}\ttop1 {:.2}\ttop5 {:.2}", e.method, e.modalities, e.split, e.top1, e.top5);
            pipeline::write_eval(&out.join("eval.tsv"), &row)?;
        }
        Cmd::Report { out, .. } => {
            let mut files = Vec::new();
            collect_evals(&out, &mut files)?;
            files.sort();
            let mut rows = Vec::new();
            for f in &files {
                let text = String::from_utf8(read_file(f)?).map_err(|_| Error::format(f, "not utf-8"))?;
                rows.extend(parse_tsv(&text, f)?);
            }
            let mut report = emit_table(&rows, RGB_BASELINE)?;
            if let Ok(checks) = pipeline::ordering_checks(&rows) {
                report.markdown.push('\n');
                report.markdown.push_str(&pipeline::render_checks(&checks));
            }
            report.write(&out)?;
            println!("wrote report for {} results to {}", rows.len(), out.display());
        }
        Cmd::Gradcheck { .. } => {
            let entries = gradcheck::suite()?;
            println!("check\tmax_rel_error\ttolerance\tstatus");
            for e in &entries {
                let status = if e.passed() { "ok" } else { "FAIL" };
                println!("{}\t{:.3e}\t{:.0e}\t{status}", e.name, e.max_rel_error, e.tolerance);
            }
            if let Some(bad) = entries.iter().find(|e| !e.passed()) {
                return Err(Error::Core(mmdl_core::Error::Numeric(format!(
                    "gradient check failed for {} ({:e})",
                    bad.name, bad.max_rel_error
                ))));
            }
        }
        Cmd::Repro { out, size, hyper, common } => {
            let settings = hyper.settings()?;
            let outcome = pipeline::repro(common.seed, &out, &settings, &size.config()?, common.workers)?;
            for c in &outcome.checks {
                println!("[{}] {} {}: {}", c.mark(), c.id, c.claim, c.detail);
            }
            println!("wrote {}", out.join("report.md").display());
        }
    }
    Ok(())
}

fn finish(a: trainer::RunArtifacts) {
    if let Some(last) = a.trained.epochs.last() {
        println!(
            "trained {} steps; final top1 {:.2} top5 {:.2}; wrote {}",
            a.trained.steps,
            last.top1,
            last.top5,
            a.checkpoint.display()
        );
    }
}

/// Method name and config hash from the `metrics.tsv` header written next
/// to a checkpoint, if present.
fn run_identity(ckpt: &Path) -> Option<(String, String)> {
    let text = String::from_utf8(read_file(&ckpt.with_file_name("metrics.tsv")).ok()?).ok()?;
    let field = |key: &str| {
        text.lines()
            .filter_map(|l| l.strip_prefix("# "))
            .find_map(|l| l.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
            .map(str::to_string)
    };
    let (role, modality, modalities, hash) = (field("role")?, field("modality")?, field("modalities")?, field("config_hash")?);
    let method = match role.as_str() {
        "baseline" => format!("{modality}-baseline"),
        "student" => format!("student({modalities})"),
        other => other.to_string(),
    };
    Some((method, hash))
}

fn eval_checkpoint(path: &Path, modality: Option<Modality>, ds: &Dataset, family: Family, seed: u64) -> Result<Row> {
    let params = checkpoint::load(path)?;
    let modality = modality.unwrap_or(params.modality);
    if modality != params.modality {
        return Err(Error::config(format!(
            "checkpoint holds a {} model, not {modality}",
            params.modality
        )));
    }
    let (method, config_hash) = run_identity(path).unwrap_or_else(|| {
        let bytes = read_file(path).unwrap_or_default();
        (format!("{modality}-model"), hex16(&Sha256::digest(bytes)))
    });
    let result = pipeline::evaluate_model(&params, InputKind::from(modality), ds, family, &method, seed)?;
    Ok(Row { result, config_hash })
}

fn collect_evals(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_evals(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "eval.tsv") {
            out.push(p);
        }
    }
    Ok(())
}
