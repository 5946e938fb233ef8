//! Command-line workflow. `run` parses arguments, executes one subcommand
//! inside a run directory and returns the process exit code.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bench::{
    ablation_run, latency_bench, success_matrix, zero_shot_eval, AblationSpec, BenchReport, EvalProtocol, Subject,
};
use crate::diffusion::Strategy;
use crate::error::{Error, Result};
use crate::gradsuite::run_suite;
use crate::pipeline::checkpoint::{load, save};
use crate::pipeline::{CsvLog, Distiller, LogRow, Policy, TeacherTrainer, TrainConfig, TrainData};
use crate::simenv::dataset::{generate_dataset, load_dataset, read_manifest, DatasetSpec, EVAL_SEED_BASE};
use crate::simenv::{reset, DistractionLevel, Manifest, ObjectShift};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DUALDIFF_OUT";
pub const DEFAULT_OUT: &str = "runs";
pub const RUN_MANIFEST: &str = "run.toml";

#[derive(Debug, Parser)]
#[command(name = "dualdiff", version, about = "Mask-guided dual-resolution diffusion policy workflow")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration; unknown keys are rejected.
    #[arg(long, short, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in base configuration used when no file is given.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Dotted override applied after the file, e.g. `teacher.steps=500`. Repeatable.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run directory. Defaults to `$DUALDIFF_OUT/<command>-<config hash>`.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Global seed, same as `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Default,
    /// Reduced widths and step counts for a single CPU core.
    Compact,
}

impl Preset {
    pub fn config(self) -> TrainConfig {
        match self {
            Self::Default => TrainConfig::default(),
            Self::Compact => TrainConfig::compact(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a demonstration dataset with the scripted expert.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the diffusion teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Existing dataset directory; generated into the run directory if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Distill a one-step student from a teacher checkpoint.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Closed-loop success rates per distraction level.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target appearance shift: none, shape, size or color.
        #[arg(long, default_value = "none")]
        shift: String,
        /// Require a Clean-only training manifest (zero-shot protocol).
        #[arg(long)]
        clean_only: bool,
        /// Training dataset, checked by the zero-shot protocol.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Add scripted-expert and random rows.
        #[arg(long)]
        baselines: bool,
    },
    /// Action-head and perception latency per sampler.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        /// Student checkpoint; enables the one-step row.
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Train and evaluate the component-ablation rows.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Restrict to rows by name, e.g. `mask`. Repeatable.
        #[arg(long)]
        row: Vec<String>,
    },
    /// Finite-difference gradient suite; fails if any case exceeds tolerance.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GenData { .. } => "gen-data",
            Self::TrainTeacher { .. } => "train-teacher",
            Self::Distill { .. } => "distill",
            Self::Eval { .. } => "eval",
            Self::Bench { .. } => "bench",
            Self::Ablate { .. } => "ablate",
            Self::GradCheck { .. } => "grad-check",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Self::GenData { common }
            | Self::TrainTeacher { common, .. }
            | Self::Distill { common, .. }
            | Self::Eval { common, .. }
            | Self::Bench { common, .. }
            | Self::Ablate { common, .. }
            | Self::GradCheck { common } => common,
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownKey(_) => 2,
        _ => 1,
    }
}

/// Parse `args` (program name first), execute, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(dir) => {
            println!("run directory: {}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[derive(Debug, Serialize)]
struct Artifact {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    version: String,
    args: Vec<String>,
    config_hash: String,
    config: String,
    artifacts: Vec<Artifact>,
}

fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let bytes = std::fs::read(path)?;
    let d = Sha256::digest(&bytes);
    Ok((bytes.len() as u64, d.iter().map(|b| format!("{b:02x}")).collect()))
}

/// A run directory collecting artifacts for its manifest.
struct Run {
    dir: PathBuf,
    cfg: TrainConfig,
    artifacts: Vec<PathBuf>,
}

impl Run {
    fn open(cmd: &Command, cfg: TrainConfig) -> Result<Self> {
        let dir = match &cmd.common().out {
            Some(d) => d.clone(),
            None => {
                let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from);
                root.join(format!("{}-{}", cmd.name(), cfg.hash()))
            }
        };
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            cfg,
            artifacts: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, path: PathBuf) {
        self.artifacts.push(path);
    }

    fn finish(self, cmd: &Command) -> Result<PathBuf> {
        let mut artifacts = Vec::new();
        for p in &self.artifacts {
            let (bytes, sha256) = sha256_file(p)?;
            let rel = p.strip_prefix(&self.dir).unwrap_or(p);
            artifacts.push(Artifact {
                path: rel.display().to_string(),
                bytes,
                sha256,
            });
        }
        let c = cmd.common();
        let mut args: Vec<String> = Vec::new();
        if let Some(p) = &c.config {
            args.push(format!("--config={}", p.display()));
        }
        if let Some(p) = c.preset {
            args.push(format!("--preset={p:?}").to_lowercase());
        }
        if let Some(s) = c.seed {
            args.push(format!("--seed={s}"));
        }
        args.extend(c.set.iter().map(|s| format!("--set={s}")));
        let m = RunManifest {
            command: cmd.name().into(),
            version: env!("CARGO_PKG_VERSION").into(),
            args,
            config_hash: self.cfg.hash(),
            config: self.cfg.to_toml(),
            artifacts,
        };
        let text = toml::to_string(&m).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(self.dir.join(RUN_MANIFEST), text)?;
        Ok(self.dir)
    }
}

/// Base document (file, preset, `base`, or defaults in that order) with
/// `--seed` and `--set` applied.
fn resolve(c: &Common, base: Option<&TrainConfig>) -> Result<TrainConfig> {
    let text = match (&c.config, c.preset, base) {
        (Some(p), _, _) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        (None, Some(p), _) => p.config().to_toml(),
        (None, None, Some(b)) => b.to_toml(),
        (None, None, None) => String::new(),
    };
    let mut overrides: Vec<String> = c.seed.map(|s| format!("seed={s}")).into_iter().collect();
    overrides.extend(c.set.iter().cloned());
    TrainConfig::from_toml(&text, &overrides)
}

/// Refuse to run a checkpoint under a configuration describing other networks.
fn check_architecture(cfg: &TrainConfig, policy: &Policy, what: &str) -> Result<()> {
    let p = &policy.cfg;
    if cfg.perception != p.perception || cfg.head != p.head || cfg.toggles != p.toggles || cfg.schedule != p.schedule
    {
        return Err(Error::Config(format!(
            "{what} was trained with a different architecture or noise schedule"
        )));
    }
    Ok(())
}

fn dataset_spec(cfg: &TrainConfig) -> DatasetSpec {
    DatasetSpec {
        episodes: cfg.data.episodes,
        mixture: cfg.data.mixture.clone(),
        task: cfg.data.task,
        seed: cfg.data.seed,
        raster: cfg.raster(),
        horizon: cfg.data.horizon,
    }
}

fn check_manifest(cfg: &TrainConfig, m: &Manifest, dir: &Path) -> Result<()> {
    let r = cfg.raster();
    if m.lr_side != r.lr_side || m.hr_side != r.hr_side() || m.task != cfg.data.task {
        return Err(Error::Config(format!(
            "dataset {} ({} task, {}/{} px) does not match the config ({} task, {}/{} px)",
            dir.display(),
            m.task.name(),
            m.lr_side,
            m.hr_side,
            cfg.data.task.name(),
            r.lr_side,
            r.hr_side()
        )));
    }
    Ok(())
}

/// Load `--data`, or generate the configured dataset inside the run directory.
fn obtain_data(run: &mut Run, data: Option<&Path>) -> Result<(Manifest, TrainData)> {
    let cfg = &run.cfg;
    let dir = match data {
        Some(d) => d.to_path_buf(),
        None => {
            let d = run.dir.join(&cfg.data.dir);
            if !d.join("manifest.toml").exists() {
                eprintln!("generating {} episodes into {}", cfg.data.episodes, d.display());
                generate_dataset(&dataset_spec(cfg), &d)?;
            }
            d
        }
    };
    let (m, eps) = load_dataset(&dir)?;
    check_manifest(cfg, &m, &dir)?;
    let td = TrainData::new(eps, cfg.raster(), cfg.head.horizon, cfg.schedule.sigma_data)?;
    Ok((m, td))
}

struct Progress {
    name: &'static str,
    total: usize,
    every: usize,
}

impl Progress {
    fn new(name: &'static str, total: usize) -> Self {
        Self {
            name,
            total,
            every: (total / 20).max(1),
        }
    }

    fn tick(&self, i: usize, row: &LogRow) {
        if (i + 1) % self.every == 0 || i + 1 == self.total {
            eprintln!(
                "{} {}/{}  loss {:.4e}  grad {:.3e}",
                self.name,
                i + 1,
                self.total,
                row.total,
                row.grad_norm
            );
        }
    }
}

fn teach(cfg: &TrainConfig, data: &TrainData, log: &mut CsvLog) -> Result<Policy> {
    let mut tr = TeacherTrainer::new(cfg, data)?;
    let p = Progress::new("teacher", cfg.teacher.steps);
    for i in 0..cfg.teacher.steps {
        let row = tr.step(data)?;
        p.tick(i, &row);
        log.append(row)?;
    }
    Ok(tr.finish())
}

fn distill(teacher: &Policy, data: &TrainData, log: &mut CsvLog) -> Result<Policy> {
    let mut d = Distiller::new(teacher, data)?;
    let steps = teacher.cfg.student.steps;
    let p = Progress::new("student", steps);
    for i in 0..steps {
        let row = d.step(data)?;
        p.tick(i, &row);
        log.append(row)?;
    }
    Ok(d.finish())
}

fn write_report(run: &mut Run, report: &BenchReport, stem: &str) -> Result<()> {
    let (csv, md) = report.write(&run.dir, stem)?;
    print!("{}", report.to_markdown());
    run.record(csv);
    run.record(md);
    Ok(())
}

fn stem_of(path: &Path) -> String {
    path.file_stem().map_or_else(|| "policy".into(), |s| s.to_string_lossy().into_owned())
}

fn execute(cmd: &Command) -> Result<PathBuf> {
    match cmd {
        Command::GenData { common } => {
            let mut run = Run::open(cmd, resolve(common, None)?)?;
            let dir = run.dir.join(&run.cfg.data.dir);
            let m = generate_dataset(&dataset_spec(&run.cfg), &dir)?;
            println!(
                "{} episodes (clean {}, mild {}, severe {}), {} replaced seeds",
                m.episode_count,
                m.mixture.clean,
                m.mixture.mild,
                m.mixture.severe,
                m.skipped_seeds.len()
            );
            run.record(dir.join("manifest.toml"));
            for e in &m.episodes {
                run.record(dir.join(&e.file));
            }
            run.finish(cmd)
        }
        Command::TrainTeacher { common, data } => {
            let mut run = Run::open(cmd, resolve(common, None)?)?;
            let (_, td) = obtain_data(&mut run, data.as_deref())?;
            let log_path = run.path("teacher_log.csv");
            let mut log = CsvLog::create(&log_path)?;
            let teacher = teach(&run.cfg, &td, &mut log)?;
            drop(log);
            let ckpt = run.path("teacher.ckpt");
            save(&teacher, &ckpt)?;
            run.record(log_path);
            run.record(ckpt);
            run.finish(cmd)
        }
        Command::Distill { common, teacher, data } => {
            let mut t = load(teacher)?;
            let cfg = resolve(common, Some(&t.cfg))?;
            check_architecture(&cfg, &t, "teacher")?;
            t.cfg = cfg.clone();
            let mut run = Run::open(cmd, cfg)?;
            let (_, td) = obtain_data(&mut run, data.as_deref())?;
            let log_path = run.path("student_log.csv");
            let mut log = CsvLog::create(&log_path)?;
            let student = distill(&t, &td, &mut log)?;
            drop(log);
            let ckpt = run.path("student.ckpt");
            save(&student, &ckpt)?;
            run.record(log_path);
            run.record(ckpt);
            run.finish(cmd)
        }
        Command::Eval {
            common,
            checkpoint,
            shift,
            clean_only,
            data,
            baselines,
        } => {
            let policy = load(checkpoint)?;
            let cfg = resolve(common, Some(&policy.cfg))?;
            check_architecture(&cfg, &policy, "checkpoint")?;
            let shift: ObjectShift = shift.parse()?;
            let protocol = EvalProtocol {
                shift,
                train_clean_only: *clean_only,
                ..EvalProtocol::from_config(&cfg)
            };
            let mut subjects = Vec::new();
            if *baselines {
                subjects.push(Subject::Expert);
                subjects.push(Subject::Random);
            }
            subjects.push(Subject::Policy {
                name: stem_of(checkpoint),
                policy: &policy,
            });
            let zero_shot = *clean_only || shift != ObjectShift::None;
            let report = if zero_shot {
                let dir = data
                    .as_ref()
                    .ok_or_else(|| Error::Config("zero-shot evaluation needs --data <training dataset>".into()))?;
                let manifest = read_manifest(dir)?;
                zero_shot_eval(&subjects, &protocol, &manifest, &cfg)?
            } else {
                success_matrix(&subjects, &protocol, &cfg)?
            };
            let mut run = Run::open(cmd, cfg)?;
            write_report(&mut run, &report, "eval")?;
            run.finish(cmd)
        }
        Command::Bench {
            common,
            teacher,
            student,
        } => {
            let t = load(teacher)?;
            let cfg = resolve(common, Some(&t.cfg))?;
            check_architecture(&cfg, &t, "teacher")?;
            let s = student.as_deref().map(load).transpose()?;
            if let Some(s) = &s {
                check_architecture(&cfg, s, "student")?;
            }
            let mut strategies = vec![(Strategy::Ddpm, 100), (Strategy::Ddim, 10), (Strategy::Edm, cfg.eval.steps)];
            if s.is_some() {
                strategies.push((Strategy::Ctm, 1));
            }
            let scene = reset(EVAL_SEED_BASE, DistractionLevel::Mild, cfg.data.task);
            let mut report = latency_bench(
                &t,
                s.as_ref(),
                &strategies,
                &scene,
                cfg.eval.warmup,
                cfg.eval.latency_calls,
            )?;
            report.config_hash = cfg.hash();
            report.config_toml = cfg.to_toml();
            let mut run = Run::open(cmd, cfg)?;
            write_report(&mut run, &report, "latency")?;
            run.finish(cmd)
        }
        Command::Ablate { common, data, row } => {
            let cfg = resolve(common, None)?;
            let rows: Vec<AblationSpec> = AblationSpec::table()
                .into_iter()
                .filter(|r| row.is_empty() || row.contains(&r.name()))
                .collect();
            if rows.is_empty() {
                let names: Vec<String> = AblationSpec::table().iter().map(AblationSpec::name).collect();
                return Err(Error::Config(format!("no ablation row matches; rows are {}", names.join(", "))));
            }
            let mut run = Run::open(cmd, cfg.clone())?;
            let (manifest, td) = obtain_data(&mut run, data.as_deref())?;
            let clean = manifest.mixture.mild == 0 && manifest.mixture.severe == 0;
            let protocol = EvalProtocol {
                train_clean_only: clean,
                ..EvalProtocol::from_config(&cfg)
            };
            let mut report = BenchReport::new("Ablation success rate", &cfg);
            for (i, spec) in rows.iter().enumerate() {
                eprintln!("ablation row {}/{}: {}", i + 1, rows.len(), spec.name());
                let log_path = run.path(&format!("ablation-{i}_log.csv"));
                let mut log = CsvLog::create(&log_path)?;
                let (policy, r) = ablation_run(spec, &cfg, &td, &protocol, &mut log)?;
                drop(log);
                let ckpt = run.path(&format!("ablation-{i}.ckpt"));
                save(&policy, &ckpt)?;
                run.record(log_path);
                run.record(ckpt);
                report.extend(r);
            }
            if clean {
                report.notes.push("training set is Clean-only: zero-shot distraction protocol".into());
            }
            write_report(&mut run, &report, "ablation")?;
            run.finish(cmd)
        }
        Command::GradCheck { common } => {
            let mut run = Run::open(cmd, resolve(common, None)?)?;
            let cases = run_suite()?;
            let mut csv = String::from("case,pass,max_rel_err,coords_checked\n");
            let mut failed = Vec::new();
            for c in &cases {
                let r = &c.report;
                println!(
                    "{:<22} {}  max rel err {:.2e}  ({} coords)",
                    c.name,
                    if r.pass { "ok  " } else { "FAIL" },
                    r.max_rel_err,
                    r.coords_checked
                );
                let _ = writeln!(csv, "{},{},{:.6e},{}", c.name, r.pass, r.max_rel_err, r.coords_checked);
                if !r.pass {
                    failed.push(c.name);
                }
            }
            let path = run.path("gradcheck.csv");
            std::fs::write(&path, csv)?;
            run.record(path);
            let dir = run.finish(cmd)?;
            if failed.is_empty() {
                Ok(dir)
            } else {
                Err(Error::Protocol(format!("gradient checks failed: {}", failed.join(", "))))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::Mixture;

    fn common(set: &[&str]) -> Common {
        Common {
            config: None,
            preset: None,
            set: set.iter().map(|s| s.to_string()).collect(),
            out: None,
            seed: Some(4),
        }
    }

    #[test]
    fn config_errors_exit_two() {
        assert_eq!(exit_code(&Error::UnknownKey("x".into())), 2);
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Protocol("x".into())), 1);
        assert_eq!(run(["dualdiff", "gen-data", "--set", "data.bogus=1"]), 2);
        assert_eq!(run(["dualdiff", "no-such-command"]), 2);
        assert_eq!(run(["dualdiff", "--help"]), 0);
    }

    #[test]
    fn seed_flag_and_overrides_resolve() {
        let c = resolve(&common(&["teacher.steps=9"]), None).unwrap();
        assert_eq!((c.seed, c.teacher.steps), (4, 9));
        // Explicit overrides come after the seed flag.
        let c = resolve(&common(&["seed=11"]), None).unwrap();
        assert_eq!(c.seed, 11);
        let mut base = TrainConfig::default();
        base.student.steps = 3;
        assert_eq!(resolve(&common(&[]), Some(&base)).unwrap().student.steps, 3);
        let c = Common {
            preset: Some(Preset::Compact),
            ..common(&["teacher.steps=5"])
        };
        let r = resolve(&c, Some(&base)).unwrap();
        assert_eq!((r.perception, r.teacher.steps), (TrainConfig::compact().perception, 5));
    }

    #[test]
    fn data_mixture_override_keeps_spec() {
        let c = resolve(&common(&["data.mixture.clean=1.0", "data.mixture.mild=0.0", "data.mixture.severe=0.0"]), None)
            .unwrap();
        assert_eq!(dataset_spec(&c).mixture, Mixture::clean_only());
    }
}
