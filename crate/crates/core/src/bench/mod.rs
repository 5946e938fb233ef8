//! Evaluation harness: success matrices, zero-shot protocols, component
//! ablations and latency of the perception stack and each sampler.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{initial_noise, sample_ctm, sample_ddim, sample_ddpm, sample_edm_heun, Counted, Strategy};
use crate::error::{Error, Result};
use crate::nncore::Tensor;
use crate::perception::Toggles;
use crate::pipeline::train::CsvLog;
use crate::pipeline::{train_teacher, Agent, Controller, ExpertController, Policy, RandomController, TrainConfig, TrainData};
use crate::simenv::dataset::EVAL_SEED_BASE;
use crate::simenv::scene::{PALETTE, UNSEEN_PALETTE};
use crate::simenv::{
    render, reset_shifted, DistractionLevel, KeywordResolver, Manifest, MaskProvider, ObjectShift, OracleMask,
    RasterSpec, Resolver, Scene, TaskId, HORIZON_CAP,
};

#[cfg(test)]
mod tests;

/// What to evaluate and on which seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalProtocol {
    pub task: TaskId,
    pub levels: Vec<DistractionLevel>,
    pub rollouts: usize,
    /// Independent seed sets, each with its own episode seeds and sampler noise.
    pub seeds: usize,
    pub seed_base: u64,
    pub shift: ObjectShift,
    /// Zero-shot distraction protocol: the training set must be Clean-only.
    pub train_clean_only: bool,
    pub sampler: Strategy,
    pub steps: usize,
    pub replan: usize,
    pub horizon_cap: usize,
}

impl EvalProtocol {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            task: cfg.data.task,
            levels: DistractionLevel::ALL.to_vec(),
            rollouts: cfg.eval.rollouts,
            seeds: cfg.eval.seeds,
            seed_base: EVAL_SEED_BASE + (cfg.eval.seed << 24),
            shift: ObjectShift::None,
            train_clean_only: false,
            sampler: cfg.eval.sampler,
            steps: cfg.eval.steps,
            replan: cfg.eval.replan,
            horizon_cap: HORIZON_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rollouts == 0 || self.seeds == 0 {
            return Err(Error::Config("an evaluation needs at least one rollout and one seed".into()));
        }
        if self.levels.is_empty() {
            return Err(Error::Config("no distraction levels to evaluate".into()));
        }
        if self.steps == 0 || self.replan == 0 || self.horizon_cap == 0 {
            return Err(Error::Config("sampler steps, replan and horizon cap must be positive".into()));
        }
        if self.seed_base < EVAL_SEED_BASE {
            return Err(Error::Protocol(format!(
                "evaluation seeds start at {} inside the training range",
                self.seed_base
            )));
        }
        Ok(())
    }

    /// Episode seeds of seed set `rep`.
    pub fn episode_seeds(&self, rep: usize) -> Vec<u64> {
        let start = self.seed_base + (rep * self.rollouts) as u64;
        (start..start + self.rollouts as u64).collect()
    }

    pub fn all_seeds(&self) -> BTreeSet<u64> {
        (0..self.seeds).flat_map(|r| self.episode_seeds(r)).collect()
    }
}

/// A controller family under evaluation.
pub enum Subject<'a> {
    Expert,
    Random,
    Policy { name: String, policy: &'a Policy },
}

impl<'a> Subject<'a> {
    pub fn name(&self) -> String {
        match self {
            Self::Expert => "expert".into(),
            Self::Random => "random".into(),
            Self::Policy { name, .. } => name.clone(),
        }
    }

    fn controller(&self, protocol: &EvalProtocol, seed: u64) -> Result<Box<dyn Controller + 'a>> {
        Ok(match self {
            Self::Expert => Box::new(ExpertController),
            Self::Random => Box::new(RandomController(ChaCha8Rng::seed_from_u64(seed))),
            Self::Policy { name, policy } => {
                if policy.cfg.data.task != protocol.task {
                    return Err(Error::Protocol(format!(
                        "`{name}` was trained on {} but the protocol evaluates {}",
                        policy.cfg.data.task.name(),
                        protocol.task.name()
                    )));
                }
                Box::new(Agent::new(policy, protocol.sampler, protocol.steps, seed)?)
            }
        })
    }
}

/// Successes of one subject at one level, split by seed set.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub subject: String,
    pub level: DistractionLevel,
    pub shift: ObjectShift,
    pub per_seed: Vec<usize>,
    pub rollouts: usize,
}

impl Cell {
    pub fn successes(&self) -> usize {
        self.per_seed.iter().sum()
    }

    pub fn trials(&self) -> usize {
        self.rollouts * self.per_seed.len()
    }

    pub fn fraction(&self) -> f64 {
        self.successes() as f64 / self.trials().max(1) as f64
    }

    /// Mean and population standard deviation of the per-seed fractions.
    pub fn seed_spread(&self) -> (f64, f64) {
        let f: Vec<f64> = self.per_seed.iter().map(|&k| k as f64 / self.rollouts as f64).collect();
        let m = f.iter().sum::<f64>() / f.len().max(1) as f64;
        let v = f.iter().map(|x| (x - m).powi(2)).sum::<f64>() / f.len().max(1) as f64;
        (m, v.sqrt())
    }
}

/// Wall-clock statistics of one timed component.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRow {
    pub component: String,
    pub strategy: Option<Strategy>,
    pub steps: usize,
    pub forward_calls: usize,
    pub calls: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub title: String,
    pub config_hash: String,
    pub config_toml: String,
    pub cells: Vec<Cell>,
    pub latency: Vec<LatencyRow>,
    pub notes: Vec<String>,
}

const CSV_HEADER: [&str; 16] = [
    "kind", "config_hash", "subject", "level", "shift", "successes", "trials", "fraction", "component",
    "strategy", "steps", "forward_calls", "calls", "mean_ms", "p50_ms", "p95_ms",
];

impl BenchReport {
    pub fn new(title: &str, cfg: &TrainConfig) -> Self {
        Self {
            title: title.into(),
            config_hash: cfg.hash(),
            config_toml: cfg.to_toml(),
            cells: Vec::new(),
            latency: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.cells {
            let f = c.fraction();
            if c.trials() == 0 || !(0.0..=1.0).contains(&f) {
                return Err(Error::Protocol(format!("cell {}/{} has fraction {f}", c.subject, c.level.name())));
            }
        }
        Ok(())
    }

    pub fn cell(&self, subject: &str, level: DistractionLevel) -> Option<&Cell> {
        self.cells.iter().find(|c| c.subject == subject && c.level == level)
    }

    pub fn success(&self, subject: &str, level: DistractionLevel) -> Option<f64> {
        self.cell(subject, level).map(Cell::fraction)
    }

    pub fn head_row(&self, s: Strategy) -> Option<&LatencyRow> {
        self.latency.iter().find(|r| r.strategy == Some(s))
    }

    /// Mean wall-clock of sampler `slow` over sampler `fast`.
    pub fn speedup(&self, slow: Strategy, fast: Strategy) -> Option<f64> {
        Some(self.head_row(slow)?.mean_ms / self.head_row(fast)?.mean_ms)
    }

    /// Forward-pass count of `slow` over `fast`.
    pub fn forward_ratio(&self, slow: Strategy, fast: Strategy) -> Option<f64> {
        Some(self.head_row(slow)?.forward_calls as f64 / self.head_row(fast)?.forward_calls as f64)
    }

    /// Whether sampler wall-clock ordering agrees with forward-pass ordering.
    pub fn latency_consistent(&self) -> bool {
        let heads: Vec<&LatencyRow> = self.latency.iter().filter(|r| r.strategy.is_some()).collect();
        heads.iter().all(|a| {
            heads
                .iter()
                .all(|b| a.forward_calls >= b.forward_calls || a.mean_ms < b.mean_ms)
        })
    }

    /// Absorb the rows of `other`, which must echo the same configuration
    /// unless `other` is an ablation row.
    pub fn extend(&mut self, other: BenchReport) {
        self.cells.extend(other.cells);
        self.latency.extend(other.latency);
        self.notes.extend(other.notes);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for c in &self.cells {
            w.write_record([
                "success",
                &self.config_hash,
                &c.subject,
                c.level.name(),
                c.shift.name(),
                &c.successes().to_string(),
                &c.trials().to_string(),
                &format!("{:.4}", c.fraction()),
                "",
                "",
                "",
                "",
                "",
                "",
                "",
                "",
            ])
            .map_err(csv_err)?;
        }
        for r in &self.latency {
            w.write_record([
                "latency",
                &self.config_hash,
                "",
                "",
                "",
                "",
                "",
                "",
                &r.component,
                r.strategy.map_or("", Strategy::name),
                &r.steps.to_string(),
                &r.forward_calls.to_string(),
                &r.calls.to_string(),
                &format!("{:.4}", r.mean_ms),
                &format!("{:.4}", r.p50_ms),
                &format!("{:.4}", r.p95_ms),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_markdown(&self) -> String {
        let mut md = format!("# {}\n\nConfig hash `{}`.\n", self.title, self.config_hash);
        if !self.cells.is_empty() {
            let mut cols: Vec<(DistractionLevel, ObjectShift)> = Vec::new();
            let mut rows: Vec<&str> = Vec::new();
            for c in &self.cells {
                if !cols.contains(&(c.level, c.shift)) {
                    cols.push((c.level, c.shift));
                }
                if !rows.contains(&c.subject.as_str()) {
                    rows.push(&c.subject);
                }
            }
            let label = |(l, s): &(DistractionLevel, ObjectShift)| {
                let n = l.name();
                let n = format!("{}{}", n[..1].to_uppercase(), &n[1..]);
                match s {
                    ObjectShift::None => n,
                    s => format!("{n} ({})", s.name()),
                }
            };
            md.push_str("\n| Policy |");
            for c in &cols {
                md.push_str(&format!(" {} |", label(c)));
            }
            md.push_str("\n|---|");
            md.push_str(&"---|".repeat(cols.len()));
            for r in rows {
                md.push_str(&format!("\n| {r} |"));
                for &(l, s) in &cols {
                    match self.cells.iter().find(|c| c.subject == r && c.level == l && c.shift == s) {
                        Some(c) => {
                            let (m, sd) = c.seed_spread();
                            md.push_str(&format!(" {}/{} ({m:.2} ± {sd:.2}) |", c.successes(), c.trials()));
                        }
                        None => md.push_str(" - |"),
                    }
                }
            }
            md.push('\n');
        }
        if !self.latency.is_empty() {
            md.push_str("\n| Component | Strategy | Steps | Forward calls | Mean (ms) | p50 (ms) | p95 (ms) |\n");
            md.push_str("|---|---|---|---|---|---|---|\n");
            for r in &self.latency {
                md.push_str(&format!(
                    "| {} | {} | {} | {} | {:.3} | {:.3} | {:.3} |\n",
                    r.component,
                    r.strategy.map_or("-", Strategy::name),
                    r.steps,
                    r.forward_calls,
                    r.mean_ms,
                    r.p50_ms,
                    r.p95_ms
                ));
            }
            if let (Some(w), Some(f)) = (self.speedup(Strategy::Edm, Strategy::Ctm), self.forward_ratio(Strategy::Edm, Strategy::Ctm)) {
                md.push_str(&format!("\nEDM/CTM action-head speedup: {w:.1}x wall-clock, {f:.1}x forward passes.\n"));
            }
        }
        if !self.notes.is_empty() {
            md.push('\n');
            for n in &self.notes {
                md.push_str(&format!("- {n}\n"));
            }
        }
        md.push_str(&format!("\n## Configuration\n\n```toml\n{}```\n", self.config_toml));
        md
    }

    /// Write `<stem>-<hash>.csv` and `<stem>-<hash>.md` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{stem}-{}.csv", self.config_hash));
        let md = dir.join(format!("{stem}-{}.md", self.config_hash));
        std::fs::write(&csv, self.to_csv()?)?;
        std::fs::write(&md, self.to_markdown())?;
        Ok((csv, md))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Rollouts of every subject at every protocol level.
pub fn success_matrix(subjects: &[Subject], protocol: &EvalProtocol, cfg: &TrainConfig) -> Result<BenchReport> {
    protocol.validate()?;
    let mut report = BenchReport::new("Success rate", cfg);
    for subject in subjects {
        for &level in &protocol.levels {
            let mut per_seed = Vec::with_capacity(protocol.seeds);
            for rep in 0..protocol.seeds {
                let mut ctrl = subject.controller(protocol, protocol.seed_base ^ (rep as u64 + 1))?;
                let spec = crate::pipeline::RolloutSpec {
                    level,
                    task: protocol.task,
                    shift: protocol.shift,
                    horizon_cap: protocol.horizon_cap,
                    replan: protocol.replan,
                };
                let runs = crate::pipeline::rollout_batch(ctrl.as_mut(), &protocol.episode_seeds(rep), spec)?;
                per_seed.push(runs.iter().filter(|r| r.success).count());
            }
            report.cells.push(Cell {
                subject: subject.name(),
                level,
                shift: protocol.shift,
                per_seed,
                rollouts: protocol.rollouts,
            });
        }
    }
    report.notes.push(format!(
        "{} rollouts x {} seed sets per cell, sampler {}-{}, replan every {} actions, horizon cap {}.",
        protocol.rollouts,
        protocol.seeds,
        protocol.sampler.name(),
        protocol.steps,
        protocol.replan,
        protocol.horizon_cap
    ));
    report.notes.push(
        "Distraction levels are counts of same-palette distractor blocks (Clean 0, Mild 2, Severe 5).".into(),
    );
    report.validate()?;
    Ok(report)
}

/// Mask mass over the footprint of every relevant object of `scene`.
pub fn mask_coverage(scene: &Scene, raster: RasterSpec) -> Result<Vec<(usize, f32)>> {
    let relevant = KeywordResolver.resolve(&scene.instruction, scene)?;
    let mask = OracleMask(raster).mask(scene, &relevant)?;
    let side = raster.lr_side;
    let mut out = Vec::new();
    for &id in &relevant {
        let o = scene.object(id)?;
        let px = |v: f64| ((v * side as f64).floor().max(0.0) as usize).min(side - 1);
        let (j0, j1) = (px(o.center.0 - o.half), px(o.center.0 + o.half));
        let (i0, i1) = (px(o.center.1 - o.half), px(o.center.1 + o.half));
        let mut mass = 0.0;
        for i in i0..=i1 {
            for j in j0..=j1 {
                mass += mask.data()[(i * side + j) * 3..][..3].iter().sum::<f32>();
            }
        }
        out.push((id, mass));
    }
    Ok(out)
}

/// Protocol checks shared by the zero-shot evaluations.
pub fn check_zero_shot(protocol: &EvalProtocol, manifest: &Manifest, raster: RasterSpec) -> Result<Vec<String>> {
    let mut notes = Vec::new();
    let train: BTreeSet<u64> = manifest.seeds().collect();
    let eval = protocol.all_seeds();
    if let Some(s) = train.intersection(&eval).next() {
        return Err(Error::Protocol(format!("seed {s} is used for training and evaluation")));
    }
    notes.push(format!("{} training seeds and {} evaluation seeds are disjoint.", train.len(), eval.len()));
    if protocol.train_clean_only {
        let m = &manifest.mixture;
        let distracted = manifest.episodes.iter().any(|e| e.level != DistractionLevel::Clean);
        if m.mild + m.severe > 0 || distracted {
            return Err(Error::Protocol(format!(
                "zero-shot distraction protocol needs a Clean-only training set, manifest has {} mild and {} severe episodes",
                m.mild, m.severe
            )));
        }
        notes.push("Trained on Clean scenes only.".into());
    }
    if protocol.shift != ObjectShift::None {
        let seen: BTreeSet<&str> = PALETTE.iter().map(|c| c.name).collect();
        let unseen: BTreeSet<&str> = UNSEEN_PALETTE.iter().map(|c| c.name).collect();
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(Error::Protocol(format!("color `{c}` is in both palettes")));
        }
        if protocol.shift == ObjectShift::Color {
            let trained = manifest.colors();
            if let Some(c) = trained.iter().find(|c| unseen.contains(c.as_str())) {
                return Err(Error::Protocol(format!("shifted color `{c}` appears in the training manifest")));
            }
            notes.push(format!(
                "Training target colors {:?} and shifted colors {:?} are disjoint.",
                trained, unseen
            ));
        }
        for &level in &protocol.levels {
            for seed in &eval {
                let scene = reset_shifted(*seed, level, protocol.task, protocol.shift);
                let target = scene.target().id;
                for (id, mass) in mask_coverage(&scene, raster)? {
                    if id == target && mass <= 0.0 {
                        return Err(Error::Protocol(format!(
                            "oracle mask misses the shifted target of seed {seed} at {}",
                            level.name()
                        )));
                    }
                }
            }
        }
        notes.push(format!("Oracle mask covers every {}-shifted target.", protocol.shift.name()));
    }
    Ok(notes)
}

/// Success matrix under a zero-shot protocol, after the protocol checks.
pub fn zero_shot_eval(
    subjects: &[Subject],
    protocol: &EvalProtocol,
    manifest: &Manifest,
    cfg: &TrainConfig,
) -> Result<BenchReport> {
    protocol.validate()?;
    let notes = check_zero_shot(protocol, manifest, cfg.raster())?;
    let mut report = success_matrix(subjects, protocol, cfg)?;
    report.title = format!("Zero-shot success rate (shift: {})", protocol.shift.name());
    report.notes.extend(notes);
    Ok(report)
}

/// One ablation row: which components stay enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationSpec {
    pub toggles: Toggles,
}

impl AblationSpec {
    /// The standard rows: full model, each component removed, and mask-only.
    pub fn table() -> Vec<AblationSpec> {
        let full = Toggles::default();
        [
            full,
            Toggles { semantic_mask: false, ..full },
            Toggles { multi_scale: false, ..full },
            Toggles { high_res: false, ..full },
            Toggles { low_res: false, ..full },
            Toggles {
                low_res: false,
                high_res: false,
                mask_only: true,
                ..full
            },
        ]
        .into_iter()
        .map(|toggles| AblationSpec { toggles })
        .collect()
    }

    pub fn name(&self) -> String {
        let t = self.toggles;
        let parts: Vec<&str> = [
            (t.low_res, "low-res"),
            (t.high_res, "high-res"),
            (t.multi_scale && t.high_res, "multi-scale"),
            (t.semantic_mask, "mask"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.toggles.validate()
    }
}

/// Retrain the teacher with the components of `spec` and evaluate it.
pub fn ablation_run(
    spec: &AblationSpec,
    cfg: &TrainConfig,
    data: &TrainData,
    protocol: &EvalProtocol,
    log: &mut CsvLog,
) -> Result<(Policy, BenchReport)> {
    spec.validate()?;
    let mut c = cfg.clone();
    c.toggles = spec.toggles;
    c.validate()?;
    let policy = train_teacher(&c, data, log)?;
    let subjects = [Subject::Policy {
        name: spec.name(),
        policy: &policy,
    }];
    let mut report = success_matrix(&subjects, protocol, &c)?;
    report.title = "Component ablation".into();
    Ok((policy, report))
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn time_calls(warmup: usize, calls: usize, mut f: impl FnMut(usize) -> Result<()>) -> Result<(f64, f64, f64)> {
    if calls == 0 {
        return Err(Error::Config("latency benchmark needs at least one timed call".into()));
    }
    for i in 0..warmup {
        f(i)?;
    }
    let mut ms = Vec::with_capacity(calls);
    for i in 0..calls {
        let start = Instant::now();
        f(warmup + i)?;
        let end = Instant::now();
        let d = end.checked_duration_since(start).ok_or(Error::Timer)?;
        ms.push(d.as_secs_f64() * 1e3);
    }
    let mean = ms.iter().sum::<f64>() / ms.len() as f64;
    ms.sort_by(f64::total_cmp);
    Ok((mean, percentile(&ms, 0.5), percentile(&ms, 0.95)))
}

/// Latency of the mask oracle, the perception stack (one frame) and each
/// sampler end-to-end on one observation. The consistency sampler runs on
/// `student`, every other sampler on `teacher`.
pub fn latency_bench(
    teacher: &Policy,
    student: Option<&Policy>,
    strategies: &[(Strategy, usize)],
    scene: &Scene,
    warmup: usize,
    calls: usize,
) -> Result<BenchReport> {
    let cfg = &teacher.cfg;
    let raster = cfg.raster();
    let mut report = BenchReport::new("Latency", cfg);
    let relevant = KeywordResolver.resolve(&scene.instruction, scene)?;
    let (mean, p50, p95) = time_calls(warmup, calls, |_| {
        let r = KeywordResolver.resolve(&scene.instruction, scene)?;
        OracleMask(raster).mask(scene, &r).map(drop)
    })?;
    report.latency.push(LatencyRow {
        component: "mask oracle".into(),
        strategy: None,
        steps: 0,
        forward_calls: 0,
        calls,
        mean_ms: mean,
        p50_ms: p50,
        p95_ms: p95,
    });
    let obs = render(scene, raster);
    let add1 = |t: Tensor<f32>| {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.reshape(&shape)
    };
    let lr = add1(obs.o_lr)?;
    let hr = add1(obs.o_hr)?;
    let mask = add1(OracleMask(raster).mask(scene, &relevant)?)?;
    let proprio = Tensor::new(&[1, 3], obs.p.to_vec())?;
    let (mean, p50, p95) = time_calls(warmup, calls, |_| teacher.perceive_with(&teacher.store, &lr, &hr, &mask).map(drop))?;
    report.latency.push(LatencyRow {
        component: "perception".into(),
        strategy: None,
        steps: 0,
        forward_calls: 1,
        calls,
        mean_ms: mean,
        p50_ms: p50,
        p95_ms: p95,
    });
    let h = cfg.head;
    let shape = [1, h.horizon, h.action_dim];
    for &(strategy, steps) in strategies {
        let policy = match strategy {
            Strategy::Ctm => student.ok_or_else(|| Error::Protocol("the consistency sampler needs a student".into()))?,
            _ => teacher,
        };
        let f_sem = policy.perceive_with(&policy.store, &lr, &hr, &mask)?;
        let net = policy.frozen(&policy.store, f_sem, proprio.clone());
        let sched = &policy.cfg.schedule;
        let mut rng = ChaCha8Rng::seed_from_u64(steps as u64);
        let noise: Vec<Tensor<f32>> = (0..warmup + calls).map(|_| initial_noise(&shape, sched, &mut rng)).collect();
        let mut forward = 0;
        let (mean, p50, p95) = time_calls(warmup, calls, |i| {
            let counted = Counted::new(&net);
            let x = &noise[i];
            match strategy {
                Strategy::Edm => sample_edm_heun(&counted, x, sched, steps)?,
                Strategy::Ddim => sample_ddim(&counted, x, sched, steps)?,
                Strategy::Ddpm => sample_ddpm(&counted, x, sched, steps, &mut ChaCha8Rng::seed_from_u64(i as u64))?,
                Strategy::Ctm => sample_ctm(&counted, x, sched, steps)?,
            };
            forward = counted.calls();
            Ok(())
        })?;
        report.latency.push(LatencyRow {
            component: "action head".into(),
            strategy: Some(strategy),
            steps,
            forward_calls: forward,
            calls,
            mean_ms: mean,
            p50_ms: p50,
            p95_ms: p95,
        });
    }
    report.notes.push(format!(
        "{calls} timed calls after {warmup} warmup calls, batch of one, single thread."
    ));
    report
        .notes
        .push("Perception excludes the mask oracle, which is timed on its own row.".into());
    Ok(report)
}
