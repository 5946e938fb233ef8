//! Run configuration: one TOML document mirroring [`TrainConfig`], strict
//! about unknown keys, with `a.b.c=value` overrides applied on top.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{LossWeights, NoiseSchedule, Strategy};
use crate::error::{Error, Result};
use crate::perception::{PerceptionConfig, Toggles};
use crate::actionhead::HeadConfig;
use crate::simenv::{Mixture, RasterSpec, TaskId, HORIZON_CAP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub episodes: usize,
    pub task: TaskId,
    pub seed: u64,
    pub horizon: usize,
    pub mixture: Mixture,
    /// Dataset directory, relative to the run directory unless absolute.
    pub dir: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            task: TaskId::Place,
            seed: 0,
            horizon: HORIZON_CAP,
            mixture: Mixture::default(),
            dir: "data".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            steps: 30_000,
            batch: 64,
            lr: 3e-4,
            clip: 1.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip: f64,
    pub seed: u64,
    pub ema_decay: f64,
    /// Teacher grid used to draw trajectory pairs.
    pub grid_steps: usize,
    pub freeze_perception: bool,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 64,
            lr: 3e-4,
            clip: 1.0,
            seed: 2,
            ema_decay: 0.999,
            grid_steps: 18,
            freeze_perception: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub rollouts: usize,
    pub seeds: usize,
    pub seed: u64,
    pub sampler: Strategy,
    pub steps: usize,
    /// Actions executed per chunk before re-observing.
    pub replan: usize,
    /// Timed calls per latency measurement, after warmup.
    pub latency_calls: usize,
    pub warmup: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rollouts: 25,
            seeds: 3,
            seed: 7,
            sampler: Strategy::Edm,
            steps: 18,
            replan: 4,
            latency_calls: 200,
            warmup: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub perception: PerceptionConfig,
    pub toggles: Toggles,
    pub head: HeadConfig,
    pub schedule: NoiseSchedule,
    pub loss: LossWeights,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            perception: PerceptionConfig::default(),
            toggles: Toggles::default(),
            head: HeadConfig::default(),
            schedule: NoiseSchedule::default(),
            loss: LossWeights::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    /// A configuration small enough for a single CPU core: 16 px low-res
    /// rasters, width 32, two-block head, a few thousand steps. Noise levels
    /// are drawn around 1 rather than 0.3: with so few steps the low-noise
    /// bias leaves the early sampler steps undertrained.
    pub fn compact() -> Self {
        let mut c = Self::default();
        c.perception = PerceptionConfig {
            lr_side: 16,
            factor: 2,
            patch: 4,
            d: 32,
            heads: 4,
            lr_blocks: 1,
            conv_widths: [8, 16, 32],
            inject_blocks: 2,
        };
        c.head = HeadConfig {
            d: 32,
            blocks: 2,
            ..HeadConfig::default()
        };
        c.schedule.p_mean = 0.0;
        c.teacher.steps = 3000;
        c.teacher.batch = 32;
        c.teacher.lr = 1e-3;
        c.student.steps = 4000;
        c.student.batch = 32;
        c.student.lr = 1e-3;
        c.student.ema_decay = 0.99;
        c
    }

    pub fn raster(&self) -> RasterSpec {
        RasterSpec {
            lr_side: self.perception.lr_side,
            factor: self.perception.factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.perception.validate()?;
        self.head.validate()?;
        self.schedule.validate()?;
        self.loss.validate()?;
        self.toggles.validate()?;
        self.data.mixture.counts(self.data.episodes)?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.head.d != self.perception.d {
            return bad("head width must equal perception width");
        }
        if self.head.action_dim != 3 || self.head.proprio_dim != 3 {
            return bad("the simulator has 3 action and 3 proprioception dimensions");
        }
        if self.data.episodes == 0 || self.data.horizon == 0 {
            return bad("dataset needs episodes and a positive horizon");
        }
        for (b, lr) in [(self.teacher.batch, self.teacher.lr), (self.student.batch, self.student.lr)] {
            if b == 0 || !(lr > 0.0) {
                return bad("batch sizes and learning rates must be positive");
            }
        }
        if !(0.0..=1.0).contains(&self.student.ema_decay) {
            return bad("EMA decay must lie in [0, 1]");
        }
        if self.student.grid_steps < 2 {
            return bad("distillation grid needs at least 2 steps");
        }
        let e = &self.eval;
        if e.rollouts == 0 || e.seeds == 0 || e.steps == 0 || e.latency_calls == 0 {
            return bad("evaluation counts must be positive");
        }
        if e.replan == 0 || e.replan > self.head.horizon {
            return bad("replan interval must lie in 1..=horizon");
        }
        Ok(())
    }

    /// Parse a TOML document with overrides applied; unknown keys are errors.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message())))?;
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        let cfg: Self = toml::Value::Table(doc).try_into().map_err(map_serde)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 12 hex digits of SHA-256 over the canonical TOML.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_toml().as_bytes());
        d.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

fn map_serde(e: toml::de::Error) -> Error {
    let msg = e.message().to_string();
    if msg.starts_with("unknown field") {
        // "unknown field `x`, expected one of ..."
        let key = msg.split('`').nth(1).unwrap_or("?").to_string();
        Error::UnknownKey(key)
    } else {
        Error::Config(msg)
    }
}

/// Set `a.b.c` in `doc`, creating intermediate tables. The value is parsed as
/// TOML and falls back to a bare string.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    // Check the path against the schema now so the offending key is named.
    check_known(key)?;
    Ok(())
}

fn check_known(key: &str) -> Result<()> {
    let defaults = toml::Value::try_from(TrainConfig::default()).expect("config serializes");
    let mut cur = &defaults;
    for p in key.split('.') {
        cur = cur.get(p).ok_or_else(|| Error::UnknownKey(key.to_string()))?;
    }
    Ok(())
}
