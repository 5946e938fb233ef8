//! Demonstration datasets: a TOML manifest plus one binary blob per episode.
//!
//! Blob layout (all integers little-endian):
//!
//! ```text
//! magic "DDEP" | version u32 | field count u32
//! per field: name len u16, name bytes, ndim u8, dims u32 x ndim, offset u64
//! payload: f32 values, each field at `offset` bytes past the header
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::Tensor;
use crate::simenv::expert::run_expert;
use crate::simenv::render::{render, Observation, RasterSpec};
use crate::simenv::scene::{
    reset, Color, DistractionLevel, Object, Robot, Role, Scene, Shape, TaskId, PALETTE,
    UNSEEN_PALETTE, ZONE_COLOR,
};

pub const BLOB_MAGIC: &[u8; 4] = b"DDEP";
pub const BLOB_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.toml";
const OBJECT_COLS: usize = 9;

/// Episode seeds at or above this value are reserved for evaluation.
pub const EVAL_SEED_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Mixture {
    pub clean: f64,
    pub mild: f64,
    pub severe: f64,
}

impl Default for Mixture {
    fn default() -> Self {
        Self {
            clean: 0.5,
            mild: 0.3,
            severe: 0.2,
        }
    }
}

impl Mixture {
    pub fn clean_only() -> Self {
        Self {
            clean: 1.0,
            mild: 0.0,
            severe: 0.0,
        }
    }

    /// Exact per-level episode counts summing to `total`.
    pub fn counts(&self, total: usize) -> Result<[usize; 3]> {
        let f = [self.clean, self.mild, self.severe];
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture {f:?} must be fractions summing to 1")));
        }
        let mild = (self.mild * total as f64).round() as usize;
        let severe = (self.severe * total as f64).round() as usize;
        if mild + severe > total {
            return Err(Error::Config("mixture rounds above the episode count".into()));
        }
        Ok([total - mild - severe, mild, severe])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub episodes: usize,
    pub mixture: Mixture,
    pub task: TaskId,
    pub seed: u64,
    pub raster: RasterSpec,
    pub horizon: usize,
}

/// One expert demonstration with per-step tables.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoEpisode {
    pub seed: u64,
    pub level: DistractionLevel,
    pub task: TaskId,
    pub instruction: String,
    pub success: bool,
    /// `[S, H', H', 3]`
    pub o_hr: Tensor<f32>,
    /// `[S, H, H, 3]`
    pub o_lr: Tensor<f32>,
    /// `[S, 3]`
    pub proprio: Tensor<f32>,
    /// `[S, 3]`
    pub action: Tensor<f32>,
    /// `[S, objects, 9]`: id, cx, cy, half, color index, role, shape, 0, 0
    pub objects: Tensor<f32>,
    /// `[S, 4]`: gripper x, y, open, held id or -1
    pub robot: Tensor<f32>,
}

fn all_colors() -> impl Iterator<Item = Color> {
    PALETTE
        .into_iter()
        .chain(UNSEEN_PALETTE)
        .chain(std::iter::once(ZONE_COLOR))
}

fn color_index(c: &Color) -> usize {
    all_colors().position(|k| k.name == c.name).expect("color from a known palette")
}

fn encode_scene(s: &Scene, objects: &mut Vec<f32>, robot: &mut Vec<f32>) {
    for o in &s.objects {
        objects.extend([
            o.id as f32,
            o.center.0 as f32,
            o.center.1 as f32,
            o.half as f32,
            color_index(&o.color) as f32,
            match o.role {
                Role::Target => 0.0,
                Role::Receptacle => 1.0,
                Role::Distractor => 2.0,
            },
            match o.shape {
                Shape::Square => 0.0,
                Shape::Disc => 1.0,
            },
            0.0,
            0.0,
        ]);
    }
    let r = &s.robot;
    robot.extend([
        r.gripper.0 as f32,
        r.gripper.1 as f32,
        if r.open { 1.0 } else { 0.0 },
        r.held.map_or(-1.0, |h| h as f32),
    ]);
}

impl DemoEpisode {
    pub fn len(&self) -> usize {
        self.action.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn observation(&self, k: usize) -> Observation {
        let row = |t: &Tensor<f32>| {
            let s = t.slice_outer(k, k + 1);
            let shape = s.shape()[1..].to_vec();
            s.reshape(&shape).unwrap()
        };
        let p = self.proprio.data();
        Observation {
            o_hr: row(&self.o_hr),
            o_lr: row(&self.o_lr),
            p: [p[3 * k], p[3 * k + 1], p[3 * k + 2]],
        }
    }

    pub fn action_at(&self, k: usize) -> [f32; 3] {
        let a = self.action.data();
        [a[3 * k], a[3 * k + 1], a[3 * k + 2]]
    }

    /// Scene state before step `k`, rebuilt from the stored tables.
    pub fn scene_at(&self, k: usize) -> Scene {
        let n = self.objects.shape()[1];
        let rows = &self.objects.data()[k * n * OBJECT_COLS..(k + 1) * n * OBJECT_COLS];
        let colors: Vec<Color> = all_colors().collect();
        let objects = rows
            .chunks(OBJECT_COLS)
            .map(|r| Object {
                id: r[0] as usize,
                center: (r[1] as f64, r[2] as f64),
                half: r[3] as f64,
                color: colors[r[4] as usize],
                role: match r[5] as u8 {
                    0 => Role::Target,
                    1 => Role::Receptacle,
                    _ => Role::Distractor,
                },
                shape: if r[6] == 0.0 { Shape::Square } else { Shape::Disc },
            })
            .collect();
        let rb = &self.robot.data()[4 * k..4 * k + 4];
        Scene {
            objects,
            robot: Robot {
                gripper: (rb[0] as f64, rb[1] as f64),
                open: rb[2] != 0.0,
                held: (rb[3] >= 0.0).then_some(rb[3] as usize),
            },
            task: self.task,
            level: self.level,
            instruction: self.instruction.clone(),
            rng_seed: self.seed,
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor<f32>); 6] {
        [
            ("o_hr", &self.o_hr),
            ("o_lr", &self.o_lr),
            ("proprio", &self.proprio),
            ("action", &self.action),
            ("objects", &self.objects),
            ("robot", &self.robot),
        ]
    }
}

/// Run the expert from `(seed, level, task)` and record the episode.
pub fn record_episode(
    seed: u64,
    level: DistractionLevel,
    task: TaskId,
    raster: RasterSpec,
    horizon: usize,
) -> Result<DemoEpisode> {
    let start = reset(seed, level, task);
    let (scenes, actions) = run_expert(&start, horizon)?;
    let s = scenes.len();
    let (mut hr, mut lr, mut p, mut a, mut objs, mut rob) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (scene, act) in scenes.iter().zip(&actions) {
        let obs = render(scene, raster);
        hr.extend_from_slice(obs.o_hr.data());
        lr.extend_from_slice(obs.o_lr.data());
        p.extend(obs.p);
        a.extend(act.map(|v| v as f32));
        encode_scene(scene, &mut objs, &mut rob);
    }
    let (h2, h) = (raster.hr_side(), raster.lr_side);
    let n = start.objects.len();
    Ok(DemoEpisode {
        seed,
        level,
        task,
        instruction: start.instruction.clone(),
        success: true,
        o_hr: Tensor::new(&[s, h2, h2, 3], hr)?,
        o_lr: Tensor::new(&[s, h, h, 3], lr)?,
        proprio: Tensor::new(&[s, 3], p)?,
        action: Tensor::new(&[s, 3], a)?,
        objects: Tensor::new(&[s, n, OBJECT_COLS], objs)?,
        robot: Tensor::new(&[s, 4], rob)?,
    })
}

pub fn encode_blob(ep: &DemoEpisode) -> Vec<u8> {
    let fields = ep.fields();
    let mut head = Vec::new();
    head.extend_from_slice(BLOB_MAGIC);
    head.extend(BLOB_VERSION.to_le_bytes());
    head.extend((fields.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &fields {
        head.extend((name.len() as u16).to_le_bytes());
        head.extend(name.as_bytes());
        head.push(t.shape().len() as u8);
        for &d in t.shape() {
            head.extend((d as u32).to_le_bytes());
        }
        head.extend(offset.to_le_bytes());
        offset += 4 * t.numel() as u64;
    }
    for (_, t) in &fields {
        for v in t.data() {
            head.extend(v.to_le_bytes());
        }
    }
    head
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::format(self.path, "truncated blob"));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decode the named field tables of an episode blob.
pub fn decode_blob(buf: &[u8], path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut c = Cursor { buf, pos: 0, path };
    if c.take(4)? != BLOB_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = c.u32()?;
    if version != BLOB_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let n = c.u32()? as usize;
    let mut table = Vec::with_capacity(n);
    for _ in 0..n {
        let len = c.u16()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::format(path, "field name is not UTF-8"))?;
        let ndim = c.u8()? as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = c.u64()? as usize;
        table.push((name, shape, offset));
    }
    let payload = &buf[c.pos..];
    table
        .into_iter()
        .map(|(name, shape, offset)| {
            let count: usize = shape.iter().product();
            let bytes = payload
                .get(offset..offset + 4 * count)
                .ok_or_else(|| Error::format(path, format!("field `{name}` past end of payload")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Ok((name, Tensor::new(&shape, data)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub file: String,
    pub seed: u64,
    pub level: DistractionLevel,
    pub instruction: String,
    pub steps: usize,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelCounts {
    pub clean: usize,
    pub mild: usize,
    pub severe: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub episode_count: usize,
    pub task: TaskId,
    pub seed: u64,
    pub lr_side: usize,
    pub hr_side: usize,
    pub horizon: usize,
    pub mixture: LevelCounts,
    /// Seeds whose expert run failed and were replaced.
    pub skipped_seeds: Vec<u64>,
    pub episodes: Vec<EpisodeEntry>,
}

impl Manifest {
    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        self.episodes.iter().map(|e| e.seed)
    }

    pub fn colors(&self) -> std::collections::BTreeSet<String> {
        self.episodes
            .iter()
            .filter_map(|e| {
                let w: Vec<&str> = e.instruction.split_whitespace().collect();
                let k = w.iter().position(|&x| x == "block")?;
                k.checked_sub(1).map(|i| w[i].to_string())
            })
            .collect()
    }
}

/// Generate the episodes of `spec` in memory.
pub fn generate(spec: &DatasetSpec) -> Result<(Manifest, Vec<DemoEpisode>)> {
    let counts = spec.mixture.counts(spec.episodes)?;
    let mut episodes = Vec::with_capacity(spec.episodes);
    let mut skipped = Vec::new();
    let mut next_seed = spec.seed.wrapping_mul(1_000_003);
    for (level, &count) in DistractionLevel::ALL.iter().zip(&counts) {
        let mut made = 0;
        while made < count {
            let seed = next_seed;
            next_seed += 1;
            if seed >= EVAL_SEED_BASE {
                return Err(Error::Config("training seeds overlap the evaluation range".into()));
            }
            match record_episode(seed, *level, spec.task, spec.raster, spec.horizon) {
                Ok(ep) => {
                    episodes.push(ep);
                    made += 1;
                }
                Err(Error::HorizonExhausted(_)) => skipped.push(seed),
                Err(e) => return Err(e),
            }
        }
    }
    let manifest = Manifest {
        format_version: BLOB_VERSION,
        episode_count: episodes.len(),
        task: spec.task,
        seed: spec.seed,
        lr_side: spec.raster.lr_side,
        hr_side: spec.raster.hr_side(),
        horizon: spec.horizon,
        mixture: LevelCounts {
            clean: counts[0],
            mild: counts[1],
            severe: counts[2],
        },
        skipped_seeds: skipped,
        episodes: episodes
            .iter()
            .enumerate()
            .map(|(i, ep)| EpisodeEntry {
                file: format!("episode_{i:05}.bin"),
                seed: ep.seed,
                level: ep.level,
                instruction: ep.instruction.clone(),
                steps: ep.len(),
                success: ep.success,
            })
            .collect(),
    };
    Ok((manifest, episodes))
}

pub fn write_dataset(dir: &Path, manifest: &Manifest, episodes: &[DemoEpisode]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = toml::to_string(manifest).map_err(|e| Error::format(dir.join(MANIFEST), e.to_string()))?;
    fs::write(dir.join(MANIFEST), text)?;
    for (entry, ep) in manifest.episodes.iter().zip(episodes) {
        fs::write(dir.join(&entry.file), encode_blob(ep))?;
    }
    Ok(())
}

/// Generate and write a dataset directory.
pub fn generate_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Manifest> {
    let (manifest, episodes) = generate(spec)?;
    write_dataset(dir, &manifest, &episodes)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<DemoEpisode>)> {
    let manifest = read_manifest(dir)?;
    let episodes = manifest
        .episodes
        .iter()
        .map(|entry| {
            let path: PathBuf = dir.join(&entry.file);
            let mut fields = decode_blob(&fs::read(&path)?, &path)?;
            let mut take = |name: &str| -> Result<Tensor<f32>> {
                let i = fields
                    .iter()
                    .position(|(n, _)| n == name)
                    .ok_or_else(|| Error::format(&path, format!("missing field `{name}`")))?;
                Ok(fields.swap_remove(i).1)
            };
            Ok(DemoEpisode {
                seed: entry.seed,
                level: entry.level,
                task: manifest.task,
                instruction: entry.instruction.clone(),
                success: entry.success,
                o_hr: take("o_hr")?,
                o_lr: take("o_lr")?,
                proprio: take("proprio")?,
                action: take("action")?,
                objects: take("objects")?,
                robot: take("robot")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, episodes))
}

/// Re-execute the stored actions from a fresh reset; true if the episode ends
/// in success.
pub fn replay(ep: &DemoEpisode) -> Result<bool> {
    let mut scene = reset(ep.seed, ep.level, ep.task);
    let mut done = false;
    for k in 0..ep.len() {
        let a = ep.action_at(k).map(f64::from);
        (scene, done) = crate::simenv::scene::step(&scene, a)?;
    }
    Ok(done)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(episodes: usize) -> DatasetSpec {
        DatasetSpec {
            episodes,
            mixture: Mixture::default(),
            task: TaskId::Place,
            seed: 0,
            raster: RasterSpec { lr_side: 8, factor: 2 },
            horizon: 60,
        }
    }

    #[test]
    fn default_mixture_counts() {
        assert_eq!(Mixture::default().counts(100).unwrap(), [50, 30, 20]);
        assert_eq!(Mixture::default().counts(10).unwrap(), [5, 3, 2]);
        assert!(Mixture { clean: 0.5, mild: 0.5, severe: 0.5 }.counts(10).is_err());
    }

    #[test]
    fn blob_round_trip() {
        let ep = record_episode(3, DistractionLevel::Mild, TaskId::Place, RasterSpec { lr_side: 8, factor: 2 }, 60)
            .unwrap();
        let fields = decode_blob(&encode_blob(&ep), Path::new("x")).unwrap();
        assert_eq!(fields.len(), 6);
        assert_eq!(fields[3].1, ep.action);
        assert_eq!(fields[0].1, ep.o_hr);
    }

    #[test]
    fn corrupt_blobs_are_rejected() {
        let ep = record_episode(3, DistractionLevel::Clean, TaskId::Place, RasterSpec { lr_side: 8, factor: 2 }, 60)
            .unwrap();
        let mut b = encode_blob(&ep);
        assert!(decode_blob(&b[..b.len() - 3], Path::new("x")).is_err());
        b[0] = b'X';
        assert!(decode_blob(&b, Path::new("x")).is_err());
    }

    #[test]
    fn directory_is_deterministic_and_replays() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = small_spec(10);
        let m = generate_dataset(&spec, a.path()).unwrap();
        generate_dataset(&spec, b.path()).unwrap();
        assert_eq!(m.mixture, LevelCounts { clean: 5, mild: 3, severe: 2 });
        for f in std::iter::once(MANIFEST.to_string()).chain(m.episodes.iter().map(|e| e.file.clone())) {
            assert_eq!(fs::read(a.path().join(&f)).unwrap(), fs::read(b.path().join(&f)).unwrap(), "{f}");
        }
        let (m2, eps) = load_dataset(a.path()).unwrap();
        assert_eq!(m2, m);
        for ep in &eps {
            assert!(replay(ep).unwrap(), "seed {}", ep.seed);
        }
    }

    #[test]
    fn stored_scene_matches_observation() {
        let spec = RasterSpec { lr_side: 8, factor: 2 };
        let ep = record_episode(5, DistractionLevel::Severe, TaskId::Place, spec, 60).unwrap();
        for k in 0..ep.len() {
            let s = ep.scene_at(k);
            assert_eq!(s.proprio(), ep.observation(k).p);
        }
    }
}
