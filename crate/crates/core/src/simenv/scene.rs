use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest per-axis gripper displacement per step.
pub const MAX_STEP: f64 = 0.08;
/// Object centers are kept at least this far from the workspace border.
pub const MARGIN: f64 = 0.12;
pub const BLOCK_HALF: f64 = 0.06;
pub const ZONE_HALF: f64 = 0.12;
/// Extra clearance between objects at reset.
const GAP: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Color {
    pub name: &'static str,
    pub rgb: [f32; 3],
}

/// Colors used for targets and distractors during training.
pub const PALETTE: [Color; 8] = [
    Color { name: "red", rgb: [0.90, 0.10, 0.10] },
    Color { name: "green", rgb: [0.10, 0.80, 0.20] },
    Color { name: "blue", rgb: [0.15, 0.25, 0.95] },
    Color { name: "yellow", rgb: [0.95, 0.90, 0.10] },
    Color { name: "cyan", rgb: [0.10, 0.85, 0.90] },
    Color { name: "magenta", rgb: [0.90, 0.15, 0.85] },
    Color { name: "orange", rgb: [0.95, 0.55, 0.05] },
    Color { name: "purple", rgb: [0.50, 0.15, 0.70] },
];

/// Colors never used in training scenes, for the color-shift protocol.
pub const UNSEEN_PALETTE: [Color; 4] = [
    Color { name: "pink", rgb: [1.00, 0.60, 0.75] },
    Color { name: "brown", rgb: [0.55, 0.35, 0.15] },
    Color { name: "teal", rgb: [0.00, 0.50, 0.50] },
    Color { name: "lime", rgb: [0.70, 1.00, 0.30] },
];

pub const ZONE_COLOR: Color = Color { name: "gray", rgb: [0.55, 0.55, 0.55] };
pub const BACKGROUND: [f32; 3] = [0.08, 0.08, 0.10];

pub fn color_by_name(name: &str) -> Option<Color> {
    PALETTE
        .iter()
        .chain(UNSEEN_PALETTE.iter())
        .chain(std::iter::once(&ZONE_COLOR))
        .find(|c| c.name == name)
        .copied()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Target,
    Receptacle,
    Distractor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disc,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Object {
    pub id: usize,
    pub center: (f64, f64),
    pub half: f64,
    pub color: Color,
    pub role: Role,
    pub shape: Shape,
}

impl Object {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        match self.shape {
            Shape::Square => dx.abs() <= self.half && dy.abs() <= self.half,
            Shape::Disc => dx * dx + dy * dy <= self.half * self.half,
        }
    }

    fn overlaps(&self, other: &Object) -> bool {
        let reach = self.half + other.half + GAP;
        (self.center.0 - other.center.0).abs() < reach
            && (self.center.1 - other.center.1).abs() < reach
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Robot {
    pub gripper: (f64, f64),
    pub open: bool,
    pub held: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistractionLevel {
    Clean,
    Mild,
    Severe,
}

impl DistractionLevel {
    pub const ALL: [DistractionLevel; 3] = [Self::Clean, Self::Mild, Self::Severe];

    pub fn distractors(self) -> usize {
        match self {
            Self::Clean => 0,
            Self::Mild => 2,
            Self::Severe => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::Mild => "mild",
            Self::Severe => "severe",
        }
    }
}

impl FromStr for DistractionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown distraction level `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    /// Carry the named block into the gray zone.
    Place,
    /// Grasp the named block.
    Pick,
}

impl TaskId {
    pub fn name(self) -> &'static str {
        match self {
            Self::Place => "place",
            Self::Pick => "pick",
        }
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "place" => Ok(Self::Place),
            "pick" => Ok(Self::Pick),
            _ => Err(Error::UnknownTask(s.to_string())),
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Object-appearance shift applied to the target for zero-shot evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectShift {
    #[default]
    None,
    Shape,
    Size,
    Color,
}

impl ObjectShift {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Shape => "shape",
            Self::Size => "size",
            Self::Color => "color",
        }
    }
}

impl FromStr for ObjectShift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::None, Self::Shape, Self::Size, Self::Color]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown object shift `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<Object>,
    pub robot: Robot,
    pub task: TaskId,
    pub level: DistractionLevel,
    pub instruction: String,
    pub rng_seed: u64,
}

impl Scene {
    /// A scene with no objects and the gripper at the center.
    pub fn empty(task: TaskId) -> Self {
        Self {
            objects: Vec::new(),
            robot: Robot {
                gripper: (0.5, 0.5),
                open: true,
                held: None,
            },
            task,
            level: DistractionLevel::Clean,
            instruction: String::new(),
            rng_seed: 0,
        }
    }

    pub fn object(&self, id: usize) -> Result<&Object> {
        self.objects
            .iter()
            .find(|o| o.id == id)
            .ok_or(Error::UnknownObject(id))
    }

    pub fn target(&self) -> &Object {
        self.objects
            .iter()
            .find(|o| o.role == Role::Target)
            .expect("scene without target")
    }

    pub fn receptacle(&self) -> Option<&Object> {
        self.objects.iter().find(|o| o.role == Role::Receptacle)
    }

    pub fn distractor_count(&self) -> usize {
        self.objects
            .iter()
            .filter(|o| o.role == Role::Distractor)
            .count()
    }

    /// Proprioception `(x, y, open)`.
    pub fn proprio(&self) -> [f32; 3] {
        let r = &self.robot;
        [r.gripper.0 as f32, r.gripper.1 as f32, if r.open { 1.0 } else { 0.0 }]
    }

    pub fn is_success(&self) -> bool {
        let t = self.target();
        match self.task {
            TaskId::Pick => self.robot.held == Some(t.id),
            TaskId::Place => {
                let zone = self.receptacle().expect("place scene without zone");
                self.robot.held.is_none()
                    && (t.center.0 - zone.center.0).abs() <= zone.half
                    && (t.center.1 - zone.center.1).abs() <= zone.half
            }
        }
    }
}

pub fn instruction_for(task: TaskId, color: &str) -> String {
    match task {
        TaskId::Place => format!("place the {color} block in the zone"),
        TaskId::Pick => format!("pick up the {color} block"),
    }
}

/// Sample a center that keeps `half` inside the margin and clears `placed`.
fn place(rng: &mut ChaCha8Rng, half: f64, placed: &[Object]) -> Option<(f64, f64)> {
    let lo = MARGIN.max(half);
    for _ in 0..10_000 {
        let c = (rng.random_range(lo..1.0 - lo), rng.random_range(lo..1.0 - lo));
        let probe = Object {
            id: 0,
            center: c,
            half,
            color: ZONE_COLOR,
            role: Role::Distractor,
            shape: Shape::Square,
        };
        if placed.iter().all(|o| !probe.overlaps(o)) {
            return Some(c);
        }
    }
    None
}

/// Deterministic scene for `(seed, level, task)` with an optional target shift.
pub fn reset_shifted(seed: u64, level: DistractionLevel, task: TaskId, shift: ObjectShift) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce4_e000);
    let mut objects = Vec::new();
    if task == TaskId::Place {
        let c = place(&mut rng, ZONE_HALF, &objects).expect("empty workspace fits the zone");
        objects.push(Object {
            id: 0,
            center: c,
            half: ZONE_HALF,
            color: ZONE_COLOR,
            role: Role::Receptacle,
            shape: Shape::Square,
        });
    }
    let target_color = match shift {
        ObjectShift::Color => UNSEEN_PALETTE[rng.random_range(0..UNSEEN_PALETTE.len())],
        _ => PALETTE[rng.random_range(0..PALETTE.len())],
    };
    let (half, shape) = match shift {
        ObjectShift::Size => (BLOCK_HALF * 0.6, Shape::Square),
        ObjectShift::Shape => (BLOCK_HALF, Shape::Disc),
        _ => (BLOCK_HALF, Shape::Square),
    };
    let c = place(&mut rng, half, &objects).expect("target fits beside the zone");
    objects.push(Object {
        id: objects.len(),
        center: c,
        half,
        color: target_color,
        role: Role::Target,
        shape,
    });
    // Drawn before distractors so levels differ only by clutter.
    let gripper = (rng.random_range(0.05..0.95), rng.random_range(0.05..0.95));
    // Training scenes never reuse the target color; the color-shift protocol may.
    let others: Vec<Color> = PALETTE
        .iter()
        .filter(|c| shift == ObjectShift::Color || c.name != target_color.name)
        .copied()
        .collect();
    for _ in 0..level.distractors() {
        let color = others[rng.random_range(0..others.len())];
        let c = place(&mut rng, BLOCK_HALF, &objects).expect("workspace fits all distractors");
        objects.push(Object {
            id: objects.len(),
            center: c,
            half: BLOCK_HALF,
            color,
            role: Role::Distractor,
            shape: Shape::Square,
        });
    }
    Scene {
        objects,
        robot: Robot {
            gripper,
            open: true,
            held: None,
        },
        task,
        level,
        instruction: instruction_for(task, target_color.name),
        rng_seed: seed,
    }
}

pub fn reset(seed: u64, level: DistractionLevel, task: TaskId) -> Scene {
    reset_shifted(seed, level, task, ObjectShift::None)
}

/// Parse a task name and reset.
pub fn reset_named(seed: u64, level: DistractionLevel, task: &str) -> Result<Scene> {
    Ok(reset(seed, level, task.parse()?))
}

/// Advance one step. Movement is clamped to `MAX_STEP` per axis and to the
/// workspace; `grip` above 0.5 requests a closed gripper.
pub fn step(scene: &Scene, action: [f64; 3]) -> Result<(Scene, bool)> {
    if action.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidAction(format!("{action:?}")));
    }
    let mut next = scene.clone();
    let dx = action[0].clamp(-MAX_STEP, MAX_STEP);
    let dy = action[1].clamp(-MAX_STEP, MAX_STEP);
    let r = &mut next.robot;
    r.gripper = (
        (r.gripper.0 + dx).clamp(0.0, 1.0),
        (r.gripper.1 + dy).clamp(0.0, 1.0),
    );
    if let Some(h) = r.held {
        let g = r.gripper;
        next.objects.iter_mut().find(|o| o.id == h).unwrap().center = g;
    }
    let want_closed = action[2] > 0.5;
    let r = &mut next.robot;
    if want_closed && r.open {
        r.open = false;
        let (gx, gy) = r.gripper;
        // Snap onto the topmost graspable object under the gripper.
        r.held = next
            .objects
            .iter()
            .rev()
            .find(|o| o.role != Role::Receptacle && o.contains(gx, gy))
            .map(|o| o.id);
        if let Some(h) = r.held {
            next.objects.iter_mut().find(|o| o.id == h).unwrap().center = (gx, gy);
        }
    } else if !want_closed && !r.open {
        r.open = true;
        r.held = None;
    }
    let done = next.is_success();
    Ok((next, done))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic() {
        let a = reset(7, DistractionLevel::Mild, TaskId::Place);
        let b = reset(7, DistractionLevel::Mild, TaskId::Place);
        assert_eq!(a, b);
        assert_ne!(a, reset(8, DistractionLevel::Mild, TaskId::Place));
    }

    #[test]
    fn clean_has_no_distractors() {
        assert_eq!(reset(3, DistractionLevel::Clean, TaskId::Place).distractor_count(), 0);
    }

    #[test]
    fn severe_layouts_over_many_seeds() {
        for seed in 0..1000 {
            let s = reset(seed, DistractionLevel::Severe, TaskId::Place);
            assert_eq!(s.distractor_count(), 5);
            let t = s.target();
            let z = s.receptacle().unwrap();
            assert!(!t.overlaps(z), "seed {seed}");
            for o in &s.objects {
                assert!(o.half > 0.0);
                assert!(o.center.0 - o.half >= 0.0 && o.center.0 + o.half <= 1.0);
                assert!(o.center.1 - o.half >= 0.0 && o.center.1 + o.half <= 1.0);
            }
            for o in s.objects.iter().filter(|o| o.role == Role::Distractor) {
                assert_ne!(o.color.name, t.color.name);
            }
        }
    }

    #[test]
    fn unknown_task_is_rejected() {
        assert!(matches!(
            reset_named(0, DistractionLevel::Clean, "stack"),
            Err(Error::UnknownTask(_))
        ));
    }

    #[test]
    fn zero_action_leaves_scene_unchanged() {
        let s = reset(1, DistractionLevel::Severe, TaskId::Place);
        let (n, done) = step(&s, [0.0, 0.0, 0.0]).unwrap();
        assert_eq!(n, s);
        assert!(!done);
    }

    #[test]
    fn closing_over_target_grasps_it() {
        let mut s = reset(2, DistractionLevel::Clean, TaskId::Place);
        s.robot.gripper = s.target().center;
        let (n, _) = step(&s, [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(n.robot.held, Some(s.target().id));
        assert!(!n.robot.open);
    }

    #[test]
    fn non_finite_action_is_an_error() {
        let s = reset(2, DistractionLevel::Clean, TaskId::Place);
        assert!(step(&s, [f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn movement_is_clamped() {
        let s = reset(4, DistractionLevel::Clean, TaskId::Place);
        let (n, _) = step(&s, [1.0, -1.0, 0.0]).unwrap();
        let d = (n.robot.gripper.0 - s.robot.gripper.0, n.robot.gripper.1 - s.robot.gripper.1);
        assert!(d.0 <= MAX_STEP + 1e-12 && d.1 >= -MAX_STEP - 1e-12);
    }

    #[test]
    fn color_shift_uses_unseen_palette() {
        for seed in 0..50 {
            let s = reset_shifted(seed, DistractionLevel::Mild, TaskId::Place, ObjectShift::Color);
            assert!(UNSEEN_PALETTE.iter().any(|c| c.name == s.target().color.name));
        }
    }
}
