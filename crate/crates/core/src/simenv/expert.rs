use crate::error::{Error, Result};
use crate::simenv::scene::{step, Scene, TaskId, MAX_STEP};

/// Default episode length cap.
pub const HORIZON_CAP: usize = 60;

fn toward(from: (f64, f64), to: (f64, f64)) -> (f64, f64, bool) {
    let (dx, dy) = (to.0 - from.0, to.1 - from.1);
    let arrive = dx.abs() <= MAX_STEP && dy.abs() <= MAX_STEP;
    (dx.clamp(-MAX_STEP, MAX_STEP), dy.clamp(-MAX_STEP, MAX_STEP), arrive)
}

/// Waypoint controller: approach the target, grasp, carry to the zone, release.
/// Grasp and release happen on the step that reaches the waypoint.
pub fn expert_action(scene: &Scene) -> [f64; 3] {
    let t = scene.target();
    let r = &scene.robot;
    if r.held == Some(t.id) {
        return match scene.task {
            TaskId::Pick => [0.0, 0.0, 1.0],
            TaskId::Place => {
                let zone = scene.receptacle().expect("place scene without zone");
                let (dx, dy, arrive) = toward(r.gripper, zone.center);
                [dx, dy, if arrive { 0.0 } else { 1.0 }]
            }
        };
    }
    if !r.open {
        return [0.0, 0.0, 0.0];
    }
    let (dx, dy, arrive) = toward(r.gripper, t.center);
    [dx, dy, if arrive { 1.0 } else { 0.0 }]
}

/// Roll the expert until success. Returns the visited scenes (before each
/// action) and the actions; errors if `horizon` steps do not suffice.
pub fn run_expert(scene: &Scene, horizon: usize) -> Result<(Vec<Scene>, Vec<[f64; 3]>)> {
    let mut cur = scene.clone();
    let (mut scenes, mut actions) = (Vec::new(), Vec::new());
    for _ in 0..horizon {
        let a = expert_action(&cur);
        let (next, done) = step(&cur, a)?;
        scenes.push(cur);
        actions.push(a);
        cur = next;
        if done {
            return Ok((scenes, actions));
        }
    }
    Err(Error::HorizonExhausted(horizon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::scene::{reset, DistractionLevel};

    #[test]
    fn expert_solves_every_level() {
        for level in DistractionLevel::ALL {
            for seed in 0..100 {
                for task in [TaskId::Place, TaskId::Pick] {
                    let s = reset(seed, level, task);
                    let (_, actions) = run_expert(&s, HORIZON_CAP)
                        .unwrap_or_else(|e| panic!("{level:?} seed {seed}: {e}"));
                    for a in actions {
                        assert!(a[0].abs() <= MAX_STEP && a[1].abs() <= MAX_STEP);
                        assert!((0.0..=1.0).contains(&a[2]));
                    }
                }
            }
        }
    }

    #[test]
    fn at_target_grasps_immediately() {
        let mut s = reset(3, DistractionLevel::Clean, TaskId::Place);
        s.robot.gripper = s.target().center;
        assert_eq!(expert_action(&s), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn tiny_horizon_is_reported() {
        let s = reset(3, DistractionLevel::Clean, TaskId::Place);
        assert!(matches!(run_expert(&s, 1), Err(Error::HorizonExhausted(1))));
    }
}
