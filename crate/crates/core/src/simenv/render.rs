use std::collections::BTreeSet;

use crate::error::Result;
use crate::nncore::Tensor;
use crate::simenv::scene::{Object, Scene, BACKGROUND};

/// Raster geometry: low-res side `lr_side`, high-res side `factor * lr_side`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RasterSpec {
    pub lr_side: usize,
    pub factor: usize,
}

impl RasterSpec {
    pub fn hr_side(&self) -> usize {
        self.lr_side * self.factor
    }
}

impl Default for RasterSpec {
    fn default() -> Self {
        Self { lr_side: 32, factor: 2 }
    }
}

/// Paired rasters (`[side, side, 3]`, row-major, RGB in `[0, 1]`) plus
/// proprioception `(x, y, open)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub o_hr: Tensor<f32>,
    pub o_lr: Tensor<f32>,
    pub p: [f32; 3],
}

/// Pixel `(i, j)` of a `side` raster covers `y in [i/side, (i+1)/side)` and
/// `x in [j/side, (j+1)/side)`; it takes the color of the last drawn object
/// containing its center.
fn rasterize<'a>(objects: impl Iterator<Item = &'a Object>, side: usize, bg: [f32; 3]) -> Tensor<f32> {
    let mut data: Vec<f32> = (0..side * side).flat_map(|_| bg).collect();
    for o in objects {
        let lo_j = (((o.center.0 - o.half) * side as f64).floor().max(0.0)) as usize;
        let hi_j = (((o.center.0 + o.half) * side as f64).ceil() as usize).min(side);
        let lo_i = (((o.center.1 - o.half) * side as f64).floor().max(0.0)) as usize;
        let hi_i = (((o.center.1 + o.half) * side as f64).ceil() as usize).min(side);
        for i in lo_i..hi_i {
            let y = (i as f64 + 0.5) / side as f64;
            for j in lo_j..hi_j {
                let x = (j as f64 + 0.5) / side as f64;
                if o.contains(x, y) {
                    data[(i * side + j) * 3..][..3].copy_from_slice(&o.color.rgb);
                }
            }
        }
    }
    Tensor::new(&[side, side, 3], data).unwrap()
}

/// Exact `factor x factor` block mean of an RGB raster.
pub fn block_mean(img: &Tensor<f32>, factor: usize) -> Tensor<f32> {
    let side = img.shape()[0];
    let lo = side / factor;
    let inv = 1.0 / (factor * factor) as f32;
    let src = img.data();
    let mut out = vec![0f32; lo * lo * 3];
    for i in 0..lo {
        for j in 0..lo {
            for c in 0..3 {
                let mut acc = 0f32;
                for di in 0..factor {
                    for dj in 0..factor {
                        acc += src[((i * factor + di) * side + j * factor + dj) * 3 + c];
                    }
                }
                out[(i * lo + j) * 3 + c] = acc * inv;
            }
        }
    }
    Tensor::new(&[lo, lo, 3], out).unwrap()
}

/// Draw order: the zone first, then loose blocks, then the held block.
fn draw_order(scene: &Scene) -> Vec<&Object> {
    let held = scene.robot.held;
    let mut v: Vec<&Object> = scene.objects.iter().filter(|o| Some(o.id) != held).collect();
    v.sort_by_key(|o| o.role != crate::simenv::scene::Role::Receptacle);
    v.extend(scene.objects.iter().filter(|o| Some(o.id) == held));
    v
}

pub fn render(scene: &Scene, spec: RasterSpec) -> Observation {
    let o_hr = rasterize(draw_order(scene).into_iter(), spec.hr_side(), BACKGROUND);
    let o_lr = block_mean(&o_hr, spec.factor);
    Observation {
        o_hr,
        o_lr,
        p: scene.proprio(),
    }
}

/// Oracle semantic mask: relevant objects keep their color on black, drawn at
/// high resolution and block-averaged to the low-res side.
pub fn render_mask(scene: &Scene, relevant: &BTreeSet<usize>, spec: RasterSpec) -> Result<Tensor<f32>> {
    for &id in relevant {
        scene.object(id)?;
    }
    let hr = rasterize(
        draw_order(scene).into_iter().filter(|o| relevant.contains(&o.id)),
        spec.hr_side(),
        [0.0; 3],
    );
    Ok(block_mean(&hr, spec.factor))
}

/// Provider of semantic masks; the oracle is the only implementation here.
pub trait MaskProvider {
    fn mask(&self, scene: &Scene, relevant: &BTreeSet<usize>) -> Result<Tensor<f32>>;
}

#[derive(Debug, Clone, Copy)]
pub struct OracleMask(pub RasterSpec);

impl MaskProvider for OracleMask {
    fn mask(&self, scene: &Scene, relevant: &BTreeSet<usize>) -> Result<Tensor<f32>> {
        render_mask(scene, relevant, self.0)
    }
}

/// All-black mask used when the semantic stream is ablated.
pub fn blank_mask(spec: RasterSpec) -> Tensor<f32> {
    Tensor::zeros(&[spec.lr_side, spec.lr_side, 3])
}

/// Direct low-res rasterization of `relevant` objects, used by mask tests.
pub fn rasterize_direct(scene: &Scene, relevant: &BTreeSet<usize>, side: usize) -> Result<Tensor<f32>> {
    for &id in relevant {
        scene.object(id)?;
    }
    Ok(rasterize(
        draw_order(scene).into_iter().filter(|o| relevant.contains(&o.id)),
        side,
        [0.0; 3],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::scene::{reset, reset_shifted, DistractionLevel, ObjectShift, Role, TaskId};

    const SPEC: RasterSpec = RasterSpec { lr_side: 32, factor: 2 };

    #[test]
    fn empty_scene_is_uniform() {
        let obs = render(&Scene::empty(TaskId::Place), SPEC);
        for px in obs.o_hr.data().chunks(3).chain(obs.o_lr.data().chunks(3)) {
            assert_eq!(px, BACKGROUND);
        }
    }

    #[test]
    fn low_res_is_block_mean() {
        let s = reset(11, DistractionLevel::Severe, TaskId::Place);
        let obs = render(&s, SPEC);
        let hr = obs.o_hr.data();
        for i in 0..32 {
            for j in 0..32 {
                for c in 0..3 {
                    let m = (hr[((2 * i) * 64 + 2 * j) * 3 + c]
                        + hr[((2 * i) * 64 + 2 * j + 1) * 3 + c]
                        + hr[((2 * i + 1) * 64 + 2 * j) * 3 + c]
                        + hr[((2 * i + 1) * 64 + 2 * j + 1) * 3 + c])
                        * 0.25;
                    assert_eq!(obs.o_lr.data()[(i * 32 + j) * 3 + c], m);
                }
            }
        }
    }

    #[test]
    fn render_is_bit_identical() {
        let s = reset(5, DistractionLevel::Mild, TaskId::Place);
        let (a, b) = (render(&s, SPEC), render(&s, SPEC));
        assert!(a.o_hr.data().iter().zip(b.o_hr.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a, b);
    }

    #[test]
    fn empty_relevant_set_gives_black_mask() {
        let s = reset(5, DistractionLevel::Mild, TaskId::Place);
        let m = render_mask(&s, &BTreeSet::new(), SPEC).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_object_in_mask_request() {
        let s = reset(5, DistractionLevel::Clean, TaskId::Place);
        assert!(render_mask(&s, &BTreeSet::from([99]), SPEC).is_err());
    }

    #[test]
    fn full_mask_matches_direct_rasterization_in_interiors() {
        for seed in 0..20 {
            let s = reset(seed, DistractionLevel::Severe, TaskId::Place);
            let all: BTreeSet<usize> = s.objects.iter().map(|o| o.id).collect();
            let m = render_mask(&s, &all, SPEC).unwrap();
            let d = rasterize_direct(&s, &all, 32).unwrap();
            let px = |t: &Tensor<f32>, i: usize, j: usize| -> [f32; 3] {
                let k = (i * 32 + j) * 3;
                [t.data()[k], t.data()[k + 1], t.data()[k + 2]]
            };
            for i in 1..31 {
                for j in 1..31 {
                    let c = px(&d, i, j);
                    let interior = (0..3).all(|di| (0..3).all(|dj| px(&d, i + di - 1, j + dj - 1) == c));
                    if interior {
                        let got = px(&m, i, j);
                        for k in 0..3 {
                            assert!((got[k] - c[k]).abs() <= 1.0 / 255.0, "seed {seed} ({i},{j})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn distractors_never_in_task_mask() {
        for seed in 0..50 {
            let s = reset(seed, DistractionLevel::Severe, TaskId::Place);
            let rel: BTreeSet<usize> = s
                .objects
                .iter()
                .filter(|o| o.role != Role::Distractor)
                .map(|o| o.id)
                .collect();
            let m = render_mask(&s, &rel, SPEC).unwrap();
            // Soundness: every lit pixel is within one low-res pixel of a relevant footprint.
            let pad = 1.0 / 32.0;
            for i in 0..32 {
                for j in 0..32 {
                    if m.data()[(i * 32 + j) * 3..][..3].iter().any(|&v| v != 0.0) {
                        let (x, y) = ((j as f64 + 0.5) / 32.0, (i as f64 + 0.5) / 32.0);
                        let near = rel.iter().any(|&id| {
                            let o = s.object(id).unwrap();
                            (x - o.center.0).abs() <= o.half + pad && (y - o.center.1).abs() <= o.half + pad
                        });
                        assert!(near, "seed {seed} pixel ({i},{j})");
                    }
                }
            }
        }
    }

    #[test]
    fn shifted_target_is_segmented() {
        for shift in [ObjectShift::Shape, ObjectShift::Size, ObjectShift::Color] {
            let s = reset_shifted(9, DistractionLevel::Mild, TaskId::Place, shift);
            let t = s.target();
            let m = render_mask(&s, &BTreeSet::from([t.id]), SPEC).unwrap();
            let (i, j) = ((t.center.1 * 32.0) as usize, (t.center.0 * 32.0) as usize);
            assert!(m.data()[(i * 32 + j) * 3..][..3].iter().any(|&v| v > 0.0), "{shift:?}");
        }
    }
}
