//! Demonstrations flattened into (observation, mask, proprioception, action
//! chunk) training samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::Tensor;
use crate::simenv::dataset::DemoEpisode;
use crate::simenv::{KeywordResolver, MaskProvider, OracleMask, RasterSpec, Resolver};

/// Per-dimension affine map between simulator actions and the network's
/// action space, where each dimension has standard deviation `sigma_data`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub scale: f32,
}

impl ActionStats {
    pub fn identity(scale: f32) -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
            scale,
        }
    }

    pub fn fit(actions: &[[f32; 3]], scale: f32) -> Self {
        let n = actions.len().max(1) as f64;
        let mut mean = [0.0f32; 3];
        let mut std = [1.0f32; 3];
        for d in 0..3 {
            let m = actions.iter().map(|a| a[d] as f64).sum::<f64>() / n;
            let v = actions.iter().map(|a| (a[d] as f64 - m).powi(2)).sum::<f64>() / n;
            mean[d] = m as f32;
            std[d] = if v.sqrt() > 1e-6 { v.sqrt() as f32 } else { 1.0 };
        }
        Self { mean, std, scale }
    }

    pub fn normalize(&self, a: [f32; 3]) -> [f32; 3] {
        std::array::from_fn(|d| (a[d] - self.mean[d]) / self.std[d] * self.scale)
    }

    pub fn denormalize(&self, a: [f32; 3]) -> [f32; 3] {
        std::array::from_fn(|d| a[d] / self.scale * self.std[d] + self.mean[d])
    }
}

/// Tensors for one batch of samples.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, H, H, 3]`
    pub o_lr: Tensor<f32>,
    /// `[B, H', H', 3]`
    pub o_hr: Tensor<f32>,
    /// `[B, H, H, 3]`
    pub mask: Tensor<f32>,
    /// `[B, 3]`
    pub proprio: Tensor<f32>,
    /// Normalized `[B, T_h, 3]`.
    pub a0: Tensor<f32>,
}

/// Everything the trainers read, held in memory.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub episodes: Vec<DemoEpisode>,
    /// Oracle masks per episode, `[S, H, H, 3]`.
    pub masks: Vec<Tensor<f32>>,
    /// `(episode, step)` of every sample.
    pub samples: Vec<(usize, usize)>,
    pub stats: ActionStats,
    pub horizon: usize,
    pub raster: RasterSpec,
}

impl TrainData {
    /// Build samples with masks from the keyword resolver and oracle rasterizer.
    pub fn new(episodes: Vec<DemoEpisode>, raster: RasterSpec, horizon: usize, sigma_data: f64) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Config("training needs at least one episode".into()));
        }
        let resolver = KeywordResolver;
        let oracle = OracleMask(raster);
        let mut masks = Vec::with_capacity(episodes.len());
        let mut samples = Vec::new();
        let mut actions = Vec::new();
        for (e, ep) in episodes.iter().enumerate() {
            if ep.o_lr.shape()[1] != raster.lr_side || ep.o_hr.shape()[1] != raster.hr_side() {
                return Err(Error::Config(format!(
                    "episode {} was rendered at {} px, config expects {}",
                    ep.seed,
                    ep.o_lr.shape()[1],
                    raster.lr_side
                )));
            }
            let mut frames = Vec::with_capacity(ep.len());
            for k in 0..ep.len() {
                let scene = ep.scene_at(k);
                let relevant = resolver.resolve(&ep.instruction, &scene)?;
                let m = oracle.mask(&scene, &relevant)?;
                let mut shape = vec![1];
                shape.extend_from_slice(m.shape());
                frames.push(m.reshape(&shape)?);
                samples.push((e, k));
                actions.push(ep.action_at(k));
            }
            masks.push(Tensor::stack_outer(&frames)?);
        }
        Ok(Self {
            stats: ActionStats::fit(&actions, sigma_data as f32),
            episodes,
            masks,
            samples,
            horizon,
            raster,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Normalized chunk of `horizon` actions starting at step `k`; steps past
    /// the end repeat a motionless copy of the last action.
    pub fn chunk(&self, e: usize, k: usize) -> Vec<f32> {
        let ep = &self.episodes[e];
        let last = ep.action_at(ep.len() - 1);
        (k..k + self.horizon)
            .flat_map(|i| {
                let a = if i < ep.len() { ep.action_at(i) } else { [0.0, 0.0, last[2]] };
                self.stats.normalize(a)
            })
            .collect()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let frame = |t: &Tensor<f32>, k: usize| t.slice_outer(k, k + 1);
        let mut lr = Vec::with_capacity(idx.len());
        let mut hr = Vec::with_capacity(idx.len());
        let mut mask = Vec::with_capacity(idx.len());
        let mut proprio = Vec::with_capacity(idx.len() * 3);
        let mut a0 = Vec::with_capacity(idx.len() * self.horizon * 3);
        for &i in idx {
            let (e, k) = *self
                .samples
                .get(i)
                .ok_or_else(|| Error::shape(format!("sample {i} of {}", self.samples.len())))?;
            let ep = &self.episodes[e];
            lr.push(frame(&ep.o_lr, k));
            hr.push(frame(&ep.o_hr, k));
            mask.push(frame(&self.masks[e], k));
            proprio.extend_from_slice(&ep.proprio.data()[3 * k..3 * k + 3]);
            a0.extend(self.chunk(e, k));
        }
        Ok(Batch {
            o_lr: Tensor::stack_outer(&lr)?,
            o_hr: Tensor::stack_outer(&hr)?,
            mask: Tensor::stack_outer(&mask)?,
            proprio: Tensor::new(&[idx.len(), 3], proprio)?,
            a0: Tensor::new(&[idx.len(), self.horizon, 3], a0)?,
        })
    }
}
