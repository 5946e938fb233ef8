//! Deployed controllers and receding-horizon rollouts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{initial_noise, sample_ctm, sample_ddim, sample_ddpm, sample_edm_heun, Counted, Strategy};
use crate::error::{Error, Result};
use crate::nncore::Tensor;
use crate::pipeline::model::{Policy, PolicyRole};
use crate::simenv::scene::ObjectShift;
use crate::simenv::{
    expert_action, render, reset_shifted, step, DistractionLevel, KeywordResolver, MaskProvider, OracleMask, Resolver,
    Scene, TaskId,
};

/// Anything that proposes action chunks for a batch of scenes.
pub trait Controller {
    fn act(&mut self, scenes: &[&Scene]) -> Result<Vec<Vec<[f64; 3]>>>;
}

/// The scripted expert, one action per call.
pub struct ExpertController;

impl Controller for ExpertController {
    fn act(&mut self, scenes: &[&Scene]) -> Result<Vec<Vec<[f64; 3]>>> {
        Ok(scenes.iter().map(|s| vec![expert_action(s)]).collect())
    }
}

/// Uniform random motions and grip commands.
pub struct RandomController(pub ChaCha8Rng);

impl Controller for RandomController {
    fn act(&mut self, scenes: &[&Scene]) -> Result<Vec<Vec<[f64; 3]>>> {
        Ok(scenes
            .iter()
            .map(|_| {
                vec![[
                    self.0.random_range(-0.08..=0.08),
                    self.0.random_range(-0.08..=0.08),
                    self.0.random_range(0.0..=1.0),
                ]]
            })
            .collect())
    }
}

/// A trained policy with its instruction resolver and mask source.
pub struct Agent<'a> {
    pub policy: &'a Policy,
    pub sampler: Strategy,
    pub steps: usize,
    pub resolver: Box<dyn Resolver + 'a>,
    pub masks: Box<dyn MaskProvider + 'a>,
    pub rng: ChaCha8Rng,
    /// Action-head network evaluations so far.
    pub forward_calls: usize,
}

impl<'a> Agent<'a> {
    pub fn new(policy: &'a Policy, sampler: Strategy, steps: usize, seed: u64) -> Result<Self> {
        if sampler == Strategy::Ctm && policy.role != PolicyRole::Student {
            return Err(Error::Protocol("the consistency sampler needs a student checkpoint".into()));
        }
        if steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        Ok(Self {
            policy,
            sampler,
            steps,
            resolver: Box::new(KeywordResolver),
            masks: Box::new(OracleMask(policy.cfg.raster())),
            rng: ChaCha8Rng::seed_from_u64(seed),
            forward_calls: 0,
        })
    }

    /// Perception inputs for `scenes`, each following its own instruction.
    pub fn observe(&self, scenes: &[&Scene], instructions: &[&str]) -> Result<[Tensor<f32>; 4]> {
        let raster = self.policy.cfg.raster();
        let (mut lr, mut hr, mut mk, mut pr) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (s, text) in scenes.iter().zip(instructions) {
            let relevant = self.resolver.resolve(text, s)?;
            let mask = self.masks.mask(s, &relevant)?;
            let obs = render(s, raster);
            let add1 = |t: Tensor<f32>| {
                let mut shape = vec![1];
                shape.extend_from_slice(t.shape());
                t.reshape(&shape)
            };
            lr.push(add1(obs.o_lr)?);
            hr.push(add1(obs.o_hr)?);
            mk.push(add1(mask)?);
            pr.extend(obs.p);
        }
        Ok([
            Tensor::stack_outer(&lr)?,
            Tensor::stack_outer(&hr)?,
            Tensor::stack_outer(&mk)?,
            Tensor::new(&[scenes.len(), 3], pr)?,
        ])
    }

    /// Denormalized chunks `[B][T_h]` for explicit instructions.
    pub fn act_with(&mut self, scenes: &[&Scene], instructions: &[&str]) -> Result<Vec<Vec<[f64; 3]>>> {
        let pol = self.policy;
        let [lr, hr, mask, proprio] = self.observe(scenes, instructions)?;
        let f_sem = pol.perceive_with(&pol.store, &lr, &hr, &mask)?;
        let h = pol.cfg.head;
        let x = initial_noise::<f32, _>(&[scenes.len(), h.horizon, h.action_dim], &pol.cfg.schedule, &mut self.rng);
        let frozen = pol.frozen(&pol.store, f_sem, proprio);
        let counted = Counted::new(&frozen);
        let sched = &pol.cfg.schedule;
        let out = match self.sampler {
            Strategy::Edm => sample_edm_heun(&counted, &x, sched, self.steps)?,
            Strategy::Ddim => sample_ddim(&counted, &x, sched, self.steps)?,
            Strategy::Ddpm => sample_ddpm(&counted, &x, sched, self.steps, &mut self.rng)?,
            Strategy::Ctm => sample_ctm(&counted, &x, sched, self.steps)?,
        };
        self.forward_calls += counted.calls();
        let per = h.horizon * h.action_dim;
        Ok(out
            .data()
            .chunks(per)
            .map(|c| {
                c.chunks(3)
                    .map(|a| pol.stats.denormalize([a[0], a[1], a[2]]).map(|v| v as f64))
                    .collect()
            })
            .collect())
    }
}

impl Controller for Agent<'_> {
    fn act(&mut self, scenes: &[&Scene]) -> Result<Vec<Vec<[f64; 3]>>> {
        let texts: Vec<&str> = scenes.iter().map(|s| s.instruction.as_str()).collect();
        self.act_with(scenes, &texts)
    }
}

/// Rollout settings shared by every episode of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSpec {
    pub level: DistractionLevel,
    pub task: TaskId,
    pub shift: ObjectShift,
    pub horizon_cap: usize,
    /// Actions executed from each chunk before re-observing.
    pub replan: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
}

/// Run one episode per seed in lockstep; every live episode is re-planned
/// after `replan` executed actions.
pub fn rollout_batch(ctrl: &mut dyn Controller, seeds: &[u64], spec: RolloutSpec) -> Result<Vec<RolloutResult>> {
    let mut scenes: Vec<Scene> = seeds
        .iter()
        .map(|&s| reset_shifted(s, spec.level, spec.task, spec.shift))
        .collect();
    let mut done: Vec<Option<RolloutResult>> = vec![None; seeds.len()];
    let mut taken = vec![0usize; seeds.len()];
    while done.iter().any(Option::is_none) {
        let live: Vec<usize> = (0..seeds.len()).filter(|&i| done[i].is_none()).collect();
        let refs: Vec<&Scene> = live.iter().map(|&i| &scenes[i]).collect();
        let chunks = ctrl.act(&refs)?;
        for (&i, chunk) in live.iter().zip(chunks) {
            for a in chunk.into_iter().take(spec.replan) {
                let a = a.map(|v| if v.is_finite() { v } else { 0.0 });
                let (next, _) = step(&scenes[i], a)?;
                scenes[i] = next;
                taken[i] += 1;
                let success = scenes[i].is_success();
                if success || taken[i] >= spec.horizon_cap {
                    done[i] = Some(RolloutResult {
                        seed: seeds[i],
                        success,
                        steps: taken[i],
                    });
                    break;
                }
            }
        }
    }
    Ok(done.into_iter().map(Option::unwrap).collect())
}
