//! A policy: perception stack plus action head over one parameter store.

use crate::actionhead::{ActionHead, Conditioned, FrozenHead};
use crate::error::Result;
use crate::nncore::{Bound, Graph, ParamId, ParamStore, Tensor};
use crate::perception::Perception;
use crate::pipeline::config::TrainConfig;
use crate::pipeline::data::{ActionStats, Batch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyRole {
    Teacher,
    Student,
}

impl PolicyRole {
    pub fn code(self) -> u8 {
        match self {
            Self::Teacher => 0,
            Self::Student => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Self::Teacher),
            1 => Some(Self::Student),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub cfg: TrainConfig,
    pub role: PolicyRole,
    pub perception: Perception,
    pub head: ActionHead,
    pub store: ParamStore<f32>,
    pub stats: ActionStats,
    /// Optimizer steps taken on this lineage.
    pub step: u64,
}

impl Policy {
    /// Freshly initialized parameters seeded from `cfg.seed`.
    pub fn new(cfg: &TrainConfig, role: PolicyRole) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let perception = Perception::new(&mut store, cfg.perception, cfg.toggles)?;
        let head = ActionHead::new(&mut store, cfg.head, role == PolicyRole::Student)?;
        Ok(Self {
            cfg: cfg.clone(),
            role,
            perception,
            head,
            store,
            stats: ActionStats::identity(cfg.schedule.sigma_data as f32),
            step: 0,
        })
    }

    /// A student whose shared parameters are copied from `teacher`.
    pub fn student_from(teacher: &Policy) -> Result<Self> {
        let mut s = Self::new(&teacher.cfg, PolicyRole::Student)?;
        s.store.copy_matching(&teacher.store);
        s.stats = teacher.stats;
        s.step = 0;
        Ok(s)
    }

    pub fn perception_ids(&self) -> Vec<ParamId> {
        self.perception.params()
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        self.head.params()
    }

    /// `F_sem` for a batch of rasters, computed without gradients.
    pub fn perceive_with(
        &self,
        store: &ParamStore<f32>,
        o_lr: &Tensor<f32>,
        o_hr: &Tensor<f32>,
        mask: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = store.bind_only(&mut g, &self.perception_ids(), false);
        let (a, b, c) = (g.constant(o_lr.clone()), g.constant(o_hr.clone()), g.constant(mask.clone()));
        let out = self.perception.forward(&mut g, &p, a, b, c)?;
        Ok(g.value(out.f_sem).clone())
    }

    pub fn perceive(&self, batch: &Batch) -> Result<Tensor<f32>> {
        self.perceive_with(&self.store, &batch.o_lr, &batch.o_hr, &batch.mask)
    }

    /// The action head frozen on precomputed conditions.
    pub fn frozen<'a>(&'a self, store: &'a ParamStore<f32>, f_sem: Tensor<f32>, proprio: Tensor<f32>) -> FrozenHead<'a, f32> {
        FrozenHead {
            head: &self.head,
            store,
            sched: self.cfg.schedule,
            f_sem,
            proprio,
        }
    }

    /// The head bound into a training graph.
    pub fn conditioned<'a>(&'a self, params: &'a Bound, f_sem: crate::nncore::Var, proprio: crate::nncore::Var) -> Conditioned<'a> {
        Conditioned {
            head: &self.head,
            params,
            sched: self.cfg.schedule,
            f_sem,
            proprio,
        }
    }
}
