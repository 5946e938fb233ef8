//! Teacher training on the score-matching objective and student
//! distillation on the joint consistency objective.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::loss::{ctm_loss, draw_dsm_sample, draw_times, dsm_loss, dsm_loss_at, joint_graph, trajectory_pair};
use crate::diffusion::{initial_noise, sample_ctm, sample_edm_heun};
use crate::error::{Error, Result};
use crate::nncore::optim::Adam;
use crate::nncore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::pipeline::config::TrainConfig;
use crate::pipeline::data::{Batch, TrainData};
use crate::pipeline::model::{Policy, PolicyRole};

pub const LOG_HEADER: &str = "step,dsm,ctm,total,lr,grad_norm,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub dsm: f64,
    pub ctm: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.8e},{:.8e},{:.8e},{:.6e},{:.6e},{:.3}",
            self.step, self.dsm, self.ctm, self.total, self.lr, self.grad_norm, self.wall_ms
        )
    }
}

/// Append-only CSV training log; a sink without a file only keeps rows.
#[derive(Debug, Default)]
pub struct CsvLog {
    file: Option<BufWriter<File>>,
    pub rows: Vec<LogRow>,
}

impl CsvLog {
    pub fn memory() -> Self {
        Self::default()
    }

    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "{LOG_HEADER}")?;
        Ok(Self {
            file: Some(f),
            rows: Vec::new(),
        })
    }

    pub fn append(&mut self, row: LogRow) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", row.csv())?;
            f.flush()?;
        }
        self.rows.push(row);
        Ok(())
    }
}

fn draw_indices(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..n)).collect()
}

fn ensure_finite(v: f64, what: &str, step: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} at step {step}")))
    }
}

/// Perception and head trained jointly on the score-matching loss.
pub struct TeacherTrainer {
    pub policy: Policy,
    opt: Adam,
    rng: ChaCha8Rng,
    start: Instant,
}

impl TeacherTrainer {
    pub fn new(cfg: &TrainConfig, data: &TrainData) -> Result<Self> {
        let mut policy = Policy::new(cfg, PolicyRole::Teacher)?;
        policy.stats = data.stats;
        let t = cfg.teacher;
        Ok(Self {
            policy,
            opt: Adam::new(t.lr, t.steps, Some(t.clip)),
            rng: ChaCha8Rng::seed_from_u64(t.seed),
            start: Instant::now(),
        })
    }

    fn graph_loss(&self, g: &mut Graph<f32>, batch: &Batch, rng: &mut ChaCha8Rng, trainable: bool) -> Result<(crate::nncore::Bound, Var)> {
        let pol = &self.policy;
        let p = pol.store.bind(g, trainable);
        let (lr, hr, mask) = (
            g.constant(batch.o_lr.clone()),
            g.constant(batch.o_hr.clone()),
            g.constant(batch.mask.clone()),
        );
        let out = pol.perception.forward(g, &p, lr, hr, mask)?;
        let proprio = g.constant(batch.proprio.clone());
        let net = pol.conditioned(&p, out.f_sem, proprio);
        let loss = dsm_loss(g, &net, &batch.a0, pol.cfg.loss.huber_c, false, rng)?;
        Ok((p, loss))
    }

    /// Score-matching loss on `batch` with noise drawn from `seed`, no update.
    pub fn eval_loss(&self, batch: &Batch, seed: u64) -> Result<f64> {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, loss) = self.graph_loss(&mut g, batch, &mut rng, false)?;
        Ok(g.value(loss).item() as f64)
    }

    pub fn step(&mut self, data: &TrainData) -> Result<LogRow> {
        let cfg = &self.policy.cfg;
        let idx = draw_indices(&mut self.rng, data.len(), cfg.teacher.batch);
        let batch = data.batch(&idx)?;
        let mut g = Graph::new();
        let mut rng = self.rng.clone();
        let (p, loss) = self.graph_loss(&mut g, &batch, &mut rng, true)?;
        self.rng = rng;
        let value = g.value(loss).item() as f64;
        ensure_finite(value, "teacher loss", self.policy.step)?;
        let mut grads = g.backward(loss);
        let grads = self.policy.store.collect_grads(&p, &mut grads);
        let lr = self.opt.current_lr();
        let norm = self.opt.step(&mut self.policy.store, &grads, None);
        ensure_finite(norm, "teacher gradient norm", self.policy.step)?;
        let row = LogRow {
            step: self.policy.step,
            dsm: value,
            ctm: 0.0,
            total: value,
            lr,
            grad_norm: norm,
            wall_ms: self.start.elapsed().as_secs_f64() * 1e3,
        };
        self.policy.step += 1;
        Ok(row)
    }

    pub fn finish(self) -> Policy {
        self.policy
    }
}

pub fn train_teacher(cfg: &TrainConfig, data: &TrainData, log: &mut CsvLog) -> Result<Policy> {
    let mut tr = TeacherTrainer::new(cfg, data)?;
    for _ in 0..cfg.teacher.steps {
        let row = tr.step(data)?;
        log.append(row)?;
    }
    Ok(tr.finish())
}

/// `F_sem` of every training sample under `store`, in sample order.
pub fn perception_cache(policy: &Policy, store: &ParamStore<f32>, data: &TrainData) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(64) {
        let b = data.batch(idx)?;
        parts.push(policy.perceive_with(store, &b.o_lr, &b.o_hr, &b.mask)?);
    }
    Tensor::stack_outer(&parts)
}

fn gather_outer(t: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let parts: Vec<Tensor<f32>> = idx.iter().map(|&i| t.slice_outer(i, i + 1)).collect();
    Tensor::stack_outer(&parts)
}

/// Student distillation against a frozen teacher with an EMA target.
pub struct Distiller<'t> {
    pub teacher: &'t Policy,
    pub student: Policy,
    opt: Adam,
    rng: ChaCha8Rng,
    grid: Vec<f64>,
    /// Teacher perception tokens per training sample.
    cache: Tensor<f32>,
    trainable: Vec<ParamId>,
    start: Instant,
}

impl<'t> Distiller<'t> {
    pub fn new(teacher: &'t Policy, data: &TrainData) -> Result<Self> {
        if teacher.role != PolicyRole::Teacher {
            return Err(Error::Protocol("distillation needs a teacher checkpoint".into()));
        }
        let mut student = Policy::student_from(teacher)?;
        student.store.init_ema();
        let s = teacher.cfg.student;
        let mut trainable = student.head_ids();
        if !s.freeze_perception {
            trainable.extend(student.perception_ids());
        }
        Ok(Self {
            cache: perception_cache(teacher, &teacher.store, data)?,
            grid: teacher.cfg.schedule.grid(s.grid_steps)?,
            opt: Adam::new(s.lr, s.steps, Some(s.clip)),
            rng: ChaCha8Rng::seed_from_u64(s.seed),
            teacher,
            student,
            trainable,
            start: Instant::now(),
        })
    }

    pub fn step(&mut self, data: &TrainData) -> Result<LogRow> {
        let cfg = self.teacher.cfg.clone();
        let sc = cfg.student;
        let c = cfg.loss.huber_c;
        let idx = draw_indices(&mut self.rng, data.len(), sc.batch);
        let batch = data.batch(&idx)?;
        let f_teacher = gather_outer(&self.cache, &idx)?;

        let eps = Tensor::<f32>::randn(batch.a0.shape(), 1.0, &mut self.rng);
        let (t1, t2, s) = draw_times(&self.grid, idx.len(), &mut self.rng)?;
        let frozen = self.teacher.frozen(&self.teacher.store, f_teacher.clone(), batch.proprio.clone());
        let pair = trajectory_pair(&batch.a0, &eps, &t1, &t2, &frozen)?;

        let ema = self.student.store.ema_store().expect("EMA initialized");
        let st = &self.student;
        let mut g = Graph::new();
        let head = st.head_ids();
        let (online, f_online, f_target) = if sc.freeze_perception {
            let p = st.store.bind_only(&mut g, &head, true);
            let f = g.constant(f_teacher);
            (p, f, f)
        } else {
            let p = st.store.bind_only(&mut g, &self.trainable, true);
            let (lr, hr, mask) = (
                g.constant(batch.o_lr.clone()),
                g.constant(batch.o_hr.clone()),
                g.constant(batch.mask.clone()),
            );
            let f = st.perception.forward(&mut g, &p, lr, hr, mask)?.f_sem;
            let ft = g.constant(st.perceive_with(&ema, &batch.o_lr, &batch.o_hr, &batch.mask)?);
            (p, f, ft)
        };
        let target = ema.bind_only(&mut g, &head, false);
        let proprio = g.constant(batch.proprio.clone());
        let on = st.conditioned(&online, f_online, proprio);
        let tg = st.conditioned(&target, f_target, proprio);
        let ctm = ctm_loss(&mut g, &on, &tg, &pair, &s, c)?;
        let dsm = dsm_loss(&mut g, &on, &batch.a0, c, true, &mut self.rng)?;
        let total = joint_graph(&mut g, dsm, ctm, &cfg.loss);
        let (dv, cv, tv) = (
            g.value(dsm).item() as f64,
            g.value(ctm).item() as f64,
            g.value(total).item() as f64,
        );
        ensure_finite(tv, "distillation loss", self.student.step)?;
        let mut grads = g.backward(total);
        let grads = self.student.store.collect_grads(&online, &mut grads);
        let lr = self.opt.current_lr();
        let norm = self.opt.step(&mut self.student.store, &grads, Some(&self.trainable));
        ensure_finite(norm, "distillation gradient norm", self.student.step)?;
        self.student.store.update_ema(sc.ema_decay);
        let row = LogRow {
            step: self.student.step,
            dsm: dv,
            ctm: cv,
            total: tv,
            lr,
            grad_norm: norm,
            wall_ms: self.start.elapsed().as_secs_f64() * 1e3,
        };
        self.student.step += 1;
        Ok(row)
    }

    pub fn finish(self) -> Policy {
        self.student
    }
}

pub fn distill_student(teacher: &Policy, data: &TrainData, log: &mut CsvLog) -> Result<Policy> {
    let mut d = Distiller::new(teacher, data)?;
    for _ in 0..teacher.cfg.student.steps {
        let row = d.step(data)?;
        log.append(row)?;
    }
    Ok(d.finish())
}

/// Relative L2 gap between the student's one-jump endpoint and the teacher's
/// `teacher_steps`-step Heun endpoint, from shared noise, per observation.
/// Both are measured in the normalized action space.
pub fn fidelity(teacher: &Policy, student: &Policy, batch: &Batch, teacher_steps: usize, seed: u64) -> Result<Vec<f64>> {
    let f_t = teacher.perceive(batch)?;
    let f_s = student.perceive(batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = initial_noise::<f32, _>(batch.a0.shape(), &teacher.cfg.schedule, &mut rng);
    let t = teacher.frozen(&teacher.store, f_t, batch.proprio.clone());
    let s = student.frozen(&student.store, f_s, batch.proprio.clone());
    let reference = sample_edm_heun(&t, &x, &teacher.cfg.schedule, teacher_steps)?;
    let jump = sample_ctm(&s, &x, &student.cfg.schedule, 1)?;
    let inner = reference.numel() / reference.shape()[0];
    Ok(reference
        .data()
        .chunks(inner)
        .zip(jump.data().chunks(inner))
        .map(|(r, j)| {
            let num: f64 = r.iter().zip(j).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
            let den: f64 = r.iter().map(|a| (*a as f64).powi(2)).sum();
            (num / den.max(1e-12)).sqrt()
        })
        .collect())
}

/// Expected first-step loss of a zero-initialized teacher on `batch` with
/// noise drawn from `seed`: the denoiser output is exactly `c_skip * a_t`.
pub fn zero_init_loss(cfg: &TrainConfig, batch: &Batch, seed: u64) -> Result<f64> {
    struct Skip(crate::diffusion::NoiseSchedule);
    impl crate::diffusion::GraphDenoiser<f32> for Skip {
        fn schedule(&self) -> &crate::diffusion::NoiseSchedule {
            &self.0
        }
        fn raw(&self, g: &mut Graph<f32>, x_in: Var, _: &[f64], _: Option<&[f64]>) -> Result<Var> {
            let z = Tensor::zeros(g.shape(x_in));
            Ok(g.constant(z))
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = draw_dsm_sample(&batch.a0, &cfg.schedule, &mut rng);
    let mut g = Graph::new();
    let loss = dsm_loss_at(&mut g, &Skip(cfg.schedule), &batch.a0, &sample, cfg.loss.huber_c, false)?;
    Ok(g.value(loss).item() as f64)
}
