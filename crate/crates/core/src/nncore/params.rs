use std::collections::HashMap;
use std::ops::Index;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nncore::graph::{Graph, Var};
use crate::nncore::tensor::{Real, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Truncated normal with the given standard deviation.
    Normal(f64),
    Zeros,
    Ones,
}

/// Named, ordered parameter table with optional EMA shadows.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    ema: Option<Vec<Tensor<T>>>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            ema: None,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(value);
        self.index.insert(name.to_string(), id);
        if let Some(ema) = &mut self.ema {
            ema.push(self.tensors[id].clone());
        }
        Ok(ParamId(id))
    }

    /// Register a freshly initialized parameter. Panics on duplicate names,
    /// which only arise from a bug in model construction.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let value = match init {
            Init::Normal(std) => Tensor::trunc_normal(shape, std, &mut self.rng),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
        };
        self.insert(name, value).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same names and order, values converted to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
            ema: self
                .ema
                .as_ref()
                .map(|e| e.iter().map(Tensor::cast).collect()),
            seed: self.seed,
            rng: self.rng.clone(),
        }
    }

    /// Copy every parameter whose name exists in `other` with a matching shape.
    /// Returns the number of tensors copied.
    pub fn copy_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(j) = other.index.get(name) {
                if other.tensors[*j].shape() == self.tensors[i].shape() {
                    self.tensors[i] = other.tensors[*j].clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// SHA-256 over the names, shapes and little-endian values of `ids`.
    pub fn checksum(&self, ids: &[ParamId]) -> String {
        let mut h = Sha256::new();
        for id in ids {
            h.update(self.names[id.0].as_bytes());
            for &d in self.tensors[id.0].shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in self.tensors[id.0].data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn ema(&self) -> Option<&[Tensor<T>]> {
        self.ema.as_deref()
    }

    pub fn init_ema(&mut self) {
        self.ema = Some(self.tensors.clone());
    }

    pub fn set_ema(&mut self, ema: Vec<Tensor<T>>) -> Result<()> {
        if ema.len() != self.tensors.len()
            || ema
                .iter()
                .zip(&self.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape("EMA shadow shapes differ from parameters"));
        }
        self.ema = Some(ema);
        Ok(())
    }

    /// `shadow = decay * shadow + (1 - decay) * param`.
    pub fn update_ema(&mut self, decay: f64) {
        let ema = self.ema.as_mut().expect("update_ema before init_ema");
        let d = T::of_f64(decay);
        let one_minus = T::of_f64(1.0 - decay);
        for (s, p) in ema.iter_mut().zip(&self.tensors) {
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = d * *sv + one_minus * pv;
            }
        }
    }

    /// A store whose values are the EMA shadows.
    pub fn ema_store(&self) -> Option<ParamStore<T>> {
        let ema = self.ema.as_ref()?;
        Some(ParamStore {
            names: self.names.clone(),
            tensors: ema.clone(),
            index: self.index.clone(),
            ema: None,
            seed: self.seed,
            rng: self.rng.clone(),
        })
    }

    /// Place every parameter on the tape.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| g.leaf(t.clone(), trainable))
                .collect(),
        }
    }

    /// Place only `ids` on the tape; every other handle points at one empty
    /// placeholder and must not be used.
    pub fn bind_only(&self, g: &mut Graph<T>, ids: &[ParamId], trainable: bool) -> Bound {
        let hole = g.constant(Tensor::zeros(&[0]));
        let mut vars = vec![hole; self.tensors.len()];
        for id in ids {
            vars[id.0] = g.leaf(self.tensors[id.0].clone(), trainable);
        }
        Bound { vars }
    }

    /// Gradients for every parameter, zero where the tape produced none.
    pub fn collect_grads(
        &self,
        bound: &Bound,
        grads: &mut crate::nncore::graph::Grads<T>,
    ) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wrap handles given in store order, e.g. leaves created by a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Route every parameter through a stop-gradient node.
    pub fn detached<T: Real>(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.vars.iter().map(|&v| g.detach(v)).collect(),
        }
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
