//! Parameterized building blocks. Each layer only stores [`ParamId`]s, so the
//! same layer can run against stores of any precision.

use crate::error::Result;
use crate::nncore::graph::{ConvGeom, Graph, Var};
use crate::nncore::params::{Bound, Init, ParamId, ParamStore};
use crate::nncore::tensor::{Real, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, din: usize, dout: usize) -> Self {
        Self::with_init(ps, name, din, dout, Init::Normal(INIT_STD))
    }

    /// Projection whose weight starts at zero (final outputs of residual branches).
    pub fn zeroed<T: Real>(ps: &mut ParamStore<T>, name: &str, din: usize, dout: usize) -> Self {
        Self::with_init(ps, name, din, dout, Init::Zeros)
    }

    pub fn with_init<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
    ) -> Self {
        let w = ps.add(&format!("{name}.w"), &[din, dout], init);
        let b = Some(ps.add(&format!("{name}.b"), &[dout], Init::Zeros));
        Self { w, b, din, dout }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p[self.w]);
        match self.b {
            Some(b) => g.add_bcast(y, p[b]),
            None => y,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.w];
        v.extend(self.b);
        v
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: ps.add(&format!("{name}.gamma"), &[d], Init::Ones),
            beta: ps.add(&format!("{name}.beta"), &[d], Init::Zeros),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p[self.gamma], p[self.beta])
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, din: usize, hidden: usize, dout: usize) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), din, hidden),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dout),
        }
    }

    /// Residual-branch variant: the output projection starts at zero.
    pub fn residual<T: Real>(ps: &mut ParamStore<T>, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), d, hidden),
            fc2: Linear::zeroed(ps, &format!("{name}.fc2"), hidden, d),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let h = self.fc1.forward(g, p, x);
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }
}

/// Multi-head attention with input and output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(ps, &format!("{name}.q"), d, d),
            k: Linear::new(ps, &format!("{name}.k"), d, d),
            v: Linear::new(ps, &format!("{name}.v"), d, d),
            o: Linear::zeroed(ps, &format!("{name}.o"), d, d),
            heads,
        }
    }

    /// `xq: [B, Nq, D]`, `xkv: [B, Nk, D]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        xq: Var,
        xkv: Var,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let q = self.q.forward(g, p, xq);
        let k = self.k.forward(g, p, xkv);
        let v = self.v.forward(g, p, xkv);
        let a = g.attention(q, k, v, self.heads, mask)?;
        Ok(self.o.forward(g, p, a))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

/// Pre-norm transformer block. Self-attention and cross-attention sublayers
/// are each optional; the feed-forward sublayer is always present.
#[derive(Debug, Clone)]
pub struct Block {
    pub self_attn: Option<(LayerNorm, MultiHeadAttention)>,
    pub cross_attn: Option<(LayerNorm, LayerNorm, MultiHeadAttention)>,
    pub ln_ff: LayerNorm,
    pub ff: Mlp,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockKind {
    pub self_attn: bool,
    pub cross_attn: bool,
}

impl Block {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, d: usize, heads: usize, kind: BlockKind) -> Self {
        let self_attn = kind.self_attn.then(|| {
            (
                LayerNorm::new(ps, &format!("{name}.ln_sa"), d),
                MultiHeadAttention::new(ps, &format!("{name}.sa"), d, heads),
            )
        });
        let cross_attn = kind.cross_attn.then(|| {
            (
                LayerNorm::new(ps, &format!("{name}.ln_ca"), d),
                LayerNorm::new(ps, &format!("{name}.ln_ctx"), d),
                MultiHeadAttention::new(ps, &format!("{name}.ca"), d, heads),
            )
        });
        Self {
            self_attn,
            cross_attn,
            ln_ff: LayerNorm::new(ps, &format!("{name}.ln_ff"), d),
            ff: Mlp::residual(ps, &format!("{name}.ff"), d, 4 * d),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, ctx: Option<Var>) -> Result<Var> {
        let mut x = x;
        if let Some((ln, attn)) = &self.self_attn {
            let h = ln.forward(g, p, x);
            let h = attn.forward(g, p, h, h, None)?;
            x = g.add(x, h);
        }
        if let Some((ln, ln_ctx, attn)) = &self.cross_attn {
            let ctx = ctx.expect("cross-attention block called without context");
            let h = ln.forward(g, p, x);
            let c = ln_ctx.forward(g, p, ctx);
            let h = attn.forward(g, p, h, c, None)?;
            x = g.add(x, h);
        }
        let h = self.ln_ff.forward(g, p, x);
        let h = self.ff.forward(g, p, h);
        Ok(g.add(x, h))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        if let Some((ln, a)) = &self.self_attn {
            v.extend(ln.params());
            v.extend(a.params());
        }
        if let Some((ln, lc, a)) = &self.cross_attn {
            v.extend(ln.params());
            v.extend(lc.params());
            v.extend(a.params());
        }
        v.extend(self.ln_ff.params());
        v.extend(self.ff.params());
        v
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = (kernel * kernel * cin) as f64;
        let w = ps.add(
            &format!("{name}.w"),
            &[kernel * kernel * cin, cout],
            Init::Normal(fan_in.sqrt().recip()),
        );
        let b = ps.add(&format!("{name}.b"), &[cout], Init::Zeros);
        Self {
            w,
            b,
            geom: ConvGeom {
                kernel,
                stride,
                pad: kernel / 2,
            },
            cin,
            cout,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p[self.w], Some(p[self.b]), self.geom)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// Sinusoidal features of scalar inputs: `[B] -> [B, width]`, with
/// geometrically spaced frequencies from 1 to 200.
pub fn sinusoidal<T: Real>(values: &[f64], width: usize) -> Tensor<T> {
    let half = width / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (200f64.ln() * i as f64 / half.max(1) as f64).exp())
        .collect();
    let mut out = Vec::with_capacity(values.len() * width);
    for &x in values {
        out.extend(freqs.iter().map(|f| T::of_f64((x * f).sin())));
        out.extend(freqs.iter().map(|f| T::of_f64((x * f).cos())));
        out.extend((2 * half..width).map(|_| T::zero()));
    }
    Tensor::new(&[values.len(), width], out).unwrap()
}
