//! Dual-resolution perception with semantic-mask injection.
//!
//! Low-res rasters become `N` patch tokens; a strided conv stack plus a
//! top-down pyramid turns the high-res raster into an `N' x N'` grid with
//! `N'^2 = N M^2`. Each low-res token attends to its own `M x M` block of
//! that grid, and the result attends to tokens of the mask raster.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::layers::{Block, BlockKind, Conv2d, LayerNorm, Linear, Mlp, INIT_STD};
use crate::nncore::{Bound, Graph, Init, ParamId, ParamStore, Real, Tensor, Var};

#[cfg(test)]
mod tests;

/// Component switches for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub low_res: bool,
    pub high_res: bool,
    pub multi_scale: bool,
    pub semantic_mask: bool,
    /// Explicit request for the row with both visual streams off.
    pub mask_only: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            low_res: true,
            high_res: true,
            multi_scale: true,
            semantic_mask: true,
            mask_only: false,
        }
    }
}

impl Toggles {
    pub fn validate(&self) -> Result<()> {
        if !self.low_res && !self.high_res && !(self.mask_only && self.semantic_mask) {
            return Err(Error::Config(
                "both visual streams are off; request the mask-only row explicitly".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptionConfig {
    pub lr_side: usize,
    pub factor: usize,
    pub patch: usize,
    pub d: usize,
    pub heads: usize,
    pub lr_blocks: usize,
    pub conv_widths: [usize; 3],
    pub inject_blocks: usize,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            lr_side: 32,
            factor: 2,
            patch: 4,
            d: 128,
            heads: 4,
            lr_blocks: 2,
            conv_widths: [32, 64, 128],
            inject_blocks: 4,
        }
    }
}

impl PerceptionConfig {
    pub fn hr_side(&self) -> usize {
        self.lr_side * self.factor
    }

    /// Tokens per side of the low-res grid.
    pub fn grid(&self) -> usize {
        self.lr_side / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Side of the fused high-res grid, `M sqrt(N)`.
    pub fn hr_grid(&self) -> usize {
        self.factor * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.lr_side % self.patch != 0 {
            return bad(format!("patch {} must divide side {}", self.patch, self.lr_side));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.d, self.heads));
        }
        if self.factor == 0 {
            return bad("resolution factor must be positive".into());
        }
        // The first conv stage halves H'; the pyramid is then pooled to N'.
        let bottom = self.hr_side() / 2;
        if self.hr_side() % 8 != 0 || bottom % self.hr_grid() != 0 {
            return bad(format!(
                "high-res side {} incompatible with pooled grid {}",
                self.hr_side(),
                self.hr_grid()
            ));
        }
        Ok(())
    }
}

/// Patchify, embed, add learned positions, self-attention blocks, final norm.
#[derive(Debug, Clone)]
pub struct LowResEncoder {
    pub embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln: LayerNorm,
    side: usize,
    patch: usize,
    d: usize,
}

/// Pixel indices of each patch in token order, for `gather_rows` over a
/// `[B, side, side, 3]` raster viewed as rows of 3.
fn patch_index(batch: usize, side: usize, patch: usize) -> Vec<usize> {
    let g = side / patch;
    let mut idx = Vec::with_capacity(batch * side * side);
    for b in 0..batch {
        for gi in 0..g {
            for gj in 0..g {
                for di in 0..patch {
                    for dj in 0..patch {
                        idx.push((b * side + gi * patch + di) * side + gj * patch + dj);
                    }
                }
            }
        }
    }
    idx
}

impl LowResEncoder {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cfg: &PerceptionConfig) -> Self {
        let width = cfg.patch * cfg.patch * 3;
        let kind = BlockKind {
            self_attn: true,
            cross_attn: false,
        };
        Self {
            embed: Linear::new(ps, &format!("{name}.embed"), width, cfg.d),
            pos: ps.add(&format!("{name}.pos"), &[cfg.tokens(), cfg.d], Init::Normal(INIT_STD)),
            blocks: (0..cfg.lr_blocks)
                .map(|i| Block::new(ps, &format!("{name}.block{i}"), cfg.d, cfg.heads, kind))
                .collect(),
            ln: LayerNorm::new(ps, &format!("{name}.ln"), cfg.d),
            side: cfg.lr_side,
            patch: cfg.patch,
            d: cfg.d,
        }
    }

    /// Token embeddings before any attention: `[B, N, D]`.
    pub fn embed_patches<T: Real>(&self, g: &mut Graph<T>, p: &Bound, img: Var) -> Result<Var> {
        let s = g.shape(img).to_vec();
        if s.len() != 4 || s[1] != self.side || s[2] != self.side || s[3] != 3 {
            return Err(Error::shape(format!(
                "low-res raster {s:?}, expected [B, {0}, {0}, 3]",
                self.side
            )));
        }
        let b = s[0];
        let n = (self.side / self.patch).pow(2);
        let x = g.gather_rows(
            img,
            3,
            &patch_index(b, self.side, self.patch),
            &[b, n, self.patch * self.patch * 3],
        );
        let x = self.embed.forward(g, p, x);
        Ok(g.add_bcast(x, p[self.pos]))
    }

    /// `[B, H, H, 3] -> [B, N, D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, img: Var) -> Result<Var> {
        let mut x = self.embed_patches(g, p, img)?;
        for blk in &self.blocks {
            x = blk.forward(g, p, x, None)?;
        }
        Ok(self.ln.forward(g, p, x))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.embed.params();
        v.push(self.pos);
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.ln.params());
        v
    }

    pub fn width(&self) -> usize {
        self.d
    }
}

/// Three stride-2 conv stages with GELU.
#[derive(Debug, Clone)]
pub struct HighResEncoder {
    pub stages: Vec<Conv2d>,
    side: usize,
}

impl HighResEncoder {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cfg: &PerceptionConfig) -> Self {
        let mut cin = 3;
        let stages = cfg
            .conv_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(ps, &format!("{name}.stage{i}"), cin, w, 3, 2);
                cin = w;
                c
            })
            .collect();
        Self {
            stages,
            side: cfg.hr_side(),
        }
    }

    /// `[B, H', H', 3]` to stage maps of sides `H'/2, H'/4, H'/8`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, img: Var) -> Result<Vec<Var>> {
        let s = g.shape(img).to_vec();
        if s.len() != 4 || s[1] != self.side || s[2] != self.side || s[3] != 3 {
            return Err(Error::shape(format!(
                "high-res raster {s:?}, expected [B, {0}, {0}, 3]",
                self.side
            )));
        }
        let mut x = img;
        let mut maps = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let y = st.forward(g, p, x);
            x = g.gelu(y);
            maps.push(x);
        }
        Ok(maps)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(|s| s.params()).collect()
    }
}

/// Top-down pyramid: 1x1 laterals to `D`, nearest upsample and add, a 3x3
/// conv, then average pooling to the fused grid side.
#[derive(Debug, Clone)]
pub struct Fpn {
    pub laterals: Vec<Conv2d>,
    pub out: Conv2d,
    pool: usize,
}

impl Fpn {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cfg: &PerceptionConfig) -> Self {
        Self {
            laterals: cfg
                .conv_widths
                .iter()
                .enumerate()
                .map(|(i, &w)| Conv2d::new(ps, &format!("{name}.lateral{i}"), w, cfg.d, 1, 1))
                .collect(),
            out: Conv2d::new(ps, &format!("{name}.out"), cfg.d, cfg.d, 3, 1),
            pool: cfg.hr_side() / 2 / cfg.hr_grid(),
        }
    }

    /// Fused map at the bottom stage's side, before pooling.
    pub fn top_down<T: Real>(&self, g: &mut Graph<T>, p: &Bound, maps: &[Var], multi_scale: bool) -> Result<Var> {
        if maps.len() < 2 || maps.len() != self.laterals.len() {
            return Err(Error::shape(format!(
                "pyramid needs {} stages, got {}",
                self.laterals.len(),
                maps.len()
            )));
        }
        for (m, l) in maps.iter().zip(&self.laterals) {
            if g.shape(*m)[3] != l.cin {
                return Err(Error::shape(format!("stage channels {:?} vs lateral {}", g.shape(*m), l.cin)));
            }
        }
        let last = maps.len() - 1;
        let mut acc = if multi_scale {
            let mut acc = self.laterals[last].forward(g, p, maps[last]);
            for i in (0..last).rev() {
                let lat = self.laterals[i].forward(g, p, maps[i]);
                let f = g.shape(lat)[1] / g.shape(acc)[1];
                let up = g.upsample_nearest(acc, f);
                acc = g.add(lat, up);
            }
            acc
        } else {
            self.laterals[0].forward(g, p, maps[0])
        };
        acc = self.out.forward(g, p, acc);
        Ok(acc)
    }

    /// `[B, N', N', D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, maps: &[Var], multi_scale: bool) -> Result<Var> {
        let x = self.top_down(g, p, maps, multi_scale)?;
        Ok(if self.pool > 1 { g.avg_pool(x, self.pool) } else { x })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.laterals.iter().flat_map(|l| l.params()).collect();
        v.extend(self.out.params());
        v
    }
}

/// Row indices that regroup a `[B, N', N', D]` grid into `[B N, M^2, D]`:
/// group `g = (gi, gj)` lists the block `(M gi + di, M gj + dj)` row-major.
pub fn align_index(batch: usize, n: usize, m: usize) -> Result<Vec<usize>> {
    let gs = (n as f64).sqrt().round() as usize;
    if gs * gs != n || m == 0 {
        return Err(Error::shape(format!("cannot align N={n} tokens at factor M={m}")));
    }
    let side = gs * m;
    let mut idx = Vec::with_capacity(batch * side * side);
    for b in 0..batch {
        for gi in 0..gs {
            for gj in 0..gs {
                for di in 0..m {
                    for dj in 0..m {
                        idx.push((b * side + gi * m + di) * side + gj * m + dj);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Pure regrouping of a grid tensor `[B, N', N', D]` into `[B, N, M^2, D]`.
pub fn align_patches<T: Real>(grid: &Tensor<T>, n: usize, m: usize) -> Result<Tensor<T>> {
    let s = grid.shape();
    if s.len() != 4 || s[1] != s[2] || s[1] * s[2] != n * m * m {
        return Err(Error::shape(format!("grid {s:?} vs N={n}, M={m}")));
    }
    let (b, d) = (s[0], s[3]);
    let idx = align_index(b, n, m)?;
    let mut out = Vec::with_capacity(grid.numel());
    for &i in &idx {
        out.extend_from_slice(&grid.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(&[b, n, m * m, d], out)
}

/// Inverse of [`align_patches`].
pub fn unalign_patches<T: Real>(aligned: &Tensor<T>) -> Result<Tensor<T>> {
    let s = aligned.shape();
    let (b, n, mm, d) = (s[0], s[1], s[2], s[3]);
    let m = (mm as f64).sqrt().round() as usize;
    let idx = align_index(b, n, m)?;
    let mut out = vec![T::zero(); aligned.numel()];
    for (k, &i) in idx.iter().enumerate() {
        out[i * d..(i + 1) * d].copy_from_slice(&aligned.data()[k * d..(k + 1) * d]);
    }
    let side = m * (n as f64).sqrt().round() as usize;
    Tensor::new(&[b, side, side, d], out)
}

/// Each low-res token queries its own `M^2` aligned high-res patches;
/// the result is added back onto the token.
#[derive(Debug, Clone)]
pub struct DualFusion {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    /// Learned position of a patch within its group, added to keys.
    pub pos: ParamId,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    heads: usize,
    m2: usize,
}

impl DualFusion {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cfg: &PerceptionConfig) -> Self {
        let d = cfg.d;
        Self {
            ln_q: LayerNorm::new(ps, &format!("{name}.ln_q"), d),
            ln_kv: LayerNorm::new(ps, &format!("{name}.ln_kv"), d),
            pos: ps.add(&format!("{name}.pos"), &[cfg.factor * cfg.factor, d], Init::Normal(INIT_STD)),
            q: Linear::new(ps, &format!("{name}.q"), d, d),
            k: Linear::new(ps, &format!("{name}.k"), d, d),
            v: Linear::new(ps, &format!("{name}.v"), d, d),
            o: Linear::zeroed(ps, &format!("{name}.o"), d, d),
            heads: cfg.heads,
            m2: cfg.factor * cfg.factor,
        }
    }

    /// `f_lr: [B, N, D]`, `grid: [B, N', N', D]` -> `[B, N, D]`. Also returns
    /// the attention node so callers can inspect its weights.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f_lr: Var, grid: Var) -> Result<(Var, Var)> {
        let sl = g.shape(f_lr).to_vec();
        let sg = g.shape(grid).to_vec();
        let (b, n, d) = (sl[0], sl[1], sl[2]);
        let m = (self.m2 as f64).sqrt().round() as usize;
        if sg.len() != 4 || sg[0] != b || sg[3] != d || sg[1] * sg[2] != n * self.m2 {
            return Err(Error::shape(format!(
                "fusion of tokens {sl:?} with grid {sg:?} at M^2={}",
                self.m2
            )));
        }
        let idx = align_index(b, n, m)?;
        let aligned = g.gather_rows(grid, d, &idx, &[b * n, self.m2, d]);
        let kv = self.ln_kv.forward(g, p, aligned);
        let kpos = g.add_bcast(kv, p[self.pos]);
        let q_in = g.reshape(f_lr, &[b * n, 1, d]);
        let q_in = self.ln_q.forward(g, p, q_in);
        let q = self.q.forward(g, p, q_in);
        let k = self.k.forward(g, p, kpos);
        let v = self.v.forward(g, p, kv);
        let att = g.attention(q, k, v, self.heads, None)?;
        let o = self.o.forward(g, p, att);
        let o = g.reshape(o, &[b, n, d]);
        Ok((g.add(f_lr, o), att))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.ln_q.params();
        v.extend(self.ln_kv.params());
        v.push(self.pos);
        for l in [&self.q, &self.k, &self.v, &self.o] {
            v.extend(l.params());
        }
        v
    }
}

/// Full perception stack producing mask-aware tokens `F_sem`.
#[derive(Debug, Clone)]
pub struct Perception {
    pub cfg: PerceptionConfig,
    pub toggles: Toggles,
    pub low: LowResEncoder,
    pub high: HighResEncoder,
    pub fpn: Fpn,
    pub fuse: DualFusion,
    /// Per-token projector applied after the shared low-res encoder.
    pub mask_proj: Mlp,
    pub inject: Vec<Block>,
}

/// Intermediate token sets of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PerceptionOut {
    pub f_lr: Option<Var>,
    pub f_hr: Option<Var>,
    pub f_dr: Var,
    pub f_mask: Var,
    pub f_sem: Var,
}

impl Perception {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, cfg: PerceptionConfig, toggles: Toggles) -> Result<Self> {
        cfg.validate()?;
        let kind = BlockKind {
            self_attn: false,
            cross_attn: true,
        };
        Ok(Self {
            low: LowResEncoder::new(ps, "perception.low", &cfg),
            high: HighResEncoder::new(ps, "perception.high", &cfg),
            fpn: Fpn::new(ps, "perception.fpn", &cfg),
            fuse: DualFusion::new(ps, "perception.fuse", &cfg),
            mask_proj: Mlp::new(ps, "perception.mask_proj", cfg.d, cfg.d, cfg.d),
            inject: (0..cfg.inject_blocks)
                .map(|i| Block::new(ps, &format!("perception.inject{i}"), cfg.d, cfg.heads, kind))
                .collect(),
            cfg,
            toggles,
        })
    }

    pub fn encode_low<T: Real>(&self, g: &mut Graph<T>, p: &Bound, o_lr: Var) -> Result<Var> {
        self.low.forward(g, p, o_lr)
    }

    pub fn encode_high<T: Real>(&self, g: &mut Graph<T>, p: &Bound, o_hr: Var) -> Result<Vec<Var>> {
        self.high.forward(g, p, o_hr)
    }

    pub fn fpn_fuse<T: Real>(&self, g: &mut Graph<T>, p: &Bound, maps: &[Var]) -> Result<Var> {
        self.fpn.forward(g, p, maps, self.toggles.multi_scale)
    }

    pub fn fuse_dual<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f_lr: Var, f_hr: Var) -> Result<Var> {
        Ok(self.fuse.forward(g, p, f_lr, f_hr)?.0)
    }

    /// The low-res encoder with its own parameters, then the projector.
    pub fn encode_mask<T: Real>(&self, g: &mut Graph<T>, p: &Bound, mask: Var) -> Result<Var> {
        let x = self.low.forward(g, p, mask)?;
        Ok(self.mask_proj.forward(g, p, x))
    }

    pub fn inject_semantics<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f_dr: Var, f_mask: Var) -> Result<Var> {
        let (sd, sm) = (g.shape(f_dr).to_vec(), g.shape(f_mask).to_vec());
        if sd != sm {
            return Err(Error::shape(format!("injection of {sm:?} into {sd:?}")));
        }
        let mut x = f_dr;
        for blk in &self.inject {
            x = blk.forward(g, p, x, Some(f_mask))?;
        }
        Ok(x)
    }

    /// Parameters shared by the low-res and mask branches.
    pub fn shared_params(&self) -> Vec<ParamId> {
        self.low.params()
    }

    /// Parameters the mask branch reads from its encoder.
    pub fn mask_encoder_params(&self) -> Vec<ParamId> {
        self.low.params()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.low.params();
        v.extend(self.high.params());
        v.extend(self.fpn.params());
        v.extend(self.fuse.params());
        v.extend(self.mask_proj.params());
        for b in &self.inject {
            v.extend(b.params());
        }
        v
    }

    /// `o_lr: [B, H, H, 3]`, `o_hr: [B, H', H', 3]`, `mask: [B, H, H, 3]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, o_lr: Var, o_hr: Var, mask: Var) -> Result<PerceptionOut> {
        let t = self.toggles;
        let b = g.shape(o_lr)[0];
        let (n, d) = (self.cfg.tokens(), self.cfg.d);
        let f_lr = if t.low_res { Some(self.encode_low(g, p, o_lr)?) } else { None };
        let f_hr = if t.high_res {
            let maps = self.encode_high(g, p, o_hr)?;
            Some(self.fpn_fuse(g, p, &maps)?)
        } else {
            None
        };
        let f_dr = match (f_lr, f_hr) {
            (Some(l), Some(h)) => self.fuse_dual(g, p, l, h)?,
            (Some(l), None) => l,
            (None, Some(h)) => {
                // High-res only: pool the grid back to N tokens.
                let pooled = g.avg_pool(h, self.cfg.factor);
                g.reshape(pooled, &[b, n, d])
            }
            (None, None) => g.constant(Tensor::zeros(&[b, n, d])),
        };
        let mask = if t.semantic_mask {
            mask
        } else {
            g.constant(Tensor::zeros(g.shape(mask)))
        };
        let f_mask = self.encode_mask(g, p, mask)?;
        let f_sem = self.inject_semantics(g, p, f_dr, f_mask)?;
        Ok(PerceptionOut {
            f_lr,
            f_hr,
            f_dr,
            f_mask,
            f_sem,
        })
    }
}

/// Stack `[side, side, 3]` rasters into `[B, side, side, 3]`.
pub fn batch_rasters<T: Real>(imgs: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let parts: Vec<Tensor<T>> = imgs
        .iter()
        .map(|t| {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.cast::<T>().reshape(&s)
        })
        .collect::<Result<_>>()?;
    Tensor::stack_outer(&parts)
}
