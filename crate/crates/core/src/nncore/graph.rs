//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into every node that
//! depends on a leaf created with `requires_grad`.

use crate::error::{Error, Result};
use crate::nncore::tensor::{Real, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Geometry of a square-kernel 2D convolution over NHWC tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_side(&self, side: usize) -> usize {
        (side + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

enum Op<T> {
    Leaf,
    Detach,
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    MatMul(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample(Var, usize),
    AvgPool(Var, usize),
    Gather {
        x: Var,
        row: usize,
        idx: Vec<usize>,
    },
    ConcatTokens(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    PseudoHuber {
        x: Var,
        y: Var,
        c: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

/// Strided matrix product over slices with element offsets. Small products
/// skip the packing kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    a_off: usize,
    rsa: usize,
    csa: usize,
    b: &[T],
    b_off: usize,
    rsb: usize,
    csb: usize,
    beta: T,
    c: &mut [T],
    c_off: usize,
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |off: usize, r: usize, rs: usize, cc: usize, cs: usize| {
        off + r.saturating_sub(1) * rs + cc.saturating_sub(1) * cs
    };
    assert!(k == 0 || last(a_off, m, rsa, k, csa) < a.len());
    assert!(k == 0 || last(b_off, k, rsb, n, csb) < b.len());
    assert!(last(c_off, m, rsc, n, csc) < c.len());
    if m * n * k <= 4096 {
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..k {
                    acc += a[a_off + i * rsa + p * csa] * b[b_off + p * rsb + j * csb];
                }
                let dst = &mut c[c_off + i * rsc + j * csc];
                *dst = if beta == T::zero() {
                    alpha * acc
                } else {
                    alpha * acc + beta * *dst
                };
            }
        }
        return;
    }
    // SAFETY: bounds of all three operands were asserted above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(a_off),
            rsa as isize,
            csa as isize,
            b.as_ptr().add(b_off),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        );
    }
}

fn im2col<T: Real>(
    x: &[T],
    side_in: usize,
    chans: usize,
    geom: ConvGeom,
    side_out: usize,
    cols: &mut [T],
) {
    let k = geom.kernel;
    let width = k * k * chans;
    for oy in 0..side_out {
        for ox in 0..side_out {
            let row = &mut cols[(oy * side_out + ox) * width..][..width];
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                    let dst = &mut row[(ky * k + kx) * chans..][..chans];
                    if iy < 0 || ix < 0 || iy >= side_in as isize || ix >= side_in as isize {
                        dst.fill(T::zero());
                    } else {
                        let src = (iy as usize * side_in + ix as usize) * chans;
                        dst.copy_from_slice(&x[src..src + chans]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(
    cols: &[T],
    side_in: usize,
    chans: usize,
    geom: ConvGeom,
    side_out: usize,
    dx: &mut [T],
) {
    let k = geom.kernel;
    let width = k * k * chans;
    for oy in 0..side_out {
        for ox in 0..side_out {
            let row = &cols[(oy * side_out + ox) * width..][..width];
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                if iy < 0 || iy >= side_in as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                    if ix < 0 || ix >= side_in as isize {
                        continue;
                    }
                    let dst = (iy as usize * side_in + ix as usize) * chans;
                    let src = &row[(ky * k + kx) * chans..][..chans];
                    for (d, &s) in dx[dst..dst + chans].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Softmax weights saved by an attention node, laid out `[B, heads, Nq, Nk]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Identity in the forward pass, blocks gradients in the backward pass.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let ng = self.ng(&[x]);
        self.push(value, Op::Reshape(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s shape.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() >= sb.len() && sa.ends_with(sb),
            "add_bcast: {sb:?} is not a suffix of {sa:?}"
        );
        let bv = self.value(b).data();
        let inner = bv.len();
        let mut value = self.value(a).clone();
        for chunk in value.data_mut().chunks_mut(inner) {
            for (x, &y) in chunk.iter_mut().zip(bv) {
                *x += y;
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(value, Op::AddBcast(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let ng = self.ng(&[x]);
        self.push(value, Op::Scale(x, c), ng)
    }

    /// Multiply each slice along the first axis by its own constant.
    pub fn scale_rows(&mut self, x: Var, coeffs: &[T]) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape[0], coeffs.len(), "scale_rows: outer extent");
        let inner: usize = shape[1..].iter().product();
        let mut value = self.value(x).clone();
        for (chunk, &c) in value.data_mut().chunks_mut(inner).zip(coeffs) {
            for v in chunk {
                *v *= c;
            }
        }
        let ng = self.ng(&[x]);
        self.push(value, Op::ScaleRows(x, coeffs.to_vec()), ng)
    }

    /// `x[..., k] @ w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sw.len(), 2, "matmul weight must be 2D");
        let k = *sx.last().expect("matmul input must have a last axis");
        assert_eq!(k, sw[0], "matmul: {sx:?} x {sw:?}");
        let n = sw[1];
        let m = self.value(x).numel() / k;
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(x).data(),
            0,
            k,
            1,
            self.value(w).data(),
            0,
            n,
            1,
            T::zero(),
            &mut out,
            0,
            n,
            1,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(&[x, w]);
        self.push(Tensor::new(&shape, out).unwrap(), Op::MatMul(x, w), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let k = T::of_f64(GELU_K);
        let c = T::of_f64(GELU_C);
        let half = T::of_f64(0.5);
        let value = self
            .value(x)
            .map(|v| half * v * (T::one() + (k * (v + c * v * v * v)).tanh()));
        let ng = self.ng(&[x]);
        self.push(value, Op::Gelu(x), ng)
    }

    /// Normalization over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let d = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(gamma), [d]);
        assert_eq!(self.shape(beta), [d]);
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / d;
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        let dn = T::of_f64(d as f64);
        for r in 0..rows {
            let row = &xv.data()[r * d..][..d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + T::of_f64(LN_EPS)).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + b[i];
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            Tensor::new(&shape, out).unwrap(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Scaled dot-product attention over `heads` heads.
    ///
    /// `q: [B, Nq, D]`, `k, v: [B, Nk, D]`, optional additive `mask: [Nq, Nk]`
    /// with entries `0` or `-inf`. Scores are scaled by `1/sqrt(D/heads)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        let sv = self.shape(v).to_vec();
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::shape(format!(
                "attention q {sq:?}, k {sk:?}, v {sv:?}"
            )));
        }
        let (b, nq, d) = (sq[0], sq[1], sq[2]);
        let nk = sk[1];
        if heads == 0 || d % heads != 0 {
            return Err(Error::HeadsDoNotDivide { dim: d, heads });
        }
        if let Some(m) = mask {
            if m.shape() != [nq, nk] {
                return Err(Error::shape(format!(
                    "attention mask {:?}, expected [{nq}, {nk}]",
                    m.shape()
                )));
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::of_f64(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); b * heads * nq * nk];
        let mut out = vec![T::zero(); b * nq * d];
        for bi in 0..b {
            for h in 0..heads {
                let p_off = (bi * heads + h) * nq * nk;
                let s = &mut probs[p_off..p_off + nq * nk];
                gemm(
                    nq,
                    dh,
                    nk,
                    scale,
                    qd,
                    bi * nq * d + h * dh,
                    d,
                    1,
                    kd,
                    bi * nk * d + h * dh,
                    1,
                    d,
                    T::zero(),
                    s,
                    0,
                    nk,
                    1,
                );
                for r in 0..nq {
                    let row = &mut s[r * nk..(r + 1) * nk];
                    if let Some(m) = mask {
                        for (x, &mv) in row.iter_mut().zip(&m.data()[r * nk..(r + 1) * nk]) {
                            *x += mv;
                        }
                    }
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    if mx == T::neg_infinity() {
                        return Err(Error::FullyMaskedRow { row: r });
                    }
                    let mut z = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x - mx).exp();
                        z += *x;
                    }
                    for x in row.iter_mut() {
                        *x = *x / z;
                    }
                }
                gemm(
                    nq,
                    nk,
                    dh,
                    T::one(),
                    &probs,
                    p_off,
                    nk,
                    1,
                    vd,
                    bi * nk * d + h * dh,
                    d,
                    1,
                    T::zero(),
                    &mut out,
                    bi * nq * d + h * dh,
                    d,
                    1,
                );
            }
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            Tensor::new(&[b, nq, d], out).unwrap(),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// NHWC convolution with square kernel. `w: [k*k*Cin, Cout]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 4, "conv2d expects NHWC input");
        assert_eq!(sx[1], sx[2], "conv2d expects square maps");
        let (batch, side, cin) = (sx[0], sx[1], sx[3]);
        let sw = self.shape(w).to_vec();
        let width = geom.kernel * geom.kernel * cin;
        assert_eq!(sw[0], width, "conv2d weight rows {sw:?} vs input {sx:?}");
        let cout = sw[1];
        let so = geom.out_side(side);
        let mut out = vec![T::zero(); batch * so * so * cout];
        let mut cols = vec![T::zero(); so * so * width];
        for bi in 0..batch {
            let xin = &self.value(x).data()[bi * side * side * cin..][..side * side * cin];
            im2col(xin, side, cin, geom, so, &mut cols);
            gemm(
                so * so,
                width,
                cout,
                T::one(),
                &cols,
                0,
                width,
                1,
                self.value(w).data(),
                0,
                cout,
                1,
                T::zero(),
                &mut out,
                bi * so * so * cout,
                cout,
                1,
            );
        }
        if let Some(bv) = b {
            let bias = self.value(bv).data();
            assert_eq!(bias.len(), cout);
            for chunk in out.chunks_mut(cout) {
                for (o, &bb) in chunk.iter_mut().zip(bias) {
                    *o += bb;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let ng = self.ng(&parents);
        self.push(
            Tensor::new(&[batch, so, so, cout], out).unwrap(),
            Op::Conv2d { x, w, b, geom },
            ng,
        )
    }

    /// Nearest-neighbour upsampling of NHWC maps by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); b * ho * wo * c];
        for bi in 0..b {
            for i in 0..ho {
                for j in 0..wo {
                    let src = ((bi * h + i / factor) * w + j / factor) * c;
                    let dst = ((bi * ho + i) * wo + j) * c;
                    out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(&[b, ho, wo, c], out).unwrap(),
            Op::Upsample(x, factor),
            ng,
        )
    }

    /// Non-overlapping `factor x factor` block mean of NHWC maps.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        assert!(h % factor == 0 && w % factor == 0, "avg_pool: {s:?} by {factor}");
        let (ho, wo) = (h / factor, w / factor);
        let xd = self.value(x).data();
        let inv = T::one() / T::of_f64((factor * factor) as f64);
        let mut out = vec![T::zero(); b * ho * wo * c];
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let src = ((bi * h + i) * w + j) * c;
                    let dst = ((bi * ho + i / factor) * wo + j / factor) * c;
                    for ch in 0..c {
                        out[dst + ch] += xd[src + ch] * inv;
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(&[b, ho, wo, c], out).unwrap(),
            Op::AvgPool(x, factor),
            ng,
        )
    }

    /// Select rows of length `row` from `x` (viewed as a row matrix) by index;
    /// repeated indices are allowed. The result is reshaped to `shape`.
    pub fn gather_rows(&mut self, x: Var, row: usize, idx: &[usize], shape: &[usize]) -> Var {
        let xd = self.value(x).data();
        assert_eq!(xd.len() % row, 0);
        let nrows = xd.len() / row;
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            assert!(i < nrows, "gather_rows index {i} of {nrows}");
            out.extend_from_slice(&xd[i * row..(i + 1) * row]);
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(shape, out).unwrap_or_else(|e| panic!("{e}")),
            Op::Gather {
                x,
                row,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Concatenate `[B, n_i, D]` tensors along the token axis.
    pub fn concat_tokens(&mut self, parts: &[Var]) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let (b, d) = (first[0], first[2]);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(s.len() == 3 && s[0] == b && s[2] == d, "concat_tokens: {s:?} vs {first:?}");
            total += s[1];
        }
        let mut out = Vec::with_capacity(b * total * d);
        for bi in 0..b {
            for &p in parts {
                let n = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[bi * n * d..(bi + 1) * n * d]);
            }
        }
        let ng = self.ng(parts);
        self.push(
            Tensor::new(&[b, total, d], out).unwrap(),
            Op::ConcatTokens(parts.to_vec()),
            ng,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / T::of_f64(v.numel() as f64);
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(m), Op::MeanAll(x), ng)
    }

    /// Per-sample `sqrt(|x - y|^2 + c^2) - c`, reducing all but the first axis.
    pub fn pseudo_huber(&mut self, x: Var, y: Var, c: T) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s, self.shape(y), "pseudo_huber operand shapes");
        let b = s[0];
        let inner: usize = s[1..].iter().product();
        let (xd, yd) = (self.value(x).data(), self.value(y).data());
        let out = (0..b)
            .map(|i| {
                let sq: T = xd[i * inner..(i + 1) * inner]
                    .iter()
                    .zip(&yd[i * inner..(i + 1) * inner])
                    .map(|(&a, &bb)| (a - bb) * (a - bb))
                    .sum();
                (sq + c * c).sqrt() - c
            })
            .collect();
        let ng = self.ng(&[x, y]);
        self.push(
            Tensor::new(&[b], out).unwrap(),
            Op::PseudoHuber { x, y, c },
            ng,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.shape(*x)).unwrap();
                accumulate(grads, *x, gx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddBcast(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let sb = self.shape(*b);
                    let inner = self.value(*b).numel();
                    let mut gb = Tensor::zeros(sb);
                    for chunk in g.data().chunks(inner) {
                        for (acc, &v) in gb.data_mut().iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::ScaleRows(x, coeffs) => {
                let mut gx = g.clone();
                let inner = gx.numel() / coeffs.len();
                for (chunk, &c) in gx.data_mut().chunks_mut(inner).zip(coeffs) {
                    for v in chunk {
                        *v *= c;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::MatMul(x, w) => {
                let sw = self.shape(*w);
                let (k, n) = (sw[0], sw[1]);
                let m = self.value(*x).numel() / k;
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); m * k];
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        0,
                        n,
                        1,
                        self.value(*w).data(),
                        0,
                        1,
                        n,
                        T::zero(),
                        &mut gx,
                        0,
                        k,
                        1,
                    );
                    accumulate(grads, *x, Tensor::new(self.shape(*x), gx).unwrap());
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); k * n];
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(*x).data(),
                        0,
                        1,
                        k,
                        g.data(),
                        0,
                        n,
                        1,
                        T::zero(),
                        &mut gw,
                        0,
                        n,
                        1,
                    );
                    accumulate(grads, *w, Tensor::new(sw, gw).unwrap());
                }
            }
            Op::Gelu(x) => {
                let k = T::of_f64(GELU_K);
                let c = T::of_f64(GELU_C);
                let half = T::of_f64(0.5);
                let three = T::of_f64(3.0);
                let gx = g.zip_map(self.value(*x), |gv, v| {
                    let t = (k * (v + c * v * v * v)).tanh();
                    let d = half * (T::one() + t)
                        + half * v * (T::one() - t * t) * k * (T::one() + three * c * v * v);
                    gv * d
                });
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let rows = rstd.len();
                let gam = self.value(*gamma).data();
                let gd = g.data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = vec![T::zero(); d];
                    let mut gb = vec![T::zero(); d];
                    for r in 0..rows {
                        for i in 0..d {
                            gg[i] += gd[r * d + i] * xhat[r * d + i];
                            gb[i] += gd[r * d + i];
                        }
                    }
                    if self.wants(*gamma) {
                        accumulate(grads, *gamma, Tensor::new(&[d], gg).unwrap());
                    }
                    if self.wants(*beta) {
                        accumulate(grads, *beta, Tensor::new(&[d], gb).unwrap());
                    }
                }
                if self.wants(*x) {
                    let dn = T::of_f64(d as f64);
                    let mut gx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for i in 0..d {
                            let dxh = gd[r * d + i] * gam[i];
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + i];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for i in 0..d {
                            let dxh = gd[r * d + i] * gam[i];
                            gx[r * d + i] = rstd[r] * (dxh - m1 - xhat[r * d + i] * m2);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(self.shape(*x), gx).unwrap());
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::Conv2d { x, w, b, geom } => {
                let sx = self.shape(*x);
                let (batch, side, cin) = (sx[0], sx[1], sx[3]);
                let cout = self.shape(*w)[1];
                let so = geom.out_side(side);
                let width = geom.kernel * geom.kernel * cin;
                let gd = g.data();
                if let Some(bv) = b {
                    if self.wants(*bv) {
                        let mut gb = vec![T::zero(); cout];
                        for chunk in gd.chunks(cout) {
                            for (acc, &v) in gb.iter_mut().zip(chunk) {
                                *acc += v;
                            }
                        }
                        accumulate(grads, *bv, Tensor::new(&[cout], gb).unwrap());
                    }
                }
                let want_w = self.wants(*w);
                let want_x = self.wants(*x);
                if !want_w && !want_x {
                    return;
                }
                let mut cols = vec![T::zero(); so * so * width];
                let mut gw = vec![T::zero(); if want_w { width * cout } else { 0 }];
                let mut gx = vec![T::zero(); if want_x { batch * side * side * cin } else { 0 }];
                for bi in 0..batch {
                    let g_off = bi * so * so * cout;
                    if want_w {
                        let xin = &self.value(*x).data()[bi * side * side * cin..][..side * side * cin];
                        im2col(xin, side, cin, *geom, so, &mut cols);
                        gemm(
                            width,
                            so * so,
                            cout,
                            T::one(),
                            &cols,
                            0,
                            1,
                            width,
                            gd,
                            g_off,
                            cout,
                            1,
                            T::one(),
                            &mut gw,
                            0,
                            cout,
                            1,
                        );
                    }
                    if want_x {
                        gemm(
                            so * so,
                            cout,
                            width,
                            T::one(),
                            gd,
                            g_off,
                            cout,
                            1,
                            self.value(*w).data(),
                            0,
                            1,
                            cout,
                            T::zero(),
                            &mut cols,
                            0,
                            width,
                            1,
                        );
                        col2im(
                            &cols,
                            side,
                            cin,
                            *geom,
                            so,
                            &mut gx[bi * side * side * cin..][..side * side * cin],
                        );
                    }
                }
                if want_w {
                    accumulate(grads, *w, Tensor::new(self.shape(*w), gw).unwrap());
                }
                if want_x {
                    accumulate(grads, *x, Tensor::new(sx, gx).unwrap());
                }
            }
            Op::Upsample(x, factor) => {
                let s = self.shape(*x);
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h * factor, w * factor);
                let gd = g.data();
                let mut gx = vec![T::zero(); b * h * w * c];
                for bi in 0..b {
                    for i in 0..ho {
                        for j in 0..wo {
                            let dst = ((bi * h + i / factor) * w + j / factor) * c;
                            let src = ((bi * ho + i) * wo + j) * c;
                            for ch in 0..c {
                                gx[dst + ch] += gd[src + ch];
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(s, gx).unwrap());
            }
            Op::AvgPool(x, factor) => {
                let s = self.shape(*x);
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h / factor, w / factor);
                let inv = T::one() / T::of_f64((factor * factor) as f64);
                let gd = g.data();
                let mut gx = vec![T::zero(); b * h * w * c];
                for bi in 0..b {
                    for i in 0..h {
                        for j in 0..w {
                            let dst = ((bi * h + i) * w + j) * c;
                            let src = ((bi * ho + i / factor) * wo + j / factor) * c;
                            for ch in 0..c {
                                gx[dst + ch] = gd[src + ch] * inv;
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(s, gx).unwrap());
            }
            Op::Gather { x, row, idx } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let gd = g.data();
                let gxd = gx.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    for (dst, &src) in gxd[i * row..(i + 1) * row]
                        .iter_mut()
                        .zip(&gd[r * row..(r + 1) * row])
                    {
                        *dst += src;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatTokens(parts) => {
                let s = g.shape();
                let (b, total, d) = (s[0], s[1], s[2]);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[1];
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(b * n * d);
                        for bi in 0..b {
                            let start = (bi * total + offset) * d;
                            gp.extend_from_slice(&g.data()[start..start + n * d]);
                        }
                        accumulate(grads, p, Tensor::new(self.shape(p), gp).unwrap());
                    }
                    offset += n;
                }
            }
            Op::SumAll(x) => {
                let gv = g.item();
                accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::MeanAll(x) => {
                let n = T::of_f64(self.value(*x).numel() as f64);
                accumulate(grads, *x, Tensor::full(self.shape(*x), g.item() / n));
            }
            Op::PseudoHuber { x, y, c } => {
                let s = self.shape(*x);
                let b = s[0];
                let inner: usize = s[1..].iter().product();
                let (xd, yd) = (self.value(*x).data(), self.value(*y).data());
                let out = node.value.data();
                let mut gx = vec![T::zero(); b * inner];
                for i in 0..b {
                    let denom = out[i] + *c;
                    let coef = g.data()[i] / denom;
                    for j in i * inner..(i + 1) * inner {
                        gx[j] = coef * (xd[j] - yd[j]);
                    }
                }
                let gx = Tensor::new(s, gx).unwrap();
                if self.wants(*y) {
                    accumulate(grads, *y, gx.map(|v| -v));
                }
                if self.wants(*x) {
                    accumulate(grads, *x, gx);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let sq = self.shape(q);
        let (b, nq, d) = (sq[0], sq[1], sq[2]);
        let nk = self.shape(k)[1];
        let dh = d / heads;
        let scale = T::one() / T::of_f64(dh as f64).sqrt();
        let (qd, kd, vd, gd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            g.data(),
        );
        let mut gq = vec![T::zero(); b * nq * d];
        let mut gk = vec![T::zero(); b * nk * d];
        let mut gv = vec![T::zero(); b * nk * d];
        let mut ds = vec![T::zero(); nq * nk];
        for bi in 0..b {
            for h in 0..heads {
                let p_off = (bi * heads + h) * nq * nk;
                let q_off = bi * nq * d + h * dh;
                let k_off = bi * nk * d + h * dh;
                // dV = P^T dO
                gemm(
                    nk,
                    nq,
                    dh,
                    T::one(),
                    probs,
                    p_off,
                    1,
                    nk,
                    gd,
                    q_off,
                    d,
                    1,
                    T::one(),
                    &mut gv,
                    k_off,
                    d,
                    1,
                );
                // dP = dO V^T
                gemm(
                    nq,
                    dh,
                    nk,
                    T::one(),
                    gd,
                    q_off,
                    d,
                    1,
                    vd,
                    k_off,
                    1,
                    d,
                    T::zero(),
                    &mut ds,
                    0,
                    nk,
                    1,
                );
                for r in 0..nq {
                    let p = &probs[p_off + r * nk..p_off + (r + 1) * nk];
                    let row = &mut ds[r * nk..(r + 1) * nk];
                    let dot: T = row.iter().zip(p).map(|(&a, &bb)| a * bb).sum();
                    for (x, &pp) in row.iter_mut().zip(p) {
                        *x = pp * (*x - dot);
                    }
                }
                gemm(
                    nq,
                    nk,
                    dh,
                    scale,
                    &ds,
                    0,
                    nk,
                    1,
                    kd,
                    k_off,
                    d,
                    1,
                    T::one(),
                    &mut gq,
                    q_off,
                    d,
                    1,
                );
                gemm(
                    nk,
                    nq,
                    dh,
                    scale,
                    &ds,
                    0,
                    1,
                    nk,
                    qd,
                    q_off,
                    d,
                    1,
                    T::one(),
                    &mut gk,
                    k_off,
                    d,
                    1,
                );
            }
        }
        if self.wants(q) {
            accumulate(grads, q, Tensor::new(sq, gq).unwrap());
        }
        if self.wants(k) {
            accumulate(grads, k, Tensor::new(self.shape(k), gk).unwrap());
        }
        if self.wants(v) {
            accumulate(grads, v, Tensor::new(self.shape(v), gv).unwrap());
        }
    }
}
