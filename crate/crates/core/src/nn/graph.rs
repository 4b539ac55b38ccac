//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only, records every operation
//! applied during a forward pass, and replays them backwards in
//! [`Graph::backward`]. One graph serves one sample; batches are handled by
//! building independent graphs and summing their [`Gradients`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::window::WindowLayout;
use crate::nn::{Gradients, ParamId, ParamStore, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Exp,
    Softplus,
    /// Rectifier whose derivative at zero is taken as one.
    Relu,
    /// Tanh approximation of GELU.
    Gelu,
    /// `1 - exp(-x)`
    OneMinusExpNeg,
    /// Clamp to `[0, 1]`, passing gradient inside the closed interval.
    Clamp01,
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    ColTimesRow {
        col: Var,
        row: Var,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LayerNormAll {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: f64,
    },
    Patchify {
        x: Var,
        grid: (usize, usize),
        c: usize,
        p: usize,
    },
    PixelShuffle {
        x: Var,
        grid: (usize, usize),
        c: usize,
        r: usize,
    },
    Im2Col3 {
        x: Var,
        grid: (usize, usize),
        c: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    WindowAttention {
        qkv: Var,
        table: Var,
        layout: Arc<WindowLayout>,
        heads: usize,
        head_dim: usize,
        probs: Vec<f64>,
    },
    Mse {
        x: Var,
        target: Tensor,
    },
    Lightness {
        x: Var,
        hi: Vec<u8>,
        lo: Vec<u8>,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + k.saturating_sub(1) * csa + usize::from(k > 0));
    assert!(b.len() >= k.saturating_sub(1) * rsb + (n - 1) * csb + usize::from(k > 0));
    assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const A: f64 = 0.044_715;
    let u = K * (x + A * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * K * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::with_capacity(1024),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf that never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x [n, in] @ w [in, out] + b [out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        if xs.shape().len() != 2 || ws.shape().len() != 2 || xs.shape()[1] != ws.shape()[0] {
            return Err(Error::Shape(format!(
                "linear: input {:?} vs weight {:?}",
                xs.shape(),
                ws.shape()
            )));
        }
        let (n, din, dout) = (xs.shape()[0], ws.shape()[0], ws.shape()[1]);
        let mut out = Tensor::zeros(&[n, dout]);
        gemm(
            n,
            din,
            dout,
            xs.data(),
            (din, 1),
            ws.data(),
            (dout, 1),
            0.0,
            out.data_mut(),
            dout,
        );
        if let Some(b) = b {
            let bs = self.value(b);
            if bs.len() != dout {
                return Err(Error::Shape(format!(
                    "linear: bias {:?} for {dout} outputs",
                    bs.shape()
                )));
            }
            for row in out.data_mut().chunks_exact_mut(dout) {
                for (o, bb) in row.iter_mut().zip(bs.data()) {
                    *o += bb;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Linear { x, w, b }, needs))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    /// Adds a `[c]` row to every row of `x [n, c]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(row).len() != c {
            return Err(Error::Shape(format!(
                "add_row: row of {} for {c} columns",
                self.value(row).len()
            )));
        }
        let mut out = self.value(x).clone();
        let r = self.value(row).data();
        for chunk in out.data_mut().chunks_exact_mut(c) {
            for (o, v) in chunk.iter_mut().zip(r) {
                *o += v;
            }
        }
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(out, Op::AddRow { x, row }, needs))
    }

    /// Outer product of a `[n, 1]` column and a `[c]` row.
    pub fn col_times_row(&mut self, col: Var, row: Var) -> Result<Var> {
        if self.value(col).cols() != 1 {
            return Err(Error::Shape(format!(
                "col_times_row: column {:?}",
                self.shape(col)
            )));
        }
        let n = self.value(col).rows();
        let r = self.value(row).data().to_vec();
        let c = r.len();
        let mut out = Tensor::zeros(&[n, c]);
        for (chunk, &s) in out.data_mut().chunks_exact_mut(c).zip(self.value(col).data()) {
            for (o, v) in chunk.iter_mut().zip(&r) {
                *o = s * v;
            }
        }
        let needs = self.needs(col) || self.needs(row);
        Ok(self.push(out, Op::ColTimesRow { col, row }, needs))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let mut out = self.value(x).clone();
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => f64::tanh,
            Unary::Exp => f64::exp,
            Unary::Softplus => softplus,
            Unary::Relu => |v| if v >= 0.0 { v } else { 0.0 },
            Unary::Gelu => |v| gelu(v).0,
            Unary::OneMinusExpNeg => |v| -(-v).exp_m1(),
            Unary::Clamp01 => |v| v.clamp(0.0, 1.0),
        };
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let needs = self.needs(x);
        self.push(out, Op::Unary { x, kind }, needs)
    }

    /// Per-row layer normalisation of `x [n, c]` with `[c]` affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.value(x);
        let c = xs.cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape(format!(
                "layer_norm_rows: affine of {} for {c} columns",
                self.value(gamma).len()
            )));
        }
        let n = xs.rows();
        let mut xhat = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n];
        let mut out = Tensor::zeros(xs.shape());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for r in 0..n {
            let row = &xs.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            let xh = &mut xhat[r * c..(r + 1) * c];
            let o = &mut out.data_mut()[r * c..(r + 1) * c];
            for j in 0..c {
                xh[j] = (row[j] - mean) * is;
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Layer normalisation over every element of `x` jointly, with
    /// element-wise affine parameters shaped like `x`.
    pub fn layer_norm_all(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.value(x);
        let n = xs.len();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::Shape(format!(
                "layer_norm_all: affine of {} for {n} elements",
                self.value(gamma).len()
            )));
        }
        let mean = xs.data().iter().sum::<f64>() / n as f64;
        let var = xs.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        let xhat: Vec<f64> = xs.data().iter().map(|v| (v - mean) * inv_std).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .iter()
            .zip(g)
            .zip(b)
            .map(|((xh, g), b)| xh * g + b)
            .collect();
        let out = Tensor::new(xs.shape(), data)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNormAll {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Space-to-depth: `[h*w, c]` on an `h x w` grid to
    /// `[(h/p)*(w/p), p*p*c]`, columns ordered `(dy, dx, channel)`.
    pub fn patchify(&mut self, x: Var, grid: (usize, usize), p: usize) -> Result<Var> {
        let (h, w) = grid;
        let xs = self.value(x);
        if p == 0 || h % p != 0 || w % p != 0 || xs.rows() != h * w {
            return Err(Error::Shape(format!(
                "patchify: {:?} on grid {h}x{w} with patch {p}",
                xs.shape()
            )));
        }
        let c = xs.cols();
        let (oh, ow) = (h / p, w / p);
        let oc = p * p * c;
        let mut out = Tensor::zeros(&[oh * ow, oc]);
        let (src, dst) = (xs.data(), out.data_mut());
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * ow + ox) * oc;
                for dy in 0..p {
                    for dx in 0..p {
                        let s = ((oy * p + dy) * w + ox * p + dx) * c;
                        let d = base + (dy * p + dx) * c;
                        dst[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::Patchify { x, grid, c, p }, needs))
    }

    /// Pixel shuffle: `[h*w, c*r*r]` to `[(h*r)*(w*r), c]`, reading input
    /// channel `ch*r*r + i*r + j` for output offset `(i, j)`.
    pub fn pixel_shuffle(&mut self, x: Var, grid: (usize, usize), r: usize) -> Result<Var> {
        let (h, w) = grid;
        let xs = self.value(x);
        let ic = xs.cols();
        if r == 0 || !ic.is_multiple_of(r * r) || xs.rows() != h * w {
            return Err(Error::Shape(format!(
                "pixel_shuffle: {:?} on grid {h}x{w} with factor {r}",
                xs.shape()
            )));
        }
        let c = ic / (r * r);
        let ow = w * r;
        let mut out = Tensor::zeros(&[h * r * ow, c]);
        let (src, dst) = (xs.data(), out.data_mut());
        for y in 0..h {
            for x in 0..w {
                let s = (y * w + x) * ic;
                for i in 0..r {
                    for j in 0..r {
                        let d = ((y * r + i) * ow + x * r + j) * c;
                        for ch in 0..c {
                            dst[d + ch] = src[s + ch * r * r + i * r + j];
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::PixelShuffle { x, grid, c, r }, needs))
    }

    /// 3x3 zero-padded neighbourhoods: `[h*w, c]` to `[h*w, 9*c]`, columns
    /// ordered `(ky, kx, channel)`.
    pub fn im2col3(&mut self, x: Var, grid: (usize, usize)) -> Result<Var> {
        let (h, w) = grid;
        let xs = self.value(x);
        if xs.rows() != h * w {
            return Err(Error::Shape(format!(
                "im2col3: {:?} on grid {h}x{w}",
                xs.shape()
            )));
        }
        let c = xs.cols();
        let mut out = Tensor::zeros(&[h * w, 9 * c]);
        let (src, dst) = (xs.data(), out.data_mut());
        for y in 0..h {
            for x in 0..w {
                let base = (y * w + x) * 9 * c;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let s = (sy as usize * w + sx as usize) * c;
                        let d = base + (ky * 3 + kx) * c;
                        dst[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::Im2Col3 { x, grid, c }, needs))
    }

    /// Column-wise concatenation of `[n, ca]` and `[n, cb]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::Shape(format!(
                "concat: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (n, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            data.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let out = Tensor::new(&[n, ca + cb], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat { a, b }, needs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x);
        let c = xs.cols();
        if start + len > c {
            return Err(Error::Shape(format!(
                "slice_cols: {start}..{} of {c} columns",
                start + len
            )));
        }
        let n = xs.rows();
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&xs.data()[r * c + start..r * c + start + len]);
        }
        let out = Tensor::new(&[n, len], data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start, len }, needs))
    }

    /// Multi-head self-attention inside the windows of `layout`.
    ///
    /// `qkv` is `[tokens, 3 * heads * head_dim]` laid out as `[q | k | v]`,
    /// `table` is the `[(2w-1)^2, heads]` relative-position bias. Pairs in
    /// different shift regions are excluded from the softmax. The result is
    /// `[tokens, heads * head_dim]` in the original token order.
    pub fn window_attention(
        &mut self,
        qkv: Var,
        table: Var,
        layout: &Arc<WindowLayout>,
        heads: usize,
        head_dim: usize,
    ) -> Result<Var> {
        let inner = heads * head_dim;
        let qs = self.value(qkv);
        if qs.rows() != layout.num_tokens() || qs.cols() != 3 * inner {
            return Err(Error::Shape(format!(
                "window_attention: qkv {:?} for {} tokens x 3*{inner}",
                qs.shape(),
                layout.num_tokens()
            )));
        }
        let ts = self.value(table);
        if ts.shape() != [layout.table_rows(), heads] {
            return Err(Error::Shape(format!(
                "window_attention: bias table {:?}, expected [{}, {heads}]",
                ts.shape(),
                layout.table_rows()
            )));
        }
        let n = layout.window_len();
        let nw = layout.num_windows();
        let scale = 1.0 / (head_dim as f64).sqrt();
        let stride = 3 * inner;
        let src = qs.data();
        let tab = ts.data();
        let rel = layout.rel_index();
        let mut out = Tensor::zeros(&[layout.num_tokens(), inner]);
        let mut probs = vec![0.0; nw * heads * n * n];
        let mut q = vec![0.0; n * head_dim];
        let mut k = vec![0.0; n * head_dim];
        let mut v = vec![0.0; n * head_dim];
        let dst = out.data_mut();
        for w in 0..nw {
            let toks = layout.window_tokens(w);
            let regions = layout.window_regions(w);
            for h in 0..heads {
                let off = h * head_dim;
                for (a, &t) in toks.iter().enumerate() {
                    let row = &src[t * stride..(t + 1) * stride];
                    q[a * head_dim..(a + 1) * head_dim].copy_from_slice(&row[off..off + head_dim]);
                    k[a * head_dim..(a + 1) * head_dim]
                        .copy_from_slice(&row[inner + off..inner + off + head_dim]);
                    v[a * head_dim..(a + 1) * head_dim]
                        .copy_from_slice(&row[2 * inner + off..2 * inner + off + head_dim]);
                }
                let p = &mut probs[(w * heads + h) * n * n..(w * heads + h + 1) * n * n];
                for a in 0..n {
                    let qa = &q[a * head_dim..(a + 1) * head_dim];
                    let prow = &mut p[a * n..(a + 1) * n];
                    let mut max = f64::NEG_INFINITY;
                    for b in 0..n {
                        if regions.is_some_and(|r| r[a] != r[b]) {
                            prow[b] = f64::NEG_INFINITY;
                            continue;
                        }
                        let kb = &k[b * head_dim..(b + 1) * head_dim];
                        let dot: f64 = qa.iter().zip(kb).map(|(x, y)| x * y).sum();
                        let s = dot * scale + tab[rel[a * n + b] * heads + h];
                        prow[b] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for s in prow.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let inv = 1.0 / sum;
                    prow.iter_mut().for_each(|s| *s *= inv);
                    let o = &mut dst[toks[a] * inner + off..toks[a] * inner + off + head_dim];
                    for (b, &pb) in prow.iter().enumerate() {
                        if pb == 0.0 {
                            continue;
                        }
                        let vb = &v[b * head_dim..(b + 1) * head_dim];
                        for (od, vd) in o.iter_mut().zip(vb) {
                            *od += pb * vd;
                        }
                    }
                }
            }
        }
        let needs = self.needs(qkv) || self.needs(table);
        Ok(self.push(
            out,
            Op::WindowAttention {
                qkv,
                table,
                layout: Arc::clone(layout),
                heads,
                head_dim,
                probs,
            },
            needs,
        ))
    }

    /// Attention probabilities recorded by a [`Graph::window_attention`] node,
    /// laid out `[window, head, query, key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::WindowAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean squared error against a constant target; a `[1]` scalar.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xs = self.value(x);
        if xs.len() != target.len() {
            return Err(Error::Shape(format!(
                "mse: {:?} vs target {:?}",
                xs.shape(),
                target.shape()
            )));
        }
        let sum: f64 = xs
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let out = Tensor::scalar(sum / xs.len() as f64);
        let needs = self.needs(x);
        Ok(self.push(
            out,
            Op::Mse {
                x,
                target: target.clone(),
            },
            needs,
        ))
    }

    /// HSL lightness of `x [n, 3]` as `[n, 1]`.
    pub fn lightness(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        if xs.cols() != 3 {
            return Err(Error::Shape(format!("lightness: {:?}", xs.shape())));
        }
        let n = xs.rows();
        let mut hi = Vec::with_capacity(n);
        let mut lo = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n);
        for px in xs.data().chunks_exact(3) {
            let mut h = 0u8;
            let mut l = 0u8;
            for c in 1..3u8 {
                if px[c as usize] > px[h as usize] {
                    h = c;
                }
                if px[c as usize] < px[l as usize] {
                    l = c;
                }
            }
            data.push(0.5 * (px[h as usize] + px[l as usize]));
            hi.push(h);
            lo.push(l);
        }
        let out = Tensor::new(&[n, 1], data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Lightness { x, hi, lo }, needs))
    }

    /// `sum_i w_i * s_i` over `[1]` scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::Shape(format!("weighted_sum: term {:?}", t.shape())));
            }
            total += w * t.item();
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar `loss`, returning gradients for every
    /// parameter that influenced it.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut out = Gradients::for_store(self.params);
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if let Value::Param(id) = node.value {
                out.accumulate(id, g);
                continue;
            }
            self.backward_op(&node.op, Var(i), g, &mut grads);
        }
        out
    }

    fn backward_op(&self, op: &Op, me: Var, g: Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.value(*x), self.value(*w));
                let (n, din, dout) = (xs.rows(), ws.shape()[0], ws.shape()[1]);
                if self.needs(*x) {
                    let dx = slot(grads, *x, xs.shape());
                    gemm(
                        n,
                        dout,
                        din,
                        g.data(),
                        (dout, 1),
                        ws.data(),
                        (1, dout),
                        1.0,
                        dx.data_mut(),
                        din,
                    );
                }
                if self.needs(*w) {
                    let dw = slot(grads, *w, ws.shape());
                    gemm(
                        din,
                        n,
                        dout,
                        xs.data(),
                        (1, din),
                        g.data(),
                        (dout, 1),
                        1.0,
                        dw.data_mut(),
                        dout,
                    );
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = slot(grads, *b, self.shape(*b));
                        for row in g.data().chunks_exact(dout) {
                            for (d, v) in db.data_mut().iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
                if self.needs(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let mut da = g.clone();
                    for (d, v) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *d *= v;
                    }
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = g;
                    for (d, v) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *d *= v;
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::AddRow { x, row } => {
                if self.needs(*row) {
                    let c = self.value(*row).len();
                    let dr = slot(grads, *row, self.shape(*row));
                    for chunk in g.data().chunks_exact(c) {
                        for (d, v) in dr.data_mut().iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::ColTimesRow { col, row } => {
                let (cv, rv) = (self.value(*col), self.value(*row));
                let c = rv.len();
                if self.needs(*col) {
                    let dc = slot(grads, *col, cv.shape());
                    for (d, chunk) in dc.data_mut().iter_mut().zip(g.data().chunks_exact(c)) {
                        *d += chunk.iter().zip(rv.data()).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if self.needs(*row) {
                    let dr = slot(grads, *row, rv.shape());
                    for (chunk, s) in g.data().chunks_exact(c).zip(cv.data()) {
                        for (d, v) in dr.data_mut().iter_mut().zip(chunk) {
                            *d += v * s;
                        }
                    }
                }
            }
            Op::Unary { x, kind } => {
                if !self.needs(*x) {
                    return;
                }
                let xs = self.value(*x).data();
                let ys = self.value(me).data();
                let mut dx = g;
                let d = dx.data_mut();
                match kind {
                    Unary::Tanh => {
                        for (d, y) in d.iter_mut().zip(ys) {
                            *d *= 1.0 - y * y;
                        }
                    }
                    Unary::Exp => {
                        for (d, y) in d.iter_mut().zip(ys) {
                            *d *= y;
                        }
                    }
                    Unary::Softplus => {
                        for (d, x) in d.iter_mut().zip(xs) {
                            *d *= sigmoid(*x);
                        }
                    }
                    Unary::Relu => {
                        for (d, x) in d.iter_mut().zip(xs) {
                            if *x < 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    Unary::Gelu => {
                        for (d, x) in d.iter_mut().zip(xs) {
                            *d *= gelu(*x).1;
                        }
                    }
                    Unary::OneMinusExpNeg => {
                        for (d, x) in d.iter_mut().zip(xs) {
                            *d *= (-x).exp();
                        }
                    }
                    Unary::Clamp01 => {
                        for (d, x) in d.iter_mut().zip(xs) {
                            if !(0.0..=1.0).contains(x) {
                                *d = 0.0;
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let dg = slot(grads, *gamma, self.shape(*gamma));
                    for (gr, xr) in g.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((d, gv), xv) in dg.data_mut().iter_mut().zip(gr).zip(xr) {
                            *d += gv * xv;
                        }
                    }
                }
                if self.needs(*beta) {
                    let db = slot(grads, *beta, self.shape(*beta));
                    for gr in g.data().chunks_exact(c) {
                        for (d, gv) in db.data_mut().iter_mut().zip(gr) {
                            *d += gv;
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    let inv_c = 1.0 / c as f64;
                    for (r, ((gr, xr), dr)) in g
                        .data()
                        .chunks_exact(c)
                        .zip(xhat.chunks_exact(c))
                        .zip(dx.data_mut().chunks_exact_mut(c))
                        .enumerate()
                    {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dxh = gr[j] * gam[j];
                            s1 += dxh;
                            s2 += dxh * xr[j];
                        }
                        s1 *= inv_c;
                        s2 *= inv_c;
                        for j in 0..c {
                            dr[j] = inv_std[r] * (gr[j] * gam[j] - s1 - xr[j] * s2);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::LayerNormAll {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let dg = slot(grads, *gamma, self.shape(*gamma));
                    for ((d, gv), xv) in dg.data_mut().iter_mut().zip(g.data()).zip(xhat) {
                        *d += gv * xv;
                    }
                }
                if self.needs(*beta) {
                    let db = slot(grads, *beta, self.shape(*beta));
                    db.add_assign(&g);
                }
                if self.needs(*x) {
                    let n = xhat.len() as f64;
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for ((gv, gm), xv) in g.data().iter().zip(gam).zip(xhat) {
                        let dxh = gv * gm;
                        s1 += dxh;
                        s2 += dxh * xv;
                    }
                    s1 /= n;
                    s2 /= n;
                    let data = g
                        .data()
                        .iter()
                        .zip(gam)
                        .zip(xhat)
                        .map(|((gv, gm), xv)| inv_std * (gv * gm - s1 - xv * s2))
                        .collect();
                    let dx = Tensor::new(self.shape(*x), data).expect("shape preserved");
                    accumulate(grads, *x, dx);
                }
            }
            Op::Patchify { x, grid, c, p } => {
                if !self.needs(*x) {
                    return;
                }
                let (h, w) = *grid;
                let (c, p) = (*c, *p);
                let (oh, ow) = (h / p, w / p);
                let oc = p * p * c;
                let dx = slot(grads, *x, &[h * w, c]);
                let d = dx.data_mut();
                let src = g.data();
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = (oy * ow + ox) * oc;
                        for dy in 0..p {
                            for ddx in 0..p {
                                let t = ((oy * p + dy) * w + ox * p + ddx) * c;
                                let s = base + (dy * p + ddx) * c;
                                for ch in 0..c {
                                    d[t + ch] += src[s + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::PixelShuffle { x, grid, c, r } => {
                if !self.needs(*x) {
                    return;
                }
                let (h, w) = *grid;
                let (c, r) = (*c, *r);
                let ic = c * r * r;
                let ow = w * r;
                let dx = slot(grads, *x, &[h * w, ic]);
                let d = dx.data_mut();
                let src = g.data();
                for y in 0..h {
                    for xx in 0..w {
                        let t = (y * w + xx) * ic;
                        for i in 0..r {
                            for j in 0..r {
                                let s = ((y * r + i) * ow + xx * r + j) * c;
                                for ch in 0..c {
                                    d[t + ch * r * r + i * r + j] += src[s + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::Im2Col3 { x, grid, c } => {
                if !self.needs(*x) {
                    return;
                }
                let (h, w) = *grid;
                let c = *c;
                let dx = slot(grads, *x, &[h * w, c]);
                let d = dx.data_mut();
                let src = g.data();
                for y in 0..h {
                    for xx in 0..w {
                        let base = (y * w + xx) * 9 * c;
                        for ky in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let t = (sy as usize * w + sx as usize) * c;
                                let s = base + (ky * 3 + kx) * c;
                                for ch in 0..c {
                                    d[t + ch] += src[s + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let n = self.value(*a).rows();
                let rows = || g.data().chunks_exact(ca + cb);
                if self.needs(*a) {
                    let mut data = Vec::with_capacity(n * ca);
                    rows().for_each(|r| data.extend_from_slice(&r[..ca]));
                    accumulate(grads, *a, Tensor::new(self.shape(*a), data).expect("shape"));
                }
                if self.needs(*b) {
                    let mut data = Vec::with_capacity(n * cb);
                    rows().for_each(|r| data.extend_from_slice(&r[ca..]));
                    accumulate(grads, *b, Tensor::new(self.shape(*b), data).expect("shape"));
                }
            }
            Op::SliceCols { x, start, len } => {
                if !self.needs(*x) {
                    return;
                }
                let c = self.value(*x).cols();
                let dx = slot(grads, *x, self.shape(*x));
                for (dr, gr) in dx.data_mut().chunks_exact_mut(c).zip(g.data().chunks_exact(*len)) {
                    for (d, v) in dr[*start..*start + *len].iter_mut().zip(gr) {
                        *d += v;
                    }
                }
            }
            Op::WindowAttention {
                qkv,
                table,
                layout,
                heads,
                head_dim,
                probs,
            } => {
                self.backward_attention(*qkv, *table, layout, *heads, *head_dim, probs, &g, grads);
            }
            Op::Mse { x, target } => {
                if !self.needs(*x) {
                    return;
                }
                let xs = self.value(*x);
                let s = 2.0 * g.item() / xs.len() as f64;
                let data = xs
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| s * (a - b))
                    .collect();
                accumulate(grads, *x, Tensor::new(xs.shape(), data).expect("shape"));
            }
            Op::Lightness { x, hi, lo } => {
                if !self.needs(*x) {
                    return;
                }
                let dx = slot(grads, *x, self.shape(*x));
                let d = dx.data_mut();
                for (i, gv) in g.data().iter().enumerate() {
                    d[i * 3 + hi[i] as usize] += 0.5 * gv;
                    d[i * 3 + lo[i] as usize] += 0.5 * gv;
                }
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    if self.needs(v) {
                        accumulate(grads, v, Tensor::scalar(w * g.item()));
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_attention(
        &self,
        qkv: Var,
        table: Var,
        layout: &WindowLayout,
        heads: usize,
        head_dim: usize,
        probs: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let inner = heads * head_dim;
        let stride = 3 * inner;
        let n = layout.window_len();
        let scale = 1.0 / (head_dim as f64).sqrt();
        let src = self.value(qkv).data();
        let rel = layout.rel_index();
        let mut dqkv = Tensor::zeros(self.shape(qkv));
        let mut dtable = Tensor::zeros(self.shape(table));
        let mut q = vec![0.0; n * head_dim];
        let mut k = vec![0.0; n * head_dim];
        let mut v = vec![0.0; n * head_dim];
        let mut dout = vec![0.0; n * head_dim];
        let mut ds = vec![0.0; n * n];
        let gd = g.data();
        for w in 0..layout.num_windows() {
            let toks = layout.window_tokens(w);
            for h in 0..heads {
                let off = h * head_dim;
                for (a, &t) in toks.iter().enumerate() {
                    let row = &src[t * stride..(t + 1) * stride];
                    q[a * head_dim..(a + 1) * head_dim].copy_from_slice(&row[off..off + head_dim]);
                    k[a * head_dim..(a + 1) * head_dim]
                        .copy_from_slice(&row[inner + off..inner + off + head_dim]);
                    v[a * head_dim..(a + 1) * head_dim]
                        .copy_from_slice(&row[2 * inner + off..2 * inner + off + head_dim]);
                    dout[a * head_dim..(a + 1) * head_dim]
                        .copy_from_slice(&gd[t * inner + off..t * inner + off + head_dim]);
                }
                let p = &probs[(w * heads + h) * n * n..(w * heads + h + 1) * n * n];
                let dq_base = &mut dqkv.data_mut()[..];
                // dV and dS
                for a in 0..n {
                    let da = &dout[a * head_dim..(a + 1) * head_dim];
                    let prow = &p[a * n..(a + 1) * n];
                    let dsrow = &mut ds[a * n..(a + 1) * n];
                    let mut dot_pd = 0.0;
                    for b in 0..n {
                        let vb = &v[b * head_dim..(b + 1) * head_dim];
                        let dp: f64 = da.iter().zip(vb).map(|(x, y)| x * y).sum();
                        dsrow[b] = dp;
                        dot_pd += prow[b] * dp;
                        if prow[b] != 0.0 {
                            let tb = toks[b];
                            let dv = &mut dq_base
                                [tb * stride + 2 * inner + off..tb * stride + 2 * inner + off + head_dim];
                            for (d, x) in dv.iter_mut().zip(da) {
                                *d += prow[b] * x;
                            }
                        }
                    }
                    for b in 0..n {
                        dsrow[b] = prow[b] * (dsrow[b] - dot_pd);
                    }
                }
                let dt = dtable.data_mut();
                for a in 0..n {
                    let ta = toks[a];
                    for b in 0..n {
                        let s = ds[a * n + b];
                        if s == 0.0 {
                            continue;
                        }
                        dt[rel[a * n + b] * heads + h] += s;
                        let tb = toks[b];
                        let ss = s * scale;
                        for d in 0..head_dim {
                            dq_base[ta * stride + off + d] += ss * k[b * head_dim + d];
                            dq_base[tb * stride + inner + off + d] += ss * q[a * head_dim + d];
                        }
                    }
                }
            }
        }
        if self.needs(qkv) {
            accumulate(grads, qkv, dqkv);
        }
        if self.needs(table) {
            accumulate(grads, table, dtable);
        }
    }
}
