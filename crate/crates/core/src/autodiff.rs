//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks it in
//! reverse and returns gradients for the parameters that were bound with
//! [`Tape::param`]. The same tape runs inference, so training and sampling
//! share one forward implementation.
//!
//! Feature maps are stored channel-major as `(channels, height * width)`;
//! token sequences as `(positions, width)`.

use std::borrow::Cow;

use crate::matrix::{gemm, matmul, matmul_nt, matmul_tn, Matrix, View, ViewMut};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered learnable parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// Spatial layout of a convolution over a `(channels, height * width)` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad() - self.kernel) / self.stride + 1
    }
}

fn im2col(x: &Matrix, g: ConvGeom) -> Matrix {
    let (cin, k, p) = (x.rows(), g.kernel, g.pad() as isize);
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut cols = Matrix::zeros(cin * k * k, ho * wo);
    let xs = x.as_slice();
    let out = cols.as_mut_slice();
    for c in 0..cin {
        let plane = &xs[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut out[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride) as isize + kx as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Matrix, cin: usize, g: ConvGeom) -> Matrix {
    let (k, p) = (g.kernel, g.pad() as isize);
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut x = Matrix::zeros(cin, g.height * g.width);
    let cs = cols.as_slice();
    let xs = x.as_mut_slice();
    for c in 0..cin {
        let plane = &mut xs[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cs[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride) as isize + kx as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            plane[iy as usize * g.width + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn softmax_rows_in_place(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

/// Multi-head scaled dot-product attention. Heads split the feature axis
/// into equal contiguous blocks. Returns the concatenated head outputs and
/// the per-head probability matrices `(q.rows, k.rows)`.
pub(crate) fn mha_forward(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> (Matrix, Vec<Matrix>) {
    let d = q.cols() / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), v.cols());
    let dv = v.cols() / heads;
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut s = Matrix::zeros(q.rows(), k.rows());
        gemm(
            scale,
            View::cols(q, h * d, d),
            View::cols(k, h * d, d).t(),
            0.0,
            ViewMut::of(&mut s),
        );
        softmax_rows_in_place(&mut s);
        gemm(1.0, View::of(&s), View::cols(v, h * dv, dv), 0.0, ViewMut::cols(&mut out, h * dv, dv));
        probs.push(s);
    }
    (out, probs)
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddColBias(Var, Var),
    AddRowBias(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Transpose(Var),
    ConcatRows(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Upsample2x {
        x: Var,
        height: usize,
        width: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Matrix>,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    MseLoss {
        x: Var,
        target: Matrix,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddColBias(a, b)
            | Op::AddRowBias(a, b)
            | Op::ConcatRows(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Silu(a) | Op::Sigmoid(a) | Op::Transpose(a) => vec![*a],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Upsample2x { x, .. } => vec![*x],
            Op::GroupNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::GatherRows { table, .. } => vec![*table],
            Op::MseLoss { x, .. } => vec![*x],
        }
    }
}

struct Node<'p> {
    value: Cow<'p, Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every bound parameter.
pub struct Gradients {
    grads: Vec<(ParamId, Matrix)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().map(|(p, g)| (*p, g))
    }

    pub fn into_vec(self) -> Vec<(ParamId, Matrix)> {
        self.grads
    }
}

pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    track: bool,
}

impl<'p> Tape<'p> {
    /// A tape that records gradient information for bound parameters.
    pub fn training() -> Self {
        Self {
            nodes: Vec::new(),
            track: true,
        }
    }

    /// A tape for forward evaluation only.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            track: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let needs_grad = self.track && op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(m),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, params: &'p ParamSet, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(params.get(id)),
            op: Op::Param(id),
            needs_grad: self.track,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// `x (r, c) + b (r, 1)` broadcast along columns.
    pub fn add_col_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.shape(), (xv.rows(), 1), "column bias shape");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let bias = bv.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|e| *e += bias);
        }
        self.push(out, Op::AddColBias(x, b))
    }

    /// `x (r, c) + b (1, c)` broadcast along rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.shape(), (1, xv.cols()), "row bias shape");
        let mut out = xv.clone();
        let bias = bv.row(0).to_vec();
        for r in 0..out.rows() {
            out.row_mut(r).iter_mut().zip(&bias).for_each(|(e, b)| *e += b);
        }
        self.push(out, Op::AddRowBias(x, b))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        self.push(v, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .vstack(self.value(b))
            .expect("concat_rows width mismatch");
        self.push(v, Op::ConcatRows(a, b))
    }

    /// Convolution with zero padding `kernel / 2`; `w` is `(cout, cin * k * k)`, `b` is `(cout, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols(), geom.height * geom.width, "conv input geometry");
        let cols = im2col(xv, geom);
        let mut out = matmul(self.value(w), &cols);
        let bv = self.value(b);
        for r in 0..out.rows() {
            let bias = bv.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|e| *e += bias);
        }
        self.push(out, Op::Conv2d { x, w, b, geom })
    }

    /// Nearest-neighbour 2x upsampling of a `(c, h * w)` map.
    pub fn upsample2x(&mut self, x: Var, height: usize, width: usize) -> Var {
        let xv = self.value(x);
        let (c, w2) = (xv.rows(), 2 * width);
        let mut out = Matrix::zeros(c, 4 * height * width);
        for ch in 0..c {
            let src = xv.row(ch);
            let dst = out.row_mut(ch);
            for y in 0..2 * height {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * width + xx / 2];
                }
            }
        }
        self.push(out, Op::Upsample2x { x, height, width })
    }

    /// Group normalisation of a `(c, n)` map; `gamma`, `beta` are `(c, 1)`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let (c, n) = xv.shape();
        assert_eq!(c % groups, 0, "channels must divide into groups");
        let per = c / groups * n;
        let mut xhat = Matrix::zeros(c, n);
        let mut inv_std = Vec::with_capacity(groups);
        for g in 0..groups {
            let src = &xv.as_slice()[g * per..(g + 1) * per];
            let mean = src.iter().sum::<f64>() / per as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(is);
            for (d, s) in xhat.as_mut_slice()[g * per..(g + 1) * per].iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut out = xhat.clone();
        for r in 0..c {
            let (ga, be) = (gv.get(r, 0), bv.get(r, 0));
            out.row_mut(r).iter_mut().for_each(|e| *e = *e * ga + be);
        }
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
        )
    }

    /// Per-row layer normalisation of `(n, c)`; `gamma`, `beta` are `(1, c)`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let mut xhat = Matrix::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let src = xv.row(r);
            let mean = src.iter().sum::<f64>() / c as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(is);
            for (d, s) in xhat.row_mut(r).iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
        }
        let (gv, bv) = (self.value(gamma).row(0), self.value(beta).row(0));
        let mut out = xhat.clone();
        for r in 0..n {
            for (i, e) in out.row_mut(r).iter_mut().enumerate() {
                *e = *e * gv[i] + bv[i];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head attention; returns the output var. Probabilities are kept
    /// for the backward pass and can be read with [`Tape::attention_probs`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (out, probs) = mha_forward(self.value(q), self.value(k), self.value(v), heads);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    pub fn attention_probs(&self, v: Var) -> Option<&[Matrix]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Matrix::zeros(indices.len(), tv.cols());
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        self.push(
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    /// Mean squared error against a constant target, as a `1 x 1` value.
    pub fn mse_loss(&mut self, x: Var, target: Matrix) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "mse target shape");
        let n = xv.len() as f64;
        let loss = xv
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        self.push(Matrix::filled(1, 1, loss), Op::MseLoss { x, target })
    }

    /// Gradients of the `1 x 1` node `loss` with respect to bound parameters.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(id) = node.op {
                out.push((id, g));
                continue;
            }
            for (input, contribution) in self.local_grads(i, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        out.sort_by_key(|(id, _)| *id);
        // A parameter bound more than once contributes the sum of its uses.
        let mut merged: Vec<(ParamId, Matrix)> = Vec::with_capacity(out.len());
        for (id, g) in out {
            match merged.last_mut() {
                Some((last, acc)) if *last == id => acc.add_assign(&g),
                _ => merged.push((id, g)),
            }
        }
        Gradients { grads: merged }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_grads(&self, i: usize, g: &Matrix) -> Vec<(Var, Matrix)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) => {
                let mut r = Vec::new();
                if self.wants(*a) {
                    r.push((*a, matmul_nt(g, val(*b))));
                }
                if self.wants(*b) {
                    r.push((*b, matmul_tn(val(*a), g)));
                }
                r
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)),
                (*b, g.zip_map(val(*a), |x, y| x * y)),
            ],
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * s))],
            Op::AddColBias(x, b) => {
                let gb = Matrix::from_fn(g.rows(), 1, |r, _| g.row(r).iter().sum());
                vec![(*x, g.clone()), (*b, gb)]
            }
            Op::AddRowBias(x, b) => {
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    gb.row_mut(0).iter_mut().zip(g.row(r)).for_each(|(a, v)| *a += v);
                }
                vec![(*x, g.clone()), (*b, gb)]
            }
            Op::Silu(a) => {
                let d = g.zip_map(val(*a), |gv, x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    gv * s * (1.0 + x * (1.0 - s))
                });
                vec![(*a, d)]
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                vec![(*a, d)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::ConcatRows(a, b) => {
                let ra = val(*a).rows();
                let c = g.cols();
                let ga = Matrix::from_vec(ra, c, g.as_slice()[..ra * c].to_vec()).unwrap();
                let gb =
                    Matrix::from_vec(g.rows() - ra, c, g.as_slice()[ra * c..].to_vec()).unwrap();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv2d { x, w, b, geom } => {
                let mut r = Vec::new();
                let xv = val(*x);
                if self.wants(*w) {
                    let cols = im2col(xv, *geom);
                    r.push((*w, matmul_nt(g, &cols)));
                }
                if self.wants(*b) {
                    r.push((*b, Matrix::from_fn(g.rows(), 1, |row, _| g.row(row).iter().sum())));
                }
                if self.wants(*x) {
                    let dcols = matmul_tn(val(*w), g);
                    r.push((*x, col2im(&dcols, xv.rows(), *geom)));
                }
                r
            }
            Op::Upsample2x { x, height, width } => {
                let (h, w) = (*height, *width);
                let mut dx = Matrix::zeros(g.rows(), h * w);
                for ch in 0..g.rows() {
                    let src = g.row(ch);
                    let dst = dx.row_mut(ch);
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let (c, n) = g.shape();
                let gv = val(*gamma);
                let mut dgamma = Matrix::zeros(c, 1);
                let mut dbeta = Matrix::zeros(c, 1);
                for r in 0..c {
                    let (gr, xr) = (g.row(r), xhat.row(r));
                    dgamma.set(r, 0, gr.iter().zip(xr).map(|(a, b)| a * b).sum());
                    dbeta.set(r, 0, gr.iter().sum());
                }
                let mut dx = Matrix::zeros(c, n);
                let rows_per = c / groups;
                let m = (rows_per * n) as f64;
                for grp in 0..*groups {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for r in grp * rows_per..(grp + 1) * rows_per {
                        let ga = gv.get(r, 0);
                        for (gg, xh) in g.row(r).iter().zip(xhat.row(r)) {
                            let dxh = gg * ga;
                            s1 += dxh;
                            s2 += dxh * xh;
                        }
                    }
                    let is = inv_std[grp];
                    for r in grp * rows_per..(grp + 1) * rows_per {
                        let ga = gv.get(r, 0);
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let dr = dx.row_mut(r);
                        for j in 0..n {
                            let dxh = gr[j] * ga;
                            dr[j] = is / m * (m * dxh - s1 - xr[j] * s2);
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = g.shape();
                let gv = val(*gamma).row(0);
                let mut dgamma = Matrix::zeros(1, c);
                let mut dbeta = Matrix::zeros(1, c);
                let mut dx = Matrix::zeros(n, c);
                let m = c as f64;
                for r in 0..n {
                    let (gr, xr) = (g.row(r), xhat.row(r));
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..c {
                        dgamma.as_mut_slice()[j] += gr[j] * xr[j];
                        dbeta.as_mut_slice()[j] += gr[j];
                        let dxh = gr[j] * gv[j];
                        s1 += dxh;
                        s2 += dxh * xr[j];
                    }
                    let is = inv_std[r];
                    let dr = dx.row_mut(r);
                    for j in 0..c {
                        let dxh = gr[j] * gv[j];
                        dr[j] = is / m * (m * dxh - s1 - xr[j] * s2);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let d = qv.cols() / heads;
                let dv = vv.cols() / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let mut dq = Matrix::zeros(qv.rows(), qv.cols());
                let mut dk = Matrix::zeros(kv.rows(), kv.cols());
                let mut dvm = Matrix::zeros(vv.rows(), vv.cols());
                for (h, p) in probs.iter().enumerate() {
                    // dV_h = Pᵀ dO_h
                    gemm(1.0, View::of(p).t(), View::cols(g, h * dv, dv), 0.0, ViewMut::cols(&mut dvm, h * dv, dv));
                    // dP = dO_h V_hᵀ
                    let mut dp = Matrix::zeros(p.rows(), p.cols());
                    gemm(1.0, View::cols(g, h * dv, dv), View::cols(vv, h * dv, dv).t(), 0.0, ViewMut::of(&mut dp));
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                    for r in 0..p.rows() {
                        let pr = p.row(r);
                        let dot: f64 = dp.row(r).iter().zip(pr).map(|(a, b)| a * b).sum();
                        for (x, pv) in dp.row_mut(r).iter_mut().zip(pr) {
                            *x = pv * (*x - dot);
                        }
                    }
                    gemm(scale, View::of(&dp), View::cols(kv, h * d, d), 0.0, ViewMut::cols(&mut dq, h * d, d));
                    gemm(scale, View::of(&dp).t(), View::cols(qv, h * d, d), 0.0, ViewMut::cols(&mut dk, h * d, d));
                }
                vec![(*q, dq), (*k, dk), (*v, dvm)]
            }
            Op::GatherRows { table, indices } => {
                let tv = val(*table);
                let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &idx) in indices.iter().enumerate() {
                    dt.row_mut(idx).iter_mut().zip(g.row(r)).for_each(|(a, b)| *a += b);
                }
                vec![(*table, dt)]
            }
            Op::MseLoss { x, target } => {
                let xv = val(*x);
                let s = 2.0 * g.get(0, 0) / xv.len() as f64;
                vec![(*x, xv.zip_map(target, |a, b| s * (a - b)))]
            }
        }
    }
}
