//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a node
//! holding its value and enough saved state to push gradients back to its
//! parents; because parents are always recorded first, a single reverse sweep
//! over the node list visits every node once in topological order.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm, layer_norm_kernel, softmax_rows, MatView, PowerIteration, Tensor};

/// Additive mask value for future positions.
pub const MASK_VALUE: f32 = -1e9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    MulRow {
        x: Var,
        scale: Var,
    },
    Scale(Var, f32),
    Tanh(Var),
    SquaredRelu(Var),
    CausalMask(Var),
    Softmax(Var),
    AffineClamp {
        x: Var,
        mul: f32,
        /// True where the pre-clamp value was strictly inside the bounds.
        pass: Vec<bool>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    SplitHeads {
        x: Var,
        part: usize,
        heads: HeadLayout,
    },
    MergeHeads {
        x: Var,
        heads: HeadLayout,
    },
    Rotary {
        x: Var,
        cos: Vec<f32>,
        sin: Vec<f32>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    SigmaReparam {
        w: Var,
        gamma: Var,
        u: Vec<f32>,
        v: Vec<f32>,
        sigma: f64,
    },
    Sum(Var),
}

/// Geometry for moving between `[batch·seq, parts·heads·head_dim]` and
/// `[batch·heads, seq, head_dim]` layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Number of fused projections in the source row (3 for QKV, 1 otherwise).
    pub parts: usize,
}

impl HeadLayout {
    fn width(&self) -> usize {
        self.parts * self.heads * self.head_dim
    }

    /// Offset into the fused row for (part, head, d) and into the split
    /// tensor for (batch, head, t, d).
    fn for_each(&self, part: usize, mut f: impl FnMut(usize, usize)) {
        let c = self.heads * self.head_dim;
        let w = self.width();
        for b in 0..self.batch {
            for h in 0..self.heads {
                for t in 0..self.seq {
                    let src = (b * self.seq + t) * w + part * c + h * self.head_dim;
                    let dst = ((b * self.heads + h) * self.seq + t) * self.head_dim;
                    for d in 0..self.head_dim {
                        f(src + d, dst + d);
                    }
                }
            }
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value.data()[0]
    }

    /// `op(a) · op(b)` where `op` optionally transposes the trailing two
    /// axes. Rank-3 operands are multiplied batch by batch.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ba, ar, ac) = split_batch(av.shape())?;
        let (bb, br, bc) = split_batch(bv.shape())?;
        if ba != bb {
            return Err(dim_err!("batched matmul over {ba} vs {bb} batches"));
        }
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(dim_err!(
                "matmul inner extents differ: {:?} x {:?} (ta={ta}, tb={tb})",
                av.shape(),
                bv.shape()
            ));
        }
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            let am = MatView::new(&av.data()[i * ar * ac..], ar, ac).maybe_t(ta);
            let bm = MatView::new(&bv.data()[i * br * bc..], br, bc).maybe_t(tb);
            gemm(am, bm, &mut out[i * m * n..(i + 1) * m * n], false);
        }
        let shape = if av.rank() == 3 {
            vec![ba, m, n]
        } else {
            vec![m, n]
        };
        let req = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, ta, tb }, req))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "add")?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let req = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "mul")?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let req = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), req))
    }

    /// Multiplies every row of `x` channel-wise by `scale` (length = last axis).
    pub fn mul_row(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(scale));
        let d = xv.last_dim();
        if sv.len() != d {
            return Err(dim_err!("row scale of length {} for width {d}", sv.len()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            row.iter_mut().zip(sv.data()).for_each(|(a, s)| *a *= s);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let req = self.needs(&[x, scale]);
        Ok(self.push(out, Op::MulRow { x, scale }, req))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).scale(c);
        let req = self.needs(&[x]);
        self.push(out, Op::Scale(x, c), req)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f32::tanh);
        let req = self.needs(&[x]);
        self.push(out, Op::Tanh(x), req)
    }

    pub fn squared_relu(&mut self, x: Var) -> Var {
        let out = crate::tensor::squared_relu(self.value(x));
        let req = self.needs(&[x]);
        self.push(out, Op::SquaredRelu(x), req)
    }

    /// Adds [`MASK_VALUE`] above the diagonal of every trailing `seq × seq` block.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.last_dim();
        if xv.rank() < 2 || xv.shape()[xv.rank() - 2] != s {
            return Err(dim_err!(
                "causal mask needs square trailing axes, got {:?}",
                xv.shape()
            ));
        }
        let mut data = xv.data().to_vec();
        for block in data.chunks_exact_mut(s * s) {
            for i in 0..s {
                for j in i + 1..s {
                    block[i * s + j] += MASK_VALUE;
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let req = self.needs(&[x]);
        Ok(self.push(out, Op::CausalMask(x), req))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = crate::tensor::softmax(self.value(x));
        let req = self.needs(&[x]);
        self.push(out, Op::Softmax(x), req)
    }

    /// `clamp(mul·x + add, lo, hi)`; entries that hit a bound pass no gradient.
    pub fn affine_clamp(&mut self, x: Var, mul: f32, add: f32, lo: f32, hi: f32) -> Var {
        let xv = self.value(x);
        let mut pass = Vec::with_capacity(xv.len());
        let data = xv
            .data()
            .iter()
            .map(|&v| {
                let pre = mul * v + add;
                pass.push(pre > lo && pre < hi);
                pre.clamp(lo, hi)
            })
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let req = self.needs(&[x]);
        self.push(out, Op::AffineClamp { x, mul, pass }, req)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let out =
            crate::tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let xv = self.value(x);
        let (_, stats) = layer_norm_kernel(
            xv.data(),
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        );
        let req = self.needs(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: stats.mean,
                rstd: stats.rstd,
            },
            req,
        ))
    }

    /// Extracts projection `part` of a fused `[batch·seq, parts·C]` tensor as
    /// `[batch·heads, seq, head_dim]`.
    pub fn split_heads(&mut self, x: Var, part: usize, heads: HeadLayout) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != [heads.batch * heads.seq, heads.width()] || part >= heads.parts {
            return Err(dim_err!("split_heads of {:?} with {:?}", xv.shape(), heads));
        }
        let mut out = vec![0.0; heads.batch * heads.heads * heads.seq * heads.head_dim];
        let src = xv.data();
        heads.for_each(part, |s, d| out[d] = src[s]);
        let shape = vec![heads.batch * heads.heads, heads.seq, heads.head_dim];
        let req = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SplitHeads { x, part, heads },
            req,
        ))
    }

    /// Inverse of [`split_heads`](Self::split_heads) for a single projection.
    pub fn merge_heads(&mut self, x: Var, heads: HeadLayout) -> Result<Var> {
        let heads = HeadLayout { parts: 1, ..heads };
        let xv = self.value(x);
        let expected = [heads.batch * heads.heads, heads.seq, heads.head_dim];
        if xv.shape() != expected {
            return Err(dim_err!(
                "merge_heads of {:?}, expected {:?}",
                xv.shape(),
                expected
            ));
        }
        let mut out = vec![0.0; xv.len()];
        let src = xv.data();
        heads.for_each(0, |s, d| out[s] = src[d]);
        let shape = vec![heads.batch * heads.seq, heads.width()];
        let req = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MergeHeads { x, heads }, req))
    }

    /// Rotates consecutive feature pairs of `[.., seq, head_dim]` by
    /// `pos · base^(−2i/head_dim)`, positions counted from 0 along `seq`.
    pub fn rotary(&mut self, x: Var, base: f32) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if !d.is_multiple_of(2) || xv.rank() < 2 {
            return Err(Error::Config(format!(
                "rotary needs an even head dim, got {d}"
            )));
        }
        let seq = xv.shape()[xv.rank() - 2];
        let (cos, sin) = rotary_tables(seq, d, base);
        let out = rotate(xv.data(), seq, d, &cos, &sin, 1.0);
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let req = self.needs(&[x]);
        Ok(self.push(out, Op::Rotary { x, cos, sin }, req))
    }

    /// Row lookup into a `[rows, width]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, width) = tv.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(Error::Input(format!(
                    "index {id} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(&tv.data()[id * width..(id + 1) * width]);
        }
        let out = Tensor::new([ids.len(), width], out)?;
        let req = self.needs(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            req,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = lv.dims2()?;
        if rows != targets.len() {
            return Err(dim_err!("{} targets for {rows} logit rows", targets.len()));
        }
        let probs = softmax_rows(lv.data(), vocab);
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::Input(format!(
                    "target {t} out of range for vocab {vocab}"
                )));
            }
            let row = &lv.data()[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = f64::from(max)
                + row
                    .iter()
                    .map(|&x| f64::from(x - max).exp())
                    .sum::<f64>()
                    .ln();
            total += lse - f64::from(row[t]);
        }
        let loss = (total / rows as f64) as f32;
        let req = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            req,
        ))
    }

    /// `(γ / σ) · W` with `σ = uᵀWv` for fixed power-iteration vectors.
    pub fn sigma_reparam(&mut self, w: Var, gamma: Var, power: &PowerIteration) -> Result<Var> {
        let wv = self.value(w);
        let (m, n) = wv.dims2()?;
        if power.u.len() != m || power.v.len() != n {
            return Err(dim_err!(
                "power iteration vectors do not match {m}x{n} weight"
            ));
        }
        let sigma = power.rayleigh(wv);
        if sigma == 0.0 || !sigma.is_finite() {
            return Err(Error::Undefined(format!(
                "spectral reparameterization of a weight with sigma = {sigma}"
            )));
        }
        let g = f64::from(self.value(gamma).data()[0]);
        let out = wv.scale((g / sigma) as f32);
        let req = self.needs(&[w, gamma]);
        Ok(self.push(
            out,
            Op::SigmaReparam {
                w,
                gamma,
                u: power.u.clone(),
                v: power.v.clone(),
                sigma,
            },
            req,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self
            .value(x)
            .data()
            .iter()
            .map(|&v| f64::from(v))
            .sum::<f64>();
        let req = self.needs(&[x]);
        self.push(Tensor::scalar(total as f32), Op::Sum(x), req)
    }

    /// Back-propagates from a scalar node, leaving gradients on every node
    /// that depends on a trainable leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(dim_err!(
                "backward from non-scalar {:?}",
                self.value(root).shape()
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (parent, pg) in contributions {
                let node = &mut self.nodes[parent.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(pg.iter())
                        .for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), pg)?),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Vec<f32>)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        let val = |v: Var| self.value(v);
        let out = match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(a), val(b));
                let (batches, ar, ac) = split_batch(av.shape())?;
                let (_, br, bc) = split_batch(bv.shape())?;
                let (m, n) = (
                    node.value.shape()[node.value.rank() - 2],
                    node.value.last_dim(),
                );
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for bi in 0..batches {
                    let gm = MatView::new(&gd[bi * m * n..], m, n);
                    let am = MatView::new(&av.data()[bi * ar * ac..], ar, ac);
                    let bm = MatView::new(&bv.data()[bi * br * bc..], br, bc);
                    let opa = am.maybe_t(ta);
                    let opb = bm.maybe_t(tb);
                    let da_slice = &mut da[bi * ar * ac..(bi + 1) * ar * ac];
                    if ta {
                        gemm(opb, gm.t(), da_slice, false);
                    } else {
                        gemm(gm, opb.t(), da_slice, false);
                    }
                    let db_slice = &mut db[bi * br * bc..(bi + 1) * br * bc];
                    if tb {
                        gemm(gm.t(), opa, db_slice, false);
                    } else {
                        gemm(opa.t(), gm, db_slice, false);
                    }
                }
                vec![(a, da), (b, db)]
            }
            &Op::Add(a, b) => vec![(a, gd.to_vec()), (b, gd.to_vec())],
            &Op::Mul(a, b) => {
                let da = gd.iter().zip(val(b).data()).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(val(a).data()).map(|(g, x)| g * x).collect();
                vec![(a, da), (b, db)]
            }
            &Op::MulRow { x, scale } => {
                let (xv, sv) = (val(x), val(scale));
                let d = sv.len();
                let mut dx = vec![0.0; xv.len()];
                let mut ds = vec![0.0f64; d];
                for ((gr, xr), dr) in gd
                    .chunks_exact(d)
                    .zip(xv.data().chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                {
                    for j in 0..d {
                        dr[j] = gr[j] * sv.data()[j];
                        ds[j] += f64::from(gr[j]) * f64::from(xr[j]);
                    }
                }
                vec![(x, dx), (scale, ds.into_iter().map(|v| v as f32).collect())]
            }
            &Op::Scale(x, c) => vec![(x, gd.iter().map(|g| g * c).collect())],
            &Op::Tanh(x) => {
                let y = node.value.data();
                vec![(
                    x,
                    gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                )]
            }
            &Op::SquaredRelu(x) => {
                let xv = val(x).data();
                vec![(
                    x,
                    gd.iter()
                        .zip(xv)
                        .map(|(g, &x)| g * 2.0 * x.max(0.0))
                        .collect(),
                )]
            }
            &Op::CausalMask(x) => vec![(x, gd.to_vec())],
            &Op::Softmax(x) => {
                let y = node.value.data();
                let w = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .chunks_exact(w)
                    .zip(gd.chunks_exact(w))
                    .zip(dx.chunks_exact_mut(w))
                {
                    let dot: f64 = yr
                        .iter()
                        .zip(gr)
                        .map(|(&a, &b)| f64::from(a) * f64::from(b))
                        .sum();
                    let dot = dot as f32;
                    for j in 0..w {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(x, dx)]
            }
            Op::AffineClamp { x, mul, pass, .. } => {
                let dx = gd
                    .iter()
                    .zip(pass)
                    .map(|(g, &p)| if p { g * mul } else { 0.0 })
                    .collect();
                vec![(*x, dx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let (xv, gv) = (val(*x), val(*gain));
                let d = gv.len();
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0f64; d];
                let mut dbias = vec![0.0f64; d];
                let mut xhat = vec![0.0f32; d];
                let mut dxhat = vec![0.0f32; d];
                for (r, ((xr, gr), dr)) in xv
                    .data()
                    .chunks_exact(d)
                    .zip(gd.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut mean_dxhat = 0.0f64;
                    let mut mean_dxhat_xhat = 0.0f64;
                    for j in 0..d {
                        xhat[j] = (xr[j] - mu) * rs;
                        dxhat[j] = gr[j] * gv.data()[j];
                        dgain[j] += f64::from(gr[j]) * f64::from(xhat[j]);
                        dbias[j] += f64::from(gr[j]);
                        mean_dxhat += f64::from(dxhat[j]);
                        mean_dxhat_xhat += f64::from(dxhat[j]) * f64::from(xhat[j]);
                    }
                    let m1 = (mean_dxhat / d as f64) as f32;
                    let m2 = (mean_dxhat_xhat / d as f64) as f32;
                    for j in 0..d {
                        dr[j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect();
                vec![(*x, dx), (*gain, to32(dgain)), (*bias, to32(dbias))]
            }
            &Op::SplitHeads { x, part, heads } => {
                let mut dx = vec![0.0; val(x).len()];
                heads.for_each(part, |s, d| dx[s] = gd[d]);
                vec![(x, dx)]
            }
            &Op::MergeHeads { x, heads } => {
                let mut dx = vec![0.0; val(x).len()];
                heads.for_each(0, |s, d| dx[d] = gd[s]);
                vec![(x, dx)]
            }
            Op::Rotary { x, cos, sin } => {
                let xv = val(*x);
                let seq = xv.shape()[xv.rank() - 2];
                vec![(*x, rotate(gd, seq, xv.last_dim(), cos, sin, -1.0))]
            }
            Op::Gather { table, ids } => {
                let tv = val(*table);
                let width = tv.last_dim();
                let mut dt = vec![0.0; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    dt[id * width..(id + 1) * width]
                        .iter_mut()
                        .zip(&gd[r * width..(r + 1) * width])
                        .for_each(|(a, b)| *a += b);
                }
                vec![(*table, dt)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = val(*logits).last_dim();
                let scale = gd[0] / targets.len() as f32;
                let mut dl: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * vocab + t] -= scale;
                }
                vec![(*logits, dl)]
            }
            Op::SigmaReparam {
                w,
                gamma,
                u,
                v,
                sigma,
            } => {
                // d/dW (γ/σ)W with dσ/dW = u vᵀ.
                let wv = val(*w);
                let gam = f64::from(val(*gamma).data()[0]);
                let n = v.len();
                let gw: f64 = gd
                    .iter()
                    .zip(wv.data())
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum();
                let s = gam / sigma;
                let corr = gam * gw / (sigma * sigma);
                let mut dw = Vec::with_capacity(wv.len());
                for (idx, &gi) in gd.iter().enumerate() {
                    let (r, c) = (idx / n, idx % n);
                    let uv = f64::from(u[r]) * f64::from(v[c]);
                    dw.push((s * f64::from(gi) - corr * uv) as f32);
                }
                vec![(*w, dw), (*gamma, vec![(gw / sigma) as f32])]
            }
            &Op::Sum(x) => vec![(x, vec![gd[0]; val(x).len()])],
        };
        Ok(out)
    }
}

fn split_batch(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [r, c] => Ok((1, r, c)),
        [b, r, c] => Ok((b, r, c)),
        _ => Err(dim_err!("matmul expects rank 2 or 3, got {:?}", shape)),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{what} of {:?} and {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Per-position cos/sin tables of shape `[seq, head_dim/2]`.
pub(crate) fn rotary_tables(seq: usize, head_dim: usize, base: f32) -> (Vec<f32>, Vec<f32>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(seq * half);
    let mut sin = Vec::with_capacity(seq * half);
    for pos in 0..seq {
        for i in 0..half {
            let freq = f64::from(base).powf(-2.0 * i as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            cos.push(angle.cos() as f32);
            sin.push(angle.sin() as f32);
        }
    }
    (cos, sin)
}

/// Applies the pair rotation (`dir = 1`) or its inverse (`dir = −1`).
fn rotate(data: &[f32], seq: usize, d: usize, cos: &[f32], sin: &[f32], dir: f32) -> Vec<f32> {
    let half = d / 2;
    let mut out = vec![0.0; data.len()];
    for (row_idx, (src, dst)) in data
        .chunks_exact(d)
        .zip(out.chunks_exact_mut(d))
        .enumerate()
    {
        let pos = row_idx % seq;
        for i in 0..half {
            let (c, s) = (cos[pos * half + i], dir * sin[pos * half + i]);
            let (x0, x1) = (src[2 * i], src[2 * i + 1]);
            dst[2 * i] = x0 * c - x1 * s;
            dst[2 * i + 1] = x0 * s + x1 * c;
        }
    }
    out
}
