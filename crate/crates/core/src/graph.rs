//! Reverse-mode differentiation over a recorded operation list.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] walks it in reverse. Operations
//! are deliberately coarse (a whole convolution, a whole multi-head
//! attention) so the per-node bookkeeping stays negligible next to the
//! arithmetic.

use crate::error::{shape, Result};
use crate::tensor::{bilinear_taps, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a deformable aggregation: heads `H`, modalities `M`, levels
/// `L`, points `K`. Offsets are laid out `[N, H, M, L, K, 2]` and weights
/// `[N, H, M, L, K]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformDims {
    pub heads: usize,
    pub modalities: usize,
    pub levels: usize,
    pub points: usize,
}

impl DeformDims {
    pub fn per_query(&self) -> usize {
        self.heads * self.modalities * self.levels * self.points
    }

    pub fn index(&self, h: usize, m: usize, l: usize, k: usize) -> usize {
        ((h * self.modalities + m) * self.levels + l) * self.points + k
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxGroups {
        x: Var,
        group: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Deform {
        maps: Vec<(usize, Vec<Var>)>,
        refs: Var,
        offsets: Var,
        weights: Var,
        dims: DeformDims,
    },
    HeadLinear {
        x: Var,
        w: Var,
        heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    ScalarFn {
        parents: Vec<Var>,
        local: Vec<Vec<f64>>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `[C]` vector to every row of a `[.., C]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(b).len() != c {
            return Err(shape(format!("bias of {} for {c} columns", self.value(b).len())));
        }
        let bias = self.data(b);
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bias).map(|(u, v)| u + v))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x, b), &[x, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * s).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// `x W^T + b` for `x: [n, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = (self.value(x).rows(), self.value(x).cols());
        let ws = self.shape(w);
        if ws.len() != 2 || ws[1] != din {
            return Err(shape(format!("linear weight {ws:?} for input width {din}")));
        }
        let dout = ws[0];
        if let Some(b) = b {
            if self.value(b).len() != dout {
                return Err(shape(format!("linear bias {:?} for {dout} outputs", self.shape(b))));
            }
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            let xr = &xd[i * din..(i + 1) * din];
            let orow = &mut out[i * dout..(i + 1) * dout];
            for (o, wr) in orow.iter_mut().zip(wd.chunks(din)) {
                *o = dot(xr, wr);
            }
            if let Some(b) = b {
                for (o, bv) in orow.iter_mut().zip(self.nodes[b.0].value.data()) {
                    *o += bv;
                }
            }
        }
        let mut out_shape = self.shape(x).to_vec();
        *out_shape.last_mut().expect("non-scalar") = dout;
        let value = Tensor::new(out_shape, out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| crate::tensor::sigmoid(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, Op::Sigmoid(a), &[a])
    }

    /// Per-row normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let c = self.value(x).cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape("layer norm parameters do not match width"));
        }
        let xd = self.data(x);
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(xd.len());
        let mut rstd = Vec::with_capacity(xd.len() / c);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                xhat.push(xh);
                out.push(xh * g[j] + bt[j]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Softmax over consecutive groups of `group` values of the flat data.
    pub fn softmax_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        if group == 0 || self.value(x).len() % group != 0 {
            return Err(shape(format!(
                "softmax group {group} does not divide {}",
                self.value(x).len()
            )));
        }
        let data = self
            .data(x)
            .chunks(group)
            .flat_map(crate::tensor::softmax_unchecked)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::SoftmaxGroups { x, group }, &[x]))
    }

    /// 2-D convolution of an `[H, W, Ci]` map with `[Co, k, k, Ci]` kernels.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (h, wd, ci) = match *self.shape(x) {
            [h, w, c] => (h, w, c),
            ref s => return Err(shape(format!("conv input {s:?} is not [H, W, C]"))),
        };
        let (co, k) = match *self.shape(w) {
            [co, k1, k2, c] if k1 == k2 && c == ci => (co, k1),
            ref s => return Err(shape(format!("conv kernel {s:?} for {ci} input channels"))),
        };
        if self.value(b).len() != co {
            return Err(shape("conv bias does not match output channels"));
        }
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(shape("conv kernel larger than padded input"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let (xd, kd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![0.0; ho * wo * co];
        for oy in 0..ho {
            for ox in 0..wo {
                let o = &mut out[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
                o.copy_from_slice(bd);
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xin = &xd[(iy as usize * wd + ix as usize) * ci..][..ci];
                        for (c, ov) in o.iter_mut().enumerate() {
                            let kr = &kd[((c * k + ky) * k + kx) * ci..][..ci];
                            *ov += dot(xin, kr);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![ho, wo, co], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &[x, w, b],
        ))
    }

    /// Concatenates along the last axis; all inputs must have the same row count.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(shape("concat_last row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut s = self.shape(parts[0]).to_vec();
        *s.last_mut().expect("non-scalar") = total;
        let value = Tensor::new(s, out)?;
        Ok(self.push(value, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Stacks `[r_i, C]` tensors into `[sum r_i, C]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != c) {
            return Err(shape("concat_rows widths differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let rows = out.len() / c;
        let value = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `start..start + len` of the `[rows, C]` view.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let c = self.value(x).cols();
        if start + len > self.value(x).rows() {
            return Err(shape("slice_rows out of range"));
        }
        let data = self.data(x)[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let c = self.value(x).cols();
        if start + len > c {
            return Err(shape("slice_last out of range"));
        }
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut s = self.shape(x).to_vec();
        *s.last_mut().expect("non-scalar") = len;
        let value = Tensor::new(s, data)?;
        Ok(self.push(value, Op::SliceLast { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(new_shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Scalar node whose local gradient with respect to each parent was
    /// computed by the caller.
    pub fn scalar_fn(&mut self, value: f64, parents: &[(Var, Vec<f64>)]) -> Result<Var> {
        for (p, g) in parents {
            if g.len() != self.value(*p).len() {
                return Err(shape("scalar_fn local gradient size mismatch"));
            }
        }
        let (vars, local): (Vec<Var>, Vec<Vec<f64>>) = parents.iter().cloned().unzip();
        Ok(self.push(
            Tensor::scalar(value),
            Op::ScalarFn {
                parents: vars.clone(),
                local,
            },
            &vars,
        ))
    }

    /// Multi-scale deformable aggregation.
    ///
    /// For each query `q` and head `h`, sums over the selected modalities
    /// `m`, levels `l` and points `k` the weight `w[q,h,m,l,k]` times the
    /// bilinear sample of map `(m, l)` at `ref[q] + off[q,h,m,l,k] / (W_l, H_l)`.
    /// Returns `[N, H * C]`, one raw `C`-vector per head.
    ///
    /// `maps` lists `(modality index, per-level maps)`; modalities of the
    /// offset/weight layout that are not listed are skipped.
    pub fn deform_aggregate(
        &mut self,
        maps: &[(usize, Vec<Var>)],
        refs: Var,
        offsets: Var,
        weights: Var,
        dims: DeformDims,
    ) -> Result<Var> {
        let n = self.value(refs).rows();
        if self.value(refs).cols() != 2 {
            return Err(shape("reference points must be [N, 2]"));
        }
        let per_q = dims.per_query();
        if self.value(offsets).len() != n * per_q * 2 || self.value(weights).len() != n * per_q {
            return Err(shape(format!(
                "offsets {:?} / weights {:?} do not match {n} queries x {per_q} samples",
                self.shape(offsets),
                self.shape(weights)
            )));
        }
        let mut c = None;
        for (m, levels) in maps {
            if *m >= dims.modalities || levels.len() != dims.levels {
                return Err(shape("deform maps do not match modality/level counts"));
            }
            for &lv in levels {
                let mc = crate::tensor::map_dims(self.value(lv))?[2];
                if *c.get_or_insert(mc) != mc {
                    return Err(shape("deform maps have different channel counts"));
                }
            }
        }
        let c = c.ok_or_else(|| shape("deform_aggregate needs at least one map"))?;
        let (rd, od, wd) = (self.data(refs), self.data(offsets), self.data(weights));
        let mut out = vec![0.0; n * dims.heads * c];
        for q in 0..n {
            let (rx, ry) = (rd[2 * q], rd[2 * q + 1]);
            for h in 0..dims.heads {
                let o = &mut out[(q * dims.heads + h) * c..][..c];
                for (m, levels) in maps {
                    for (l, &lv) in levels.iter().enumerate() {
                        let map = &self.nodes[lv.0].value;
                        let (mh, mw) = (map.shape()[0], map.shape()[1]);
                        let md = map.data();
                        for k in 0..dims.points {
                            let idx = q * per_q + dims.index(h, *m, l, k);
                            let a = wd[idx];
                            let x = rx + od[2 * idx] / mw as f64;
                            let y = ry + od[2 * idx + 1] / mh as f64;
                            let taps = bilinear_taps(mh, mw, x, y);
                            for &(t, tw, _, _) in &taps.taps[..taps.count] {
                                let f = a * tw;
                                for (ov, mv) in o.iter_mut().zip(&md[t * c..(t + 1) * c]) {
                                    *ov += f * mv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, dims.heads * c], out)?;
        let mut parents = vec![refs, offsets, weights];
        parents.extend(maps.iter().flat_map(|(_, l)| l.iter().copied()));
        Ok(self.push(
            value,
            Op::Deform {
                maps: maps.to_vec(),
                refs,
                offsets,
                weights,
                dims,
            },
            &parents,
        ))
    }

    /// Per-head projection: `x: [N, H*C]`, `w: [H, D, C]` gives `[N, H*D]`.
    pub fn head_linear(&mut self, x: Var, w: Var, heads: usize) -> Result<Var> {
        let (hh, dd, cc) = match *self.shape(w) {
            [h, d, c] => (h, d, c),
            ref s => return Err(shape(format!("head weights {s:?} are not [H, D, C]"))),
        };
        let n = self.value(x).rows();
        if hh != heads || self.value(x).cols() != heads * cc {
            return Err(shape("head_linear input does not match head weights"));
        }
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![0.0; n * heads * dd];
        for q in 0..n {
            for h in 0..heads {
                let xr = &xd[(q * heads + h) * cc..][..cc];
                for d in 0..dd {
                    out[(q * heads + h) * dd + d] = dot(xr, &wd[(h * dd + d) * cc..][..cc]);
                }
            }
        }
        let value = Tensor::new(vec![n, heads * dd], out)?;
        Ok(self.push(value, Op::HeadLinear { x, w, heads }, &[x, w]))
    }

    /// Scaled dot-product attention with `heads` heads over the last axis:
    /// `q: [N, H*D]`, `k, v: [M, H*D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, m) = (self.value(q).rows(), self.value(k).rows());
        let width = self.value(q).cols();
        if self.value(k).cols() != width
            || self.shape(v) != self.shape(k)
            || heads == 0
            || width % heads != 0
        {
            return Err(shape("attention operand widths disagree"));
        }
        let d = width / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * width];
        for h in 0..heads {
            for i in 0..n {
                let qi = &qd[i * width + h * d..][..d];
                let row = &mut probs[(h * n + i) * m..][..m];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = dot(qi, &kd[j * width + h * d..][..d]) * scale;
                }
                let sm = crate::tensor::softmax_unchecked(row);
                row.copy_from_slice(&sm);
                let o = &mut out[i * width + h * d..][..d];
                for (j, p) in row.iter().enumerate() {
                    for (ov, vv) in o.iter_mut().zip(&vd[j * width + h * d..][..d]) {
                        *ov += p * vv;
                    }
                }
            }
        }
        let value = Tensor::new(self.shape(q).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Backpropagates from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(shape("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |g| add_into(g, gout));
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |g| add_into(g, gout));
                let c = self.nodes[b.0].value.len();
                acc(*b, &mut |g| {
                    for row in gout.chunks(c) {
                        add_into(g, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |g| {
                    for ((gi, go), bv) in g.iter_mut().zip(gout).zip(bd) {
                        *gi += go * bv;
                    }
                });
                acc(*b, &mut |g| {
                    for ((gi, go), av) in g.iter_mut().zip(gout).zip(ad) {
                        *gi += go * av;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |g| {
                for (gi, go) in g.iter_mut().zip(gout) {
                    *gi += s * go;
                }
            }),
            Op::Linear { x, w, b } => {
                let din = self.value(*x).cols();
                let dout = self.value(*w).shape()[0];
                let (xd, wd) = (self.data(*x), self.data(*w));
                acc(*x, &mut |g| {
                    for (gr, gor) in g.chunks_mut(din).zip(gout.chunks(dout)) {
                        for (go, wr) in gor.iter().zip(wd.chunks(din)) {
                            if *go != 0.0 {
                                axpy(gr, *go, wr);
                            }
                        }
                    }
                });
                acc(*w, &mut |g| {
                    for (xr, gor) in xd.chunks(din).zip(gout.chunks(dout)) {
                        for (gw, go) in g.chunks_mut(din).zip(gor) {
                            if *go != 0.0 {
                                axpy(gw, *go, xr);
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for gor in gout.chunks(dout) {
                            add_into(g, gor);
                        }
                    });
                }
            }
            Op::Relu(a) => {
                let out = node.value.data();
                acc(*a, &mut |g| {
                    for ((gi, go), o) in g.iter_mut().zip(gout).zip(out) {
                        if *o > 0.0 {
                            *gi += go;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                acc(*a, &mut |g| {
                    for ((gi, go), s) in g.iter_mut().zip(gout).zip(out) {
                        *gi += go * s * (1.0 - s);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = self.data(*gamma);
                let c = gm.len();
                acc(*x, &mut |g| {
                    for (r, ((gr, gor), xh)) in g
                        .chunks_mut(c)
                        .zip(gout.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        let dxh: Vec<f64> = gor.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let mean_d = dxh.iter().sum::<f64>() / c as f64;
                        let mean_dx = dot(&dxh, xh) / c as f64;
                        for j in 0..c {
                            gr[j] += rstd[r] * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
                acc(*gamma, &mut |g| {
                    for (gor, xh) in gout.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            g[j] += gor[j] * xh[j];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for gor in gout.chunks(c) {
                        add_into(g, gor);
                    }
                });
            }
            Op::SoftmaxGroups { x, group } => {
                let out = node.value.data();
                acc(*x, &mut |g| {
                    for ((gr, gor), sr) in g
                        .chunks_mut(*group)
                        .zip(gout.chunks(*group))
                        .zip(out.chunks(*group))
                    {
                        let d = dot(gor, sr);
                        for j in 0..*group {
                            gr[j] += sr[j] * (gor[j] - d);
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv2d_backward(node, *x, *w, *b, *stride, *pad, gout, &mut acc),
            Op::ConcatLast(parts) => {
                let total = node.value.cols();
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    acc(p, &mut |g| {
                        for (gr, gor) in g.chunks_mut(c).zip(gout.chunks(total)) {
                            add_into(gr, &gor[start..start + c]);
                        }
                    });
                    start += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |g| add_into(g, &gout[start..start + len]));
                    start += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).cols();
                acc(*x, &mut |g| add_into(&mut g[start * c..start * c + gout.len()], gout));
            }
            Op::SliceLast { x, start } => {
                let c = self.value(*x).cols();
                let len = node.value.cols();
                acc(*x, &mut |g| {
                    for (gr, gor) in g.chunks_mut(c).zip(gout.chunks(len)) {
                        add_into(&mut gr[*start..start + len], gor);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gout)),
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += gout[0])),
            Op::ScalarFn { parents, local } => {
                for (p, l) in parents.iter().zip(local) {
                    acc(*p, &mut |g| axpy(g, gout[0], l));
                }
            }
            Op::HeadLinear { x, w, heads } => {
                let ws = self.shape(*w);
                let (dd, cc) = (ws[1], ws[2]);
                let (xd, wd) = (self.data(*x), self.data(*w));
                let n = self.value(*x).rows();
                acc(*x, &mut |g| {
                    for q in 0..n {
                        for h in 0..*heads {
                            let gr = &mut g[(q * heads + h) * cc..][..cc];
                            for d in 0..dd {
                                let go = gout[(q * heads + h) * dd + d];
                                axpy(gr, go, &wd[(h * dd + d) * cc..][..cc]);
                            }
                        }
                    }
                });
                acc(*w, &mut |g| {
                    for q in 0..n {
                        for h in 0..*heads {
                            let xr = &xd[(q * heads + h) * cc..][..cc];
                            for d in 0..dd {
                                let go = gout[(q * heads + h) * dd + d];
                                axpy(&mut g[(h * dd + d) * cc..][..cc], go, xr);
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, gout, &mut acc),
            Op::Deform {
                maps,
                refs,
                offsets,
                weights,
                dims,
            } => self.deform_backward(maps, *refs, *offsets, *weights, *dims, gout, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        node: &Node,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        gout: &[f64],
        acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [f64])),
    ) {
        let (h, wd, ci) = {
            let s = self.shape(x);
            (s[0], s[1], s[2])
        };
        let k = self.shape(w)[1];
        let (ho, wo, co) = {
            let s = node.value.shape();
            (s[0], s[1], s[2])
        };
        let (xd, kd) = (self.data(x), self.data(w));
        let taps = |oy: usize, ox: usize, ky: usize, kx: usize| -> Option<usize> {
            let iy = (oy * stride + ky) as isize - pad as isize;
            let ix = (ox * stride + kx) as isize - pad as isize;
            (iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd)
                .then(|| iy as usize * wd + ix as usize)
        };
        acc(b, &mut |g| {
            for gor in gout.chunks(co) {
                add_into(g, gor);
            }
        });
        acc(w, &mut |g| {
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = &gout[(oy * wo + ox) * co..][..co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let Some(t) = taps(oy, ox, ky, kx) else { continue };
                            let xin = &xd[t * ci..][..ci];
                            for (c, gv) in go.iter().enumerate() {
                                if *gv != 0.0 {
                                    axpy(&mut g[((c * k + ky) * k + kx) * ci..][..ci], *gv, xin);
                                }
                            }
                        }
                    }
                }
            }
        });
        acc(x, &mut |g| {
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = &gout[(oy * wo + ox) * co..][..co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let Some(t) = taps(oy, ox, ky, kx) else { continue };
                            let gin = &mut g[t * ci..][..ci];
                            for (c, gv) in go.iter().enumerate() {
                                if *gv != 0.0 {
                                    axpy(gin, *gv, &kd[((c * k + ky) * k + kx) * ci..][..ci]);
                                }
                            }
                        }
                    }
                }
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        gout: &[f64],
        acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [f64])),
    ) {
        let (n, m) = (self.value(q).rows(), self.value(k).rows());
        let width = self.value(q).cols();
        let d = width / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        // d scores = P * (dP - rowsum(dP * P)), dP_ij = gout_i . v_j
        let mut dscores = vec![0.0; heads * n * m];
        for h in 0..heads {
            for i in 0..n {
                let go = &gout[i * width + h * d..][..d];
                let p = &probs[(h * n + i) * m..][..m];
                let dp: Vec<f64> = (0..m).map(|j| dot(go, &vd[j * width + h * d..][..d])).collect();
                let s = dot(&dp, p);
                for j in 0..m {
                    dscores[(h * n + i) * m + j] = p[j] * (dp[j] - s) * scale;
                }
            }
        }
        acc(v, &mut |g| {
            for h in 0..heads {
                for i in 0..n {
                    let go = &gout[i * width + h * d..][..d];
                    for j in 0..m {
                        let p = probs[(h * n + i) * m + j];
                        axpy(&mut g[j * width + h * d..][..d], p, go);
                    }
                }
            }
        });
        acc(q, &mut |g| {
            for h in 0..heads {
                for i in 0..n {
                    for j in 0..m {
                        let ds = dscores[(h * n + i) * m + j];
                        axpy(&mut g[i * width + h * d..][..d], ds, &kd[j * width + h * d..][..d]);
                    }
                }
            }
        });
        acc(k, &mut |g| {
            for h in 0..heads {
                for i in 0..n {
                    for j in 0..m {
                        let ds = dscores[(h * n + i) * m + j];
                        axpy(&mut g[j * width + h * d..][..d], ds, &qd[i * width + h * d..][..d]);
                    }
                }
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn deform_backward(
        &self,
        maps: &[(usize, Vec<Var>)],
        refs: Var,
        offsets: Var,
        weights: Var,
        dims: DeformDims,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let n = self.value(refs).rows();
        let per_q = dims.per_query();
        let (rd, od, wd) = (self.data(refs), self.data(offsets), self.data(weights));
        let c = self.value(maps[0].1[0]).shape()[2];
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut g_ref = need(refs).then(|| vec![0.0; rd.len()]);
        let mut g_off = need(offsets).then(|| vec![0.0; od.len()]);
        let mut g_w = need(weights).then(|| vec![0.0; wd.len()]);
        let mut g_maps: Vec<Vec<Option<Vec<f64>>>> = maps
            .iter()
            .map(|(_, lv)| {
                lv.iter()
                    .map(|&v| need(v).then(|| vec![0.0; self.value(v).len()]))
                    .collect()
            })
            .collect();
        let mut sample = vec![0.0; c];
        let mut dsx = vec![0.0; c];
        let mut dsy = vec![0.0; c];
        for q in 0..n {
            let (rx, ry) = (rd[2 * q], rd[2 * q + 1]);
            for h in 0..dims.heads {
                let go = &gout[(q * dims.heads + h) * c..][..c];
                for (mi, (m, levels)) in maps.iter().enumerate() {
                    for (l, &lv) in levels.iter().enumerate() {
                        let map = &self.nodes[lv.0].value;
                        let (mh, mw) = (map.shape()[0], map.shape()[1]);
                        let md = map.data();
                        for k in 0..dims.points {
                            let idx = q * per_q + dims.index(h, *m, l, k);
                            let a = wd[idx];
                            let x = rx + od[2 * idx] / mw as f64;
                            let y = ry + od[2 * idx + 1] / mh as f64;
                            let taps = bilinear_taps(mh, mw, x, y);
                            if taps.count == 0 {
                                continue;
                            }
                            sample.iter_mut().for_each(|s| *s = 0.0);
                            dsx.iter_mut().for_each(|s| *s = 0.0);
                            dsy.iter_mut().for_each(|s| *s = 0.0);
                            for &(t, tw, tdx, tdy) in &taps.taps[..taps.count] {
                                let texel = &md[t * c..][..c];
                                axpy(&mut sample, tw, texel);
                                axpy(&mut dsx, tdx, texel);
                                axpy(&mut dsy, tdy, texel);
                                if let Some(gm) = g_maps[mi][l].as_mut() {
                                    axpy(&mut gm[t * c..][..c], a * tw, go);
                                }
                            }
                            if let Some(gw) = g_w.as_mut() {
                                gw[idx] += dot(&sample, go);
                            }
                            let gx = a * dot(&dsx, go);
                            let gy = a * dot(&dsy, go);
                            if let Some(gr) = g_ref.as_mut() {
                                gr[2 * q] += gx;
                                gr[2 * q + 1] += gy;
                            }
                            if let Some(goff) = g_off.as_mut() {
                                goff[2 * idx] += gx / mw as f64;
                                goff[2 * idx + 1] += gy / mh as f64;
                            }
                        }
                    }
                }
            }
        }
        let mut merge = |v: Var, g: Option<Vec<f64>>| {
            if let Some(g) = g {
                match grads[v.0].as_mut() {
                    Some(existing) => add_into(existing, &g),
                    None => grads[v.0] = Some(g),
                }
            }
        };
        merge(refs, g_ref);
        merge(offsets, g_off);
        merge(weights, g_w);
        for ((_, levels), gl) in maps.iter().zip(g_maps) {
            for (&lv, g) in levels.iter().zip(gl) {
                merge(lv, g);
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn add_into(y: &mut [f64], x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}
