use std::rc::Rc;

use super::conv::{self, ConvGeom};
use super::counter::record_macs;
use super::kernels;
use super::{permute_data, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterTokens {
        visible: Var,
        mask_token: Var,
        positions: Rc<Vec<usize>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    Conv3d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    ConvTranspose3d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    ChannelBias {
        x: Var,
        b: Var,
        inner: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
        batch: usize,
        n: usize,
        d: usize,
    },
    /// Scalar-valued function whose gradient was computed with the value.
    ScalarFn {
        input: Var,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only tape. Nodes are stored in creation order, which is a valid
/// topological order because every op only references earlier nodes.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims(label: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{label}: shapes {a:?} and {b:?} are incompatible"))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise -------------------------------------------------

    fn same_shape(&self, label: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dims(label, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect()).expect("shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x * c);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, kernels::gelu_scalar);
        let rg = self.needs(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let k = *t
            .shape()
            .last()
            .ok_or_else(|| Error::Dimension("softmax of a scalar".into()))?;
        if k == 0 {
            return Err(Error::Dimension("softmax over an empty axis".into()));
        }
        let out = Tensor::new(t.shape().to_vec(), kernels::softmax_rows(t.data(), k))?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    // ---- shape ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let mut seen = vec![false; t.ndim()];
        if axes.len() != t.ndim()
            || axes
                .iter()
                .any(|&ax| ax >= t.ndim() || std::mem::replace(&mut seen[ax], true))
        {
            return Err(Error::Dimension(format!(
                "invalid permutation {axes:?} for shape {:?}",
                t.shape()
            )));
        }
        let (data, shape) = permute_data(t.data(), t.shape(), axes);
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Permute(a, axes.to_vec()), rg))
    }

    /// `out[i] = a[index[i]]` along the first axis.
    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Result<Var> {
        let t = self.value(a);
        let rows = *t
            .shape()
            .first()
            .ok_or_else(|| Error::Dimension("gather_rows on a scalar".into()))?;
        let width = t.numel() / rows.max(1);
        let mut data = Vec::with_capacity(index.len() * width);
        for &i in index.iter() {
            if i >= rows {
                return Err(Error::Dimension(format!("row index {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = index.len();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::GatherRows(a, index), rg))
    }

    /// Builds an `[n_total, C]` token grid: row `positions[r]` takes
    /// `visible[r]`, every other row takes `mask_token`.
    pub fn scatter_tokens(
        &mut self,
        visible: Var,
        mask_token: Var,
        positions: Rc<Vec<usize>>,
        n_total: usize,
    ) -> Result<Var> {
        let vt = self.value(visible);
        let mt = self.value(mask_token);
        if vt.ndim() != 2 || vt.shape()[0] != positions.len() {
            return Err(Error::Contract(format!(
                "scatter: {} embeddings for {} visible positions",
                vt.shape().first().copied().unwrap_or(0),
                positions.len()
            )));
        }
        let c = vt.shape()[1];
        if mt.numel() != c {
            return Err(dims("scatter mask token", mt.shape(), &[c]));
        }
        let mut data = Vec::with_capacity(n_total * c);
        for _ in 0..n_total {
            data.extend_from_slice(mt.data());
        }
        for (r, &p) in positions.iter().enumerate() {
            if p >= n_total {
                return Err(Error::Contract(format!(
                    "scatter position {p} outside grid of {n_total}"
                )));
            }
            data[p * c..(p + 1) * c].copy_from_slice(&vt.data()[r * c..(r + 1) * c]);
        }
        let rg = self.needs(&[visible, mask_token]);
        Ok(self.push(
            Tensor::new(vec![n_total, c], data)?,
            Op::ScatterTokens {
                visible,
                mask_token,
                positions,
            },
            rg,
        ))
    }

    // ---- layers --------------------------------------------------------

    /// `y = x·w + b` with `x: [n, d_in]`, `w: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.ndim() != 2 || tw.ndim() != 2 || tx.shape()[1] != tw.shape()[0] {
            return Err(dims("linear", tx.shape(), tw.shape()));
        }
        let (n, din, dout) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.numel() != dout {
                return Err(dims("linear bias", tb.shape(), &[dout]));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(tb.data());
            }
        }
        kernels::matmul_acc(tx.data(), tw.data(), &mut out, n, din, dout);
        record_macs((n * din * dout) as u64);
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.needs(&ins);
        Ok(self.push(Tensor::new(vec![n, dout], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Layer normalization over the last axis (population variance).
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.shape().last().copied().unwrap_or(0);
        if d == 0 {
            return Err(Error::Dimension(format!(
                "layernorm over empty last axis of {:?}",
                t.shape()
            )));
        }
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != d || tb.numel() != d {
            return Err(dims("layernorm affine", tg.shape(), &[d]));
        }
        let (xhat, rstd) = kernels::layernorm_rows(t.data(), d, eps);
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * tg.data()[i % d] + tb.data()[i % d])
            .collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    fn conv_geom(
        &self,
        x: Var,
        k: Var,
        stride: [usize; 3],
        pad: [usize; 3],
        transpose: bool,
    ) -> Result<(ConvGeom, Vec<usize>)> {
        let (tx, tk) = (self.value(x), self.value(k));
        let xs = match tx.ndim() {
            4 => [1, tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]],
            5 => [
                tx.shape()[0],
                tx.shape()[1],
                tx.shape()[2],
                tx.shape()[3],
                tx.shape()[4],
            ],
            _ => {
                return Err(Error::Dimension(format!(
                    "conv input must be 4-D or 5-D, got {:?}",
                    tx.shape()
                )))
            }
        };
        if tk.ndim() != 5 {
            return Err(Error::Dimension(format!(
                "conv kernel must be 5-D, got {:?}",
                tk.shape()
            )));
        }
        if stride.contains(&0) {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        let ks = [tk.shape()[2], tk.shape()[3], tk.shape()[4]];
        let spatial = [xs[2], xs[3], xs[4]];
        let geom = if !transpose {
            if tk.shape()[1] != xs[1] {
                return Err(dims("conv3d channels", tx.shape(), tk.shape()));
            }
            let mut out = [0; 3];
            for a in 0..3 {
                let padded = spatial[a] + 2 * pad[a];
                if ks[a] > padded {
                    return Err(Error::Dimension(format!(
                        "conv3d kernel {ks:?} larger than padded input {:?}",
                        spatial.map(|s| s + 2 * pad[a])
                    )));
                }
                out[a] = (padded - ks[a]) / stride[a] + 1;
            }
            ConvGeom {
                batch: xs[0],
                c_in: xs[1],
                in_size: spatial,
                c_out: tk.shape()[0],
                out_size: out,
                kernel: ks,
                stride,
                pad,
            }
        } else {
            if tk.shape()[0] != xs[1] {
                return Err(dims("conv_transpose3d channels", tx.shape(), tk.shape()));
            }
            let mut dense = [0; 3];
            for a in 0..3 {
                let full = (spatial[a] - 1) * stride[a] + ks[a];
                if full < 2 * pad[a] + 1 {
                    return Err(Error::Dimension(format!(
                        "conv_transpose3d padding {pad:?} consumes the whole output"
                    )));
                }
                dense[a] = full - 2 * pad[a];
            }
            ConvGeom {
                batch: xs[0],
                c_in: tk.shape()[1],
                in_size: dense,
                c_out: xs[1],
                out_size: spatial,
                kernel: ks,
                stride,
                pad,
            }
        };
        let (c, s) = if transpose {
            (geom.c_in, geom.in_size)
        } else {
            (geom.c_out, geom.out_size)
        };
        let shape = if tx.ndim() == 4 {
            vec![c, s[0], s[1], s[2]]
        } else {
            vec![geom.batch, c, s[0], s[1], s[2]]
        };
        Ok((geom, shape))
    }

    /// Direct 3-D convolution, no bias. `x: [C_in, D, H, W]` or
    /// `[B, C_in, D, H, W]`; `k: [C_out, C_in, kd, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, k: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (geom, shape) = self.conv_geom(x, k, stride, pad, false)?;
        let y = conv::conv3d_forward(self.value(x).data(), self.value(k).data(), &geom);
        let rg = self.needs(&[x, k]);
        Ok(self.push(Tensor::new(shape, y)?, Op::Conv3d { x, k, geom }, rg))
    }

    /// Transposed convolution with kernel `[C_in, C_out, kd, kh, kw]`; the
    /// adjoint of [`Graph::conv3d`] with the same kernel, stride and padding.
    pub fn conv_transpose3d(&mut self, x: Var, k: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (geom, shape) = self.conv_geom(x, k, stride, pad, true)?;
        let y = conv::conv_transpose3d_forward(self.value(x).data(), self.value(k).data(), &geom);
        let rg = self.needs(&[x, k]);
        Ok(self.push(Tensor::new(shape, y)?, Op::ConvTranspose3d { x, k, geom }, rg))
    }

    /// Adds `b[c]` to channel `c` of a `[C, ...]` or `[B, C, ...]` tensor
    /// (`batched` selects the layout).
    pub fn channel_bias(&mut self, x: Var, b: Var, batched: bool) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let ax = usize::from(batched);
        let c = *tx
            .shape()
            .get(ax)
            .ok_or_else(|| Error::Dimension("channel_bias rank".into()))?;
        if tb.numel() != c {
            return Err(dims("channel_bias", tx.shape(), tb.shape()));
        }
        let inner: usize = tx.shape()[ax + 1..].iter().product();
        let data: Vec<f64> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[(i / inner) % c])
            .collect();
        let shape = tx.shape().to_vec();
        let rg = self.needs(&[x, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::ChannelBias { x, b, inner }, rg))
    }

    /// Scaled dot-product attention on `[..., n, d]` inputs.
    ///
    /// `mask` is additive (`0` or `-inf`) with shape `[n, n]` or `[M, n, n]`;
    /// with `M` masks the leading batch is split into `M` equal consecutive
    /// groups, one mask per group.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&Tensor>) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.ndim() < 2 {
            return Err(dims("attention q/k/v", tq.shape(), tk.shape()));
        }
        let nd = tq.ndim();
        let (n, d) = (tq.shape()[nd - 2], tq.shape()[nd - 1]);
        let batch = tq.numel() / (n * d).max(1);
        let mask_arg = match mask {
            None => None,
            Some(m) => {
                let count = match m.ndim() {
                    2 => 1,
                    3 => m.shape()[0],
                    _ => 0,
                };
                if count == 0 || m.numel() != count * n * n || batch % count != 0 {
                    return Err(dims("attention mask", m.shape(), &[n, n]));
                }
                Some((m.data(), count))
            }
        };
        let (out, probs) = kernels::attention_forward(tq.data(), tk.data(), tv.data(), mask_arg, batch, n, d)
            .ok_or_else(|| Error::Contract("attention row has no attendable key".into()))?;
        record_macs((2 * batch * n * n * d) as u64);
        let shape = tq.shape().to_vec();
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Attention {
                q,
                k,
                v,
                probs,
                batch,
                n,
                d,
            },
            rg,
        ))
    }

    /// Scalar node whose value and input-gradient were computed together by
    /// the caller (fused losses).
    pub fn scalar_fn(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).numel() {
            return Err(Error::Contract(format!(
                "scalar_fn gradient has {} entries for input of {}",
                grad.len(),
                self.value(input).numel()
            )));
        }
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { input, grad }, rg))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a scalar node. Leaf gradients are added to any
    /// gradient already stored, so call [`Graph::zero_grad`] between
    /// independent passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (input, contrib) in self.vjp(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn vjp(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[id].op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(vb).map(|(x, y)| x * y).collect()),
                    (*b, g.iter().zip(va).map(|(x, y)| x * y).collect()),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let (data, _) = permute_data(g, self.nodes[id].value.shape(), &inv);
                vec![(*a, data)]
            }
            Op::GatherRows(a, index) => {
                let src = val(*a);
                let rows = self.nodes[a.0].value.shape()[0];
                let width = src.len() / rows.max(1);
                let mut out = vec![0.0; src.len()];
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..width {
                        out[i * width + j] += g[r * width + j];
                    }
                }
                vec![(*a, out)]
            }
            Op::ScatterTokens {
                visible,
                mask_token,
                positions,
            } => {
                let c = self.nodes[id].value.shape()[1];
                let n_total = self.nodes[id].value.shape()[0];
                let mut dv = vec![0.0; positions.len() * c];
                let mut is_vis = vec![false; n_total];
                for (r, &p) in positions.iter().enumerate() {
                    dv[r * c..(r + 1) * c].copy_from_slice(&g[p * c..(p + 1) * c]);
                    is_vis[p] = true;
                }
                let mut dm = vec![0.0; c];
                for (p, vis) in is_vis.iter().enumerate() {
                    if !vis {
                        for j in 0..c {
                            dm[j] += g[p * c + j];
                        }
                    }
                }
                vec![(*visible, dv), (*mask_token, dm)]
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.nodes[x.0].value.shape(), self.nodes[w.0].value.shape());
                let (n, din, dout) = (sx[0], sx[1], sw[1]);
                let mut out = Vec::new();
                if want(*x) {
                    let mut dx = vec![0.0; n * din];
                    kernels::matmul_bt_acc(g, val(*w), &mut dx, n, dout, din);
                    out.push((*x, dx));
                }
                if want(*w) {
                    let mut dw = vec![0.0; din * dout];
                    kernels::matmul_at_acc(val(*x), g, &mut dw, n, din, dout);
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    out.push((*b, db));
                }
                out
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = val(*gamma);
                let d = gm.len();
                let dxhat: Vec<f64> = g.iter().enumerate().map(|(i, v)| v * gm[i % d]).collect();
                let dx = kernels::layernorm_rows_backward(xhat, rstd, &dxhat, d);
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for (i, v) in g.iter().enumerate() {
                    dg[i % d] += v * xhat[i];
                    db[i % d] += v;
                }
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Softmax(a) => {
                let y = self.nodes[id].value.data();
                let k = *self.nodes[id].value.shape().last().unwrap();
                vec![(*a, kernels::softmax_rows_backward(y, g, k))]
            }
            Op::Gelu(a) => vec![(
                *a,
                val(*a)
                    .iter()
                    .zip(g)
                    .map(|(x, gy)| gy * kernels::gelu_grad_scalar(*x))
                    .collect(),
            )],
            Op::Conv3d { x, k, geom } => {
                let mut out = Vec::new();
                if want(*x) {
                    out.push((*x, conv::conv3d_adjoint(g, val(*k), geom)));
                }
                if want(*k) {
                    out.push((*k, conv::conv3d_kernel_grad(val(*x), g, geom)));
                }
                out
            }
            Op::ConvTranspose3d { x, k, geom } => {
                let mut out = Vec::new();
                if want(*x) {
                    out.push((*x, conv::conv3d_forward_uncounted(g, val(*k), geom)));
                }
                if want(*k) {
                    out.push((*k, conv::conv3d_kernel_grad(g, val(*x), geom)));
                }
                out
            }
            Op::ChannelBias { x, b, inner } => {
                let c = val(*b).len();
                let mut db = vec![0.0; c];
                for (i, v) in g.iter().enumerate() {
                    db[(i / inner) % c] += v;
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                batch,
                n,
                d,
            } => {
                let (dq, dk, dv) = kernels::attention_backward(val(*q), val(*k), val(*v), probs, g, *batch, *n, *d);
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::ScalarFn { input, grad } => vec![(*input, grad.iter().map(|x| x * g[0]).collect())],
        }
    }
}
