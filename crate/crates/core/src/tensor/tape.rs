use super::kernels::{self, ConvGeom, NormCache};
use super::{ensure_same_shape, split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax {
        x: Var,
        m: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        n: usize,
        d: usize,
        m: usize,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        outer: usize,
        c: usize,
        inner: usize,
        cache: NormCache,
    },
    Reshape(Var),
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        extent: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Sum(Var),
    Mse {
        pred: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation and replays it backwards.
///
/// Nodes are appended in evaluation order; `backward` visits them in exact
/// reverse, accumulating adjoints additively so a value consumed by several
/// ops receives the sum of every branch.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient matches value shape"))
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Stride-1 zero-padded cross-correlation of `[b, c_in, h, w]` with
    /// `[c_out, c_in, k, k]` plus a per-channel bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(Error::dim(
                "conv2d",
                format!("expected 4D input/weight and 1D bias, got {xs:?}, {ws:?}, {bs:?}"),
            ));
        }
        let (batch, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, k) = (ws[0], ws[2]);
        if ws[1] != c_in {
            return Err(Error::dim(
                "conv2d",
                format!("input has {c_in} channels, weight expects {}", ws[1]),
            ));
        }
        if ws[3] != k {
            return Err(Error::dim(
                "conv2d",
                format!("kernel must be square, got {k}x{}", ws[3]),
            ));
        }
        if bs[0] != c_out {
            return Err(Error::dim(
                "conv2d",
                format!("bias length {} != c_out {c_out}", bs[0]),
            ));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{w}+{pad}"),
            ));
        }
        let geom = ConvGeom {
            batch,
            c_in,
            c_out,
            h,
            w,
            k,
            pad,
            h_out: h + 2 * pad - k + 1,
            w_out: w + 2 * pad - k + 1,
        };
        let out =
            kernels::conv2d_forward(&geom, self.data(input), self.data(weight), self.data(bias));
        self.push(
            "conv2d",
            vec![batch, c_out, geom.h_out, geom.w_out],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .data(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        self.push("relu", self.shape(x).to_vec(), out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        self.push("sigmoid", self.shape(x).to_vec(), out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v.tanh()).collect();
        self.push("tanh", self.shape(x).to_vec(), out, Op::Tanh(x), &[x])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        ensure_same_shape(name, self.value(a), self.value(b))?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(name, self.shape(a).to_vec(), out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        self.push(
            "scale",
            self.shape(x).to_vec(),
            out,
            Op::Scale(x, factor),
            &[x],
        )
    }

    /// Numerically stabilized softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let m = *shape.last().expect("tensors have at least one axis");
        let out = kernels::softmax_rows(self.data(x), m);
        self.push("softmax_lastdim", shape, out, Op::Softmax { x, m }, &[x])
    }

    /// `[b, n, d] · [b, d, m] -> [b, n, m]`.
    pub fn matmul_batched(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("matmul_batched", format!("{sa:?} x {sb:?}")));
        }
        let (batch, n, d, m) = (sa[0], sa[1], sa[2], sb[2]);
        let out = kernels::matmul_batched(self.data(a), self.data(b), batch, n, d, m);
        self.push(
            "matmul_batched",
            vec![batch, n, m],
            out,
            Op::MatMul {
                a,
                b,
                batch,
                n,
                d,
                m,
            },
            &[a, b],
        )
    }

    /// `[b, r, c] -> [b, c, r]`.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::dim(
                "transpose_last2",
                format!("expected 3D, got {s:?}"),
            ));
        }
        let (batch, rows, cols) = (s[0], s[1], s[2]);
        let out = kernels::transpose_last2(self.data(x), batch, rows, cols);
        self.push(
            "transpose_last2",
            vec![batch, cols, rows],
            out,
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            },
            &[x],
        )
    }

    /// Normalizes across `axis` independently at every other index, then
    /// applies a per-channel affine `gain * xhat + shift`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        shift: Var,
        axis: usize,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, c, inner) = split_axis(&shape, axis, "layer_norm")?;
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "{c} channels but gain {:?} and shift {:?}",
                    self.shape(gain),
                    self.shape(shift)
                ),
            ));
        }
        let (out, cache) = kernels::layer_norm_forward(
            self.data(x),
            self.data(gain),
            self.data(shift),
            eps,
            outer,
            c,
            inner,
        );
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                shift,
                outer,
                c,
                inner,
                cache,
            },
            &[x, gain, shift],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let data = self.data(x).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    /// Concatenates along `axis`; every other extent must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no operands"))?;
        let base = self.shape(first).to_vec();
        let (outer, _, inner) = split_axis(&base, axis, "concat")?;
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} incompatible with {base:?} on axis {axis}"),
                ));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &e) in parts.iter().zip(&extents) {
                data.extend_from_slice(&self.data(p)[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let parts_meta = parts.iter().copied().zip(extents).collect();
        self.push(
            "concat",
            shape,
            data,
            Op::Concat {
                parts: parts_meta,
                outer,
                inner,
            },
            parts,
        )
    }

    /// Selects `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sliced = self.value(x).slice_axis(axis, start, len)?;
        let (outer, extent, inner) = split_axis(self.shape(x), axis, "slice")?;
        let shape = sliced.shape().to_vec();
        self.push(
            "slice",
            shape,
            sliced.into_data(),
            Op::Slice {
                x,
                outer,
                extent,
                inner,
                start,
                len,
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.data(x).iter().sum();
        self.push("sum", vec![1], vec![total], Op::Sum(x), &[x])
    }

    /// Mean squared error against a constant target of identical shape.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        ensure_same_shape("mse_loss", self.value(pred), target)?;
        let n = target.numel() as f64;
        let total: f64 = self
            .data(pred)
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        self.push(
            "mse_loss",
            vec![1],
            vec![total / n],
            Op::Mse {
                pred,
                target: target.clone(),
            },
            &[pred],
        )
    }

    /// Reverse sweep from a single-element `root`. Previous gradients are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g);
            }
            self.grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        if self
            .grads
            .iter()
            .flatten()
            .any(|g| g.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite { op: "backward" });
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        match &mut self.grads[v.0] {
            Some(slot) => {
                for (s, c) in slot.iter_mut().zip(contribution) {
                    *s += c;
                }
            }
            empty => *empty = Some(contribution),
        }
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        for (v, contribution) in self.contributions(idx, g) {
            if self.wants(v) {
                self.accumulate(v, contribution);
            }
        }
    }

    /// Adjoint contributions of node `idx` to each of its inputs.
    fn contributions(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let map = |f: &dyn Fn(usize) -> f64| (0..g.len()).map(f).collect::<Vec<f64>>();
        match &node.op {
            Op::Leaf => Vec::new(),
            &Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let mut gi = self
                    .wants(input)
                    .then(|| vec![0.0; self.value(input).numel()]);
                let mut gw = self
                    .wants(weight)
                    .then(|| vec![0.0; self.value(weight).numel()]);
                let mut gb = self
                    .wants(bias)
                    .then(|| vec![0.0; self.value(bias).numel()]);
                kernels::conv2d_backward(
                    &geom,
                    self.data(input),
                    self.data(weight),
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                [(input, gi), (weight, gw), (bias, gb)]
                    .into_iter()
                    .filter_map(|(v, buf)| buf.map(|b| (v, b)))
                    .collect()
            }
            &Op::Relu(x) => vec![(x, map(&|i| if out[i] > 0.0 { g[i] } else { 0.0 }))],
            &Op::Sigmoid(x) => vec![(x, map(&|i| g[i] * out[i] * (1.0 - out[i])))],
            &Op::Tanh(x) => vec![(x, map(&|i| g[i] * (1.0 - out[i] * out[i])))],
            &Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::Sub(a, b) => vec![(a, g.to_vec()), (b, map(&|i| -g[i]))],
            &Op::Mul(a, b) => {
                let (av, bv) = (self.data(a), self.data(b));
                vec![(a, map(&|i| g[i] * bv[i])), (b, map(&|i| g[i] * av[i]))]
            }
            &Op::Scale(x, factor) => vec![(x, map(&|i| g[i] * factor))],
            &Op::Softmax { x, m } => {
                let mut dx = vec![0.0; out.len()];
                for ((y, gy), d) in out
                    .chunks_exact(m)
                    .zip(g.chunks_exact(m))
                    .zip(dx.chunks_exact_mut(m))
                {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        d[j] = y[j] * (gy[j] - dot);
                    }
                }
                vec![(x, dx)]
            }
            &Op::MatMul {
                a,
                b,
                batch,
                n,
                d,
                m,
            } => {
                let mut res = Vec::with_capacity(2);
                if self.wants(a) {
                    // dA = dC · Bᵀ
                    let bt = kernels::transpose_last2(self.data(b), batch, d, m);
                    res.push((a, kernels::matmul_batched(g, &bt, batch, n, m, d)));
                }
                if self.wants(b) {
                    // dB = Aᵀ · dC
                    let at = kernels::transpose_last2(self.data(a), batch, n, d);
                    res.push((b, kernels::matmul_batched(&at, g, batch, d, n, m)));
                }
                res
            }
            &Op::Transpose {
                x,
                batch,
                rows,
                cols,
            } => {
                vec![(x, kernels::transpose_last2(g, batch, cols, rows))]
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                outer,
                c,
                inner,
                cache,
            } => {
                let (x, gain, shift) = (*x, *gain, *shift);
                let mut gx = self.wants(x).then(|| vec![0.0; self.value(x).numel()]);
                let mut gg = self.wants(gain).then(|| vec![0.0; *c]);
                let mut gs = self.wants(shift).then(|| vec![0.0; *c]);
                kernels::layer_norm_backward(
                    cache,
                    self.data(gain),
                    g,
                    *outer,
                    *c,
                    *inner,
                    gx.as_deref_mut(),
                    gg.as_deref_mut(),
                    gs.as_deref_mut(),
                );
                [(x, gx), (gain, gg), (shift, gs)]
                    .into_iter()
                    .filter_map(|(v, buf)| buf.map(|b| (v, b)))
                    .collect()
            }
            &Op::Reshape(x) => vec![(x, g.to_vec())],
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let (outer, inner) = (*outer, *inner);
                let total: usize = parts.iter().map(|&(_, e)| e).sum();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &(v, e) in parts {
                    if self.wants(v) {
                        let mut buf = Vec::with_capacity(outer * e * inner);
                        for o in 0..outer {
                            buf.extend_from_slice(&g[(o * total + offset) * inner..][..e * inner]);
                        }
                        res.push((v, buf));
                    }
                    offset += e;
                }
                res
            }
            &Op::Slice {
                x,
                outer,
                extent,
                inner,
                start,
                len,
            } => {
                let mut buf = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    buf[(o * extent + start) * inner..][..len * inner]
                        .copy_from_slice(&g[o * len * inner..][..len * inner]);
                }
                vec![(x, buf)]
            }
            &Op::Sum(x) => vec![(x, vec![g[0]; self.value(x).numel()])],
            Op::Mse { pred, target } => {
                let scale = 2.0 * g[0] / target.numel() as f64;
                let diff = self
                    .data(*pred)
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| scale * (p - t))
                    .collect();
                vec![(*pred, diff)]
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[5.0]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv_all_ones_window_counts() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn conv_shape_contract_and_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 8, 8]));
        let w = tape.constant(Tensor::zeros(&[5, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 5, 8, 8]);

        let bad = tape.constant(Tensor::zeros(&[5, 2, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, bad, b, 1),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-3.0, -0.5, -1e-9]));
        let y = tape.relu(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[0.0, 0.0, 2f64.ln(), 0.0, 1000.0, 0.0]));
        let y = tape.softmax_lastdim(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[..2], &[0.5, 0.5]);
        assert!((d[2] - 2.0 / 3.0).abs() < 1e-15 && (d[3] - 1.0 / 3.0).abs() < 1e-15);
        assert!((d[4] - 1.0).abs() < 1e-15 && d[5] < 1e-300);
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[1, 2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let eye = tape.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul_batched(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let same = tape.matmul_batched(eye, b).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(b).data());

        let a = tape.constant(Tensor::zeros(&[3, 4, 5]));
        let b = tape.constant(Tensor::zeros(&[3, 5, 2]));
        let c = tape.matmul_batched(a, b).unwrap();
        assert_eq!(tape.shape(c), &[3, 4, 2]);
        assert!(tape.matmul_batched(b, b).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        // [1, c=2, 1] so the normalized axis is the channel axis.
        let x = tape.constant(t(&[1, 2, 1], &[1.0, 3.0]));
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        let s = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.layer_norm(x, g, s, 1, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);

        let g2 = tape.constant(t(&[2], &[2.0, 2.0]));
        let s2 = tape.constant(t(&[2], &[5.0, 5.0]));
        let y = tape.layer_norm(x, g2, s2, 1, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 3.0).abs() < 1e-9 && (d[1] - 7.0).abs() < 1e-9);

        let c = tape.constant(Tensor::filled(&[1, 2, 1], 4.0));
        let y = tape.layer_norm(c, g, s, 1, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let bad = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        assert!(tape.layer_norm(x, bad, s, 1, 1e-5).is_err());
    }

    #[test]
    fn concat_and_slice_recover_operands() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[1, 2, 3, 4, 4], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[1, 2, 5, 4, 4], |i| -(i as f64)));
        let c = tape.concat(&[a, b], 2).unwrap();
        assert_eq!(tape.shape(c), &[1, 2, 8, 4, 4]);
        let ra = tape.slice(c, 2, 0, 3).unwrap();
        let rb = tape.slice(c, 2, 3, 5).unwrap();
        assert_eq!(tape.value(ra), tape.value(a));
        assert_eq!(tape.value(rb), tape.value(b));

        let odd = tape.constant(Tensor::zeros(&[1, 3, 5, 4, 4]));
        assert!(tape.concat(&[a, odd], 2).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let z = tape.param(t(&[1], &[0.0]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        let th = tape.tanh(z).unwrap();
        assert_eq!(tape.value(th).data(), &[0.0]);
        tape.backward(th).unwrap();
        assert_eq!(tape.grad(z).unwrap().data(), &[1.0]);

        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
        let short = tape.constant(t(&[1], &[1.0]));
        assert!(tape.add(a, short).is_err());
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[1e308]));
        assert!(matches!(
            tape.scale(x, 10.0),
            Err(Error::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn reused_value_accumulates_both_branches() {
        // f = sum(x * x) + sum(x)  =>  df/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.5, -2.0]));
        let sq = tape.mul(x, x).unwrap();
        let both = tape.add(sq, x).unwrap();
        let f = tape.sum(both).unwrap();
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, -3.0]);
    }
}
