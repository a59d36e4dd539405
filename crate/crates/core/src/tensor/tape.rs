use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::conv::{self, ConvGeom, KSIZE};
use super::{strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. The wrapped index is the node id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    SignedSqrt(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchedMatMul(Var, Var),
    Sum(Var),
    SumAxis {
        input: Var,
        axis: usize,
    },
    Mse(Var, Var),
    Reshape(Var),
    Permute {
        input: Var,
        axes: Vec<usize>,
    },
    IndexSelect {
        input: Var,
        indices: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    L2NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Ordered record of executed operations. Nodes are appended as operations
/// run, so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss, indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Number of recorded operations the backward pass propagated through.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn view(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("contiguous view")
}

fn view_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("contiguous view")
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a fixed input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// 3x3 cross-correlation with stride 1 and zero padding 0 or 1.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        expect_rank("conv2d", x, 4)?;
        expect_rank("conv2d", k, 4)?;
        if padding > 1 {
            return Err(Error::shape("conv2d", format!("padding {padding} not in {{0, 1}}")));
        }
        let (xs, ks) = (x.shape(), k.shape());
        if ks[2] != KSIZE || ks[3] != KSIZE {
            return Err(Error::shape("conv2d", format!("kernel {ks:?} is not 3x3")));
        }
        if ks[1] != xs[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", xs[1], ks[1]),
            ));
        }
        if b.shape() != [ks[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} does not match {} filters", b.shape(), ks[0]),
            ));
        }
        if xs[2] + 2 * padding < KSIZE || xs[3] + 2 * padding < KSIZE {
            return Err(Error::shape("conv2d", format!("input {xs:?} smaller than kernel")));
        }
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            c_out: ks[0],
            h: xs[2],
            w: xs[3],
            padding,
        };
        let data = conv::forward(&geom, x.data(), k.data(), b.data());
        let out = Tensor::new(&[geom.batch, geom.c_out, geom.out_h(), geom.out_w()], data)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &[input, kernel, bias],
        ))
    }

    /// Batch normalization over (batch, height, width) with per-channel
    /// affine `gamma`, `beta`. Statistics always come from the batch itself.
    pub fn batchnorm2d(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let x = self.value(input);
        expect_rank("batchnorm2d", x, 4)?;
        let s = x.shape();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let (g, be) = (self.value(gamma), self.value(beta));
        if g.shape() != [c] || be.shape() != [c] {
            return Err(Error::shape(
                "batchnorm2d",
                format!("affine {:?}/{:?} for {c} channels", g.shape(), be.shape()),
            ));
        }
        let count = b * hw;
        if count < 2 {
            return Err(Error::DegenerateStats(format!(
                "batchnorm2d needs b*h*w >= 2, got {count}"
            )));
        }
        let xd = x.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let mut mean = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                mean += xd[base..base + hw].iter().sum::<f64>();
            }
            mean /= count as f64;
            let mut var = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                var += xd[base..base + hw]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            var /= count as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            let (gc, bc) = (g.data()[ch], be.data()[ch]);
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (xd[i] - mean) * is;
                    out[i] = gc * xhat[i] + bc;
                }
            }
        }
        let out = Tensor::new(s, out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[input, gamma, beta],
        ))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(input);
        let out = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(out, op, &[input])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    /// `sign(v) * sqrt(|v|)`; the derivative at exactly zero is taken as zero.
    pub fn signed_sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.signum() * v.abs().sqrt(), Op::SignedSqrt(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        expect_rank("maxpool2x2", x, 4)?;
        let s = x.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h < 2 || w < 2 {
            return Err(Error::shape("maxpool2x2", format!("input {s:?} below 2x2")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }, &[input]))
    }

    /// `x · weightᵀ + bias` for `x: [m, in]`, `weight: [out, in]`, `bias: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        expect_rank("linear", x, 2)?;
        expect_rank("linear", w, 2)?;
        let (m, k) = (x.shape()[0], x.shape()[1]);
        let n = w.shape()[0];
        if w.shape()[1] != k {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", x.shape(), w.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        if let Some(bv) = bias {
            let bt = self.value(bv);
            if bt.shape() != [n] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for {n} outputs", bt.shape()),
                ));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bt.data());
            }
        }
        general_mat_mul(
            1.0,
            &view(x.data(), m, k),
            &view(w.data(), n, k).t(),
            1.0,
            &mut view_mut(&mut out, m, n),
        );
        let out = Tensor::new(&[m, n], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &inputs,
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("hadamard", a, b, |x, y| x * y, Op::Hadamard(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("matmul", ta, 2)?;
        expect_rank("matmul", tb, 2)?;
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        if tb.shape()[0] != k {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        general_mat_mul(
            1.0,
            &view(ta.data(), m, k),
            &view(tb.data(), k, n),
            0.0,
            &mut view_mut(&mut out, m, n),
        );
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("batched_matmul", ta, 3)?;
        expect_rank("batched_matmul", tb, 3)?;
        let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let n = tb.shape()[2];
        if tb.shape()[0] != bs || tb.shape()[1] != k {
            return Err(Error::shape(
                "batched_matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            general_mat_mul(
                1.0,
                &view(&ta.data()[i * m * k..(i + 1) * m * k], m, k),
                &view(&tb.data()[i * k * n..(i + 1) * k * n], k, n),
                0.0,
                &mut view_mut(&mut out[i * m * n..(i + 1) * m * n], m, n),
            );
        }
        let out = Tensor::new(&[bs, m, n], out)?;
        Ok(self.push(out, Op::BatchedMatMul(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Sums out `axis`; a rank-1 input reduces to shape `[1]`.
    pub fn sum_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        if axis >= s.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for shape {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len = s[axis];
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let mut shape: Vec<usize> = s.to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::SumAxis { input, axis }, &[input]))
    }

    /// Mean of squared element differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mse", ta, tb)?;
        let n = ta.len() as f64;
        let v = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self
            .value(input)
            .reshape(shape)
            .map_err(|e| Error::shape("reshape", e.to_string()))?;
        Ok(self.push(out, Op::Reshape(input), &[input]))
    }

    pub fn permute(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} for shape {:?}", x.shape()),
            ));
        }
        let (data, shape) = permute_data(x.data(), x.shape(), axes);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Permute {
                input,
                axes: axes.to_vec(),
            },
            &[input],
        ))
    }

    /// Gathers slices along axis 0; indices may repeat.
    pub fn index_select(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        if indices.is_empty() {
            return Err(Error::shape("index_select", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::shape(
                "index_select",
                format!("index {bad} out of range for extent {}", s[0]),
            ));
        }
        let inner: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = s.to_vec();
        shape[0] = indices.len();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::IndexSelect {
                input,
                indices: indices.to_vec(),
            },
            &[input],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Scales each row of `[m, d]` to unit L2 norm; all-zero rows pass through.
    pub fn l2_normalize_rows(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        expect_rank("l2_normalize_rows", x, 2)?;
        let d = x.shape()[1];
        let mut norms = Vec::with_capacity(x.shape()[0]);
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, Op::L2NormalizeRows { input, norms }, &[input]))
    }

    /// Reverse pass from a one-element `loss`. Leaves the loss does not reach
    /// report zero gradients through [`Gradients::wrt`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            visited,
        })
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor {
            shape: self.value(v).shape.clone(),
            data,
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (dx, dk, db) = conv::backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    gd,
                    self.tracked(*input),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, self.like(*input, dx));
                }
                self.accumulate(grads, *kernel, self.like(*kernel, dk));
                self.accumulate(grads, *bias, self.like(*bias, db));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = node.value.shape();
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let count = (b * hw) as f64;
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; gd.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                    for bi in 0..b {
                        let base = (bi * c + ch) * hw;
                        for i in base..base + hw {
                            dbeta[ch] += gd[i];
                            dgamma[ch] += gd[i] * xhat[i];
                            let dxh = gd[i] * gam[ch];
                            sum_d += dxh;
                            sum_dx += dxh * xhat[i];
                        }
                    }
                    let k = inv_std[ch] / count;
                    for bi in 0..b {
                        let base = (bi * c + ch) * hw;
                        for i in base..base + hw {
                            let dxh = gd[i] * gam[ch];
                            dx[i] = k * (count * dxh - sum_d - xhat[i] * sum_dx);
                        }
                    }
                }
                self.accumulate(grads, *input, self.like(*input, dx));
                self.accumulate(grads, *gamma, self.like(*gamma, dgamma));
                self.accumulate(grads, *beta, self.like(*beta, dbeta));
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xd)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::SignedSqrt(x) => {
                let y = node.value.data();
                let d = gd
                    .iter()
                    .zip(y)
                    .map(|(g, y)| if *y == 0.0 { 0.0 } else { g / (2.0 * y.abs()) })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Scale(x, f) => {
                let d = gd.iter().map(|g| g * f).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::AddScalar(x) => {
                self.accumulate(grads, *x, self.like(*x, gd.to_vec()));
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).len()];
                for (g, &i) in gd.iter().zip(argmax) {
                    dx[i] += g;
                }
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                let gv = view(gd, m, n);
                if self.tracked(*input) {
                    let mut dx = vec![0.0; m * k];
                    general_mat_mul(1.0, &gv, &view(w.data(), n, k), 0.0, &mut view_mut(&mut dx, m, k));
                    self.accumulate(grads, *input, self.like(*input, dx));
                }
                if self.tracked(*weight) {
                    let mut dw = vec![0.0; n * k];
                    general_mat_mul(1.0, &gv.t(), &view(x.data(), m, k), 0.0, &mut view_mut(&mut dw, n, k));
                    self.accumulate(grads, *weight, self.like(*weight, dw));
                }
                if let Some(bv) = bias {
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *bv, self.like(*bv, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, self.like(*b, gd.iter().map(|v| -v).collect()));
            }
            Op::Hadamard(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(bd).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(ad).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, self.like(*a, da));
                self.accumulate(grads, *b, self.like(*b, db));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let gv = view(gd, m, n);
                if self.tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    general_mat_mul(1.0, &gv, &view(tb.data(), k, n).t(), 0.0, &mut view_mut(&mut da, m, k));
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.tracked(*b) {
                    let mut db = vec![0.0; k * n];
                    general_mat_mul(1.0, &view(ta.data(), m, k).t(), &gv, 0.0, &mut view_mut(&mut db, k, n));
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::BatchedMatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = tb.shape()[2];
                let mut da = vec![0.0; bs * m * k];
                let mut db = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let gv = view(&gd[i * m * n..(i + 1) * m * n], m, n);
                    let av = view(&ta.data()[i * m * k..(i + 1) * m * k], m, k);
                    let bv = view(&tb.data()[i * k * n..(i + 1) * k * n], k, n);
                    general_mat_mul(1.0, &gv, &bv.t(), 0.0, &mut view_mut(&mut da[i * m * k..(i + 1) * m * k], m, k));
                    general_mat_mul(1.0, &av.t(), &gv, 0.0, &mut view_mut(&mut db[i * k * n..(i + 1) * k * n], k, n));
                }
                self.accumulate(grads, *a, self.like(*a, da));
                self.accumulate(grads, *b, self.like(*b, db));
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, self.like(*x, vec![gd[0]; n]));
            }
            Op::SumAxis { input, axis } => {
                let s = self.value(*input).shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = s[*axis];
                let mut dx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        dx.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let k = 2.0 * gd[0] / ad.len() as f64;
                let da: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| k * (x - y)).collect();
                let db = da.iter().map(|v| -v).collect();
                self.accumulate(grads, *a, self.like(*a, da));
                self.accumulate(grads, *b, self.like(*b, db));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, self.like(*x, gd.to_vec()));
            }
            Op::Permute { input, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (dx, _) = permute_data(gd, node.value.shape(), &inverse);
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::IndexSelect { input, indices } => {
                let x = self.value(*input);
                let inner: usize = x.shape()[1..].iter().product();
                let mut dx = vec![0.0; x.len()];
                for (row, &i) in indices.iter().enumerate() {
                    for (d, g) in dx[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&gd[row * inner..(row + 1) * inner])
                    {
                        *d += g;
                    }
                }
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::Concat { inputs, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(self.value(*v).len()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (part, v) in parts.iter_mut().zip(inputs) {
                        let chunk = self.value(*v).shape()[*axis] * inner;
                        part.extend_from_slice(&gd[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                for (part, v) in parts.into_iter().zip(inputs) {
                    self.accumulate(grads, *v, self.like(*v, part));
                }
            }
            Op::L2NormalizeRows { input, norms } => {
                let y = node.value.data();
                let d = node.value.shape()[1];
                let mut dx = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &gd[r * d..(r + 1) * d]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (i, out) in dx[r * d..(r + 1) * d].iter_mut().enumerate() {
                        *out = (gr[i] - yr[i] * dot) / n;
                    }
                }
                self.accumulate(grads, *input, self.like(*input, dx));
            }
        }
    }
}
