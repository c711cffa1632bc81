//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. [`Graph::backward`]
//! walks the tape in reverse and returns the gradient of a scalar output with
//! respect to every node that (transitively) depends on a parameter leaf.
//!
//! Most ops treat their operands as matrices: the last axis is the column
//! axis and all leading axes are flattened into rows.

use std::cell::{Ref, RefCell};

use crate::tensor::{gemm, rows_cols, sigmoid, softplus, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over NHWC tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
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
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    /// Adds or multiplies a constant tensor, which receives no gradient.
    AddConst(Var),
    MulConst(Var, Tensor),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SumAll(Var),
    SumRows(Var),
    Reshape(Var),
    Gather0 {
        x: Var,
        index: Vec<usize>,
    },
    GatherFlat {
        x: Var,
        index: Vec<usize>,
    },
    Concat0(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Upsample2x {
        x: Var,
        batch: usize,
        height: usize,
        width: usize,
        channels: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()))
    }

    /// Gradient for `v`, zero-filled when `v` does not influence the output.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value_of(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), move |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value_of(v);
        assert_eq!(t.numel(), 1, "not a scalar: {:?}", t.shape());
        t.data()[0]
    }

    fn unary(&self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = {
            let xv = self.value_of(x);
            Tensor::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect())
        };
        let needs = self.needs(&[x]);
        self.push(value, op, needs)
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = {
            let av = self.value_of(a);
            let bv = self.value_of(b);
            assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
            Tensor::new(
                av.shape(),
                av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
        };
        let needs = self.needs(&[a, b]);
        self.push(value, op, needs)
    }

    /// `op(a) · op(b)` for 2-D operands.
    pub fn matmul_t(&self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = {
            let av = self.value_of(a);
            let bv = self.value_of(b);
            assert_eq!(av.shape().len(), 2, "matmul lhs must be 2-D");
            assert_eq!(bv.shape().len(), 2, "matmul rhs must be 2-D");
            let (m, k) = if ta {
                (av.shape()[1], av.shape()[0])
            } else {
                (av.shape()[0], av.shape()[1])
            };
            let (k2, n) = if tb {
                (bv.shape()[1], bv.shape()[0])
            } else {
                (bv.shape()[0], bv.shape()[1])
            };
            assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, av.data(), ta, bv.data(), tb, 0.0, &mut out);
            Tensor::new(&[m, n], out)
        };
        let needs = self.needs(&[a, b]);
        self.push(value, Op::MatMul { a, b, ta, tb }, needs)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Adds a row vector `bias` (length = columns of `a`) to every row of `a`.
    pub fn add_row(&self, a: Var, bias: Var) -> Var {
        let value = {
            let av = self.value_of(a);
            let bv = self.value_of(bias);
            let (_, c) = av.rows_cols();
            assert_eq!(bv.numel(), c, "bias length mismatch");
            let data = av
                .data()
                .chunks(c.max(1))
                .flat_map(|row| row.iter().zip(bv.data()).map(|(x, y)| x + y))
                .collect();
            Tensor::new(av.shape(), data)
        };
        let needs = self.needs(&[a, bias]);
        self.push(value, Op::AddRow(a, bias), needs)
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        self.unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddConst(a), |x| x + c)
    }

    pub fn add_const(&self, a: Var, c: &Tensor) -> Var {
        let value = {
            let av = self.value_of(a);
            assert_eq!(av.shape(), c.shape(), "add_const shape mismatch");
            Tensor::new(av.shape(), av.data().iter().zip(c.data()).map(|(x, y)| x + y).collect())
        };
        let needs = self.needs(&[a]);
        self.push(value, Op::AddConst(a), needs)
    }

    pub fn mul_const(&self, a: Var, c: &Tensor) -> Var {
        let value = {
            let av = self.value_of(a);
            assert_eq!(av.shape(), c.shape(), "mul_const shape mismatch");
            Tensor::new(av.shape(), av.data().iter().zip(c.data()).map(|(x, y)| x * y).collect())
        };
        let needs = self.needs(&[a]);
        self.push(value, Op::MulConst(a, c.clone()), needs)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    /// Row-wise softmax. `allowed`, when given, is a row-major boolean mask of
    /// the same extent; disallowed entries get probability exactly zero. Every
    /// row must allow at least one entry.
    pub fn softmax_rows(&self, a: Var, allowed: Option<&[bool]>) -> Var {
        let value = {
            let av = self.value_of(a);
            let (r, c) = av.rows_cols();
            if let Some(m) = allowed {
                assert_eq!(m.len(), r * c, "softmax mask extent mismatch");
            }
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &av.data()[i * c..(i + 1) * c];
                let ok = |j: usize| allowed.is_none_or(|m| m[i * c + j]);
                let max = (0..c)
                    .filter(|&j| ok(j))
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(max > f64::NEG_INFINITY, "softmax row {i} fully masked");
                let mut sum = 0.0;
                for j in 0..c {
                    if ok(j) {
                        let e = (row[j] - max).exp();
                        out[i * c + j] = e;
                        sum += e;
                    }
                }
                out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= sum);
            }
            Tensor::new(av.shape(), out)
        };
        let needs = self.needs(&[a]);
        self.push(value, Op::Softmax(a), needs)
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let value = {
            let av = self.value_of(a);
            let (r, c) = av.rows_cols();
            let mut out = av.data().to_vec();
            for row in out.chunks_mut(c.max(1)).take(r) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Tensor::new(av.shape(), out)
        };
        let needs = self.needs(&[a]);
        self.push(value, Op::LogSoftmax(a), needs)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (value, normed, inv_std) = {
            let xv = self.value_of(x);
            let gv = self.value_of(gamma);
            let bv = self.value_of(beta);
            let (r, c) = xv.rows_cols();
            assert_eq!(gv.numel(), c);
            assert_eq!(bv.numel(), c);
            let mut normed = vec![0.0; r * c];
            let mut inv_std = vec![0.0; r];
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &xv.data()[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[i] = is;
                for j in 0..c {
                    let n = (row[j] - mean) * is;
                    normed[i * c + j] = n;
                    out[i * c + j] = n * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::new(xv.shape(), out), normed, inv_std)
        };
        let needs = self.needs(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            needs,
        )
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&self, x: Var) -> Var {
        let (value, norms) = {
            let xv = self.value_of(x);
            let (r, c) = xv.rows_cols();
            let mut norms = vec![0.0; r];
            let mut out = xv.data().to_vec();
            for i in 0..r {
                let row = &mut out[i * c..(i + 1) * c];
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                norms[i] = n;
                row.iter_mut().for_each(|v| *v /= n);
            }
            (Tensor::new(xv.shape(), out), norms)
        };
        let needs = self.needs(&[x]);
        self.push(value, Op::L2NormalizeRows { x, norms }, needs)
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value_of(a).sum());
        let needs = self.needs(&[a]);
        self.push(value, Op::SumAll(a), needs)
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value_of(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over the last axis: `[.., c] -> [..]`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let value = {
            let av = self.value_of(a);
            let (_, c) = av.rows_cols();
            let shape = &av.shape()[..av.shape().len().saturating_sub(1)];
            let data = av.data().chunks(c.max(1)).map(|r| r.iter().sum()).collect();
            Tensor::new(shape, data)
        };
        let needs = self.needs(&[a]);
        self.push(value, Op::SumRows(a), needs)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let value = self.value_of(a).clone().reshaped(shape);
        let needs = self.needs(&[a]);
        self.push(value, Op::Reshape(a), needs)
    }

    /// Selects entries along axis 0: `[d0, rest..] -> [index.len(), rest..]`.
    pub fn gather0(&self, x: Var, index: &[usize]) -> Var {
        let value = {
            let xv = self.value_of(x);
            let d0 = xv.shape()[0];
            let inner = xv.numel() / d0.max(1);
            let mut data = Vec::with_capacity(index.len() * inner);
            for &i in index {
                assert!(i < d0, "gather0 index {i} out of range {d0}");
                data.extend_from_slice(&xv.data()[i * inner..(i + 1) * inner]);
            }
            let mut shape = xv.shape().to_vec();
            shape[0] = index.len();
            Tensor::new(&shape, data)
        };
        let needs = self.needs(&[x]);
        self.push(
            value,
            Op::Gather0 {
                x,
                index: index.to_vec(),
            },
            needs,
        )
    }

    /// `x[start..start+len]` along axis 0.
    pub fn narrow0(&self, x: Var, start: usize, len: usize) -> Var {
        let index: Vec<usize> = (start..start + len).collect();
        self.gather0(x, &index)
    }

    /// Picks flat (row-major) elements of `x` into a tensor of shape `shape`.
    pub fn gather_flat(&self, x: Var, index: &[usize], shape: &[usize]) -> Var {
        let value = {
            let xv = self.value_of(x);
            let data = index.iter().map(|&i| xv.data()[i]).collect();
            Tensor::new(shape, data)
        };
        let needs = self.needs(&[x]);
        self.push(
            value,
            Op::GatherFlat {
                x,
                index: index.to_vec(),
            },
            needs,
        )
    }

    /// Concatenates along axis 0; trailing axes must agree.
    pub fn concat0(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat0 of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape().to_vec();
            let mut d0 = 0;
            let mut data = Vec::new();
            for p in parts {
                let t = &nodes[p.0].value;
                assert_eq!(&t.shape()[1..], &first[1..], "concat0 trailing shape mismatch");
                d0 += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = first;
            shape[0] = d0;
            Tensor::new(&shape, data)
        };
        let needs = self.needs(parts);
        self.push(value, Op::Concat0(parts.to_vec()), needs)
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let lead = nodes[parts[0].0].value.shape().to_vec();
            let (rows, _) = rows_cols(&lead);
            let widths: Vec<usize> = parts
                .iter()
                .map(|p| {
                    let s = nodes[p.0].value.shape();
                    assert_eq!(&s[..s.len() - 1], &lead[..lead.len() - 1]);
                    *s.last().unwrap()
                })
                .collect();
            let total: usize = widths.iter().sum();
            let mut data = vec![0.0; rows * total];
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let src = nodes[p.0].value.data();
                for r in 0..rows {
                    data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                off += w;
            }
            let mut shape = lead;
            *shape.last_mut().unwrap() = total;
            Tensor::new(&shape, data)
        };
        let needs = self.needs(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), needs)
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let value = {
            let xv = self.value_of(x);
            let (r, c) = xv.rows_cols();
            assert!(start + len <= c, "slice_cols out of range");
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&xv.data()[i * c + start..i * c + start + len]);
            }
            let mut shape = xv.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::new(&shape, data)
        };
        let needs = self.needs(&[x]);
        self.push(value, Op::SliceCols { x, start }, needs)
    }

    /// NHWC convolution. `w` is `[kernel·kernel·in_channels, out_channels]`
    /// with patch entries ordered (ky, kx, channel); `b` is `[out_channels]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let (value, cols, geom) = {
            let xv = self.value_of(x);
            let wv = self.value_of(w);
            let bv = self.value_of(b);
            let s = xv.shape();
            assert_eq!(s.len(), 4, "conv2d input must be NHWC");
            let geom = ConvGeom {
                batch: s[0],
                height: s[1],
                width: s[2],
                in_channels: s[3],
                out_channels: wv.shape()[1],
                kernel,
                stride,
                pad,
            };
            assert_eq!(wv.shape()[0], geom.patch_len(), "conv2d weight shape");
            assert_eq!(bv.numel(), geom.out_channels, "conv2d bias shape");
            let cols = im2col(xv.data(), &geom);
            let rows = geom.batch * geom.out_height() * geom.out_width();
            let mut out = vec![0.0; rows * geom.out_channels];
            for r in 0..rows {
                out[r * geom.out_channels..(r + 1) * geom.out_channels].copy_from_slice(bv.data());
            }
            gemm(
                rows,
                geom.patch_len(),
                geom.out_channels,
                &cols,
                false,
                wv.data(),
                false,
                1.0,
                &mut out,
            );
            let value = Tensor::new(
                &[geom.batch, geom.out_height(), geom.out_width(), geom.out_channels],
                out,
            );
            (value, cols, geom)
        };
        let needs = self.needs(&[x, w, b]);
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, needs)
    }

    /// Nearest-neighbour 2× upsampling of an NHWC tensor.
    pub fn upsample2x(&self, x: Var) -> Var {
        let (value, dims) = {
            let xv = self.value_of(x);
            let s = xv.shape();
            assert_eq!(s.len(), 4, "upsample2x input must be NHWC");
            let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
            let mut out = vec![0.0; n * 4 * h * w * c];
            for b in 0..n {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let src = ((b * h + y / 2) * w + xx / 2) * c;
                        let dst = ((b * 2 * h + y) * 2 * w + xx) * c;
                        out[dst..dst + c].copy_from_slice(&xv.data()[src..src + c]);
                    }
                }
            }
            (Tensor::new(&[n, 2 * h, 2 * w, c], out), (n, h, w, c))
        };
        let needs = self.needs(&[x]);
        self.push(
            value,
            Op::Upsample2x {
                x,
                batch: dims.0,
                height: dims.1,
                width: dims.2,
                channels: dims.3,
            },
            needs,
        )
    }

    /// Gradient of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.0].value.numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            propagate(&nodes, &mut grads, node, &gout);
            grads[i] = Some(gout);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Grads { grads, shapes }
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo, pl) = (g.out_height(), g.out_width(), g.patch_len());
    let mut cols = vec![0.0; g.batch * ho * wo * pl];
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * pl;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((b * g.height + iy as usize) * g.width + ix as usize) * g.in_channels;
                        let dst = row + (ky * g.kernel + kx) * g.in_channels;
                        cols[dst..dst + g.in_channels].copy_from_slice(&x[src..src + g.in_channels]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo, pl) = (g.out_height(), g.out_width(), g.patch_len());
    let mut dx = vec![0.0; g.batch * g.height * g.width * g.in_channels];
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * pl;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((b * g.height + iy as usize) * g.width + ix as usize) * g.in_channels;
                        let src = row + (ky * g.kernel + kx) * g.in_channels;
                        for c in 0..g.in_channels {
                            dx[dst + c] += dcols[src + c];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    f(slot);
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, gout: &[f64]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(a), val(b));
            let (m, k) = if ta {
                (av.shape()[1], av.shape()[0])
            } else {
                (av.shape()[0], av.shape()[1])
            };
            let n = node.value.shape()[1];
            accumulate(grads, nodes, a, |ga| {
                if ta {
                    // a stored k×m: ga = op(b) · goutᵀ
                    gemm(k, n, m, bv.data(), tb, gout, true, 1.0, ga);
                } else {
                    // ga = gout · op(b)ᵀ
                    gemm(m, n, k, gout, false, bv.data(), !tb, 1.0, ga);
                }
            });
            accumulate(grads, nodes, b, |gb| {
                if tb {
                    // b stored n×k: gb = goutᵀ · op(a)
                    gemm(n, m, k, gout, true, av.data(), ta, 1.0, gb);
                } else {
                    // gb = op(a)ᵀ · gout
                    gemm(k, m, n, av.data(), !ta, gout, false, 1.0, gb);
                }
            });
        }
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, |g| add_into(g, gout));
            accumulate(grads, nodes, b, |g| add_into(g, gout));
        }
        &Op::Sub(a, b) => {
            accumulate(grads, nodes, a, |g| add_into(g, gout));
            accumulate(grads, nodes, b, |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x -= y));
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            accumulate(grads, nodes, a, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * bv[i];
                }
            });
            accumulate(grads, nodes, b, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * av[i];
                }
            });
        }
        &Op::Div(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            accumulate(grads, nodes, a, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] / bv[i];
                }
            });
            accumulate(grads, nodes, b, |g| {
                for i in 0..g.len() {
                    g[i] -= gout[i] * av[i] / (bv[i] * bv[i]);
                }
            });
        }
        &Op::AddRow(a, bias) => {
            accumulate(grads, nodes, a, |g| add_into(g, gout));
            let c = val(bias).numel();
            accumulate(grads, nodes, bias, |g| {
                for row in gout.chunks(c.max(1)) {
                    add_into(g, row);
                }
            });
        }
        &Op::Scale(a, f) => accumulate(grads, nodes, a, |g| {
            g.iter_mut().zip(gout).for_each(|(x, y)| *x += f * y)
        }),
        &Op::AddConst(a) => accumulate(grads, nodes, a, |g| add_into(g, gout)),
        Op::MulConst(a, c) => accumulate(grads, nodes, *a, |g| {
            for i in 0..g.len() {
                g[i] += gout[i] * c.data()[i];
            }
        }),
        &Op::Relu(a) => {
            let av = val(a).data();
            accumulate(grads, nodes, a, |g| {
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        g[i] += gout[i];
                    }
                }
            })
        }
        &Op::Sigmoid(a) => {
            let y = node.value.data();
            accumulate(grads, nodes, a, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * y[i] * (1.0 - y[i]);
                }
            })
        }
        &Op::Softplus(a) => {
            let av = val(a).data();
            accumulate(grads, nodes, a, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * sigmoid(av[i]);
                }
            })
        }
        &Op::Exp(a) => {
            let y = node.value.data();
            accumulate(grads, nodes, a, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * y[i];
                }
            })
        }
        &Op::Log(a) => {
            let av = val(a).data();
            accumulate(grads, nodes, a, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] / av[i];
                }
            })
        }
        &Op::Softmax(a) => {
            let y = node.value.data();
            let (r, c) = node.value.rows_cols();
            accumulate(grads, nodes, a, |g| {
                for i in 0..r {
                    let ys = &y[i * c..(i + 1) * c];
                    let gs = &gout[i * c..(i + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        g[i * c + j] += ys[j] * (gs[j] - dot);
                    }
                }
            })
        }
        &Op::LogSoftmax(a) => {
            let y = node.value.data();
            let (r, c) = node.value.rows_cols();
            accumulate(grads, nodes, a, |g| {
                for i in 0..r {
                    let gs = &gout[i * c..(i + 1) * c];
                    let total: f64 = gs.iter().sum();
                    for j in 0..c {
                        g[i * c + j] += gs[j] - y[i * c + j].exp() * total;
                    }
                }
            })
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            normed,
            inv_std,
        } => {
            let gv = val(*gamma).data();
            let (r, c) = node.value.rows_cols();
            accumulate(grads, nodes, *gamma, |g| {
                for i in 0..r {
                    for j in 0..c {
                        g[j] += gout[i * c + j] * normed[i * c + j];
                    }
                }
            });
            accumulate(grads, nodes, *beta, |g| {
                for row in gout.chunks(c) {
                    add_into(g, row);
                }
            });
            accumulate(grads, nodes, *x, |g| {
                let mut dn = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dn[j] = gout[i * c + j] * gv[j];
                    }
                    let mean_dn = dn.iter().sum::<f64>() / c as f64;
                    let mean_dn_n = dn
                        .iter()
                        .zip(&normed[i * c..(i + 1) * c])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / c as f64;
                    for j in 0..c {
                        g[i * c + j] += inv_std[i] * (dn[j] - mean_dn - normed[i * c + j] * mean_dn_n);
                    }
                }
            });
        }
        Op::L2NormalizeRows { x, norms } => {
            let y = node.value.data();
            let (r, c) = node.value.rows_cols();
            accumulate(grads, nodes, *x, |g| {
                for i in 0..r {
                    let ys = &y[i * c..(i + 1) * c];
                    let gs = &gout[i * c..(i + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        g[i * c + j] += (gs[j] - ys[j] * dot) / norms[i];
                    }
                }
            })
        }
        &Op::SumAll(a) => accumulate(grads, nodes, a, |g| g.iter_mut().for_each(|x| *x += gout[0])),
        &Op::SumRows(a) => {
            let (_, c) = val(a).rows_cols();
            accumulate(grads, nodes, a, |g| {
                for (i, row) in g.chunks_mut(c.max(1)).enumerate() {
                    row.iter_mut().for_each(|x| *x += gout[i]);
                }
            })
        }
        &Op::Reshape(a) => accumulate(grads, nodes, a, |g| add_into(g, gout)),
        Op::Gather0 { x, index } => {
            let xv = val(*x);
            let inner = xv.numel() / xv.shape()[0].max(1);
            accumulate(grads, nodes, *x, |g| {
                for (k, &i) in index.iter().enumerate() {
                    add_into(&mut g[i * inner..(i + 1) * inner], &gout[k * inner..(k + 1) * inner]);
                }
            })
        }
        Op::GatherFlat { x, index } => accumulate(grads, nodes, *x, |g| {
            for (k, &i) in index.iter().enumerate() {
                g[i] += gout[k];
            }
        }),
        Op::Concat0(parts) => {
            let mut off = 0;
            for p in parts {
                let n = val(*p).numel();
                accumulate(grads, nodes, *p, |g| add_into(g, &gout[off..off + n]));
                off += n;
            }
        }
        Op::ConcatCols(parts) => {
            let (rows, total) = node.value.rows_cols();
            let mut off = 0;
            for p in parts {
                let (_, w) = val(*p).rows_cols();
                accumulate(grads, nodes, *p, |g| {
                    for r in 0..rows {
                        add_into(&mut g[r * w..(r + 1) * w], &gout[r * total + off..r * total + off + w]);
                    }
                });
                off += w;
            }
        }
        &Op::SliceCols { x, start } => {
            let (r, c) = val(x).rows_cols();
            let (_, len) = node.value.rows_cols();
            accumulate(grads, nodes, x, |g| {
                for i in 0..r {
                    add_into(
                        &mut g[i * c + start..i * c + start + len],
                        &gout[i * len..(i + 1) * len],
                    );
                }
            })
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let rows = geom.batch * geom.out_height() * geom.out_width();
            let (pl, co) = (geom.patch_len(), geom.out_channels);
            accumulate(grads, nodes, *b, |g| {
                for row in gout.chunks(co) {
                    add_into(g, row);
                }
            });
            accumulate(grads, nodes, *w, |g| {
                gemm(pl, rows, co, cols, true, gout, false, 1.0, g);
            });
            if nodes[x.0].needs_grad {
                let mut dcols = vec![0.0; rows * pl];
                gemm(rows, co, pl, gout, false, val(*w).data(), true, 0.0, &mut dcols);
                let dx = col2im(&dcols, geom);
                accumulate(grads, nodes, *x, |g| add_into(g, &dx));
            }
        }
        &Op::Upsample2x {
            x,
            batch,
            height,
            width,
            channels,
        } => accumulate(grads, nodes, x, |g| {
            let c = channels;
            for b in 0..batch {
                for y in 0..2 * height {
                    for xx in 0..2 * width {
                        let dst = ((b * height + y / 2) * width + xx / 2) * c;
                        let src = ((b * 2 * height + y) * 2 * width + xx) * c;
                        add_into(&mut g[dst..dst + c], &gout[src..src + c]);
                    }
                }
            }
        }),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` at every input entry.
    fn numeric(inputs: &[Tensor], f: &dyn Fn(&Graph, &[Var]) -> Var) -> Vec<Tensor> {
        let eval = |ins: &[Tensor]| {
            let g = Graph::new();
            let vs: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
            let out = f(&g, &vs);
            g.scalar(out)
        };
        let eps = 1e-6;
        inputs
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let mut grad = Tensor::zeros(t.shape());
                for i in 0..t.numel() {
                    let mut plus = inputs.to_vec();
                    plus[k].data_mut()[i] += eps;
                    let mut minus = inputs.to_vec();
                    minus[k].data_mut()[i] -= eps;
                    grad.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                }
                grad
            })
            .collect()
    }

    fn check(inputs: Vec<Tensor>, f: impl Fn(&Graph, &[Var]) -> Var) {
        let g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&g, &vs);
        let grads = g.backward(out);
        let num = numeric(&inputs, &f);
        for (v, n) in vs.iter().zip(&num) {
            let a = grads.get_or_zeros(*v);
            for (x, y) in a.data().iter().zip(n.data()) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-6);
                assert!(rel < 1e-5, "analytic {x} vs numeric {y}");
            }
        }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    // Weighted sum so every output entry gets a distinct upstream gradient.
    fn readout(g: &Graph, v: Var) -> Var {
        let shape = g.shape(v);
        let w = rand_t(&shape, 99);
        let p = g.mul_const(v, &w);
        g.sum(p)
    }

    #[test]
    fn matmul_grads_all_transposes() {
        for ta in [false, true] {
            for tb in [false, true] {
                let a = if ta { rand_t(&[4, 3], 1) } else { rand_t(&[3, 4], 1) };
                let b = if tb { rand_t(&[5, 4], 2) } else { rand_t(&[4, 5], 2) };
                check(vec![a, b], |g, v| {
                    let m = g.matmul_t(v[0], ta, v[1], tb);
                    readout(g, m)
                });
            }
        }
    }

    #[test]
    fn elementwise_grads() {
        let a = rand_t(&[2, 3], 3);
        let b = Tensor::new(
            &[2, 3],
            rand_t(&[2, 3], 4).data().iter().map(|v| v.abs() + 0.5).collect(),
        );
        check(vec![a.clone(), b.clone()], |g, v| {
            let x = g.add(v[0], v[1]);
            let y = g.mul(x, v[1]);
            let z = g.div(y, v[1]);
            let w = g.sub(z, v[0]);
            let s = g.sigmoid(w);
            let t = g.softplus(v[0]);
            let u = g.add(s, t);
            let e = g.exp(g.scale(u, 0.3));
            let l = g.log(v[1]);
            let r = g.relu(v[0]);
            let sum = g.add(g.add(e, l), r);
            readout(g, sum)
        });
    }

    #[test]
    fn softmax_and_log_softmax_grads() {
        let a = rand_t(&[3, 5], 5);
        let mask: Vec<bool> = (0..15).map(|i| i % 3 != 1).collect();
        check(vec![a.clone()], |g, v| {
            let s = g.softmax_rows(v[0], Some(&mask));
            readout(g, s)
        });
        check(vec![a], |g, v| {
            let s = g.log_softmax_rows(v[0]);
            readout(g, s)
        });
    }

    #[test]
    fn masked_softmax_zeroes_disallowed_entries() {
        let g = Graph::new();
        let a = g.constant(Tensor::new(&[1, 3], vec![5.0, 1.0, 2.0]));
        let s = g.softmax_rows(a, Some(&[false, true, true]));
        let v = g.value_of(s);
        assert_eq!(v.data()[0], 0.0);
        assert!((v.data()[1] + v.data()[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_and_normalize_grads() {
        check(vec![rand_t(&[3, 6], 6), rand_t(&[6], 7), rand_t(&[6], 8)], |g, v| {
            let n = g.layer_norm(v[0], v[1], v[2], 1e-5);
            readout(g, n)
        });
        check(vec![rand_t(&[3, 4], 9)], |g, v| {
            let n = g.l2_normalize_rows(v[0]);
            readout(g, n)
        });
    }

    #[test]
    fn structural_op_grads() {
        check(vec![rand_t(&[3, 2, 4], 10), rand_t(&[4], 11)], |g, v| {
            let a = g.add_row(v[0], v[1]);
            let b = g.gather0(a, &[2, 0, 2]);
            let c = g.concat0(&[a, b]);
            let d = g.slice_cols(c, 1, 2);
            let e = g.concat_cols(&[d, c]);
            let f = g.reshape(e, &[12, 6]);
            let h = g.gather_flat(f, &[0, 5, 5, 17, 40], &[5]);
            let s = g.sum_rows(e);
            let t = g.sum(h);
            let u = g.sum(g.mul(s, s));
            g.add(t, u)
        });
    }

    #[test]
    fn conv_and_upsample_grads() {
        check(
            vec![rand_t(&[2, 5, 4, 3], 12), rand_t(&[27, 2], 13), rand_t(&[2], 14)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 3, 2, 1);
                let u = g.upsample2x(y);
                readout(g, u)
            },
        );
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let x = rand_t(&[1, 4, 4, 2], 20);
        let w = rand_t(&[18, 3], 21);
        let b = rand_t(&[3], 22);
        let g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv, 3, 1, 1);
        let out = g.value_of(y).clone();
        for oy in 0..4 {
            for ox in 0..4 {
                for co in 0..3 {
                    let mut acc = b.data()[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = oy as isize + ky as isize - 1;
                            let ix = ox as isize + kx as isize - 1;
                            if !(0..4).contains(&iy) || !(0..4).contains(&ix) {
                                continue;
                            }
                            for ci in 0..2 {
                                let xi = ((iy as usize) * 4 + ix as usize) * 2 + ci;
                                let wi = ((ky * 3 + kx) * 2 + ci) * 3 + co;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    let got = out.data()[(oy * 4 + ox) * 3 + co];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let c = g.constant(Tensor::full(&[2], 3.0));
        let p = g.param(Tensor::full(&[2], 2.0));
        let m = g.mul(c, p);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[3.0, 3.0]);
    }
}
