//! Forward definitions and the matching backward rules.

use crate::graph::Node;
use crate::kernels::{col2im, gemm, im2col, ConvGeometry, MatView};
use crate::{Array, AutodiffError, Graph, Result, Var};

const NORM_FLOOR: f64 = 1e-12;

pub(crate) enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geometry: ConvGeometry,
        cols: Vec<f64>,
    },
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    Relu(usize),
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(usize),
    Log(usize),
    Exp(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    GatherRows {
        table: usize,
        indices: Vec<usize>,
    },
    L2Normalize {
        input: usize,
        norms: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

fn finish<'g>(
    graph: &'g Graph,
    name: &'static str,
    value: Array,
    requires_grad: bool,
    op: Op,
) -> Result<Var<'g>> {
    if !value.is_finite() {
        return Err(AutodiffError::NonFinite { op: name });
    }
    Ok(graph.push(value, requires_grad, op))
}

fn last_axis(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape.last() {
        Some(&d) if d > 0 => Ok((shape.iter().product::<usize>() / d, d)),
        _ => Err(AutodiffError::shape(op, format!("needs a non-empty last axis, got {shape:?}"))),
    }
}

fn matrix_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(AutodiffError::shape(op, format!("expected a matrix, got {shape:?}"))),
    }
}

impl<'g> Var<'g> {
    fn unary(
        self,
        name: &'static str,
        f: impl FnOnce(&Array) -> Result<(Array, Op)>,
    ) -> Result<Var<'g>> {
        let (value, op, rg) = self.graph.with_nodes(|n| {
            let node = &n[self.id];
            f(&node.value).map(|(v, op)| (v, op, node.requires_grad))
        })?;
        finish(self.graph, name, value, rg, op)
    }

    fn binary(
        self,
        other: Var<'g>,
        name: &'static str,
        f: impl FnOnce(&Array, &Array) -> Result<(Array, Op)>,
    ) -> Result<Var<'g>> {
        self.check_same_graph(&other);
        let (value, op, rg) = self.graph.with_nodes(|n| {
            let (a, b) = (&n[self.id], &n[other.id]);
            f(&a.value, &b.value).map(|(v, op)| (v, op, a.requires_grad || b.requires_grad))
        })?;
        finish(self.graph, name, value, rg, op)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (ia, ib) = (self.id, other.id);
        self.binary(other, "matmul", |a, b| {
            let (m, k) = matrix_dims(a.shape(), "matmul")?;
            let (k2, n) = matrix_dims(b.shape(), "matmul")?;
            if k != k2 {
                return Err(AutodiffError::shape(
                    "matmul",
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let mut out = vec![0.0; m * n];
            gemm(
                1.0,
                MatView::row_major(a.data(), m, k),
                MatView::row_major(b.data(), k, n),
                0.0,
                &mut out,
            );
            Ok((Array::from_parts(vec![m, n], out), Op::MatMul(ia, ib)))
        })
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("transpose", |a| {
            let (r, c) = matrix_dims(a.shape(), "transpose")?;
            Ok((Array::from_parts(vec![c, r], transposed(a.data(), r, c)), Op::Transpose(id)))
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("reshape", |a| {
            let v = a.clone().reshape(shape.to_vec())?;
            Ok((v, Op::Reshape(id)))
        })
    }

    /// 2-D convolution of `[N, C, H, W]` by `[OC, C, kh, kw]` with an optional
    /// `[OC]` bias, lowered to im2col + matmul.
    pub fn conv2d(
        self,
        weight: Var<'g>,
        bias: Option<Var<'g>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g>> {
        self.check_same_graph(&weight);
        if let Some(b) = &bias {
            self.check_same_graph(b);
        }
        if stride == 0 {
            return Err(AutodiffError::invalid("conv2d", "stride must be positive"));
        }
        let (value, op, rg) = self.graph.with_nodes(|n| -> Result<_> {
            let x = &n[self.id].value;
            let w = &n[weight.id].value;
            let [batch, channels, height, width] = *x.shape() else {
                return Err(AutodiffError::shape("conv2d", format!("input {:?}", x.shape())));
            };
            let [oc, wc, kh, kw] = *w.shape() else {
                return Err(AutodiffError::shape("conv2d", format!("weight {:?}", w.shape())));
            };
            if wc != channels {
                return Err(AutodiffError::shape(
                    "conv2d",
                    format!("input has {channels} channels, weight expects {wc}"),
                ));
            }
            if height + 2 * padding < kh || width + 2 * padding < kw || kh == 0 || kw == 0 {
                return Err(AutodiffError::shape("conv2d", "kernel larger than padded input"));
            }
            let bias_value = match bias {
                Some(b) => {
                    let bv = &n[b.id].value;
                    if bv.shape() != [oc] {
                        return Err(AutodiffError::shape("conv2d", format!("bias {:?}", bv.shape())));
                    }
                    Some(bv)
                }
                None => None,
            };
            let geometry = ConvGeometry {
                channels,
                height,
                width,
                kernel_h: kh,
                kernel_w: kw,
                stride,
                padding,
                out_h: (height + 2 * padding - kh) / stride + 1,
                out_w: (width + 2 * padding - kw) / stride + 1,
            };
            let (rows, spatial) = (geometry.col_rows(), geometry.col_cols());
            let mut cols = vec![0.0; batch * rows * spatial];
            let mut out = vec![0.0; batch * oc * spatial];
            let in_stride = channels * height * width;
            for i in 0..batch {
                let c = &mut cols[i * rows * spatial..(i + 1) * rows * spatial];
                im2col(&x.data()[i * in_stride..(i + 1) * in_stride], &geometry, c);
                let o = &mut out[i * oc * spatial..(i + 1) * oc * spatial];
                gemm(
                    1.0,
                    MatView::row_major(w.data(), oc, rows),
                    MatView::row_major(c, rows, spatial),
                    0.0,
                    o,
                );
                if let Some(bv) = bias_value {
                    for (ch, plane) in o.chunks_mut(spatial).enumerate() {
                        let b = bv.data()[ch];
                        plane.iter_mut().for_each(|v| *v += b);
                    }
                }
            }
            let rg = n[self.id].requires_grad
                || n[weight.id].requires_grad
                || bias.is_some_and(|b| n[b.id].requires_grad);
            let value =
                Array::from_parts(vec![batch, oc, geometry.out_h, geometry.out_w], out);
            let op = Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                geometry,
                cols,
            };
            Ok((value, op, rg))
        })?;
        finish(self.graph, "conv2d", value, rg, op)
    }

    /// Affine map `x w + b` for `x: [m, in]`, `w: [in, out]`, `b: [out]`.
    pub fn dense(self, w: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        self.check_same_graph(&w);
        self.check_same_graph(&b);
        let (value, op, rg) = self.graph.with_nodes(|n| -> Result<_> {
            let (xv, wv, bv) = (&n[self.id].value, &n[w.id].value, &n[b.id].value);
            let (m, k) = matrix_dims(xv.shape(), "dense")?;
            let (k2, out_dim) = matrix_dims(wv.shape(), "dense")?;
            if k != k2 || bv.shape() != [out_dim] {
                return Err(AutodiffError::shape(
                    "dense",
                    format!("x {:?}, w {:?}, b {:?}", xv.shape(), wv.shape(), bv.shape()),
                ));
            }
            let mut out: Vec<f64> = bv.data().repeat(m);
            gemm(
                1.0,
                MatView::row_major(xv.data(), m, k),
                MatView::row_major(wv.data(), k, out_dim),
                1.0,
                &mut out,
            );
            let rg = n[self.id].requires_grad || n[w.id].requires_grad || n[b.id].requires_grad;
            Ok((
                Array::from_parts(vec![m, out_dim], out),
                Op::Dense {
                    x: self.id,
                    w: w.id,
                    b: b.id,
                },
                rg,
            ))
        })?;
        finish(self.graph, "dense", value, rg, op)
    }

    pub fn relu(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("relu", |a| {
            let data = a.data().iter().map(|&v| v.max(0.0)).collect();
            Ok((Array::from_parts(a.shape().to_vec(), data), Op::Relu(id)))
        })
    }

    /// Max pooling over `[N, C, H, W]` with a square window. Ties resolve to
    /// the first maximum in row-major window order.
    pub fn max_pool2d(self, size: usize, stride: usize) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("max_pool2d", |a| {
            let [batch, channels, h, w] = *a.shape() else {
                return Err(AutodiffError::shape("max_pool2d", format!("input {:?}", a.shape())));
            };
            if size == 0 || stride == 0 {
                return Err(AutodiffError::invalid("max_pool2d", "size and stride must be positive"));
            }
            if h < size || w < size {
                return Err(AutodiffError::shape("max_pool2d", "window larger than input"));
            }
            let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
            let mut out = Vec::with_capacity(batch * channels * oh * ow);
            let mut argmax = Vec::with_capacity(out.capacity());
            let src = a.data();
            for plane in 0..batch * channels {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for ky in 0..size {
                            let row = base + (oy * stride + ky) * w + ox * stride;
                            for kx in 0..size {
                                let v = src[row + kx];
                                if v > best {
                                    best = v;
                                    best_idx = row + kx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
            Ok((
                Array::from_parts(vec![batch, channels, oh, ow], out),
                Op::MaxPool2d { input: id, argmax },
            ))
        })
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("global_avg_pool", |a| {
            let [batch, channels, h, w] = *a.shape() else {
                return Err(AutodiffError::shape("global_avg_pool", format!("{:?}", a.shape())));
            };
            if h * w == 0 {
                return Err(AutodiffError::shape("global_avg_pool", "empty spatial extent"));
            }
            let inv = 1.0 / (h * w) as f64;
            let data = a.data().chunks(h * w).map(|p| p.iter().sum::<f64>() * inv).collect();
            Ok((Array::from_parts(vec![batch, channels], data), Op::GlobalAvgPool(id)))
        })
    }

    /// Normalizes over the last axis, then applies the `[D]` gain and shift.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        self.check_same_graph(&gamma);
        self.check_same_graph(&beta);
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(AutodiffError::invalid("layer_norm", "eps must be positive"));
        }
        let (value, op, rg) = self.graph.with_nodes(|n| -> Result<_> {
            let (x, gv, bv) = (&n[self.id].value, &n[gamma.id].value, &n[beta.id].value);
            let (rows, d) = last_axis(x.shape(), "layer_norm")?;
            if gv.shape() != [d] || bv.shape() != [d] {
                return Err(AutodiffError::shape("layer_norm", "gain/shift must be [D]"));
            }
            let mut normalized = Vec::with_capacity(x.len());
            let mut inv_std = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(d) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                for (j, v) in row.iter().enumerate() {
                    let xh = (v - mean) * is;
                    normalized.push(xh);
                    out.push(xh * gv.data()[j] + bv.data()[j]);
                }
            }
            let rg = n[self.id].requires_grad || n[gamma.id].requires_grad || n[beta.id].requires_grad;
            Ok((
                Array::from_parts(x.shape().to_vec(), out),
                Op::LayerNorm {
                    x: self.id,
                    gamma: gamma.id,
                    beta: beta.id,
                    normalized,
                    inv_std,
                },
                rg,
            ))
        })?;
        finish(self.graph, "layer_norm", value, rg, op)
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("softmax", |a| {
            let (_, d) = last_axis(a.shape(), "softmax")?;
            let mut out = Vec::with_capacity(a.len());
            for row in a.data().chunks(d) {
                out.extend(softmax_row(row));
            }
            Ok((Array::from_parts(a.shape().to_vec(), out), Op::Softmax(id)))
        })
    }

    pub fn log(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("log", |a| {
            let data = a.data().iter().map(|v| v.ln()).collect();
            Ok((Array::from_parts(a.shape().to_vec(), data), Op::Log(id)))
        })
    }

    pub fn exp(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("exp", |a| {
            let data = a.data().iter().map(|v| v.exp()).collect();
            Ok((Array::from_parts(a.shape().to_vec(), data), Op::Exp(id)))
        })
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let (ia, ib) = (self.id, other.id);
        self.binary(other, "add", |a, b| {
            same_shape(a, b, "add")?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Ok((Array::from_parts(a.shape().to_vec(), data), Op::Add(ia, ib)))
        })
    }

    /// `self - other`, expressed through add and scale.
    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.add(other.scale(-1.0)?)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (ia, ib) = (self.id, other.id);
        self.binary(other, "mul", |a, b| {
            same_shape(a, b, "mul")?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Ok((Array::from_parts(a.shape().to_vec(), data), Op::Mul(ia, ib)))
        })
    }

    /// Multiply by a constant.
    pub fn scale(self, factor: f64) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("scale", |a| {
            let data = a.data().iter().map(|v| v * factor).collect();
            Ok((Array::from_parts(a.shape().to_vec(), data), Op::Scale(id, factor)))
        })
    }

    /// Multiply every element by a one-element node.
    pub fn scale_by(self, factor: Var<'g>) -> Result<Var<'g>> {
        let (ia, is) = (self.id, factor.id);
        self.binary(factor, "scale_by", |a, s| {
            let Some(s) = s.item() else {
                return Err(AutodiffError::shape("scale_by", format!("factor {:?}", s.shape())));
            };
            let data = a.data().iter().map(|v| v * s).collect();
            Ok((Array::from_parts(a.shape().to_vec(), data), Op::ScaleBy(ia, is)))
        })
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::invalid("concat", "no inputs"))?;
        let graph = first.graph;
        for p in parts {
            first.check_same_graph(p);
        }
        let (value, rg) = graph.with_nodes(|n| -> Result<_> {
            let shape0 = n[first.id].value.shape();
            if axis >= shape0.len() {
                return Err(AutodiffError::shape("concat", format!("axis {axis} for {shape0:?}")));
            }
            let mut out_shape = shape0.to_vec();
            out_shape[axis] = 0;
            for p in parts {
                let s = n[p.id].value.shape();
                let compatible = s.len() == shape0.len()
                    && s.iter().zip(shape0).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(AutodiffError::shape("concat", format!("{shape0:?} vs {s:?}")));
                }
                out_shape[axis] += s[axis];
            }
            let outer: usize = shape0[..axis].iter().product();
            let inner: usize = shape0[axis + 1..].iter().product();
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let v = &n[p.id].value;
                    let chunk = v.shape()[axis] * inner;
                    out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let rg = parts.iter().any(|p| n[p.id].requires_grad);
            Ok((Array::from_parts(out_shape, out), rg))
        })?;
        let op = Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            axis,
        };
        finish(graph, "concat", value, rg, op)
    }

    pub fn sum(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("sum", |a| Ok((Array::scalar(a.sum()), Op::Sum(id))))
    }

    /// Mean of all elements.
    pub fn mean(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("mean", |a| {
            if a.is_empty() {
                return Err(AutodiffError::shape("mean", "empty input"));
            }
            Ok((Array::scalar(a.sum() / a.len() as f64), Op::Mean(id)))
        })
    }

    /// Column means of a matrix: `[n, d] -> [1, d]`.
    pub fn mean_rows(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("mean_rows", |a| {
            let (r, c) = matrix_dims(a.shape(), "mean_rows")?;
            if r == 0 {
                return Err(AutodiffError::shape("mean_rows", "no rows"));
            }
            let mut out = vec![0.0; c];
            for row in a.data().chunks(c) {
                out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o /= r as f64);
            Ok((Array::from_parts(vec![1, c], out), Op::MeanRows(id)))
        })
    }

    /// Row lookup into a `[V, D]` table, giving `[indices.len(), D]`.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("gather_rows", |t| {
            let (v, d) = matrix_dims(t.shape(), "gather_rows")?;
            if indices.is_empty() {
                return Err(AutodiffError::invalid("gather_rows", "no indices"));
            }
            let mut out = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                if i >= v {
                    return Err(AutodiffError::invalid(
                        "gather_rows",
                        format!("index {i} out of range for {v} rows"),
                    ));
                }
                out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
            Ok((
                Array::from_parts(vec![indices.len(), d], out),
                Op::GatherRows {
                    table: id,
                    indices: indices.to_vec(),
                },
            ))
        })
    }

    /// Scale each vector along the last axis to unit Euclidean norm.
    pub fn l2_normalize(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("l2_normalize", |a| {
            let (_, d) = last_axis(a.shape(), "l2_normalize")?;
            let mut norms = Vec::with_capacity(a.len() / d);
            let mut out = Vec::with_capacity(a.len());
            for row in a.data().chunks(d) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < NORM_FLOOR {
                    return Err(AutodiffError::DegenerateInput {
                        op: "l2_normalize",
                        detail: "zero-norm vector".into(),
                    });
                }
                norms.push(norm);
                out.extend(row.iter().map(|v| v / norm));
            }
            Ok((
                Array::from_parts(a.shape().to_vec(), out),
                Op::L2Normalize { input: id, norms },
            ))
        })
    }

    /// Pairwise cosine similarities of the rows of `[m, d]` and `[n, d]`,
    /// giving `[m, n]`.
    pub fn cosine_similarity(self, other: Var<'g>) -> Result<Var<'g>> {
        let a = self.l2_normalize()?;
        let b = other.l2_normalize()?;
        a.matmul(b.transpose()?)
    }

    /// Weighted softmax cross-entropy over the rows of `[B, K]` logits:
    /// `sum_i w_i * CE_i / sum_i w_i`.
    pub fn softmax_cross_entropy(self, labels: &[usize], weights: &[f64]) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("softmax_cross_entropy", |a| {
            let (b, k) = matrix_dims(a.shape(), "softmax_cross_entropy")?;
            if b == 0 || k == 0 {
                return Err(AutodiffError::shape("softmax_cross_entropy", "empty logits"));
            }
            if labels.len() != b || weights.len() != b {
                return Err(AutodiffError::shape(
                    "softmax_cross_entropy",
                    format!("{b} rows, {} labels, {} weights", labels.len(), weights.len()),
                ));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return Err(AutodiffError::invalid(
                    "softmax_cross_entropy",
                    format!("label {bad} out of range for {k} classes"),
                ));
            }
            if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                return Err(AutodiffError::invalid(
                    "softmax_cross_entropy",
                    "weights must be positive and finite",
                ));
            }
            let total_weight: f64 = weights.iter().sum();
            let mut probs = Vec::with_capacity(b * k);
            let mut loss = 0.0;
            for ((row, &label), &w) in a.data().chunks(k).zip(labels).zip(weights) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += w * (lse - row[label]);
                probs.extend(row.iter().map(|v| (v - lse).exp()));
            }
            Ok((
                Array::scalar(loss / total_weight),
                Op::SoftmaxCrossEntropy {
                    logits: id,
                    labels: labels.to_vec(),
                    weights: weights.to_vec(),
                    probs,
                },
            ))
        })
    }
}

fn same_shape(a: &Array, b: &Array, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn softmax_row(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
    row.iter().map(move |v| (v - max).exp() / denom)
}

fn transposed(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn map_with(a: &Array, g: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a.data().iter().zip(g.data()).map(|(&x, &gv)| f(x, gv)).collect();
    Array::from_parts(a.shape().to_vec(), data)
}

/// Gradient contributions `(parent id, d root / d parent)` of one node.
pub(crate) fn backward_rule(nodes: &[Node], node: &Node, g: &Array) -> Vec<(usize, Array)> {
    let val = |id: usize| &nodes[id].value;
    let wants = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            let mut out = Vec::new();
            if wants(*a) {
                let mut da = vec![0.0; m * k];
                gemm(
                    1.0,
                    MatView::row_major(g.data(), m, n),
                    MatView::row_major(bv.data(), k, n).t(),
                    0.0,
                    &mut da,
                );
                out.push((*a, Array::from_parts(vec![m, k], da)));
            }
            if wants(*b) {
                let mut db = vec![0.0; k * n];
                gemm(
                    1.0,
                    MatView::row_major(av.data(), m, k).t(),
                    MatView::row_major(g.data(), m, n),
                    0.0,
                    &mut db,
                );
                out.push((*b, Array::from_parts(vec![k, n], db)));
            }
            out
        }
        Op::Transpose(a) => {
            let (r, c) = (g.shape()[0], g.shape()[1]);
            vec![(*a, Array::from_parts(vec![c, r], transposed(g.data(), r, c)))]
        }
        Op::Reshape(a) => vec![(*a, Array::from_parts(val(*a).shape().to_vec(), g.data().to_vec()))],
        Op::Conv2d {
            input,
            weight,
            bias,
            geometry,
            cols,
        } => {
            let wv = val(*weight);
            let oc = wv.shape()[0];
            let batch = val(*input).shape()[0];
            let (rows, spatial) = (geometry.col_rows(), geometry.col_cols());
            let mut out = Vec::new();
            if wants(*weight) {
                let mut dw = vec![0.0; oc * rows];
                for i in 0..batch {
                    gemm(
                        1.0,
                        MatView::row_major(&g.data()[i * oc * spatial..(i + 1) * oc * spatial], oc, spatial),
                        MatView::row_major(&cols[i * rows * spatial..(i + 1) * rows * spatial], rows, spatial).t(),
                        1.0,
                        &mut dw,
                    );
                }
                out.push((*weight, Array::from_parts(wv.shape().to_vec(), dw)));
            }
            if let Some(b) = bias.filter(|b| wants(*b)) {
                let mut db = vec![0.0; oc];
                for (idx, plane) in g.data().chunks(spatial).enumerate() {
                    db[idx % oc] += plane.iter().sum::<f64>();
                }
                out.push((b, Array::from_parts(vec![oc], db)));
            }
            if wants(*input) {
                let in_len = geometry.channels * geometry.height * geometry.width;
                let mut dx = vec![0.0; batch * in_len];
                let mut dcols = vec![0.0; rows * spatial];
                for i in 0..batch {
                    gemm(
                        1.0,
                        MatView::row_major(wv.data(), oc, rows).t(),
                        MatView::row_major(&g.data()[i * oc * spatial..(i + 1) * oc * spatial], oc, spatial),
                        0.0,
                        &mut dcols,
                    );
                    col2im(&dcols, geometry, &mut dx[i * in_len..(i + 1) * in_len]);
                }
                out.push((*input, Array::from_parts(val(*input).shape().to_vec(), dx)));
            }
            out
        }
        Op::Dense { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (m, k) = (xv.shape()[0], xv.shape()[1]);
            let n = wv.shape()[1];
            let mut out = Vec::new();
            if wants(*x) {
                let mut dx = vec![0.0; m * k];
                gemm(
                    1.0,
                    MatView::row_major(g.data(), m, n),
                    MatView::row_major(wv.data(), k, n).t(),
                    0.0,
                    &mut dx,
                );
                out.push((*x, Array::from_parts(vec![m, k], dx)));
            }
            if wants(*w) {
                let mut dw = vec![0.0; k * n];
                gemm(
                    1.0,
                    MatView::row_major(xv.data(), m, k).t(),
                    MatView::row_major(g.data(), m, n),
                    0.0,
                    &mut dw,
                );
                out.push((*w, Array::from_parts(vec![k, n], dw)));
            }
            if wants(*b) {
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                out.push((*b, Array::from_parts(vec![n], db)));
            }
            out
        }
        Op::Relu(a) => vec![(*a, map_with(val(*a), g, |x, gv| if x > 0.0 { gv } else { 0.0 }))],
        Op::MaxPool2d { input, argmax } => {
            let mut dx = Array::zeros(val(*input).shape());
            for (&src, &gv) in argmax.iter().zip(g.data()) {
                dx.data_mut()[src] += gv;
            }
            vec![(*input, dx)]
        }
        Op::GlobalAvgPool(a) => {
            let shape = val(*a).shape();
            let spatial = shape[2] * shape[3];
            let inv = 1.0 / spatial as f64;
            let data = g
                .data()
                .iter()
                .flat_map(|&gv| std::iter::repeat(gv * inv).take(spatial))
                .collect();
            vec![(*a, Array::from_parts(shape.to_vec(), data))]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            normalized,
            inv_std,
        } => {
            let gv = val(*gamma);
            let d = gv.len();
            let mut out = Vec::new();
            if wants(*x) {
                let mut dx = Vec::with_capacity(g.len());
                for ((grow, xh), is) in g.data().chunks(d).zip(normalized.chunks(d)).zip(inv_std) {
                    let dxh: Vec<f64> = grow.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                    let s1: f64 = dxh.iter().sum();
                    let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    dx.extend(
                        dxh.iter()
                            .zip(xh)
                            .map(|(dv, h)| is / df * (df * dv - s1 - h * s2)),
                    );
                }
                out.push((*x, Array::from_parts(val(*x).shape().to_vec(), dx)));
            }
            if wants(*gamma) {
                let mut dg = vec![0.0; d];
                for (grow, xh) in g.data().chunks(d).zip(normalized.chunks(d)) {
                    for j in 0..d {
                        dg[j] += grow[j] * xh[j];
                    }
                }
                out.push((*gamma, Array::from_parts(vec![d], dg)));
            }
            if wants(*beta) {
                let mut db = vec![0.0; d];
                for grow in g.data().chunks(d) {
                    db.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                }
                out.push((*beta, Array::from_parts(vec![d], db)));
            }
            out
        }
        Op::Softmax(a) => {
            let y = &node.value;
            let d = *y.shape().last().unwrap();
            let mut dx = Vec::with_capacity(y.len());
            for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
            }
            vec![(*a, Array::from_parts(y.shape().to_vec(), dx))]
        }
        Op::Log(a) => vec![(*a, map_with(val(*a), g, |x, gv| gv / x))],
        Op::Exp(a) => vec![(*a, map_with(&node.value, g, |y, gv| gv * y))],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Mul(a, b) => vec![
            (*a, map_with(val(*b), g, |y, gv| gv * y)),
            (*b, map_with(val(*a), g, |x, gv| gv * x)),
        ],
        Op::Scale(a, c) => vec![(*a, map_with(g, g, |gv, _| gv * c))],
        Op::ScaleBy(a, s) => {
            let (av, sv) = (val(*a), val(*s));
            let factor = sv.data()[0];
            let ds: f64 = av.data().iter().zip(g.data()).map(|(x, gv)| x * gv).sum();
            vec![
                (*a, map_with(g, g, |gv, _| gv * factor)),
                (*s, Array::from_parts(sv.shape().to_vec(), vec![ds])),
            ]
        }
        Op::Concat { parts, axis } => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis] * inner;
            let mut offset = 0;
            let mut out = Vec::with_capacity(parts.len());
            for &p in parts {
                let shape = val(p).shape().to_vec();
                let chunk = shape[*axis] * inner;
                let mut data = Vec::with_capacity(outer * chunk);
                for o in 0..outer {
                    data.extend_from_slice(&g.data()[o * total + offset..o * total + offset + chunk]);
                }
                offset += chunk;
                out.push((p, Array::from_parts(shape, data)));
            }
            out
        }
        Op::Sum(a) => vec![(*a, Array::full(val(*a).shape(), g.data()[0]))],
        Op::Mean(a) => {
            let av = val(*a);
            vec![(*a, Array::full(av.shape(), g.data()[0] / av.len() as f64))]
        }
        Op::MeanRows(a) => {
            let av = val(*a);
            let r = av.shape()[0];
            let data = (0..r).flat_map(|_| g.data().iter().map(move |v| v / r as f64)).collect();
            vec![(*a, Array::from_parts(av.shape().to_vec(), data))]
        }
        Op::GatherRows { table, indices } => {
            let tv = val(*table);
            let d = tv.shape()[1];
            let mut dt = Array::zeros(tv.shape());
            for (k, &i) in indices.iter().enumerate() {
                let dst = &mut dt.data_mut()[i * d..(i + 1) * d];
                dst.iter_mut().zip(&g.data()[k * d..(k + 1) * d]).for_each(|(a, b)| *a += b);
            }
            vec![(*table, dt)]
        }
        Op::L2Normalize { input, norms } => {
            let y = &node.value;
            let d = *y.shape().last().unwrap();
            let mut dx = Vec::with_capacity(y.len());
            for ((yr, gr), norm) in y.data().chunks(d).zip(g.data().chunks(d)).zip(norms) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                dx.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * dot) / norm));
            }
            vec![(*input, Array::from_parts(y.shape().to_vec(), dx))]
        }
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            weights,
            probs,
        } => {
            let shape = val(*logits).shape().to_vec();
            let k = shape[1];
            let total: f64 = weights.iter().sum();
            let upstream = g.data()[0];
            let mut dx = probs.clone();
            for (i, (&label, &w)) in labels.iter().zip(weights).enumerate() {
                let row = &mut dx[i * k..(i + 1) * k];
                row[label] -= 1.0;
                let s = upstream * w / total;
                row.iter_mut().for_each(|v| *v *= s);
            }
            vec![(*logits, Array::from_parts(shape, dx))]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v<'g>(g: &'g Graph, shape: &[usize], data: &[f64]) -> Var<'g> {
        g.param(Array::new(shape.to_vec(), data.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn relu_zeroes_negative_input_and_its_gradient() {
        let g = Graph::new();
        let x = v(&g, &[1], &[-3.0]);
        let y = x.relu().unwrap();
        assert_eq!(y.value().data(), &[0.0]);
        g.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let g = Graph::new();
        let y = v(&g, &[2], &[3.0, 4.0]).l2_normalize().unwrap();
        let out = y.value();
        assert!((out.data()[0] - 0.6).abs() < 1e-15);
        assert!((out.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_rejects_zero_vector() {
        let g = Graph::new();
        let err = v(&g, &[1, 3], &[0.0; 3]).l2_normalize().unwrap_err();
        assert!(matches!(err, AutodiffError::DegenerateInput { .. }));
    }

    #[test]
    fn cosine_similarity_of_vector_with_itself_is_one() {
        let g = Graph::new();
        let a = v(&g, &[1, 4], &[0.3, -2.0, 5.5, 1e-3]);
        let s = a.cosine_similarity(a).unwrap().value();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let g = Graph::new();
        let x = v(&g, &[2], &[1.0, 2.0]);
        let root = x.mul(x).unwrap().sum().unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn fused_cross_entropy_gradient_is_probs_minus_one_hot() {
        let g = Graph::new();
        let logits = v(&g, &[1, 3], &[0.5, -1.0, 2.0]);
        let loss = logits.softmax_cross_entropy(&[1], &[1.0]).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        let probs: Vec<f64> = softmax_row(&[0.5, -1.0, 2.0]).collect();
        let expected = [probs[0], probs[1] - 1.0, probs[2]];
        for (a, b) in grad.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn second_backward_is_an_error() {
        let g = Graph::new();
        let x = v(&g, &[2], &[1.0, 2.0]);
        let root = x.sum().unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.backward(root), Err(AutodiffError::BackwardAlreadyRun));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let g = Graph::new();
        let x = v(&g, &[2], &[1.0, 2.0]);
        assert_eq!(g.backward(x), Err(AutodiffError::NonScalarRoot(vec![2])));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let g = Graph::new();
        let a = v(&g, &[2, 3], &[0.0; 6]);
        let b = v(&g, &[2, 3], &[0.0; 6]);
        assert!(matches!(a.matmul(b), Err(AutodiffError::ShapeMismatch { .. })));
        let c = v(&g, &[3], &[0.0; 3]);
        assert!(matches!(a.add(c), Err(AutodiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn log_of_zero_is_a_non_finite_error() {
        let g = Graph::new();
        let x = v(&g, &[1], &[0.0]);
        assert_eq!(x.log().unwrap_err(), AutodiffError::NonFinite { op: "log" });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let x = v(&g, &[2], &[1.0, 2.0]);
        let c = g.constant(Array::new(vec![2], vec![3.0, 4.0]).unwrap()).unwrap();
        let root = x.mul(c).unwrap().sum().unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }
}
