//! Reverse-mode tape.
//!
//! Operations append nodes in topological order, so backward is a single
//! reverse sweep over the node list.

use super::kernels::{self, bilinear_taps, col2im, conv_out, gemm, im2col, roi_sample_grid};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<Vec<F>>,
    },
    Relu(Var),
    Sigmoid(Var),
    LinearCols {
        w: Var,
        x: Var,
        b: Option<Var>,
    },
    Transpose(Var),
    Reshape(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
    },
    GlobalAvgPool(Var),
    RoiAlign {
        fm: Var,
        boxes: Vec<[f64; 4]>,
        stride: f64,
        p: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    ScaleAxis {
        x: Var,
        v: Var,
        axis: usize,
    },
    BroadcastAlong {
        v: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    IndexSelect {
        x: Var,
        axis: usize,
        idx: Vec<usize>,
    },
    Sum(Var),
    CrossEntropyCols {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<F>,
        probs: Vec<F>,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<F>,
        weights: Vec<F>,
        beta: F,
    },
    BceLogits {
        logits: Var,
        target: Vec<F>,
        weights: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    name: &'static str,
}

/// A recorded computation.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    record: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients for every node reached by a backward sweep.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_vec(&self.shapes[v.0], g.clone()))
    }

    /// Gradient for `v`, zeros when the sweep never reached it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<F> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Dimension(format!("{op}: {detail}"))
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<F: Scalar> Graph<F> {
    /// A graph that records what backward needs.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A forward-only graph; [`Graph::backward`] is unavailable.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var], name: &'static str) -> Var {
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.record,
            name: "leaf",
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// 2-D convolution over a batch `N×Cin×H×W` with square kernels.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(shape_err("conv2d", format!("input {xs:?} weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(shape_err("conv2d", format!("input {xs:?} too small for k={k}")));
        }
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let ck = cin * k * k;
        let l = ho * wo;
        let mut out = vec![F::zero(); n * cout * l];
        let keep = self.record && self.nodes[w.0].requires_grad;
        let mut saved = Vec::new();
        let mut cols = vec![F::zero(); ck * l];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for i in 0..n {
                im2col(&xv[i * cin * h * wd..(i + 1) * cin * h * wd], cin, h, wd, k, stride, pad, &mut cols);
                gemm(cout, ck, l, wv, false, &cols, false, F::zero(), &mut out[i * cout * l..(i + 1) * cout * l]);
                if keep {
                    saved.push(cols.clone());
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (chunk_i, chunk) in out.chunks_mut(l).enumerate() {
                    let bias = bv[chunk_i % cout];
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            Tensor::from_vec(&[n, cout, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols: saved,
            },
            &parents,
            "conv2d",
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(F::zero()));
        self.push(v, Op::Relu(x), &[x], "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::sigmoid);
        self.push(v, Op::Sigmoid(x), &[x], "sigmoid")
    }

    /// `W·X + b` where `X` holds one sample per column: `W` is `out×in`,
    /// `X` is `in×R`, `b` has length `out`.
    pub fn linear_cols(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 2 || xs.len() != 2 || ws[1] != xs[0] {
            return Err(shape_err("linear", format!("weight {ws:?} input {xs:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("linear", format!("bias {:?}", self.shape(b))));
            }
        }
        let (o, i, r) = (ws[0], ws[1], xs[1]);
        let mut out = vec![F::zero(); o * r];
        gemm(o, i, r, self.value(w).data(), false, self.value(x).data(), false, F::zero(), &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (row, chunk) in out.chunks_mut(r.max(1)).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bv[row]);
            }
        }
        let mut parents = vec![w, x];
        parents.extend(b);
        Ok(self.push(Tensor::from_vec(&[o, r], out), Op::LinearCols { w, x, b }, &parents, "linear"))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("{s:?}")));
        }
        let (a, b) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); a * b];
        for i in 0..a {
            for j in 0..b {
                out[j * a + i] = src[i * b + j];
            }
        }
        Ok(self.push(Tensor::from_vec(&[b, a], out), Op::Transpose(x), &[x], "transpose"))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x], "reshape"))
    }

    /// Max pooling over `N×C×H×W`, no padding.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < k || s[3] < k {
            return Err(shape_err("max_pool2d", format!("{s:?} with k={k}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let ho = conv_out(h, k, stride, 0);
        let wo = conv_out(w, k, stride, 0);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(nc * ho * wo);
        let mut argmax = Vec::with_capacity(nc * ho * wo);
        for p in 0..nc {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = F::neg_infinity();
                    let mut bi = 0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = p * h * w + (oy * stride + ky) * w + ox * stride + kx;
                            if src[idx] > best {
                                best = src[idx];
                                bi = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(bi);
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[s[0], s[1], ho, wo], out),
            Op::MaxPool { x, argmax },
            &[x],
            "max_pool2d",
        ))
    }

    /// Average pooling over `N×C×H×W`, no padding.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < k || s[3] < k {
            return Err(shape_err("avg_pool2d", format!("{s:?} with k={k}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let ho = conv_out(h, k, stride, 0);
        let wo = conv_out(w, k, stride, 0);
        let src = self.value(x).data();
        let norm = F::c(1.0 / (k * k) as f64);
        let mut out = Vec::with_capacity(nc * ho * wo);
        for p in 0..nc {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = F::zero();
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += src[p * h * w + (oy * stride + ky) * w + ox * stride + kx];
                        }
                    }
                    out.push(acc * norm);
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[s[0], s[1], ho, wo], out),
            Op::AvgPool { x, k, stride },
            &[x],
            "avg_pool2d",
        ))
    }

    /// Mean over the two trailing (spatial) axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 1] == 0 || s[s.len() - 2] == 0 {
            return Err(shape_err("global_avg_pool", format!("{s:?}")));
        }
        let hw = s[s.len() - 1] * s[s.len() - 2];
        let norm = F::c(1.0 / hw as f64);
        let out: Vec<F> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<F>() * norm)
            .collect();
        let shape = s[..s.len() - 2].to_vec();
        Ok(self.push(Tensor::from_vec(&shape, out), Op::GlobalAvgPool(x), &[x], "global_avg_pool"))
    }

    /// RoIAlign with one bilinear sample per bin center. `fm` is `C×H×W`
    /// (or `1×C×H×W`), boxes are in input pixels; output is `R×C×P×P`.
    pub fn roi_align(&mut self, fm: Var, boxes: &[[f64; 4]], stride: f64, p: usize) -> Result<Var> {
        let s = self.shape(fm).to_vec();
        let (c, h, w) = match s.as_slice() {
            [c, h, w] | [1, c, h, w] => (*c, *h, *w),
            _ => return Err(shape_err("roi_align", format!("feature map {s:?}"))),
        };
        for b in boxes {
            if !(b[2] > b[0] && b[3] > b[1]) {
                return Err(Error::DegenerateBox(format!("roi_align box {b:?} has no area")));
            }
        }
        let src = self.value(fm).data();
        let mut out = vec![F::zero(); boxes.len() * c * p * p];
        for (r, b) in boxes.iter().enumerate() {
            let (ys, xs) = roi_sample_grid(*b, stride, p);
            for (i, &gy) in ys.iter().enumerate() {
                for (j, &gx) in xs.iter().enumerate() {
                    let taps = bilinear_taps(gy, gx, h, w);
                    for ch in 0..c {
                        let plane = &src[ch * h * w..(ch + 1) * h * w];
                        let mut acc = F::zero();
                        for (idx, wt) in taps {
                            acc += plane[idx] * F::c(wt);
                        }
                        out[((r * c + ch) * p + i) * p + j] = acc;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[boxes.len(), c, p, p], out),
            Op::RoiAlign {
                fm,
                boxes: boxes.to_vec(),
                stride,
                p,
            },
            &[fm],
            "roi_align",
        ))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_vec(&shape, data), Op::Add(a, b), &[a, b], "add"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_vec(&shape, data), Op::Mul(a, b), &[a, b], "mul"))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s), &[x], "scale")
    }

    /// Sum of scalars (or same-shape tensors).
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut acc = *terms
            .first()
            .ok_or_else(|| shape_err("add_all", "no terms".into()))?;
        for t in &terms[1..] {
            acc = self.add(acc, *t)?;
        }
        Ok(acc)
    }

    /// Multiply every slice of `x` along `axis` by the matching entry of `v`.
    pub fn scale_axis(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let vn = self.value(v).len();
        if axis >= s.len() || s[axis] != vn {
            return Err(shape_err(
                "channelwise_mul",
                format!("tensor {:?} axis {axis} vs vector {:?}", s, self.shape(v)),
            ));
        }
        let (outer, c, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let vv = self.value(v).data();
        let mut out = Vec::with_capacity(xv.len());
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                out.extend(xv[base..base + inner].iter().map(|a| *a * vv[ch]));
            }
        }
        Ok(self.push(Tensor::from_vec(&s, out), Op::ScaleAxis { x, v, axis }, &[x, v], "channelwise_mul"))
    }

    /// Tensor of `shape` whose slices along `axis` are filled from `v`.
    pub fn broadcast_along(&mut self, v: Var, shape: &[usize], axis: usize) -> Result<Var> {
        let vn = self.value(v).len();
        if axis >= shape.len() || shape[axis] != vn {
            return Err(shape_err("broadcast", format!("vector {:?} into {shape:?}", self.shape(v))));
        }
        let (outer, c, inner) = split_axis(shape, axis);
        let vv = self.value(v).data();
        let mut out = Vec::with_capacity(outer * c * inner);
        for _ in 0..outer {
            for ch in 0..c {
                out.extend(std::iter::repeat(vv[ch]).take(inner));
            }
        }
        Ok(self.push(Tensor::from_vec(shape, out), Op::BroadcastAlong { v, axis }, &[v], "broadcast"))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(shape_err("concat", format!("{first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let n = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p).data()[o * n..(o + 1) * n]);
            }
        }
        Ok(self.push(
            Tensor::from_vec(&shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
            "concat",
        ))
    }

    pub fn index_select(&mut self, x: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || idx.iter().any(|&i| i >= s[axis]) {
            return Err(Error::Index(format!("index_select axis {axis} of {s:?}")));
        }
        let (outer, c, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                let base = (o * c + i) * inner;
                out.extend_from_slice(&xv[base..base + inner]);
            }
        }
        let mut shape = s.clone();
        shape[axis] = idx.len();
        Ok(self.push(
            Tensor::from_vec(&shape, out),
            Op::IndexSelect {
                x,
                axis,
                idx: idx.to_vec(),
            },
            &[x],
            "index_select",
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    /// `Σ_r w_r · (−log softmax(logits[:, r])[labels_r])` over the columns of an
    /// `m×R` logit matrix.
    pub fn cross_entropy_cols(&mut self, logits: Var, labels: &[usize], weights: &[F]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || labels.len() != s[1] || weights.len() != s[1] {
            return Err(shape_err("cross_entropy", format!("logits {s:?}, {} labels", labels.len())));
        }
        let (m, r) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::Index(format!("label {bad} out of range for {m} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![F::zero(); m * r];
        let mut loss = F::zero();
        let mut col = vec![F::zero(); m];
        for j in 0..r {
            for i in 0..m {
                col[i] = lv[i * r + j];
            }
            let lse = kernels::log_sum_exp(&col);
            for i in 0..m {
                probs[i * r + j] = (col[i] - lse).exp();
            }
            loss += weights[j] * (lse - col[labels[j]]);
        }
        let probs = if self.record { probs } else { Vec::new() };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyCols {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
            "cross_entropy",
        ))
    }

    /// Weighted smooth-L1 against a constant target.
    pub fn smooth_l1(&mut self, pred: Var, target: &[F], weights: &[F], beta: F) -> Result<Var> {
        let n = self.value(pred).len();
        if target.len() != n || weights.len() != n {
            return Err(shape_err("smooth_l1", format!("{n} predictions, {} targets", target.len())));
        }
        let half = F::c(0.5);
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target)
            .zip(weights)
            .map(|((p, t), w)| {
                let d = (*p - *t).abs();
                *w * if d < beta { half * d * d / beta } else { d - half * beta }
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                weights: weights.to_vec(),
                beta,
            },
            &[pred],
            "smooth_l1",
        ))
    }

    /// Weighted binary cross-entropy on logits against constant targets.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[F], weights: &[F]) -> Result<Var> {
        let n = self.value(logits).len();
        if target.len() != n || weights.len() != n {
            return Err(shape_err("binary_cross_entropy", format!("{n} logits, {} targets", target.len())));
        }
        let loss = self
            .value(logits)
            .data()
            .iter()
            .zip(target)
            .zip(weights)
            .map(|((x, t), w)| *w * (kernels::softplus(*x) - *t * *x))
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                target: target.to_vec(),
                weights: weights.to_vec(),
            },
            &[logits],
            "binary_cross_entropy",
        ))
    }

    /// Name of the op that produced a node; used in diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    /// First node holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (Var(i), n.name))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if !self.record {
            return Err(Error::Config("backward called on an inference graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; n];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                grads[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.len()])
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let xs = nodes[x.0].value.shape();
                let ws = nodes[w.0].value.shape();
                let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, k) = (ws[0], ws[2]);
                let os = nodes[i].value.shape();
                let l = os[2] * os[3];
                let ck = cin * k * k;
                if let Some(b) = b {
                    if wants(*b) {
                        let db = acc!(*b);
                        for (ci, chunk) in g.chunks(l).enumerate() {
                            db[ci % cout] += chunk.iter().copied().sum::<F>();
                        }
                    }
                }
                if wants(*w) {
                    let dw = acc!(*w);
                    for (ni, col) in cols.iter().enumerate().take(n) {
                        gemm(cout, l, ck, &g[ni * cout * l..(ni + 1) * cout * l], false, col, true, F::one(), dw);
                    }
                }
                if wants(*x) {
                    let wv = nodes[w.0].value.data();
                    let mut dcols = vec![F::zero(); ck * l];
                    let dx = acc!(*x);
                    for ni in 0..n {
                        gemm(ck, cout, l, wv, true, &g[ni * cout * l..(ni + 1) * cout * l], false, F::zero(), &mut dcols);
                        col2im(&dcols, cin, h, wd, k, *stride, *pad, &mut dx[ni * cin * h * wd..(ni + 1) * cin * h * wd]);
                    }
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = nodes[x.0].value.data();
                    let dx = acc!(*x);
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(xv) {
                        if *xv > F::zero() {
                            *d += *gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let yv = nodes[i].value.data();
                    let dx = acc!(*x);
                    for ((d, gv), y) in dx.iter_mut().zip(g).zip(yv) {
                        *d += *gv * *y * (F::one() - *y);
                    }
                }
            }
            Op::LinearCols { w, x, b } => {
                let ws = nodes[w.0].value.shape();
                let (o, inp) = (ws[0], ws[1]);
                let r = nodes[x.0].value.shape()[1];
                if let Some(b) = b {
                    if wants(*b) {
                        let db = acc!(*b);
                        for (row, chunk) in g.chunks(r.max(1)).enumerate().take(o) {
                            db[row] += chunk.iter().copied().sum::<F>();
                        }
                    }
                }
                if wants(*w) {
                    let dw = acc!(*w);
                    gemm(o, r, inp, g, false, nodes[x.0].value.data(), true, F::one(), dw);
                }
                if wants(*x) {
                    let dx = acc!(*x);
                    gemm(inp, o, r, nodes[w.0].value.data(), true, g, false, F::one(), dx);
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let s = nodes[x.0].value.shape();
                    let (a, b) = (s[0], s[1]);
                    let dx = acc!(*x);
                    for r in 0..a {
                        for c in 0..b {
                            dx[r * b + c] += g[c * a + r];
                        }
                    }
                }
            }
            Op::Reshape(x) | Op::Scale(x, _) if wants(*x) => {
                let s = match &nodes[i].op {
                    Op::Scale(_, s) => *s,
                    _ => F::one(),
                };
                let dx = acc!(*x);
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d += *gv * s);
            }
            Op::Reshape(_) | Op::Scale(_, _) => {}
            Op::MaxPool { x, argmax } => {
                if wants(*x) {
                    let dx = acc!(*x);
                    for (gv, &src) in g.iter().zip(argmax) {
                        dx[src] += *gv;
                    }
                }
            }
            Op::AvgPool { x, k, stride } => {
                if wants(*x) {
                    let s = nodes[x.0].value.shape();
                    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                    let os = nodes[i].value.shape();
                    let (ho, wo) = (os[2], os[3]);
                    let norm = F::c(1.0 / (k * k) as f64);
                    let dx = acc!(*x);
                    for p in 0..nc {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = g[(p * ho + oy) * wo + ox] * norm;
                                for ky in 0..*k {
                                    for kx in 0..*k {
                                        dx[p * h * w + (oy * stride + ky) * w + ox * stride + kx] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                if wants(*x) {
                    let s = nodes[x.0].value.shape();
                    let hw = s[s.len() - 1] * s[s.len() - 2];
                    let norm = F::c(1.0 / hw as f64);
                    let dx = acc!(*x);
                    for (chunk, gv) in dx.chunks_mut(hw).zip(g) {
                        chunk.iter_mut().for_each(|d| *d += *gv * norm);
                    }
                }
            }
            Op::RoiAlign { fm, boxes, stride, p } => {
                if wants(*fm) {
                    let s = nodes[fm.0].value.shape();
                    let (c, h, w) = match s {
                        [c, h, w] | [_, c, h, w] => (*c, *h, *w),
                        _ => unreachable!(),
                    };
                    let dfm = acc!(*fm);
                    for (r, b) in boxes.iter().enumerate() {
                        let (ys, xs) = roi_sample_grid(*b, *stride, *p);
                        for (iy, &gy) in ys.iter().enumerate() {
                            for (jx, &gx) in xs.iter().enumerate() {
                                let taps = bilinear_taps(gy, gx, h, w);
                                for ch in 0..c {
                                    let gv = g[((r * c + ch) * p + iy) * p + jx];
                                    for (idx, wt) in taps {
                                        dfm[ch * h * w + idx] += gv * F::c(wt);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        let d = acc!(*v);
                        d.iter_mut().zip(g).for_each(|(d, gv)| *d += *gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = nodes[b.0].value.data();
                    let d = acc!(*a);
                    for ((d, gv), o) in d.iter_mut().zip(g).zip(bv) {
                        *d += *gv * *o;
                    }
                }
                if wants(*b) {
                    let av = nodes[a.0].value.data();
                    let d = acc!(*b);
                    for ((d, gv), o) in d.iter_mut().zip(g).zip(av) {
                        *d += *gv * *o;
                    }
                }
            }
            Op::ScaleAxis { x, v, axis } => {
                let s = nodes[x.0].value.shape();
                let (outer, c, inner) = split_axis(s, *axis);
                let vv = nodes[v.0].value.data();
                if wants(*x) {
                    let dx = acc!(*x);
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for t in base..base + inner {
                                dx[t] += g[t] * vv[ch];
                            }
                        }
                    }
                }
                if wants(*v) {
                    let xv = nodes[x.0].value.data();
                    let dv = acc!(*v);
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let mut a = F::zero();
                            for t in base..base + inner {
                                a += g[t] * xv[t];
                            }
                            dv[ch] += a;
                        }
                    }
                }
            }
            Op::BroadcastAlong { v, axis } => {
                if wants(*v) {
                    let (outer, c, inner) = split_axis(nodes[i].value.shape(), *axis);
                    let dv = acc!(*v);
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            dv[ch] += g[base..base + inner].iter().copied().sum::<F>();
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(nodes[i].value.shape(), *axis);
                let mut offset = 0;
                let total: usize = nodes[i].value.len() / outer.max(1);
                for p in parts {
                    let n = nodes[p.0].value.shape()[*axis] * inner;
                    if wants(*p) {
                        let d = acc!(*p);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + n];
                            d[o * n..(o + 1) * n].iter_mut().zip(src).for_each(|(d, gv)| *d += *gv);
                        }
                    }
                    offset += n;
                }
            }
            Op::IndexSelect { x, axis, idx } => {
                if wants(*x) {
                    let (outer, c, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                    let dx = acc!(*x);
                    let m = idx.len();
                    for o in 0..outer {
                        for (k, &src) in idx.iter().enumerate() {
                            let dst = (o * c + src) * inner;
                            let from = (o * m + k) * inner;
                            for t in 0..inner {
                                dx[dst + t] += g[from + t];
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let dx = acc!(*x);
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::CrossEntropyCols {
                logits,
                labels,
                weights,
                probs,
            } => {
                if wants(*logits) {
                    let s = nodes[logits.0].value.shape();
                    let (m, r) = (s[0], s[1]);
                    let d = acc!(*logits);
                    for j in 0..r {
                        let scale = g[0] * weights[j];
                        for k in 0..m {
                            let onehot = if k == labels[j] { F::one() } else { F::zero() };
                            d[k * r + j] += scale * (probs[k * r + j] - onehot);
                        }
                    }
                }
            }
            Op::SmoothL1 {
                pred,
                target,
                weights,
                beta,
            } => {
                if wants(*pred) {
                    let pv = nodes[pred.0].value.data();
                    let d = acc!(*pred);
                    for t in 0..pv.len() {
                        let diff = pv[t] - target[t];
                        let dd = if diff.abs() < *beta { diff / *beta } else { diff.signum() };
                        d[t] += g[0] * weights[t] * dd;
                    }
                }
            }
            Op::BceLogits {
                logits,
                target,
                weights,
            } => {
                if wants(*logits) {
                    let lv = nodes[logits.0].value.data();
                    let d = acc!(*logits);
                    for t in 0..lv.len() {
                        d[t] += g[0] * weights[t] * (kernels::sigmoid(lv[t]) - target[t]);
                    }
                }
            }
        }
    }
}
