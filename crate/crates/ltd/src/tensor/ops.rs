//! Forward operations and their backward rules.

use super::{Op, Tape, Tensor, TensorError, TensorId};

/// out[m*n] += a[m*k] . b[k*n]
pub(crate) fn mm_nn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m*n] += a[m*k] . b[n*k]^T
pub(crate) fn mm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out[m*n] += a[p*m]^T . b[p*n]
pub(crate) fn mm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], p: usize, m: usize, n: usize) {
    for r in 0..p {
        let a_row = &a[r * m..(r + 1) * m];
        let b_row = &b[r * n..(r + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn require_matrix(shape: &[usize], context: &'static str) -> Result<(usize, usize), TensorError> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::ShapeMismatch {
            context,
            left: shape.to_vec(),
            right: vec![],
        }),
    }
}

fn grad_buf<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    id: TensorId,
    numel: usize,
) -> &'a mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; numel])
}

impl Tape {
    fn result(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op) -> TensorId {
        self.push(
            Tensor {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            op,
        )
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, ka) = require_matrix(self.shape(a), "matmul lhs")?;
        let (kb, n) = require_matrix(self.shape(b), "matmul rhs")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                context: "matmul inner dimensions",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        mm_nn_acc(self.data(a), self.data(b), &mut out, m, ka, n);
        Ok(self.result(out, vec![m, n], Op::MatMul { a, b }))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = require_matrix(self.shape(x), "transpose")?;
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.result(out, vec![c, r], Op::Transpose { x }))
    }

    /// Elementwise sum of two identically shaped tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                context: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.result(out, shape, Op::Add { a, b }))
    }

    /// Elementwise product of two identically shaped tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                context: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.result(out, shape, Op::Mul { a, b }))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.result(out, shape, Op::Scale { x, c })
    }

    /// Broadcast a 1-D bias over the last dimension.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let c = match self.shape(bias) {
            [c] => *c,
            other => {
                return Err(TensorError::ShapeMismatch {
                    context: "add_bias bias rank",
                    left: other.to_vec(),
                    right: vec![],
                })
            }
        };
        let shape = self.shape(x).to_vec();
        if shape.last().copied() != Some(c) {
            return Err(TensorError::ShapeMismatch {
                context: "add_bias last dimension",
                left: shape,
                right: vec![c],
            });
        }
        let bias_data = self.data(bias);
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias_data[i % c])
            .collect();
        Ok(self.result(out, shape, Op::AddBias { x, bias }))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.result(out, shape, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.data(x).iter().map(|&v| stable_sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.result(out, shape, Op::Sigmoid { x })
    }

    /// Max-subtracted softmax along `axis`; each slice sums to one.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let alen = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * alen * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..alen {
                    max = max.max(src[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..alen {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..alen {
                    out[base + j * inner] /= sum;
                }
            }
        }
        Ok(self.result(out, shape, Op::Softmax { x, axis }))
    }

    /// Row softmax over a matrix where only `keep`-true entries participate;
    /// dropped entries come out exactly 0. A fully dropped row is all zeros.
    pub fn masked_softmax(&mut self, x: TensorId, keep: &[bool]) -> Result<TensorId, TensorError> {
        let (r, c) = require_matrix(self.shape(x), "masked_softmax")?;
        if keep.len() != r * c {
            return Err(TensorError::ShapeMismatch {
                context: "masked_softmax mask",
                left: vec![keep.len()],
                right: vec![r * c],
            });
        }
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for row in 0..r {
            let lo = row * c;
            let hi = lo + c;
            let mut max = f64::NEG_INFINITY;
            for j in lo..hi {
                if keep[j] {
                    max = max.max(src[j]);
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // row fully masked
            }
            let mut sum = 0.0;
            for j in lo..hi {
                if keep[j] {
                    let e = (src[j] - max).exp();
                    out[j] = e;
                    sum += e;
                }
            }
            for j in lo..hi {
                out[j] /= sum;
            }
        }
        Ok(self.result(out, vec![r, c], Op::MaskedSoftmax { x }))
    }

    /// Normalize each row over the last dimension, then apply gain and bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or(TensorError::ShapeMismatch {
            context: "layer_norm input rank",
            left: shape.clone(),
            right: vec![],
        })?;
        for (id, what) in [(gain, "layer_norm gain"), (bias, "layer_norm bias")] {
            if self.shape(id) != [c] {
                return Err(TensorError::ShapeMismatch {
                    context: what,
                    left: self.shape(id).to_vec(),
                    right: vec![c],
                });
            }
        }
        let rows = self.numel(x) / c;
        let src = self.data(x);
        let gain_data = self.data(gain);
        let bias_data = self.data(bias);
        let mut normalized = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for row in 0..rows {
            let lane = &src[row * c..(row + 1) * c];
            let mean = lane.iter().sum::<f64>() / c as f64;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[row] = istd;
            for j in 0..c {
                let nv = (lane[j] - mean) * istd;
                normalized[row * c + j] = nv;
                out[row * c + j] = gain_data[j] * nv + bias_data[j];
            }
        }
        Ok(self.result(
            out,
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Concatenate matrices along `axis` (0 stacks rows, 1 widens rows).
    pub fn concat(&mut self, axis: usize, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if axis > 1 {
            return Err(TensorError::InvalidAxis { axis, rank: 2 });
        }
        let first = *parts.first().ok_or(TensorError::ShapeMismatch {
            context: "concat of zero parts",
            left: vec![],
            right: vec![],
        })?;
        let (r0, c0) = require_matrix(self.shape(first), "concat")?;
        let (mut rows, mut cols) = (r0, c0);
        for &p in &parts[1..] {
            let (r, c) = require_matrix(self.shape(p), "concat")?;
            if axis == 0 {
                if c != c0 {
                    return Err(TensorError::ShapeMismatch {
                        context: "concat column count",
                        left: vec![r, c],
                        right: vec![r0, c0],
                    });
                }
                rows += r;
            } else {
                if r != r0 {
                    return Err(TensorError::ShapeMismatch {
                        context: "concat row count",
                        left: vec![r, c],
                        right: vec![r0, c0],
                    });
                }
                cols += c;
            }
        }
        let mut out = vec![0.0; rows * cols];
        if axis == 0 {
            let mut offset = 0;
            for &p in parts {
                let data = self.data(p);
                out[offset..offset + data.len()].copy_from_slice(data);
                offset += data.len();
            }
        } else {
            let mut col_offset = 0;
            for &p in parts {
                let (_, c) = require_matrix(self.shape(p), "concat")?;
                let data = self.data(p);
                for row in 0..rows {
                    out[row * cols + col_offset..row * cols + col_offset + c]
                        .copy_from_slice(&data[row * c..(row + 1) * c]);
                }
                col_offset += c;
            }
        }
        Ok(self.result(
            out,
            vec![rows, cols],
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
        ))
    }

    /// Contiguous range of rows (`axis` 0) or columns (`axis` 1).
    pub fn slice(
        &mut self,
        x: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let (r, c) = require_matrix(self.shape(x), "slice")?;
        if axis > 1 {
            return Err(TensorError::InvalidAxis { axis, rank: 2 });
        }
        let extent = if axis == 0 { r } else { c };
        if start + len > extent {
            return Err(TensorError::SliceOutOfRange {
                context: "slice",
                start,
                len,
                extent,
            });
        }
        let src = self.data(x);
        let (out, shape) = if axis == 0 {
            (src[start * c..(start + len) * c].to_vec(), vec![len, c])
        } else {
            let mut out = vec![0.0; r * len];
            for row in 0..r {
                out[row * len..(row + 1) * len]
                    .copy_from_slice(&src[row * c + start..row * c + start + len]);
            }
            (out, vec![r, len])
        };
        Ok(self.result(out, shape, Op::Slice { x, axis, start }))
    }

    /// Select rows of a matrix by index; the embedding lookup primitive.
    pub fn gather_rows(&mut self, x: TensorId, ids: &[usize]) -> Result<TensorId, TensorError> {
        let (r, c) = require_matrix(self.shape(x), "gather_rows")?;
        let src = self.data(x);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(TensorError::IndexOutOfRange { index: id, rows: r });
            }
            out.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        Ok(self.result(
            out,
            vec![ids.len(), c],
            Op::GatherRows {
                x,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.data(x).iter().sum();
        self.result(vec![total], vec![1], Op::Sum { x })
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.numel(x) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum of absolute differences, as a `[1]` tensor.
    pub fn l1(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                context: "l1",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let total: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y).abs())
            .sum();
        Ok(self.result(vec![total], vec![1], Op::L1 { a, b }))
    }

    /// Weighted mean cross-entropy from logits via log-sum-exp.
    ///
    /// Row `i` contributes `weights[i] * (lse(row) - row[targets[i]])`;
    /// the total is divided by the weight sum.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<TensorId, TensorError> {
        let (r, c) = require_matrix(self.shape(logits), "cross_entropy")?;
        if targets.len() != r || weights.len() != r {
            return Err(TensorError::ShapeMismatch {
                context: "cross_entropy targets/weights",
                left: vec![targets.len(), weights.len()],
                right: vec![r, r],
            });
        }
        let weight_sum: f64 = weights.iter().sum();
        if weight_sum <= 0.0 {
            return Err(TensorError::NonPositiveWeightSum { sum: weight_sum });
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t >= c {
                return Err(TensorError::IndexOutOfRange { index: t, rows: c });
            }
            let lane = &src[i * c..(i + 1) * c];
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (lane[j] - max).exp();
                probs[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[i * c + j] /= sum;
            }
            let lse = max + sum.ln();
            total += w * (lse - lane[t]);
        }
        Ok(self.result(
            vec![total / weight_sum],
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                weight_sum,
            },
        ))
    }

    /// Propagate `out_grad` of node `i` into its inputs.
    pub(crate) fn accumulate(
        &self,
        i: usize,
        out_grad: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs[a.0] {
                    let b_data = &self.nodes[b.0].data;
                    let ga = grad_buf(grads, *a, m * k);
                    mm_nt_acc(out_grad, b_data, ga, m, n, k);
                }
                if self.needs[b.0] {
                    let a_data = &self.nodes[a.0].data;
                    let gb = grad_buf(grads, *b, k * n);
                    mm_tn_acc(a_data, out_grad, gb, m, k, n);
                }
            }
            Op::Transpose { x } => {
                if self.needs[x.0] {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let gx = grad_buf(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += out_grad[j * r + i];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if self.needs[id.0] {
                        let g = grad_buf(grads, *id, out_grad.len());
                        for (gv, &ov) in g.iter_mut().zip(out_grad) {
                            *gv += ov;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs[a.0] {
                    let b_data = &self.nodes[b.0].data;
                    let ga = grad_buf(grads, *a, out_grad.len());
                    for ((gv, &ov), &bv) in ga.iter_mut().zip(out_grad).zip(b_data) {
                        *gv += ov * bv;
                    }
                }
                if self.needs[b.0] {
                    let a_data = &self.nodes[a.0].data;
                    let gb = grad_buf(grads, *b, out_grad.len());
                    for ((gv, &ov), &av) in gb.iter_mut().zip(out_grad).zip(a_data) {
                        *gv += ov * av;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.needs[x.0] {
                    let gx = grad_buf(grads, *x, out_grad.len());
                    for (gv, &ov) in gx.iter_mut().zip(out_grad) {
                        *gv += c * ov;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs[x.0] {
                    let gx = grad_buf(grads, *x, out_grad.len());
                    for (gv, &ov) in gx.iter_mut().zip(out_grad) {
                        *gv += ov;
                    }
                }
                if self.needs[bias.0] {
                    let c = self.numel(*bias);
                    let gb = grad_buf(grads, *bias, c);
                    for (i, &ov) in out_grad.iter().enumerate() {
                        gb[i % c] += ov;
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs[x.0] {
                    let src = &self.nodes[x.0].data;
                    let gx = grad_buf(grads, *x, out_grad.len());
                    for ((gv, &ov), &xv) in gx.iter_mut().zip(out_grad).zip(src) {
                        if xv > 0.0 {
                            *gv += ov;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.needs[x.0] {
                    let y = &self.nodes[i].data;
                    let gx = grad_buf(grads, *x, out_grad.len());
                    for ((gv, &ov), &yv) in gx.iter_mut().zip(out_grad).zip(y) {
                        *gv += ov * yv * (1.0 - yv);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs[x.0] {
                    let shape = &self.nodes[i].shape;
                    let alen = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let y = &self.nodes[i].data;
                    let gx = grad_buf(grads, *x, y.len());
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * alen * inner + ii;
                            let mut dot = 0.0;
                            for j in 0..alen {
                                let idx = base + j * inner;
                                dot += out_grad[idx] * y[idx];
                            }
                            for j in 0..alen {
                                let idx = base + j * inner;
                                gx[idx] += y[idx] * (out_grad[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                if self.needs[x.0] {
                    let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let y = &self.nodes[i].data;
                    let gx = grad_buf(grads, *x, r * c);
                    for row in 0..r {
                        let lo = row * c;
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += out_grad[lo + j] * y[lo + j];
                        }
                        for j in 0..c {
                            // masked entries have y == 0, so contribute nothing
                            gx[lo + j] += y[lo + j] * (out_grad[lo + j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let c = *self.nodes[i].shape.last().unwrap();
                let rows = self.nodes[i].numel() / c;
                let gain_data = &self.nodes[gain.0].data;
                if self.needs[x.0] {
                    let gx = grad_buf(grads, *x, rows * c);
                    for row in 0..rows {
                        let lo = row * c;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let g = out_grad[lo + j] * gain_data[j];
                            m1 += g;
                            m2 += g * normalized[lo + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let g = out_grad[lo + j] * gain_data[j];
                            gx[lo + j] += (g - m1 - normalized[lo + j] * m2) * inv_std[row];
                        }
                    }
                }
                if self.needs[gain.0] {
                    let gg = grad_buf(grads, *gain, c);
                    for row in 0..rows {
                        for j in 0..c {
                            gg[j] += out_grad[row * c + j] * normalized[row * c + j];
                        }
                    }
                }
                if self.needs[bias.0] {
                    let gb = grad_buf(grads, *bias, c);
                    for row in 0..rows {
                        for j in 0..c {
                            gb[j] += out_grad[row * c + j];
                        }
                    }
                }
            }
            Op::Concat { axis, parts } => {
                let cols = self.nodes[i].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = (self.shape(p)[0], self.shape(p)[1]);
                    if *axis == 0 {
                        if self.needs[p.0] {
                            let gp = grad_buf(grads, p, pr * pc);
                            for (gv, &ov) in
                                gp.iter_mut().zip(&out_grad[offset..offset + pr * pc])
                            {
                                *gv += ov;
                            }
                        }
                        offset += pr * pc;
                    } else {
                        if self.needs[p.0] {
                            let gp = grad_buf(grads, p, pr * pc);
                            for row in 0..pr {
                                for j in 0..pc {
                                    gp[row * pc + j] += out_grad[row * cols + offset + j];
                                }
                            }
                        }
                        offset += pc;
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                if self.needs[x.0] {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let out_shape = &self.nodes[i].shape;
                    let gx = grad_buf(grads, *x, r * c);
                    if *axis == 0 {
                        let base = start * c;
                        for (k, &ov) in out_grad.iter().enumerate() {
                            gx[base + k] += ov;
                        }
                    } else {
                        let len = out_shape[1];
                        for row in 0..r {
                            for j in 0..len {
                                gx[row * c + start + j] += out_grad[row * len + j];
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, ids } => {
                if self.needs[x.0] {
                    let c = self.shape(*x)[1];
                    let numel = self.nodes[x.0].numel();
                    let gx = grad_buf(grads, *x, numel);
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gx[id * c + j] += out_grad[k * c + j];
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs[x.0] {
                    let numel = self.nodes[x.0].numel();
                    let gx = grad_buf(grads, *x, numel);
                    for gv in gx.iter_mut() {
                        *gv += out_grad[0];
                    }
                }
            }
            Op::L1 { a, b } => {
                let a_data = &self.nodes[a.0].data;
                let b_data = &self.nodes[b.0].data;
                if self.needs[a.0] {
                    let ga = grad_buf(grads, *a, a_data.len());
                    for ((gv, &av), &bv) in ga.iter_mut().zip(a_data).zip(b_data) {
                        *gv += out_grad[0] * sign(av - bv);
                    }
                }
                if self.needs[b.0] {
                    let gb = grad_buf(grads, *b, b_data.len());
                    for ((gv, &av), &bv) in gb.iter_mut().zip(a_data).zip(b_data) {
                        *gv -= out_grad[0] * sign(av - bv);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                weight_sum,
            } => {
                if self.needs[logits.0] {
                    let c = self.shape(*logits)[1];
                    let gl = grad_buf(grads, *logits, probs.len());
                    let scale = out_grad[0] / weight_sum;
                    for (row, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        for j in 0..c {
                            let indicator = if j == t { 1.0 } else { 0.0 };
                            gl[row * c + j] += scale * w * (probs[row * c + j] - indicator);
                        }
                    }
                }
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, TensorError};
    use crate::gradcheck::{finite_difference, max_scaled_error};
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape
            .constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2])
            .unwrap();
        let m = tape
            .constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2])
            .unwrap();
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector() {
        let mut tape = Tape::new();
        let p = tape
            .constant(vec![1.0, 0.0, 0.0, 0.0], &[2, 2])
            .unwrap();
        let m = tape
            .constant(vec![5.0, 6.0, 7.0, 8.0], &[2, 2])
            .unwrap();
        let out = tape.matmul(p, m).unwrap();
        assert_eq!(tape.data(out), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = seeded_rng(1);
        let (m, k, n) = (3, 4, 2);
        let a = random_vec(&mut rng, m * k);
        let b = random_vec(&mut rng, k * n);
        // naive oracle
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    want[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut tape = Tape::new();
        let ta = tape.constant(a, &[m, k]).unwrap();
        let tb = tape.constant(b, &[k, n]).unwrap();
        let out = tape.matmul(ta, tb).unwrap();
        for (got, want) in tape.data(out).iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0; 6], &[2, 3]).unwrap();
        let b = tape.constant(vec![0.0; 8], &[4, 2]).unwrap();
        assert!(matches!(
            tape.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0, 0.0, 0.0], &[3]).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1000.0, 0.0, 0.0], &[3]).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        let out = tape.data(y);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12 && out[2].abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = seeded_rng(2);
        let x: Vec<f64> = (0..7).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let want: Vec<f64> = exps.iter().map(|e| e / sum).collect();

        let mut tape = Tape::new();
        let tx = tape.constant(x, &[7]).unwrap();
        let y = tape.softmax(tx, 0).unwrap();
        for (got, want) in tape.data(y).iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_slices_sum_to_one_along_middle_axis() {
        let mut rng = seeded_rng(3);
        let shape = [2, 5, 3];
        let x = random_vec(&mut rng, 30);
        let mut tape = Tape::new();
        let tx = tape.constant(x, &shape).unwrap();
        let y = tape.softmax(tx, 1).unwrap();
        let out = tape.data(y);
        for o in 0..2 {
            for i in 0..3 {
                let s: f64 = (0..5).map(|j| out[o * 15 + j * 3 + i]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn masked_softmax_zeroes_dropped_columns() {
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![5.0, 1.0, 2.0, 0.5, 3.0, -1.0], &[2, 3])
            .unwrap();
        let keep = [true, false, true, true, true, false];
        let y = tape.masked_softmax(x, &keep).unwrap();
        let out = tape.data(y);
        assert_eq!(out[1], 0.0);
        assert_eq!(out[5], 0.0);
        assert!((out[0] + out[2] - 1.0).abs() < 1e-12);
        assert!((out[3] + out[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_fully_masked_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0], &[1, 2]).unwrap();
        let y = tape.masked_softmax(x, &[false, false]).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![4.0; 5], &[1, 5]).unwrap();
        let gain = tape.constant(vec![1.0; 5], &[5]).unwrap();
        let bias = tape.constant(vec![0.0; 5], &[5]).unwrap();
        let y = tape.layer_norm(x, gain, bias, 1e-9).unwrap();
        for v in tape.data(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_preserves_already_normalized_row() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, -1.0], &[1, 2]).unwrap();
        let gain = tape.constant(vec![1.0, 1.0], &[2]).unwrap();
        let bias = tape.constant(vec![0.0, 0.0], &[2]).unwrap();
        let y = tape.layer_norm(x, gain, bias, 1e-15).unwrap();
        let out = tape.data(y);
        assert!((out[0] - 1.0).abs() < 1e-7);
        assert!((out[1] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn layer_norm_moments_on_random_row() {
        let mut rng = seeded_rng(4);
        let c = 16;
        let x = random_vec(&mut rng, c);
        let mut tape = Tape::new();
        let tx = tape.constant(x, &[1, c]).unwrap();
        let gain = tape.constant(vec![1.0; c], &[c]).unwrap();
        let bias = tape.constant(vec![0.0; c], &[c]).unwrap();
        let y = tape.layer_norm(tx, gain, bias, 1e-12).unwrap();
        let out = tape.data(y);
        let mean: f64 = out.iter().sum::<f64>() / c as f64;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![-2.0, 3.0], &[2]).unwrap();
        let y = tape.relu(x);
        assert_eq!(tape.data(y), &[0.0, 3.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_c() {
        for c in [2usize, 5, 11] {
            let mut tape = Tape::new();
            let logits = tape.constant(vec![0.7; c], &[1, c]).unwrap();
            let ce = tape.cross_entropy(logits, &[0], &[1.0]).unwrap();
            assert!((tape.value(ce) - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![0.0; 3], &[1, 3]).unwrap();
        assert!(matches!(
            tape.cross_entropy(logits, &[3], &[1.0]),
            Err(TensorError::IndexOutOfRange { index: 3, rows: 3 })
        ));
    }

    #[test]
    fn l1_of_identical_boxes_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.5, 0.5, 0.2, 0.2], &[4]).unwrap();
        let b = tape.constant(vec![0.5, 0.5, 0.2, 0.2], &[4]).unwrap();
        let d = tape.l1(a, b).unwrap();
        assert_eq!(tape.value(d), 0.0);
    }

    #[test]
    fn gather_rows_rejects_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0; 6], &[3, 2]).unwrap();
        assert!(matches!(
            tape.gather_rows(x, &[0, 3]),
            Err(TensorError::IndexOutOfRange { index: 3, rows: 3 })
        ));
    }

    /// Build `f(x)` as a tape forward pass and compare tape gradients with
    /// central finite differences.
    fn check_grad(
        shape: &[usize],
        seed: u64,
        build: impl Fn(&mut Tape, super::TensorId) -> super::TensorId,
    ) {
        let n: usize = shape.iter().product();
        let mut rng = seeded_rng(seed);
        let x0 = random_vec(&mut rng, n);

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), shape, true).unwrap();
        let loss = build(&mut tape, x);
        tape.backward(loss).unwrap();
        let got = tape.grad(x).unwrap().to_vec();

        let fd = finite_difference(
            |xs| {
                let mut t = Tape::new();
                let x = t.leaf(xs.to_vec(), shape, false).unwrap();
                let loss = build(&mut t, x);
                t.value(loss)
            },
            &x0,
            1e-5,
        );
        let err = max_scaled_error(&got, &fd);
        assert!(err < 1e-4, "gradient error {err}");
    }

    #[test]
    fn fanout_accumulates_both_branches() {
        // x consumed by two branches: grads must sum
        check_grad(&[6], 10, |t, x| {
            let a = t.mul(x, x).unwrap();
            let b = t.scale(x, 3.0);
            let c = t.add(a, b).unwrap();
            t.sum(c)
        });
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        check_grad(&[3, 4], 11, |t, x| {
            let w = t
                .constant((0..12).map(|i| 0.1 * (i as f64) - 0.5).collect(), &[4, 3])
                .unwrap();
            let h = t.matmul(x, w).unwrap();
            let s = t.softmax(h, 1).unwrap();
            let r = t.relu(s);
            let g = t.sigmoid(r);
            t.sum(g)
        });
    }

    #[test]
    fn attention_style_graph_matches_finite_differences() {
        check_grad(&[4, 6], 12, |t, x| {
            let qs = t.slice(x, 1, 0, 3).unwrap();
            let ks = t.slice(x, 1, 3, 3).unwrap();
            let kt = t.transpose(ks).unwrap();
            let scores = t.matmul(qs, kt).unwrap();
            let scaled = t.scale(scores, 1.0 / 3.0_f64.sqrt());
            let keep: Vec<bool> = (0..16).map(|i| i % 4 != 3).collect();
            let attn = t.masked_softmax(scaled, &keep).unwrap();
            let ctx = t.matmul(attn, ks).unwrap();
            let joined = t.concat(1, &[ctx, qs]).unwrap();
            let g = t.constant(vec![1.0; 6], &[6]).unwrap();
            let b = t.constant(vec![0.0; 6], &[6]).unwrap();
            let normed = t.layer_norm(joined, g, b, 1e-5).unwrap();
            t.sum(normed)
        });
    }

    #[test]
    fn embedding_style_graph_matches_finite_differences() {
        check_grad(&[5, 3], 14, |t, x| {
            // repeated ids exercise scatter-add in the backward rule
            let rows = t.gather_rows(x, &[0, 2, 2, 4]).unwrap();
            let bias = t.constant(vec![0.2, -0.1, 0.4], &[3]).unwrap();
            let shifted = t.add_bias(rows, bias).unwrap();
            t.sum(shifted)
        });
    }

    #[test]
    fn loss_style_graph_matches_finite_differences() {
        check_grad(&[2, 4], 13, |t, x| {
            let ce = t.cross_entropy(x, &[1, 3], &[1.0, 0.1]).unwrap();
            let target = t.constant(vec![0.3; 8], &[2, 4]).unwrap();
            let l1 = t.l1(x, target).unwrap();
            let l1s = t.scale(l1, 0.25);
            t.add(ce, l1s).unwrap()
        });
    }
}
