//! Tensor operations and their vector-Jacobian products.
//!
//! Each op validates shapes up front, computes the forward result, and
//! records an [`Op`] node holding its parent handles plus whatever the
//! backward pass needs. VJPs accumulate into the per-call gradient map via
//! `accumulate_into`, which drops gradients for untracked parents.

use super::{accumulate_into, Inner, Scalar, Tensor};
use crate::{Error, Result};
use std::collections::HashMap;

/// Additive-mask stand-in for −∞. Large enough that `exp(x + sentinel)`
/// underflows to exactly 0 for any activation this model produces, small
/// enough that the arithmetic never leaves the finite range (so no NaNs).
pub const MASK_SENTINEL_F64: f64 = -1e9;

/// Mask entries at or below this are treated as masked positions.
fn is_masked<S: Scalar>(v: S) -> bool {
    v <= S::from_f64(MASK_SENTINEL_F64 / 2.0)
}

pub(crate) enum Op<S: Scalar> {
    Add(Tensor<S>, Tensor<S>),
    Mul(Tensor<S>, Tensor<S>),
    Scale(Tensor<S>, S),
    Relu(Tensor<S>),
    AddBias(Tensor<S>, Tensor<S>),
    Matmul(Tensor<S>, Tensor<S>),
    Transpose(Tensor<S>),
    Reshape(Tensor<S>),
    SliceCols {
        x: Tensor<S>,
        start: usize,
        width: usize,
    },
    ConcatCols(Vec<Tensor<S>>),
    /// The mask is applied in the forward pass only; masked outputs are
    /// exactly 0, which already kills their gradient, so the node keeps
    /// just the input.
    Softmax {
        x: Tensor<S>,
    },
    LayerNorm {
        x: Tensor<S>,
        gamma: Tensor<S>,
        beta: Tensor<S>,
        eps: S,
    },
    SumAll(Tensor<S>),
    Conv2d {
        x: Tensor<S>,
        w: Tensor<S>,
        b: Tensor<S>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Tensor<S>),
    CeMean {
        logits: Tensor<S>,
        targets: Vec<usize>,
    },
}

impl<S: Scalar> Op<S> {
    pub(crate) fn parents(&self) -> Vec<&Tensor<S>> {
        match self {
            Op::Add(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::Matmul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Transpose(a) | Op::Reshape(a) => vec![a],
            Op::SliceCols { x, .. } | Op::SumAll(x) | Op::Upsample2x(x) => vec![x],
            Op::ConcatCols(xs) => xs.iter().collect(),
            // The mask is a gradient-blocked constant, never a parent.
            Op::Softmax { x, .. } => vec![x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Conv2d { x, w, b, .. } => vec![x, w, b],
            Op::CeMean { logits, .. } => vec![logits],
        }
    }

    pub(crate) fn backward(&self, out: &Inner<S>, g: &[S], flowing: &mut HashMap<usize, Vec<S>>) {
        match self {
            Op::Add(a, b) => {
                accumulate_into(flowing, a, g.to_vec());
                accumulate_into(flowing, b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let da: Vec<S> = g.iter().zip(b.data()).map(|(&gi, &bi)| gi * bi).collect();
                let db: Vec<S> = g.iter().zip(a.data()).map(|(&gi, &ai)| gi * ai).collect();
                accumulate_into(flowing, a, da);
                accumulate_into(flowing, b, db);
            }
            Op::Scale(a, c) => {
                accumulate_into(flowing, a, g.iter().map(|&gi| gi * *c).collect());
            }
            Op::Relu(a) => {
                let da: Vec<S> = g
                    .iter()
                    .zip(a.data())
                    .map(|(&gi, &ai)| if ai > S::zero() { gi } else { S::zero() })
                    .collect();
                accumulate_into(flowing, a, da);
            }
            Op::AddBias(a, bias) => {
                accumulate_into(flowing, a, g.to_vec());
                let m = bias.len();
                let mut db = vec![S::zero(); m];
                for row in g.chunks_exact(m) {
                    for (d, &gi) in db.iter_mut().zip(row) {
                        *d += gi;
                    }
                }
                accumulate_into(flowing, bias, db);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                // dA = dC·Bᵀ
                if a.is_tracked() {
                    let mut da = vec![S::zero(); m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let darow = &mut da[i * k..(i + 1) * k];
                        for (p, d) in darow.iter_mut().enumerate() {
                            let brow = &b.data()[p * n..(p + 1) * n];
                            let mut s = S::zero();
                            for (&gi, &bi) in grow.iter().zip(brow) {
                                s += gi * bi;
                            }
                            *d = s;
                        }
                    }
                    accumulate_into(flowing, a, da);
                }
                // dB = Aᵀ·dC
                if b.is_tracked() {
                    let mut db = vec![S::zero(); k * n];
                    for i in 0..m {
                        let arow = &a.data()[i * k..(i + 1) * k];
                        let grow = &g[i * n..(i + 1) * n];
                        for (p, &ap) in arow.iter().enumerate() {
                            let dbrow = &mut db[p * n..(p + 1) * n];
                            for (d, &gi) in dbrow.iter_mut().zip(grow) {
                                *d += ap * gi;
                            }
                        }
                    }
                    accumulate_into(flowing, b, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                // out is [c, r]; transpose g back to [r, c].
                let mut da = vec![S::zero(); r * c];
                for i in 0..c {
                    for j in 0..r {
                        da[j * c + i] = g[i * r + j];
                    }
                }
                accumulate_into(flowing, a, da);
            }
            Op::Reshape(a) => {
                accumulate_into(flowing, a, g.to_vec());
            }
            Op::SliceCols { x, start, width } => {
                let cols = *x.shape().last().unwrap();
                let rows = x.len() / cols;
                let mut dx = vec![S::zero(); x.len()];
                for i in 0..rows {
                    let grow = &g[i * width..(i + 1) * width];
                    dx[i * cols + start..i * cols + start + width].copy_from_slice(grow);
                }
                accumulate_into(flowing, x, dx);
            }
            Op::ConcatCols(xs) => {
                let total: usize = xs.iter().map(|x| *x.shape().last().unwrap()).sum();
                let rows = out.data.len() / total;
                let mut offset = 0;
                for x in xs {
                    let w = *x.shape().last().unwrap();
                    if x.is_tracked() {
                        let mut dx = vec![S::zero(); x.len()];
                        for i in 0..rows {
                            dx[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate_into(flowing, x, dx);
                    }
                    offset += w;
                }
            }
            Op::Softmax { x, .. } => {
                // dx_i = y_i (g_i − Σ_j g_j y_j), rows independent. Masked
                // positions have y exactly 0, so they receive zero gradient.
                let cols = *x.shape().last().unwrap();
                let y = &out.data;
                let mut dx = vec![S::zero(); x.len()];
                for r in 0..x.len() / cols {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: S = yr.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum();
                    for ((d, &yi), &gi) in dx[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr)
                    {
                        *d = yi * (gi - dot);
                    }
                }
                accumulate_into(flowing, x, dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let m = *x.shape().last().unwrap();
                let rows = x.len() / m;
                let inv_m = S::one() / S::from_f64(m as f64);
                let mut dx = vec![S::zero(); x.len()];
                let mut dgamma = vec![S::zero(); m];
                let mut dbeta = vec![S::zero(); m];
                for r in 0..rows {
                    let xr = &x.data()[r * m..(r + 1) * m];
                    let gr = &g[r * m..(r + 1) * m];
                    let mean: S = xr.iter().copied().sum::<S>() * inv_m;
                    let var: S = xr
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<S>()
                        * inv_m;
                    let inv_std = S::one() / (var + *eps).sqrt();
                    // xhat_i = (x_i − μ)·inv_std; y = γ·xhat + β
                    // dxhat_i = g_i·γ_i
                    // dx = inv_std·(dxhat − mean(dxhat) − xhat·mean(dxhat·xhat))
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for i in 0..m {
                        let xhat = (xr[i] - mean) * inv_std;
                        let dxhat = gr[i] * gamma.data()[i];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[i] += gr[i] * xhat;
                        dbeta[i] += gr[i];
                    }
                    let mean_dxhat = sum_dxhat * inv_m;
                    let mean_dxhat_xhat = sum_dxhat_xhat * inv_m;
                    for i in 0..m {
                        let xhat = (xr[i] - mean) * inv_std;
                        let dxhat = gr[i] * gamma.data()[i];
                        dx[r * m + i] = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                accumulate_into(flowing, x, dx);
                accumulate_into(flowing, gamma, dgamma);
                accumulate_into(flowing, beta, dbeta);
            }
            Op::SumAll(x) => {
                accumulate_into(flowing, x, vec![g[0]; x.len()]);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                conv2d_backward(x, w, b, *stride, *pad, &out.shape, g, flowing);
            }
            Op::Upsample2x(x) => {
                let (h, wd, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut dx = vec![S::zero(); x.len()];
                for y in 0..2 * h {
                    for xx in 0..2 * wd {
                        let src = ((y / 2) * wd + xx / 2) * c;
                        let dst = (y * 2 * wd + xx) * c;
                        for ch in 0..c {
                            dx[src + ch] += g[dst + ch];
                        }
                    }
                }
                accumulate_into(flowing, x, dx);
            }
            Op::CeMean { logits, targets } => {
                // d logits = (softmax(logits) − onehot(target)) · g / n_rows
                let c = logits.shape()[1];
                let n = logits.shape()[0];
                let scale = g[0] / S::from_f64(n as f64);
                let mut dx = vec![S::zero(); logits.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &logits.data()[r * c..(r + 1) * c];
                    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                    let mut denom = S::zero();
                    for &v in row {
                        denom += (v - max).exp();
                    }
                    for i in 0..c {
                        let p = (row[i] - max).exp() / denom;
                        let delta = if i == t { S::one() } else { S::zero() };
                        dx[r * c + i] = (p - delta) * scale;
                    }
                }
                accumulate_into(flowing, logits, dx);
            }
        }
    }
}

fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
    g: &[S],
    flowing: &mut HashMap<usize, Vec<S>>,
) {
    let (ih, iw, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let (oh, ow) = (out_shape[0], out_shape[1]);
    let mut dx = vec![S::zero(); x.len()];
    let mut dw = vec![S::zero(); w.len()];
    let mut db = vec![S::zero(); cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let grow = &g[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for (d, &gi) in db.iter_mut().zip(grow) {
                *d += gi;
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= ih as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= iw as isize {
                        continue;
                    }
                    let xoff = ((iy as usize) * iw + ix as usize) * cin;
                    let woff = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = x.data()[xoff + ci];
                        let wrow = &w.data()[woff + ci * cout..woff + (ci + 1) * cout];
                        let dwrow = &mut dw[woff + ci * cout..woff + (ci + 1) * cout];
                        let mut s = S::zero();
                        for ((dwv, &wv), &gi) in dwrow.iter_mut().zip(wrow).zip(grow) {
                            *dwv += xv * gi;
                            s += wv * gi;
                        }
                        dx[xoff + ci] += s;
                    }
                }
            }
        }
    }
    accumulate_into(flowing, x, dx);
    accumulate_into(flowing, w, dw);
    accumulate_into(flowing, b, db);
}

impl<S: Scalar> Tensor<S> {
    /// Element-wise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: S) -> Tensor<S> {
        let data = self.data().iter().map(|&a| a * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Scale(self.clone(), c))
    }

    pub fn relu(&self) -> Tensor<S> {
        let data = self
            .data()
            .iter()
            .map(|&a| if a > S::zero() { a } else { S::zero() })
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Relu(self.clone()))
    }

    /// `[n×m] + [m]`, the bias broadcast over rows.
    pub fn add_bias(&self, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let m = *self.shape().last().unwrap_or(&0);
        if bias.shape() != [m] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let mut data = self.data().to_vec();
        for row in data.chunks_exact_mut(m) {
            for (v, &b) in row.iter_mut().zip(bias.data()) {
                *v += b;
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::AddBias(self.clone(), bias.clone()),
        ))
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.shape().len() != 2 || other.shape().len() != 2 || self.shape()[1] != other.shape()[0]
        {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let data = matmul_raw(self.data(), other.data(), m, k, n);
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    /// 2-D transpose.
    pub fn t(&self) -> Result<Tensor<S>> {
        if self.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data()[i * c + j];
            }
        }
        Ok(Tensor::from_op(vec![c, r], data, Op::Transpose(self.clone())))
    }

    /// Same data, new shape; element count must be preserved.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Columns `[start, start+width)` of the last dimension.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor<S>> {
        let cols = *self.shape().last().unwrap_or(&0);
        if start + width > cols {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: self.shape().to_vec(),
                rhs: vec![start, width],
            });
        }
        let rows = self.len() / cols;
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            data.extend_from_slice(&self.data()[i * cols + start..i * cols + start + width]);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        Ok(Tensor::from_op(
            shape,
            data,
            Op::SliceCols {
                x: self.clone(),
                start,
                width,
            },
        ))
    }

    /// Concatenate along the last dimension; leading dims must agree.
    pub fn concat_cols(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of zero tensors".into()))?;
        let lead = &first.shape()[..first.shape().len() - 1];
        for p in parts {
            if &p.shape()[..p.shape().len() - 1] != lead {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Tensor::from_op(
            shape,
            data,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Row-wise softmax over the last dimension with an optional additive
    /// mask of the same shape whose entries are 0 or the −∞ sentinel.
    ///
    /// Numerically stabilized by row-max subtraction. Masked positions come
    /// out exactly 0 and each row is renormalized to sum to 1; rows without
    /// masked entries take the plain softmax path bit-for-bit. A row whose
    /// entries are all masked is a contract violation.
    pub fn softmax_lastdim(&self, mask: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        let cols = *self.shape().last().unwrap_or(&0);
        if cols == 0 {
            return Err(Error::Contract("softmax over empty rows".into()));
        }
        if let Some(m) = mask {
            if m.shape() != self.shape() {
                return Err(Error::ShapeMismatch {
                    op: "softmax_lastdim",
                    lhs: self.shape().to_vec(),
                    rhs: m.shape().to_vec(),
                });
            }
        }
        let rows = self.len() / cols;
        let mut data = vec![S::zero(); self.len()];
        for r in 0..rows {
            let xr = &self.data()[r * cols..(r + 1) * cols];
            let mrow = mask.map(|m| &m.data()[r * cols..(r + 1) * cols]);
            let mut any_masked = false;
            let mut all_masked = true;
            let mut max = S::neg_infinity();
            for i in 0..cols {
                let masked = mrow.map_or(false, |mr| is_masked(mr[i]));
                any_masked |= masked;
                all_masked &= masked;
                let v = match mrow {
                    Some(mr) => xr[i] + mr[i],
                    None => xr[i],
                };
                if v > max {
                    max = v;
                }
            }
            if all_masked {
                return Err(Error::Contract(format!(
                    "softmax row {r} has every position masked"
                )));
            }
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut denom = S::zero();
            for i in 0..cols {
                let v = match mrow {
                    Some(mr) => xr[i] + mr[i],
                    None => xr[i],
                };
                let e = (v - max).exp();
                out[i] = e;
                denom += e;
            }
            for v in out.iter_mut() {
                *v /= denom;
            }
            if any_masked {
                // Force exact zeros on masked positions, then renormalize.
                let mr = mrow.unwrap();
                let mut kept = S::zero();
                for i in 0..cols {
                    if is_masked(mr[i]) {
                        out[i] = S::zero();
                    } else {
                        kept += out[i];
                    }
                }
                for v in out.iter_mut() {
                    *v /= kept;
                }
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Softmax { x: self.clone() },
        ))
    }

    /// Layer normalization over the last dimension with learned scale and
    /// shift, ε added to the variance.
    pub fn layernorm(&self, gamma: &Tensor<S>, beta: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        let m = *self.shape().last().unwrap_or(&0);
        if gamma.shape() != [m] || beta.shape() != [m] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let inv_m = S::one() / S::from_f64(m as f64);
        let mut data = vec![S::zero(); self.len()];
        for r in 0..self.len() / m {
            let xr = &self.data()[r * m..(r + 1) * m];
            let mean: S = xr.iter().copied().sum::<S>() * inv_m;
            let var: S = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_m;
            let inv_std = S::one() / (var + eps).sqrt();
            for i in 0..m {
                data[r * m + i] = (xr[i] - mean) * inv_std * gamma.data()[i] + beta.data()[i];
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                eps,
            },
        ))
    }

    /// Sum of all elements, as a 1-element tensor.
    pub fn sum_all(&self) -> Tensor<S> {
        let s: S = self.data().iter().copied().sum();
        Tensor::from_op(vec![1], vec![s], Op::SumAll(self.clone()))
    }

    /// 2-D convolution over an `[H×W×Cin]` input with an `[kh×kw×Cin×Cout]`
    /// kernel and `[Cout]` bias; zero padding.
    pub fn conv2d(&self, w: &Tensor<S>, b: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
        if self.shape().len() != 3 || w.shape().len() != 4 || self.shape()[2] != w.shape()[2] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let (ih, iw, cin) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: w.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        if ih + 2 * pad < kh || iw + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let oh = (ih + 2 * pad - kh) / stride + 1;
        let ow = (iw + 2 * pad - kw) / stride + 1;
        let mut data = vec![S::zero(); oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = &mut data[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                orow.copy_from_slice(b.data());
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= iw as isize {
                            continue;
                        }
                        let xoff = ((iy as usize) * iw + ix as usize) * cin;
                        let woff = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = self.data()[xoff + ci];
                            let wrow = &w.data()[woff + ci * cout..woff + (ci + 1) * cout];
                            for (o, &wv) in orow.iter_mut().zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![oh, ow, cout],
            data,
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                b: b.clone(),
                stride,
                pad,
            },
        ))
    }

    /// Nearest-neighbor 2× upsampling of an `[H×W×C]` tensor.
    pub fn upsample2x(&self) -> Result<Tensor<S>> {
        if self.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "upsample2x",
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (h, w, c) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let mut data = vec![S::zero(); 4 * h * w * c];
        for y in 0..2 * h {
            for x in 0..2 * w {
                let src = ((y / 2) * w + x / 2) * c;
                let dst = (y * 2 * w + x) * c;
                data[dst..dst + c].copy_from_slice(&self.data()[src..src + c]);
            }
        }
        Ok(Tensor::from_op(
            vec![2 * h, 2 * w, c],
            data,
            Op::Upsample2x(self.clone()),
        ))
    }

    /// Mean over rows of the cross-entropy between `[n×C]` logits and class
    /// indices; softmax is fused in for numerical stability.
    pub fn ce_mean(&self, targets: &[usize]) -> Result<Tensor<S>> {
        if self.shape().len() != 2 || self.shape()[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "ce_mean",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let c = self.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Data(format!(
                "label index {bad} out of range for {c} classes"
            )));
        }
        let n = self.shape()[0];
        let mut total = S::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &self.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for &v in row {
                denom += (v - max).exp();
            }
            total += denom.ln() + max - row[t];
        }
        let mean = total / S::from_f64(n as f64);
        Ok(Tensor::from_op(
            vec![1],
            vec![mean],
            Op::CeMean {
                logits: self.clone(),
                targets: targets.to_vec(),
            },
        ))
    }
}

/// Plain row-major matmul on slices. Accumulates along `k` in ascending
/// order, so the result is bit-identical to the textbook triple loop.
pub fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ap * bv;
            }
        }
    }
    c
}
