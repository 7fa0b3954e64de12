//! Neural building blocks shared by the model modules.

use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Parameter visitation with stable hierarchical names, the basis of the
/// checkpoint format and the optimizer's update order.
pub trait Params<S: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>));
}

fn glorot<S: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64(rng.range(-a, a))).collect();
    Tensor::param(shape, data).expect("init shape")
}

/// Fully connected layer, `[n×in] → [n×out]`.
pub struct LinearLayer<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LinearLayer<S> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        LinearLayer {
            weight: glorot(&[in_dim, out_dim], in_dim, out_dim, rng),
            bias: Tensor::param(&[out_dim], vec![S::zero(); out_dim]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.matmul(&self.weight)?.add_bias(&self.bias)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl<S: Scalar> Params<S> for LinearLayer<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(format!("{prefix}.w"), &self.weight);
        f(format!("{prefix}.b"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(format!("{prefix}.w"), &mut self.weight);
        f(format!("{prefix}.b"), &mut self.bias);
    }
}

pub struct LayerNorm<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::param(&[dim], vec![S::one(); dim]).unwrap(),
            beta: Tensor::param(&[dim], vec![S::zero(); dim]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.layernorm(&self.gamma, &self.beta, S::from_f64(LAYERNORM_EPS))
    }
}

impl<S: Scalar> Params<S> for LayerNorm<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(format!("{prefix}.g"), &self.gamma);
        f(format!("{prefix}.b"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(format!("{prefix}.g"), &mut self.gamma);
        f(format!("{prefix}.b"), &mut self.beta);
    }
}

/// 2-D convolution layer over `[H×W×C]` tensors.
pub struct Conv2dLayer<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> Conv2dLayer<S> {
    pub fn new(
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        Conv2dLayer {
            weight: glorot(
                &[kernel, kernel, cin, cout],
                kernel * kernel * cin,
                kernel * kernel * cout,
                rng,
            ),
            bias: Tensor::param(&[cout], vec![S::zero(); cout]).unwrap(),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.conv2d(&self.weight, &self.bias, self.stride, self.pad)
    }
}

impl<S: Scalar> Params<S> for Conv2dLayer<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(format!("{prefix}.w"), &self.weight);
        f(format!("{prefix}.b"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(format!("{prefix}.w"), &mut self.weight);
        f(format!("{prefix}.b"), &mut self.bias);
    }
}

/// Multi-head attention with an optional additive mask on the score matrix.
/// Per-head scaling is `1/√(E/h)`.
pub struct MultiHeadAttention<S: Scalar> {
    pub wq: LinearLayer<S>,
    pub wk: LinearLayer<S>,
    pub wv: LinearLayer<S>,
    pub wo: LinearLayer<S>,
    pub heads: usize,
}

impl<S: Scalar> MultiHeadAttention<S> {
    pub fn new(e: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || e % heads != 0 {
            return Err(Error::Config(format!(
                "model width {e} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: LinearLayer::new(e, e, rng),
            wk: LinearLayer::new(e, e, rng),
            wv: LinearLayer::new(e, e, rng),
            wo: LinearLayer::new(e, e, rng),
            heads,
        })
    }

    /// Returns the attended output `[Tq×E]` and, for diagnostics, the
    /// per-head attention weights stacked into a detached `[h×Tq×Tk]`.
    pub fn forward(
        &self,
        q: &Tensor<S>,
        k: &Tensor<S>,
        v: &Tensor<S>,
        add_mask: Option<&Tensor<S>>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let e = self.wq.in_dim();
        let tq = q.shape()[0];
        let tk = k.shape()[0];
        if let Some(m) = add_mask {
            if m.shape() != [tq, tk] {
                return Err(Error::ShapeMismatch {
                    op: "mha mask",
                    lhs: vec![tq, tk],
                    rhs: m.shape().to_vec(),
                });
            }
        }
        let dh = e / self.heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let qp = self.wq.forward(q)?;
        let kp = self.wk.forward(k)?;
        let vp = self.wv.forward(v)?;
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut attn_data = Vec::with_capacity(self.heads * tq * tk);
        for h in 0..self.heads {
            let qh = qp.slice_cols(h * dh, dh)?;
            let kh = kp.slice_cols(h * dh, dh)?;
            let vh = vp.slice_cols(h * dh, dh)?;
            let scores = qh.matmul(&kh.t()?)?.scale(scale);
            let attn = scores.softmax_lastdim(add_mask)?;
            attn_data.extend_from_slice(attn.data());
            head_outs.push(attn.matmul(&vh)?);
        }
        let out = self.wo.forward(&Tensor::concat_cols(&head_outs)?)?;
        let attn = Tensor::constant(&[self.heads, tq, tk], attn_data)?;
        Ok((out, attn))
    }
}

impl<S: Scalar> Params<S> for MultiHeadAttention<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
    }
}

/// Pre-norm transformer encoder block: self-attention and a two-layer
/// feed-forward (hidden 4E), each behind a residual connection. Contains no
/// position information of its own, so with a zero mask it is permutation
/// equivariant over tokens.
pub struct EncoderBlock<S: Scalar> {
    pub ln1: LayerNorm<S>,
    pub attn: MultiHeadAttention<S>,
    pub ln2: LayerNorm<S>,
    pub ffn_w1: LinearLayer<S>,
    pub ffn_w2: LinearLayer<S>,
}

impl<S: Scalar> EncoderBlock<S> {
    pub fn new(e: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(EncoderBlock {
            ln1: LayerNorm::new(e),
            attn: MultiHeadAttention::new(e, heads, rng)?,
            ln2: LayerNorm::new(e),
            ffn_w1: LinearLayer::new(e, 4 * e, rng),
            ffn_w2: LinearLayer::new(4 * e, e, rng),
        })
    }

    pub fn forward(&self, x: &Tensor<S>, add_mask: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        let normed = self.ln1.forward(x)?;
        let (attended, _) = self.attn.forward(&normed, &normed, &normed, add_mask)?;
        let x1 = x.add(&attended)?;
        let hidden = self.ffn_w1.forward(&self.ln2.forward(&x1)?)?.relu();
        x1.add(&self.ffn_w2.forward(&hidden)?)
    }
}

impl<S: Scalar> Params<S> for EncoderBlock<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ffn_w1.visit(&format!("{prefix}.ffn.w1"), f);
        self.ffn_w2.visit(&format!("{prefix}.ffn.w2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.ffn_w1.visit_mut(&format!("{prefix}.ffn.w1"), f);
        self.ffn_w2.visit_mut(&format!("{prefix}.ffn.w2"), f);
    }
}

/// Small U-Net that preserves shape: two stride-2 downsampling convs, a
/// bottleneck conv, and two nearest-neighbor upsampling stages that fuse
/// skip connections by concatenation + 1×1 conv. 3×3 kernels, width E
/// throughout, so the spatial dims must be ≥4 and divisible by 4.
pub struct MiniUNet<S: Scalar> {
    pub down1: Conv2dLayer<S>,
    pub down2: Conv2dLayer<S>,
    pub bottleneck: Conv2dLayer<S>,
    pub fuse1: Conv2dLayer<S>,
    pub up1: Conv2dLayer<S>,
    pub fuse2: Conv2dLayer<S>,
    pub up2: Conv2dLayer<S>,
}

impl<S: Scalar> MiniUNet<S> {
    pub fn new(e: usize, rng: &mut Rng) -> Self {
        MiniUNet {
            down1: Conv2dLayer::new(3, e, e, 2, 1, rng),
            down2: Conv2dLayer::new(3, e, e, 2, 1, rng),
            bottleneck: Conv2dLayer::new(3, e, e, 1, 1, rng),
            fuse1: Conv2dLayer::new(1, 2 * e, e, 1, 0, rng),
            up1: Conv2dLayer::new(3, e, e, 1, 1, rng),
            fuse2: Conv2dLayer::new(1, 2 * e, e, 1, 0, rng),
            up2: Conv2dLayer::new(3, e, e, 1, 1, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        if h < 4 || w < 4 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "mini U-Net needs spatial dims ≥4 and divisible by 4, got {h}×{w}"
            )));
        }
        let d1 = self.down1.forward(x)?.relu();
        let d2 = self.down2.forward(&d1)?.relu();
        let mid = self.bottleneck.forward(&d2)?.relu();

        let u1 = mid.upsample2x()?;
        let u1 = concat_channels(&u1, &d1)?;
        let u1 = self.up1.forward(&self.fuse1.forward(&u1)?.relu())?.relu();

        let u2 = u1.upsample2x()?;
        let u2 = concat_channels(&u2, x)?;
        // Linear final conv; keys may need the full real line.
        self.up2.forward(&self.fuse2.forward(&u2)?.relu())
    }
}

fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let flat_a = a.reshape(&[h * w, a.shape()[2]])?;
    let flat_b = b.reshape(&[h * w, b.shape()[2]])?;
    let cat = Tensor::concat_cols(&[flat_a, flat_b])?;
    cat.reshape(&[h, w, a.shape()[2] + b.shape()[2]])
}

impl<S: Scalar> Params<S> for MiniUNet<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.down1.visit(&format!("{prefix}.down1"), f);
        self.down2.visit(&format!("{prefix}.down2"), f);
        self.bottleneck.visit(&format!("{prefix}.mid"), f);
        self.fuse1.visit(&format!("{prefix}.fuse1"), f);
        self.up1.visit(&format!("{prefix}.up1"), f);
        self.fuse2.visit(&format!("{prefix}.fuse2"), f);
        self.up2.visit(&format!("{prefix}.up2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.down1.visit_mut(&format!("{prefix}.down1"), f);
        self.down2.visit_mut(&format!("{prefix}.down2"), f);
        self.bottleneck.visit_mut(&format!("{prefix}.mid"), f);
        self.fuse1.visit_mut(&format!("{prefix}.fuse1"), f);
        self.up1.visit_mut(&format!("{prefix}.up1"), f);
        self.fuse2.visit_mut(&format!("{prefix}.fuse2"), f);
        self.up2.visit_mut(&format!("{prefix}.up2"), f);
    }
}

/// Classic sinusoidal position encoding: `P[p][2k] = sin(p/10000^(2k/e))`,
/// `P[p][2k+1] = cos(p/10000^(2k/e))`. Deterministic and parameter-free.
pub fn sinusoidal_pe<S: Scalar>(t_max: usize, e: usize) -> Result<Tensor<S>> {
    if e == 0 || e % 2 != 0 {
        return Err(Error::Config(format!(
            "sinusoidal encoding needs even width, got {e}"
        )));
    }
    let mut data = Vec::with_capacity(t_max * e);
    for p in 0..t_max {
        for k in 0..e / 2 {
            let freq = 10000f64.powf(2.0 * k as f64 / e as f64);
            let arg = p as f64 / freq;
            data.push(S::from_f64(arg.sin()));
            data.push(S::from_f64(arg.cos()));
        }
    }
    Tensor::constant(&[t_max, e], data)
}

/// 2-D position encoding over an `h×w` token grid: the first `e/2` channels
/// encode the row index, the rest the column index. Width must be a
/// multiple of 4 so each half is a valid sinusoidal encoding.
pub fn sinusoidal_pe_2d<S: Scalar>(h: usize, w: usize, e: usize) -> Result<Tensor<S>> {
    if e % 4 != 0 {
        return Err(Error::Config(format!(
            "2-D sinusoidal encoding needs width divisible by 4, got {e}"
        )));
    }
    let half = e / 2;
    let rows = sinusoidal_pe::<S>(h, half)?;
    let cols = sinusoidal_pe::<S>(w, half)?;
    let mut data = Vec::with_capacity(h * w * e);
    for y in 0..h {
        for x in 0..w {
            data.extend_from_slice(&rows.data()[y * half..(y + 1) * half]);
            data.extend_from_slice(&cols.data()[x * half..(x + 1) * half]);
        }
    }
    Tensor::constant(&[h * w, e], data)
}
