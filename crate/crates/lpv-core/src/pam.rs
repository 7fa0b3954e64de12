//! Position Attention Module: decode T character slots from a feature map.
//!
//! Keys come from a mini U-Net over the feature grid, values are the
//! features themselves, and the query is built from the previous stage's
//! character features (zero at stage 0) plus a shared position encoding,
//! passed through one encoding layer. Attention logits are `K·Qᵀ/√E`;
//! normalization runs over the spatial axis so each character slot holds a
//! distribution over pixels.

use crate::backbone::FeatureMap;
use crate::nn::{LinearLayer, MiniUNet, Params};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// How the key map G(·) is realized. `Identity` bypasses the U-Net so tests
/// can reason about keys directly; real models use `UNet`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyMode {
    UNet,
    Identity,
}

pub struct PamParams<S: Scalar> {
    pub key_net: MiniUNet<S>,
    pub key_mode: KeyMode,
    /// Encoding layer F(·) applied to `q_pri + P`; one FC layer.
    pub encoding: LinearLayer<S>,
    /// Classification head P(·), E → C.
    pub classifier: LinearLayer<S>,
    /// Shared constant position encoding, `[T×E]`.
    pub pe: Tensor<S>,
}

pub struct PamOutput<S: Scalar> {
    /// Per-character spatial attention `[T × HW/16]`; rows sum to 1.
    pub attn: Tensor<S>,
    /// Character features `R = attn · V`, `[T×E]`.
    pub char_feats: Tensor<S>,
    /// Pre-softmax class scores `[T×C]`; the class softmax lives in the
    /// loss and the decoder.
    pub logits: Tensor<S>,
    /// The query actually used, `[T×E]`, kept for drift diagnostics.
    pub query: Tensor<S>,
}

impl<S: Scalar> PamParams<S> {
    pub fn new(e: usize, t_slots: usize, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        Ok(PamParams {
            key_net: MiniUNet::new(e, rng),
            key_mode: KeyMode::UNet,
            encoding: LinearLayer::new(e, e, rng),
            classifier: LinearLayer::new(e, num_classes, rng),
            pe: crate::nn::sinusoidal_pe(t_slots, e)?,
        })
    }

    pub fn t_slots(&self) -> usize {
        self.pe.shape()[0]
    }

    /// `Q = F(q_pri + P)`; a missing prior means the zero vector, so the
    /// stage-0 query is independent of the input image.
    pub fn build_query(&self, q_pri: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        let seed = match q_pri {
            Some(prior) => {
                if prior.shape() != self.pe.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "build_query",
                        lhs: self.pe.shape().to_vec(),
                        rhs: prior.shape().to_vec(),
                    });
                }
                prior.add(&self.pe)?
            }
            None => self.pe.clone(),
        };
        self.encoding.forward(&seed)
    }

    pub fn forward(&self, f: &FeatureMap<S>, q_pri: Option<&Tensor<S>>) -> Result<PamOutput<S>> {
        let e = self.encoding.in_dim();
        if f.channels() != e {
            return Err(Error::ShapeMismatch {
                op: "pam",
                lhs: vec![e],
                rhs: f.grid.shape().to_vec(),
            });
        }
        let tokens = f.token_count();
        let keys = match self.key_mode {
            KeyMode::UNet => self.key_net.forward(&f.grid)?.reshape(&[tokens, e])?,
            KeyMode::Identity => f.tokens(),
        };
        let values = f.tokens();
        let query = self.build_query(q_pri)?;
        let scale = S::from_f64(1.0 / (e as f64).sqrt());
        // [HW/16 × T], one column of scores per character slot.
        let scores = keys.matmul(&query.t()?)?.scale(scale);
        let attn = spatial_attention(&scores)?;
        let char_feats = attn.matmul(&values)?;
        let logits = self.classifier.forward(&char_feats)?;
        Ok(PamOutput {
            attn,
            char_feats,
            logits,
            query,
        })
    }
}

/// Normalize `[HW/16 × T]` scores into the `[T × HW/16]` attention map.
///
/// The softmax runs along the spatial axis — each character slot gets a
/// distribution over pixels — which is the only reading under which the
/// rows of A are per-character spatial maps. Isolated here so the axis
/// choice can be flipped in one place.
fn spatial_attention<S: Scalar>(scores: &Tensor<S>) -> Result<Tensor<S>> {
    scores.t()?.softmax_lastdim(None)
}

impl<S: Scalar> Params<S> for PamParams<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.key_net.visit(&format!("{prefix}.key"), f);
        self.encoding.visit(&format!("{prefix}.enc"), f);
        self.classifier.visit(&format!("{prefix}.cls"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.key_net.visit_mut(&format!("{prefix}.key"), f);
        self.encoding.visit_mut(&format!("{prefix}.enc"), f);
        self.classifier.visit_mut(&format!("{prefix}.cls"), f);
    }
}
