//! Global Linguistic Reconstruction Module.
//!
//! The previous stage's attention map is thresholded into per-character
//! pixel sets; any two pixels claimed by one character are masked from each
//! other in the following encoder blocks, so a character's tokens must be
//! reconstructed from the other characters' context. The mask is rebuilt
//! fresh each stage from data only — the unit-step threshold has zero
//! derivative almost everywhere, so gradients flow solely through the
//! encoder's Q, K, V.

use crate::backbone::FeatureMap;
use crate::nn::{EncoderBlock, Params};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Additive self-attention mask `[HW/16 × HW/16]`, entries 0 or the −∞
/// sentinel. `BᵀB` makes the raw mask symmetric; the row-rescue rule below
/// may clear individual rows afterwards.
pub struct ParallelMask<S: Scalar> {
    pub m: Tensor<S>,
    /// Rows that were fully masked and reset to all-zeros.
    pub rescued_rows: Vec<usize>,
}

/// Thresholded occupancy: `pairs[i][j]` is true when some character's map
/// puts both pixel i and pixel j at or above the threshold (step(0) = 1).
/// This is the mask before row rescue, and it is exactly symmetric.
pub fn masked_pairs<S: Scalar>(attn: &Tensor<S>, threshold: S) -> Result<Vec<Vec<bool>>> {
    if attn.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "parallel_mask",
            lhs: attn.shape().to_vec(),
            rhs: vec![],
        });
    }
    if attn.data().iter().any(|&v| v < S::zero()) {
        return Err(Error::Contract(
            "attention map entries must be nonnegative".into(),
        ));
    }
    let (t, p) = (attn.shape()[0], attn.shape()[1]);
    let mut above = vec![false; t * p];
    for (b, &a) in above.iter_mut().zip(attn.data()) {
        *b = a >= threshold;
    }
    let mut pairs = vec![vec![false; p]; p];
    for k in 0..t {
        let row = &above[k * p..(k + 1) * p];
        for i in 0..p {
            if !row[i] {
                continue;
            }
            for j in 0..p {
                if row[j] {
                    pairs[i][j] = true;
                }
            }
        }
    }
    Ok(pairs)
}

/// Build the parallel mask from an attention map (Parallel Mask Generator).
///
/// A row left with no visible position would make the downstream softmax
/// undefined, so such rows are rescued: reset to all-zeros, i.e. that pixel
/// sees everything.
pub fn generate_parallel_mask<S: Scalar>(
    attn: &Tensor<S>,
    threshold: S,
) -> Result<ParallelMask<S>> {
    let pairs = masked_pairs(attn, threshold)?;
    let p = pairs.len();
    let sentinel = S::mask_sentinel();
    let mut data = vec![S::zero(); p * p];
    let mut rescued_rows = Vec::new();
    for (i, row) in pairs.iter().enumerate() {
        if row.iter().all(|&masked| masked) {
            rescued_rows.push(i);
            continue;
        }
        for (j, &masked) in row.iter().enumerate() {
            if masked {
                data[i * p + j] = sentinel;
            }
        }
    }
    Ok(ParallelMask {
        m: Tensor::constant(&[p, p], data)?,
        rescued_rows,
    })
}

/// L masked encoder blocks; one independent set per cascade gap.
pub struct GlrmParams<S: Scalar> {
    pub blocks: Vec<EncoderBlock<S>>,
}

impl<S: Scalar> GlrmParams<S> {
    pub fn new(e: usize, layers: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("GLRM needs at least one layer".into()));
        }
        let blocks = (0..layers)
            .map(|_| EncoderBlock::new(e, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(GlrmParams { blocks })
    }

    /// Re-encode the previous stage's features under the parallel mask
    /// derived from its attention map. With the mask disabled the blocks
    /// run with a zero mask, bit-identically to passing an explicit zero.
    pub fn forward(
        &self,
        f_prev: &FeatureMap<S>,
        a_prev: &Tensor<S>,
        mask_enabled: bool,
        threshold: S,
    ) -> Result<FeatureMap<S>> {
        let p = f_prev.token_count();
        if a_prev.shape().len() != 2 || a_prev.shape()[1] != p {
            return Err(Error::ShapeMismatch {
                op: "glrm",
                lhs: vec![p],
                rhs: a_prev.shape().to_vec(),
            });
        }
        let mask = if mask_enabled {
            Some(generate_parallel_mask(a_prev, threshold)?.m)
        } else {
            None
        };
        let mut tokens = f_prev.tokens();
        for block in &self.blocks {
            tokens = block.forward(&tokens, mask.as_ref())?;
        }
        let grid = tokens.reshape(&[f_prev.h, f_prev.w, f_prev.channels()])?;
        Ok(FeatureMap::new(grid))
    }
}

impl<S: Scalar> Params<S> for GlrmParams<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block.{i}"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block.{i}"), f);
        }
    }
}
