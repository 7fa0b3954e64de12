//! The N-stage cascade: backbone, N position-attention decoders, N−1
//! reconstruction modules between them, the joint loss, greedy decoding,
//! and the binary checkpoint format.

use crate::backbone::{Backbone, BackboneConfig, FeatureMap};
use crate::charset::{Charset, LabelSeq};
use crate::glrm::GlrmParams;
use crate::nn::Params;
use crate::pam::{PamOutput, PamParams};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Two-phase training schedule: the mask switches on at `mask_on_epoch`,
/// the learning rate drops to `decayed_lr` at `lr_decay_epoch`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub total_epochs: usize,
    pub mask_on_epoch: usize,
    pub lr_decay_epoch: usize,
    pub decayed_lr: f64,
}

/// Mask policy for a run: always on, always off, or the two-phase schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    On,
    Off,
    Schedule,
}

impl MaskMode {
    pub fn enabled_at(self, epoch: usize, schedule: &Schedule) -> bool {
        match self {
            MaskMode::On => true,
            MaskMode::Off => false,
            MaskMode::Schedule => epoch >= schedule.mask_on_epoch,
        }
    }

    /// Mask state for inference with a finished model.
    pub fn enabled_at_eval(self) -> bool {
        !matches!(self, MaskMode::Off)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpvConfig {
    pub n_stages: usize,
    pub glrm_layers: usize,
    /// Foreground threshold t for the parallel mask generator.
    pub mask_threshold: f64,
    /// Character slots T.
    pub t_max: usize,
    pub charset: Charset,
    pub backbone: BackboneConfig,
    pub optimizer: OptimConfig,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub seed: u64,
}

impl LpvConfig {
    /// Desk-scale defaults: 16×48 grayscale, E=32, T=8, N=3, L=2, 16 epochs
    /// with the mask from epoch 8 and the LR decay at epoch 10.
    pub fn desk(seed: u64) -> Self {
        LpvConfig {
            n_stages: 3,
            glrm_layers: 2,
            mask_threshold: 0.05,
            t_max: 8,
            charset: Charset::desk(),
            backbone: BackboneConfig {
                img_h: 16,
                img_w: 48,
                in_channels: 1,
                e: 32,
                heads: 4,
                n_mix_blocks: 2,
            },
            optimizer: OptimConfig::default(),
            schedule: Schedule {
                total_epochs: 16,
                mask_on_epoch: 8,
                lr_decay_epoch: 10,
                decayed_lr: 1e-4,
            },
            batch_size: 32,
            seed,
        }
    }

    /// Smallest full pipeline, for 64-bit gradient checks: 16×16 image,
    /// E=8, T=3, N=2, L=1, 2 heads.
    pub fn tiny(seed: u64) -> Self {
        LpvConfig {
            n_stages: 2,
            glrm_layers: 1,
            mask_threshold: 0.05,
            t_max: 3,
            charset: Charset::desk(),
            backbone: BackboneConfig {
                img_h: 16,
                img_w: 16,
                in_channels: 1,
                e: 8,
                heads: 2,
                n_mix_blocks: 1,
            },
            optimizer: OptimConfig::default(),
            schedule: Schedule {
                total_epochs: 2,
                mask_on_epoch: 1,
                lr_decay_epoch: 1,
                decayed_lr: 1e-4,
            },
            batch_size: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.n_stages < 1 {
            return Err(Error::Config("need at least one stage".into()));
        }
        if self.n_stages > 1 && self.glrm_layers < 1 {
            return Err(Error::Config("GLRM needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.mask_threshold) || self.mask_threshold <= 0.0 {
            return Err(Error::Config(format!(
                "mask threshold {} outside (0,1)",
                self.mask_threshold
            )));
        }
        if self.t_max < 2 {
            return Err(Error::Config("t_max must leave room for [EOS]".into()));
        }
        // The PAM U-Net runs on the quarter-res grid, so image dims must be
        // divisible by 16.
        if self.backbone.img_h % 16 != 0 || self.backbone.img_w % 16 != 0 {
            return Err(Error::Config(format!(
                "cascade needs image dims divisible by 16, got {}×{}",
                self.backbone.img_h, self.backbone.img_w
            )));
        }
        if self.backbone.e % self.backbone.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.backbone.e, self.backbone.heads
            )));
        }
        if self.schedule.mask_on_epoch > self.schedule.total_epochs {
            return Err(Error::Config(
                "mask_on_epoch must be ≤ total_epochs".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Everything one forward pass produces, stage by stage.
pub struct Stage<S: Scalar> {
    /// F^i: the feature map this stage's PAM consumed.
    pub feature: FeatureMap<S>,
    /// A^i `[T × HW/16]`.
    pub attn: Tensor<S>,
    /// R^i `[T×E]`.
    pub char_feats: Tensor<S>,
    /// Pre-softmax Y^i `[T×C]`.
    pub logits: Tensor<S>,
    /// Q^i `[T×E]`.
    pub query: Tensor<S>,
    /// The prior this stage's query was built from (None at stage 0; the
    /// previous stage's `char_feats` afterwards).
    pub prior: Option<Tensor<S>>,
}

pub struct StageTrace<S: Scalar> {
    pub stages: Vec<Stage<S>>,
}

pub struct LpvModel<S: Scalar> {
    pub cfg: LpvConfig,
    pub backbone: Backbone<S>,
    pub pams: Vec<PamParams<S>>,
    pub glrms: Vec<GlrmParams<S>>,
}

impl<S: Scalar> LpvModel<S> {
    pub fn new(cfg: LpvConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let backbone = Backbone::new(cfg.backbone.clone(), &mut rng)?;
        let e = cfg.backbone.e;
        let c = cfg.charset.num_classes();
        // One independent PAM per stage (parameters unshared) and one
        // independent GLRM per gap between consecutive stages.
        let pams = (0..cfg.n_stages)
            .map(|_| PamParams::new(e, cfg.t_max, c, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let glrms = (0..cfg.n_stages.saturating_sub(1))
            .map(|_| GlrmParams::new(e, cfg.glrm_layers, cfg.backbone.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(LpvModel {
            cfg,
            backbone,
            pams,
            glrms,
        })
    }

    /// Run the cascade: F^0 from the backbone, each PAM decoding from its
    /// stage's features with the previous stage's character features as
    /// query prior, and each GLRM re-encoding features for the next stage.
    pub fn forward(&self, img: &Tensor<S>, mask_enabled: bool) -> Result<StageTrace<S>> {
        let threshold = S::from_f64(self.cfg.mask_threshold);
        let mut feature = self.backbone.forward(img)?;
        let mut prior: Option<Tensor<S>> = None;
        let mut stages = Vec::with_capacity(self.cfg.n_stages);
        for (i, pam) in self.pams.iter().enumerate() {
            let PamOutput {
                attn,
                char_feats,
                logits,
                query,
            } = pam.forward(&feature, prior.as_ref())?;
            if i + 1 < self.pams.len() {
                let next = self.glrms[i].forward(&feature, &attn, mask_enabled, threshold)?;
                stages.push(Stage {
                    feature: std::mem::replace(&mut feature, next),
                    attn,
                    char_feats: char_feats.clone(),
                    logits,
                    query,
                    prior: prior.take(),
                });
            } else {
                stages.push(Stage {
                    feature: feature.clone(),
                    attn,
                    char_feats: char_feats.clone(),
                    logits,
                    query,
                    prior: prior.take(),
                });
            }
            prior = Some(char_feats);
        }
        Ok(StageTrace { stages })
    }

    /// Joint objective: the mean over all N stages and all T positions
    /// (including [EOS] and [PAD]) of the per-position cross-entropy.
    pub fn compute_loss(&self, trace: &StageTrace<S>, label: &LabelSeq) -> Result<Tensor<S>> {
        if label.len() != self.cfg.t_max {
            return Err(Error::Data(format!(
                "label has {} slots, model expects {}",
                label.len(),
                self.cfg.t_max
            )));
        }
        let mut total: Option<Tensor<S>> = None;
        for stage in &trace.stages {
            let ce = stage.logits.ce_mean(label)?;
            total = Some(match total {
                Some(t) => t.add(&ce)?,
                None => ce,
            });
        }
        let n = trace.stages.len();
        Ok(total
            .expect("at least one stage")
            .scale(S::from_f64(1.0 / n as f64)))
    }

    pub fn parameters(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t)));
        out
    }

    pub fn num_params(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Serialize every parameter: magic `LPV1`, little-endian u32 tensor
    /// count, then per tensor a u32 name length, the UTF-8 name, u32 rank,
    /// u32 dims, and raw little-endian IEEE-754 f32 data, row-major.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let params = self.parameters();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"LPV1");
        bytes.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in params {
            bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                bytes.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_f32().to_le_bytes());
            }
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Build a model from `cfg` and fill every parameter from the file.
    /// Unknown, missing, or mis-shaped entries are errors that name the
    /// parameter.
    pub fn load_checkpoint(cfg: LpvConfig, path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut entries = parse_checkpoint(&raw)?;
        let mut model = Self::new(cfg)?;
        let mut missing = Vec::new();
        model.visit_mut("", &mut |name, t| {
            match entries.remove(&name) {
                Some((shape, data)) => {
                    if shape != t.shape() {
                        missing.push(format!(
                            "parameter {name} has shape {:?} in file, {:?} in model",
                            shape,
                            t.shape()
                        ));
                        return;
                    }
                    let converted = data.iter().map(|&v| S::from_f32(v)).collect();
                    *t = Tensor::param(&shape, converted).expect("checked shape");
                }
                None => missing.push(format!("parameter {name} missing from checkpoint")),
            }
        });
        if let Some(msg) = missing.into_iter().next() {
            return Err(Error::Checkpoint(msg));
        }
        if let Some(name) = entries.keys().next() {
            return Err(Error::Checkpoint(format!(
                "unknown parameter {name} in checkpoint"
            )));
        }
        Ok(model)
    }
}

fn parse_checkpoint(
    raw: &[u8],
) -> Result<std::collections::HashMap<String, (Vec<usize>, Vec<f32>)>> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > raw.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &raw[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let take_u32 = |pos: &mut usize| -> Result<u32> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    if take(&mut pos, 4)? != b"LPV1" {
        return Err(Error::Checkpoint("bad magic, expected LPV1".into()));
    }
    let count = take_u32(&mut pos)?;
    let mut entries = std::collections::HashMap::new();
    for _ in 0..count {
        let name_len = take_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = take_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = take(&mut pos, 4 * n)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.insert(name, (shape, data));
    }
    if pos != raw.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok(entries)
}

impl<S: Scalar> Params<S> for LpvModel<S> {
    fn visit<'a>(&'a self, _prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.backbone.visit("backbone", f);
        for (i, pam) in self.pams.iter().enumerate() {
            pam.visit(&format!("pam.{i}"), f);
        }
        for (i, glrm) in self.glrms.iter().enumerate() {
            glrm.visit(&format!("glrm.{i}"), f);
        }
    }
    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.backbone.visit_mut("backbone", f);
        for (i, pam) in self.pams.iter_mut().enumerate() {
            pam.visit_mut(&format!("pam.{i}"), f);
        }
        for (i, glrm) in self.glrms.iter_mut().enumerate() {
            glrm.visit_mut(&format!("glrm.{i}"), f);
        }
    }
}

/// Greedy readout of `[T×C]` logits: per-position argmax with ties broken
/// toward the lowest class index, truncated at the first `[EOS]`; `[PAD]`
/// yields no character.
pub fn decode_prediction<S: Scalar>(logits: &Tensor<S>, charset: &Charset) -> String {
    let c = logits.shape()[1];
    let mut out = String::new();
    for row in logits.data().chunks_exact(c) {
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best == charset.eos_id() {
            break;
        }
        if let Some(ch) = charset.symbol_of(best) {
            out.push(ch);
        }
    }
    out
}

/// Per-position argmax ids for one logits matrix.
pub fn argmax_ids<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
