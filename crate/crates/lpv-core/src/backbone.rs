//! Image → quarter-resolution feature map.
//!
//! Two stride-2 3×3 convs extract local features, then a stack of encoder
//! blocks over the flattened tokens (with 2-D sinusoidal positions added)
//! mixes them globally. The output contract is a `(H/4)×(W/4)` grid of
//! E-channel tokens.

use crate::nn::{sinusoidal_pe_2d, Conv2dLayer, EncoderBlock, Params};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub img_h: usize,
    pub img_w: usize,
    pub in_channels: usize,
    pub e: usize,
    pub heads: usize,
    pub n_mix_blocks: usize,
}

impl BackboneConfig {
    /// Shape checks for the backbone itself. The full cascade additionally
    /// needs the quarter-res grid divisible by 4 (see `LpvConfig`), i.e.
    /// image dims divisible by 16.
    pub fn validate(&self) -> Result<()> {
        if self.img_h % 4 != 0 || self.img_w % 4 != 0 || self.img_h == 0 || self.img_w == 0 {
            return Err(Error::Config(format!(
                "image dims {}×{} must be positive multiples of 4",
                self.img_h, self.img_w
            )));
        }
        if self.e == 0 || self.e % 2 != 0 {
            return Err(Error::Config(format!("channel width {} must be even", self.e)));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.img_h / 4
    }

    pub fn grid_w(&self) -> usize {
        self.img_w / 4
    }

    /// Flattened token count, HW/16.
    pub fn token_count(&self) -> usize {
        self.grid_h() * self.grid_w()
    }
}

/// A token grid `[h×w×E]` with its spatial layout retained.
#[derive(Clone)]
pub struct FeatureMap<S: Scalar> {
    pub h: usize,
    pub w: usize,
    pub grid: Tensor<S>,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn new(grid: Tensor<S>) -> Self {
        assert_eq!(grid.shape().len(), 3);
        FeatureMap {
            h: grid.shape()[0],
            w: grid.shape()[1],
            grid,
        }
    }

    /// Row-major flattening to `[h·w × E]`.
    pub fn tokens(&self) -> Tensor<S> {
        self.grid
            .reshape(&[self.h * self.w, self.grid.shape()[2]])
            .expect("token flattening preserves element count")
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn token_count(&self) -> usize {
        self.h * self.w
    }
}

pub struct Backbone<S: Scalar> {
    pub cfg: BackboneConfig,
    conv1: Conv2dLayer<S>,
    conv2: Conv2dLayer<S>,
    blocks: Vec<EncoderBlock<S>>,
    pe: Tensor<S>,
}

impl<S: Scalar> Backbone<S> {
    pub fn new(cfg: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let conv1 = Conv2dLayer::new(3, cfg.in_channels, cfg.e, 2, 1, rng);
        let conv2 = Conv2dLayer::new(3, cfg.e, cfg.e, 2, 1, rng);
        let blocks = (0..cfg.n_mix_blocks)
            .map(|_| EncoderBlock::new(cfg.e, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let pe = sinusoidal_pe_2d(cfg.grid_h(), cfg.grid_w(), cfg.e)?;
        Ok(Backbone {
            cfg,
            conv1,
            conv2,
            blocks,
            pe,
        })
    }

    /// Convolutional stem only: `[H×W×C] → [H/4×W/4×E]`, no positions, no
    /// mixing. Exposed so translation behavior can be tested before the
    /// position encoding intentionally breaks it.
    pub fn stem(&self, img: &Tensor<S>) -> Result<Tensor<S>> {
        if img.shape()
            != [self.cfg.img_h, self.cfg.img_w, self.cfg.in_channels].as_slice()
        {
            return Err(Error::ShapeMismatch {
                op: "backbone",
                lhs: vec![self.cfg.img_h, self.cfg.img_w, self.cfg.in_channels],
                rhs: img.shape().to_vec(),
            });
        }
        let x = self.conv1.forward(img)?.relu();
        Ok(self.conv2.forward(&x)?.relu())
    }

    pub fn forward(&self, img: &Tensor<S>) -> Result<FeatureMap<S>> {
        let stem = self.stem(img)?;
        let (gh, gw) = (self.cfg.grid_h(), self.cfg.grid_w());
        let mut tokens = stem.reshape(&[gh * gw, self.cfg.e])?.add(&self.pe)?;
        for block in &self.blocks {
            tokens = block.forward(&tokens, None)?;
        }
        Ok(FeatureMap::new(tokens.reshape(&[gh, gw, self.cfg.e])?))
    }
}

impl<S: Scalar> Params<S> for Backbone<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block.{i}"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block.{i}"), f);
        }
    }
}
