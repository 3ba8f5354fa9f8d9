//! Small convolutional feature extractor producing a `W x H x C` prototype
//! feature map per image.
//!
//! Each block is `conv3x3(stride) -> layer norm over channels -> relu`.
//! The toy default maps a `1 x 32 x 32` image to a `4 x 4 x 32` feature.

use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::rng::{derive_seed, rng};
use crate::tensor_autodiff::{Bound, Graph, ParamSet, Tensor, Var};

const KERNEL: usize = 3;
const PADDING: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    /// 1 (grayscale) or 3.
    pub channels_in: usize,
    /// `(out_channels, stride)` per block.
    pub blocks: Vec<(usize, usize)>,
    pub feature_channels: usize,
    pub feature_side: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            input_size: 32,
            channels_in: 1,
            blocks: vec![(8, 2), (16, 2), (32, 2)],
            feature_channels: 32,
            feature_side: 4,
        }
    }

    /// Builds a config whose feature shape follows from the blocks.
    pub fn from_blocks(input_size: usize, channels_in: usize, blocks: Vec<(usize, usize)>) -> Result<Self> {
        let mut cfg = Self { input_size, channels_in, blocks, feature_channels: 0, feature_side: 0 };
        cfg.feature_side = cfg.spatial_output()?;
        cfg.feature_channels = cfg.blocks.last().map(|b| b.0).unwrap_or(0);
        cfg.validate()?;
        Ok(cfg)
    }

    fn spatial_output(&self) -> Result<usize> {
        let mut side = self.input_size;
        for (i, &(_, stride)) in self.blocks.iter().enumerate() {
            if stride == 0 {
                return Err(Error::Config(format!("block {i} has stride 0")));
            }
            if side + 2 * PADDING < KERNEL {
                return Err(Error::Config(format!("block {i} input side {side} smaller than kernel")));
            }
            side = (side + 2 * PADDING - KERNEL) / stride + 1;
        }
        Ok(side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        if self.channels_in != 1 && self.channels_in != 3 {
            return Err(Error::Config(format!("channels_in must be 1 or 3, got {}", self.channels_in)));
        }
        if self.blocks.iter().any(|b| b.0 == 0) {
            return Err(Error::Config("block with zero output channels".into()));
        }
        let side = self.spatial_output()?;
        if side != self.feature_side {
            return Err(Error::Config(format!(
                "blocks map {}px input to side {side}, config says {}",
                self.input_size, self.feature_side
            )));
        }
        let c = self.blocks.last().expect("non-empty").0;
        if c != self.feature_channels {
            return Err(Error::Config(format!("last block emits {c} channels, config says {}", self.feature_channels)));
        }
        if self.feature_channels < 8 || self.feature_side < 2 {
            return Err(Error::Config(format!(
                "feature map {}x{}x{} too small (need C >= 8, side >= 2)",
                self.feature_side, self.feature_side, self.feature_channels
            )));
        }
        if !self.feature_channels.is_multiple_of(2) {
            return Err(Error::Config("feature channels must be even for positional encoding".into()));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels_in, self.input_size, self.input_size]
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        [self.feature_side, self.feature_side, self.feature_channels]
    }
}

/// Backbone output for one image, `W x H x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeFeature {
    pub values: Tensor,
    pub source_id: String,
}

/// Kaiming fan-in initialization of all backbone parameters.
pub fn init_backbone(config: &BackboneConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut params = ParamSet::new();
    let mut c_in = config.channels_in;
    for (i, &(c_out, _)) in config.blocks.iter().enumerate() {
        let fan_in = (c_in * KERNEL * KERNEL) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let mut r = rng(derive_seed(seed, &[0xB0, i as u64]));
        let shape = [c_out, c_in, KERNEL, KERNEL];
        let kernel = Tensor::from_fn(&shape, |_| normal.sample(&mut r));
        params.push(format!("backbone.block{i}.conv"), kernel.requiring_grad());
        params.push(format!("backbone.block{i}.ln.gamma"), Tensor::full(&[c_out], 1.0).requiring_grad());
        params.push(format!("backbone.block{i}.ln.beta"), Tensor::zeros(&[c_out]).requiring_grad());
        c_in = c_out;
    }
    Ok(params)
}

#[derive(Clone, Debug)]
struct BlockSlots {
    conv: usize,
    gamma: usize,
    beta: usize,
    stride: usize,
}

/// Backbone forward pass bound to parameter positions in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    blocks: Vec<BlockSlots>,
}

impl Backbone {
    pub fn new(config: &BackboneConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::new();
        let mut c_in = config.channels_in;
        for (i, &(c_out, stride)) in config.blocks.iter().enumerate() {
            let slot = |suffix: &str, shape: &[usize]| -> Result<usize> {
                let name = format!("backbone.block{i}.{suffix}");
                let idx = params.index_of(&name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
                if params.tensor(idx).shape() != shape {
                    return dim_err(format!("{name} has shape {:?}, expected {shape:?}", params.tensor(idx).shape()));
                }
                Ok(idx)
            };
            blocks.push(BlockSlots {
                conv: slot("conv", &[c_out, c_in, KERNEL, KERNEL])?,
                gamma: slot("ln.gamma", &[c_out])?,
                beta: slot("ln.beta", &[c_out])?,
                stride,
            });
            c_in = c_out;
        }
        Ok(Self { config: config.clone(), blocks })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `[C_in, S, S]` image node to a `[W, H, C]` feature node.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, image: Var) -> Result<Var> {
        let expected = self.config.image_shape();
        if g.shape(image) != expected {
            return dim_err(format!("image shape {:?}, backbone expects {expected:?}", g.shape(image)));
        }
        let mut x = image;
        let last = self.blocks.len() - 1;
        for (i, b) in self.blocks.iter().enumerate() {
            let y = g.conv2d(x, bound.var(b.conv), b.stride, PADDING)?;
            let y = g.permute(y, &[1, 2, 0])?;
            let y = g.layer_norm(y, bound.var(b.gamma), bound.var(b.beta))?;
            let y = g.relu(y);
            x = if i == last { y } else { g.permute(y, &[2, 0, 1])? };
        }
        Ok(x)
    }
}

/// Runs the backbone without recording gradients.
pub fn extract_features(
    config: &BackboneConfig,
    params: &ParamSet,
    images: &[(String, Tensor)],
) -> Result<Vec<PrototypeFeature>> {
    let backbone = Backbone::new(config, params)?;
    let mut g = Graph::inference();
    let bound = params.bind(&mut g);
    images
        .iter()
        .map(|(id, img)| {
            let x = g.leaf(img);
            let f = backbone.forward(&mut g, &bound, x)?;
            Ok(PrototypeFeature { values: g.to_tensor(f), source_id: id.clone() })
        })
        .collect()
}
