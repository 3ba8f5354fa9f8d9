//! Full network: backbone, conditional learner and re-representation
//! learner bound to one parameter set, in one of three structures.

use std::fmt;
use std::str::FromStr;

use crate::backbone::{init_backbone, Backbone, BackboneConfig};
use crate::conditional::{conditional_forward, init_conditional, ConditionalOutput, ConditionalSlots};
use crate::error::{dim_err, Error, Result};
use crate::re_representation::{init_re_representation, RerepSlots};
use crate::rng::derive_seed;
use crate::tensor_autodiff::{Bound, Graph, ParamSet, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Structure {
    /// One shared learner for both sides.
    #[default]
    Siamese,
    /// Independent learners fixed to the support and query sides.
    NonSiamese,
    /// Shared learner fed with the conditional matrix alone.
    NonResidual,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::Siamese, Structure::NonSiamese, Structure::NonResidual];

    pub fn as_str(self) -> &'static str {
        match self {
            Structure::Siamese => "siamese",
            Structure::NonSiamese => "non_siamese",
            Structure::NonResidual => "non_residual",
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Structure::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown structure {s:?} (expected siamese, non_siamese or non_residual)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// 4-D kernel dims `[K, L, M, N]`, all odd.
    pub kernel: [usize; 4],
    pub structure: Structure,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { backbone: BackboneConfig::toy(), kernel: [3; 4], structure: Structure::Siamese }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config(format!("4-D kernel dims {:?} must be odd", self.kernel)));
        }
        Ok(())
    }

    fn prefixes(&self) -> ([&'static str; 2], [&'static str; 2]) {
        match self.structure {
            Structure::NonSiamese => (
                ["conditional.support", "conditional.query"],
                ["rerep.support", "rerep.query"],
            ),
            _ => (["conditional", "conditional"], ["rerep", "rerep"]),
        }
    }
}

/// Fresh parameters for every component of the network.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut params = init_backbone(&config.backbone, derive_seed(seed, &[1]))?;
    let c = config.backbone.feature_channels;
    let matrix_only = config.structure == Structure::NonResidual;
    let (cond, rerep) = config.prefixes();
    for (i, prefix) in cond.iter().enumerate() {
        if params.index_of(&format!("{prefix}.kernel")).is_none() {
            init_conditional(&mut params, prefix, config.kernel, c, derive_seed(seed, &[2, i as u64]))?;
        }
    }
    for (i, prefix) in rerep.iter().enumerate() {
        if params.index_of(&format!("{prefix}.compress.weight")).is_none() {
            init_re_representation(&mut params, prefix, c, matrix_only, derive_seed(seed, &[3, i as u64]))?;
        }
    }
    Ok(params)
}

/// Re-represented pair and the intermediate conditional output.
#[derive(Clone, Copy, Debug)]
pub struct PairOutput {
    pub support_vec: Var,
    pub query_vec: Var,
    pub conditional: ConditionalOutput,
}

/// Forward pass of the whole network against a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct CrlNet {
    config: ModelConfig,
    backbone: Backbone,
    cond: [ConditionalSlots; 2],
    rerep: [RerepSlots; 2],
}

impl CrlNet {
    pub fn new(config: &ModelConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(&config.backbone, params)?;
        let c = config.backbone.feature_channels;
        let matrix_only = config.structure == Structure::NonResidual;
        let (cp, rp) = config.prefixes();
        let cond = [ConditionalSlots::locate(params, cp[0])?, ConditionalSlots::locate(params, cp[1])?];
        for slots in &cond {
            if params.tensor(slots.kernel).shape() != config.kernel {
                return dim_err(format!(
                    "4-D kernel has shape {:?}, config says {:?}",
                    params.tensor(slots.kernel).shape(),
                    config.kernel
                ));
            }
        }
        let rerep = [
            RerepSlots::locate(params, rp[0], c, matrix_only)?,
            RerepSlots::locate(params, rp[1], c, matrix_only)?,
        ];
        Ok(Self { config: config.clone(), backbone, cond, rerep })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn prototype(&self, g: &mut Graph, bound: &Bound, image: Var) -> Result<Var> {
        self.backbone.forward(g, bound, image)
    }

    /// Re-represents a prototype pair into `(F^s, F^q)`.
    pub fn re_represent_pair(&self, g: &mut Graph, bound: &Bound, fs: Var, fq: Var) -> Result<PairOutput> {
        let conditional = conditional_forward(g, bound, fs, fq, self.cond[0], self.cond[1])?;
        let support_vec = self.rerep[0].forward(g, bound, fs, conditional.support_matrix)?;
        let query_vec = self.rerep[1].forward(g, bound, fq, conditional.query_matrix)?;
        Ok(PairOutput { support_vec, query_vec, conditional })
    }

    pub fn forward_images(&self, g: &mut Graph, bound: &Bound, support: Var, query: Var) -> Result<PairOutput> {
        let fs = self.prototype(g, bound, support)?;
        let fq = self.prototype(g, bound, query)?;
        self.re_represent_pair(g, bound, fs, fq)
    }
}

/// Inference-side view of a network used by evaluation.
pub trait PairEncoder: Sync {
    /// Backbone feature `W x H x C` of one image.
    fn prototype(&self, image: &Tensor) -> Result<Tensor>;

    /// Re-represented `(F^s, F^q)` for a prototype pair.
    fn re_represent(&self, fs: &Tensor, fq: &Tensor) -> Result<(Tensor, Tensor)>;

    /// Backbone feature mean-pooled over positions.
    fn pooled(&self, feature: &Tensor) -> Result<Tensor> {
        pool_positions(feature)
    }
}

/// Mean over the spatial positions of a `W x H x C` tensor.
pub fn pool_positions(feature: &Tensor) -> Result<Tensor> {
    let [w, h, c] = match *feature.shape() {
        [w, h, c] => [w, h, c],
        ref s => return dim_err(format!("pooling expects W x H x C, got {s:?}")),
    };
    let n = (w * h) as f64;
    let mut out = vec![0.0; c];
    for row in feature.data().chunks(c) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= n);
    Tensor::new(vec![c], out)
}

/// A configured network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: CrlNet,
    pub params: ParamSet,
}

impl Model {
    pub fn new(config: &ModelConfig, params: ParamSet) -> Result<Self> {
        Ok(Self { net: CrlNet::new(config, &params)?, params })
    }

    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, init_model(config, seed)?)
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    /// Same backbone weights; conditional and re-representation parameters
    /// re-initialised from `seed`.
    pub fn with_untrained_head(&self, seed: u64) -> Result<Self> {
        let mut params = init_model(self.config(), seed)?;
        for (name, t) in self.params.iter().filter(|(n, _)| n.starts_with("backbone.")) {
            *params.get_mut(name).expect("same config, same layout") = t.clone();
        }
        Self::new(self.config(), params)
    }
}

impl PairEncoder for Model {
    fn prototype(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let bound = self.params.bind(&mut g);
        let x = g.leaf(image);
        let f = self.net.prototype(&mut g, &bound, x)?;
        Ok(g.to_tensor(f))
    }

    fn re_represent(&self, fs: &Tensor, fq: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::inference();
        let bound = self.params.bind(&mut g);
        let (a, b) = (g.leaf(fs), g.leaf(fq));
        let out = self.net.re_represent_pair(&mut g, &bound, a, b)?;
        Ok((g.to_tensor(out.support_vec), g.to_tensor(out.query_vec)))
    }
}
