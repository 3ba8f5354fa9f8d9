//! Balanced pair sampling, contrastive objective and the single-stage
//! training loop over the whole network.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{dim_err, Error, Result};
use crate::model::Model;
use crate::rng::{derive_seed, rng, Rng};
use crate::tensor_autodiff::{AdamW, Graph, ParamSet, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossVariant {
    /// `-(1/N) sum I(same) log(d + eps)`, exactly as the objective is printed.
    Literal,
    /// Pull positives together, push negatives beyond a margin.
    #[default]
    Standard,
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(LossVariant::Literal),
            "standard" => Ok(LossVariant::Standard),
            _ => Err(Error::Config(format!("unknown loss variant {s:?}"))),
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::Literal => "literal",
            LossVariant::Standard => "standard",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub margin: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { variant: LossVariant::Standard, margin: 1.0, epsilon: 1e-8 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1e-3], got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Contribution of one pair before averaging.
    pub fn pair_term(&self, d: f64, same_class: bool) -> f64 {
        match (self.variant, same_class) {
            (LossVariant::Literal, true) => -(d + self.epsilon).ln(),
            (LossVariant::Literal, false) => 0.0,
            (LossVariant::Standard, true) => d,
            (LossVariant::Standard, false) => (self.margin - d.sqrt()).max(0.0).powi(2),
        }
    }

    /// Graph version of [`LossConfig::pair_term`]; `None` when the term is a
    /// constant with no gradient.
    pub fn pair_term_var(&self, g: &mut Graph, d: Var, same_class: bool) -> Result<Option<Var>> {
        Ok(match (self.variant, same_class) {
            (LossVariant::Literal, true) => {
                let shifted = g.add_scalar(d, self.epsilon);
                let l = g.ln(shifted)?;
                Some(g.scale(l, -1.0))
            }
            (LossVariant::Literal, false) => None,
            (LossVariant::Standard, true) => Some(d),
            (LossVariant::Standard, false) => {
                let root = g.sqrt(d)?;
                let neg = g.scale(root, -1.0);
                let gap = g.add_scalar(neg, self.margin);
                let hinge = g.relu(gap);
                Some(g.mul(hinge, hinge)?)
            }
        })
    }
}

/// Squared Euclidean distance between two vectors.
pub fn pair_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return dim_err(format!("distance between vectors of length {} and {}", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Graph version of [`pair_distance`].
pub fn pair_distance_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let diff = g.sub(a, b)?;
    Ok(g.sum_squares(diff))
}

/// Batch loss averaged over pairs.
pub fn contrastive_loss(distances: &[f64], labels: &[bool], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if distances.is_empty() {
        return Err(Error::Contract("contrastive loss of an empty batch".into()));
    }
    if distances.len() != labels.len() {
        return Err(Error::Contract(format!("{} distances but {} labels", distances.len(), labels.len())));
    }
    if let Some(d) = distances.iter().find(|d| !(**d >= 0.0)) {
        return Err(Error::Contract(format!("negative distance {d}")));
    }
    let total: f64 = distances.iter().zip(labels).map(|(&d, &y)| cfg.pair_term(d, y)).sum();
    Ok(total / distances.len() as f64)
}

/// One support/query pair, as indices into the dataset pools.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairIndex {
    pub support: usize,
    pub query: usize,
    pub same_class: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    pub pairs: Vec<PairIndex>,
}

impl PairBatch {
    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.same_class).count()
    }
}

/// `ceil(B/2)` same-class pairs then `floor(B/2)` different-class pairs,
/// supports from the support pool and queries from the query pool.
pub fn sample_pair_batch(ds: &Dataset, batch_size: usize, seed: u64) -> Result<PairBatch> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let sup = Dataset::by_class(&ds.support);
    let qry = Dataset::by_class(&ds.query);
    let classes: Vec<usize> = sup
        .keys()
        .copied()
        .filter(|c| qry.contains_key(c) && sup[c].len() + qry[c].len() >= 2)
        .collect();
    if classes.len() < 2 {
        return Err(Error::Data(format!(
            "pair sampling needs at least 2 classes with images in both pools, found {}",
            classes.len()
        )));
    }
    let mut r = rng(seed);
    let n_pos = batch_size.div_ceil(2);
    let mut pairs = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        let same_class = i < n_pos;
        let c1 = *classes.choose(&mut r).expect("non-empty");
        let c2 = if same_class {
            c1
        } else {
            let others: Vec<usize> = classes.iter().copied().filter(|&c| c != c1).collect();
            *others.choose(&mut r).expect("at least two classes")
        };
        let support = *sup[&c1].choose(&mut r).expect("non-empty class");
        let query = *qry[&c2].choose(&mut r).expect("non-empty class");
        pairs.push(PairIndex { support, query, same_class });
    }
    Ok(PairBatch { pairs })
}

/// Light query-side augmentation applied while loading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Augmentation {
    None,
    RandomCrop,
    Noise,
    #[default]
    RandAugment,
}

impl FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Augmentation::None),
            "random_crop" => Ok(Augmentation::RandomCrop),
            "noise" => Ok(Augmentation::Noise),
            "randaugment" => Ok(Augmentation::RandAugment),
            _ => Err(Error::Config(format!("unknown augmentation {s:?}"))),
        }
    }
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Augmentation::None => "none",
            Augmentation::RandomCrop => "random_crop",
            Augmentation::Noise => "noise",
            Augmentation::RandAugment => "randaugment",
        })
    }
}

fn shift(img: &Tensor, dx: isize, dy: isize) -> Tensor {
    let [c, h, w] = <[usize; 3]>::try_from(img.shape()).expect("C x H x W image");
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let sy = (y as isize - dy).clamp(0, h as isize - 1) as usize;
        let sx = (x as isize - dx).clamp(0, w as isize - 1) as usize;
        img.data()[(ch * h + sy) * w + sx]
    })
}

fn add_noise(img: &Tensor, sigma: f64, r: &mut Rng) -> Tensor {
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v = (*v + normal.sample(r)).clamp(0.0, 1.0));
    out
}

fn random_crop(img: &Tensor, r: &mut Rng) -> Tensor {
    shift(img, r.random_range(-2i64..=2) as isize, r.random_range(-2i64..=2) as isize)
}

/// Returns an augmented copy of a `C x H x W` image with values kept in `[0, 1]`.
pub fn augment(img: &Tensor, aug: Augmentation, r: &mut Rng) -> Tensor {
    match aug {
        Augmentation::None => img.clone(),
        Augmentation::RandomCrop => random_crop(img, r),
        Augmentation::Noise => add_noise(img, 0.05, r),
        Augmentation::RandAugment => {
            let mut out = img.clone();
            let mut ops = [0usize, 1, 2, 3, 4];
            for _ in 0..2 {
                let k = r.random_range(0..ops.len());
                let op = ops[k];
                ops.swap(k, 4);
                out = match op {
                    0 => random_crop(&out, r),
                    1 => {
                        let [c, h, w] = <[usize; 3]>::try_from(out.shape()).expect("C x H x W image");
                        Tensor::from_fn(&[c, h, w], |i| out.data()[i - i % w + (w - 1 - i % w)])
                    }
                    2 => {
                        let delta = r.random_range(-0.1..0.1);
                        let mut t = out.clone();
                        t.data_mut().iter_mut().for_each(|v| *v = (*v + delta).clamp(0.0, 1.0));
                        t
                    }
                    3 => {
                        let factor = r.random_range(0.8..1.2);
                        let mean = out.data().iter().sum::<f64>() / out.len() as f64;
                        let mut t = out.clone();
                        t.data_mut().iter_mut().for_each(|v| *v = (mean + (*v - mean) * factor).clamp(0.0, 1.0));
                        t
                    }
                    _ => add_noise(&out, 0.03, r),
                };
            }
            out
        }
    }
}

/// 1600 sampled pairs, so each toy query image is seen about five times.
pub const DEFAULT_BATCHES_PER_EPOCH: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Batches per epoch; `None` means `ceil(query pool / batch size)`.
    pub batches_per_epoch: Option<usize>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Learning rate is multiplied by `lr_decay` every `lr_step` epochs.
    pub lr_step: usize,
    pub lr_decay: f64,
    pub loss: LossConfig,
    pub augmentation: Augmentation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 80,
            batches_per_epoch: Some(DEFAULT_BATCHES_PER_EPOCH),
            learning_rate: 1e-3,
            weight_decay: 0.05,
            lr_step: 20,
            lr_decay: 0.5,
            loss: LossConfig::default(),
            augmentation: Augmentation::RandAugment,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::Config("batches per epoch must be positive".into()));
        }
        if self.lr_step == 0 || !(self.lr_decay > 0.0) {
            return Err(Error::Config("learning-rate schedule needs a positive step and factor".into()));
        }
        AdamW::new(self.learning_rate, self.weight_decay).validate()
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_step) as i32)
    }

    pub fn batches_for(&self, ds: &Dataset) -> usize {
        self.batches_per_epoch.unwrap_or_else(|| ds.query.len().div_ceil(self.batch_size).max(1))
    }
}

struct PairResult {
    loss: f64,
    grads: Vec<Option<Vec<f64>>>,
}

fn pair_step(model: &Model, ds: &Dataset, pair: PairIndex, cfg: &TrainConfig, n: f64, seed: u64) -> Result<PairResult> {
    let mut r = rng(seed);
    let query_img = augment(&ds.query[pair.query].image, cfg.augmentation, &mut r);
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let s = g.leaf(&ds.support[pair.support].image);
    let q = g.leaf(&query_img);
    let out = model.net.forward_images(&mut g, &bound, s, q)?;
    let d = pair_distance_var(&mut g, out.support_vec, out.query_vec)?;
    let loss = cfg.loss.pair_term(g.scalar(d), pair.same_class) / n;
    let grads = match cfg.loss.pair_term_var(&mut g, d, pair.same_class)? {
        Some(term) => {
            let scaled = g.scale(term, 1.0 / n);
            g.backward(scaled)?;
            ParamSet::extract_grads(&g, &bound)
        }
        None => vec![None; model.params.len()],
    };
    Ok(PairResult { loss, grads })
}

/// Forward and backward over one batch; gradients accumulate into the
/// parameters' buffers. Returns the batch loss.
pub fn batch_gradients(model: &mut Model, ds: &Dataset, batch: &PairBatch, cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let n = batch.pairs.len() as f64;
    let results = {
        let m = &*model;
        batch
            .pairs
            .par_iter()
            .enumerate()
            .map(|(i, &pair)| pair_step(m, ds, pair, cfg, n, derive_seed(seed, &[i as u64])))
            .collect::<Result<Vec<_>>>()?
    };
    model.params.zero_grads();
    let mut loss = 0.0;
    for res in &results {
        loss += res.loss;
        model.params.accumulate_flat(&res.grads)?;
    }
    // parameters untouched by every pair (e.g. literal loss on an all-negative
    // batch) still need a zero gradient for the optimizer
    for (_, t) in model.params.iter_mut() {
        if t.grad().is_none() {
            let zeros = vec![0.0; t.len()];
            t.accumulate_grad(&zeros)?;
        }
    }
    Ok(loss)
}

/// One pass of `cfg.batches_for(ds)` optimizer steps; returns the mean batch loss.
pub fn train_epoch(model: &mut Model, opt: &mut AdamW, ds: &Dataset, cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    cfg.validate()?;
    opt.learning_rate = cfg.learning_rate_at(epoch);
    opt.weight_decay = cfg.weight_decay;
    let batches = cfg.batches_for(ds);
    let mut total = 0.0;
    for b in 0..batches {
        let seed = derive_seed(cfg.seed, &[epoch as u64, b as u64]);
        let batch = sample_pair_batch(ds, cfg.batch_size, seed)?;
        let loss = batch_gradients(model, ds, &batch, cfg, derive_seed(seed, &[1]))?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss} at epoch {epoch}, batch {b}")));
        }
        if model.params.iter().any(|(_, t)| t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
            return Err(Error::Numeric(format!("non-finite gradient at epoch {epoch}, batch {b}")));
        }
        opt.step(&mut model.params)?;
        total += loss;
    }
    Ok(total / batches as f64)
}

/// Runs `cfg.epochs` epochs and calls `on_epoch(epoch, mean_loss, model)` after each.
pub fn train(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64, &Model) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let loss = train_epoch(model, &mut opt, ds, cfg, epoch)?;
        losses.push(loss);
        on_epoch(epoch, loss, model)?;
    }
    Ok(losses)
}
