//! N-way K-shot episodic evaluation with five inference strategies.
//!
//! Queries are handled one at a time against the support set only, so no
//! information passes between queries.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{dim_err, Error, Result};
use crate::model::PairEncoder;
use crate::rng::{derive_seed, rng};
use crate::tensor_autodiff::Tensor;
use crate::training::pair_distance;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    IndividualSimilarity,
    ClassSimilarity,
    Classifier,
    RawQuery,
    #[default]
    WeightedQuery,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::IndividualSimilarity,
        Strategy::ClassSimilarity,
        Strategy::Classifier,
        Strategy::RawQuery,
        Strategy::WeightedQuery,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::IndividualSimilarity => "individual_similarity",
            Strategy::ClassSimilarity => "class_similarity",
            Strategy::Classifier => "classifier",
            Strategy::RawQuery => "raw_query",
            Strategy::WeightedQuery => "weighted_query",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// One episode as indices into the dataset pools; labels are `0..n_way`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeTask {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    /// Dataset class id of each episode label.
    pub classes: Vec<usize>,
    /// `(support pool index, label)`, grouped by label.
    pub support: Vec<(usize, usize)>,
    /// `(query pool index, true label)`.
    pub query: Vec<(usize, usize)>,
}

/// Draws classes and samples uniformly without replacement.
pub fn sample_episode(ds: &Dataset, n_way: usize, k_shot: usize, q_per_class: usize, seed: u64) -> Result<EpisodeTask> {
    if n_way < 2 || k_shot == 0 || q_per_class == 0 {
        return Err(Error::Config(format!("invalid episode shape {n_way}-way {k_shot}-shot, {q_per_class} queries")));
    }
    let sup = Dataset::by_class(&ds.support);
    let qry = Dataset::by_class(&ds.query);
    let all = ds.classes();
    if all.len() < n_way {
        return Err(Error::Data(format!("{n_way}-way episode but the dataset has {} classes", all.len())));
    }
    let count = |m: &std::collections::BTreeMap<usize, Vec<usize>>, c: usize| m.get(&c).map_or(0, Vec::len);
    let eligible: Vec<usize> = all.iter().copied().filter(|&c| count(&sup, c) >= k_shot && count(&qry, c) >= q_per_class).collect();
    if eligible.len() < n_way {
        let bad = all.iter().copied().find(|c| !eligible.contains(c)).expect("some class is deficient");
        return Err(Error::Data(format!(
            "class {bad} has {} support and {} query samples, episode needs {k_shot} and {q_per_class}",
            count(&sup, bad),
            count(&qry, bad)
        )));
    }
    let mut r = rng(seed);
    let classes: Vec<usize> = eligible.choose_multiple(&mut r, n_way).copied().collect();
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * q_per_class);
    for (label, &c) in classes.iter().enumerate() {
        support.extend(sup[&c].choose_multiple(&mut r, k_shot).map(|&i| (i, label)));
        query.extend(qry[&c].choose_multiple(&mut r, q_per_class).map(|&i| (i, label)));
    }
    Ok(EpisodeTask { n_way, k_shot, q_per_class, classes, support, query })
}

/// Multinomial logistic regression trained by full-batch gradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    n_classes: usize,
    dim: usize,
    /// `n_classes x dim` then `n_classes` biases; `None` until fitted.
    weights: Option<(Vec<f64>, Vec<f64>)>,
}

pub const CLASSIFIER_EPOCHS: usize = 100;
pub const CLASSIFIER_LR: f64 = 0.1;

fn softmax(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    logits.iter_mut().for_each(|v| *v = (*v - max).exp());
    let z: f64 = logits.iter().sum();
    logits.iter_mut().for_each(|v| *v /= z);
}

/// First index of the maximum; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

impl LinearClassifier {
    pub fn new(n_classes: usize, dim: usize) -> Self {
        Self { n_classes, dim, weights: None }
    }

    pub fn is_fitted(&self) -> bool {
        self.weights.is_some()
    }

    /// Zero-initialised fit over `features` of `(vector, label)`.
    pub fn fit(&mut self, features: &[(&[f64], usize)], epochs: usize, lr: f64) -> Result<()> {
        let (k, d) = (self.n_classes, self.dim);
        let mut seen = vec![false; k];
        for (x, y) in features {
            if x.len() != d {
                return dim_err(format!("classifier feature of length {}, expected {d}", x.len()));
            }
            if *y >= k {
                return Err(Error::Data(format!("label {y} outside {k} classes")));
            }
            seen[*y] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!("class {missing} has no training feature")));
        }
        let mut w = vec![0.0; k * d];
        let mut b = vec![0.0; k];
        let n = features.len() as f64;
        let mut logits = vec![0.0; k];
        for _ in 0..epochs {
            let mut gw = vec![0.0; k * d];
            let mut gb = vec![0.0; k];
            for (x, y) in features {
                for c in 0..k {
                    logits[c] = b[c] + (0..d).map(|j| w[c * d + j] * x[j]).sum::<f64>();
                }
                softmax(&mut logits);
                for c in 0..k {
                    let err = logits[c] - if c == *y { 1.0 } else { 0.0 };
                    gb[c] += err;
                    for j in 0..d {
                        gw[c * d + j] += err * x[j];
                    }
                }
            }
            w.iter_mut().zip(&gw).for_each(|(p, g)| *p -= lr * g / n);
            b.iter_mut().zip(&gb).for_each(|(p, g)| *p -= lr * g / n);
        }
        self.weights = Some((w, b));
        Ok(())
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (w, b) = self.weights.as_ref().ok_or_else(|| Error::State("classifier used before fitting".into()))?;
        if x.len() != self.dim {
            return dim_err(format!("classifier input of length {}, expected {}", x.len(), self.dim));
        }
        let d = self.dim;
        let mut logits: Vec<f64> = (0..self.n_classes).map(|c| b[c] + (0..d).map(|j| w[c * d + j] * x[j]).sum::<f64>()).collect();
        softmax(&mut logits);
        Ok(logits)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.probabilities(x)?))
    }
}

/// Fits a fresh [`LinearClassifier`] on `features`.
pub fn online_linear_fit(features: &[(&[f64], usize)], n_classes: usize, epochs: usize, lr: f64) -> Result<LinearClassifier> {
    let dim = features.first().map(|(x, _)| x.len()).ok_or_else(|| Error::Data("no training features".into()))?;
    let mut clf = LinearClassifier::new(n_classes, dim);
    clf.fit(features, epochs, lr)?;
    Ok(clf)
}

fn mean_of<'a>(vectors: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for v in vectors {
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

fn mean_tensor(ts: &[&Tensor]) -> Result<Tensor> {
    Tensor::new(ts[0].shape().to_vec(), mean_of(ts.iter().map(|t| t.data())))
}

/// Predicted label of one query under each requested strategy.
///
/// `support` holds backbone prototypes with labels `0..n_way`; nothing
/// about other queries is visible here.
pub fn classify_query(
    encoder: &dyn PairEncoder,
    support: &[(&Tensor, usize)],
    n_way: usize,
    query: &Tensor,
    strategies: &[Strategy],
) -> Result<Vec<usize>> {
    if strategies.is_empty() {
        return Err(Error::Config("no strategy requested".into()));
    }
    let wants = |s: Strategy| strategies.contains(&s);
    let needs_pairs = strategies.iter().any(|&s| s != Strategy::ClassSimilarity);

    // (1) re-represent against every support
    let mut pairs: Vec<(Tensor, Tensor)> = Vec::new();
    let mut dists: Vec<f64> = Vec::new();
    if needs_pairs {
        for (fs, _) in support {
            let (a, b) = encoder.re_represent(fs, query)?;
            dists.push(pair_distance(a.data(), b.data())?);
            pairs.push((a, b));
        }
    }

    let individual = || {
        let mut scores = vec![0.0; n_way];
        for ((_, label), d) in support.iter().zip(&dists) {
            scores[*label] -= d;
        }
        argmax(&scores)
    };

    let class_similarity = || -> Result<usize> {
        let mut scores = Vec::with_capacity(n_way);
        for c in 0..n_way {
            let members: Vec<&Tensor> = support.iter().filter(|(_, l)| *l == c).map(|(t, _)| *t).collect();
            if members.is_empty() {
                return Err(Error::Data(format!("episode label {c} has no support sample")));
            }
            let proto = mean_tensor(&members)?;
            let (a, b) = encoder.re_represent(&proto, query)?;
            scores.push(-pair_distance(a.data(), b.data())?);
        }
        Ok(argmax(&scores))
    };

    let classifier = || {
        let feats: Vec<(&[f64], usize)> = pairs.iter().zip(support).map(|((a, _), (_, l))| (a.data(), *l)).collect();
        online_linear_fit(&feats, n_way, CLASSIFIER_EPOCHS, CLASSIFIER_LR)
    };
    let needs_clf = wants(Strategy::Classifier) || wants(Strategy::RawQuery) || wants(Strategy::WeightedQuery);
    let clf = if needs_clf { Some(classifier()?) } else { None };

    let mut out = Vec::with_capacity(strategies.len());
    for &s in strategies {
        let pred = match s {
            Strategy::IndividualSimilarity => individual(),
            Strategy::ClassSimilarity => class_similarity()?,
            Strategy::Classifier => {
                let mean_q = mean_of(pairs.iter().map(|(_, b)| b.data()));
                clf.as_ref().expect("fitted").predict(&mean_q)?
            }
            Strategy::RawQuery => {
                let pooled = encoder.pooled(query)?;
                clf.as_ref().expect("fitted").predict(pooled.data())?
            }
            Strategy::WeightedQuery => {
                // class prototypes of the re-represented supports
                let protos: Vec<Vec<f64>> = (0..n_way)
                    .map(|c| mean_of(pairs.iter().zip(support).filter(|(_, (_, l))| *l == c).map(|((a, _), _)| a.data())))
                    .collect();
                let mut logits: Vec<f64> = pairs
                    .iter()
                    .zip(support)
                    .map(|((_, b), (_, l))| pair_distance(b.data(), &protos[*l]).map(|d| -d))
                    .collect::<Result<_>>()?;
                softmax(&mut logits);
                let dim = pairs[0].1.len();
                let mut weighted = vec![0.0; dim];
                for ((_, b), w) in pairs.iter().zip(&logits) {
                    weighted.iter_mut().zip(b.data()).for_each(|(acc, x)| *acc += w * x);
                }
                clf.as_ref().expect("fitted").predict(&weighted)?
            }
        };
        out.push(pred);
    }
    Ok(out)
}

/// Backbone prototypes of every image in both pools.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    pub support: Vec<Tensor>,
    pub query: Vec<Tensor>,
}

impl FeatureCache {
    pub fn build(encoder: &dyn PairEncoder, ds: &Dataset) -> Result<Self> {
        let run = |pool: &[crate::data::LabeledImage]| -> Result<Vec<Tensor>> {
            pool.par_iter().map(|s| encoder.prototype(&s.image)).collect()
        };
        Ok(Self { support: run(&ds.support)?, query: run(&ds.query)? })
    }
}

/// Predictions `[query][strategy]` for one episode.
pub fn classify_episode(
    encoder: &dyn PairEncoder,
    cache: &FeatureCache,
    task: &EpisodeTask,
    strategies: &[Strategy],
) -> Result<Vec<Vec<usize>>> {
    let support: Vec<(&Tensor, usize)> = task.support.iter().map(|&(i, l)| (&cache.support[i], l)).collect();
    task.query
        .iter()
        .map(|&(i, _)| classify_query(encoder, &support, task.n_way, &cache.query[i], strategies))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub n_episodes: usize,
    pub strategies: Vec<Strategy>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_way: 5, k_shot: 1, q_per_class: 15, n_episodes: 600, strategies: vec![Strategy::WeightedQuery], seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub strategy: Strategy,
    pub per_episode_accuracy: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
    pub n_episodes: usize,
    pub config: EvalConfig,
}

/// Mean and `1.96 * s / sqrt(n)` with the `n - 1` sample deviation (0 when `n = 1`).
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

impl EvalReport {
    pub fn from_accuracies(strategy: Strategy, per_episode_accuracy: Vec<f64>, config: EvalConfig) -> Self {
        let (mean, ci95) = mean_ci95(&per_episode_accuracy);
        Self { strategy, n_episodes: per_episode_accuracy.len(), per_episode_accuracy, mean, ci95, config }
    }
}

/// Runs `n_episodes` episodes shared by every requested strategy; one report per strategy.
pub fn run_evaluation(encoder: &dyn PairEncoder, ds: &Dataset, cfg: &EvalConfig) -> Result<Vec<EvalReport>> {
    let cache = FeatureCache::build(encoder, ds)?;
    run_evaluation_cached(encoder, ds, &cache, cfg)
}

/// [`run_evaluation`] with precomputed backbone prototypes.
pub fn run_evaluation_cached(encoder: &dyn PairEncoder, ds: &Dataset, cache: &FeatureCache, cfg: &EvalConfig) -> Result<Vec<EvalReport>> {
    if cfg.n_episodes == 0 {
        return Err(Error::Config("at least one episode is required".into()));
    }
    if cfg.strategies.is_empty() {
        return Err(Error::Config("no strategy requested".into()));
    }
    let per_episode: Vec<Vec<f64>> = (0..cfg.n_episodes)
        .into_par_iter()
        .map(|e| {
            let task = sample_episode(ds, cfg.n_way, cfg.k_shot, cfg.q_per_class, derive_seed(cfg.seed, &[e as u64]))?;
            let preds = classify_episode(encoder, cache, &task, &cfg.strategies)?;
            let total = task.query.len() as f64;
            Ok((0..cfg.strategies.len())
                .map(|s| preds.iter().zip(&task.query).filter(|(p, (_, y))| p[s] == *y).count() as f64 / total)
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(cfg
        .strategies
        .iter()
        .enumerate()
        .map(|(s, &strategy)| {
            let acc = per_episode.iter().map(|row| row[s]).collect();
            EvalReport::from_accuracies(strategy, acc, cfg.clone())
        })
        .collect())
}
