//! `key = value` run configuration shared by every subcommand.
//!
//! Lines starting with `#` are comments. Later assignments win, so a file can
//! be followed by `--set key=value` overrides. [`RunConfig::render`] prints
//! every key with its resolved value and feeds the config hash.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crlnet_core::backbone::BackboneConfig;
use crlnet_core::eval::{EvalConfig, Strategy};
use crlnet_core::model::{ModelConfig, Structure};
use crlnet_core::rng::derive_seed;
use crlnet_core::synthetic::DatasetConfig;
use crlnet_core::training::{Augmentation, LossConfig, LossVariant, TrainConfig, DEFAULT_BATCHES_PER_EPOCH};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const OUT_DIR_ENV: &str = "CRLNET_OUT_DIR";

/// Episode seeds are drawn from this stream of the run seed.
const EPISODE_STREAM: u64 = 0xE7;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    pub n_classes: usize,
    pub class_offset: usize,
    pub support_per_class: usize,
    pub query_per_class: usize,
    /// Square input side. The reference setup uses 224; the toy default is 32.
    pub image_size: usize,
    pub transform_mix: [f64; 4],
    pub blur_fraction: f64,
    /// Training data seed; the run seed when unset.
    pub data_seed: Option<u64>,
    /// Image-folder layout to train on instead of generated glyphs.
    pub data_folder: Option<PathBuf>,

    /// Backbone blocks as `(channels, stride)`; the last block sets C and
    /// the strides set W = H.
    pub blocks: Vec<(usize, usize)>,
    pub kernel: [usize; 4],
    pub structure: Structure,

    pub epochs: usize,
    pub batch_size: usize,
    pub batches_per_epoch: Option<usize>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_step: usize,
    pub lr_decay: f64,
    pub loss: LossVariant,
    pub margin: f64,
    pub epsilon: f64,
    pub augmentation: Augmentation,
    pub checkpoint_every: usize,

    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub episodes: usize,
    pub strategies: Vec<Strategy>,
    /// Held-out evaluation data seed; run seed + 1 when unset.
    pub eval_data_seed: Option<u64>,
    pub eval_folder: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DatasetConfig::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let eval = EvalConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            n_classes: data.n_classes,
            class_offset: data.class_offset,
            support_per_class: data.samples_per_class_support,
            query_per_class: data.samples_per_class_query,
            image_size: data.image_size,
            transform_mix: data.transform_mix,
            blur_fraction: data.blur_fraction,
            data_seed: None,
            data_folder: None,
            blocks: model.backbone.blocks,
            kernel: model.kernel,
            structure: model.structure,
            epochs: train.epochs,
            batch_size: train.batch_size,
            batches_per_epoch: Some(DEFAULT_BATCHES_PER_EPOCH),
            learning_rate: train.learning_rate,
            weight_decay: train.weight_decay,
            lr_step: train.lr_step,
            lr_decay: train.lr_decay,
            loss: train.loss.variant,
            margin: train.loss.margin,
            epsilon: train.loss.epsilon,
            augmentation: train.augmentation,
            checkpoint_every: 10,
            n_way: eval.n_way,
            k_shot: eval.k_shot,
            queries_per_class: eval.q_per_class,
            episodes: eval.n_episodes,
            strategies: eval.strategies,
            eval_data_seed: None,
            eval_folder: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_array<T: FromStr + Copy, const N: usize>(key: &str, value: &str) -> Result<[T; N]> {
    let v: Vec<T> = parse_list(key, value)?;
    v.try_into().map_err(|_| CliError::Config(format!("{key}: expected {N} comma-separated values")))
}

fn parse_core<T: FromStr<Err = crlnet_core::Error>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e| CliError::Config(format!("{key}: {e}")))
}

fn parse_optional<T: FromStr>(key: &str, value: &str, none: &str) -> Result<Option<T>> {
    if value == none {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_blocks(key: &str, value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(|b| {
            let (c, s) = b
                .trim()
                .split_once('x')
                .ok_or_else(|| CliError::Config(format!("{key}: block {b:?} is not CHANNELSxSTRIDE")))?;
            Ok((parse(key, c)?, parse(key, s)?))
        })
        .collect()
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn show_optional<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data.classes" => self.n_classes = parse(key, v)?,
            "data.class_offset" => self.class_offset = parse(key, v)?,
            "data.support_per_class" => self.support_per_class = parse(key, v)?,
            "data.query_per_class" => self.query_per_class = parse(key, v)?,
            "data.image_size" => self.image_size = parse(key, v)?,
            "data.transform_mix" => self.transform_mix = parse_array(key, v)?,
            "data.blur_fraction" => self.blur_fraction = parse(key, v)?,
            "data.seed" => self.data_seed = parse_optional(key, v, "run")?,
            "data.folder" => self.data_folder = parse_optional(key, v, "none")?,
            "model.blocks" => self.blocks = parse_blocks(key, v)?,
            "model.kernel" => self.kernel = parse_array(key, v)?,
            "model.structure" => self.structure = parse_core(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.batches_per_epoch" => self.batches_per_epoch = parse_optional(key, v, "auto")?,
            "train.lr" => self.learning_rate = parse(key, v)?,
            "train.weight_decay" => self.weight_decay = parse(key, v)?,
            "train.lr_step" => self.lr_step = parse(key, v)?,
            "train.lr_decay" => self.lr_decay = parse(key, v)?,
            "train.loss" => self.loss = parse_core(key, v)?,
            "train.margin" => self.margin = parse(key, v)?,
            "train.epsilon" => self.epsilon = parse(key, v)?,
            "train.augmentation" => self.augmentation = parse_core(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "eval.n_way" => self.n_way = parse(key, v)?,
            "eval.k_shot" => self.k_shot = parse(key, v)?,
            "eval.queries_per_class" => self.queries_per_class = parse(key, v)?,
            "eval.episodes" => self.episodes = parse(key, v)?,
            "eval.strategies" => {
                self.strategies = v.split(',').map(|s| parse_core(key, s.trim())).collect::<Result<_>>()?
            }
            "eval.data_seed" => self.eval_data_seed = parse_optional(key, v, "run")?,
            "eval.folder" => self.eval_folder = parse_optional(key, v, "none")?,
            other => return Err(CliError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; errors name the offending line.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected key = value", i + 1)))?;
            self.set(k, v).map_err(|e| CliError::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Every setting except `out_dir`, one `key = value` per line in a fixed order.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a String");
        line("seed", self.seed.to_string());
        line("data.classes", self.n_classes.to_string());
        line("data.class_offset", self.class_offset.to_string());
        line("data.support_per_class", self.support_per_class.to_string());
        line("data.query_per_class", self.query_per_class.to_string());
        line("data.image_size", self.image_size.to_string());
        line("data.transform_mix", join(self.transform_mix));
        line("data.blur_fraction", self.blur_fraction.to_string());
        line("data.seed", show_optional(&self.data_seed, "run"));
        line("data.folder", show_optional(&self.data_folder.as_ref().map(|p| p.display()), "none"));
        line("model.blocks", join(self.blocks.iter().map(|(c, s)| format!("{c}x{s}"))));
        line("model.kernel", join(self.kernel));
        line("model.structure", self.structure.to_string());
        line("train.epochs", self.epochs.to_string());
        line("train.batch_size", self.batch_size.to_string());
        line("train.batches_per_epoch", show_optional(&self.batches_per_epoch, "auto"));
        line("train.lr", self.learning_rate.to_string());
        line("train.weight_decay", self.weight_decay.to_string());
        line("train.lr_step", self.lr_step.to_string());
        line("train.lr_decay", self.lr_decay.to_string());
        line("train.loss", self.loss.to_string());
        line("train.margin", self.margin.to_string());
        line("train.epsilon", self.epsilon.to_string());
        line("train.augmentation", self.augmentation.to_string());
        line("train.checkpoint_every", self.checkpoint_every.to_string());
        line("eval.n_way", self.n_way.to_string());
        line("eval.k_shot", self.k_shot.to_string());
        line("eval.queries_per_class", self.queries_per_class.to_string());
        line("eval.episodes", self.episodes.to_string());
        line("eval.strategies", join(&self.strategies));
        line("eval.data_seed", show_optional(&self.eval_data_seed, "run"));
        line("eval.folder", show_optional(&self.eval_folder.as_ref().map(|p| p.display()), "none"));
        s
    }

    /// SHA-256 of [`render`](Self::render), hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.render().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            n_classes: self.n_classes,
            class_offset: self.class_offset,
            samples_per_class_support: self.support_per_class,
            samples_per_class_query: self.query_per_class,
            image_size: self.image_size,
            seed: self.data_seed.unwrap_or(self.seed),
            transform_mix: self.transform_mix,
            blur_fraction: self.blur_fraction,
        }
    }

    pub fn eval_dataset_config(&self) -> DatasetConfig {
        DatasetConfig { seed: self.eval_data_seed.unwrap_or(self.seed.wrapping_add(1)), ..self.dataset_config() }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let backbone = BackboneConfig::from_blocks(self.image_size, 1, self.blocks.clone())?;
        let cfg = ModelConfig { backbone, kernel: self.kernel, structure: self.structure };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            batches_per_epoch: self.batches_per_epoch,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            lr_step: self.lr_step,
            lr_decay: self.lr_decay,
            loss: LossConfig { variant: self.loss, margin: self.margin, epsilon: self.epsilon },
            augmentation: self.augmentation,
            seed: self.seed,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_per_class: self.queries_per_class,
            n_episodes: self.episodes,
            strategies: self.strategies.clone(),
            seed: derive_seed(self.seed, &[EPISODE_STREAM]),
        }
    }

    /// Checks every derived core config.
    pub fn validate(&self) -> Result<()> {
        if self.data_folder.is_none() || self.eval_folder.is_none() {
            self.dataset_config().validate()?;
        }
        self.model_config()?;
        self.train_config().validate()?;
        if self.checkpoint_every == 0 {
            return Err(CliError::Config("train.checkpoint_every must be positive".into()));
        }
        let e = self.eval_config();
        if e.n_way == 0 || e.k_shot == 0 || e.q_per_class == 0 || e.n_episodes == 0 {
            return Err(CliError::Config("eval.n_way, k_shot, queries_per_class and episodes must be positive".into()));
        }
        if e.strategies.is_empty() {
            return Err(CliError::Config("eval.strategies is empty".into()));
        }
        Ok(())
    }
}
