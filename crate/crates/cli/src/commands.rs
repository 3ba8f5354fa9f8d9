//! Subcommand bodies. Each writes its artifacts under `cfg.out_dir`.

use std::path::{Path, PathBuf};

use crlnet_core::data::Dataset;
use crlnet_core::eval::run_evaluation;
use crlnet_core::model::{init_model, Model, PairEncoder};
use crlnet_core::synthetic::{build_dataset, export_image_folder, ingest_image_folder, DatasetConfig, Pool};
use crlnet_core::training::train as train_model;

use crate::checkpoint::{Checkpoint, Metadata};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::plot;
use crate::report::{self, EmbeddingRow, EvalSummary, StrategyResult};

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_FILE: &str = "eval_report.json";
pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const BACKBONE_EMBEDDINGS_FILE: &str = "backbone_embeddings.csv";
pub const LOSS_PLOT: &str = "loss.svg";
pub const ACCURACY_PLOT: &str = "accuracy.svg";

/// Which dataset a command reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(CliError::io(&cfg.out_dir))?;
    Ok(&cfg.out_dir)
}

fn load_split(folder: Option<&Path>, generated: DatasetConfig) -> Result<Dataset> {
    match folder {
        Some(root) => Ok(ingest_image_folder(root)?),
        None => Ok(build_dataset(&generated)?.to_dataset()),
    }
}

pub fn dataset(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    match split {
        Split::Train => load_split(cfg.data_folder.as_deref(), cfg.dataset_config()),
        Split::Eval => load_split(cfg.eval_folder.as_deref(), cfg.eval_dataset_config()),
    }
}

/// Writes per-sample manifests of both generated splits, and with `images`
/// the image-folder layout under `images/train` and `images/eval`.
pub fn gen_data(cfg: &RunConfig, images: bool) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let out = prepare_out_dir(cfg)?;
    let mut written = Vec::new();
    for (name, dcfg) in [("train", cfg.dataset_config()), ("eval", cfg.eval_dataset_config())] {
        let ds = build_dataset(&dcfg)?;
        let path = out.join(format!("{name}_manifest.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let rows = std::iter::once(
            ["id", "class_id", "pool", "transforms", "mask_fraction", "background", "blur_radius", "noise_sigma"].map(String::from),
        )
        .chain(ds.support.iter().chain(&ds.query).map(|s| {
            let tags: Vec<_> = s.transforms_applied.iter().map(|t| t.as_str()).collect();
            [
                s.id.clone(),
                s.class_id.to_string(),
                s.pool.as_str().to_string(),
                if tags.is_empty() { "clean".into() } else { tags.join("+") },
                s.mask_fraction().to_string(),
                s.background.to_string(),
                s.blur_noise.map_or(String::new(), |b| b.radius.to_string()),
                s.blur_noise.map_or(String::new(), |b| b.sigma.to_string()),
            ]
        }));
        for row in rows {
            w.write_record(&row).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(CliError::io(&path))?;
        written.push(path);
        if images {
            let root = out.join("images").join(name);
            export_image_folder(&ds, &root)?;
            written.push(root);
        }
        eprintln!("{name}: {} support, {} query samples", ds.support.len(), ds.query.len());
    }
    Ok(written)
}

pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Trains from `cfg.seed`. The loss CSV is written even when training aborts,
/// holding the epochs that completed.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = prepare_out_dir(cfg)?.to_path_buf();
    std::fs::write(out.join(CONFIG_FILE), cfg.render()).map_err(CliError::io(out.join(CONFIG_FILE)))?;
    let ds = dataset(cfg, Split::Train)?;
    let mut model = Model::init(&cfg.model_config()?, cfg.seed)?;
    let tcfg = cfg.train_config();
    let hash = cfg.hash();
    let metadata = |epoch| Metadata { epoch, seed: cfg.seed, config_hash: hash.clone() };
    let ck_dir = out.join(CHECKPOINT_DIR);
    let mut losses = Vec::new();
    let result = train_model(&mut model, &ds, &tcfg, |epoch, loss, m| {
        losses.push(loss);
        eprintln!("epoch {:>3}  mean loss {loss:.6}", epoch + 1);
        if (epoch + 1) % cfg.checkpoint_every == 0 {
            std::fs::create_dir_all(&ck_dir).map_err(|e| crlnet_core::Error::Data(format!("{}: {e}", ck_dir.display())))?;
            Checkpoint::from_params(&m.params, metadata(epoch + 1))
                .save(&ck_dir.join(format!("epoch_{:04}.json", epoch + 1)))
                .map_err(|e| crlnet_core::Error::Data(e.to_string()))?;
        }
        Ok(())
    });
    report::write_loss_csv(&out.join(LOSS_FILE), &losses)?;
    result?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    Checkpoint::from_params(&model.params, metadata(losses.len())).save(&checkpoint)?;
    Ok(TrainOutcome { losses, checkpoint })
}

/// Loads `path` into the model described by `cfg`.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<(Model, Checkpoint)> {
    let mcfg = cfg.model_config()?;
    let ck = Checkpoint::load(path)?;
    let params = ck.restore(&init_model(&mcfg, cfg.seed)?)?;
    Ok((Model::new(&mcfg, params)?, ck))
}

/// Evaluates every configured strategy on one shared list of episodes. With
/// `untrained_head` the conditional and re-representation parameters are
/// re-initialised, leaving only the checkpoint's backbone.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, untrained_head: bool) -> Result<EvalSummary> {
    cfg.validate()?;
    let (mut model, ck) = load_model(cfg, checkpoint)?;
    if untrained_head {
        model = model.with_untrained_head(cfg.seed)?;
    }
    let ds = dataset(cfg, Split::Eval)?;
    let ecfg = cfg.eval_config();
    let reports = run_evaluation(&model, &ds, &ecfg)?;
    let out = prepare_out_dir(cfg)?;
    report::write_accuracy_csv(&out.join(ACCURACY_FILE), &reports)?;
    let summary = EvalSummary {
        config_hash: cfg.hash(),
        checkpoint_epoch: ck.metadata.epoch,
        head: if untrained_head { "untrained" } else { "trained" }.into(),
        n_way: ecfg.n_way,
        k_shot: ecfg.k_shot,
        queries_per_class: ecfg.q_per_class,
        episodes: ecfg.n_episodes,
        episode_seed: ecfg.seed,
        results: reports.iter().map(StrategyResult::from_report).collect(),
    };
    report::write_json(&out.join(REPORT_FILE), &summary)?;
    for r in &reports {
        eprintln!("{:<22} {:.4} +- {:.4}", r.strategy.to_string(), r.mean, r.ci95);
    }
    Ok(summary)
}

/// Re-represented vector of every sample in one pool, each paired against the
/// first support sample of its own class, plus the pooled backbone feature.
/// Returns the number of rows written to each file.
pub fn export_embeddings(cfg: &RunConfig, checkpoint: &Path, split: Split, pool: Pool) -> Result<usize> {
    cfg.validate()?;
    let (model, _) = load_model(cfg, checkpoint)?;
    let ds = dataset(cfg, split)?;
    let samples = match pool {
        Pool::Support => &ds.support,
        Pool::Query => &ds.query,
    };
    if samples.is_empty() {
        return Err(CliError::Config(format!("{} pool is empty", pool.as_str())));
    }
    let by_class = Dataset::by_class(&ds.support);
    let mut reference = std::collections::BTreeMap::new();
    let mut vectors = Vec::with_capacity(samples.len());
    let mut pooled = Vec::with_capacity(samples.len());
    for s in samples {
        let fs = match reference.get(&s.class_id) {
            Some(f) => f,
            None => {
                let idx = by_class
                    .get(&s.class_id)
                    .and_then(|v| v.first())
                    .ok_or_else(|| CliError::Config(format!("class {} has no support sample to pair with", s.class_id)))?;
                let f = model.prototype(&ds.support[*idx].image)?;
                reference.entry(s.class_id).or_insert(f)
            }
        };
        let fq = model.prototype(&s.image)?;
        let (_, vq) = model.re_represent(fs, &fq)?;
        vectors.push(vq.into_data());
        pooled.push(model.pooled(&fq)?.into_data());
    }
    let out = prepare_out_dir(cfg)?;
    for (file, feats) in [(EMBEDDINGS_FILE, &vectors), (BACKBONE_EMBEDDINGS_FILE, &pooled)] {
        let rows: Vec<_> = samples
            .iter()
            .zip(feats)
            .map(|(s, f)| EmbeddingRow { sample_id: &s.id, class_id: s.class_id, pool: pool.as_str(), features: f })
            .collect();
        report::write_embeddings_csv(&out.join(file), &rows)?;
    }
    Ok(samples.len())
}

/// Renders whichever CSVs are given.
pub fn plot(out_dir: &Path, loss: Option<&Path>, accuracy: Option<&Path>) -> Result<Vec<PathBuf>> {
    if loss.is_none() && accuracy.is_none() {
        return Err(CliError::Config("plot needs --loss and/or --accuracy".into()));
    }
    // parse everything before writing anything
    let loss_points = loss.map(report::read_loss_csv).transpose()?;
    let acc_cols = accuracy.map(report::read_accuracy_csv).transpose()?;
    std::fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    let mut written = Vec::new();
    if let Some(points) = loss_points {
        let path = out_dir.join(LOSS_PLOT);
        std::fs::write(&path, plot::loss_curve(&points)).map_err(CliError::io(&path))?;
        written.push(path);
    }
    if let Some(cols) = acc_cols {
        let path = out_dir.join(ACCURACY_PLOT);
        std::fs::write(&path, plot::accuracy_bars(&cols)).map_err(CliError::io(&path))?;
        written.push(path);
    }
    Ok(written)
}
