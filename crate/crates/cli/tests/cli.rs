use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crlnet_cli::checkpoint::Checkpoint;
use crlnet_cli::plot::PLOT_HEIGHT;
use crlnet_cli::report::{read_accuracy_csv, read_eval_summary};
use tempfile::TempDir;

const TINY: &str = "\
data.image_size = 16
data.support_per_class = 4
data.query_per_class = 6
data.blur_fraction = 0.2
model.blocks = 8x2,8x2
train.epochs = 3
train.batch_size = 8
train.batches_per_epoch = 2
train.checkpoint_every = 2
eval.episodes = 12
eval.queries_per_class = 3
eval.strategies = individual_similarity,class_similarity,classifier,raw_query,weighted_query
";

struct Run {
    dir: TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.cfg"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.path("out").join(name)
    }

    fn crlnet(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_crlnet"))
            .arg("--config")
            .arg(self.path("run.cfg"))
            .arg("--out-dir")
            .arg(self.path("out"))
            .args(args)
            .env_remove("CRLNET_OUT_DIR")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let o = self.crlnet(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn train_writes_checkpoints_and_one_loss_row_per_epoch() {
    let run = Run::new();
    run.ok(&["train"]);
    assert_eq!(data_rows(&run.out("loss.csv")), 3);
    let ck = Checkpoint::load(&run.out("checkpoint.json")).unwrap();
    assert_eq!((ck.metadata.epoch, ck.metadata.seed), (3, 0));
    assert_eq!(ck.metadata.config_hash.len(), 64);
    assert!(run.out("checkpoints/epoch_0002.json").exists());
    assert!(!run.out("checkpoints/epoch_0001.json").exists());
}

#[test]
fn one_epoch_checkpoint_loads_and_rerun_is_identical() {
    let a = Run::new();
    let b = Run::new();
    for run in [&a, &b] {
        run.ok(&["--set", "train.epochs=1", "train"]);
    }
    assert_eq!(data_rows(&a.out("loss.csv")), 1);
    assert_eq!(fs::read(a.out("loss.csv")).unwrap(), fs::read(b.out("loss.csv")).unwrap());
    assert_eq!(fs::read(a.out("checkpoint.json")).unwrap(), fs::read(b.out("checkpoint.json")).unwrap());
    a.ok(&["eval"]);
}

#[test]
fn different_seed_changes_the_run() {
    let a = Run::new();
    let b = Run::new();
    a.ok(&["--set", "train.epochs=1", "train"]);
    b.ok(&["--set", "train.epochs=1", "--seed", "5", "train"]);
    assert_ne!(fs::read(a.out("loss.csv")).unwrap(), fs::read(b.out("loss.csv")).unwrap());
}

#[test]
fn eval_report_agrees_with_accuracy_csv() {
    let run = Run::new();
    run.ok(&["train"]);
    run.ok(&["eval"]);
    let summary = read_eval_summary(&run.out("eval_report.json")).unwrap();
    let cols = read_accuracy_csv(&run.out("accuracy.csv")).unwrap();
    assert_eq!(summary.results.len(), 5);
    assert_eq!(cols.len(), 5);
    assert_eq!(summary.checkpoint_epoch, 3);
    for (res, (name, values)) in summary.results.iter().zip(&cols) {
        assert_eq!(&res.strategy, name);
        assert_eq!(values.len(), 12);
        assert_eq!(res.per_episode_accuracy.len(), values.len());
        let avg = values.iter().sum::<f64>() / values.len() as f64;
        assert!((res.mean - avg).abs() <= 1e-12, "{name}: {} vs {avg}", res.mean);
    }
}

#[test]
fn untrained_head_baseline_keeps_the_backbone() {
    let run = Run::new();
    run.ok(&["--set", "train.epochs=1", "train"]);
    run.ok(&["eval", "--untrained-head"]);
    let summary = read_eval_summary(&run.out("eval_report.json")).unwrap();
    assert_eq!(summary.head, "untrained");
}

#[test]
fn checkpoint_shape_mismatch_exits_2() {
    let run = Run::new();
    run.ok(&["--set", "train.epochs=1", "train"]);
    let o = run.crlnet(&["--set", "model.blocks=16x2,8x2", "eval"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("does not match"), "{}", stderr(&o));
    let o = run.crlnet(&["--set", "model.kernel=1,1,1,1", "eval"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn invalid_config_exits_2_with_message() {
    let run = Run::new();
    for args in [
        &["--set", "train.lr=fast", "train"][..],
        &["--set", "no.such.key=1", "train"],
        &["--set", "train.batch_size=0", "train"],
        &["--set", "model.kernel=2,3,3,3", "train"],
        &["--set", "data.transform_mix=0.5,0.5,0.5,0.5", "gen-data"],
        &["eval", "--checkpoint", "missing.json"],
    ] {
        let o = run.crlnet(args);
        assert_eq!(code(&o), 2, "{args:?}");
        assert!(stderr(&o).starts_with("error: "), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn numeric_blow_up_exits_3() {
    let run = Run::new();
    let o = run.crlnet(&["--set", "train.lr=1e300", "train"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn embeddings_have_one_row_per_sample_and_c_columns() {
    let run = Run::new();
    run.ok(&["--set", "train.epochs=1", "train"]);
    run.ok(&["export-embeddings"]);
    let text = fs::read_to_string(run.out("embeddings.csv")).unwrap();
    let header: Vec<_> = text.lines().next().unwrap().split(',').collect();
    let expected: Vec<String> =
        ["sample_id", "class_id", "pool"].iter().map(|s| s.to_string()).chain((0..8).map(|i| format!("f{i}"))).collect();
    assert_eq!(header, expected);
    assert_eq!(data_rows(&run.out("embeddings.csv")), 30);
    assert_eq!(data_rows(&run.out("backbone_embeddings.csv")), 30);
    let first = fs::read(run.out("embeddings.csv")).unwrap();
    run.ok(&["export-embeddings"]);
    assert_eq!(first, fs::read(run.out("embeddings.csv")).unwrap());

    run.ok(&["export-embeddings", "--split", "train", "--pool", "support"]);
    assert_eq!(data_rows(&run.out("embeddings.csv")), 20);
}

#[test]
fn empty_pool_export_exits_2() {
    let run = Run::new();
    run.ok(&["--set", "train.epochs=1", "train"]);
    let o = run.crlnet(&["--set", "data.query_per_class=0", "export-embeddings"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn out_dir_env_var_is_honoured() {
    let run = Run::new();
    let target = run.path("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_crlnet"))
        .arg("--config")
        .arg(run.path("run.cfg"))
        .arg("gen-data")
        .env("CRLNET_OUT_DIR", &target)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(target.join("train_manifest.csv").exists());
    assert_eq!(data_rows(&target.join("eval_manifest.csv")), 50);
}

#[test]
fn gen_data_exports_image_folders() {
    let run = Run::new();
    run.ok(&["gen-data", "--images"]);
    let class_dirs = fs::read_dir(run.out("images/train")).unwrap().count();
    assert_eq!(class_dirs, 5);
    let ds = crlnet_core::synthetic::ingest_image_folder(&run.out("images/train")).unwrap();
    assert_eq!((ds.support.len(), ds.query.len()), (20, 30));
}

fn parse_svg(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap();
    roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text
}

#[test]
fn plots_are_well_formed_and_bars_match_csv_means() {
    let run = Run::new();
    run.ok(&["train"]);
    run.ok(&["eval"]);
    let (loss, acc) = (run.out("loss.csv"), run.out("accuracy.csv"));
    run.ok(&["plot", "--loss", loss.to_str().unwrap(), "--accuracy", acc.to_str().unwrap()]);
    parse_svg(&run.out("loss.svg"));
    let text = parse_svg(&run.out("accuracy.svg"));
    let doc = roxmltree::Document::parse(&text).unwrap();
    let cols = read_accuracy_csv(&acc).unwrap();
    let bars: Vec<_> = doc.descendants().filter(|n| n.attribute("class") == Some("bar")).collect();
    assert_eq!(bars.len(), cols.len());
    for (bar, (name, values)) in bars.iter().zip(&cols) {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let value: f64 = bar.attribute("data-value").unwrap().parse().unwrap();
        let height: f64 = bar.attribute("height").unwrap().parse().unwrap();
        assert_eq!(bar.attribute("data-strategy"), Some(name.as_str()));
        assert!((value - mean).abs() <= 1e-12, "{name}");
        assert!((height / PLOT_HEIGHT - mean).abs() <= 1e-12, "{name}");
    }
    let loss_doc = fs::read_to_string(run.out("loss.svg")).unwrap();
    let loss_doc = roxmltree::Document::parse(&loss_doc).unwrap();
    assert_eq!(loss_doc.descendants().filter(|n| n.attribute("class") == Some("point")).count(), 3);
}

#[test]
fn empty_or_malformed_csv_exits_2_naming_the_line() {
    let run = Run::new();
    let empty = run.path("empty.csv");
    fs::write(&empty, "").unwrap();
    let o = run.crlnet(&["plot", "--accuracy", empty.to_str().unwrap()]);
    assert_eq!(code(&o), 2);

    let header_only = run.path("header.csv");
    fs::write(&header_only, "episode,weighted_query\n").unwrap();
    let o = run.crlnet(&["plot", "--accuracy", header_only.to_str().unwrap()]);
    assert_eq!(code(&o), 2);

    let bad = run.path("bad.csv");
    fs::write(&bad, "episode,weighted_query\n0,0.4\n1,zero\n2,0.2\n").unwrap();
    let o = run.crlnet(&["plot", "--accuracy", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let ragged = run.path("ragged.csv");
    fs::write(&ragged, "epoch,mean_loss\n1,0.5\n2,0.4,extra\n").unwrap();
    let o = run.crlnet(&["plot", "--loss", ragged.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    assert!(!run.out("loss.svg").exists());
}
