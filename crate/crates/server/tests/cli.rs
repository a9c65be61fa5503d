use std::path::{Path, PathBuf};

use clap::Parser;

use pgcm::checkpoint::ModelCheckpoint;
use pgcm::data::read_dataset;
use pgcm_server::cli::{run, Cli};
use pgcm_server::wire::TableJson;

const CONFIG: &str = "\
epochs = 3
batch_size = 16
prototypes = 4
embed_dim = 4
encoder_hidden = 8
decoder_hidden = 8
concept_hidden = 8
task_hidden = 8
data.train = 40
data.val = 12
data.test = 12
sweep = 2,3
";

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, CONFIG).unwrap();
    (dir, cfg)
}

fn pgcm(args: &[&str], cfg: &Path, out: &Path) -> Vec<PathBuf> {
    let mut argv = vec!["pgcm", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    argv.extend_from_slice(args);
    run(&Cli::try_parse_from(argv).unwrap()).unwrap()
}

fn names(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect()
}

#[test]
fn data_train_eval_table_and_curves() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");

    let written = pgcm(&["gen-data"], &cfg, &out);
    assert_eq!(names(&written), ["dataset.bin"]);
    let data = read_dataset(&written[0]).unwrap();
    assert_eq!((data.train.len(), data.val.len(), data.test.len()), (40, 12, 12));
    let data_arg = written[0].to_str().unwrap().to_string();

    let written = pgcm(&["--seed", "5", "train", "--data", &data_arg], &cfg, &out);
    assert_eq!(names(&written), ["checkpoint.bin", "train_log.txt", "metrics.txt"]);
    let ck = ModelCheckpoint::load(&written[0]).unwrap();
    assert_eq!(ck.seed, 5);
    assert_eq!(ck.model.config.prototypes, 4);
    assert_eq!(ck.dataset_fingerprint, data.fingerprint());
    let log = std::fs::read_to_string(&written[1]).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch=")).count(), 3);
    assert!(log.contains("swap epoch=1"));
    let ck_arg = written[0].to_str().unwrap().to_string();

    let written = pgcm(&["--seed", "5", "eval", "--checkpoint", &ck_arg, "--data", &data_arg], &cfg, &out);
    assert_eq!(names(&written), ["metrics.txt", "metrics.bin"]);
    let text = std::fs::read_to_string(&written[0]).unwrap();
    assert!(text.contains("instances=12"));
    assert!(text.contains(&format!("dataset_fingerprint={}", data.fingerprint())));

    let written = pgcm(&["export-table", "--checkpoint", &ck_arg], &cfg, &out);
    let table: TableJson = serde_json::from_str(&std::fs::read_to_string(&written[0]).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert!(table.rows.iter().all(|r| r.status == "swapped" && r.source.is_some()));

    let written = pgcm(&["intervene-curve", "--checkpoint", &ck_arg, "--data", &data_arg], &cfg, &out);
    let csv = std::fs::read_to_string(&written[0]).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,concept_acc,task_acc,mode,seed"));
    let rows: Vec<&str> = lines.collect();
    // t = 0..=20 for each mode
    assert_eq!(rows.len(), 2 * 21);
    assert!(rows[0].starts_with("0,") && rows[0].ends_with(",standard,1"));
    assert!(rows[21].ends_with(",propagating,1"));
    let last: Vec<&str> = rows[20].split(',').collect();
    assert_eq!(last[1], "1.000000");
}

#[test]
fn cbm_editing_and_sweep() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");

    let written = pgcm(&["train", "--model", "cbm"], &cfg, &out);
    assert_eq!(names(&written), ["cbm.bin", "cbm_metrics.txt"]);
    assert!(std::fs::read_to_string(&written[1]).unwrap().contains("task_accuracy="));

    let written = pgcm(&["edit-experiment"], &cfg, &out);
    assert_eq!(names(&written), ["editing_checkpoint.bin", "editing.txt"]);
    let text = std::fs::read_to_string(&written[1]).unwrap();
    assert!(text.starts_with("seed=1 misaligned="));

    let written = pgcm(&["sweep"], &cfg, &out);
    let csv = std::fs::read_to_string(&written[0]).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "prototypes,concept_acc,task_acc,intervened_task_acc,swapped,seed");
    assert!(rows[1].starts_with("2,") && rows[2].starts_with("3,"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    let missing = dir.path().join("nope.bin");
    let cli = Cli::try_parse_from(["pgcm", "--out", out.to_str().unwrap(), "eval", "--checkpoint", missing.to_str().unwrap()]).unwrap();
    let err = run(&cli).unwrap_err();
    assert!(format!("{err:#}").contains("nope.bin"));

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "colour = red\n").unwrap();
    let cli = Cli::try_parse_from(["pgcm", "--config", bad.to_str().unwrap(), "gen-data"]).unwrap();
    assert!(format!("{:#}", run(&cli).unwrap_err()).contains("colour"));

    assert!(Cli::try_parse_from(["pgcm", "train", "--model", "resnet"]).is_err());
    let _ = cfg;
}
