mod common;

use common::{tiny_config, write_tiny};
use crossview::config::RunConfig;
use crossview::data::{DataStore, SplitMode};
use crossview::train::{
    epoch_checkpoint_path, initial_model, train, CHECKPOINT_DIR, CONFIG_ECHO, FINAL_CHECKPOINT, NUMERIC_DUMP,
    TRAIN_LOG,
};
use crossview::Error;

fn data() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_tiny(dir.path(), 0);
    dir
}

fn read(p: &std::path::Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let (d, run, init) = (data(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = RunConfig { epochs: 0, ..tiny_config() };
    let out = train(&DataStore::new(d.path()), &cfg, SplitMode::Seen, run.path()).unwrap();
    assert!(out.log.is_empty());
    let p = init.path().join("init.xvc");
    initial_model(&cfg).unwrap().save(&p).unwrap();
    assert_eq!(read(&out.checkpoint), read(&p));
}

#[test]
fn runs_are_byte_identical_and_logs_one_row_per_epoch() {
    let d = data();
    let cfg = RunConfig { epochs: 3, ..tiny_config() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let oa = train(&DataStore::new(d.path()), &cfg, SplitMode::Seen, a.path()).unwrap();
    let ob = train(&DataStore::new(d.path()), &cfg, SplitMode::Seen, b.path()).unwrap();
    assert_eq!(read(&oa.checkpoint), read(&ob.checkpoint));
    assert_eq!(read(&a.path().join(TRAIN_LOG)), read(&b.path().join(TRAIN_LOG)));
    assert_eq!(oa.log.len(), 3);
    let log = String::from_utf8(read(&a.path().join(TRAIN_LOG))).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);
    assert!(oa.log.iter().all(|r| r.total.is_finite()));

    let echo = std::fs::read_to_string(a.path().join(CONFIG_ECHO)).unwrap();
    assert_eq!(RunConfig::parse_str(&echo).unwrap(), cfg);

    let other = RunConfig { seed: 1, ..cfg };
    let c = tempfile::tempdir().unwrap();
    let oc = train(&DataStore::new(d.path()), &other, SplitMode::Seen, c.path()).unwrap();
    assert_ne!(read(&oa.checkpoint), read(&oc.checkpoint));
}

#[test]
fn only_the_last_two_epoch_checkpoints_are_kept() {
    let (d, run) = (data(), tempfile::tempdir().unwrap());
    let cfg = RunConfig { epochs: 4, ..tiny_config() };
    let out = train(&DataStore::new(d.path()), &cfg, SplitMode::Seen, run.path()).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(run.path().join(CHECKPOINT_DIR))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["epoch_003.xvc", "epoch_004.xvc"]);
    assert_eq!(read(&epoch_checkpoint_path(run.path(), 4)), read(&out.checkpoint));
    assert!(run.path().join(FINAL_CHECKPOINT).is_file());
}

#[test]
fn training_never_opens_an_annotation() {
    let d = data();
    for split in [SplitMode::Seen, SplitMode::Unseen] {
        let store = DataStore::new(d.path());
        let run = tempfile::tempdir().unwrap();
        train(&store, &tiny_config(), split, run.path()).unwrap();
        assert!(!store.accesses().is_empty());
        assert_eq!(store.annotation_reads(), 0, "{split}");
    }
}

#[test]
fn divergence_aborts_with_a_dump() {
    let (d, run) = (data(), tempfile::tempdir().unwrap());
    let cfg = RunConfig { lr: 1e12, epochs: 3, ..tiny_config() };
    let err = train(&DataStore::new(d.path()), &cfg, SplitMode::Seen, run.path()).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err:?}");
    assert_eq!(err.exit_code(), 2);
    let dump = std::fs::read_to_string(run.path().join(NUMERIC_DUMP)).unwrap();
    assert!(dump.contains("epoch = ") && dump.contains("group = "), "{dump}");
}

#[test]
fn batching_and_clipping_change_the_update_but_stay_deterministic() {
    let d = data();
    let run = |cfg: &RunConfig| {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&DataStore::new(d.path()), cfg, SplitMode::Seen, dir.path()).unwrap();
        read(&out.checkpoint)
    };
    let base = tiny_config();
    let plain = run(&base);
    let batched = RunConfig { batch: 3, ..base.clone() };
    assert_ne!(run(&batched), plain);
    assert_eq!(run(&batched), run(&batched));
    // A bound far above any gradient norm leaves training untouched.
    assert_eq!(run(&RunConfig { clip: 1e12, ..base.clone() }), plain);
    assert_ne!(run(&RunConfig { clip: 1e-3, ..base }), plain);
}

#[test]
fn class_count_mismatch_is_a_config_error() {
    let (d, run) = (data(), tempfile::tempdir().unwrap());
    let cfg = RunConfig { num_classes: 5, ..tiny_config() };
    let err = train(&DataStore::new(d.path()), &cfg, SplitMode::Seen, run.path()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err:?}");
}
