mod common;

use common::{tiny_config, write_tiny};
use crossview::ablate::{ablate, ablation_csv, run_dir_for, train_and_eval, Toggles};
use crossview::config::RunConfig;
use crossview::data::{DataStore, SplitMode};

#[test]
fn eight_rows_per_split_and_all_on_matches_a_plain_run() {
    let d = tempfile::tempdir().unwrap();
    write_tiny(d.path(), 0);
    let store = DataStore::new(d.path());
    let base = RunConfig { epochs: 1, seeds: 1, ..tiny_config() };
    let out = tempfile::tempdir().unwrap();
    let splits = [SplitMode::Seen, SplitMode::Unseen];
    let rows = ablate(&store, &base, &splits, out.path()).unwrap();
    assert_eq!(rows.len(), 16);
    for split in splits {
        assert_eq!(rows.iter().filter(|r| r.split == split).count(), 8);
    }
    let csv = std::fs::read_to_string(out.path().join("ablation.csv")).unwrap();
    assert_eq!(csv, ablation_csv(&rows));
    assert_eq!(csv.lines().count(), 17);

    let plain_dir = tempfile::tempdir().unwrap();
    let plain = train_and_eval(&store, &base, SplitMode::Seen, plain_dir.path()).unwrap();
    let all_on = rows.iter().find(|r| r.split == SplitMode::Seen && r.toggles == Toggles::all()[7]).unwrap();
    assert_eq!(all_on.reports, vec![plain]);
    let ablated_ckpt = run_dir_for(out.path(), SplitMode::Seen, Toggles::all()[7], base.seed).join("model.xvc");
    assert_eq!(
        std::fs::read(ablated_ckpt).unwrap(),
        std::fs::read(plain_dir.path().join("model.xvc")).unwrap()
    );
}
