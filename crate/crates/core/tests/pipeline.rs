use std::fs;
use std::path::{Path, PathBuf};

use clwe_nmt::model::{Group, HeadKind, TrainConfig, TransformerConfig};
use clwe_nmt::pipeline::family::{bt_data, plug_in_held_out, train_base, FamilySetup};
use clwe_nmt::pipeline::{
    metric_table_tsv, parity_frozen, run_plan, verify_stage_isolation, ArtifactStore, BtPlan, PipelineLock, Stage, StageManifest,
};
use clwe_nmt::synthlang::parallel_training_files;
use clwe_nmt::Error;

fn small_setup(seed: u64) -> FamilySetup {
    let mut s = FamilySetup::desk(seed, 16);
    s.grammar.sentences = 3000;
    s.grammar.vocab_size = 60;
    s.family.dev = 40;
    s.family.test = 40;
    s.skipgram.epochs = 2;
    s.skipgram.buckets = 1 << 10;
    s
}

fn files(dir: &Path, names: &[&str]) -> Vec<PathBuf> {
    names.iter().map(|n| dir.join(n)).collect()
}

const BASE_FILES: &[&str] = &[
    "sa-sb.src.txt",
    "sa-sb.tgt.txt",
    "sb-sc.src.txt",
    "sb-sc.tgt.txt",
    "sa.mono.txt",
    "sb.mono.txt",
    "dict.sb-sa.txt",
];
const EXT_FILES: &[&str] = &["sd.mono.txt", "dict.sd-sa.txt", "sd-sa.dev.src.txt", "sd-sa.dev.tgt.txt"];

fn manifests(dir: &Path, extra_base: &[&str]) -> (StageManifest, StageManifest) {
    let seen: Vec<String> = ["sa", "sb", "sc"].map(String::from).to_vec();
    let mut all = seen.clone();
    all.push("sd".into());
    let mut base_files = files(dir, BASE_FILES);
    base_files.extend(files(dir, extra_base));
    (
        StageManifest::scan(Stage::Base, &seen, &base_files).unwrap(),
        StageManifest::scan(Stage::Extension, &all, &files(dir, EXT_FILES)).unwrap(),
    )
}

#[test]
fn held_out_language_gets_no_training_files() {
    let setup = small_setup(1);
    let family = setup.build_family().unwrap();
    let dir = tempfile::tempdir().unwrap();
    family.write_dir(dir.path()).unwrap();
    let train = parallel_training_files(dir.path()).unwrap();
    assert_eq!(train.len(), 3 * 2 * 2);
    assert!(train.iter().all(|p| !p.file_name().unwrap().to_str().unwrap().contains("sd")));
    assert!(dir.path().join("sd-sa.dev.src.txt").is_file());
    assert!(dir.path().join("sd.mono.txt").is_file());
}

#[test]
fn stage_isolation_reports_leaks() {
    let setup = small_setup(2);
    let dir = tempfile::tempdir().unwrap();
    setup.build_family().unwrap().write_dir(dir.path()).unwrap();

    let (base, ext) = manifests(dir.path(), &[]);
    let clean = verify_stage_isolation(&base, &ext).unwrap();
    assert!(clean.is_clean());
    assert_eq!(clean.new_languages.into_iter().collect::<Vec<_>>(), vec!["sd".to_string()]);

    let (base, ext) = manifests(dir.path(), &["sd-sa.dev.src.txt"]);
    let leak = verify_stage_isolation(&base, &ext).unwrap();
    assert_eq!(leak.violations.len(), 1);
    assert!(leak.violations[0].file.ends_with("sd-sa.dev.src.txt"));

    // renaming a held-out file does not hide it
    fs::copy(dir.path().join("sd.mono.txt"), dir.path().join("sa.extra.txt")).unwrap();
    let (base, ext) = manifests(dir.path(), &["sa.extra.txt"]);
    let renamed = verify_stage_isolation(&base, &ext).unwrap();
    assert_eq!(renamed.violations.len(), 1);
    assert!(renamed.violations[0].reason.contains("identical"));

    // swapped manifests are a usage error
    assert!(verify_stage_isolation(&ext, &base).is_err());
}

#[test]
fn manifests_roundtrip_through_json() {
    let setup = small_setup(3);
    let dir = tempfile::tempdir().unwrap();
    setup.build_family().unwrap().write_dir(dir.path()).unwrap();
    let (base, _) = manifests(dir.path(), &[]);
    let path = dir.path().join("base.json");
    base.save(&path).unwrap();
    assert_eq!(StageManifest::load(&path).unwrap(), base);
}

#[test]
fn artifact_store_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let store = ArtifactStore::open(dir.path()).unwrap();
    let h = store.put(b"hello").unwrap();
    assert_eq!(store.put(b"hello").unwrap(), h);
    assert_eq!(store.get(&h).unwrap(), b"hello");
    store.set_ref("runs/a", &h).unwrap();
    assert_eq!(store.get_ref("runs/a").as_deref(), Some(h.as_str()));
    assert_eq!(store.get_ref("runs/b"), None);
    fs::write(store.path(&h), b"tampered").unwrap();
    assert!(matches!(store.get(&h), Err(Error::Data(_))));
    assert_ne!(ArtifactStore::key(&[b"ab", b"c"]), ArtifactStore::key(&[b"a", b"bc"]));
}

#[test]
fn second_writer_is_refused_until_release() {
    let dir = tempfile::tempdir().unwrap();
    let lock = PipelineLock::acquire(dir.path()).unwrap();
    assert!(matches!(PipelineLock::acquire(dir.path()), Err(Error::Conflict(_))));
    drop(lock);
    PipelineLock::acquire(dir.path()).unwrap();
}

#[test]
fn back_translation_alternates_frozen_halves() {
    let setup = small_setup(4);
    let tcfg = TransformerConfig::desk(16, 1, HeadKind::Softmax);
    let train = TrainConfig { max_updates: 30, batch_tokens: 400, ..TrainConfig::default() };
    let run = train_base(&setup, &tcfg, &train, Some(300)).unwrap();
    let model = plug_in_held_out(&setup, &run, None).unwrap();

    let mut plan = BtPlan::new("sd", &["sa"]);
    plan.iterations = 2;
    plan.steps_per_iteration = 10;
    plan.beam = 2;
    plan.mono_limit = Some(60);
    plan.synthetic_dev = 10;
    plan.train = TrainConfig { batch_tokens: 400, dev_every: 5, ..TrainConfig::default() };
    let mut data = bt_data(&run.family, &plan);
    for t in &mut data.tests {
        t.pairs.truncate(20);
    }

    let report = run_plan(&model, &plan, &data).unwrap();
    assert_eq!(report.baseline.len(), 2);
    assert_eq!(report.table.len(), 2 * 2);
    assert_eq!(report.iterations.len(), 2);
    for it in &report.iterations {
        assert_eq!(it.frozen, parity_frozen(it.iteration).name());
        assert!(it.aborted.is_none());
        assert!(it.synthetic_pairs > 0);
        if it.iteration % 2 == 1 {
            assert_eq!(it.encoder_checksum_before, it.encoder_checksum_after);
            assert_ne!(it.decoder_checksum_before, it.decoder_checksum_after);
        } else {
            assert_eq!(it.decoder_checksum_before, it.decoder_checksum_after);
            assert_ne!(it.encoder_checksum_before, it.encoder_checksum_after);
        }
    }
    assert_eq!(report.model.vocab.word_rows_checksum(), model.vocab.word_rows_checksum());
    assert_eq!(report.model.params.frozen(), model.params.frozen());
    let tsv = metric_table_tsv(&report.table);
    assert!(tsv.starts_with("iteration\tdirection\ttest_set\tchrfpp\n"));
    assert_eq!(tsv.lines().count(), 5);

    plan.iterations = 1;
    let one = run_plan(&model, &plan, &data).unwrap();
    assert_eq!(one.iterations.len(), 1);
    assert_eq!(one.iterations[0].frozen, Group::Encoder.name());
    // deterministic given the same inputs
    assert_eq!(one.table, report.table[..2]);
}

#[test]
fn plans_are_validated() {
    let setup = small_setup(5);
    let tcfg = TransformerConfig::desk(16, 1, HeadKind::Softmax);
    let train = TrainConfig { max_updates: 2, ..TrainConfig::default() };
    let run = train_base(&setup, &tcfg, &train, Some(50)).unwrap();
    let plan = BtPlan::new("sd", &["sa"]);
    let data = bt_data(&run.family, &plan);
    // the base model has no tag for the held-out language yet
    assert!(matches!(run_plan(&run.model, &plan, &data), Err(Error::Config(_))));
    let model = plug_in_held_out(&setup, &run, None).unwrap();
    let mut bad = plan.clone();
    bad.partners = vec!["sd".into()];
    assert!(matches!(run_plan(&model, &bad, &data), Err(Error::Config(_))));
}
