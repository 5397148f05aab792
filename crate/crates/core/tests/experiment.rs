use std::fs;
use std::path::Path;
use std::time::SystemTime;

use avsr::config::RunConfig;
use avsr::experiment::{examples_for, evaluate, run_experiment, Grid, Norms, Recognizer};
use avsr::synthdata::{CorpusInfo, Manifest, Snr, Split};

fn tiny(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml(
        r#"
        [corpus]
        num_train = 6
        num_dev = 3
        num_test = 3
        [arch]
        hidden = 8
        bottleneck = 4
        audio_layers = 1
        visual_layers = 1
        fusion_layers = 1
        recog_layers = 1
        frontend_layers = 1
        [experiment]
        pretrain_epochs = 1
        clean_epochs = 1
        mult_epochs = 1
        "#,
    )
    .unwrap();
    cfg.paths.out = out.to_path_buf();
    cfg
}

fn mtime(p: &Path) -> SystemTime {
    fs::metadata(p).unwrap().modified().unwrap()
}

#[test]
fn completed_cells_are_skipped_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let first = run_experiment(&cfg, Grid::Table1, false).unwrap();
    assert_eq!(first.rows.iter().filter(|r| r.snr == "AVE").count(), 3);
    let ckpt = dir.path().join("systems/audio_clean_clean/best.ckpt");
    let stamp = mtime(&ckpt);

    let again = run_experiment(&cfg, Grid::Table1, false).unwrap();
    assert_eq!(again.tsv, first.tsv);
    assert_eq!(mtime(&ckpt), stamp, "an up-to-date cell was retrained");

    // a changed configuration invalidates the stored hashes
    let mut changed = cfg.clone();
    changed.train.lambda_ce = 0.2;
    run_experiment(&changed, Grid::Table1, false).unwrap();
    assert_ne!(mtime(&ckpt), stamp);
}

#[test]
fn checkpoints_decode_without_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let report = run_experiment(&cfg, Grid::Table1, false).unwrap();
    fs::remove_file(dir.path().join("config.toml")).unwrap();

    let rec = Recognizer::load(&dir.path().join("systems/audio_clean_clean/best.ckpt")).unwrap();
    assert_eq!(rec.config.arch, cfg.arch);
    let corpus = cfg.paths.corpus_dir();
    let info = CorpusInfo::load(&corpus).unwrap();
    let manifest = Manifest::load(&corpus.join("manifest.tsv")).unwrap();
    let examples = examples_for(&manifest, &info.symbols, &rec.norms, Split::Test, Some(&[Snr::Clean])).unwrap();
    assert_eq!(examples.len(), 3);
    let den = rec.denominator(&info).unwrap();
    let rows = evaluate(&rec, &den, &examples, "audio", "clean").unwrap();
    let stored = report.rows.iter().find(|r| r.system == "audio" && r.snr == "clean").unwrap();
    let fresh = rows.iter().find(|r| r.snr == "clean").unwrap();
    assert_eq!(fresh.wer, stored.wer);
    assert_ne!(rec.norms, Norms::identity(info.symbols.visual_dim()));
}
