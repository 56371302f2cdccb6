use aler::manifest::{apply_overrides, parse_pairs, ManifestError};
use aler::RunManifest;
use aler_core::QueryStrategy;

const BASE: &str = "\
# demo
records_r = r.csv
records_s = s.csv
embeddings_r = er.txt
embeddings_s = es.txt
truth = truth.csv
key_attrs = name, group
seed = 42
";

#[test]
fn defaults_and_parsing() {
    let m = RunManifest::parse(BASE).unwrap();
    assert_eq!(m.key_attrs, ["name", "group"]);
    assert_eq!(m.seed, 42);
    assert_eq!(m.loop_config.seed, 42);
    assert_eq!(m.loop_config.train.seed, 42);
    assert_eq!(m.sample_proportion, 0.2);
    assert_eq!(m.loop_config.seed_budget, 100);
    assert_eq!(m.loop_config.batch_budget, 300);
    assert_eq!(m.loop_config.k, 10);
    assert_eq!(m.loop_config.strategy, QueryStrategy::Hybrid);
    assert_eq!(m.delimiter, b',');
    assert_eq!(m.n_chunks, None);
}

#[test]
fn text_round_trip_is_lossless() {
    let mut map = parse_pairs(BASE).unwrap();
    apply_overrides(
        &mut map,
        &[
            "min_delta=0.0375".into(),
            "learning_rate=0.00123456789".into(),
            "strategy=random".into(),
            "n_chunks=5".into(),
            "label_cap=2000".into(),
            "delimiter=tab".into(),
            "theta_p=0.75".into(),
        ],
    )
    .unwrap();
    let m = RunManifest::from_pairs(&map).unwrap();
    let text = m.to_text();
    let back = RunManifest::parse(&text).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_text(), text);
    assert_eq!(back.config_hash(), m.config_hash());
    assert_eq!(back.loop_config.min_delta, 0.0375);
    assert_eq!(back.delimiter, b'\t');
}

#[test]
fn errors_name_the_field() {
    let no_seed = BASE.replace("seed = 42\n", "");
    assert_eq!(RunManifest::parse(&no_seed), Err(ManifestError::Missing("seed")));
    let bad = format!("{BASE}k = ten\n");
    let e = RunManifest::parse(&bad).unwrap_err();
    assert!(matches!(&e, ManifestError::Invalid { field, .. } if field == "k"), "{e}");
    let unknown = format!("{BASE}colour = blue\n");
    assert_eq!(RunManifest::parse(&unknown), Err(ManifestError::UnknownField("colour".into())));
    assert_eq!(RunManifest::parse("just words"), Err(ManifestError::Syntax { line: 1 }));
    let e = RunManifest::parse(&format!("{BASE}sample_proportion = 1.5\n")).unwrap_err();
    assert!(e.to_string().contains("sample_proportion"));
}

#[test]
fn hash_changes_with_config() {
    let a = RunManifest::parse(BASE).unwrap();
    let b = RunManifest::parse(&BASE.replace("seed = 42", "seed = 43")).unwrap();
    assert_ne!(a.config_hash(), b.config_hash());
    assert_eq!(a.config_hash().len(), 64);
}

#[test]
fn file_checks_name_the_field() {
    let d = tempfile::tempdir().unwrap();
    for f in ["r.csv", "s.csv", "er.txt", "truth.csv"] {
        std::fs::write(d.path().join(f), "x").unwrap();
    }
    let path = d.path().join("m.manifest");
    std::fs::write(&path, BASE).unwrap();
    let m = RunManifest::load(&path, &[]).unwrap();
    assert!(m.records_r.starts_with(d.path()));
    let e = m.check_files(true, true).unwrap_err();
    assert!(matches!(e, ManifestError::NoSuchFile { field: "embeddings_s", .. }), "{e}");
    let no_emb = RunManifest::load(&path, &["embeddings_s=".into()]).unwrap();
    assert_eq!(no_emb.check_files(true, false), Err(ManifestError::Missing("embeddings_s")));
    assert!(m.check_files(false, true).is_ok());
}
