use std::fs;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use topicswitch_core::model::checkpoint::*;
use topicswitch_core::model::*;
use topicswitch_core::tokenizer::{train_bpe, Vocab};

fn config(seed: u64) -> ModelConfig {
    let mut c = ModelConfig::tiny(Vocab::bytes_only(2).len(), 2);
    c.seed = seed;
    c
}

fn bits(p: &Parameters) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    p.tensors()
        .iter()
        .map(|(n, t)| {
            (
                n.clone(),
                t.shape.clone(),
                t.values.iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

fn saved(dir: &Path, kind: NetworkKind) -> (PathBuf, Parameters) {
    let p = Parameters::init(kind, &config(3)).unwrap();
    let path = dir.join("model.json");
    save_checkpoint(&p, None, &path).unwrap();
    (path, p)
}

fn edit_manifest(path: &Path, f: impl FnOnce(&mut serde_json::Value)) {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    f(&mut v);
    fs::write(path, serde_json::to_string(&v).unwrap()).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn round_trip_is_bitwise(seed in any::<u64>(), kind in 0usize..3, specials in prop::collection::vec(any::<u32>(), 0..8)) {
        let kind = [NetworkKind::Generator, NetworkKind::Selector, NetworkKind::Discriminator][kind];
        let mut p = Parameters::init(kind, &config(seed)).unwrap();
        // arbitrary bit patterns, NaN payloads and signed zeros included
        let first = p.tensors_mut().values_mut().next().unwrap();
        for (slot, b) in first.values.iter_mut().zip(specials) {
            *slot = f32::from_bits(b);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&p, None, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        prop_assert_eq!(bits(&back.params), bits(&p));
        prop_assert_eq!(back.params.kind, kind);
        prop_assert_eq!(&back.params.config, &p.config);
    }
}

#[test]
fn embedded_vocab_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = train_bpe(["aa bb aa", "bb cc"].iter(), 270, 2).unwrap();
    let mut c = config(1);
    c.vocab_size = vocab.len();
    let p = Parameters::init(NetworkKind::Generator, &c).unwrap();
    let path = dir.path().join("g.json");
    save_checkpoint(&p, Some(&vocab), &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.vocab.as_ref(), Some(&vocab));
    assert!(blob_path(&path).exists());
    assert_eq!(
        fs::metadata(blob_path(&path)).unwrap().len(),
        4 * p.param_count() as u64
    );
}

#[test]
fn unparsable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved(dir.path(), NetworkKind::Generator);
    fs::write(&path, "{ not json").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Manifest(_))));
}

#[test]
fn future_format_version() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved(dir.path(), NetworkKind::Selector);
    edit_manifest(&path, |v| v["format_version"] = 2.into());
    assert!(matches!(
        load_checkpoint(&path),
        Err(CheckpointError::VersionMismatch { found: 2, expected: 1 })
    ));
}

#[test]
fn truncated_blob() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved(dir.path(), NetworkKind::Discriminator);
    let blob = blob_path(&path);
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 6]).unwrap();
    match load_checkpoint(&path) {
        Err(CheckpointError::Truncated { actual, .. }) => assert_eq!(actual, bytes.len() as u64 - 6),
        other => panic!("expected Truncated, got {other:?}"),
    }
}

#[test]
fn manifest_shape_disagrees_with_config() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved(dir.path(), NetworkKind::Generator);
    edit_manifest(&path, |v| v["tensors"][0]["shape"] = serde_json::json!([7, 7]));
    match load_checkpoint(&path) {
        Err(CheckpointError::ShapeMismatch { name, found, .. }) => {
            assert_eq!(name, "tok_emb");
            assert_eq!(found, vec![7, 7]);
        }
        other => panic!("expected ShapeMismatch, got {other:?}"),
    }
}

#[test]
fn renamed_or_missing_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved(dir.path(), NetworkKind::Generator);
    edit_manifest(&path, |v| v["tensors"][1]["name"] = "mystery".into());
    assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Manifest(_))));

    let (path, _) = saved(dir.path(), NetworkKind::Generator);
    edit_manifest(&path, |v| {
        v["tensors"].as_array_mut().unwrap().pop();
    });
    assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Manifest(_))));
}

#[test]
fn missing_blob_file() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved(dir.path(), NetworkKind::Generator);
    fs::remove_file(blob_path(&path)).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Io(_))));
}

#[test]
fn corrupt_embedded_vocab() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved(dir.path(), NetworkKind::Generator);
    edit_manifest(&path, |v| v["vocab"] = "garbage".into());
    assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Vocab(_))));
}

#[test]
fn wrong_network_kind() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved(dir.path(), NetworkKind::Selector);
    let err = load_checkpoint(&path).unwrap().expect_kind(NetworkKind::Discriminator);
    assert!(matches!(
        err,
        Err(CheckpointError::KindMismatch {
            expected: NetworkKind::Discriminator,
            found: NetworkKind::Selector
        })
    ));
}

#[test]
fn incompatible_configs() {
    let a = config(0);
    let mut b = a.clone();
    assert!(check_compatible(&a, &b).is_ok());
    b.hidden_dim *= 2;
    assert!(matches!(
        check_compatible(&a, &b),
        Err(CheckpointError::ConfigMismatch(_))
    ));
}
