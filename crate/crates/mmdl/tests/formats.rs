use std::path::Path;

use mmdl::checkpoint;
use mmdl::dataset::{generate, manifest_path, Dataset, Family};
use mmdl::error::Error;
use mmdl_core::nets::{init_params, ArchConfig, Modality};
use mmdl_core::synth::{GeneratorConfig, SplitName};

fn tiny() -> GeneratorConfig {
    GeneratorConfig {
        train_episodes: 12,
        test_episodes: 12,
        ..GeneratorConfig::default()
    }
}

fn truncations(len: usize) -> Vec<usize> {
    vec![0, 3, 4, 8, 30, len / 3, len / 2, len - 1]
}

#[test]
fn dataset_round_trips_byte_identically() {
    let ds = generate(&tiny(), 3, 1).unwrap();
    let bytes = ds.encode();
    let back = Dataset::decode(&bytes, Path::new("mem"), |_| true).unwrap();
    assert_eq!(back.encode(), bytes);
    assert_eq!(back.records.len(), 48);
    // Fetching the same episode twice gives the same tensors.
    assert_eq!(back.records[5].episode, back.records[5].episode.clone());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.mmds");
    ds.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let loaded = Dataset::load(&path).unwrap();
    assert_eq!(loaded.encode(), bytes);
    let manifest = std::fs::read_to_string(manifest_path(&path)).unwrap();
    assert_eq!(manifest.lines().count(), 49);
    assert!(manifest.starts_with("episode_id\tsplit\tlabel\tobject_id\n0\tstandard-train\t"));

    let comp = Dataset::load_family(&path, Family::Comp).unwrap();
    assert!(comp.records.iter().all(|r| matches!(r.entry.split, SplitName::CompTrain | SplitName::CompTest)));
    assert_eq!(comp.records.len(), 24);
}

#[test]
fn generation_ignores_worker_count() {
    let a = generate(&tiny(), 9, 1).unwrap().encode();
    let b = generate(&tiny(), 9, 3).unwrap().encode();
    assert_eq!(a, b);
    assert_ne!(a, generate(&tiny(), 10, 1).unwrap().encode());
}

#[test]
fn truncated_or_corrupt_dataset_is_a_format_error() {
    let bytes = generate(&tiny(), 3, 1).unwrap().encode();
    for n in truncations(bytes.len()) {
        let err = Dataset::decode(&bytes[..n], Path::new("cut.mmds"), |_| true).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "cut at {n}: {err}");
        assert!(err.to_string().contains("at byte"), "{err}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Dataset::decode(&bad, Path::new("x"), |_| true), Err(Error::Format { .. })));
    let mut long = bytes;
    long.push(0);
    assert!(matches!(Dataset::decode(&long, Path::new("x"), |_| true), Err(Error::Format { .. })));
}

#[test]
fn checkpoint_round_trips_and_rejects_truncation() {
    for m in Modality::ALL {
        let params = init_params(&ArchConfig::default().for_modality(m), m, 4).unwrap();
        let bytes = checkpoint::encode(&params);
        let back = checkpoint::decode(&bytes, Path::new("m.ckpt")).unwrap();
        assert!(back.bit_eq(&params));
        assert_eq!(back.modality, m);
        assert_eq!(checkpoint::encode(&back), bytes);
        for n in truncations(bytes.len()) {
            let err = checkpoint::decode(&bytes[..n], Path::new("m.ckpt")).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut at {n}: {err}");
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let params = init_params(&ArchConfig::default(), Modality::Rgb, 1).unwrap();
    checkpoint::save(&params, &path).unwrap();
    assert!(checkpoint::load(&path).unwrap().bit_eq(&params));
    assert!(matches!(checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
}
