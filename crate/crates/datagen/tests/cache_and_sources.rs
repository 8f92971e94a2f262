mod common;

use std::io::Write;

use common::write_data_root;
use dcr_datagen::cache::{decode, encode};
use dcr_datagen::idx::read_images;
use dcr_datagen::{load_letters, load_mnist, materialize, CacheKey, DataError, DataSpec, Dataset, DatasetCache, Split};
use flate2::write::GzEncoder;
use flate2::Compression;

#[test]
fn idx_files_load_plain_and_gzipped() {
    let dir = tempfile::tempdir().unwrap();
    write_data_root(dir.path());
    let train = load_mnist(dir.path(), Split::Train).unwrap();
    assert_eq!((train.len(), train.channels, train.num_classes), (600, 1, 10));
    let path = dir.path().join("mnist/t10k-images-idx3-ubyte");
    let raw = std::fs::read(&path).unwrap();
    let file = std::fs::File::create(dir.path().join("mnist/t10k-images-idx3-ubyte.gz")).unwrap();
    let mut gz = GzEncoder::new(file, Compression::default());
    gz.write_all(&raw).unwrap();
    gz.finish().unwrap();
    std::fs::remove_file(&path).unwrap();
    let test = load_mnist(dir.path(), Split::Test).unwrap();
    assert_eq!(test.len(), 200);
    let (n, r, c, _) = read_images(&dir.path().join("mnist/t10k-images-idx3-ubyte.gz")).unwrap();
    assert_eq!((n, r, c), (200, 28, 28));
    let letters = load_letters(dir.path(), Split::Train).unwrap();
    assert_eq!(letters.num_classes, 26);
    assert!(letters.labels.iter().all(|&l| l < 26));
}

#[test]
fn missing_letters_name_a_download_instruction() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_letters(dir.path(), Split::Train).unwrap_err();
    match &err {
        DataError::Unavailable { instruction, .. } => assert!(instruction.contains("EMNIST")),
        other => panic!("unexpected {other:?}"),
    }
    let spec = DataSpec::ConceptEmnist { size: 10 };
    assert!(matches!(materialize(&spec, 0, dir.path(), None), Err(DataError::Unavailable { .. })));
}

#[test]
fn cache_round_trips_bit_identically_and_is_idempotent() {
    let data = tempfile::tempdir().unwrap();
    write_data_root(data.path());
    let cache_dir = tempfile::tempdir().unwrap();
    let cache = DatasetCache::new(cache_dir.path());
    let specs = [
        DataSpec::StripedMnist { split: Split::Train, subset: Some(400) },
        DataSpec::DroStripedMnist { split: Split::Test, p_stripe: 0.95, subset: None },
        DataSpec::ConceptMnist { size: 100, exclude_subset: Some(400) },
        DataSpec::ConceptEmnist { size: 50 },
        DataSpec::Cmnist { split: Split::Train, label_noise: 0.25, color_corr: 0.9, subset: None },
        DataSpec::CmnistConcept { size: 40 },
    ];
    for spec in &specs {
        let first = materialize(spec, 3, data.path(), Some(&cache)).unwrap();
        assert!(!first.from_cache);
        let path = first.path.clone().unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"DCR-DATA-1\n"));
        let second = materialize(spec, 3, data.path(), Some(&cache)).unwrap();
        assert!(second.from_cache);
        assert_eq!(second.path.as_ref(), Some(&path));
        assert_eq!(second.dataset, first.dataset, "{}", spec.generator());
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }
    assert_eq!(cache.entries().unwrap().len(), specs.len());
    let other_seed = materialize(&specs[0], 4, data.path(), Some(&cache)).unwrap();
    assert_ne!(other_seed.path, materialize(&specs[0], 3, data.path(), Some(&cache)).unwrap().path);
}

#[test]
fn concept_spec_excludes_the_training_subset() {
    let data = tempfile::tempdir().unwrap();
    write_data_root(data.path());
    let train = materialize(&DataSpec::Mnist { split: Split::Train, subset: Some(400) }, 9, data.path(), None).unwrap();
    let concept =
        materialize(&DataSpec::ConceptMnist { size: 200, exclude_subset: Some(400) }, 9, data.path(), None).unwrap();
    let (Dataset::Labeled(train), Dataset::Concept(concept)) = (train.dataset, concept.dataset) else {
        panic!("wrong dataset kinds");
    };
    let seen: std::collections::HashSet<Vec<u32>> =
        (0..train.len()).map(|i| common::image_hash(train.image(i))).collect();
    for i in 0..concept.len() {
        if concept.concept_labels[i] == 0 {
            assert!(!seen.contains(&common::image_hash(concept.image(i))));
        }
    }
}

#[test]
fn corrupt_or_mismatched_cache_files_are_rejected() {
    let set = common::blob_set(5, 10, 1);
    let key = CacheKey { generator: "mnist".into(), params: serde_json::json!({}), seed: 1, sources: vec![] };
    let bytes = encode(&key, &Dataset::Labeled(set.clone()));
    let (k, ds) = decode(&bytes).unwrap();
    assert_eq!(k, key);
    assert_eq!(ds, Dataset::Labeled(set));
    assert!(decode(b"garbage").is_err());
    assert!(decode(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn spec_validation_rejects_out_of_range_rates() {
    let bad = DataSpec::Cmnist { split: Split::Train, label_noise: 0.25, color_corr: 1.2, subset: None };
    assert!(matches!(bad.validate(), Err(DataError::InvalidParam(m)) if m.contains("color_corr")));
    let json = serde_json::json!({"generator": "cmnist", "split": "train"});
    let spec: DataSpec = serde_json::from_value(json).unwrap();
    assert_eq!(spec, DataSpec::Cmnist { split: Split::Train, label_noise: 0.25, color_corr: 0.9, subset: None });
    assert!(serde_json::from_value::<DataSpec>(serde_json::json!({"generator": "celeba"})).is_err());
}
