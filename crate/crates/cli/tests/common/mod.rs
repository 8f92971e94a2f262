#![allow(dead_code)]

use std::path::Path;

use dcr_cli::{ExperimentConfig, Workspace};
use dcr_datagen::idx::{write_images, write_labels};
use dcr_datagen::{DatasetCache, PLANE, SIDE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

/// Digit-like images: class `y` draws a bright stroke in its own band of rows.
fn pixels(labels: &[u8], seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0u8; labels.len() * PLANE];
    for (img, &y) in out.chunks_exact_mut(PLANE).zip(labels) {
        let band = 2 + 2 * y as i32;
        let (mut r, mut c) = (band + rng.random_range(0..3), rng.random_range(6..22) as i32);
        for _ in 0..40 {
            r = (r + rng.random_range(-1..=1)).clamp(band, band + 4);
            c = (c + rng.random_range(-1..=1)).clamp(4, 23);
            img[r as usize * SIDE + c as usize] = rng.random_range(200..=255);
        }
        img[0] = rng.random_range(1..=40);
    }
    out
}

/// Small MNIST and letters splits in IDX format under `<root>/data`.
pub fn write_data(root: &Path) {
    let mnist = root.join("data/mnist");
    let letters = root.join("data/letters");
    std::fs::create_dir_all(&mnist).unwrap();
    std::fs::create_dir_all(&letters).unwrap();
    for (split, n, seed) in [("train", 600, 1), ("t10k", 200, 2)] {
        let labels: Vec<u8> = (0..n).map(|i| (i * 7 % 10) as u8).collect();
        write_images(&mnist.join(format!("{split}-images-idx3-ubyte")), 28, 28, &pixels(&labels, seed)).unwrap();
        write_labels(&mnist.join(format!("{split}-labels-idx1-ubyte")), &labels).unwrap();
    }
    for (split, n, seed) in [("train", 520, 3), ("t10k", 104, 4)] {
        let labels: Vec<u8> = (0..n).map(|i| (i % 26 + 1) as u8).collect();
        let classes: Vec<u8> = labels.iter().map(|l| l % 10).collect();
        write_images(&letters.join(format!("{split}-images-idx3-ubyte")), 28, 28, &pixels(&classes, seed)).unwrap();
        write_labels(&letters.join(format!("{split}-labels-idx1-ubyte")), &labels).unwrap();
    }
}

/// A workspace rooted at `root` whose cache and data ignore the environment.
pub fn workspace(root: &Path) -> Workspace {
    Workspace {
        workdir: root.to_path_buf(),
        cache: DatasetCache::new(root.join("cache")),
        data_root: root.join("data"),
    }
}

/// A two-epoch DCR run on a tiny plain network.
pub fn config(output_dir: &str) -> Value {
    json!({
        "schema_version": 1,
        "model": {
            "architecture": {"Plain": {"kernel": 13, "channels": [2, 3]}},
            "num_classes": 10,
            "probe_points": [{"layer": 1, "lambda": 0.1}, {"layer": 2, "lambda": 0.1}]
        },
        "data": {
            "seed": 3,
            "train": {"generator": "dro-striped-mnist", "split": "train", "subset": 300},
            "concept": {"generator": "concept-mnist", "size": 200},
            "eval": {"test": {"generator": "dro-striped-mnist", "split": "test"}}
        },
        "trainer": {"method": "dcr", "gamma": 1.0, "epochs": 2, "batch_size": 32, "cav_steps": 2, "lr": 0.01},
        "eval": ["accuracy", "worst-group"],
        "eval_options": {"max_concept_examples": 200},
        "precision": "f64",
        "output_dir": output_dir
    })
}

pub fn write_config(root: &Path, name: &str, cfg: &Value) -> std::path::PathBuf {
    let path = root.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

pub fn parse(cfg: &Value) -> ExperimentConfig {
    ExperimentConfig::from_json(&cfg.to_string(), "test").unwrap()
}
