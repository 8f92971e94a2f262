#![allow(dead_code)]

use std::path::Path;

use dcr_datagen::idx::{write_images, write_labels};
use dcr_datagen::{LabeledImageSet, Split, PLANE, SIDE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Blob-like 28x28 images: a bright random stroke on a dark background, every image distinct.
pub fn blob_pixels(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0u8; n * PLANE];
    for img in out.chunks_exact_mut(PLANE) {
        let (mut r, mut c) = (rng.random_range(8..20) as i32, rng.random_range(8..20) as i32);
        for _ in 0..40 {
            r = (r + rng.random_range(-1..=1)).clamp(4, 23);
            c = (c + rng.random_range(-1..=1)).clamp(4, 23);
            img[r as usize * SIDE + c as usize] = rng.random_range(200..=255);
        }
        // a unique faint signature pixel pair keeps hashes distinct
        img[0] = rng.random_range(1..=40);
        img[1] = rng.random_range(1..=40);
    }
    out
}

pub fn blob_set(n: usize, classes: u8, seed: u64) -> LabeledImageSet {
    let px = blob_pixels(n, seed);
    let labels = (0..n).map(|i| (i % classes as usize) as u8).collect();
    LabeledImageSet::new(1, px.iter().map(|&p| p as f32 / 255.0).collect(), labels, classes as usize, Split::Train)
        .unwrap()
}

/// A data root with small MNIST and letters splits in IDX format.
pub fn write_data_root(root: &Path) {
    let mnist = root.join("mnist");
    let letters = root.join("letters");
    std::fs::create_dir_all(&mnist).unwrap();
    std::fs::create_dir_all(&letters).unwrap();
    for (split, n, seed) in [("train", 600, 1), ("t10k", 200, 2)] {
        write_images(&mnist.join(format!("{split}-images-idx3-ubyte")), 28, 28, &blob_pixels(n, seed)).unwrap();
        let labels: Vec<u8> = (0..n).map(|i| (i * 7 % 10) as u8).collect();
        write_labels(&mnist.join(format!("{split}-labels-idx1-ubyte")), &labels).unwrap();
    }
    for (split, n, seed) in [("train", 520, 3), ("t10k", 104, 4)] {
        write_images(&letters.join(format!("{split}-images-idx3-ubyte")), 28, 28, &blob_pixels(n, seed)).unwrap();
        let labels: Vec<u8> = (0..n).map(|i| (i % 26 + 1) as u8).collect();
        write_labels(&letters.join(format!("{split}-labels-idx1-ubyte")), &labels).unwrap();
    }
}

pub fn image_hash(img: &[f32]) -> Vec<u32> {
    img.iter().map(|p| p.to_bits()).collect()
}
