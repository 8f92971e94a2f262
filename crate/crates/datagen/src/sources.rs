//! Locating and loading the MNIST digits and EMNIST letters on disk.
//!
//! Layout under the data root (`$DCR_DATA`, else `<workdir>/data`):
//!
//! ```text
//! mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]
//! letters/emnist-letters-{train,test}-{images-idx3,labels-idx1}-ubyte[.gz]   (official, column-major)
//! letters/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]                  (row-major)
//! ```

use std::path::{Path, PathBuf};

use crate::dataset::{LabeledImageSet, Split, PLANE, SIDE};
use crate::error::{DataError, Result};
use crate::idx;

pub const DATA_ENV: &str = "DCR_DATA";

const MNIST_HELP: &str = "download the four MNIST IDX files (train/t10k images and labels) into this directory";
const LETTERS_HELP: &str = "download the EMNIST 'letters' split (emnist-letters-*-ubyte) into this directory, \
     or generate a stand-in with scripts/make_synth_letters.py";

pub fn data_root(workdir: &Path) -> PathBuf {
    match std::env::var_os(DATA_ENV) {
        Some(p) => workdir.join(p),
        None => workdir.join("data"),
    }
}

fn find(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")].into_iter().map(|n| dir.join(n)).find(|p| p.is_file())
}

fn to_unit(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|&p| p as f32 / 255.0).collect()
}

fn load_pair(images: &Path, labels: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let (n, rows, cols, pixels) = idx::read_images(images)?;
    if rows != SIDE || cols != SIDE {
        return Err(DataError::Format { path: images.display().to_string(), reason: format!("{rows}x{cols} images") });
    }
    let labels_v = idx::read_labels(labels)?;
    if labels_v.len() != n {
        return Err(DataError::Format {
            path: labels.display().to_string(),
            reason: format!("{} labels for {n} images", labels_v.len()),
        });
    }
    Ok((pixels, labels_v))
}

pub fn load_mnist(root: &Path, split: Split) -> Result<LabeledImageSet> {
    let dir = root.join("mnist");
    let p = split.idx_prefix();
    let (Some(images), Some(labels)) =
        (find(&dir, &format!("{p}-images-idx3-ubyte")), find(&dir, &format!("{p}-labels-idx1-ubyte")))
    else {
        return Err(DataError::Unavailable {
            what: format!("MNIST {p} split"),
            looked_in: dir.display().to_string(),
            instruction: MNIST_HELP.into(),
        });
    };
    let (pixels, labels) = load_pair(&images, &labels)?;
    LabeledImageSet::new(1, to_unit(&pixels), labels, 10, split)
}

/// EMNIST letters with labels shifted to `0..26` (`a`/`A` = 0).
pub fn load_letters(root: &Path, split: Split) -> Result<LabeledImageSet> {
    let dir = root.join("letters");
    let official = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let official = (
        find(&dir, &format!("emnist-letters-{official}-images-idx3-ubyte")),
        find(&dir, &format!("emnist-letters-{official}-labels-idx1-ubyte")),
    );
    let p = split.idx_prefix();
    let plain = (find(&dir, &format!("{p}-images-idx3-ubyte")), find(&dir, &format!("{p}-labels-idx1-ubyte")));
    let (mut pixels, labels) = match (official, plain) {
        ((Some(i), Some(l)), _) => {
            let (mut px, lb) = load_pair(&i, &l)?;
            // the official release stores every image transposed
            for img in px.chunks_exact_mut(PLANE) {
                for r in 0..SIDE {
                    for c in r + 1..SIDE {
                        img.swap(r * SIDE + c, c * SIDE + r);
                    }
                }
            }
            (px, lb)
        }
        (_, (Some(i), Some(l))) => load_pair(&i, &l)?,
        _ => {
            return Err(DataError::Unavailable {
                what: "EMNIST letters".into(),
                looked_in: dir.display().to_string(),
                instruction: LETTERS_HELP.into(),
            })
        }
    };
    let mut shifted = Vec::with_capacity(labels.len());
    for l in labels {
        if !(1..=26).contains(&l) {
            return Err(DataError::Format { path: dir.display().to_string(), reason: format!("letter label {l}") });
        }
        shifted.push(l - 1);
    }
    pixels.shrink_to_fit();
    LabeledImageSet::new(1, to_unit(&pixels), shifted, 26, split)
}
