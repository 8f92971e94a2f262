//! The benchmark generators. Each is a pure function of its inputs and seed.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::dataset::{ConceptDataset, ConceptSource, GroupedDataset, LabeledImageSet, Split, NO_STRIPES, PLANE};
use crate::error::{DataError, Result};
use crate::seed::{rng_for, stream};
use crate::stripes::{all_patterns, composite, NUM_ANGLES};

fn require_gray(base: &LabeledImageSet, what: &str) -> Result<()> {
    if base.channels != 1 {
        return Err(DataError::InvalidParam(format!("{what} needs single-channel images")));
    }
    base.validate()
}

fn open_rate(name: &str, p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(DataError::InvalidParam(format!("{name} must lie in (0, 1), got {p}")));
    }
    Ok(())
}

/// Splits off `n` examples chosen by a seeded permutation; returns `(subset, remainder)`.
pub fn split_subset(base: &LabeledImageSet, n: usize, seed: u64) -> Result<(LabeledImageSet, LabeledImageSet)> {
    if n > base.len() {
        return Err(DataError::InvalidParam(format!("subset of {n} from {} examples", base.len())));
    }
    let mut order: Vec<usize> = (0..base.len()).collect();
    order.shuffle(&mut rng_for(seed, stream::SUBSET));
    let (head, tail) = order.split_at(n);
    let mut tail = tail.to_vec();
    tail.sort_unstable();
    let mut head = head.to_vec();
    head.sort_unstable();
    Ok((base.select(&head), base.select(&tail)))
}

/// Every digit with label `j` gets stripes at angle `π j / 5`.
pub fn make_striped_mnist(base: &LabeledImageSet, seed: u64) -> Result<LabeledImageSet> {
    require_gray(base, "striped MNIST")?;
    let patterns = all_patterns();
    let mut out = base.clone();
    for (img, &l) in out.images.chunks_exact_mut(PLANE).zip(&base.labels) {
        composite(img, &patterns[l as usize % NUM_ANGLES as usize]);
    }
    out.seed = seed;
    Ok(out)
}

/// Each image striped with probability `p_stripe`; attribute = has stripes, 20 groups for digits.
pub fn make_dro_striped_mnist(base: &LabeledImageSet, p_stripe: f64, seed: u64) -> Result<GroupedDataset> {
    require_gray(base, "DRO striped MNIST")?;
    open_rate("p_stripe", p_stripe)?;
    let patterns = all_patterns();
    let mut rng = rng_for(seed, stream::DRO);
    let mut images = base.images.clone();
    let mut attributes = Vec::with_capacity(base.len());
    for (img, &l) in images.chunks_exact_mut(PLANE).zip(&base.labels) {
        let striped = rng.random_bool(p_stripe);
        if striped {
            composite(img, &patterns[l as usize % NUM_ANGLES as usize]);
        }
        attributes.push(striped as u8);
    }
    Ok(GroupedDataset {
        channels: 1,
        images,
        labels: base.labels.clone(),
        attributes,
        num_classes: base.num_classes,
        split: base.split,
    })
}

/// Draws `size` distinct examples and shuffles which half is the concept class.
fn sample_balanced(n_base: usize, size: usize, rng: &mut impl Rng) -> Result<Vec<(usize, u8)>> {
    if size < 2 || size > n_base {
        return Err(DataError::InvalidParam(format!("concept set of {size} from {n_base} examples")));
    }
    let picked = index::sample(rng, n_base, size).into_vec();
    let mut concept: Vec<u8> = (0..size).map(|i| (i < size / 2) as u8).collect();
    concept.shuffle(rng);
    Ok(picked.into_iter().zip(concept).collect())
}

fn striped_concepts(
    base: &LabeledImageSet,
    size: usize,
    seed: u64,
    source: ConceptSource,
    angle: impl Fn(u8, &mut rand_chacha::ChaCha8Rng) -> u8,
    stream_id: u64,
) -> Result<ConceptDataset> {
    require_gray(base, "stripe concepts")?;
    let patterns = all_patterns();
    let mut rng = rng_for(seed, stream_id);
    let draws = sample_balanced(base.len(), size, &mut rng)?;
    let mut images = Vec::with_capacity(size * PLANE);
    let mut concept_labels = Vec::with_capacity(size);
    let mut origin = Vec::with_capacity(size);
    let mut angle_index = Vec::with_capacity(size);
    for (i, c) in draws {
        let start = images.len();
        images.extend_from_slice(base.image(i));
        if c == 1 {
            let j = angle(base.labels[i], &mut rng);
            composite(&mut images[start..], &patterns[j as usize]);
            angle_index.push(j);
        } else {
            angle_index.push(NO_STRIPES);
        }
        concept_labels.push(c);
        origin.push(i as u32);
    }
    Ok(ConceptDataset {
        channels: 1,
        images,
        concept_labels,
        source,
        origin,
        angle_index,
        disjoint_from_eval: base.split != Split::Test,
    })
}

/// Half the sampled digits striped at their own label's angle, half clean.
pub fn make_concept_mnist(base: &LabeledImageSet, size: usize, seed: u64) -> Result<ConceptDataset> {
    striped_concepts(base, size, seed, ConceptSource::MnistStripes, |l, _| l % NUM_ANGLES, stream::CONCEPT_MNIST)
}

/// Half the sampled letters striped at an angle index drawn uniformly from `0..10`.
pub fn make_concept_emnist(letters: &LabeledImageSet, size: usize, seed: u64) -> Result<ConceptDataset> {
    striped_concepts(
        letters,
        size,
        seed,
        ConceptSource::EmnistStripes,
        |_, rng| rng.random_range(0..NUM_ANGLES),
        stream::CONCEPT_EMNIST,
    )
}

fn colorize(gray: &[f32], color: u8, out: &mut Vec<f32>) {
    for channel in 0..2u8 {
        if channel == color {
            out.extend_from_slice(gray);
        } else {
            out.extend(std::iter::repeat_n(0.0, gray.len()));
        }
    }
}

/// Binary label `1{digit >= 5}` flipped with `label_noise`; colour (0 red, 1 green) equals the
/// noisy label with probability `color_corr`.
pub fn make_cmnist(base: &LabeledImageSet, label_noise: f64, color_corr: f64, seed: u64) -> Result<GroupedDataset> {
    require_gray(base, "colored MNIST")?;
    open_rate("label_noise", label_noise)?;
    open_rate("color_corr", color_corr)?;
    let mut rng = rng_for(seed, stream::CMNIST);
    let mut images = Vec::with_capacity(base.len() * 2 * PLANE);
    let mut labels = Vec::with_capacity(base.len());
    let mut attributes = Vec::with_capacity(base.len());
    for (i, &digit) in base.labels.iter().enumerate() {
        let y = (digit >= 5) as u8 ^ rng.random_bool(label_noise) as u8;
        let color = if rng.random_bool(color_corr) { y } else { 1 - y };
        colorize(base.image(i), color, &mut images);
        labels.push(y);
        attributes.push(color);
    }
    Ok(GroupedDataset { channels: 2, images, labels, attributes, num_classes: 2, split: base.split })
}

/// Letters coloured red or green; the concept label is the colour (1 = green).
pub fn make_cmnist_concept(letters: &LabeledImageSet, size: usize, seed: u64) -> Result<ConceptDataset> {
    require_gray(letters, "colored letters")?;
    let mut rng = rng_for(seed, stream::CMNIST_CONCEPT);
    let draws = sample_balanced(letters.len(), size, &mut rng)?;
    let mut images = Vec::with_capacity(size * 2 * PLANE);
    let mut concept_labels = Vec::with_capacity(size);
    let mut origin = Vec::with_capacity(size);
    for (i, c) in draws {
        colorize(letters.image(i), c, &mut images);
        concept_labels.push(c);
        origin.push(i as u32);
    }
    Ok(ConceptDataset {
        channels: 2,
        images,
        concept_labels,
        source: ConceptSource::CmnistLetters,
        origin,
        angle_index: Vec::new(),
        disjoint_from_eval: letters.split != Split::Test,
    })
}
