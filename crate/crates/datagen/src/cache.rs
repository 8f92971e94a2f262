//! Hash-keyed on-disk store for generated datasets.
//!
//! One file per dataset: the magic line `DCR-DATA-1\n`, a little-endian `u32`
//! header length, a JSON header (generator, params, seed, source
//! fingerprints, array table), then the raw little-endian arrays.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataset::{ConceptDataset, ConceptSource, GroupedDataset, LabeledImageSet, Split, PLANE, SIDE};
use crate::error::{DataError, Result};

pub const CACHE_ENV: &str = "DCR_CACHE";
pub const DATA_MAGIC: &[u8] = b"DCR-DATA-1\n";

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Labeled(LabeledImageSet),
    Concept(ConceptDataset),
    Grouped(GroupedDataset),
}

impl Dataset {
    pub fn kind(&self) -> &'static str {
        match self {
            Dataset::Labeled(_) => "labeled",
            Dataset::Concept(_) => "concept",
            Dataset::Grouped(_) => "grouped",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Labeled(d) => d.len(),
            Dataset::Concept(d) => d.len(),
            Dataset::Grouped(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Identity of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheKey {
    pub generator: String,
    pub params: Value,
    pub seed: u64,
    /// Content hashes of the source sets the generator read.
    pub sources: Vec<String>,
}

impl CacheKey {
    pub fn digest(&self) -> String {
        // serde_json maps are ordered, so this encoding is canonical
        let bytes = serde_json::to_vec(self).expect("key serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Content hash of a labelled set, used as a source fingerprint.
pub fn fingerprint(set: &LabeledImageSet) -> String {
    let mut h = Sha256::new();
    h.update((set.channels as u64).to_le_bytes());
    h.update(&set.labels);
    for chunk in set.images.chunks(4096) {
        let bytes: Vec<u8> = chunk.iter().flat_map(|p| p.to_le_bytes()).collect();
        h.update(&bytes);
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayRecord {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    kind: String,
    key: CacheKey,
    meta: Value,
    arrays: Vec<ArrayRecord>,
}

enum Array<'a> {
    F32(&'a [f32]),
    U8(&'a [u8]),
    U32(&'a [u32]),
}

fn image_shape(n: usize, c: usize) -> Vec<usize> {
    vec![n, c, SIDE, SIDE]
}

fn parts(ds: &Dataset) -> (Value, Vec<(&'static str, Vec<usize>, Array<'_>)>) {
    match ds {
        Dataset::Labeled(d) => (
            serde_json::json!({"num_classes": d.num_classes, "split": d.split, "seed": d.seed}),
            vec![
                ("images", image_shape(d.len(), d.channels), Array::F32(&d.images)),
                ("labels", vec![d.len()], Array::U8(&d.labels)),
            ],
        ),
        Dataset::Concept(d) => (
            serde_json::json!({"source": d.source, "disjoint_from_eval": d.disjoint_from_eval}),
            vec![
                ("images", image_shape(d.len(), d.channels), Array::F32(&d.images)),
                ("concept_labels", vec![d.len()], Array::U8(&d.concept_labels)),
                ("origin", vec![d.origin.len()], Array::U32(&d.origin)),
                ("angle_index", vec![d.angle_index.len()], Array::U8(&d.angle_index)),
            ],
        ),
        Dataset::Grouped(d) => (
            serde_json::json!({"num_classes": d.num_classes, "split": d.split}),
            vec![
                ("images", image_shape(d.len(), d.channels), Array::F32(&d.images)),
                ("labels", vec![d.len()], Array::U8(&d.labels)),
                ("attributes", vec![d.len()], Array::U8(&d.attributes)),
            ],
        ),
    }
}

pub fn encode(key: &CacheKey, ds: &Dataset) -> Vec<u8> {
    let (meta, arrays) = parts(ds);
    let mut data = Vec::new();
    let mut records = Vec::new();
    for (name, shape, arr) in arrays {
        let offset = data.len();
        let dtype = match arr {
            Array::F32(v) => {
                v.iter().for_each(|x| data.extend_from_slice(&x.to_le_bytes()));
                "f32"
            }
            Array::U8(v) => {
                data.extend_from_slice(v);
                "u8"
            }
            Array::U32(v) => {
                v.iter().for_each(|x| data.extend_from_slice(&x.to_le_bytes()));
                "u32"
            }
        };
        records.push(ArrayRecord { name: name.into(), dtype: dtype.into(), shape, offset });
    }
    let header =
        Header { format: "DCR-DATA-1".into(), kind: ds.kind().into(), key: key.clone(), meta, arrays: records };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(DATA_MAGIC.len() + 4 + json.len() + data.len());
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

struct Reader<'a> {
    header: Header,
    data: &'a [u8],
}

impl Reader<'_> {
    fn raw(&self, name: &str, dtype: &str, width: usize) -> Result<(&[u8], &[usize])> {
        let rec = self
            .header
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| DataError::Cache(format!("array '{name}' missing")))?;
        if rec.dtype != dtype {
            return Err(DataError::Cache(format!("array '{name}' has dtype {}", rec.dtype)));
        }
        let len = rec.shape.iter().product::<usize>() * width;
        let bytes = self
            .data
            .get(rec.offset..rec.offset + len)
            .ok_or_else(|| DataError::Cache(format!("array '{name}' runs past the end")))?;
        Ok((bytes, &rec.shape))
    }

    fn images(&self) -> Result<(usize, Vec<f32>)> {
        let (b, shape) = self.raw("images", "f32", 4)?;
        if shape.len() != 4 || shape[2] * shape[3] != PLANE {
            return Err(DataError::Cache(format!("image shape {shape:?}")));
        }
        let channels = shape[1];
        Ok((channels, b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()))
    }

    fn u8s(&self, name: &str) -> Result<Vec<u8>> {
        Ok(self.raw(name, "u8", 1)?.0.to_vec())
    }

    fn u32s(&self, name: &str) -> Result<Vec<u32>> {
        Ok(self.raw(name, "u32", 4)?.0.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn meta<T: serde::de::DeserializeOwned>(&self, field: &str) -> Result<T> {
        serde_json::from_value(self.header.meta.get(field).cloned().unwrap_or(Value::Null))
            .map_err(|e| DataError::Cache(format!("meta field '{field}': {e}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(CacheKey, Dataset)> {
    let rest = bytes.strip_prefix(DATA_MAGIC).ok_or_else(|| DataError::Cache("missing DCR-DATA-1 magic".into()))?;
    let len = rest.get(..4).ok_or_else(|| DataError::Cache("truncated header length".into()))?;
    let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
    let json = rest.get(4..4 + len).ok_or_else(|| DataError::Cache("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| DataError::Cache(e.to_string()))?;
    let r = Reader { header, data: &rest[4 + len..] };
    let (channels, images) = r.images()?;
    let ds = match r.header.kind.as_str() {
        "labeled" => Dataset::Labeled(LabeledImageSet {
            channels,
            images,
            labels: r.u8s("labels")?,
            num_classes: r.meta("num_classes")?,
            split: r.meta::<Split>("split")?,
            seed: r.meta("seed")?,
        }),
        "concept" => Dataset::Concept(ConceptDataset {
            channels,
            images,
            concept_labels: r.u8s("concept_labels")?,
            source: r.meta::<ConceptSource>("source")?,
            origin: r.u32s("origin")?,
            angle_index: r.u8s("angle_index")?,
            disjoint_from_eval: r.meta("disjoint_from_eval")?,
        }),
        "grouped" => Dataset::Grouped(GroupedDataset {
            channels,
            images,
            labels: r.u8s("labels")?,
            attributes: r.u8s("attributes")?,
            num_classes: r.meta("num_classes")?,
            split: r.meta::<Split>("split")?,
        }),
        other => return Err(DataError::Cache(format!("unknown dataset kind '{other}'"))),
    };
    Ok((r.header.key, ds))
}

#[derive(Clone, Debug)]
pub struct DatasetCache {
    dir: PathBuf,
}

impl DatasetCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        DatasetCache { dir: dir.into() }
    }

    /// `$DCR_CACHE` (relative to `workdir` when relative), else `<workdir>/cache`.
    pub fn resolve(workdir: &Path) -> Self {
        match std::env::var_os(CACHE_ENV) {
            Some(p) => DatasetCache::new(workdir.join(p)),
            None => DatasetCache::new(workdir.join("cache")),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}-{}.dcrds", key.generator, &key.digest()[..16]))
    }

    pub fn load(&self, key: &CacheKey) -> Result<Option<Dataset>> {
        let path = self.path_for(key);
        if !path.is_file() {
            return Ok(None);
        }
        let (stored, ds) = decode(&fs::read(&path)?)?;
        if &stored != key {
            return Err(DataError::Cache(format!("{} holds a different dataset", path.display())));
        }
        Ok(Some(ds))
    }

    /// Writes through a temporary file and an atomic rename.
    pub fn store(&self, key: &CacheKey, ds: &Dataset) -> Result<PathBuf> {
        fs::create_dir_all(&self.dir)?;
        let path = self.path_for(key);
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&encode(key, ds))?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn entries(&self) -> Result<Vec<PathBuf>> {
        if !self.dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut out: Vec<PathBuf> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "dcrds"))
            .collect();
        out.sort();
        Ok(out)
    }
}
