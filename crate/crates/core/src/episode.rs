//! Episode data model and the on-disk episode bundle.
//!
//! A bundle is a directory holding `manifest.json` and one raw little-endian
//! payload per array:
//!
//! | file               | dtype | shape                        |
//! |--------------------|-------|------------------------------|
//! | `support_cv.bin`   | f32   | `[n_support, k, j, c]`       |
//! | `support_full.bin` | f32   | `[n_support, k, j, c]`       |
//! | `query.bin`        | f32   | `[n_query, k, j, c]`         |
//! | `support_labels.bin` | u32 | `[n_support]`                |
//! | `query_labels.bin` | u32   | `[n_query]`                  |
//! | `folds.bin`        | u8    | `[n_support]`, 255 = removed |
//!
//! All payloads are row-major. Writing is byte-for-byte deterministic.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cv::REMOVED;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Dense `(instance, extractor, snapshot, class)` logit array.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitTensor {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl LogitTensor {
    /// Wraps `data` laid out row-major over `(n, k, j, c)`. Every dimension
    /// must be at least 1 and every value finite.
    pub fn new(n: usize, k: usize, j: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if n == 0 || k == 0 || j == 0 || c == 0 {
            return Err(Error::Shape(format!(
                "logit tensor dims must be >= 1, got {n}x{k}x{j}x{c}"
            )));
        }
        let expected = n * k * j * c;
        if data.len() != expected {
            return Err(Error::DimMismatch {
                what: "logit tensor".into(),
                expected,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "logit tensor".into(),
                index,
            });
        }
        Ok(Self {
            dims: [n, k, j, c],
            data,
        })
    }

    pub fn zeros(n: usize, k: usize, j: usize, c: usize) -> Result<Self> {
        Self::new(n, k, j, c, vec![0.0; n * k * j * c])
    }

    pub fn n_instances(&self) -> usize {
        self.dims[0]
    }

    pub fn n_extractors(&self) -> usize {
        self.dims[1]
    }

    pub fn n_snapshots(&self) -> usize {
        self.dims[2]
    }

    pub fn n_classes(&self) -> usize {
        self.dims[3]
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn offset(&self, n: usize, k: usize, j: usize, c: usize) -> usize {
        let [_, kk, jj, cc] = self.dims;
        ((n * kk + k) * jj + j) * cc + c
    }

    #[inline]
    pub fn get(&self, n: usize, k: usize, j: usize, c: usize) -> f32 {
        self.data[self.offset(n, k, j, c)]
    }

    /// Overwrites one entry. Panics on non-finite input.
    pub fn set(&mut self, n: usize, k: usize, j: usize, c: usize, value: f32) {
        assert!(value.is_finite(), "logits must be finite");
        let at = self.offset(n, k, j, c);
        self.data[at] = value;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// The `K x J x C` block of one instance.
    pub fn instance(&self, n: usize) -> &[f32] {
        let stride = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn select_instances(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.instance(0).len());
        for &n in indices {
            if n >= self.dims[0] {
                return Err(Error::Shape(format!(
                    "instance {n} out of range {}",
                    self.dims[0]
                )));
            }
            data.extend_from_slice(self.instance(n));
        }
        let [_, k, j, c] = self.dims;
        Self::new(indices.len(), k, j, c, data)
    }

    /// Keeps the listed snapshot indices, in the given order.
    pub fn select_snapshots(&self, snapshots: &[usize]) -> Result<Self> {
        let [n, k, j, c] = self.dims;
        if let Some(&bad) = snapshots.iter().find(|&&s| s >= j) {
            return Err(Error::Shape(format!("snapshot {bad} out of range {j}")));
        }
        let mut data = Vec::with_capacity(n * k * snapshots.len() * c);
        for ni in 0..n {
            for ki in 0..k {
                for &ji in snapshots {
                    let at = self.offset(ni, ki, ji, 0);
                    data.extend_from_slice(&self.data[at..at + c]);
                }
            }
        }
        Self::new(n, k, snapshots.len(), c, data)
    }

    /// Keeps the listed class columns, in the given order.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Self> {
        let [n, k, j, c] = self.dims;
        if let Some(&bad) = classes.iter().find(|&&x| x >= c) {
            return Err(Error::Shape(format!("class {bad} out of range {c}")));
        }
        let mut data = Vec::with_capacity(n * k * j * classes.len());
        for row in self.data.chunks_exact(c) {
            data.extend(classes.iter().map(|&ci| row[ci]));
        }
        Self::new(n, k, j, classes.len(), data)
    }
}

/// One few-shot episode expressed entirely in logit space.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBundle {
    /// Support logits from snapshots fine-tuned on the opposite fold.
    pub support_cv_logits: LogitTensor,
    /// Support logits from snapshots fine-tuned on the whole support set.
    pub support_full_logits: LogitTensor,
    pub query_logits: LogitTensor,
    pub support_labels: Vec<u32>,
    pub query_labels: Vec<u32>,
    /// Fold index per support instance: 0, 1, or [`REMOVED`].
    pub fold_assignment: Vec<u8>,
    pub class_names: Vec<String>,
    pub domain_name: String,
    pub episode_id: String,
    pub seed: u64,
}

impl EpisodeBundle {
    pub fn n_support(&self) -> usize {
        self.support_labels.len()
    }

    pub fn n_query(&self) -> usize {
        self.query_labels.len()
    }

    pub fn n_extractors(&self) -> usize {
        self.query_logits.n_extractors()
    }

    pub fn n_snapshots(&self) -> usize {
        self.query_logits.n_snapshots()
    }

    pub fn n_classes(&self) -> usize {
        self.query_logits.n_classes()
    }

    /// Support instance count per class, indexed by class.
    pub fn shots(&self) -> Vec<usize> {
        class_counts(&self.support_labels, self.class_names.len())
    }

    /// Checks every structural invariant of the bundle.
    pub fn validate(&self) -> Result<()> {
        let [ns, k, j, c] = self.support_cv_logits.dims();
        let full = self.support_full_logits.dims();
        let query = self.query_logits.dims();
        if full != [ns, k, j, c] {
            return Err(Error::Shape(format!(
                "support_full dims {full:?} differ from support_cv dims {:?}",
                [ns, k, j, c]
            )));
        }
        if query[1..] != [k, j, c] {
            return Err(Error::Shape(format!(
                "query (k, j, c) = {:?} differs from support {:?}",
                &query[1..],
                [k, j, c]
            )));
        }
        check_len("support_labels", ns, self.support_labels.len())?;
        check_len("query_labels", query[0], self.query_labels.len())?;
        check_len("fold_assignment", ns, self.fold_assignment.len())?;
        check_len("class_names", c, self.class_names.len())?;
        check_labels("support_labels", &self.support_labels, c)?;
        check_labels("query_labels", &self.query_labels, c)?;

        let shots = class_counts(&self.support_labels, c);
        for (index, &fold) in self.fold_assignment.iter().enumerate() {
            match fold {
                0 | 1 => {}
                REMOVED => {
                    let class = self.support_labels[index];
                    let count = shots[class as usize];
                    if count != 1 {
                        return Err(Error::RemovedNotSingleton {
                            index,
                            class,
                            count,
                        });
                    }
                }
                value => return Err(Error::FoldMarker { index, value }),
            }
        }

        let per_class = class_counts(&self.query_labels, c);
        let expected = per_class[0];
        if let Some((class, &count)) = per_class.iter().enumerate().find(|(_, &n)| n != expected)
        {
            return Err(Error::QueryNotStratified {
                class,
                count,
                expected,
            });
        }
        Ok(())
    }
}

fn check_len(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimMismatch {
            what: what.into(),
            expected,
            found,
        });
    }
    Ok(())
}

fn check_labels(what: &str, labels: &[u32], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l as usize >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange {
            what: what.into(),
            label,
            classes,
        }),
        None => Ok(()),
    }
}

pub(crate) fn class_counts(labels: &[u32], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for &l in labels {
        if let Some(slot) = counts.get_mut(l as usize) {
            *slot += 1;
        }
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_support: usize,
    pub n_query: usize,
    pub k: usize,
    pub j: usize,
    pub c: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset of the payload inside `path`.
    pub offset: u64,
    pub bytes: u64,
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub schema_version: u32,
    pub domain: String,
    pub episode_id: String,
    pub seed: u64,
    pub dims: Dims,
    pub shots: Vec<usize>,
    pub class_names: Vec<String>,
    pub files: BTreeMap<String, FileEntry>,
}

#[derive(Clone, Copy)]
enum Dtype {
    F32,
    U32,
    U8,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U32 => "u32",
            Dtype::U8 => "u8",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::U8 => 1,
        }
    }
}

const PAYLOADS: [(&str, &str, Dtype); 6] = [
    ("support_cv", "support_cv.bin", Dtype::F32),
    ("support_full", "support_full.bin", Dtype::F32),
    ("query", "query.bin", Dtype::F32),
    ("support_labels", "support_labels.bin", Dtype::U32),
    ("query_labels", "query_labels.bin", Dtype::U32),
    ("folds", "folds.bin", Dtype::U8),
];

fn payload_shape(name: &str, dims: &Dims) -> Vec<usize> {
    match name {
        "support_cv" | "support_full" => vec![dims.n_support, dims.k, dims.j, dims.c],
        "query" => vec![dims.n_query, dims.k, dims.j, dims.c],
        "query_labels" => vec![dims.n_query],
        _ => vec![dims.n_support],
    }
}

impl BundleManifest {
    pub fn for_bundle(bundle: &EpisodeBundle) -> Self {
        let [n_support, k, j, c] = bundle.support_cv_logits.dims();
        let dims = Dims {
            n_support,
            n_query: bundle.n_query(),
            k,
            j,
            c,
        };
        let files = PAYLOADS
            .iter()
            .map(|&(name, path, dtype)| {
                let shape = payload_shape(name, &dims);
                let bytes = (shape.iter().product::<usize>() * dtype.size()) as u64;
                let entry = FileEntry {
                    path: path.to_string(),
                    dtype: dtype.name().to_string(),
                    shape,
                    offset: 0,
                    bytes,
                };
                (name.to_string(), entry)
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            domain: bundle.domain_name.clone(),
            episode_id: bundle.episode_id.clone(),
            seed: bundle.seed,
            dims,
            shots: bundle.shots(),
            class_names: bundle.class_names.clone(),
            files,
        }
    }
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn u32_bytes(values: &[u32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `bundle` into directory `dir`, creating it if needed.
pub fn save_episode(bundle: &EpisodeBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = BundleManifest::for_bundle(bundle);
    let payloads: [(&str, Vec<u8>); 6] = [
        ("support_cv", f32_bytes(bundle.support_cv_logits.as_slice())),
        ("support_full", f32_bytes(bundle.support_full_logits.as_slice())),
        ("query", f32_bytes(bundle.query_logits.as_slice())),
        ("support_labels", u32_bytes(&bundle.support_labels)),
        ("query_labels", u32_bytes(&bundle.query_labels)),
        ("folds", bundle.fold_assignment.clone()),
    ];
    for (name, bytes) in payloads {
        let path = dir.join(&manifest.files[name].path);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn read_payload(dir: &Path, manifest: &BundleManifest, name: &str, dtype: Dtype) -> Result<Vec<u8>> {
    let entry = manifest
        .files
        .get(name)
        .ok_or_else(|| Error::MissingFile(dir.join(format!("<{name} entry in manifest>"))))?;
    if entry.dtype != dtype.name() {
        return Err(Error::Shape(format!(
            "{name}: dtype {} (expected {})",
            entry.dtype,
            dtype.name()
        )));
    }
    let shape = payload_shape(name, &manifest.dims);
    if entry.shape != shape {
        return Err(Error::Shape(format!(
            "{name}: manifest shape {:?} disagrees with dims {:?}",
            entry.shape, shape
        )));
    }
    let path = dir.join(&entry.path);
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let start = entry.offset as usize;
    let expected = shape.iter().product::<usize>() * dtype.size();
    let available = raw.len().saturating_sub(start);
    if available != expected || entry.bytes as usize != expected {
        return Err(Error::DimMismatch {
            what: format!("{name} payload bytes"),
            expected,
            found: available,
        });
    }
    Ok(raw[start..].to_vec())
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

fn decode_u32(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

fn decode_tensor(name: &str, bytes: &[u8], shape: &[usize]) -> Result<LogitTensor> {
    let data = decode_f32(bytes);
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: name.into(),
            index,
        });
    }
    LogitTensor::new(shape[0], shape[1], shape[2], shape[3], data)
}

/// Reads and validates a bundle directory.
pub fn load_episode(dir: &Path) -> Result<EpisodeBundle> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    // Check the version before the full schema so newer layouts get a precise error.
    let probe: serde_json::Value = serde_json::from_str(&text)?;
    let version = probe
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion(version));
    }
    let manifest: BundleManifest = serde_json::from_value(probe)?;

    let mut tensors = Vec::with_capacity(3);
    for name in ["support_cv", "support_full", "query"] {
        let bytes = read_payload(dir, &manifest, name, Dtype::F32)?;
        tensors.push(decode_tensor(name, &bytes, &payload_shape(name, &manifest.dims))?);
    }
    let query_logits = tensors.pop().unwrap();
    let support_full_logits = tensors.pop().unwrap();
    let support_cv_logits = tensors.pop().unwrap();
    let support_labels = decode_u32(&read_payload(dir, &manifest, "support_labels", Dtype::U32)?);
    let query_labels = decode_u32(&read_payload(dir, &manifest, "query_labels", Dtype::U32)?);
    let fold_assignment = read_payload(dir, &manifest, "folds", Dtype::U8)?;

    let bundle = EpisodeBundle {
        support_cv_logits,
        support_full_logits,
        query_logits,
        support_labels,
        query_labels,
        fold_assignment,
        class_names: manifest.class_names.clone(),
        domain_name: manifest.domain.clone(),
        episode_id: manifest.episode_id.clone(),
        seed: manifest.seed,
    };
    bundle.validate()?;
    let shots = bundle.shots();
    if shots != manifest.shots {
        return Err(Error::Shape(format!(
            "manifest shots {:?} disagree with support labels {:?}",
            manifest.shots, shots
        )));
    }
    Ok(bundle)
}
