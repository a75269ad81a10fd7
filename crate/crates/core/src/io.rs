//! On-disk formats.
//!
//! **Model directory**: `model.json` (layer list, tensor offset table,
//! format version, blob length and CRC-32) next to `weights.bin`, a flat
//! little-endian `f32` blob.
//!
//! **Dataset file**: fixed little-endian header
//! `magic "GGDS" | major u16 | minor u16 | split u8 | 3 pad bytes |
//! N u64 | H u64 | W u64 | C u64 | classes u32`, then `N*H*W*C` `f32`
//! pixels, `N` `i32` labels and a trailing CRC-32 of everything before it.
//!
//! **Zoo records** are JSON; see [`ZooRecord`].

use crate::data::{DataError, Dataset, Split};
use crate::model::{Conv2d, Dense, Layer, LayerKind, ModelError, ModelSpec, Padding};
use crate::tensor::{element_count, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MODEL_FORMAT: &str = "gengap-model";
pub const FORMAT_MAJOR: u32 = 1;
pub const FORMAT_MINOR: u32 = 0;
pub const MANIFEST_FILE: &str = "model.json";
pub const BLOB_FILE: &str = "weights.bin";
const DATASET_MAGIC: &[u8; 4] = b"GGDS";
const DATASET_HEADER: usize = 4 + 2 + 2 + 4 + 8 * 4 + 4;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed json at {field}: {message}")]
    Json {
        path: PathBuf,
        field: String,
        message: String,
    },
    #[error("not a {expected} file (found {found:?})")]
    Magic { expected: &'static str, found: String },
    #[error("unsupported format version {found} (reader supports major {FORMAT_MAJOR})")]
    UnsupportedVersion { found: String },
    #[error("checksum mismatch: manifest {expected:08x}, data {actual:08x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("length mismatch: expected {expected} bytes, found {actual}")]
    Length { expected: u64, actual: u64 },
    #[error("layer {index}: unknown layer kind {kind:?}")]
    UnknownLayerKind { index: usize, kind: String },
    #[error("extent overflow in {field}")]
    ExtentOverflow { field: String },
    #[error("manifest field `{field}`: {reason}")]
    Structural { field: String, reason: String },
    #[error("invalid model: {0}")]
    Model(#[from] ModelError),
    #[error("invalid dataset: {0}")]
    Data(#[from] DataError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Parses JSON, reporting the failing field path.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_json(path, &text)
}

pub fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T, FormatError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| FormatError::Json {
        path: path.to_path_buf(),
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

fn check_version(version: &str) -> Result<(), FormatError> {
    let major = version.split('.').next().and_then(|m| m.parse::<u32>().ok());
    match major {
        Some(FORMAT_MAJOR) => Ok(()),
        _ => Err(FormatError::UnsupportedVersion {
            found: version.to_string(),
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: String,
    pub input_shape: Vec<u64>,
    pub classes: u64,
    pub layer_count: u64,
    pub layers: Vec<LayerEntry>,
    pub tensors: Vec<TensorEntry>,
    pub blob: BlobEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<Padding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f32>,
    /// Index into `tensors`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<u64>,
    /// Offset into the blob, in `f32` elements.
    pub offset: u64,
    /// Element count.
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub bytes: u64,
    pub crc32: u32,
}

/// Builds the manifest and blob bytes for `model`.
pub fn encode_model(model: &ModelSpec) -> (ModelManifest, Vec<u8>) {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let mut push = |name: String, t: &Tensor, blob: &mut Vec<u8>| {
        let offset = (blob.len() / 4) as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().iter().map(|&d| d as u64).collect(),
            offset,
            length: t.len() as u64,
        });
        (tensors.len() - 1) as u64
    };
    let mut layers = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        let mut e = LayerEntry {
            kind: layer.kind().name().to_string(),
            stride: None,
            padding: None,
            window: None,
            rate: None,
            weight: None,
            bias: None,
        };
        match layer {
            Layer::Conv2d(c) => {
                e.stride = Some(c.stride as u64);
                e.padding = Some(c.padding);
                e.weight = Some(push(format!("layers.{}.kernel", i + 1), &c.kernel, &mut blob));
                e.bias = Some(push(format!("layers.{}.bias", i + 1), &c.bias, &mut blob));
            }
            Layer::Dense(d) => {
                e.weight = Some(push(format!("layers.{}.weight", i + 1), &d.weight, &mut blob));
                e.bias = Some(push(format!("layers.{}.bias", i + 1), &d.bias, &mut blob));
            }
            Layer::MaxPool { window, stride } => {
                e.window = Some(*window as u64);
                e.stride = Some(*stride as u64);
            }
            Layer::Dropout { rate } => e.rate = Some(*rate),
            Layer::Relu | Layer::GlobalAvgPool | Layer::Flatten | Layer::Softmax => {}
        }
        layers.push(e);
    }
    let manifest = ModelManifest {
        format: MODEL_FORMAT.to_string(),
        version: format!("{FORMAT_MAJOR}.{FORMAT_MINOR}"),
        input_shape: model.input_shape().iter().map(|&d| d as u64).collect(),
        classes: model.classes() as u64,
        layer_count: layers.len() as u64,
        layers,
        tensors,
        blob: BlobEntry {
            file: BLOB_FILE.to_string(),
            bytes: blob.len() as u64,
            crc32: crc32fast::hash(&blob),
        },
    };
    (manifest, blob)
}

fn to_usize(v: u64, field: &str) -> Result<usize, FormatError> {
    usize::try_from(v).map_err(|_| FormatError::ExtentOverflow {
        field: field.to_string(),
    })
}

/// Rebuilds a model from a manifest and its blob. Nothing is returned
/// unless every structural and integrity check passes.
pub fn decode_model(manifest: &ModelManifest, blob: &[u8]) -> Result<ModelSpec, FormatError> {
    if manifest.format != MODEL_FORMAT {
        return Err(FormatError::Magic {
            expected: MODEL_FORMAT,
            found: manifest.format.clone(),
        });
    }
    check_version(&manifest.version)?;
    if blob.len() as u64 != manifest.blob.bytes {
        return Err(FormatError::Length {
            expected: manifest.blob.bytes,
            actual: blob.len() as u64,
        });
    }
    let crc = crc32fast::hash(blob);
    if crc != manifest.blob.crc32 {
        return Err(FormatError::Checksum {
            expected: manifest.blob.crc32,
            actual: crc,
        });
    }
    if manifest.layer_count != manifest.layers.len() as u64 {
        return Err(FormatError::Structural {
            field: "layer_count".into(),
            reason: format!(
                "declares {} layers but `layers` lists {}",
                manifest.layer_count,
                manifest.layers.len()
            ),
        });
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for (t, e) in manifest.tensors.iter().enumerate() {
        let field = format!("tensors[{t}]");
        let shape = e
            .shape
            .iter()
            .map(|&d| to_usize(d, &field))
            .collect::<Result<Vec<_>, _>>()?;
        let count = element_count(&shape).ok_or_else(|| FormatError::ExtentOverflow { field: field.clone() })?;
        if count as u64 != e.length {
            return Err(FormatError::Structural {
                field: format!("{field}.length"),
                reason: format!("shape {:?} holds {count} elements, length says {}", e.shape, e.length),
            });
        }
        let end = e
            .offset
            .checked_add(e.length)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| FormatError::ExtentOverflow { field: field.clone() })?;
        if end > blob.len() as u64 {
            return Err(FormatError::Structural {
                field: format!("{field}.offset"),
                reason: format!("range ends at byte {end}, blob has {}", blob.len()),
            });
        }
        let start = e.offset as usize * 4;
        let data = blob[start..end as usize]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(Some(Tensor::new(shape, data).expect("length checked")));
    }
    let mut take = |idx: Option<u64>, field: String| -> Result<Tensor, FormatError> {
        let i = idx.ok_or_else(|| FormatError::Structural {
            field: field.clone(),
            reason: "missing tensor reference".into(),
        })?;
        tensors
            .get_mut(i as usize)
            .and_then(Option::take)
            .ok_or_else(|| FormatError::Structural {
                field,
                reason: format!("tensor {i} missing or referenced twice"),
            })
    };
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, e) in manifest.layers.iter().enumerate() {
        let kind = LayerKind::parse(&e.kind).ok_or_else(|| FormatError::UnknownLayerKind {
            index: i + 1,
            kind: e.kind.clone(),
        })?;
        let need = |v: Option<u64>, name: &str| -> Result<usize, FormatError> {
            let field = format!("layers[{i}].{name}");
            to_usize(
                v.ok_or_else(|| FormatError::Structural {
                    field: field.clone(),
                    reason: "required".into(),
                })?,
                &field,
            )
        };
        let layer = match kind {
            LayerKind::Conv2d => Layer::Conv2d(Conv2d {
                stride: need(e.stride, "stride")?,
                padding: e.padding.ok_or_else(|| FormatError::Structural {
                    field: format!("layers[{i}].padding"),
                    reason: "required".into(),
                })?,
                kernel: take(e.weight, format!("layers[{i}].weight"))?,
                bias: take(e.bias, format!("layers[{i}].bias"))?,
            }),
            LayerKind::Dense => Layer::Dense(Dense {
                weight: take(e.weight, format!("layers[{i}].weight"))?,
                bias: take(e.bias, format!("layers[{i}].bias"))?,
            }),
            LayerKind::MaxPool => Layer::MaxPool {
                window: need(e.window, "window")?,
                stride: need(e.stride, "stride")?,
            },
            LayerKind::Dropout => Layer::Dropout {
                rate: e.rate.ok_or_else(|| FormatError::Structural {
                    field: format!("layers[{i}].rate"),
                    reason: "required".into(),
                })?,
            },
            LayerKind::Relu => Layer::Relu,
            LayerKind::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerKind::Flatten => Layer::Flatten,
            LayerKind::Softmax => Layer::Softmax,
        };
        layers.push(layer);
    }
    if let Some(t) = tensors.iter().position(Option::is_some) {
        return Err(FormatError::Structural {
            field: "tensors".into(),
            reason: format!("tensor {t} is not referenced by any layer"),
        });
    }
    let input_shape = manifest
        .input_shape
        .iter()
        .map(|&d| to_usize(d, "input_shape"))
        .collect::<Result<Vec<_>, _>>()?;
    if element_count(&input_shape).is_none() {
        return Err(FormatError::ExtentOverflow {
            field: "input_shape".into(),
        });
    }
    Ok(ModelSpec::new(
        input_shape,
        to_usize(manifest.classes, "classes")?,
        layers,
    )?)
}

/// Writes `model.json` and `weights.bin` into `dir` (created if needed).
pub fn save_model(dir: &Path, model: &ModelSpec) -> Result<(), FormatError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (manifest, blob) = encode_model(model);
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn load_model(dir: &Path) -> Result<ModelSpec, FormatError> {
    let manifest: ModelManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.blob.file.contains(['/', '\\']) || manifest.blob.file.starts_with('.') {
        return Err(FormatError::Structural {
            field: "blob.file".into(),
            reason: "must be a plain file name".into(),
        });
    }
    let blob_path = dir.join(&manifest.blob.file);
    let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    decode_model(&manifest, &blob)
}

/// CRC-32 of the model's weight blob; identifies a model's weights.
pub fn model_checksum(model: &ModelSpec) -> u32 {
    encode_model(model).0.blob.crc32
}

pub fn encode_dataset(data: &Dataset) -> Vec<u8> {
    let shape = data.images().shape();
    let mut out = Vec::with_capacity(DATASET_HEADER + data.images().len() * 4 + data.len() * 4 + 4);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(FORMAT_MAJOR as u16).to_le_bytes());
    out.extend_from_slice(&(FORMAT_MINOR as u16).to_le_bytes());
    out.extend_from_slice(&[data.split().tag(), 0, 0, 0]);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&(data.classes() as u32).to_le_bytes());
    for v in data.images().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in data.labels() {
        out.extend_from_slice(&(l as i32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, FormatError> {
    if bytes.len() < DATASET_HEADER + 4 {
        return Err(FormatError::Length {
            expected: (DATASET_HEADER + 4) as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..4] != DATASET_MAGIC {
        return Err(FormatError::Magic {
            expected: "GGDS dataset",
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let (major, minor) = (u16_at(4), u16_at(6));
    check_version(&format!("{major}.{minor}"))?;
    let split = Split::from_tag(bytes[8]).ok_or_else(|| FormatError::Structural {
        field: "split".into(),
        reason: format!("unknown split tag {}", bytes[8]),
    })?;
    let dims: Vec<u64> = (0..4).map(|i| u64_at(12 + 8 * i)).collect();
    let classes = u32::from_le_bytes(bytes[44..48].try_into().unwrap());
    let overflow = || FormatError::ExtentOverflow { field: "header".into() };
    let shape = dims
        .iter()
        .map(|&d| usize::try_from(d).map_err(|_| overflow()))
        .collect::<Result<Vec<_>, _>>()?;
    let pixels = element_count(&shape).ok_or_else(overflow)?;
    let expected = pixels
        .checked_mul(4)
        .and_then(|p| p.checked_add(shape[0].checked_mul(4)?))
        .and_then(|p| p.checked_add(DATASET_HEADER + 4))
        .ok_or_else(overflow)?;
    if expected != bytes.len() {
        return Err(FormatError::Length {
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let crc = crc32fast::hash(body);
    if crc != stored {
        return Err(FormatError::Checksum {
            expected: stored,
            actual: crc,
        });
    }
    let img_end = DATASET_HEADER + pixels * 4;
    let data = bytes[DATASET_HEADER..img_end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut labels = Vec::with_capacity(shape[0]);
    for (index, b) in bytes[img_end..bytes.len() - 4].chunks_exact(4).enumerate() {
        let l = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if l < 0 {
            return Err(DataError::Label {
                index,
                label: usize::MAX,
                classes: classes as usize,
            }
            .into());
        }
        labels.push(l as usize);
    }
    let images = Tensor::new(shape, data).expect("length checked");
    Ok(Dataset::new(images, labels, classes as usize, split)?)
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<(), FormatError> {
    fs::write(path, encode_dataset(data)).map_err(io_err(path))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, FormatError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_dataset(&bytes)
}

/// One trained model of a zoo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooRecord {
    pub id: String,
    /// Model directory, relative to the zoo root.
    pub model_path: String,
    /// Training set the model was fit on (labels possibly corrupted),
    /// relative to the zoo root.
    pub train_data_path: String,
    /// Hyperparameter axes; the map order is the grouping order.
    pub hyperparameters: BTreeMap<String, f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// `train_accuracy - test_accuracy`.
    pub gap: f64,
    pub seed: u64,
    pub target_accuracy: f64,
    pub saturated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
    pub epochs: usize,
    #[serde(default)]
    pub final_loss: Option<f64>,
    /// Indices of training samples whose labels were corrupted.
    pub corrupted: Vec<usize>,
}

impl ZooRecord {
    pub fn validate(&self) -> Result<(), FormatError> {
        for (field, v) in [
            ("train_accuracy", self.train_accuracy),
            ("test_accuracy", self.test_accuracy),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(FormatError::Structural {
                    field: format!("{}.{field}", self.id),
                    reason: format!("{v} outside [0, 1]"),
                });
            }
        }
        if self.gap != self.train_accuracy - self.test_accuracy {
            return Err(FormatError::Structural {
                field: format!("{}.gap", self.id),
                reason: "gap must equal train_accuracy - test_accuracy".into(),
            });
        }
        Ok(())
    }

    /// Included in scoring by default.
    pub fn usable(&self) -> bool {
        self.saturated && self.flag.is_none()
    }
}
