//! Weight bundles: a directory holding `manifest.json` plus one raw file per
//! tensor.
//!
//! The manifest is a JSON array of `{name, shape, bits, scale, file, encoding}`.
//! `int-le` files store each element as little-endian two's complement in the
//! smallest byte width holding `bits`. `packed-bipolar` files are the packed
//! word stream of [`PackedBitTensor`] as little-endian `u64`s.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::BundleError;
use crate::graph::DataflowGraph;
use crate::qtensor::{PackedBitTensor, QScale, QTensor};

pub const MANIFEST: &str = "manifest.json";

/// A layer weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Weight {
    /// ±1 weights, one bit each.
    Bipolar { tensor: PackedBitTensor, scale: f64 },
    Int(QTensor),
}

impl Weight {
    pub fn shape(&self) -> &[usize] {
        match self {
            Weight::Bipolar { tensor, .. } => tensor.shape(),
            Weight::Int(q) => q.shape(),
        }
    }

    pub fn bits(&self) -> u8 {
        match self {
            Weight::Bipolar { .. } => 1,
            Weight::Int(q) => q.bits(),
        }
    }

    /// Integer values in logical order (±1 for bipolar).
    pub fn to_i32(&self) -> Vec<i32> {
        match self {
            Weight::Bipolar { tensor, .. } => tensor.to_signs(),
            Weight::Int(q) => q.data().to_vec(),
        }
    }

    pub fn scale(&self) -> QScale {
        match self {
            Weight::Bipolar { scale, .. } => QScale::PerTensor(*scale),
            Weight::Int(q) => q.scale().clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Encoding {
    #[serde(rename = "packed-bipolar")]
    PackedBipolar,
    #[serde(rename = "int-le")]
    IntLe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub bits: u8,
    pub scale: QScale,
    pub file: String,
    pub encoding: Encoding,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BundleError + '_ {
    move |source| BundleError::Io { path: path.to_path_buf(), source }
}

fn file_name(name: &str) -> String {
    let clean: String =
        name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect();
    format!("{clean}.bin")
}

fn byte_width(bits: u8) -> usize {
    match bits {
        0..=8 => 1,
        9..=16 => 2,
        _ => 4,
    }
}

fn encode(w: &Weight) -> (Encoding, Vec<u8>) {
    match w {
        Weight::Bipolar { tensor, .. } => {
            (Encoding::PackedBipolar, tensor.words().iter().flat_map(|w| w.to_le_bytes()).collect())
        }
        Weight::Int(q) => {
            let width = byte_width(q.bits());
            let bytes = q.data().iter().flat_map(|v| v.to_le_bytes().into_iter().take(width)).collect();
            (Encoding::IntLe, bytes)
        }
    }
}

fn decode(entry: &ManifestEntry, bytes: &[u8]) -> Result<Weight, BundleError> {
    let malformed = |why: String| BundleError::Malformed(format!("{}: {why}", entry.name));
    match entry.encoding {
        Encoding::PackedBipolar => {
            if bytes.len() % 8 != 0 {
                return Err(malformed(format!("{} bytes is not a whole number of words", bytes.len())));
            }
            let words = bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
            let tensor = PackedBitTensor::from_words(entry.shape.clone(), words)?;
            let scale = match entry.scale {
                QScale::PerTensor(s) => s,
                QScale::PerChannel(_) => return Err(malformed("bipolar tensors take a per-tensor scale".into())),
            };
            Ok(Weight::Bipolar { tensor, scale })
        }
        Encoding::IntLe => {
            let width = byte_width(entry.bits);
            let n: usize = entry.shape.iter().product();
            if bytes.len() != n * width {
                return Err(malformed(format!("{} bytes, expected {}", bytes.len(), n * width)));
            }
            let data = bytes
                .chunks_exact(width)
                .map(|c| match width {
                    1 => i32::from(c[0] as i8),
                    2 => i32::from(i16::from_le_bytes([c[0], c[1]])),
                    _ => i32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                })
                .collect();
            Ok(Weight::Int(QTensor::new(entry.shape.clone(), data, entry.bits, entry.scale.clone())?))
        }
    }
}

/// Writes every tensor plus the manifest into `dir` (created if missing).
pub fn save_bundle(weights: &BTreeMap<String, Weight>, dir: &Path) -> Result<(), BundleError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = Vec::with_capacity(weights.len());
    for (name, w) in weights {
        let (encoding, bytes) = encode(w);
        let file = file_name(name);
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: w.shape().to_vec(),
            bits: w.bits(),
            scale: w.scale(),
            file,
            encoding,
        });
    }
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    text.push(b'\n');
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, BundleError> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&text).map_err(|e| BundleError::Malformed(format!("{}: {e}", path.display())))
}

pub fn load_bundle(dir: &Path) -> Result<BTreeMap<String, Weight>, BundleError> {
    let mut out = BTreeMap::new();
    for entry in read_manifest(dir)? {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let w = decode(&entry, &bytes)?;
        out.insert(entry.name.clone(), w);
    }
    Ok(out)
}

pub fn save_weights(g: &DataflowGraph, dir: &Path) -> Result<(), BundleError> {
    save_bundle(g.weights(), dir)
}

/// Attaches the bundle in `dir` to `g`, checking every tensor the graph
/// references against the manifest.
pub fn load_weights(g: &DataflowGraph, dir: &Path) -> Result<DataflowGraph, BundleError> {
    let entries = read_manifest(dir)?;
    let by_name: BTreeMap<&str, &ManifestEntry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut referenced = std::collections::BTreeSet::new();
    for node in g.nodes() {
        let Some((name, bits)) = node.op.weight_ref() else { continue };
        referenced.insert(name.to_string());
        let expected_shape = crate::graph::weight_shape(&node.op).unwrap_or_default();
        let Some(entry) = by_name.get(name) else {
            return Err(BundleError::ManifestMismatch {
                tensor: name.to_string(),
                expected: format!("shape {expected_shape:?}, {bits} bits"),
                found: "missing".into(),
            });
        };
        if entry.shape != expected_shape {
            return Err(BundleError::ManifestMismatch {
                tensor: name.to_string(),
                expected: format!("shape {expected_shape:?}"),
                found: format!("shape {:?}", entry.shape),
            });
        }
        if entry.bits != bits {
            return Err(BundleError::ManifestMismatch {
                tensor: name.to_string(),
                expected: format!("{bits} bits"),
                found: format!("{} bits", entry.bits),
            });
        }
    }
    if let Some(extra) = entries.iter().find(|e| !referenced.contains(&e.name)) {
        return Err(BundleError::ManifestMismatch {
            tensor: extra.name.clone(),
            expected: "no such tensor in graph".into(),
            found: format!("shape {:?}", extra.shape),
        });
    }
    let weights = load_bundle(dir)?;
    Ok(g.clone().with_weights(weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qtensor::{pack_bipolar, FTensor};

    fn sample() -> BTreeMap<String, Weight> {
        let mut m = BTreeMap::new();
        let t = FTensor::new(vec![2, 70], (0..140).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect()).unwrap();
        m.insert("a.w".into(), Weight::Bipolar { tensor: pack_bipolar(&t).unwrap(), scale: 1.0 });
        m.insert(
            "b.w".into(),
            Weight::Int(QTensor::new(vec![3], vec![-8, 0, 7], 4, QScale::PerTensor(0.125)).unwrap()),
        );
        m.insert(
            "c.w".into(),
            Weight::Int(QTensor::new(vec![2, 1], vec![-300, 299], 16, QScale::PerChannel(vec![0.5, 0.25])).unwrap()),
        );
        m
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = sample();
        save_bundle(&w, dir.path()).unwrap();
        assert_eq!(load_bundle(dir.path()).unwrap(), w);
        let manifest = read_manifest(dir.path()).unwrap();
        assert_eq!(manifest[0].encoding, Encoding::PackedBipolar);
        // 2 rows × 2 words × 8 bytes
        assert_eq!(fs::metadata(dir.path().join(&manifest[0].file)).unwrap().len(), 32);
        // 4-bit ints take one byte each
        assert_eq!(fs::metadata(dir.path().join(&manifest[1].file)).unwrap().len(), 3);
        assert_eq!(fs::metadata(dir.path().join(&manifest[2].file)).unwrap().len(), 4);
    }

    #[test]
    fn int_le_bytes_are_twos_complement() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = BTreeMap::new();
        m.insert("x".into(), Weight::Int(QTensor::new(vec![2], vec![-1, 3], 4, QScale::PerTensor(1.0)).unwrap()));
        save_bundle(&m, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("x.bin")).unwrap(), vec![0xff, 0x03]);
    }
}
