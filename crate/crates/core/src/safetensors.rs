//! Reader and writer for the safetensors container.
//!
//! Layout: an 8-byte little-endian header length `N`, then `N` bytes of UTF-8
//! JSON mapping tensor names to `{"dtype", "shape", "data_offsets"}` plus an
//! optional `"__metadata__"` string map, then the tightly packed little-endian
//! payloads. Names are written in lexicographic order and payloads follow the
//! same order, so identical inputs give identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use half::bf16;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::tensor::TensorF32;

const METADATA_KEY: &str = "__metadata__";
const MAX_HEADER: u64 = 100 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F32,
    BF16,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::BF16 => "BF16",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::BF16 => 2,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(Dtype::F32),
            "BF16" => Some(Dtype::BF16),
            _ => None,
        }
    }
}

/// A decoded file: tensors widened to `f32`, with the dtype they were stored in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, (Dtype, TensorF32)>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Result<&TensorF32> {
        self.tensors
            .get(name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Like [`get`](Self::get) but rejects anything not stored as `F32`.
    pub fn get_f32(&self, name: &str) -> Result<&TensorF32> {
        match self.tensors.get(name) {
            Some((Dtype::F32, t)) => Ok(t),
            Some((d, _)) => Err(Error::Dtype {
                name: name.to_string(),
                dtype: d.as_str().to_string(),
            }),
            None => Err(Error::MissingTensor(name.to_string())),
        }
    }
}

pub fn serialize(
    tensors: &BTreeMap<String, TensorF32>,
    metadata: &BTreeMap<String, String>,
    dtype: Dtype,
) -> Result<Vec<u8>> {
    let mut header = Map::new();
    if !metadata.is_empty() {
        header.insert(METADATA_KEY.to_string(), json!(metadata));
    }
    let mut offset = 0usize;
    for (name, t) in tensors {
        if name == METADATA_KEY {
            return Err(Error::invalid("tensor name `__metadata__` is reserved"));
        }
        let end = offset + t.len() * dtype.size();
        header.insert(
            name.clone(),
            json!({
                "dtype": dtype.as_str(),
                "shape": t.shape(),
                "data_offsets": [offset, end],
            }),
        );
        offset = end;
    }
    let mut header_bytes = serde_json::to_vec(&Value::Object(header))?;
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in tensors.values() {
        match dtype {
            Dtype::F32 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::BF16 => t
                .data()
                .iter()
                .for_each(|&v| out.extend_from_slice(&bf16::from_f32(v).to_le_bytes())),
        }
    }
    Ok(out)
}

struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

fn parse_entry(name: &str, v: &Value) -> Result<Entry> {
    let bad = |reason: &str| Error::Tensor {
        name: name.to_string(),
        reason: reason.to_string(),
    };
    let obj = v.as_object().ok_or_else(|| bad("entry is not an object"))?;
    let dtype_str = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing dtype"))?;
    let dtype = Dtype::parse(dtype_str).ok_or_else(|| Error::Dtype {
        name: name.to_string(),
        dtype: dtype_str.to_string(),
    })?;
    let as_usizes = |key: &str| -> Result<Vec<usize>> {
        obj.get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| bad(&format!("missing {key}")))?
            .iter()
            .map(|x| {
                x.as_u64()
                    .map(|x| x as usize)
                    .ok_or_else(|| bad(&format!("non-integer in {key}")))
            })
            .collect()
    };
    let shape = as_usizes("shape")?;
    let offsets = as_usizes("data_offsets")?;
    if offsets.len() != 2 || offsets[0] > offsets[1] {
        return Err(bad("data_offsets must be [begin, end] with begin <= end"));
    }
    Ok(Entry {
        name: name.to_string(),
        dtype,
        shape,
        begin: offsets[0],
        end: offsets[1],
    })
}

pub fn deserialize(bytes: &[u8]) -> Result<TensorFile> {
    if bytes.len() < 8 {
        return Err(Error::Format("file shorter than the 8-byte header length".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if n > MAX_HEADER || 8 + n > bytes.len() as u64 {
        return Err(Error::Format(format!(
            "header length {n} exceeds file size {}",
            bytes.len()
        )));
    }
    let header_end = 8 + n as usize;
    let header_str = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    let header: Value = serde_json::from_str(header_str)
        .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
    let header = header
        .as_object()
        .ok_or_else(|| Error::Format("header is not a JSON object".into()))?;
    let data = &bytes[header_end..];

    let mut file = TensorFile::default();
    let mut entries = Vec::new();
    for (name, v) in header {
        if name == METADATA_KEY {
            let map = v
                .as_object()
                .ok_or_else(|| Error::Format("__metadata__ is not an object".into()))?;
            for (k, v) in map {
                let s = v
                    .as_str()
                    .ok_or_else(|| Error::Format(format!("metadata `{k}` is not a string")))?;
                file.metadata.insert(k.clone(), s.to_string());
            }
            continue;
        }
        entries.push(parse_entry(name, v)?);
    }

    entries.sort_by_key(|e| (e.begin, e.end));
    let mut cursor = 0usize;
    for e in &entries {
        if e.end > data.len() {
            return Err(Error::Tensor {
                name: e.name.clone(),
                reason: format!(
                    "data_offsets end {} beyond data section of {} bytes (truncated file?)",
                    e.end,
                    data.len()
                ),
            });
        }
        if e.begin != cursor {
            return Err(Error::Tensor {
                name: e.name.clone(),
                reason: format!(
                    "data_offsets begin {} leaves a gap or overlap (expected {cursor})",
                    e.begin
                ),
            });
        }
        let count: usize = e.shape.iter().product();
        if count * e.dtype.size() != e.end - e.begin {
            return Err(Error::Tensor {
                name: e.name.clone(),
                reason: format!(
                    "shape {:?} needs {} bytes but offsets span {}",
                    e.shape,
                    count * e.dtype.size(),
                    e.end - e.begin
                ),
            });
        }
        let raw = &data[e.begin..e.end];
        let values: Vec<f32> = match e.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            Dtype::BF16 => raw
                .chunks_exact(2)
                .map(|c| bf16::from_le_bytes(c.try_into().expect("2 bytes")).to_f32())
                .collect(),
        };
        let t = TensorF32::new(e.shape.clone(), values).map_err(|err| Error::Tensor {
            name: e.name.clone(),
            reason: err.to_string(),
        })?;
        file.tensors.insert(e.name.clone(), (e.dtype, t));
        cursor = e.end;
    }
    if cursor != data.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            data.len() - cursor
        )));
    }
    Ok(file)
}

/// Writes the file and returns its size in bytes.
pub fn write_file(
    path: &Path,
    tensors: &BTreeMap<String, TensorF32>,
    metadata: &BTreeMap<String, String>,
    dtype: Dtype,
) -> Result<u64> {
    let bytes = serialize(tensors, metadata, dtype)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn read_file(path: &Path) -> Result<TensorFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> BTreeMap<String, TensorF32> {
        let mut m = BTreeMap::new();
        m.insert(
            "b".to_string(),
            TensorF32::from_rows(&[&[1.0, -2.5], &[3.25, 0.0]]).unwrap(),
        );
        m.insert("a".to_string(), TensorF32::vector(vec![0.5, 7.0, -1.0]).unwrap());
        m
    }

    fn header_of(bytes: &[u8]) -> Value {
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        serde_json::from_slice(&bytes[8..8 + n]).unwrap()
    }

    #[test]
    fn round_trip_with_metadata() {
        let mut meta = BTreeMap::new();
        meta.insert("variant".to_string(), "bias".to_string());
        let bytes = serialize(&sample(), &meta, Dtype::F32).unwrap();
        let file = deserialize(&bytes).unwrap();
        assert_eq!(file.metadata, meta);
        for (k, t) in sample() {
            assert_eq!(file.get_f32(&k).unwrap(), &t);
        }
    }

    #[test]
    fn layout_is_sorted_and_aligned() {
        let bytes = serialize(&sample(), &BTreeMap::new(), Dtype::F32).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(n % 8, 0);
        let h = header_of(&bytes);
        assert_eq!(h["a"]["data_offsets"], json!([0, 12]));
        assert_eq!(h["b"]["data_offsets"], json!([12, 28]));
        assert_eq!(bytes.len(), 8 + n + 28);
        assert_eq!(&bytes[8 + n..8 + n + 4], &0.5f32.to_le_bytes());
    }

    #[test]
    fn bf16_halves_payload() {
        let t32 = serialize(&sample(), &BTreeMap::new(), Dtype::F32).unwrap();
        let t16 = serialize(&sample(), &BTreeMap::new(), Dtype::BF16).unwrap();
        let file = deserialize(&t16).unwrap();
        // every sample value is exactly representable in bf16
        assert_eq!(file.get("b").unwrap(), &sample()["b"]);
        assert!(file.get_f32("b").is_err());
        assert!(t16.len() < t32.len());
    }

    #[test]
    fn truncated_data_names_tensor() {
        let bytes = serialize(&sample(), &BTreeMap::new(), Dtype::F32).unwrap();
        let err = deserialize(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Tensor { name, .. } => assert_eq!(name, "b"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(matches!(deserialize(&[1, 2, 3]), Err(Error::Format(_))));
        let mut huge = u64::MAX.to_le_bytes().to_vec();
        huge.extend_from_slice(b"{}");
        assert!(matches!(deserialize(&huge), Err(Error::Format(_))));

        let build = |header: &str, data: &[u8]| {
            let mut v = (header.len() as u64).to_le_bytes().to_vec();
            v.extend_from_slice(header.as_bytes());
            v.extend_from_slice(data);
            v
        };
        assert!(matches!(deserialize(&build("not json", &[])), Err(Error::Format(_))));
        assert!(matches!(deserialize(&build("[1]", &[])), Err(Error::Format(_))));
        let f16 = r#"{"x":{"dtype":"F16","shape":[1],"data_offsets":[0,2]}}"#;
        assert!(matches!(deserialize(&build(f16, &[0, 0])), Err(Error::Dtype { .. })));
        let gap = r#"{"x":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        assert!(matches!(deserialize(&build(gap, &[0; 8])), Err(Error::Tensor { .. })));
        let wrong = r#"{"x":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#;
        assert!(matches!(deserialize(&build(wrong, &[0; 8])), Err(Error::Tensor { .. })));
        let trailing = r#"{"x":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#;
        assert!(matches!(deserialize(&build(trailing, &[0; 8])), Err(Error::Format(_))));
        let nan = f32::NAN.to_le_bytes();
        assert!(deserialize(&build(trailing, &nan)).is_err());
    }

    proptest! {
        #[test]
        fn offsets_tile_data_section(lens in proptest::collection::vec(1usize..20, 1..6), seed in 0u64..100) {
            let mut rng = crate::rng::SeededRng::new(seed);
            let tensors: BTreeMap<String, TensorF32> = lens
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    let data = (0..n).map(|_| rng.uniform(-3.0, 3.0)).collect();
                    (format!("t{i}"), TensorF32::vector(data).unwrap())
                })
                .collect();
            let bytes = serialize(&tensors, &BTreeMap::new(), Dtype::F32).unwrap();
            let h = header_of(&bytes);
            let mut spans: Vec<(u64, u64)> = h
                .as_object()
                .unwrap()
                .values()
                .map(|v| (v["data_offsets"][0].as_u64().unwrap(), v["data_offsets"][1].as_u64().unwrap()))
                .collect();
            spans.sort();
            let mut cursor = 0;
            for (b, e) in spans {
                prop_assert_eq!(b, cursor);
                cursor = e;
            }
            let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
            prop_assert_eq!(cursor, bytes.len() as u64 - 8 - n);
            let back = deserialize(&bytes).unwrap();
            for (k, t) in &tensors {
                prop_assert_eq!(back.get_f32(k).unwrap(), t);
            }
        }
    }
}
