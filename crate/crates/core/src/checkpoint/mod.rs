//! Lazily-read safetensors checkpoints, single-file or sharded.
//!
//! Opening a checkpoint reads only headers. Tensor payloads are fetched on
//! demand with positioned reads, so distinct tensors can be read from many
//! threads through a shared handle.

mod dtype;
mod source;
mod validate;
mod writer;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use dtype::{Dtype, DtypePolicy};
pub use source::{ByteSource, FileSource};
pub use validate::{validate_homologous, Comparison, DtypeMismatch, HomologyReport, ShapeDiff};
pub use writer::{write_checkpoint, CheckpointWriter, NamedTensor};

const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;
const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

impl TensorMeta {
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        (self.numel() * self.dtype.size()) as u64
    }
}

/// Where a tensor's bytes live: shard index plus absolute file range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorLocation {
    pub shard: usize,
    pub offset: u64,
    pub len: u64,
}

/// A dense f32 tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Views a rank-2 tensor as a matrix whose columns run along the second axis.
    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape.as_slice() {
            &[rows, cols] => Matrix::new(rows, cols, self.data.clone()),
            other => Err(Error::ShapeMismatch(format!(
                "expected a rank-2 tensor, got shape {other:?}"
            ))),
        }
    }
}

impl From<Matrix> for Tensor {
    fn from(m: Matrix) -> Self {
        let (rows, cols) = m.shape();
        Tensor {
            shape: vec![rows, cols],
            data: m.into_vec(),
        }
    }
}

struct Shard {
    path: PathBuf,
    source: Arc<dyn ByteSource>,
}

#[derive(Debug, Clone)]
struct Entry {
    meta: TensorMeta,
    location: TensorLocation,
}

/// Read-only view over one checkpoint.
pub struct CheckpointHandle {
    path: PathBuf,
    shards: Vec<Shard>,
    entries: BTreeMap<String, Entry>,
    metadata: BTreeMap<String, String>,
}

impl std::fmt::Debug for CheckpointHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CheckpointHandle")
            .field("path", &self.path)
            .field("shards", &self.shards.len())
            .field("tensors", &self.entries.len())
            .finish()
    }
}

#[derive(Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

#[derive(Deserialize)]
struct ShardIndex {
    #[serde(default)]
    #[allow(dead_code)]
    metadata: serde_json::Value,
    weight_map: BTreeMap<String, String>,
}

struct ParsedHeader {
    tensors: Vec<(TensorMeta, TensorLocation)>,
    metadata: BTreeMap<String, String>,
}

fn parse_header(path: &Path, source: &dyn ByteSource, shard: usize) -> Result<ParsedHeader> {
    let total = source.len();
    if total < 8 {
        return Err(Error::format(path, "file shorter than the 8-byte header length"));
    }
    let mut len_bytes = [0u8; 8];
    source
        .read_exact_at(0, &mut len_bytes)
        .map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(len_bytes);
    if header_len > MAX_HEADER_LEN || header_len > total - 8 {
        return Err(Error::format(
            path,
            format!("header length {header_len} exceeds file size {total}"),
        ));
    }
    let mut header = vec![0u8; header_len as usize];
    source
        .read_exact_at(8, &mut header)
        .map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&header)
        .map_err(|e| Error::format(path, format!("invalid JSON header: {e}")))?;

    let data_start = 8 + header_len;
    let data_len = total - data_start;
    let mut metadata = BTreeMap::new();
    let mut tensors = Vec::with_capacity(raw.len());
    for (name, value) in raw {
        if name == METADATA_KEY {
            metadata = serde_json::from_value(value)
                .map_err(|e| Error::format(path, format!("invalid __metadata__: {e}")))?;
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::format(path, format!("tensor `{name}`: {e}")))?;
        let dtype = Dtype::from_safetensors(&entry.dtype).ok_or_else(|| {
            Error::format(path, format!("tensor `{name}` has unsupported dtype {}", entry.dtype))
        })?;
        if entry.shape.contains(&0) {
            return Err(Error::format(
                path,
                format!("tensor `{name}` has a zero-sized dimension {:?}", entry.shape),
            ));
        }
        let meta = TensorMeta {
            name: name.clone(),
            dtype,
            shape: entry.shape,
        };
        let [start, end] = entry.data_offsets;
        if end < start || end - start != meta.byte_len() || end > data_len {
            return Err(Error::format(
                path,
                format!(
                    "tensor `{name}`: offsets [{start}, {end}) do not hold {} bytes within a {data_len}-byte payload",
                    meta.byte_len()
                ),
            ));
        }
        tensors.push((
            meta,
            TensorLocation {
                shard,
                offset: data_start + start,
                len: end - start,
            },
        ));
    }

    let mut ranges: Vec<(u64, u64, &str)> = tensors
        .iter()
        .map(|(m, l)| (l.offset, l.offset + l.len, m.name.as_str()))
        .collect();
    ranges.sort_unstable();
    for pair in ranges.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::format(
                path,
                format!("tensors `{}` and `{}` overlap", pair[0].2, pair[1].2),
            ));
        }
    }
    Ok(ParsedHeader { tensors, metadata })
}

impl CheckpointHandle {
    /// Opens a `.safetensors` file, or a sharded checkpoint through its JSON index.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "json") {
            Self::open_sharded(path)
        } else {
            let source = FileSource::open(path)?;
            Self::from_source(path, Arc::new(source))
        }
    }

    /// Builds a handle over any byte source holding a single safetensors file.
    pub fn from_source(path: impl Into<PathBuf>, source: Arc<dyn ByteSource>) -> Result<Self> {
        let path = path.into();
        let parsed = parse_header(&path, source.as_ref(), 0)?;
        let entries = parsed
            .tensors
            .into_iter()
            .map(|(meta, location)| (meta.name.clone(), Entry { meta, location }))
            .collect();
        Ok(Self {
            shards: vec![Shard {
                path: path.clone(),
                source,
            }],
            path,
            entries,
            metadata: parsed.metadata,
        })
    }

    fn open_sharded(index_path: &Path) -> Result<Self> {
        let bytes = std::fs::read(index_path).map_err(|e| Error::io(index_path, e))?;
        let index: ShardIndex = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(index_path, format!("invalid shard index: {e}")))?;
        let dir = index_path.parent().unwrap_or_else(|| Path::new("."));

        let mut shard_ids: BTreeMap<&str, usize> = BTreeMap::new();
        let mut shards = Vec::new();
        let mut headers = Vec::new();
        for file in index.weight_map.values() {
            if shard_ids.contains_key(file.as_str()) {
                continue;
            }
            let shard_path = dir.join(file);
            if !shard_path.is_file() {
                return Err(Error::MissingShard {
                    index: index_path.to_path_buf(),
                    shard: shard_path,
                });
            }
            let source: Arc<dyn ByteSource> = Arc::new(FileSource::open(&shard_path)?);
            let parsed = parse_header(&shard_path, source.as_ref(), shards.len())?;
            let by_name: BTreeMap<String, (TensorMeta, TensorLocation)> = parsed
                .tensors
                .into_iter()
                .map(|(m, l)| (m.name.clone(), (m, l)))
                .collect();
            shard_ids.insert(file, shards.len());
            headers.push(by_name);
            shards.push(Shard {
                path: shard_path,
                source,
            });
        }

        let mut entries = BTreeMap::new();
        for (name, file) in &index.weight_map {
            let shard = shard_ids[file.as_str()];
            let (meta, location) = headers[shard].get(name).cloned().ok_or_else(|| {
                Error::format(
                    &shards[shard].path,
                    format!("index maps `{name}` here but the shard does not contain it"),
                )
            })?;
            entries.insert(name.clone(), Entry { meta, location });
        }
        Ok(Self {
            path: index_path.to_path_buf(),
            shards,
            entries,
            metadata: BTreeMap::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn shard_count(&self) -> usize {
        self.shards.len()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tensor names in ascending order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn meta(&self, name: &str) -> Option<&TensorMeta> {
        self.entries.get(name).map(|e| &e.meta)
    }

    pub fn metas(&self) -> impl Iterator<Item = &TensorMeta> {
        self.entries.values().map(|e| &e.meta)
    }

    pub fn location(&self, name: &str) -> Option<TensorLocation> {
        self.entries.get(name).map(|e| e.location)
    }

    pub fn total_params(&self) -> u64 {
        self.entries.values().map(|e| e.meta.numel() as u64).sum()
    }

    /// Reads a rank-1 or rank-2 tensor, upcast to f32.
    pub fn read_tensor(&self, name: &str) -> Result<Tensor> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        let rank = entry.meta.rank();
        if !(1..=2).contains(&rank) {
            return Err(Error::UnsupportedRank {
                name: name.to_string(),
                rank,
            });
        }
        let shard = &self.shards[entry.location.shard];
        let mut bytes = vec![0u8; entry.location.len as usize];
        shard
            .source
            .read_exact_at(entry.location.offset, &mut bytes)
            .map_err(|e| Error::io(&shard.path, e))?;
        Tensor::new(entry.meta.shape.clone(), entry.meta.dtype.decode(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU64, Ordering};

    fn build_file(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    fn mem(bytes: Vec<u8>) -> Result<CheckpointHandle> {
        CheckpointHandle::from_source("mem.safetensors", Arc::new(bytes))
    }

    #[test]
    fn hand_built_fp32_matrix() {
        let payload: Vec<u8> = [1.0f32, 2.0, 3.0, 4.0]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let h = mem(build_file(
            r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#,
            &payload,
        ))
        .unwrap();
        assert_eq!(h.names().collect::<Vec<_>>(), vec!["w"]);
        assert_eq!(h.meta("w").unwrap().shape, vec![2, 2]);
        assert_eq!(h.total_params(), 4);
        let t = h.read_tensor("w").unwrap();
        assert_eq!(t.data, vec![1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(h.read_tensor("missing"), Err(Error::UnknownTensor(_))));
    }

    #[test]
    fn empty_container() {
        let h = mem(build_file("{}", &[])).unwrap();
        assert!(h.is_empty());
    }

    #[test]
    fn bf16_values_upcast() {
        let payload: Vec<u8> = [1.0f32, 2.0]
            .iter()
            .flat_map(|&v| half::bf16::from_f32(v).to_le_bytes())
            .collect();
        let h = mem(build_file(
            r#"{"b":{"dtype":"BF16","shape":[2],"data_offsets":[0,4]}}"#,
            &payload,
        ))
        .unwrap();
        assert_eq!(h.read_tensor("b").unwrap().data, vec![1.0, 2.0]);
        assert_eq!(h.meta("b").unwrap().dtype, Dtype::Bf16);
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(mem(vec![1, 2, 3]), Err(Error::Format { .. })));
        assert!(matches!(mem(build_file("{not json", &[])), Err(Error::Format { .. })));
        // Declared length disagrees with shape.
        let bad = build_file(r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,4]}}"#, &[0; 4]);
        assert!(matches!(mem(bad), Err(Error::Format { .. })));
        // Runs past the end of the file.
        let bad = build_file(r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#, &[0; 4]);
        assert!(matches!(mem(bad), Err(Error::Format { .. })));
        // Overlapping ranges.
        let bad = build_file(
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
            &[0; 8],
        );
        assert!(matches!(mem(bad), Err(Error::Format { .. })));
        let bad = build_file(r#"{"w":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}}"#, &[0; 8]);
        assert!(matches!(mem(bad), Err(Error::Format { .. })));
    }

    #[test]
    fn rank_three_is_listed_but_not_readable() {
        let h = mem(build_file(
            r#"{"c":{"dtype":"F32","shape":[1,1,2],"data_offsets":[0,8]}}"#,
            &[0; 8],
        ))
        .unwrap();
        assert!(matches!(
            h.read_tensor("c"),
            Err(Error::UnsupportedRank { rank: 3, .. })
        ));
    }

    struct CountingSource {
        inner: Vec<u8>,
        max_end: AtomicU64,
    }

    impl ByteSource for CountingSource {
        fn len(&self) -> u64 {
            self.inner.len() as u64
        }

        fn read_exact_at(&self, offset: u64, buf: &mut [u8]) -> std::io::Result<()> {
            self.max_end
                .fetch_max(offset + buf.len() as u64, Ordering::SeqCst);
            self.inner.read_exact_at(offset, buf)
        }
    }

    #[test]
    fn open_reads_only_the_header() {
        let header = r#"{"w":{"dtype":"F32","shape":[4,4],"data_offsets":[0,64]}}"#;
        let bytes = build_file(header, &[7u8; 64]);
        let header_end = 8 + header.len() as u64;
        let source = Arc::new(CountingSource {
            inner: bytes,
            max_end: AtomicU64::new(0),
        });
        let h = CheckpointHandle::from_source("count", source.clone()).unwrap();
        assert_eq!(source.max_end.load(Ordering::SeqCst), header_end);
        h.read_tensor("w").unwrap();
        assert_eq!(source.max_end.load(Ordering::SeqCst), header_end + 64);
    }
}
