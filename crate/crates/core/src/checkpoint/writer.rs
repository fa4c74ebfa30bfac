use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::{Dtype, DtypePolicy, Tensor, TensorMeta, METADATA_KEY};
use crate::error::{Error, Result};

/// A tensor with the dtype it was stored in.
#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: Dtype,
    pub tensor: Tensor,
}

/// Streaming safetensors writer.
///
/// The header is laid out up front from the tensor metadata, so payloads
/// can be appended one at a time in ascending name order without holding
/// the whole checkpoint in memory. Bytes go to `<out>.partial` and are
/// renamed into place by [`finish`](Self::finish); dropping an unfinished
/// writer deletes the partial file.
pub struct CheckpointWriter {
    path: PathBuf,
    tmp_path: PathBuf,
    out: Option<BufWriter<File>>,
    plan: Vec<TensorMeta>,
    next: usize,
    scratch: Vec<u8>,
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Serialized header, space-padded so the payload starts 8-byte aligned.
fn header_bytes(plan: &[TensorMeta], metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut header: BTreeMap<String, Value> = BTreeMap::new();
    if !metadata.is_empty() {
        header.insert(METADATA_KEY.to_string(), json!(metadata));
    }
    let mut offset = 0u64;
    for meta in plan {
        let end = offset + meta.byte_len();
        header.insert(
            meta.name.clone(),
            json!({
                "dtype": meta.dtype.safetensors_name(),
                "shape": meta.shape,
                "data_offsets": [offset, end],
            }),
        );
        offset = end;
    }
    let mut bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Config(format!("cannot serialize header: {e}")))?;
    while (8 + bytes.len()) % 8 != 0 {
        bytes.push(b' ');
    }
    Ok(bytes)
}

impl CheckpointWriter {
    /// `metas` carry the output dtype of each tensor; order does not matter.
    pub fn create(
        path: impl AsRef<Path>,
        metas: &[TensorMeta],
        metadata: &BTreeMap<String, String>,
    ) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut plan = metas.to_vec();
        plan.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(pair) = plan.windows(2).find(|p| p[0].name == p[1].name) {
            return Err(Error::Config(format!("duplicate tensor name `{}`", pair[0].name)));
        }
        let header = header_bytes(&plan, metadata)?;

        let tmp_path = partial_path(&path);
        let file = File::create(&tmp_path).map_err(|e| Error::io(&tmp_path, e))?;
        let mut writer = Self {
            path,
            out: Some(BufWriter::with_capacity(1 << 20, file)),
            tmp_path,
            plan,
            next: 0,
            scratch: Vec::new(),
        };
        let out = writer.out.as_mut().expect("open");
        out.write_all(&(header.len() as u64).to_le_bytes())
            .and_then(|_| out.write_all(&header))
            .map_err(|e| Error::io(&writer.tmp_path, e))?;
        Ok(writer)
    }

    /// Name of the tensor the writer expects next, if any.
    pub fn next_name(&self) -> Option<&str> {
        self.plan.get(self.next).map(|m| m.name.as_str())
    }

    pub fn write_tensor(&mut self, name: &str, values: &[f32]) -> Result<()> {
        let meta = self.plan.get(self.next).ok_or_else(|| {
            Error::Config(format!("tensor `{name}` written after the last planned tensor"))
        })?;
        if meta.name != name {
            return Err(Error::Config(format!(
                "tensor `{name}` written out of order; expected `{}`",
                meta.name
            )));
        }
        if values.len() != meta.numel() {
            return Err(Error::ShapeMismatch(format!(
                "tensor `{name}` planned with {} values, got {}",
                meta.numel(),
                values.len()
            )));
        }
        self.scratch.clear();
        meta.dtype.encode(values, &mut self.scratch);
        self.out
            .as_mut()
            .expect("writer already finished")
            .write_all(&self.scratch)
            .map_err(|e| Error::io(&self.tmp_path, e))?;
        self.next += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        if let Some(missing) = self.next_name() {
            return Err(Error::Config(format!("tensor `{missing}` was never written")));
        }
        let out = self.out.take().expect("writer already finished");
        let file = out
            .into_inner()
            .map_err(|e| Error::io(&self.tmp_path, e.into_error()))?;
        file.sync_all().map_err(|e| Error::io(&self.tmp_path, e))?;
        drop(file);
        std::fs::rename(&self.tmp_path, &self.path).map_err(|e| Error::io(&self.path, e))?;
        Ok(self.path.clone())
    }
}

impl Drop for CheckpointWriter {
    fn drop(&mut self) {
        if self.out.take().is_some() {
            let _ = std::fs::remove_file(&self.tmp_path);
        }
    }
}

/// Writes a whole tensor set in one call, choosing dtypes by `policy`.
pub fn write_checkpoint(
    path: impl AsRef<Path>,
    tensors: &[NamedTensor],
    policy: DtypePolicy,
    metadata: &BTreeMap<String, String>,
) -> Result<PathBuf> {
    let metas: Vec<TensorMeta> = tensors
        .iter()
        .map(|t| TensorMeta {
            name: t.name.clone(),
            dtype: policy.resolve(t.dtype),
            shape: t.tensor.shape.clone(),
        })
        .collect();
    let mut writer = CheckpointWriter::create(path, &metas, metadata)?;
    let mut order: Vec<&NamedTensor> = tensors.iter().collect();
    order.sort_by(|a, b| a.name.cmp(&b.name));
    for t in order {
        writer.write_tensor(&t.name, &t.tensor.data)?;
    }
    writer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::CheckpointHandle;

    fn named(name: &str, dtype: Dtype, shape: Vec<usize>, data: Vec<f32>) -> NamedTensor {
        NamedTensor {
            name: name.into(),
            dtype,
            tensor: Tensor::new(shape, data).unwrap(),
        }
    }

    #[test]
    fn empty_set_is_a_valid_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.safetensors");
        write_checkpoint(&path, &[], DtypePolicy::PreserveInput, &BTreeMap::new()).unwrap();
        let h = CheckpointHandle::open(&path).unwrap();
        assert!(h.is_empty());
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len() % 8, 0);
    }

    #[test]
    fn policy_controls_output_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let t = [named("b", Dtype::Bf16, vec![2], vec![1.0, 2.0])];
        for (policy, want) in [
            (DtypePolicy::PreserveInput, Dtype::Bf16),
            (DtypePolicy::ForceFp32, Dtype::F32),
            (DtypePolicy::ForceBf16, Dtype::Bf16),
        ] {
            let path = dir.path().join(format!("{policy:?}.safetensors"));
            write_checkpoint(&path, &t, policy, &BTreeMap::new()).unwrap();
            let h = CheckpointHandle::open(&path).unwrap();
            assert_eq!(h.meta("b").unwrap().dtype, want);
            assert_eq!(h.read_tensor("b").unwrap().data, vec![1.0, 2.0]);
        }
    }

    #[test]
    fn out_of_order_and_duplicate_writes_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        let metas = vec![
            TensorMeta { name: "b".into(), dtype: Dtype::F32, shape: vec![1] },
            TensorMeta { name: "a".into(), dtype: Dtype::F32, shape: vec![1] },
        ];
        let mut w = CheckpointWriter::create(&path, &metas, &BTreeMap::new()).unwrap();
        assert_eq!(w.next_name(), Some("a"));
        assert!(w.write_tensor("b", &[1.0]).is_err());
        drop(w);
        assert!(!partial_path(&path).exists());
        assert!(!path.exists());

        let dup = vec![metas[0].clone(), metas[0].clone()];
        assert!(CheckpointWriter::create(&path, &dup, &BTreeMap::new()).is_err());
    }

    #[test]
    fn unfinished_writer_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.safetensors");
        let metas = vec![TensorMeta { name: "a".into(), dtype: Dtype::F32, shape: vec![2] }];
        let w = CheckpointWriter::create(&path, &metas, &BTreeMap::new()).unwrap();
        assert!(w.finish().is_err());
        assert!(!path.exists());
        assert!(!partial_path(&path).exists());
    }

    #[test]
    fn metadata_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let meta: BTreeMap<String, String> = [("format".to_string(), "pt".to_string())].into();
        write_checkpoint(&path, &[named("w", Dtype::F32, vec![1, 1], vec![3.0])], DtypePolicy::PreserveInput, &meta)
            .unwrap();
        assert_eq!(CheckpointHandle::open(&path).unwrap().metadata(), &meta);
    }
}
