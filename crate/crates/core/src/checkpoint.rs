//! Parameter snapshots as safetensors files with a string metadata header.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use vidfuse_tape::{ParamStore, Tensor};

use crate::error::{Error, Result};

/// Metadata key holding the JSON list of tensor names in store order.
const ORDER_KEY: &str = "param_order";

fn ck_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

/// Writes every store under its prefix into one file. The write goes to a
/// sibling temporary file first so a crash never leaves a torn checkpoint.
pub fn save(path: &Path, stores: &[(&str, &ParamStore<f32>)], metadata: &BTreeMap<String, String>) -> Result<()> {
    let mut order = Vec::new();
    let mut bytes: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (prefix, store) in stores {
        for (_, name, value) in store.iter() {
            let full = format!("{prefix}{name}");
            order.push(full.clone());
            let data: Vec<u8> = value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            bytes.push((full, value.shape().to_vec(), data));
        }
    }
    let mut info: HashMap<String, String> = metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    info.insert(ORDER_KEY.into(), serde_json::to_string(&order).expect("names serialize"));
    let views = bytes
        .iter()
        .map(|(n, s, d)| Ok((n.clone(), TensorView::new(Dtype::F32, s.clone(), d).map_err(|e| ck_err(path, e.to_string()))?)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = tmp_path(path);
    safetensors::serialize_to_file(views, Some(info), &tmp).map_err(|e| ck_err(path, e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// A loaded snapshot: named tensors in saved order plus metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub path: PathBuf,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&buf).map_err(|e| ck_err(path, e.to_string()))?;
        let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| ck_err(path, e.to_string()))?;
        let mut metadata: BTreeMap<String, String> = header.metadata().clone().unwrap_or_default().into_iter().collect();
        let order: Vec<String> = match metadata.remove(ORDER_KEY) {
            Some(s) => serde_json::from_str(&s).map_err(|e| ck_err(path, format!("bad parameter order: {e}")))?,
            None => {
                let mut names: Vec<String> = st.names().into_iter().map(String::from).collect();
                names.sort();
                names
            }
        };
        let mut tensors = Vec::with_capacity(order.len());
        for name in order {
            let view = st.tensor(&name).map_err(|e| ck_err(path, format!("{name}: {e}")))?;
            if view.dtype() != Dtype::F32 {
                return Err(ck_err(path, format!("{name} has dtype {:?}, expected F32", view.dtype())));
            }
            let data: Vec<f32> = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::new(view.shape().to_vec(), data)));
        }
        Ok(Checkpoint { path: path.to_path_buf(), tensors, metadata })
    }

    /// Copies the tensors under `prefix` into `store`, which must match exactly.
    pub fn restore_into(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let found: BTreeMap<&str, &Tensor<f32>> = self.tensors.iter().filter_map(|(n, t)| n.strip_prefix(prefix).map(|n| (n, t))).collect();
        if found.len() != store.len() {
            return Err(ck_err(&self.path, format!("{} tensors under `{prefix}`, the model has {}", found.len(), store.len())));
        }
        let ids: Vec<_> = store.iter().map(|(id, name, v)| (id, name.to_string(), v.shape().to_vec())).collect();
        for (id, name, shape) in ids {
            let t = found.get(name.as_str()).ok_or_else(|| ck_err(&self.path, format!("missing tensor {prefix}{name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(ck_err(&self.path, format!("{prefix}{name} has shape {:?}, the model expects {shape:?}", t.shape())));
            }
            store.set(id, (*t).clone());
        }
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata.get(key).map(String::as_str).ok_or_else(|| ck_err(&self.path, format!("metadata key `{key}` missing")))
    }
}

/// All tensors of a file as a fresh store.
pub fn load_params(path: &Path) -> Result<(ParamStore<f32>, BTreeMap<String, String>)> {
    let ck = Checkpoint::load(path)?;
    let mut store = ParamStore::new();
    for (name, t) in ck.tensors {
        store.add(name, t);
    }
    Ok((store, ck.metadata))
}
