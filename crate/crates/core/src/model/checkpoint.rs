use std::collections::HashMap;
use std::fs;
use std::path::Path;

use polite_nn::Tensor;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::{Detector, DetectorParams, ModelMeta};
use crate::error::{Error, Result};

/// Bumped whenever the parameter namespace or metadata layout changes.
pub const SCHEMA_VERSION: u32 = 1;

const META_KEY: &str = "polite_teacher.meta";
const VERSION_KEY: &str = "polite_teacher.schema_version";

fn ck_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

/// Writes the parameters in declaration order, with the metadata as JSON.
pub fn save_checkpoint(path: &Path, params: &DetectorParams) -> Result<()> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = params
        .store
        .iter()
        .map(|(name, t)| {
            let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.to_string(), t.shape().to_vec(), raw)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, raw)| {
            TensorView::new(Dtype::F32, shape.clone(), raw)
                .map(|v| (name.clone(), v))
                .map_err(|e| ck_err(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut info = HashMap::new();
    info.insert(VERSION_KEY.to_string(), SCHEMA_VERSION.to_string());
    info.insert(
        META_KEY.to_string(),
        serde_json::to_string(&params.meta).map_err(|e| ck_err(path, e))?,
    );
    let buf = safetensors::serialize(views, Some(info)).map_err(|e| ck_err(path, e))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DetectorParams> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| ck_err(path, e))?;
    let info = header
        .metadata()
        .as_ref()
        .ok_or_else(|| ck_err(path, "missing metadata"))?;
    let version = info
        .get(VERSION_KEY)
        .ok_or_else(|| ck_err(path, "missing schema version"))?;
    if version != &SCHEMA_VERSION.to_string() {
        return Err(ck_err(
            path,
            format!("schema version {version} is not supported (expected {SCHEMA_VERSION})"),
        ));
    }
    let meta: ModelMeta = serde_json::from_str(
        info.get(META_KEY)
            .ok_or_else(|| ck_err(path, "missing model metadata"))?,
    )
    .map_err(|e| ck_err(path, e))?;

    // rebuild the namespace, then fill it from the file
    let mut rng = crate::rng::stream(0, "scratch", 0);
    let (_, mut params) = Detector::init(meta.config.clone(), meta.categories.clone(), &mut rng)?;
    params.meta = meta;
    let st = SafeTensors::deserialize(&buf).map_err(|e| ck_err(path, e))?;
    let names: Vec<String> = params.store.iter().map(|(n, _)| n.to_string()).collect();
    if st.len() != names.len() {
        return Err(ck_err(
            path,
            format!("{} tensors stored, architecture has {}", st.len(), names.len()),
        ));
    }
    for name in names {
        let view = st
            .tensor(&name)
            .map_err(|_| ck_err(path, format!("missing tensor `{name}`")))?;
        if view.dtype() != Dtype::F32 {
            return Err(ck_err(path, format!("tensor `{name}` is not f32")));
        }
        let data: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params
            .store
            .set(&name, Tensor::new(view.shape().to_vec(), data))
            .map_err(|e| ck_err(path, e))?;
    }
    Ok(params)
}
