use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::config::Precision;
use super::{GlycemicModel, ModelConfig, ModelError, NormStats};

pub const CHECKPOINT_FORMAT: &str = "diets-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Metadata stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub norm: NormStats,
    /// Free-form provenance such as training epochs or validation MAE.
    #[serde(default)]
    pub info: BTreeMap<String, String>,
}

fn to_bytes(t: &Tensor, precision: Precision) -> Result<Vec<u8>, ModelError> {
    let flat = t.flatten_all()?;
    Ok(match precision {
        Precision::F32 => flat
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        Precision::F64 => flat
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
    })
}

impl GlycemicModel {
    /// Serializes config, normalization statistics and weights.
    pub fn to_checkpoint_bytes(&self, info: BTreeMap<String, String>) -> Result<Vec<u8>, ModelError> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            norm: self.norm.clone(),
            info,
        };
        let precision = self.config.precision;
        let dtype = match precision {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        };
        let vars = self.named_vars();
        let buffers = vars
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.dims().to_vec(), to_bytes(v.as_tensor(), precision)?)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        let views = buffers
            .iter()
            .map(|(n, shape, bytes)| {
                TensorView::new(dtype, shape.clone(), bytes)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| ModelError::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
        meta.insert(
            "header".to_string(),
            serde_json::to_string(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?,
        );
        safetensors::serialize(views, &Some(meta)).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(Self, CheckpointHeader), ModelError> {
        let header = read_header(bytes)?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let model = GlycemicModel::new(header.config.clone(), header.norm.clone(), 0)?;
        let vars = model.named_vars();
        if st.len() != vars.len() {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                st.len(),
                vars.len()
            )));
        }
        for (name, var) in vars {
            let view = st
                .tensor(&name)
                .map_err(|_| ModelError::Checkpoint(format!("missing tensor {name}")))?;
            if view.shape() != var.dims() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    view.shape(),
                    var.dims()
                )));
            }
            let data = view.data();
            let t = match view.dtype() {
                Dtype::F32 => {
                    let v: Vec<f32> = data
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Tensor::from_vec(v, view.shape(), model.device())?
                }
                Dtype::F64 => {
                    let v: Vec<f64> = data
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Tensor::from_vec(v, view.shape(), model.device())?
                }
                other => return Err(ModelError::Checkpoint(format!("unsupported dtype {other:?}"))),
            };
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok((model, header))
    }

    pub fn save(&self, path: &Path, info: BTreeMap<String, String>) -> Result<(), ModelError> {
        let bytes = self.to_checkpoint_bytes(info)?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| ModelError::Io(format!("{}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader), ModelError> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

/// Reads and validates the header without loading weights.
pub fn read_header(bytes: &[u8]) -> Result<CheckpointHeader, ModelError> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let meta = meta
        .metadata()
        .as_ref()
        .ok_or_else(|| ModelError::Checkpoint("no metadata".into()))?;
    if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(ModelError::Checkpoint("not a diets checkpoint".into()));
    }
    let version: u32 = meta
        .get("version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| ModelError::Checkpoint("missing version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header: CheckpointHeader = serde_json::from_str(
        meta.get("header")
            .ok_or_else(|| ModelError::Checkpoint("missing header".into()))?,
    )
    .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    header.norm.check(&header.config)?;
    Ok(header)
}
