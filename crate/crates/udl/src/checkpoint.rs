//! Model checkpoints: a safetensors weight archive plus a JSON sidecar.
//!
//! ```text
//! <dir>/weights.safetensors   every parameter and batch-norm buffer, f32
//! <dir>/meta.json             CheckpointMeta
//! ```

use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use udl_core::network::{InputRepr, ModelParameters, Network, NetworkConfig};
use udl_core::udl::{BiasCalibration, TrainConfig, TrainedModel};

use crate::error::{Error, Result};

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const META_FILE: &str = "meta.json";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Optimizer steps taken so far.
    pub iteration: u64,
    pub calibration: Option<BiasCalibration>,
    pub input_repr: InputRepr,
    pub dataset_digest: Option<String>,
    pub seed: u64,
}

impl CheckpointMeta {
    pub fn new(network: NetworkConfig, train: TrainConfig) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            input_repr: network.input_repr,
            seed: train.seed,
            network,
            train,
            iteration: 0,
            calibration: None,
            dataset_digest: None,
        }
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        if self.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {}", self.format_version)));
        }
        if self.input_repr != self.network.input_repr {
            return Err(bad("input_repr disagrees with the network config".into()));
        }
        self.network.validate().map_err(|e| bad(e.to_string()))?;
        self.train.validate().map_err(|e| bad(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParameters<f32>,
}

impl Checkpoint {
    pub fn network(&self) -> Result<Network> {
        Ok(Network::new(self.meta.network.clone())?)
    }

    pub fn into_model(self) -> Result<(TrainedModel, CheckpointMeta)> {
        let net = Network::new(self.meta.network.clone())?;
        Ok((TrainedModel::new(net, self.params)?, self.meta))
    }
}

pub fn save_checkpoint(dir: &Path, meta: &CheckpointMeta, params: &ModelParameters<f32>) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let bytes: Vec<Vec<u8>> =
        params.iter().map(|p| p.values.iter().flat_map(|v| v.to_le_bytes()).collect()).collect();
    let views = params
        .iter()
        .zip(&bytes)
        .map(|(p, b)| {
            let view = TensorView::new(Dtype::F32, p.shape.clone(), b).expect("length matches shape");
            (p.name.clone(), view)
        })
        .collect::<Vec<_>>();
    let path = dir.join(WEIGHTS_FILE);
    let archive = safetensors::serialize(views, None)
        .map_err(|e| Error::Checkpoint { path: path.clone(), reason: e.to_string() })?;
    fs::write(&path, archive).map_err(Error::io(&path))?;
    write_meta(dir, meta)
}

/// Rewrites only the sidecar.
pub fn write_meta(dir: &Path, meta: &CheckpointMeta) -> Result<()> {
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(&path, text + "\n").map_err(Error::io(&path))
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint { path: path.clone(), reason: e.to_string() })?;
    meta.validate(&path)?;
    Ok(meta)
}

/// Loads the sidecar, validates it, then reads weights into the layout the
/// configured network expects.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta = load_meta(dir)?;
    let net = Network::new(meta.network.clone())?;
    let path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&path).map_err(Error::io(&path))?;
    let bad = |reason: String| Error::Checkpoint { path: path.clone(), reason };
    let archive = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let mut params = net.init_parameters::<f32>(0);
    if archive.len() != params.len() {
        return Err(bad(format!("{} tensors, the network has {}", archive.len(), params.len())));
    }
    for p in params.iter_mut() {
        let t = archive.tensor(&p.name).map_err(|e| bad(format!("{}: {e}", p.name)))?;
        if t.dtype() != Dtype::F32 {
            return Err(bad(format!("{}: expected F32, found {:?}", p.name, t.dtype())));
        }
        if t.shape() != p.shape.as_slice() {
            return Err(bad(format!("{}: shape {:?}, expected {:?}", p.name, t.shape(), p.shape)));
        }
        p.values = t.data().chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    }
    Ok(Checkpoint { meta, params })
}
