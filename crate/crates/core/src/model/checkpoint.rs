use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Params};
use crate::error::{invalid, Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: config plus every parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Params,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config: model.config,
        params: model.params.clone(),
    };
    fs::write(path, serde_json::to_vec(&ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let raw: serde_json::Value = serde_json::from_slice(&fs::read(path)?)?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| invalid("checkpoint has no format_version"))?;
    if found != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: found as u32,
        });
    }
    let ckpt: Checkpoint = serde_json::from_value(raw)?;
    let mut model = Model::new(ckpt.config)?;
    if ckpt.params.len() != model.param_count()
        || ckpt.params.zeros_like() != model.params.zeros_like()
    {
        return Err(invalid("checkpoint parameters do not match its config"));
    }
    model.params = ckpt.params;
    Ok(model)
}
