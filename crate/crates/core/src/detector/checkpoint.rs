use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{ParamId, RefineNetParams};
use super::train::Optimizer;
use super::AnchorSpec;
use crate::error::{Error, Result};
use crate::uncertainty::AuEncoding;

pub const CHECKPOINT_FORMAT: &str = "boxadapt-refine-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub encoding: AuEncoding,
    pub anchor: AnchorSpec,
    pub iteration: u64,
    pub params: BTreeMap<String, NamedArray>,
    /// Optimizer velocity, same layout as `params`; empty when not saved.
    pub momentum: BTreeMap<String, NamedArray>,
}

fn to_named(params: &RefineNetParams, flat: &[f64]) -> BTreeMap<String, NamedArray> {
    ParamId::ALL
        .iter()
        .map(|id| {
            let named = NamedArray {
                shape: id.shape(params.encoding()),
                data: flat[params.range(*id)].to_vec(),
            };
            (id.name().to_string(), named)
        })
        .collect()
}

fn from_named(encoding: AuEncoding, arrays: &BTreeMap<String, NamedArray>) -> Result<RefineNetParams> {
    let mut params = RefineNetParams::zeros(encoding);
    if let Some(name) = arrays.keys().find(|k| ParamId::from_name(k).is_none()) {
        return Err(Error::InvalidInput(format!("unknown parameter array {name:?}")));
    }
    for id in ParamId::ALL {
        let arr = arrays
            .get(id.name())
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter array {:?}", id.name())))?;
        let shape = id.shape(encoding);
        if arr.shape != shape || arr.data.len() != shape.iter().product::<usize>() {
            return Err(Error::InvalidInput(format!(
                "{}: expected shape {:?}, found {:?} with {} values",
                id.name(),
                shape,
                arr.shape,
                arr.data.len()
            )));
        }
        params.get_mut(id).copy_from_slice(&arr.data);
    }
    if !params.all_finite() {
        return Err(Error::InvalidInput("non-finite parameter value".into()));
    }
    Ok(params)
}

impl Checkpoint {
    pub fn new(params: &RefineNetParams, anchor: AnchorSpec, optimizer: Option<&Optimizer>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            encoding: params.encoding(),
            anchor,
            iteration: optimizer.map_or(0, |o| o.iteration),
            params: to_named(params, params.as_slice()),
            momentum: optimizer.map(|o| to_named(params, &o.velocity)).unwrap_or_default(),
        }
    }

    pub fn params(&self) -> Result<RefineNetParams> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidInput(format!("unsupported checkpoint format {:?}", self.format)));
        }
        from_named(self.encoding, &self.params)
    }

    /// Velocity buffer in flat layout, or `None` when none was stored.
    pub fn velocity(&self) -> Result<Option<Vec<f64>>> {
        if self.momentum.is_empty() {
            return Ok(None);
        }
        Ok(Some(from_named(self.encoding, &self.momentum)?.as_slice().to_vec()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
    }
}
