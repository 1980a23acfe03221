//! JSON checkpoint format.
//!
//! ```json
//! {"format":"otc-params-v1","params":[{"name":"tok_embed","shape":[20,8],"values":[...]}]}
//! ```
//!
//! Parameters are written in insertion order. Values use the shortest
//! decimal form that round-trips exactly, so identical parameters always
//! produce identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "otc-params-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub format: String,
    pub params: Vec<CheckpointEntry>,
}

impl CheckpointFile {
    pub fn from_params(params: &ParamSet) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            params: params
                .iter()
                .map(|(_, name, t)| CheckpointEntry {
                    name: name.to_string(),
                    shape: t.shape(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_params(self) -> Result<ParamSet> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!(
                "unsupported checkpoint format {:?}",
                self.format
            )));
        }
        let mut params = ParamSet::new();
        for e in self.params {
            let t = Tensor::new(e.shape[0], e.shape[1], e.values)?;
            params.insert(e.name, t)?;
        }
        Ok(params)
    }
}

pub fn save_params(path: &Path, params: &ParamSet) -> Result<()> {
    let json = serde_json::to_string(&CheckpointFile::from_params(params))
        .map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    file.into_params()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::row(&[0.1, -1.0 / 3.0, 1e-300]))
            .unwrap();
        p.insert("b", Tensor::identity(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        save_params(&path, &p).unwrap();
        assert_eq!(load_params(&path).unwrap(), p);
    }
}
