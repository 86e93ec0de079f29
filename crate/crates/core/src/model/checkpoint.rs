use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// A shape-tagged flat array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serialized parameters keyed by layer path.
///
/// `extra` carries whatever else a caller needs to rebuild the run
/// (tying configuration, vocabularies); it is not interpreted here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
    pub params: BTreeMap<String, ShapedArray>,
}

impl Checkpoint {
    /// Captures every parameter of `store`. Names must be unique.
    pub fn capture(store: &ParamStore, config: &ModelConfig) -> Result<Self> {
        let mut params = BTreeMap::new();
        for id in store.ids() {
            let t = store.value(id);
            let entry = ShapedArray {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            };
            if params.insert(store.name(id).to_string(), entry).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter path {}", store.name(id))));
            }
        }
        Ok(Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: config.clone(),
            extra: BTreeMap::new(),
            params,
        })
    }

    /// Copies values into `store`, which must hold exactly the same paths
    /// and shapes. Nothing is written unless every entry validates.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut expected: BTreeMap<&str, _> = BTreeMap::new();
        for id in store.ids() {
            expected.insert(store.name(id), id);
        }
        for (path, id) in &expected {
            match self.params.get(*path) {
                None => return Err(Error::Checkpoint(format!("{path}: missing from checkpoint"))),
                Some(a) => {
                    let want = store.value(*id).shape();
                    if a.shape != want || a.data.len() != a.shape.iter().product::<usize>() {
                        return Err(Error::Checkpoint(format!(
                            "{path}: shape {:?} does not match expected {:?}",
                            a.shape, want
                        )));
                    }
                }
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !expected.contains_key(k.as_str())) {
            return Err(Error::Checkpoint(format!("{extra}: not a parameter of this model")));
        }
        let updates: Vec<_> = expected
            .iter()
            .map(|(path, id)| {
                let a = &self.params[*path];
                (*id, Tensor::new(a.shape.clone(), a.data.clone()))
            })
            .collect();
        for (id, t) in updates {
            store.set(id, t?)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}
