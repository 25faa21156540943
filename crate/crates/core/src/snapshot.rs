//! Versioned JSON dumps of stores, routers and Fisher estimates.
//!
//! Floats round-trip exactly and map keys are ordered, so dumping the same
//! value twice gives the same bytes.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pathway::{IndexSet, ParamStore, PathwayLayout};
use crate::regularization::{FisherInfo, TaskSnapshot};
use crate::router::Router;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreDump {
    pub layout: PathwayLayout,
    pub k: usize,
    pub store: ParamStore,
    /// Active index set of every pathway, for readers that do not know the
    /// layout rules.
    pub active: Vec<IndexSet>,
}

impl StoreDump {
    pub fn new(layout: &PathwayLayout, store: &ParamStore) -> Result<Self> {
        let active = (0..store.n_pathways())
            .map(|k| store.active_params(k))
            .collect::<Result<Vec<_>>>()?;
        let dump = StoreDump {
            layout: layout.clone(),
            k: store.n_pathways(),
            store: store.clone(),
            active,
        };
        dump.check()?;
        Ok(dump)
    }

    pub fn check(&self) -> Result<()> {
        self.layout.validate()?;
        self.store.check_partition()?;
        if self.k != self.store.n_pathways() || self.active.len() != self.k {
            return Err(Error::Contract(format!(
                "dump declares K = {} but holds {} pathways and {} index sets",
                self.k,
                self.store.n_pathways(),
                self.active.len()
            )));
        }
        for k in 0..self.k {
            self.store.check_layout(&self.layout, k)?;
            if self.active[k] != self.store.active_params(k)? {
                return Err(Error::Contract(format!("index set of pathway {k} disagrees with the store")));
            }
        }
        Ok(())
    }
}

/// Everything a run carries from one task to the next.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunState {
    pub store: StoreDump,
    pub router: Option<Router>,
    pub fishers: Vec<FisherInfo>,
    pub snapshots: Vec<TaskSnapshot>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope<T> {
    version: u32,
    payload: T,
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(&Envelope {
        version: FORMAT_VERSION,
        payload: value,
    })?)
}

pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let version = value
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Contract("not a snapshot: missing version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::Unsupported(format!(
            "snapshot version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    Ok(serde_json::from_value::<Envelope<T>>(value)?.payload)
}

pub fn save<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, to_json(value)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

/// Loads a store dump and re-checks its invariants.
pub fn load_store(path: &Path) -> Result<StoreDump> {
    let dump: StoreDump = load(path)?;
    dump.check()?;
    Ok(dump)
}
