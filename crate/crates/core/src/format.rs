//! Instance file format.
//!
//! A JSON document:
//!
//! ```json
//! {
//!   "format": "tvrp-instance",
//!   "version": 1,
//!   "n": 3,
//!   "coords": [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
//!   "time": [[0.0, 1.0, 1.0], [1.0, 0.0, 1.4], [1.0, 1.4, 0.0]],
//!   "demand": [{"nodes": [1, 2], "rank": 2, "cyclic": true, "volume": 0.25}],
//!   "t_max": 10.0,
//!   "start_nodes": []
//! }
//! ```
//!
//! `t_max: null` means no driving window. Demand entries are written merged
//! and sorted, so writing a parsed file reproduces it byte for byte.

use serde::{Deserialize, Serialize};

use crate::demand::Node;
use crate::instance::{DemandEntry, Instance, InstanceError};

pub const INSTANCE_FORMAT: &str = "tvrp-instance";
pub const INSTANCE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryFile {
    nodes: Vec<Node>,
    rank: usize,
    cyclic: bool,
    volume: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    format: String,
    version: u32,
    n: usize,
    coords: Vec<[f64; 2]>,
    time: Vec<Vec<f64>>,
    demand: Vec<EntryFile>,
    t_max: Option<f64>,
    #[serde(default)]
    start_nodes: Vec<Node>,
}

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("expected format {expected:?}, found {found:?}")]
    WrongFormat { expected: &'static str, found: String },
    #[error("unsupported {what} version {found} (supported: {supported})")]
    Version { what: &'static str, found: u32, supported: u32 },
    #[error("field n = {n} disagrees with {coords} coordinates")]
    Count { n: usize, coords: usize },
    #[error("demand entry {index}: rank {rank} does not match {len} nodes")]
    Rank { index: usize, rank: usize, len: usize },
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Deserializes JSON, reporting the field path of the first error.
pub fn from_json_with_path<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, FormatError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| FormatError::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn instance_to_json(instance: &Instance) -> String {
    let file = InstanceFile {
        format: INSTANCE_FORMAT.to_string(),
        version: INSTANCE_VERSION,
        n: instance.num_nodes(),
        coords: instance.coords().to_vec(),
        time: instance.time_rows(),
        demand: instance
            .demand()
            .iter()
            .map(|e| EntryFile { nodes: e.nodes.clone(), rank: e.rank(), cyclic: e.cyclic, volume: e.volume })
            .collect(),
        t_max: instance.has_window().then(|| instance.t_max()),
        start_nodes: instance.start_nodes().to_vec(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("instance serializes");
    s.push('\n');
    s
}

pub fn instance_from_json(text: &str) -> Result<Instance, FormatError> {
    let file: InstanceFile = from_json_with_path(text)?;
    if file.format != INSTANCE_FORMAT {
        return Err(FormatError::WrongFormat { expected: INSTANCE_FORMAT, found: file.format });
    }
    if file.version != INSTANCE_VERSION {
        return Err(FormatError::Version { what: "instance", found: file.version, supported: INSTANCE_VERSION });
    }
    if file.n != file.coords.len() {
        return Err(FormatError::Count { n: file.n, coords: file.coords.len() });
    }
    let mut demand = Vec::with_capacity(file.demand.len());
    for (index, e) in file.demand.into_iter().enumerate() {
        if e.rank != e.nodes.len() {
            return Err(FormatError::Rank { index, rank: e.rank, len: e.nodes.len() });
        }
        demand.push(DemandEntry { nodes: e.nodes, cyclic: e.cyclic, volume: e.volume });
    }
    Ok(Instance::new(file.coords, file.time, demand, file.t_max.unwrap_or(f64::INFINITY), file.start_nodes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{random_instance, GenParams, Window};

    #[test]
    fn round_trip_is_canonical() {
        let inst = random_instance(&GenParams { n: 5, density: 0.4, ..GenParams::default() }, 2).unwrap();
        let text = instance_to_json(&inst);
        let back = instance_from_json(&text).unwrap();
        assert_eq!(back, inst);
        assert_eq!(instance_to_json(&back), text);
    }

    #[test]
    fn unbounded_window_is_null() {
        let p = GenParams { n: 3, window: Window::Unbounded, ..GenParams::default() };
        let inst = random_instance(&p, 0).unwrap();
        let text = instance_to_json(&inst);
        assert!(text.contains("\"t_max\": null"));
        assert!(!instance_from_json(&text).unwrap().has_window());
    }

    #[test]
    fn errors_carry_field_paths() {
        let inst = random_instance(&GenParams { n: 3, ..GenParams::default() }, 0).unwrap();
        let text = instance_to_json(&inst).replacen("\"volume\": ", "\"volume\": \"x\", \"_\": ", 1);
        match instance_from_json(&text) {
            Err(FormatError::Parse { path, .. }) => assert_eq!(path, "demand[0].volume"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_refused() {
        let inst = random_instance(&GenParams { n: 3, ..GenParams::default() }, 0).unwrap();
        let text = instance_to_json(&inst).replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(instance_from_json(&text), Err(FormatError::Version { found: 9, .. })));
    }
}
