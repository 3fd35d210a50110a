//! A dataset directory: `dataset.json` indexing raw geometry and label
//! fields under `fields/`.

use std::path::Path;

use pato_core::dataset::{Provenance, SampleRecord};
use pato_core::fieldio::load_raw;
use serde::{Deserialize, Serialize};

use crate::output::OutDir;
use crate::CliError;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    id: String,
    provenance: Provenance,
    geometry: String,
    label: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    samples: Vec<Entry>,
}

pub fn save(out: &mut OutDir, samples: &[SampleRecord]) -> Result<(), CliError> {
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let geometry = out.field(&format!("{}.geometry", s.id), &s.geometry)?;
        let label = match &s.label {
            Some(l) => Some(out.field(&format!("{}.mssi", s.id), l)?),
            None => None,
        };
        entries.push(Entry { id: s.id.clone(), provenance: s.provenance.clone(), geometry, label });
    }
    out.json("dataset", &Index { samples: entries })
}

pub fn load(dir: &Path) -> Result<Vec<SampleRecord>, CliError> {
    let path = dir.join("dataset.json");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let index: Index = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if index.samples.is_empty() {
        return Err(CliError::Data(format!("{} lists no samples", path.display())));
    }
    index
        .samples
        .into_iter()
        .map(|e| {
            let geometry = load_raw(&dir.join(&e.geometry))?;
            let label = e.label.map(|l| load_raw(&dir.join(l))).transpose()?;
            Ok(SampleRecord { id: e.id, geometry, provenance: e.provenance, label })
        })
        .collect()
}
