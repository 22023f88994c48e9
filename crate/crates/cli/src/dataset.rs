use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vagco::exact::OracleResult;
use vagco::graph::Graph;
use vagco::instance_gen::{load_edgelist, write_edgelist, GeneratorSpec};
use vagco::ising::{encode, ProblemInstance, ProblemKind};
use vagco::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "vagco-dataset/1";
pub const ORACLE_FORMAT: &str = "vagco-oracle/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    /// Edge-list file relative to the dataset directory.
    pub file: String,
    pub n: usize,
    pub edges: usize,
    pub generator: Option<GeneratorSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub entries: Vec<Entry>,
}

/// Write graphs as `<id>.edges` plus a manifest.
pub fn write_dataset(dir: &Path, seed: u64, graphs: &[(String, Graph, Option<GeneratorSpec>)]) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(graphs.len());
    for (id, g, spec) in graphs {
        let file = format!("{id}.edges");
        std::fs::write(dir.join(&file), write_edgelist(g))?;
        entries.push(Entry { id: id.clone(), file, n: g.n(), edges: g.num_edges(), generator: spec.clone() });
    }
    let m = Manifest { format: MANIFEST_FORMAT.into(), seed, entries };
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(m)
}

pub struct Dataset {
    pub manifest: Manifest,
    pub graphs: Vec<Graph>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Input(format!("dataset format {:?}, expected {MANIFEST_FORMAT:?}", manifest.format)));
        }
        let graphs = manifest
            .entries
            .iter()
            .map(|e| {
                let g = load_edgelist(&dir.join(&e.file))?;
                if g.n() != e.n {
                    return Err(Error::Input(format!("{}: manifest says {} nodes, file has {}", e.id, e.n, g.n())));
                }
                Ok(g)
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { manifest, graphs })
    }

    pub fn ids(&self) -> Vec<String> {
        self.manifest.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn encode(&self, kind: ProblemKind, a: f64, b: f64) -> Result<Vec<ProblemInstance>> {
        self.graphs.iter().map(|g| encode(kind, g, a, b)).collect()
    }
}

/// One solved instance as written by `oracle`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleFile {
    pub format: String,
    pub instance_id: String,
    pub kind: ProblemKind,
    pub penalty_a: f64,
    pub penalty_b: f64,
    pub result: OracleResult,
}

pub fn oracle_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.oracle.json"))
}

/// Optimal energies for `ids`; `None` where no oracle file exists. A file for the
/// wrong problem kind or penalties is an error.
pub fn load_oracles(dir: &Path, ids: &[String], kind: ProblemKind, a: f64, b: f64) -> Result<Vec<Option<f64>>> {
    ids.iter()
        .map(|id| {
            let path = oracle_path(dir, id);
            if !path.exists() {
                return Ok(None);
            }
            let f: OracleFile = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            if f.kind != kind || (kind.is_constrained() && (f.penalty_a != a || f.penalty_b != b)) {
                return Err(Error::Input(format!("{}: oracle solved {} with A={}, B={}", path.display(), f.kind, f.penalty_a, f.penalty_b)));
            }
            Ok(Some(f.result.best_energy))
        })
        .collect()
}
