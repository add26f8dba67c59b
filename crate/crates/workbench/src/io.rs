//! File formats: MDP JSON, dataset JSON Lines with a meta file, trace CSVs
//! and output manifests.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use cpql_core::cpql::TrainRecord;
use cpql_core::dataset::{DatasetMeta, Episode, TrajectoryDataset};
use cpql_core::online::{O2oRecord, Phase};
use cpql_core::{FiniteMdp, QTable, TabularPolicy};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

pub const TOOL_NAME: &str = "cpql";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Nested-array MDP layout: `r[s][a]`, `P[s][a][s']`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "A")]
    pub num_actions: usize,
    pub gamma: f64,
    pub r_max: f64,
    pub d0: Vec<f64>,
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "P")]
    pub p: Vec<Vec<Vec<f64>>>,
}

impl MdpFile {
    pub fn from_mdp(mdp: &FiniteMdp) -> Self {
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        Self {
            num_states: ns,
            num_actions: na,
            gamma: mdp.gamma(),
            r_max: mdp.r_max(),
            d0: mdp.d0().to_vec(),
            r: mdp.rewards().chunks(na).map(<[f64]>::to_vec).collect(),
            p: (0..ns)
                .map(|s| (0..na).map(|a| mdp.next_dist(s, a).to_vec()).collect())
                .collect(),
        }
    }

    pub fn to_mdp(&self) -> cpql_core::Result<FiniteMdp> {
        let (ns, na) = (self.num_states, self.num_actions);
        let shape_err = |what: &str| Err(cpql_core::Error::InvalidMdp(format!("{what} does not match S={ns}, A={na}")));
        if self.r.len() != ns || self.r.iter().any(|row| row.len() != na) {
            return shape_err("r");
        }
        if self.p.len() != ns || self.p.iter().any(|rows| rows.len() != na || rows.iter().any(|row| row.len() != ns)) {
            return shape_err("P");
        }
        FiniteMdp::new(
            ns,
            na,
            self.gamma,
            self.r_max,
            self.d0.clone(),
            self.r.concat(),
            self.p.iter().flat_map(|rows| rows.iter().flatten().copied()).collect(),
        )
    }
}

/// Policy layout `probs[s][a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "A")]
    pub num_actions: usize,
    pub probs: Vec<Vec<f64>>,
}

impl PolicyFile {
    pub fn from_policy(pi: &TabularPolicy) -> Self {
        Self {
            num_states: pi.num_states(),
            num_actions: pi.num_actions(),
            probs: pi.probs().chunks(pi.num_actions()).map(<[f64]>::to_vec).collect(),
        }
    }
}

/// Final tables of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TablesFile {
    /// `tables[j][s][a]`, one entry per table.
    pub tables: Vec<Vec<Vec<f64>>>,
    pub policy: Vec<Vec<f64>>,
}

impl TablesFile {
    pub fn new(tables: &[QTable], policy: &TabularPolicy) -> Self {
        Self {
            tables: tables
                .iter()
                .map(|q| q.values().chunks(q.num_actions()).map(<[f64]>::to_vec).collect())
                .collect(),
            policy: PolicyFile::from_policy(policy).probs,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the compact JSON encoding.
pub fn json_sha256<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("serializable value"))
}

pub fn mdp_sha256(mdp: &FiniteMdp) -> String {
    json_sha256(&MdpFile::from_mdp(mdp))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::read(path, e))
}

/// Parses a JSON file; parse errors name the path and the offending field.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

pub fn read_mdp(path: &Path) -> Result<FiniteMdp> {
    let file: MdpFile = read_json(path)?;
    file.to_mdp().map_err(|e| invalid(&path.display().to_string(), e))
}

/// Reads a JSON Lines dataset against a known state and action count. A
/// `dataset.meta.json` next to the file is attached when present.
pub fn read_dataset(path: &Path, num_states: usize, num_actions: usize) -> Result<TrajectoryDataset> {
    let file = fs::File::open(path).map_err(|e| Error::read(path, e))?;
    let mut episodes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::read(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line)
            .map_err(|e| Error::config(format!("{} line {}: {e}", path.display(), i + 1)))?;
        episodes.push(ep);
    }
    let mut ds = TrajectoryDataset::from_episodes(num_states, num_actions, episodes)
        .map_err(|e| invalid(&path.display().to_string(), e))?;
    let meta_path = meta_path_for(path);
    if meta_path.exists() {
        ds = ds.with_meta(read_json::<DatasetMeta>(&meta_path)?);
    }
    Ok(ds)
}

/// `dataset.meta.json` in the dataset's directory.
pub fn meta_path_for(dataset: &Path) -> PathBuf {
    dataset.with_file_name("dataset.meta.json")
}

pub fn dataset_jsonl(ds: &TrajectoryDataset) -> String {
    let mut out = String::new();
    for ep in &ds.episodes {
        out.push_str(&serde_json::to_string(ep).expect("serializable episode"));
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct TrainRow {
    iter: usize,
    td_loss: f64,
    penalty: f64,
    avg_q: f64,
    j_eval: Option<f64>,
}

#[derive(Serialize)]
struct O2oRow {
    phase: Phase,
    step: usize,
    avg_q: f64,
    j_eval: Option<f64>,
}

fn csv_string<R: Serialize>(rows: impl IntoIterator<Item = R>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::runtime(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::runtime(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `iter,td_loss,penalty,avg_q,j_eval`; `j_eval` is empty between evaluations.
pub fn train_csv(records: &[TrainRecord]) -> Result<String> {
    csv_string(records.iter().map(|r| TrainRow {
        iter: r.iter,
        td_loss: r.td_loss,
        penalty: r.penalty,
        avg_q: r.avg_q,
        j_eval: r.j_eval,
    }))
}

/// `phase,step,avg_q,j_eval`.
pub fn o2o_csv(records: &[O2oRecord]) -> Result<String> {
    csv_string(records.iter().map(|r| O2oRow {
        phase: r.phase,
        step: r.step,
        avg_q: r.avg_q,
        j_eval: r.j_eval,
    }))
}

pub fn summary_csv<R: Serialize>(rows: impl IntoIterator<Item = R>) -> Result<String> {
    csv_string(rows)
}

pub fn pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub outputs: Vec<OutputEntry>,
}

/// An output directory that records every file it writes and closes with
/// `manifest.json`.
pub struct OutputDir {
    root: PathBuf,
    written: Vec<OutputEntry>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::write(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn text(&mut self, rel: &str, content: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))?;
        }
        let mut f = fs::File::create(&path).map_err(|e| Error::write(&path, e))?;
        f.write_all(content.as_bytes()).map_err(|e| Error::write(&path, e))?;
        self.written.push(OutputEntry {
            path: rel.to_string(),
            sha256: sha256_hex(content.as_bytes()),
        });
        Ok(path)
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        self.text(rel, &pretty_json(value))
    }

    /// Writes `manifest.json` listing every file in write order.
    pub fn finish<C: Serialize>(mut self, command: &str, config: &C) -> Result<Manifest> {
        let manifest = Manifest {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            command: command.into(),
            config: serde_json::to_value(config).expect("serializable config"),
            outputs: std::mem::take(&mut self.written),
        };
        let path = self.root.join("manifest.json");
        fs::write(&path, pretty_json(&manifest)).map_err(|e| Error::write(&path, e))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cpql_core::dataset::collect_trajectories;
    use cpql_core::envs::{chain, random_mdp, random_policy};

    #[test]
    fn mdp_round_trips() {
        let mdp = random_mdp(5, 3, 2, 0.3, 0.9, 7).unwrap();
        let text = pretty_json(&MdpFile::from_mdp(&mdp));
        let back: MdpFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_mdp().unwrap(), mdp);
        assert!(text.contains("\"S\": 5") && text.contains("\"P\""));
    }

    #[test]
    fn loader_rejects_invariant_violations() {
        let mut file = MdpFile::from_mdp(&chain(3, 0.1, 0.9).unwrap());
        file.p[1][0][0] += 0.01;
        assert!(file.to_mdp().is_err());
        let mut file = MdpFile::from_mdp(&chain(3, 0.1, 0.9).unwrap());
        file.r.pop();
        assert!(file.to_mdp().is_err());
    }

    #[test]
    fn dataset_round_trips_with_meta() {
        let mdp = random_mdp(4, 2, 2, 0.5, 0.9, 1).unwrap();
        let pi = random_policy(4, 2, 2);
        let ds = collect_trajectories(&mdp, &pi, 6, 7, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        let path = out.text("dataset.jsonl", &dataset_jsonl(&ds)).unwrap();
        let meta = DatasetMeta {
            mdp_sha256: mdp_sha256(&mdp),
            policy_sha256: json_sha256(&PolicyFile::from_policy(&pi)),
            seed: 3,
            horizon: 7,
            gamma: 0.9,
        };
        out.json("dataset.meta.json", &meta).unwrap();
        let back = read_dataset(&path, 4, 2).unwrap();
        assert_eq!(back.episodes, ds.episodes);
        assert_eq!(back.meta, Some(meta));
        let manifest = out.finish("collect", &serde_json::json!({})).unwrap();
        assert_eq!(manifest.outputs.len(), 2);
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn bad_dataset_line_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(&path, "{\"states\":[0,1],\"actions\":[0],\"rewards\":[0.0]}\n{\"states\":[0]}\n").unwrap();
        let err = read_dataset(&path, 2, 2).unwrap_err();
        assert!(err.to_string().contains("line 2"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn trace_csv_has_the_expected_header() {
        let records = [
            TrainRecord {
                iter: 0,
                td_loss: 0.5,
                penalty: 0.1,
                avg_q: 1.0,
                j_eval: None,
            },
            TrainRecord {
                iter: 1,
                td_loss: 0.25,
                penalty: 0.1,
                avg_q: 1.5,
                j_eval: Some(2.0),
            },
        ];
        let text = train_csv(&records).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("iter,td_loss,penalty,avg_q,j_eval"));
        assert_eq!(lines.next(), Some("0,0.5,0.1,1.0,"));
        assert_eq!(lines.next(), Some("1,0.25,0.1,1.5,2.0"));
    }

    #[test]
    fn missing_file_is_a_config_error_naming_the_path() {
        let err = read_json::<MdpFile>(Path::new("/nonexistent/mdp.json")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/nonexistent/mdp.json"));
    }
}
