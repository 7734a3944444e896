//! Dataset generation, on-disk layout and train/val/test splits.
//!
//! Layout: `manifest.json` plus `scenarios/<id>.abt`, one tensor file per
//! scenario. Labels live only in the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::fleet::AgentRole;
use crate::rng::Rng;
use crate::scenario::{generate_scenario, signature_direction, ScenarioFamily, ScenarioSpec};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const SPLIT_RATIOS: [f64; 3] = [0.7, 0.15, 0.15];
pub const MIN_SCENARIOS: usize = 10;

const LABEL_STREAM: u64 = 0x1abe1;
const NOISE_STREAM: u64 = 0x9015e;
const SPLIT_STREAM: u64 = 0x5b117;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub label: u8,
    pub agents: Vec<AgentRole>,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub count: usize,
    pub seed: u64,
    pub ratios: [f64; 3],
    pub families: Vec<ScenarioFamily>,
    pub scenarios: Vec<ManifestEntry>,
    pub splits: Splits,
}

impl DatasetManifest {
    pub fn split_ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub id: String,
    /// `T × N_A × 6 × P × F`.
    pub tensor: Tensor,
    pub label: u8,
    pub agents: Vec<AgentRole>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub scenarios: Vec<Scenario>,
}

fn scenario_id(i: usize) -> String {
    format!("{i:06}")
}

/// Sizes of the train/val/test splits for `count` scenarios.
pub fn split_sizes(count: usize) -> [usize; 3] {
    let train = (count as f64 * SPLIT_RATIOS[0]).round() as usize;
    let val = (count as f64 * SPLIT_RATIOS[1]).round() as usize;
    [train, val, count - train - val]
}

/// Assign ids to splits by a seeded shuffle. The order of `ids` does not
/// matter.
pub fn assign_splits(ids: &[String], seed: u64) -> Splits {
    let mut order: Vec<&String> = ids.iter().collect();
    order.sort();
    Rng::derive(seed, SPLIT_STREAM).shuffle(&mut order);
    let [train, val, _] = split_sizes(ids.len());
    let collect = |part: &[&String]| {
        let mut v: Vec<String> = part.iter().map(|s| s.to_string()).collect();
        v.sort();
        v
    };
    Splits {
        train: collect(&order[..train]),
        val: collect(&order[train..train + val]),
        test: collect(&order[train + val..]),
    }
}

/// Build a dataset in memory. Scenario `i` uses `families[i % len]`.
/// Exactly `count / 2` scenarios are accidents.
pub fn synthesize(count: usize, families: &[ScenarioFamily], seed: u64) -> Result<Dataset> {
    if count < MIN_SCENARIOS {
        return Err(Error::Config(format!("need at least {MIN_SCENARIOS} scenarios, got {count}")));
    }
    let first = families
        .first()
        .ok_or_else(|| Error::Config("no scenario families given".into()))?;
    for fam in families {
        fam.validate()?;
        if fam.feature_dim != first.feature_dim || fam.patches != first.patches {
            return Err(Error::Config("all families must share patches and feature_dim".into()));
        }
    }
    let direction = signature_direction(seed, first.feature_dim);

    let positives = count / 2;
    let mut labels: Vec<u8> = (0..count).map(|i| u8::from(i < positives)).collect();
    Rng::derive(seed, LABEL_STREAM).shuffle(&mut labels);

    let mut noise = Rng::derive(seed, NOISE_STREAM);
    let mut scenarios = Vec::with_capacity(count);
    let mut entries = Vec::with_capacity(count);
    for (i, &label) in labels.iter().enumerate() {
        let family = &families[i % families.len()];
        let spec = ScenarioSpec {
            family: family.clone(),
            label,
        };
        let tensor = generate_scenario(&spec, &direction, &mut noise)?;
        let id = scenario_id(i);
        entries.push(ManifestEntry {
            id: id.clone(),
            path: format!("scenarios/{id}.abt"),
            label,
            agents: family.agents.clone(),
            frames: family.frames,
        });
        scenarios.push(Scenario {
            id,
            tensor,
            label,
            agents: family.agents.clone(),
        });
    }
    let ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        count,
        seed,
        ratios: SPLIT_RATIOS,
        families: families.to_vec(),
        scenarios: entries,
        splits: assign_splits(&ids, seed),
    };
    Ok(Dataset { manifest, scenarios })
}

/// Generate and write a dataset under `out_dir`.
pub fn generate_dataset(
    count: usize,
    families: &[ScenarioFamily],
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let ds = synthesize(count, families, seed)?;
    ds.write(out_dir)?;
    Ok(ds.manifest)
}

impl Dataset {
    pub fn write(&self, out_dir: impl AsRef<Path>) -> Result<()> {
        let dir = out_dir.as_ref();
        let scen_dir = dir.join("scenarios");
        fs::create_dir_all(&scen_dir).map_err(|e| Error::io(&scen_dir, e))?;
        for (s, entry) in self.scenarios.iter().zip(&self.manifest.scenarios) {
            write_tensor(dir.join(&entry.path), &s.tensor)?;
        }
        let path = dir.join("manifest.json");
        fs::write(&path, self.manifest.to_json()?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Compatibility(format!(
                "manifest version {} (expected {MANIFEST_VERSION})",
                manifest.format_version
            )));
        }
        let mut scenarios = Vec::with_capacity(manifest.scenarios.len());
        for e in &manifest.scenarios {
            let tensor = read_tensor(dir.join(&e.path))?;
            let s = tensor.shape();
            if s.len() != 5 || s[0] != e.frames || s[1] != e.agents.len() {
                return Err(Error::Compatibility(format!(
                    "scenario {} has shape {s:?}, manifest says {} frames × {} agents",
                    e.id,
                    e.frames,
                    e.agents.len()
                )));
            }
            scenarios.push(Scenario {
                id: e.id.clone(),
                tensor,
                label: e.label,
                agents: e.agents.clone(),
            });
        }
        Ok(Dataset { manifest, scenarios })
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    /// Scenarios of one split, in id order.
    pub fn split(&self, split: Split) -> Vec<&Scenario> {
        let ids = self.manifest.split_ids(split);
        self.scenarios
            .iter()
            .filter(|s| ids.binary_search(&s.id).is_ok())
            .collect()
    }

    /// Copy keeping only the listed 1-based frames of every scenario.
    pub fn select_frames(&self, frames: &[usize]) -> Result<Dataset> {
        let mut out = self.clone();
        for (s, e) in out.scenarios.iter_mut().zip(&mut out.manifest.scenarios) {
            let t = s.tensor.shape()[0];
            let mut parts = Vec::with_capacity(frames.len());
            for &f in frames {
                if f == 0 || f > t {
                    return Err(Error::Config(format!("frame {f} outside 1..={t}")));
                }
                parts.push(s.tensor.slice(0, f - 1, 1)?);
            }
            let refs: Vec<&Tensor> = parts.iter().collect();
            s.tensor = Tensor::concat(&refs, 0)?;
            e.frames = frames.len();
        }
        Ok(out)
    }
}
