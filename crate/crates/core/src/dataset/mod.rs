//! Dataset generation, stratified splitting, batching and persistence.
//!
//! A dataset directory holds `manifest.cfg` (TOML: seed, noise, class
//! counts, split indices, normalization statistics, every scenario) and one
//! binary file per split (`train.bin`, `test.bin`, layout in [`format`]).
//! Split files store raw currents in manifest index order; normalization is
//! applied on load with the train-only statistics from the manifest.

pub mod format;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalize_features, NormStats, SystemGraph, TimeSeriesSample};
use crate::rng::{self, derive_seed};
use crate::sim::{simulate_window, ElectricalModel, FaultScenario};
use format::SplitTensor;

pub const MANIFEST_FILE: &str = "manifest.cfg";
pub const TRAIN_FILE: &str = "train.bin";
pub const TEST_FILE: &str = "test.bin";
pub const MANIFEST_FORMAT: &str = "rgtn-dataset";
pub const MANIFEST_VERSION: u32 = 1;

/// Samples per class: normal, seven single-fault positions, double, triple.
pub const CLASS_COUNTS: [usize; 10] = [200, 350, 350, 350, 350, 350, 350, 350, 350, 350];
/// Size of the test split for the default composition.
pub const TEST_SAMPLES: usize = 650;
/// Noise levels of the robustness sweep.
pub const NOISE_LEVELS: [f64; 4] = [0.0, 0.05, 0.08, 0.10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// How many samples of which class, and how many go to the test split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub class_counts: Vec<usize>,
    pub test_samples: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            class_counts: CLASS_COUNTS.to_vec(),
            test_samples: TEST_SAMPLES,
        }
    }
}

impl DatasetSpec {
    /// Same class proportions and test share as the default, scaled down.
    /// Used for quick runs and tests.
    pub fn scaled(divisor: usize) -> Self {
        let class_counts: Vec<usize> = CLASS_COUNTS.iter().map(|c| (c / divisor).max(2)).collect();
        let total: usize = class_counts.iter().sum();
        let test_samples = ((total * TEST_SAMPLES) as f64 / CLASS_COUNTS.iter().sum::<usize>() as f64).round() as usize;
        DatasetSpec {
            class_counts,
            test_samples: test_samples.max(1),
        }
    }

    pub fn total(&self) -> usize {
        self.class_counts.iter().sum()
    }

    /// Test samples per class by largest remainder: each class gets the floor
    /// of its proportional share, and the leftover samples go to the classes
    /// with the largest fractional parts (lowest class first on ties).
    pub fn test_allocation(&self) -> Result<Vec<usize>> {
        let total = self.total();
        if total == 0 || self.test_samples > total {
            return Err(Error::InvalidArgument(format!(
                "cannot draw {} test samples from {total}",
                self.test_samples
            )));
        }
        let mut alloc: Vec<usize> = self
            .class_counts
            .iter()
            .map(|&c| c * self.test_samples / total)
            .collect();
        let mut order: Vec<usize> = (0..self.class_counts.len()).collect();
        // Fractional part of c·T/total, compared exactly as a remainder.
        order.sort_by_key(|&k| std::cmp::Reverse((self.class_counts[k] * self.test_samples) % total));
        let mut left = self.test_samples - alloc.iter().sum::<usize>();
        for k in order {
            if left == 0 {
                break;
            }
            alloc[k] += 1;
            left -= 1;
        }
        Ok(alloc)
    }
}

/// Everything about a generated dataset except the measurements themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub topology_hash: String,
    #[serde(with = "rng::seed_string")]
    pub seed: u64,
    pub noise: f64,
    pub class_counts: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub train_sha256: String,
    pub test_sha256: String,
    /// Per-channel statistics of the train split.
    pub norm: NormStats,
    #[serde(rename = "scenario")]
    pub scenarios: Vec<FaultScenario>,
}

impl DatasetManifest {
    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_indices,
            Split::Test => &self.test_indices,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("manifest encode: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: DatasetManifest = toml::from_str(text).map_err(|e| Error::Format(format!("manifest decode: {e}")))?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest {:?} version {}",
                m.format, m.version
            )));
        }
        m.check_split()?;
        Ok(m)
    }

    fn check_split(&self) -> Result<()> {
        let total = self.scenarios.len();
        let mut seen = vec![false; total];
        for &i in self.train_indices.iter().chain(&self.test_indices) {
            if i >= total || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Format(format!("split index {i} is out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Format("splits do not cover every sample".into()));
        }
        Ok(())
    }

    /// SHA-256 of the manifest text.
    pub fn hash(&self) -> Result<String> {
        Ok(rng::sha256_hex(self.to_toml()?.as_bytes()))
    }
}

/// A dataset in memory: manifest plus raw samples in global index order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<TimeSeriesSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&TimeSeriesSample> {
        self.manifest.indices(split).iter().map(|&i| &self.samples[i]).collect()
    }

    /// Samples of a split standardized with the manifest statistics.
    pub fn normalized(&self, split: Split) -> Result<Vec<TimeSeriesSample>> {
        self.split(split)
            .into_iter()
            .map(|s| normalize_features(s, &self.manifest.norm))
            .collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.manifest.class_counts.len()];
        for s in &self.samples {
            h[s.label as usize] += 1;
        }
        h
    }

    fn split_tensor(&self, split: Split) -> SplitTensor {
        let samples = self.split(split);
        let (steps, nodes, features) = samples
            .first()
            .map_or((0, 0, 0), |s| (s.steps, s.nodes, s.features));
        SplitTensor {
            steps,
            nodes,
            features,
            values: samples.iter().flat_map(|s| s.values.iter().copied()).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
        }
    }

    /// Writes the manifest and both split files, replacing existing ones.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (split, name) in [(Split::Train, TRAIN_FILE), (Split::Test, TEST_FILE)] {
            let path = dir.join(name);
            fs::write(&path, self.split_tensor(split).encode()).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.manifest.to_toml()?).map_err(|e| Error::io(&path, e))
    }

    /// Loads a dataset directory, checking file hashes, shapes and labels
    /// against the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = DatasetManifest::from_toml(&text)?;
        let mut samples: Vec<Option<TimeSeriesSample>> = vec![None; manifest.scenarios.len()];
        for (split, name, digest) in [
            (Split::Train, TRAIN_FILE, &manifest.train_sha256),
            (Split::Test, TEST_FILE, &manifest.test_sha256),
        ] {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if rng::sha256_hex(&bytes) != *digest {
                return Err(Error::Format(format!("{} does not match the manifest hash", path.display())));
            }
            let tensor = SplitTensor::decode(&bytes)?;
            let indices = manifest.indices(split);
            if tensor.count() != indices.len() {
                return Err(Error::Format(format!(
                    "{} holds {} samples, manifest lists {}",
                    path.display(),
                    tensor.count(),
                    indices.len()
                )));
            }
            let len = tensor.steps * tensor.nodes * tensor.features;
            for (row, &i) in indices.iter().enumerate() {
                let scenario = manifest.scenarios[i].clone();
                let label = tensor.labels[row];
                if scenario.label()? != label {
                    return Err(Error::Format(format!("sample {i}: stored label {label} contradicts its scenario")));
                }
                samples[i] = Some(TimeSeriesSample {
                    steps: tensor.steps,
                    nodes: tensor.nodes,
                    features: tensor.features,
                    values: tensor.values[row * len..(row + 1) * len].to_vec(),
                    label,
                    scenario,
                });
            }
        }
        Ok(Dataset {
            manifest,
            samples: samples.into_iter().map(|s| s.expect("split coverage checked")).collect(),
        })
    }
}

/// Simulates every sample of `spec`, splits them and computes train-split
/// normalization statistics.
///
/// Samples are ordered by class. Sample `i` uses scenario seed
/// `derive_seed(seed, "sample/{i}")`, so any sample can be regenerated alone.
pub fn generate_dataset(graph: &SystemGraph, seed: u64, noise: f64, spec: &DatasetSpec) -> Result<Dataset> {
    let model = ElectricalModel::from_graph(graph)?;
    let mut samples = Vec::with_capacity(spec.total());
    let mut scenarios = Vec::with_capacity(spec.total());
    for (label, &count) in spec.class_counts.iter().enumerate() {
        for _ in 0..count {
            let i = samples.len();
            let scenario =
                FaultScenario::random(label as u8, model.load_count(), noise, derive_seed(seed, &format!("sample/{i}")))?;
            samples.push(simulate_window(graph, &scenario)?.sample);
            scenarios.push(scenario);
        }
    }

    let alloc = spec.test_allocation()?;
    let mut split_rng = rng::stream(seed, "split");
    let mut train_indices = Vec::new();
    let mut test_indices = Vec::new();
    let mut start = 0;
    for (&count, &test) in spec.class_counts.iter().zip(&alloc) {
        let mut members: Vec<usize> = (start..start + count).collect();
        members.shuffle(&mut split_rng);
        test_indices.extend_from_slice(&members[..test]);
        train_indices.extend_from_slice(&members[test..]);
        start += count;
    }
    train_indices.sort_unstable();
    test_indices.sort_unstable();

    let norm = NormStats::from_samples(train_indices.iter().map(|&i| &samples[i]))?;
    let mut dataset = Dataset {
        manifest: DatasetManifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            topology_hash: graph.config_hash().to_string(),
            seed,
            noise,
            class_counts: spec.class_counts.clone(),
            train_indices,
            test_indices,
            train_sha256: String::new(),
            test_sha256: String::new(),
            norm,
            scenarios,
        },
        samples,
    };
    dataset.manifest.train_sha256 = rng::sha256_hex(&dataset.split_tensor(Split::Train).encode());
    dataset.manifest.test_sha256 = rng::sha256_hex(&dataset.split_tensor(Split::Test).encode());
    Ok(dataset)
}

/// Positions into a split's index list, grouped into batches.
///
/// With `shuffle = Some(seed)` the order is a permutation drawn from
/// `derive_seed(seed, "shuffle/{epoch}")`; otherwise manifest order. The last
/// batch may be short.
pub fn batches(len: usize, batch_size: usize, shuffle: Option<u64>, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if len == 0 {
        return Err(Error::EmptySplit);
    }
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle {
        order.shuffle(&mut rng::stream(seed, &format!("shuffle/{epoch}")));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// [`batches`] over a manifest split, yielding global sample indices.
pub fn split_batches(
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
    shuffle: Option<u64>,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    let indices = manifest.indices(split);
    Ok(batches(indices.len(), batch_size, shuffle, epoch)?
        .into_iter()
        .map(|b| b.into_iter().map(|p| indices[p]).collect())
        .collect())
}

#[cfg(test)]
mod tests;
