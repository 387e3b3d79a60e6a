use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// `1 - sqrt(K / M)` for `K` training classes out of `M` test classes.
pub fn openness(k: usize, m: usize) -> Result<f64> {
    if k == 0 || k > m {
        return Err(invalid!("openness needs 1 <= K <= M, got K = {k}, M = {m}"));
    }
    Ok(1.0 - (k as f64 / m as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub dataset: String,
    pub seed: u64,
    pub known_classes: Vec<usize>,
    pub unknown_classes: Vec<usize>,
    pub openness: f64,
}

impl SplitSpec {
    pub fn num_known(&self) -> usize {
        self.known_classes.len()
    }

    /// Position of `class` among the known classes, which is its training label.
    pub fn known_index(&self, class: usize) -> Option<usize> {
        self.known_classes.iter().position(|&c| c == class)
    }

    pub fn is_unknown(&self, class: usize) -> bool {
        self.unknown_classes.contains(&class)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub known: Vec<usize>,
    pub unknown: Vec<usize>,
}

/// On-disk split set, `{dataset, seed, splits: [{known, unknown}]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub dataset: String,
    pub seed: u64,
    pub splits: Vec<SplitEntry>,
}

impl SplitFile {
    pub fn specs(&self) -> Result<Vec<SplitSpec>> {
        self.splits
            .iter()
            .map(|s| {
                if s.known.iter().any(|c| s.unknown.contains(c)) {
                    return Err(invalid!("split has classes both known and unknown"));
                }
                Ok(SplitSpec {
                    dataset: self.dataset.clone(),
                    seed: self.seed,
                    known_classes: s.known.clone(),
                    unknown_classes: s.unknown.clone(),
                    openness: openness(s.known.len(), s.known.len() + s.unknown.len())?,
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SplitFile = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        file.specs()?;
        Ok(file)
    }
}

/// `n_splits` seeded known/unknown partitions of `0..n_classes`.
///
/// Each split is an independent draw; class lists are stored sorted.
pub fn make_splits(dataset: &str, n_classes: usize, n_splits: usize, k_known: usize, seed: u64) -> Result<SplitFile> {
    if k_known == 0 || k_known >= n_classes {
        return Err(invalid!("need 1 <= K_known < {n_classes}, got {k_known}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let splits = (0..n_splits)
        .map(|_| {
            let mut classes: Vec<usize> = (0..n_classes).collect();
            classes.shuffle(&mut rng);
            let mut known = classes[..k_known].to_vec();
            let mut unknown = classes[k_known..].to_vec();
            known.sort_unstable();
            unknown.sort_unstable();
            SplitEntry { known, unknown }
        })
        .collect();
    Ok(SplitFile {
        dataset: dataset.to_string(),
        seed,
        splits,
    })
}
