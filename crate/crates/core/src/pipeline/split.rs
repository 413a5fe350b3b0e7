use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Shuffle individual slices.
    Random,
    /// Shuffle patients; every slice of a patient lands on one side.
    ByPatient,
}

impl SplitMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitMode::Random => "random",
            SplitMode::ByPatient => "by_patient",
        }
    }
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SplitMode::Random),
            "by_patient" => Ok(SplitMode::ByPatient),
            other => Err(Error::Config(format!("unknown split mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            mode: SplitMode::ByPatient,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction {} must lie in (0, 1)",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

/// Train/test partition as sorted case indices, with content hashes of the
/// case ids on each side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub mode: SplitMode,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub train_hash: String,
    pub test_hash: String,
}

fn id_hash<'a>(ids: impl Iterator<Item = &'a str>) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex(&h.finalize())
}

fn test_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

/// Partitions cases given as `(case_id, patient_id)` pairs, deterministically
/// under `spec.seed`.
pub fn split_dataset<'a>(cases: &[(&'a str, &'a str)], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if cases.len() < 2 {
        return Err(Error::Split(format!(
            "cannot split {} case(s)",
            cases.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut is_test = vec![false; cases.len()];
    match spec.mode {
        SplitMode::Random => {
            let mut order: Vec<usize> = (0..cases.len()).collect();
            order.shuffle(&mut rng);
            for &i in &order[..test_count(cases.len(), spec.test_fraction)] {
                is_test[i] = true;
            }
        }
        SplitMode::ByPatient => {
            let mut patients: Vec<&str> = cases
                .iter()
                .map(|(_, p)| *p)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if patients.len() < 2 {
                return Err(Error::Split(format!(
                    "patient-wise split needs at least 2 patients, found {}",
                    patients.len()
                )));
            }
            patients.shuffle(&mut rng);
            let held: BTreeSet<&str> = patients[..test_count(patients.len(), spec.test_fraction)]
                .iter()
                .copied()
                .collect();
            for (i, (_, p)) in cases.iter().enumerate() {
                is_test[i] = held.contains(p);
            }
        }
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..cases.len()).partition(|&i| is_test[i]);
    let split = Split {
        mode: spec.mode,
        train_hash: id_hash(train.iter().map(|&i| cases[i].0)),
        test_hash: id_hash(test.iter().map(|&i| cases[i].0)),
        train,
        test,
    };
    if spec.mode == SplitMode::ByPatient {
        split.check_patient_leakage(cases)?;
    }
    Ok(split)
}

impl Split {
    /// Fails if any patient has slices on both sides.
    pub fn check_patient_leakage(&self, cases: &[(&str, &str)]) -> Result<()> {
        let train: BTreeSet<&str> = self.train.iter().map(|&i| cases[i].1).collect();
        let shared: Vec<&str> = self
            .test
            .iter()
            .map(|&i| cases[i].1)
            .filter(|p| train.contains(p))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if shared.is_empty() {
            Ok(())
        } else {
            Err(Error::Split(format!(
                "patients on both sides of the split: {}",
                shared.join(", ")
            )))
        }
    }

    /// Number of patients whose slices appear on both sides.
    pub fn straddling_patients(&self, cases: &[(&str, &str)]) -> usize {
        let mut sides: BTreeMap<&str, [bool; 2]> = BTreeMap::new();
        for &i in &self.train {
            sides.entry(cases[i].1).or_default()[0] = true;
        }
        for &i in &self.test {
            sides.entry(cases[i].1).or_default()[1] = true;
        }
        sides.values().filter(|s| s[0] && s[1]).count()
    }

    /// Keeps only indices accepted by `keep` on both sides.
    pub fn restrict(&self, cases: &[(&str, &str)], keep: impl Fn(usize) -> bool) -> Split {
        let train: Vec<usize> = self.train.iter().copied().filter(|&i| keep(i)).collect();
        let test: Vec<usize> = self.test.iter().copied().filter(|&i| keep(i)).collect();
        Split {
            mode: self.mode,
            train_hash: id_hash(train.iter().map(|&i| cases[i].0)),
            test_hash: id_hash(test.iter().map(|&i| cases[i].0)),
            train,
            test,
        }
    }
}
