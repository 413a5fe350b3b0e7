use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Checkpoint, PoolingMode};
use crate::phantom::Location;

use super::config::Config;
use super::data::Dataset;
use super::split::{split_dataset, Split, SplitMode, SplitSpec};
use super::train::{
    derive_seed, finetune_location, train_classifier, train_segmentation, RunRecord,
};

/// Sign classes shown in comparison tables; fluid level is trained on but
/// not tabulated.
pub const TABLE_CLASSES: [&str; 3] = ["hypodensity", "irregular", "blend"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    SplitStudy,
    LocationStudy,
    AblationStudy,
    MaskStudy,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 4] = [
        ExperimentName::SplitStudy,
        ExperimentName::LocationStudy,
        ExperimentName::AblationStudy,
        ExperimentName::MaskStudy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentName::SplitStudy => "split_study",
            ExperimentName::LocationStudy => "location_study",
            ExperimentName::AblationStudy => "ablation_study",
            ExperimentName::MaskStudy => "mask_study",
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub values: Vec<Option<f64>>,
}

/// A comparison table: one row per condition, one column per metric or class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl StudyTable {
    fn new(title: String, columns: &[&str]) -> Self {
        Self {
            title,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn get(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.label == row)?.values[c]
    }

    /// Tab-separated, `NA` for failed cells.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# {}\ncondition\t{}\n", self.title, self.columns.join("\t"));
        for r in &self.rows {
            s.push_str(&r.label);
            for v in &r.values {
                match v {
                    Some(v) => write!(s, "\t{v:.6}").unwrap(),
                    None => s.push_str("\tNA"),
                }
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub seed: u64,
    pub cell: String,
    pub record: RunRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub name: ExperimentName,
    /// One table per master seed, in seed order.
    pub tables: Vec<(u64, StudyTable)>,
    pub records: Vec<CellRecord>,
    pub failures: Vec<String>,
    /// Number of patient-wise splits checked for leakage.
    pub leakage_checks: usize,
}

impl ExperimentOutcome {
    pub fn tables_tsv(&self) -> String {
        self.tables
            .iter()
            .map(|(_, t)| t.to_tsv())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Writes `tables.tsv`, `records.json` and, if any cell failed,
    /// `failures.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("tables.tsv", self.tables_tsv())?;
        put(
            "records.json",
            serde_json::to_string_pretty(self).expect("outcome serialises"),
        )?;
        if !self.failures.is_empty() {
            put("failures.txt", self.failures.join("\n") + "\n")?;
        }
        Ok(())
    }
}

struct Runner<'a> {
    cfg: &'a Config,
    outcome: ExperimentOutcome,
}

impl Runner<'_> {
    fn split(&mut self, data: &Dataset, mode: SplitMode, seed: u64) -> Result<Split> {
        let spec = SplitSpec {
            mode,
            test_fraction: self.cfg.split.test_fraction,
            seed: derive_seed(seed, "split"),
        };
        let keys = data.keys();
        let split = split_dataset(&keys, &spec)?;
        if mode == SplitMode::ByPatient {
            split.check_patient_leakage(&keys)?;
            self.outcome.leakage_checks += 1;
        }
        Ok(split)
    }

    fn keep(
        &mut self,
        seed: u64,
        cell: &str,
        r: Result<(Checkpoint, RunRecord)>,
    ) -> Option<Checkpoint> {
        match r {
            Ok((ck, record)) => {
                self.outcome.records.push(CellRecord {
                    seed,
                    cell: cell.to_string(),
                    record,
                });
                Some(ck)
            }
            Err(e) => {
                log::error!("seed {seed} cell {cell} failed: {e}");
                self.outcome
                    .failures
                    .push(format!("seed {seed} {cell}: {e}"));
                None
            }
        }
    }

    fn segmenter(
        &mut self,
        data: &Dataset,
        split: &Split,
        seed: u64,
        cell: &str,
    ) -> Option<Checkpoint> {
        let train = super::TrainConfig {
            seed: derive_seed(seed, "seg"),
            location_filter: None,
            ..self.cfg.train_seg.clone()
        };
        let r = train_segmentation(&self.cfg.segmenter, &train, data, split);
        self.keep(seed, cell, r)
    }

    fn last_report(&self) -> &crate::metrics::EvalReport {
        &self
            .outcome
            .records
            .last()
            .expect("just pushed")
            .record
            .report
    }

    fn split_study(&mut self, raw: &Dataset, cooked: &Dataset, seed: u64) -> Result<StudyTable> {
        let mut t = StudyTable::new(
            format!("split_study seed={seed}"),
            &["dice_loss", "iou", "fscore"],
        );
        for mode in [SplitMode::Random, SplitMode::ByPatient] {
            let split = self.split(cooked, mode, seed)?;
            for (prep, data) in [("raw", raw), ("preprocessed", cooked)] {
                let label = format!("{}/{prep}", mode.as_str());
                let values = match self.segmenter(data, &split, seed, &label) {
                    Some(_) => {
                        let r = self.last_report();
                        t.columns.iter().map(|c| r.get(c, "mask")).collect()
                    }
                    None => vec![None; 3],
                };
                t.rows.push(TableRow { label, values });
            }
        }
        Ok(t)
    }

    fn location_study(&mut self, data: &Dataset, seed: u64) -> Result<StudyTable> {
        let columns: Vec<&str> = Location::ALL.iter().map(|l| l.as_str()).collect();
        let mut t = StudyTable::new(format!("location_study seed={seed} (fscore)"), &columns);
        let split = self.split(data, self.cfg.split.mode, seed)?;
        let Some(base) = self.segmenter(data, &split, seed, "all_data") else {
            t.rows.push(TableRow {
                label: "all_data".into(),
                values: vec![None; 3],
            });
            t.rows.push(TableRow {
                label: "finetuned".into(),
                values: vec![None; 3],
            });
            return Ok(t);
        };
        let (mut base_row, mut tuned_row) = (Vec::new(), Vec::new());
        for loc in Location::ALL {
            let train = super::TrainConfig {
                epochs: self.cfg.experiment.finetune_epochs,
                seed: derive_seed(seed, &format!("finetune_{loc}")),
                location_filter: None,
                ..self.cfg.train_seg.clone()
            };
            let r = finetune_location(&base, loc, &train, data, &split);
            if self.keep(seed, &format!("finetune_{loc}"), r).is_some() {
                let rep = self.last_report();
                base_row.push(rep.get("fscore", &format!("{loc}/base")));
                tuned_row.push(rep.get("fscore", &format!("{loc}/finetuned")));
            } else {
                base_row.push(None);
                tuned_row.push(None);
            }
        }
        t.rows.push(TableRow {
            label: "all_data".into(),
            values: base_row,
        });
        t.rows.push(TableRow {
            label: "finetuned".into(),
            values: tuned_row,
        });
        Ok(t)
    }

    /// Classifier grid over `(label, pooling, weighted, masked)` conditions
    /// sharing one split and one frozen segmenter.
    fn classifier_grid(
        &mut self,
        data: &Dataset,
        seed: u64,
        title: String,
        conditions: &[(&str, PoolingMode, bool, bool)],
    ) -> Result<StudyTable> {
        let mut t = StudyTable::new(title, &TABLE_CLASSES);
        let split = self.split(data, SplitMode::ByPatient, seed)?;
        let seg = self.segmenter(data, &split, seed, "segmenter");
        for &(label, pooling, weighted, masked) in conditions {
            let values = match &seg {
                Some(seg) => {
                    let model = crate::models::ClsModelConfig {
                        pooling_mode: pooling,
                        ..self.cfg.classifier.clone()
                    };
                    let train = super::TrainConfig {
                        seed: derive_seed(seed, "cls"),
                        use_weighted_loss: weighted,
                        masked_input: masked,
                        location_filter: None,
                        ..self.cfg.train_cls.clone()
                    };
                    let r = train_classifier(&model, &train, data, &split, seg);
                    if self.keep(seed, label, r).is_some() {
                        let rep = self.last_report();
                        TABLE_CLASSES.iter().map(|c| rep.get("auc", c)).collect()
                    } else {
                        vec![None; 3]
                    }
                }
                None => vec![None; 3],
            };
            t.rows.push(TableRow {
                label: label.to_string(),
                values,
            });
        }
        Ok(t)
    }

    fn wavelet_mode(&self) -> PoolingMode {
        match self.cfg.classifier.pooling_mode {
            PoolingMode::MaxPool => PoolingMode::WaveletMultiresolution,
            m => m,
        }
    }
}

/// Runs one study over the dataset behind `manifest`, once per master seed.
/// A failing grid cell is recorded and the grid continues; split leakage
/// and configuration errors abort.
pub fn run_experiment(
    name: ExperimentName,
    cfg: &Config,
    manifest: &Path,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let cooked = Dataset::load(manifest, &cfg.preprocess, true)?;
    let raw = if name == ExperimentName::SplitStudy {
        Some(Dataset::load(manifest, &cfg.preprocess, false)?)
    } else {
        None
    };
    let mut runner = Runner {
        cfg,
        outcome: ExperimentOutcome {
            name,
            tables: Vec::new(),
            records: Vec::new(),
            failures: Vec::new(),
            leakage_checks: 0,
        },
    };
    let wavelet = runner.wavelet_mode();
    for &seed in &cfg.experiment.seeds {
        let table = match name {
            ExperimentName::SplitStudy => {
                runner.split_study(raw.as_ref().unwrap(), &cooked, seed)?
            }
            ExperimentName::LocationStudy => runner.location_study(&cooked, seed)?,
            ExperimentName::AblationStudy => runner.classifier_grid(
                &cooked,
                seed,
                format!("ablation_study seed={seed} (auc)"),
                &[
                    ("vgg", PoolingMode::MaxPool, false, false),
                    ("weighted_vgg", PoolingMode::MaxPool, true, false),
                    ("wavelet_vgg", wavelet, false, false),
                    ("weighted_wavelet_vgg", wavelet, true, false),
                ],
            )?,
            ExperimentName::MaskStudy => runner.classifier_grid(
                &cooked,
                seed,
                format!("mask_study seed={seed} (auc)"),
                &[
                    ("weighted_wavelet_vgg", wavelet, true, false),
                    ("weighted_wavelet_vgg+mask", wavelet, true, true),
                ],
            )?,
        };
        runner.outcome.tables.push((seed, table));
    }
    Ok(runner.outcome)
}
