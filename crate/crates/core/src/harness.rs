//! The episodic evaluation protocol: shot sweeps over repeated seeds,
//! trimmed-mean reporting, ablations and domain shift.
//!
//! Each `(shot, seed)` cell is an independent job. Cells may run on a
//! thread pool, and results are merged in cell order, so a report is a
//! pure function of its inputs regardless of the number of jobs.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{augment_with_labels, sample_episode, FeatureStore};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::optim::{evaluate_accuracy, initialize, train_episode, TrainConfig};

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const STD_CONVENTION: &str = "population standard deviation over all seeds";
pub const TRIM_CONVENTION: &str = "mean after dropping one highest and one lowest score";

/// Fraction of positions where `predictions` and `labels` agree.
pub fn accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean after removing exactly one maximal and one minimal score.
pub fn trimmed_mean(scores: &[f64]) -> Result<f64> {
    if scores.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "trimmed mean needs at least 3 scores, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let kept = &sorted[1..sorted.len() - 1];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Population standard deviation.
pub fn std_dev(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("standard deviation of no scores".into()));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    if scores.iter().all(|&s| s == scores[0]) {
        return Ok(0.0);
    }
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub shots: Vec<usize>,
    pub num_seeds: usize,
    pub base_seed: u64,
    pub variant: Variant,
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// One text embedding per class, appended to every train split.
    pub label_features: Option<Vec<Vec<f64>>>,
    /// Worker threads for `(shot, seed)` cells. Does not affect results.
    pub jobs: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            shots: vec![2, 8, 16, 32],
            num_seeds: 10,
            base_seed: 0,
            variant: Variant::Full,
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            label_features: None,
            jobs: 1,
        }
    }
}

impl ProtocolConfig {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.num_seeds as u64).map(|i| self.base_seed + i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::Config("shots must be a non-empty list of positive counts".into()));
        }
        if self.num_seeds < 3 {
            return Err(Error::Config(format!(
                "num_seeds must be at least 3 for the trimmed mean, got {}",
                self.num_seeds
            )));
        }
        self.base_seed
            .checked_add(self.num_seeds as u64)
            .ok_or_else(|| Error::Config("base_seed + num_seeds overflows".into()))?;
        self.train.validate()
    }
}

/// Configuration as recorded in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub mode: String,
    pub variant: Variant,
    pub z: usize,
    pub branches: Vec<String>,
    pub shots: Vec<usize>,
    pub num_seeds: usize,
    pub base_seed: u64,
    pub seeds: Vec<u64>,
    pub train_store: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_store: Option<String>,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub label_augmentation: bool,
    pub trimming: String,
    pub std_convention: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub shot: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub epochs_ran: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotSummary {
    pub shot: usize,
    pub trimmed_mean: f64,
    pub std_dev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub format_version: u32,
    pub config: ConfigEcho,
    pub cells: Vec<CellResult>,
    pub summaries: Vec<ShotSummary>,
    /// Summed cell wall-clock time per shot. Not serialized, so reports stay
    /// byte-identical across runs.
    #[serde(skip)]
    pub timings: Vec<(usize, Duration)>,
}

impl ProtocolReport {
    pub fn summary(&self, shot: usize) -> Option<&ShotSummary> {
        self.summaries.iter().find(|s| s.shot == shot)
    }

    pub fn scores(&self, shot: usize) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.shot == shot)
            .map(|c| c.accuracy)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Reports of several variants run on identical seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub format_version: u32,
    pub reports: Vec<ProtocolReport>,
}

impl AblationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn get(&self, variant: Variant) -> Option<&ProtocolReport> {
        self.reports.iter().find(|r| r.config.variant == variant)
    }
}

/// Parses either a single protocol report or an ablation report.
pub fn parse_reports(json: &str) -> Result<Vec<ProtocolReport>> {
    let value: serde_json::Value = serde_json::from_str(json)?;
    if value.get("reports").is_some() {
        let ablation: AblationReport = serde_json::from_value(value)?;
        Ok(ablation.reports)
    } else {
        Ok(vec![serde_json::from_value(value)?])
    }
}

/// One summary line of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub mode: String,
    pub shot: usize,
    pub num_seeds: usize,
    pub trimmed_mean: f64,
    pub std_dev: f64,
}

/// One row per `(variant, shot)`, in report order.
pub fn summary_rows(reports: &[ProtocolReport]) -> Vec<SummaryRow> {
    reports
        .iter()
        .flat_map(|r| {
            r.summaries.iter().map(|s| SummaryRow {
                variant: r.config.variant,
                mode: r.config.mode.clone(),
                shot: s.shot,
                num_seeds: r.config.num_seeds,
                trimmed_mean: s.trimmed_mean,
                std_dev: s.std_dev,
            })
        })
        .collect()
}

pub fn reports_to_csv(reports: &[ProtocolReport]) -> String {
    let mut out = String::from("variant,mode,shot,num_seeds,trimmed_mean,std_dev\n");
    for row in summary_rows(reports) {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.variant, row.mode, row.shot, row.num_seeds, row.trimmed_mean, row.std_dev
        ));
    }
    out
}

fn run_cell(
    train_store: &FeatureStore,
    test_store: Option<&FeatureStore>,
    shot: usize,
    seed: u64,
    cfg: &ProtocolConfig,
) -> Result<(CellResult, Duration)> {
    let started = Instant::now();
    let episode = sample_episode(train_store, shot, seed, cfg.train.use_validation)?;
    let episode = augment_with_labels(
        episode,
        cfg.label_features.as_deref(),
        train_store.dimension(),
    )?;
    let mut resolved = episode.resolve(train_store)?;
    if let Some(test) = test_store {
        resolved.test = test.records().iter().collect();
    }
    if resolved.test.is_empty() {
        return Err(Error::InvalidInput("episode has an empty test set".into()));
    }
    let model = initialize(cfg.train.init, train_store.dimension(), cfg.variant, cfg.model, seed)?;
    let train_cfg = TrainConfig {
        init_seed: seed,
        ..cfg.train
    };
    let (trained, history) = train_episode(&resolved, model, &train_cfg)?;
    let accuracy = evaluate_accuracy(&trained, &resolved.test)?;
    Ok((
        CellResult {
            shot,
            seed,
            accuracy,
            epochs_ran: history.epochs_ran(),
            best_epoch: history.best_epoch,
        },
        started.elapsed(),
    ))
}

fn run_cells(
    train_store: &FeatureStore,
    test_store: Option<&FeatureStore>,
    cfg: &ProtocolConfig,
) -> Result<ProtocolReport> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let jobs: Vec<(usize, u64)> = cfg
        .shots
        .iter()
        .flat_map(|&shot| seeds.iter().map(move |&seed| (shot, seed)))
        .collect();
    let work = |&(shot, seed): &(usize, u64)| {
        run_cell(train_store, test_store, shot, seed, cfg).map_err(|e| Error::Cell {
            shot,
            seed,
            source: Box::new(e),
        })
    };
    let results: Vec<Result<(CellResult, Duration)>> = if cfg.jobs <= 1 {
        jobs.iter().map(work).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.jobs)))?;
        pool.install(|| jobs.par_iter().map(work).collect())
    };

    let mut cells = Vec::with_capacity(results.len());
    let mut timings: Vec<(usize, Duration)> = cfg.shots.iter().map(|&s| (s, Duration::ZERO)).collect();
    for (i, r) in results.into_iter().enumerate() {
        let (cell, elapsed) = r?;
        timings[i / seeds.len()].1 += elapsed;
        cells.push(cell);
    }
    let mut summaries = Vec::with_capacity(cfg.shots.len());
    for (i, &shot) in cfg.shots.iter().enumerate() {
        let scores: Vec<f64> = cells[i * seeds.len()..(i + 1) * seeds.len()]
            .iter()
            .map(|c| c.accuracy)
            .collect();
        summaries.push(ShotSummary {
            shot,
            trimmed_mean: trimmed_mean(&scores)?,
            std_dev: std_dev(&scores)?,
        });
    }

    Ok(ProtocolReport {
        format_version: REPORT_FORMAT_VERSION,
        config: ConfigEcho {
            mode: if test_store.is_some() { "domain_shift" } else { "in_domain" }.to_string(),
            variant: cfg.variant,
            z: cfg.variant.z(),
            branches: cfg.variant.branches().iter().map(|b| b.name().to_string()).collect(),
            shots: cfg.shots.clone(),
            num_seeds: cfg.num_seeds,
            base_seed: cfg.base_seed,
            seeds,
            train_store: train_store.source_name().to_string(),
            test_store: test_store.map(|s| s.source_name().to_string()),
            train: cfg.train,
            model: cfg.model,
            label_augmentation: cfg.label_features.is_some(),
            trimming: TRIM_CONVENTION.to_string(),
            std_convention: STD_CONVENTION.to_string(),
        },
        cells,
        summaries,
        timings,
    })
}

/// For every shot and seed `base_seed + i`: sample an episode, initialize,
/// train, and score the test split.
pub fn run_protocol(store: &FeatureStore, cfg: &ProtocolConfig) -> Result<ProtocolReport> {
    run_cells(store, None, cfg)
}

/// Runs the protocol once per variant with the same seeds, so every
/// `(shot, seed)` cell sees the same episode across variants.
pub fn run_ablation(
    store: &FeatureStore,
    variants: &[Variant],
    cfg: &ProtocolConfig,
) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(Error::Config("no variants to run".into()));
    }
    let reports = variants
        .iter()
        .map(|&variant| {
            run_protocol(
                store,
                &ProtocolConfig {
                    variant,
                    ..cfg.clone()
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        format_version: REPORT_FORMAT_VERSION,
        reports,
    })
}

/// Train and validation splits come from `train_store`; every record of
/// `test_store` is scored. Passing the same store twice is allowed, in
/// which case train ids also appear in the test set.
pub fn run_domain_shift(
    train_store: &FeatureStore,
    test_store: &FeatureStore,
    cfg: &ProtocolConfig,
) -> Result<ProtocolReport> {
    if train_store.dimension() != test_store.dimension() {
        return Err(Error::Dimension(format!(
            "train store `{}` has dimension {}, test store `{}` has {}",
            train_store.source_name(),
            train_store.dimension(),
            test_store.source_name(),
            test_store.dimension()
        )));
    }
    run_cells(train_store, Some(test_store), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert!((accuracy(&[1, 0, 1], &[1, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&[0, 1], &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1], &[1, 0]).unwrap(), 0.0);
        assert!(accuracy(&[0], &[0, 1]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn trimmed_mean_examples() {
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(trimmed_mean(&xs).unwrap(), 5.5);
        assert_eq!(trimmed_mean(&[5.0; 4]).unwrap(), 5.0);
        assert_eq!(trimmed_mean(&[0.0, 0.0, 10.0, 10.0]).unwrap(), 5.0);
        assert!(trimmed_mean(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn std_dev_examples() {
        assert_eq!(std_dev(&[0.7; 3]).unwrap(), 0.0);
        assert_eq!(std_dev(&[1.0, 3.0]).unwrap(), 1.0);
    }

    #[test]
    fn config_rejects_too_few_seeds() {
        let cfg = ProtocolConfig {
            num_seeds: 2,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn csv_has_one_row_per_shot() {
        let report = ProtocolReport {
            format_version: 1,
            config: ConfigEcho {
                mode: "in_domain".into(),
                variant: Variant::NoCross,
                z: 3,
                branches: vec![],
                shots: vec![2, 8],
                num_seeds: 3,
                base_seed: 0,
                seeds: vec![0, 1, 2],
                train_store: "s".into(),
                test_store: None,
                train: TrainConfig::default(),
                model: ModelConfig::default(),
                label_augmentation: false,
                trimming: TRIM_CONVENTION.into(),
                std_convention: STD_CONVENTION.into(),
            },
            cells: vec![],
            summaries: vec![
                ShotSummary { shot: 2, trimmed_mean: 0.5, std_dev: 0.0 },
                ShotSummary { shot: 8, trimmed_mean: 0.75, std_dev: 0.125 },
            ],
            timings: vec![],
        };
        let csv = reports_to_csv(std::slice::from_ref(&report));
        assert_eq!(
            csv,
            "variant,mode,shot,num_seeds,trimmed_mean,std_dev\n\
             -cross,in_domain,2,3,0.5,0\n\
             -cross,in_domain,8,3,0.75,0.125\n"
        );
        let parsed = parse_reports(&report.to_json().unwrap()).unwrap();
        assert_eq!(parsed[0].summaries, report.summaries);
    }
}
