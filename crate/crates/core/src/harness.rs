//! Leave-one-domain-out orchestration, multi-seed aggregation, and report
//! emission.
//!
//! Each domain serves as the held-out target exactly once per seed; the
//! remaining domains are sources, each split 80/20 into train and pooled
//! validation. Model selection uses the pooled source validation accuracy
//! only; the target is evaluated in full and never touched before the
//! final evaluation.
//!
//! Reports mirror the one-row-per-algorithm table layout: one column per
//! target domain plus an average +- standard-deviation column. The standard
//! deviation is the sample (n-1) deviation over per-seed overall averages.
//! Rounding happens only at rendering.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{index_fold_results, load_manifest, DomainDataset, FoldResult, TrainConfig};
use crate::encoder::{init_target_from_oracle, Classifier, FeatureExtractor, ModelCheckpoint};
use crate::error::{Error, Result};
use crate::mi_reg::VariationalHead;
use crate::rng;
use crate::scalar::Scalar;
use crate::swad::SwadConfig;
use crate::encoder::TinyConvSpec;
use crate::trainer::{
    evaluate_model, extractor_from_checkpoint, pretrain_oracle, train_run, Algorithm,
    OraclePretrainSpec, RunContext,
};

const CLASSIFIER_STREAM: u64 = 0x636c_6173; // "clas"
const SPLIT_STREAM: u64 = 0x7370_6c74; // "splt"

/// One leave-one-domain-out fold over a domain list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LodoFold {
    pub target: usize,
    pub sources: Vec<usize>,
}

/// All folds: every domain is the target exactly once.
pub fn lodo_folds(domains: &[DomainDataset]) -> Result<Vec<LodoFold>> {
    if domains.len() < 2 {
        return Err(Error::config(format!(
            "leave-one-domain-out needs at least 2 domains, got {}",
            domains.len()
        )));
    }
    Ok((0..domains.len())
        .map(|t| LodoFold {
            target: t,
            sources: (0..domains.len()).filter(|&s| s != t).collect(),
        })
        .collect())
}

/// Fraction of predictions matching labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::contract("empty prediction list"));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Seed-aggregated accuracy table for one algorithm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub algorithm: String,
    /// Target domains, sorted by name.
    pub domains: Vec<String>,
    /// Seeds, sorted ascending.
    pub seeds: Vec<u64>,
    /// `per_fold[domain][seed]`, fractions in [0,1].
    pub per_fold: Vec<Vec<f64>>,
    pub per_domain_mean: Vec<f64>,
    /// Arithmetic mean of the per-domain means.
    pub overall_mean: f64,
    /// Sample standard deviation over per-seed overall averages; 0 for a
    /// single seed.
    pub std_across_seeds: f64,
}

/// Folds into a report. Requires every (target domain, seed) pair exactly
/// once; missing pairs are reported as a gap list.
pub fn aggregate(fold_results: &[FoldResult], algorithm: impl Into<String>) -> Result<BenchmarkReport> {
    if fold_results.is_empty() {
        return Err(Error::contract("no fold results to aggregate"));
    }
    let by_domain = index_fold_results(fold_results)?;
    let domains: Vec<String> = by_domain.keys().cloned().collect();
    let mut seeds: Vec<u64> = fold_results.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();

    let mut gaps = Vec::new();
    for d in &domains {
        for s in &seeds {
            if !by_domain[d].contains_key(s) {
                gaps.push(format!("({d}, seed {s})"));
            }
        }
    }
    if !gaps.is_empty() {
        return Err(Error::contract(format!("missing folds: {}", gaps.join(", "))));
    }

    let per_fold: Vec<Vec<f64>> =
        domains.iter().map(|d| seeds.iter().map(|s| by_domain[d][s]).collect()).collect();
    let per_domain_mean: Vec<f64> = per_fold
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect();
    let overall_mean = per_domain_mean.iter().sum::<f64>() / per_domain_mean.len() as f64;

    let per_seed_overall: Vec<f64> = (0..seeds.len())
        .map(|si| per_fold.iter().map(|row| row[si]).sum::<f64>() / domains.len() as f64)
        .collect();
    let std_across_seeds = if seeds.len() < 2 {
        0.0
    } else {
        let mean = per_seed_overall.iter().sum::<f64>() / per_seed_overall.len() as f64;
        let var = per_seed_overall.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / (per_seed_overall.len() - 1) as f64;
        var.sqrt()
    };

    Ok(BenchmarkReport {
        algorithm: algorithm.into(),
        domains,
        seeds,
        per_fold,
        per_domain_mean,
        overall_mean,
        std_across_seeds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

/// Renders a report. Markdown mirrors the accuracy-table layout (one
/// column per target domain plus the average); CSV emits one row per
/// (algorithm, domain, seed). Numbers are percentages at two decimals.
pub fn emit_report(report: &BenchmarkReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => {
            let mut out = String::new();
            out.push_str("| Algorithm |");
            for d in &report.domains {
                out.push_str(&format!(" {d} |"));
            }
            out.push_str(" Average |\n|---|");
            for _ in &report.domains {
                out.push_str("---|");
            }
            out.push_str("---|\n");
            out.push_str(&format!("| {} |", report.algorithm));
            for m in &report.per_domain_mean {
                out.push_str(&format!(" {:.2} |", m * 100.0));
            }
            out.push_str(&format!(
                " {:.2}±{:.2} |\n",
                report.overall_mean * 100.0,
                report.std_across_seeds * 100.0
            ));
            out
        }
        ReportFormat::Csv => {
            let mut out = String::from("algorithm,domain,seed,accuracy\n");
            for (di, d) in report.domains.iter().enumerate() {
                for (si, s) in report.seeds.iter().enumerate() {
                    out.push_str(&format!(
                        "{},{d},{s},{:.2}\n",
                        report.algorithm,
                        report.per_fold[di][si] * 100.0
                    ));
                }
            }
            out
        }
    }
}

/// Where the frozen oracle comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OracleSource {
    /// Extractor checkpoint produced earlier (any bundled architecture).
    Checkpoint { path: PathBuf },
    /// Pretrain a tiny extractor on a pooled synthetic split (manifest
    /// path relative to the data root) and cache it in the run root.
    Pretrain { pool_manifest: PathBuf, spec: OraclePretrainSpec },
}

/// Full description of one benchmark (one algorithm, LODO x seeds).
#[derive(Debug, Clone)]
pub struct BenchmarkSettings {
    /// Run name; directories live under `<out_root>/runs/<name>`.
    pub name: String,
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    /// Template config; `seed` and `swad_enabled` are set per run.
    pub train: TrainConfig,
    pub swad: SwadConfig,
    /// Architecture used when pretraining the oracle.
    pub arch: TinyConvSpec,
    pub oracle: OracleSource,
    pub data_root: PathBuf,
    pub out_root: PathBuf,
    /// Parallel fold workers.
    pub jobs: usize,
    /// Treat completed folds as done instead of failing.
    pub resume: bool,
    /// Resolved configuration text copied into each run directory.
    pub config_snapshot: String,
}

impl BenchmarkSettings {
    pub fn run_root(&self) -> PathBuf {
        self.out_root.join("runs").join(&self.name)
    }

    pub fn fold_dir(&self, target: &str, seed: u64) -> PathBuf {
        self.run_root().join(format!("fold_{target}")).join(format!("seed_{seed}"))
    }
}

/// The `result.json` schema of one fold run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldRecord {
    pub algorithm: Algorithm,
    pub algorithm_label: String,
    pub target_domain: String,
    pub seed: u64,
    /// Reported accuracy on the full target domain: the SWAD-simplified
    /// model's in SWAD mode, the best validation checkpoint's otherwise.
    pub accuracy: f64,
    pub selected_step: usize,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub best_val_accuracy: f64,
    /// Target accuracy of the best validation checkpoint (always present,
    /// so the SWAD delta is visible).
    pub best_checkpoint_accuracy: f64,
    pub swad: Option<SwadRecord>,
    pub oracle_checksum_before: String,
    pub oracle_checksum_after: String,
    pub completed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwadRecord {
    pub window_start: usize,
    pub window_end: usize,
    pub accuracy: f64,
    /// Reported minus best-checkpoint accuracy.
    pub accuracy_delta: f64,
}

impl FoldRecord {
    pub fn to_fold_result(&self) -> FoldResult {
        FoldResult {
            target_domain: self.target_domain.clone(),
            seed: self.seed,
            accuracy: self.accuracy,
            selected_step: self.selected_step,
            per_class_accuracy: self.per_class_accuracy.clone(),
        }
    }
}

/// Loads, or pretrains and caches, the frozen oracle for a benchmark.
/// Called once per benchmark; every fold shares the same oracle, like a
/// fixed externally pretrained backbone.
pub fn prepare_oracle<T: Scalar>(
    settings: &BenchmarkSettings,
) -> Result<Box<dyn FeatureExtractor<T>>> {
    match &settings.oracle {
        OracleSource::Checkpoint { path } => {
            let ckpt = ModelCheckpoint::<T>::load(path)?;
            extractor_from_checkpoint(&ckpt)
        }
        OracleSource::Pretrain { pool_manifest, spec } => {
            let run_root = settings.run_root();
            let cached = run_root.join("oracle.ckpt");
            if cached.exists() {
                let ckpt = ModelCheckpoint::<T>::load(&cached)?;
                return extractor_from_checkpoint(&ckpt);
            }
            let pool = load_manifest(settings.data_root.join(pool_manifest))?;
            let extractor = pretrain_oracle::<T>(
                settings.arch,
                &pool,
                &settings.data_root,
                &settings.train.augment,
                spec,
                &run_root.join("oracle_pretrain"),
            )?;
            let ckpt = ModelCheckpoint {
                arch_id: extractor.architecture_id(),
                feature_dim: extractor.feature_dim(),
                num_classes: crate::data::NUM_GRADES,
                extractor: extractor.params().to_vec(),
                classifier: Vec::new(),
                head: Vec::new(),
            };
            ckpt.save(&cached)?;
            Ok(extractor)
        }
    }
}

/// Trains and evaluates one (target, seed) fold.
pub fn run_fold<T: Scalar>(
    settings: &BenchmarkSettings,
    domains: &[DomainDataset],
    target_name: &str,
    seed: u64,
    oracle: &dyn FeatureExtractor<T>,
) -> Result<FoldRecord> {
    let fold_dir = settings.fold_dir(target_name, seed);
    let result_path = fold_dir.join("result.json");
    if result_path.exists() {
        if settings.resume {
            let raw = fs::read_to_string(&result_path).map_err(|e| Error::io(&result_path, e))?;
            let record: FoldRecord = serde_json::from_str(&raw).map_err(|e| {
                Error::data(format!("corrupt result file {}: {e}", result_path.display()))
            })?;
            return Ok(record);
        }
        return Err(Error::config(format!(
            "run already exists at {}; pass --resume or pick a new run name",
            fold_dir.display()
        )));
    }

    let target_idx = domains
        .iter()
        .position(|d| d.name() == target_name)
        .ok_or_else(|| Error::config(format!("unknown target domain '{target_name}'")))?;

    let mut cfg = settings.train.clone();
    cfg.seed = seed;
    cfg.swad_enabled = settings.algorithm.swad_enabled();

    let binary = matches!(cfg.task_mode, crate::data::TaskMode::Binary);
    let mut sources = Vec::with_capacity(domains.len() - 1);
    for (i, d) in domains.iter().enumerate() {
        if i == target_idx {
            continue;
        }
        let d = if binary { d.binarize_labels() } else { d.clone() };
        sources.push(d.split_train_val(rng::derive_seed(seed, &[
            SPLIT_STREAM,
            rng::stable_name_hash(d.name()),
        ]))?);
    }
    let target = if binary {
        domains[target_idx].binarize_labels()
    } else {
        domains[target_idx].clone()
    };

    fs::create_dir_all(&fold_dir).map_err(|e| Error::io(&fold_dir, e))?;
    fs::write(fold_dir.join("config.snapshot"), &settings.config_snapshot)
        .map_err(|e| Error::io(fold_dir.join("config.snapshot"), e))?;

    let pair = init_target_from_oracle(oracle.boxed_clone())?;
    let d = pair.feature_dim();
    let classifier =
        Classifier::<T>::init(d, cfg.num_classes, rng::derive_seed(seed, &[CLASSIFIER_STREAM]));
    let head = VariationalHead::<T>::identity(d);

    let ctx = RunContext {
        data_root: &settings.data_root,
        run_dir: &fold_dir,
        cfg: &cfg,
        algorithm: settings.algorithm,
        swad: settings.swad,
    };
    let outcome = train_run(&ctx, &sources, pair, classifier, head)?;

    // the target domain is evaluated in full; it is never split
    let target_items: Vec<(PathBuf, usize)> = (0..target.len())
        .map(|i| (settings.data_root.join(&target.samples()[i].image_ref), target.label_of(i)))
        .collect();
    let eval_aug = cfg.augment.eval_mode();
    let best_eval = evaluate_model(
        outcome.best.extractor.as_ref(),
        &outcome.best.classifier,
        &target_items,
        &eval_aug,
        cfg.num_classes,
    )?;

    let (accuracy, per_class, swad_record) = if let Some(swad_model) = &outcome.swad_model {
        let swad_eval = evaluate_model(
            swad_model.extractor.as_ref(),
            &swad_model.classifier,
            &target_items,
            &eval_aug,
            cfg.num_classes,
        )?;
        let window = outcome.swad_window.expect("window accompanies the model");
        let record = SwadRecord {
            window_start: window.0,
            window_end: window.1,
            accuracy: swad_eval.accuracy,
            accuracy_delta: swad_eval.accuracy - best_eval.accuracy,
        };
        (swad_eval.accuracy, swad_eval.per_class_accuracy, Some(record))
    } else {
        (best_eval.accuracy, best_eval.per_class_accuracy, None)
    };

    let record = FoldRecord {
        algorithm: settings.algorithm,
        algorithm_label: settings.algorithm.label().to_string(),
        target_domain: target_name.to_string(),
        seed,
        accuracy,
        selected_step: outcome.best_step,
        per_class_accuracy: per_class,
        best_val_accuracy: outcome.best_val_accuracy,
        best_checkpoint_accuracy: best_eval.accuracy,
        swad: swad_record,
        oracle_checksum_before: outcome.oracle_checksum_before,
        oracle_checksum_after: outcome.oracle_checksum_after,
        completed: true,
    };
    let raw = serde_json::to_string_pretty(&record)
        .map_err(|e| Error::data(format!("cannot encode result: {e}")))?;
    fs::write(&result_path, raw).map_err(|e| Error::io(&result_path, e))?;
    Ok(record)
}

/// Output of a full benchmark.
#[derive(Debug)]
pub struct BenchmarkOutput {
    pub records: Vec<FoldRecord>,
    pub report: BenchmarkReport,
    pub run_root: PathBuf,
    pub report_md: PathBuf,
    pub report_csv: PathBuf,
    pub benchmark_json: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct BenchmarkManifest {
    name: String,
    algorithms: Vec<Algorithm>,
    seeds: Vec<u64>,
    task_mode: crate::data::TaskMode,
    domains: Vec<String>,
    folds: Vec<FoldRecord>,
}

/// Runs the full LODO x seeds matrix for one algorithm, then aggregates
/// and writes reports beside `benchmark.json`.
pub fn run_benchmark<T: Scalar>(
    settings: &BenchmarkSettings,
    domains: &[DomainDataset],
) -> Result<BenchmarkOutput> {
    let folds = lodo_folds(domains)?;
    if settings.seeds.is_empty() {
        return Err(Error::config("benchmark needs at least one seed"));
    }
    {
        let mut names: Vec<&str> = domains.iter().map(|d| d.name()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != domains.len() {
            return Err(Error::config("domain names must be unique"));
        }
    }
    let run_root = settings.run_root();
    fs::create_dir_all(&run_root).map_err(|e| Error::io(&run_root, e))?;

    let oracle = prepare_oracle::<T>(settings)?;

    let tasks: Vec<(String, u64)> = folds
        .iter()
        .flat_map(|f| {
            settings.seeds.iter().map(move |&s| (domains[f.target].name().to_string(), s))
        })
        .collect();

    let records = if settings.jobs <= 1 {
        let mut out = Vec::with_capacity(tasks.len());
        for (target, seed) in &tasks {
            out.push(run_fold(settings, domains, target, *seed, oracle.as_ref())?);
        }
        out
    } else {
        let queue = Mutex::new(tasks.iter().cloned().collect::<VecDeque<_>>());
        let results: Mutex<Vec<Result<FoldRecord>>> = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..settings.jobs.min(tasks.len()) {
                scope.spawn(|| loop {
                    let task = queue.lock().unwrap().pop_front();
                    let Some((target, seed)) = task else { break };
                    let r = run_fold(settings, domains, &target, seed, oracle.as_ref());
                    results.lock().unwrap().push(r);
                });
            }
        });
        let mut collected = results.into_inner().unwrap();
        let mut out = Vec::with_capacity(collected.len());
        for r in collected.drain(..) {
            out.push(r?);
        }
        // worker completion order is nondeterministic; fix it
        out.sort_by(|a, b| (&a.target_domain, a.seed).cmp(&(&b.target_domain, b.seed)));
        out
    };

    let fold_results: Vec<FoldResult> = records.iter().map(|r| r.to_fold_result()).collect();
    let report = aggregate(&fold_results, settings.algorithm.label())?;

    let report_md = run_root.join("report.md");
    let report_csv = run_root.join("report.csv");
    fs::write(&report_md, emit_report(&report, ReportFormat::Markdown))
        .map_err(|e| Error::io(&report_md, e))?;
    fs::write(&report_csv, emit_report(&report, ReportFormat::Csv))
        .map_err(|e| Error::io(&report_csv, e))?;

    let manifest = BenchmarkManifest {
        name: settings.name.clone(),
        algorithms: vec![settings.algorithm],
        seeds: settings.seeds.clone(),
        task_mode: settings.train.task_mode,
        domains: domains.iter().map(|d| d.name().to_string()).collect(),
        folds: records.clone(),
    };
    let benchmark_json = run_root.join("benchmark.json");
    fs::write(
        &benchmark_json,
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::data(format!("cannot encode benchmark manifest: {e}")))?,
    )
    .map_err(|e| Error::io(&benchmark_json, e))?;

    Ok(BenchmarkOutput { records, report, run_root, report_md, report_csv, benchmark_json })
}

/// Rebuilds reports from the `result.json` files under a run root.
/// Used by the report command; training is never re-run.
pub fn rerender_reports(run_root: &Path, algorithm_label: &str) -> Result<BenchmarkReport> {
    let mut records = Vec::new();
    let entries = fs::read_dir(run_root).map_err(|e| Error::io(run_root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(run_root, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if !name.starts_with("fold_") {
            continue;
        }
        for seed_entry in fs::read_dir(entry.path()).map_err(|e| Error::io(entry.path(), e))? {
            let seed_entry = seed_entry.map_err(|e| Error::io(entry.path(), e))?;
            let result_path = seed_entry.path().join("result.json");
            if !result_path.exists() {
                continue;
            }
            let raw = fs::read_to_string(&result_path).map_err(|e| Error::io(&result_path, e))?;
            let record: FoldRecord = serde_json::from_str(&raw).map_err(|e| {
                Error::data(format!("corrupt result file {}: {e}", result_path.display()))
            })?;
            records.push(record.to_fold_result());
        }
    }
    if records.is_empty() {
        return Err(Error::data(format!(
            "no completed fold results under {}",
            run_root.display()
        )));
    }
    let report = aggregate(&records, algorithm_label)?;
    fs::write(run_root.join("report.md"), emit_report(&report, ReportFormat::Markdown))
        .map_err(|e| Error::io(run_root.join("report.md"), e))?;
    fs::write(run_root.join("report.csv"), emit_report(&report, ReportFormat::Csv))
        .map_err(|e| Error::io(run_root.join("report.csv"), e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use std::path::PathBuf as StdPathBuf;

    fn named_dataset(name: &str) -> DomainDataset {
        let samples = (0..5)
            .map(|i| Sample {
                image_ref: StdPathBuf::from(format!("{name}/{i}.png")),
                grade: (i % 5) as u8,
                domain_name: name.to_string(),
            })
            .collect();
        DomainDataset::new(name, samples).unwrap()
    }

    fn fr(domain: &str, seed: u64, acc: f64) -> FoldResult {
        FoldResult {
            target_domain: domain.into(),
            seed,
            accuracy: acc,
            selected_step: 100,
            per_class_accuracy: vec![],
        }
    }

    #[test]
    fn lodo_covers_every_domain_once() {
        let domains: Vec<DomainDataset> =
            ["APTOS", "EyePACS", "Messidor", "Messidor-2"].iter().map(|n| named_dataset(n)).collect();
        let folds = lodo_folds(&domains).unwrap();
        assert_eq!(folds.len(), 4);
        let aptos_fold = &folds[0];
        assert_eq!(domains[aptos_fold.target].name(), "APTOS");
        let sources: Vec<&str> =
            aptos_fold.sources.iter().map(|&i| domains[i].name()).collect();
        assert_eq!(sources, vec!["EyePACS", "Messidor", "Messidor-2"]);

        let two: Vec<DomainDataset> = ["a", "b"].iter().map(|n| named_dataset(n)).collect();
        let folds = lodo_folds(&two).unwrap();
        assert_eq!(folds.len(), 2);
        assert_eq!(folds[0].sources.len(), 1);

        assert!(lodo_folds(&two[..1]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[1], &[1, 2]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    /// Rendered percentage in integer hundredths, so the +-0.01 tolerance
    /// can be compared without float slop.
    fn rendered_cents(fraction: f64) -> i64 {
        let s = format!("{:.2}", fraction * 100.0);
        let v: f64 = s.parse().unwrap();
        (v * 100.0).round() as i64
    }

    #[test]
    fn aggregate_reproduces_published_row_averages() {
        let dgmdr = [
            fr("APTOS", 0, 0.6539),
            fr("EyePACS", 0, 0.7012),
            fr("Messidor", 0, 0.6563),
            fr("Messidor-2", 0, 0.6941),
        ];
        let report = aggregate(&dgmdr, "DGM-DR").unwrap();
        let cents = rendered_cents(report.overall_mean);
        assert!((cents - 6764).abs() <= 1, "got {cents} hundredths, expected 67.64 +- 0.01");

        let erm = [
            fr("APTOS", 0, 0.6283),
            fr("EyePACS", 0, 0.7301),
            fr("Messidor", 0, 0.6688),
            fr("Messidor-2", 0, 0.6526),
        ];
        let report = aggregate(&erm, "ERM").unwrap();
        let cents = rendered_cents(report.overall_mean);
        assert!((cents - 6699).abs() <= 1, "got {cents} hundredths, expected 66.99 +- 0.01");
    }

    #[test]
    fn aggregate_single_seed_identical_values() {
        let results = [fr("a", 0, 0.5), fr("b", 0, 0.5)];
        let report = aggregate(&results, "x").unwrap();
        assert_eq!(report.overall_mean, 0.5);
        assert_eq!(report.std_across_seeds, 0.0);
    }

    #[test]
    fn aggregate_is_permutation_invariant_and_detects_gaps() {
        let mut results = vec![
            fr("a", 0, 0.1),
            fr("a", 1, 0.2),
            fr("b", 0, 0.3),
            fr("b", 1, 0.4),
        ];
        let fwd = aggregate(&results, "x").unwrap();
        results.reverse();
        let bwd = aggregate(&results, "x").unwrap();
        assert_eq!(fwd.per_fold, bwd.per_fold);
        assert_eq!(fwd.overall_mean, bwd.overall_mean);

        results.pop();
        let err = aggregate(&results, "x").unwrap_err();
        assert!(err.to_string().contains("seed"), "gap list names the hole: {err}");

        let dup = vec![fr("a", 0, 0.1), fr("a", 0, 0.2), fr("b", 0, 0.3)];
        assert!(aggregate(&dup, "x").is_err());
    }

    #[test]
    fn std_uses_per_seed_overall_averages() {
        // seed 0 overall: 0.5, seed 1 overall: 0.7 -> sample std = 0.1414...
        let results = [
            fr("a", 0, 0.4),
            fr("b", 0, 0.6),
            fr("a", 1, 0.6),
            fr("b", 1, 0.8),
        ];
        let report = aggregate(&results, "x").unwrap();
        let expected = ((0.5f64 - 0.6).powi(2) + (0.7f64 - 0.6).powi(2)).sqrt(); // /(2-1)
        assert!((report.std_across_seeds - expected).abs() < 1e-12);
        assert!((report.overall_mean - 0.6).abs() < 1e-12);
    }

    #[test]
    fn report_rendering_shapes() {
        let results = [
            fr("a", 0, 0.6539),
            fr("b", 0, 0.7012),
            fr("a", 1, 0.6539),
            fr("b", 1, 0.7012),
        ];
        let report = aggregate(&results, "DGM-DR").unwrap();

        let md = emit_report(&report, ReportFormat::Markdown);
        let header_cols = md.lines().next().unwrap().matches('|').count() - 1;
        assert_eq!(header_cols, report.domains.len() + 2);
        assert!(md.contains("±"), "average column carries the deviation");

        let csv = emit_report(&report, ReportFormat::Csv);
        let rows = csv.lines().count();
        assert_eq!(rows, report.domains.len() * report.seeds.len() + 1);
        assert!(csv.contains("DGM-DR,a,0,65.39"));
    }
}
