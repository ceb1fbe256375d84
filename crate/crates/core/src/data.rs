//! Domain model: samples, domain datasets, label handling, deterministic
//! train/validation splitting, and manifest I/O.
//!
//! A domain is one dataset (e.g. one acquisition site). Manifests are CSV
//! files with header `image_path,grade`; image paths are stored relative to
//! a data root that is supplied separately at load time. Manifest ordering
//! defines sample order, so splits are stable across machines.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::rng;

/// Severity grades run 0..=4 (No DR, mild, moderate, severe, proliferative).
pub const NUM_GRADES: usize = 5;

/// One labeled image belonging to a domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Image locator, relative to the data root.
    pub image_ref: PathBuf,
    /// Original grade in 0..=4.
    pub grade: u8,
    pub domain_name: String,
}

/// Split membership of a sample within its domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    None,
}

/// How grades map to training labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Labeling {
    /// Labels are the raw grades 0..=4.
    Grade,
    /// Grade 0 maps to label 0, grades 1..=4 map to label 1.
    Binary,
}

impl Labeling {
    pub fn num_classes(self) -> usize {
        match self {
            Labeling::Grade => NUM_GRADES,
            Labeling::Binary => 2,
        }
    }

    pub fn label_of(self, grade: u8) -> usize {
        match self {
            Labeling::Grade => grade as usize,
            Labeling::Binary => usize::from(grade > 0),
        }
    }
}

/// Classification task variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Multiclass,
    Binary,
}

impl TaskMode {
    pub fn num_classes(self) -> usize {
        match self {
            TaskMode::Multiclass => NUM_GRADES,
            TaskMode::Binary => 2,
        }
    }

    pub fn labeling(self) -> Labeling {
        match self {
            TaskMode::Multiclass => Labeling::Grade,
            TaskMode::Binary => Labeling::Binary,
        }
    }
}

impl std::str::FromStr for TaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiclass" => Ok(TaskMode::Multiclass),
            "binary" => Ok(TaskMode::Binary),
            other => Err(Error::config(format!(
                "unknown task mode '{other}' (expected 'multiclass' or 'binary')"
            ))),
        }
    }
}

/// A named domain: ordered samples plus split bookkeeping.
///
/// Immutable after construction; the splitting and binarization operations
/// return new datasets. Safe to share read-only across workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    name: String,
    samples: Vec<Sample>,
    split: Vec<SplitTag>,
    labeling: Labeling,
}

impl DomainDataset {
    /// Builds a dataset, enforcing that every sample carries this domain's
    /// name and a grade in 0..=4.
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let name = name.into();
        for (i, s) in samples.iter().enumerate() {
            if s.domain_name != name {
                return Err(Error::contract(format!(
                    "sample {i} belongs to domain '{}' but dataset is '{name}'",
                    s.domain_name
                )));
            }
            if s.grade as usize >= NUM_GRADES {
                return Err(Error::data(format!(
                    "sample {i} ({}) has grade {} outside 0..=4",
                    s.image_ref.display(),
                    s.grade
                )));
            }
        }
        let split = vec![SplitTag::None; samples.len()];
        Ok(DomainDataset { name, samples, split, labeling: Labeling::Grade })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labeling(&self) -> Labeling {
        self.labeling
    }

    pub fn num_classes(&self) -> usize {
        self.labeling.num_classes()
    }

    pub fn split_tag(&self, idx: usize) -> SplitTag {
        self.split[idx]
    }

    pub fn is_split(&self) -> bool {
        self.split.iter().any(|t| *t != SplitTag::None)
    }

    /// Training label of sample `idx` under the dataset's labeling.
    pub fn label_of(&self, idx: usize) -> usize {
        self.labeling.label_of(self.samples[idx].grade)
    }

    pub fn indices_with_tag(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == tag).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices_with_tag(SplitTag::Train)
    }

    pub fn val_indices(&self) -> Vec<usize> {
        self.indices_with_tag(SplitTag::Val)
    }

    /// Tags round(0.2*n) samples as validation via a seeded permutation and
    /// the rest as training. Deterministic for a fixed (sample order, seed);
    /// no class stratification is applied.
    pub fn split_train_val(&self, seed: u64) -> Result<DomainDataset> {
        if self.is_split() {
            return Err(Error::contract(format!(
                "domain '{}' already carries split tags",
                self.name
            )));
        }
        let n = self.len();
        if n < 5 {
            return Err(Error::data(format!(
                "domain too small to split: '{}' has {n} samples (need at least 5)",
            self.name
            )));
        }
        // round-half-up of 0.2*n, in integer arithmetic
        let val_count = (2 * n + 5) / 10;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::stable_name_hash(&self.name)]));
        let mut out = self.clone();
        for (rank, &idx) in order.iter().enumerate() {
            out.split[idx] = if rank < val_count { SplitTag::Val } else { SplitTag::Train };
        }
        Ok(out)
    }

    /// Switches the labeling to DR-vs-NoDR. Grades are retained; only the
    /// label mapping changes, so binarization is idempotent.
    pub fn binarize_labels(&self) -> DomainDataset {
        let mut out = self.clone();
        out.labeling = Labeling::Binary;
        out
    }

    /// Fraction of samples per grade, over the full 5-grade label space.
    /// Fractions sum to 1; grades absent from the domain report 0.
    pub fn class_distribution(&self) -> Result<Vec<(u8, f64)>> {
        if self.is_empty() {
            return Err(Error::data(format!(
                "cannot compute class distribution of empty domain '{}'",
                self.name
            )));
        }
        let mut counts = [0usize; NUM_GRADES];
        for s in &self.samples {
            counts[s.grade as usize] += 1;
        }
        let total = self.len() as f64;
        Ok(counts
            .iter()
            .enumerate()
            .map(|(g, &c)| (g as u8, c as f64 / total))
            .collect())
    }
}

/// Operation form of [`DomainDataset::split_train_val`].
pub fn split_train_val(dataset: &DomainDataset, seed: u64) -> Result<DomainDataset> {
    dataset.split_train_val(seed)
}

/// Operation form of [`DomainDataset::binarize_labels`].
pub fn binarize_labels(dataset: &DomainDataset) -> DomainDataset {
    dataset.binarize_labels()
}

/// Operation form of [`DomainDataset::class_distribution`].
pub fn class_distribution(dataset: &DomainDataset) -> Result<Vec<(u8, f64)>> {
    dataset.class_distribution()
}

/// Renders a class distribution the way reports print it (percent, two
/// decimals).
pub fn format_distribution(dist: &[(u8, f64)]) -> Vec<(u8, String)> {
    dist.iter().map(|&(g, f)| (g, format!("{:.2}", f * 100.0))).collect()
}

/// Loads a domain manifest CSV (`image_path,grade`). The domain name is the
/// manifest file stem.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DomainDataset> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::data(format!("manifest path has no usable stem: {}", path.display())))?
        .to_string();
    let file = File::open(path).map_err(|e| {
        Error::data(format!("cannot open manifest {}: {e}", path.display()))
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::data(format!("bad manifest header in {}: {e}", path.display())))?;
        if headers.len() < 2 || &headers[0] != "image_path" || &headers[1] != "grade" {
            return Err(Error::data(format!(
                "manifest {} must start with header 'image_path,grade'",
                path.display()
            )));
        }
    }
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record
            .map_err(|e| Error::data(format!("bad manifest row {} in {}: {e}", i + 2, path.display())))?;
        let image_path = record
            .get(0)
            .ok_or_else(|| Error::data(format!("row {} missing image_path", i + 2)))?;
        let grade: u8 = record
            .get(1)
            .ok_or_else(|| Error::data(format!("row {} missing grade", i + 2)))?
            .trim()
            .parse()
            .map_err(|e| {
                Error::data(format!("row {} of {}: bad grade: {e}", i + 2, path.display()))
            })?;
        samples.push(Sample {
            image_ref: PathBuf::from(image_path),
            grade,
            domain_name: name.clone(),
        });
    }
    DomainDataset::new(name, samples)
}

/// Writes a domain manifest CSV next to its images.
pub fn write_manifest(dataset: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    writer
        .write_record(["image_path", "grade"])
        .map_err(|e| Error::data(format!("cannot write manifest {}: {e}", path.display())))?;
    for s in dataset.samples() {
        writer
            .write_record([
                s.image_ref.to_str().unwrap_or_default().to_string(),
                s.grade.to_string(),
            ])
            .map_err(|e| Error::data(format!("cannot write manifest {}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// All optimizer, schedule, regularization, augmentation, and task settings
/// for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub task_mode: TaskMode,
    pub eval_interval: usize,
    pub swad_enabled: bool,
    pub augment: AugmentConfig,
    pub num_classes: usize,
}

impl TrainConfig {
    /// Defaults: Adam at lr 5e-5 with no weight decay, 5000 steps, batch 32,
    /// regularization coefficient 1.0, evaluation every 100 steps.
    pub fn new(task_mode: TaskMode, seed: u64) -> Self {
        TrainConfig {
            lr: 5e-5,
            weight_decay: 0.0,
            steps: 5000,
            batch_size: 32,
            lambda: 1.0,
            seed,
            task_mode,
            eval_interval: 100,
            swad_enabled: false,
            augment: AugmentConfig::default(),
            num_classes: task_mode.num_classes(),
        }
    }

    pub fn validate(&self, num_source_domains: usize) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be positive"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval must be positive"));
        }
        if self.batch_size < num_source_domains {
            return Err(Error::config(format!(
                "batch_size {} is smaller than the number of source domains {num_source_domains}",
                self.batch_size
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.num_classes != self.task_mode.num_classes() {
            return Err(Error::config(format!(
                "num_classes {} inconsistent with task mode {:?} (expected {})",
                self.num_classes,
                self.task_mode,
                self.task_mode.num_classes()
            )));
        }
        self.augment.validate()?;
        Ok(())
    }
}

/// Accuracy of one training run evaluated on its held-out target domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub target_domain: String,
    pub seed: u64,
    /// Fraction correct on the full held-out target domain, in [0,1].
    pub accuracy: f64,
    pub selected_step: usize,
    /// Recall per class; `None` for classes absent from the target.
    pub per_class_accuracy: Vec<Option<f64>>,
}

/// Groups fold results as (target_domain, seed) -> accuracy, failing on
/// duplicates.
pub(crate) fn index_fold_results(
    results: &[FoldResult],
) -> Result<BTreeMap<String, BTreeMap<u64, f64>>> {
    let mut by_domain: BTreeMap<String, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in results {
        let seeds = by_domain.entry(r.target_domain.clone()).or_default();
        if seeds.insert(r.seed, r.accuracy).is_some() {
            return Err(Error::contract(format!(
                "duplicate fold result for target '{}' seed {}",
                r.target_domain, r.seed
            )));
        }
    }
    Ok(by_domain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn dataset_with_grades(name: &str, grades: &[u8]) -> DomainDataset {
        let samples = grades
            .iter()
            .enumerate()
            .map(|(i, &g)| Sample {
                image_ref: PathBuf::from(format!("{name}/img_{i:05}.png")),
                grade: g,
                domain_name: name.to_string(),
            })
            .collect();
        DomainDataset::new(name, samples).unwrap()
    }

    fn dataset_with_counts(name: &str, counts: [usize; NUM_GRADES]) -> DomainDataset {
        let mut grades = Vec::new();
        for (g, &c) in counts.iter().enumerate() {
            grades.extend(std::iter::repeat(g as u8).take(c));
        }
        dataset_with_grades(name, &grades)
    }

    #[test]
    fn split_sizes_match_twenty_percent_rule() {
        let d = dataset_with_counts("Messidor", [546, 153, 247, 254, 0]);
        assert_eq!(d.len(), 1200);
        let split = d.split_train_val(0).unwrap();
        assert_eq!(split.val_indices().len(), 240);
        assert_eq!(split.train_indices().len(), 960);

        let d = dataset_with_grades("tiny", &[0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
        let split = d.split_train_val(123).unwrap();
        assert_eq!(split.val_indices().len(), 2);
        assert_eq!(split.train_indices().len(), 8);
    }

    #[test]
    fn split_is_deterministic() {
        let d = dataset_with_grades("d", &[0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 1, 2]);
        let a = d.split_train_val(7).unwrap();
        let b = d.split_train_val(7).unwrap();
        assert_eq!(a.val_indices(), b.val_indices());
        let c = d.split_train_val(8).unwrap();
        assert_ne!(a.val_indices(), c.val_indices(), "different seeds should move the split");
    }

    #[test]
    fn split_rejects_small_and_already_split_domains() {
        let d = dataset_with_grades("small", &[0, 1, 2, 3]);
        let err = d.split_train_val(0).unwrap_err();
        assert!(err.to_string().contains("domain too small to split"), "{err}");

        let d = dataset_with_grades("ok", &[0, 1, 2, 3, 4, 0]);
        let once = d.split_train_val(0).unwrap();
        assert!(once.split_train_val(0).is_err());
    }

    proptest! {
        #[test]
        fn split_is_disjoint_and_exact(n in 5usize..400, seed in any::<u64>()) {
            let grades: Vec<u8> = (0..n).map(|i| (i % 5) as u8).collect();
            let d = dataset_with_grades("p", &grades);
            let s = d.split_train_val(seed).unwrap();
            let val = s.val_indices();
            let train = s.train_indices();
            prop_assert_eq!(val.len(), (2 * n + 5) / 10);
            prop_assert_eq!(val.len() + train.len(), n);
            let mut all: Vec<usize> = val.iter().chain(train.iter()).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn distribution_sums_to_one(counts in proptest::array::uniform5(0usize..200)) {
            prop_assume!(counts.iter().sum::<usize>() > 0);
            let d = dataset_with_counts("p", counts);
            let dist = d.class_distribution().unwrap();
            let total: f64 = dist.iter().map(|(_, f)| f).sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn binarization_maps_grades_and_keeps_originals() {
        let d = dataset_with_grades("b", &[0, 1, 2, 3, 4]);
        let b = d.binarize_labels();
        let labels: Vec<usize> = (0..b.len()).map(|i| b.label_of(i)).collect();
        assert_eq!(labels, vec![0, 1, 1, 1, 1]);
        assert_eq!(b.samples()[3].grade, 3, "original grades stay available");
        assert_eq!(b.num_classes(), 2);

        // idempotent
        let bb = b.binarize_labels();
        let labels2: Vec<usize> = (0..bb.len()).map(|i| bb.label_of(i)).collect();
        assert_eq!(labels, labels2);

        // surjective onto {0,1} when both grade 0 and non-zero grades exist
        assert!(labels.contains(&0) && labels.contains(&1));
    }

    #[test]
    fn class_distribution_matches_published_tables() {
        // Counts chosen so the rendered percentages reproduce the published
        // per-domain distribution tables.
        let eyepacs = dataset_with_counts("EyePACS", [65347, 6209, 13155, 2084, 1907]);
        assert_eq!(eyepacs.len(), 88702);
        let rendered = format_distribution(&eyepacs.class_distribution().unwrap());
        assert_eq!(rendered[0], (0, "73.67".to_string()));
        assert_eq!(rendered[1], (1, "7.00".to_string()));
        assert_eq!(rendered[2], (2, "14.83".to_string()));
        assert_eq!(rendered[3], (3, "2.35".to_string()));
        assert_eq!(rendered[4], (4, "2.15".to_string()));

        let messidor = dataset_with_counts("Messidor", [546, 153, 247, 254, 0]);
        assert_eq!(messidor.len(), 1200);
        let rendered = format_distribution(&messidor.class_distribution().unwrap());
        assert_eq!(rendered[0], (0, "45.50".to_string()));
        assert_eq!(rendered[4], (4, "0.00".to_string()), "absent proliferative grade is legal");
    }

    #[test]
    fn class_distribution_single_sample_and_empty() {
        let d = dataset_with_grades("one", &[2]);
        let dist = d.class_distribution().unwrap();
        assert_eq!(dist[2], (2, 1.0));
        assert_eq!(dist.iter().map(|(_, f)| f).sum::<f64>(), 1.0);

        let empty = DomainDataset::new("none", vec![]).unwrap();
        assert!(empty.class_distribution().is_err());
    }

    #[test]
    fn dataset_enforces_name_and_grade_invariants() {
        let bad_name = vec![Sample {
            image_ref: PathBuf::from("x.png"),
            grade: 0,
            domain_name: "other".into(),
        }];
        assert!(DomainDataset::new("mine", bad_name).is_err());

        let bad_grade = vec![Sample {
            image_ref: PathBuf::from("x.png"),
            grade: 5,
            domain_name: "mine".into(),
        }];
        assert!(DomainDataset::new("mine", bad_grade).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = dataset_with_grades("roundtrip", &[0, 3, 1, 4, 2, 0]);
        let path = dir.path().join("roundtrip.csv");
        write_manifest(&d, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded, d);
    }

    #[test]
    fn manifest_rejects_bad_header_and_grade() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "path,label\nx.png,0\n").unwrap();
        assert!(load_manifest(&p).is_err());
        let p2 = dir.path().join("bad2.csv");
        std::fs::write(&p2, "image_path,grade\nx.png,9\n").unwrap();
        assert!(load_manifest(&p2).is_err());
    }

    #[test]
    fn train_config_validation() {
        let mut cfg = TrainConfig::new(TaskMode::Multiclass, 0);
        assert_eq!(cfg.lr, 5e-5);
        assert_eq!(cfg.weight_decay, 0.0);
        assert_eq!(cfg.steps, 5000);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.lambda, 1.0);
        assert_eq!(cfg.num_classes, 5);
        cfg.validate(3).unwrap();

        cfg.batch_size = 2;
        assert!(cfg.validate(3).is_err(), "batch must cover every source domain");
        cfg.batch_size = 32;
        cfg.lambda = -0.5;
        assert!(cfg.validate(3).is_err());
        cfg.lambda = 0.0;
        cfg.num_classes = 2;
        assert!(cfg.validate(3).is_err(), "5 classes iff multiclass");
    }
}
