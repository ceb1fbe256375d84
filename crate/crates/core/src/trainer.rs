//! Optimization loop for the ERM and MI-regularized objectives.
//!
//! One run draws minibatches with equal per-domain shares from the source
//! domains' training splits, takes Adam steps on (target extractor,
//! classifier, variational head), evaluates pooled source validation
//! accuracy every `eval_interval` steps, records a weight snapshot at every
//! evaluation, and returns the checkpoint with the best validation accuracy
//! (plus the SWAD-simplified average when enabled). The frozen oracle never
//! enters the optimizer.
//!
//! Every random stream is derived from the run seed, so identical
//! configurations on identical data replay identical metrics.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{load_image, transform, AugmentConfig};
use crate::data::{DomainDataset, SplitTag, TrainConfig};
use crate::encoder::{
    classify, extract_features_traced, checksum_params, Classifier, FeatureExtractor,
    ModelCheckpoint, OraclePair, TinyConvNet, TinyConvSpec,
};
use crate::error::{Error, Result};
use crate::mi_reg::{cross_entropy_with_grad, mi_penalty_with_grad, VariationalHead};
use crate::rng;
use crate::scalar::{fl, Scalar};
use crate::swad::{
    average_weights, save_snapshot, select_window, snapshots_in_window, SwadConfig,
    WeightSnapshot,
};

const BATCH_STREAM: u64 = 0x6261_7463; // "batc"
const AUG_STREAM: u64 = 0x6175_676d; // "augm"
const ORDER_STREAM: u64 = 0x6f72_6472; // "ordr"

/// Training objective variants exposed by the toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Erm,
    Dgmdr,
    DgmdrSwad,
}

impl Algorithm {
    /// Whether the MI penalty is computed at all. A zero regularization
    /// coefficient also disables it, which makes a lambda=0 run identical
    /// to ERM step for step.
    pub fn uses_penalty(self) -> bool {
        !matches!(self, Algorithm::Erm)
    }

    pub fn swad_enabled(self) -> bool {
        matches!(self, Algorithm::DgmdrSwad)
    }

    pub fn label(self) -> &'static str {
        match self {
            Algorithm::Erm => "ERM",
            Algorithm::Dgmdr => "DGM-DR",
            Algorithm::DgmdrSwad => "DGM-DR+SWAD (SWAD-simplified)",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(Algorithm::Erm),
            "dgmdr" => Ok(Algorithm::Dgmdr),
            "dgmdr_swad" => Ok(Algorithm::DgmdrSwad),
            other => Err(Error::config(format!(
                "unknown algorithm '{other}' (expected erm, dgmdr, or dgmdr_swad)"
            ))),
        }
    }
}

/// Adam with bias correction; betas (0.9, 0.999), epsilon 1e-8.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    weight_decay: T,
    m: Vec<T>,
    v: Vec<T>,
    t: u32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, weight_decay: f64, num_params: usize) -> Self {
        Adam {
            lr: fl(lr),
            beta1: fl(0.9),
            beta2: fl(0.999),
            eps: fl(1e-8),
            weight_decay: fl(weight_decay),
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer sized for {} params, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = params[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Mutable training bookkeeping across steps.
pub struct TrainState<T> {
    pub step: usize,
    pub optimizer: Adam<T>,
    pub best_val_accuracy: f64,
    pub best_checkpoint_step: Option<usize>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &TrainConfig, num_params: usize) -> Self {
        TrainState {
            step: 0,
            optimizer: Adam::new(cfg.lr, cfg.weight_decay, num_params),
            best_val_accuracy: f64::NEG_INFINITY,
            best_checkpoint_step: None,
        }
    }
}

/// The trainable model triple with one flat parameter order:
/// extractor, then classifier, then head.
pub struct ModelBundle<T: Scalar> {
    pub extractor: Box<dyn FeatureExtractor<T>>,
    pub classifier: Classifier<T>,
    pub head: VariationalHead<T>,
}

impl<T: Scalar> Clone for ModelBundle<T> {
    fn clone(&self) -> Self {
        ModelBundle {
            extractor: self.extractor.clone(),
            classifier: self.classifier.clone(),
            head: self.head.clone(),
        }
    }
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(
        extractor: Box<dyn FeatureExtractor<T>>,
        classifier: Classifier<T>,
        head: VariationalHead<T>,
    ) -> Result<Self> {
        let d = extractor.feature_dim();
        if classifier.in_dim() != d || head.feature_dim() != d {
            return Err(Error::contract(format!(
                "bundle dims disagree: extractor {d}, classifier {}, head {}",
                classifier.in_dim(),
                head.feature_dim()
            )));
        }
        Ok(ModelBundle { extractor, classifier, head })
    }

    pub fn num_params(&self) -> usize {
        self.extractor.num_params() + self.classifier.num_params() + self.head.num_params()
    }

    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.extractor.params());
        out.extend(self.classifier.flat_params());
        out.extend(self.head.flat_params());
        out
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::contract(format!(
                "bundle expects {} params, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let ne = self.extractor.num_params();
        let nc = self.classifier.num_params();
        self.extractor.params_mut().copy_from_slice(&flat[..ne]);
        self.classifier.set_flat_params(&flat[ne..ne + nc])?;
        self.head.set_flat_params(&flat[ne + nc..])?;
        Ok(())
    }

    /// SHA-256 over the flat parameter bytes.
    pub fn checksum(&self) -> String {
        checksum_params(&self.flat_params())
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint<T> {
        ModelCheckpoint {
            arch_id: self.extractor.architecture_id(),
            feature_dim: self.extractor.feature_dim(),
            num_classes: self.classifier.num_classes(),
            extractor: self.extractor.params().to_vec(),
            classifier: self.classifier.flat_params(),
            head: self.head.flat_params(),
        }
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint<T>) -> Result<Self> {
        let extractor = extractor_from_checkpoint(ckpt)?;
        let d = extractor.feature_dim();
        let mut classifier = Classifier::zeroed(d, ckpt.num_classes);
        classifier.set_flat_params(&ckpt.classifier).map_err(|_| {
            Error::data(format!(
                "checkpoint classifier section has {} params, expected {}",
                ckpt.classifier.len(),
                classifier.num_params()
            ))
        })?;
        let mut head = VariationalHead::identity(d);
        head.set_flat_params(&ckpt.head).map_err(|_| {
            Error::data(format!(
                "checkpoint head section has {} params, expected {}",
                ckpt.head.len(),
                head.num_params()
            ))
        })?;
        ModelBundle::new(extractor, classifier, head)
    }
}

/// Rebuilds a bare extractor from a checkpoint. Only bundled architectures
/// can be constructed this way; other backbones plug in through the
/// [`FeatureExtractor`] trait at the library level.
pub fn extractor_from_checkpoint<T: Scalar>(
    ckpt: &ModelCheckpoint<T>,
) -> Result<Box<dyn FeatureExtractor<T>>> {
    if ckpt.arch_id.starts_with("tiny_conv/") {
        let spec = TinyConvSpec::parse_id(&ckpt.arch_id)?;
        let net = TinyConvNet::from_parts(spec, ckpt.extractor.clone())?;
        if net.feature_dim() != ckpt.feature_dim {
            return Err(Error::data(format!(
                "checkpoint feature_dim {} disagrees with architecture ({})",
                ckpt.feature_dim,
                net.feature_dim()
            )));
        }
        Ok(Box::new(net))
    } else {
        Err(Error::config(format!(
            "architecture '{}' is not bundled; implement FeatureExtractor for it and plug it in \
             through the library API",
            ckpt.arch_id
        )))
    }
}

/// Minibatch composition across source domains: equal shares with the
/// remainder rotating round-robin through a seeded domain order, and
/// per-domain reshuffling every epoch.
#[derive(Debug)]
pub struct MinibatchSampler {
    batch_size: usize,
    train_indices: Vec<Vec<usize>>,
    queues: Vec<VecDeque<usize>>,
    rngs: Vec<rand_chacha::ChaCha8Rng>,
    order: Vec<usize>,
    cursor: usize,
}

impl MinibatchSampler {
    pub fn new(sources: &[DomainDataset], batch_size: usize, seed: u64) -> Result<Self> {
        let m = sources.len();
        if m == 0 {
            return Err(Error::contract("no source domains"));
        }
        if batch_size < m {
            return Err(Error::config(format!(
                "batch size {batch_size} smaller than the number of source domains {m}"
            )));
        }
        let mut train_indices = Vec::with_capacity(m);
        let mut rngs = Vec::with_capacity(m);
        for d in sources {
            let idx = d.train_indices();
            if idx.is_empty() {
                return Err(Error::data(format!(
                    "source domain '{}' has an empty training split",
                    d.name()
                )));
            }
            train_indices.push(idx);
            rngs.push(rng::stream(seed, &[rng::stable_name_hash(d.name())]));
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng::stream(seed, &[ORDER_STREAM]));
        Ok(MinibatchSampler {
            batch_size,
            train_indices,
            queues: vec![VecDeque::new(); m],
            rngs,
            order,
            cursor: 0,
        })
    }

    /// Per-domain sample counts of the next batch (indexed by source
    /// position). Advances the round-robin cursor.
    fn next_shares(&mut self) -> Vec<usize> {
        let m = self.train_indices.len();
        let base = self.batch_size / m;
        let rem = self.batch_size % m;
        let mut shares = vec![base; m];
        for j in 0..rem {
            shares[self.order[(self.cursor + j) % m]] += 1;
        }
        self.cursor = (self.cursor + rem) % m;
        shares
    }

    fn draw(&mut self, domain: usize) -> usize {
        if self.queues[domain].is_empty() {
            let mut epoch = self.train_indices[domain].clone();
            epoch.shuffle(&mut self.rngs[domain]);
            self.queues[domain].extend(epoch);
        }
        self.queues[domain].pop_front().expect("refilled queue")
    }

    /// Next batch as (domain position, sample index) pairs, grouped by
    /// domain in source order.
    pub fn next_batch(&mut self) -> Vec<(usize, usize)> {
        let shares = self.next_shares();
        let mut out = Vec::with_capacity(self.batch_size);
        for (d, &count) in shares.iter().enumerate() {
            for _ in 0..count {
                out.push((d, self.draw(d)));
            }
        }
        out
    }
}

/// Operation form: draws one batch from a sampler carrying the rng state.
pub fn make_minibatch(sampler: &mut MinibatchSampler) -> Vec<(usize, usize)> {
    sampler.next_batch()
}

/// One materialized batch.
pub struct PreparedBatch<T> {
    pub images: Vec<Array3<T>>,
    pub labels: Vec<usize>,
    pub domain_names: Vec<String>,
    pub image_refs: Vec<PathBuf>,
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub ce: f64,
    pub penalty: f64,
    pub total: f64,
    pub val_acc: Option<f64>,
}

/// One Adam update on (target extractor, classifier, head). The oracle is
/// read-only throughout. Returns the loss components for logging.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    pair: &mut OraclePair<T>,
    classifier: &mut Classifier<T>,
    head: &mut VariationalHead<T>,
    batch: &PreparedBatch<T>,
    cfg: &TrainConfig,
    algorithm: Algorithm,
) -> Result<StepMetrics> {
    if state.step >= cfg.steps {
        return Err(Error::contract(format!(
            "training already finished ({} of {} steps)",
            state.step, cfg.steps
        )));
    }
    let lambda = fl::<T>(cfg.lambda);
    let use_penalty = algorithm.uses_penalty() && cfg.lambda > 0.0;

    let (z_target, traces, z_oracle) = extract_features_traced(pair, &batch.images, true)?;
    let logits = classify(classifier, &z_target)?;
    let (ce, d_logits) = cross_entropy_with_grad(&logits, &batch.labels)?;
    let (clf_grads, mut d_z) = classifier.backward(&z_target, &d_logits)?;

    let mut penalty = T::zero();
    let mut head_grads = vec![T::zero(); head.num_params()];
    if use_penalty {
        let (p, grads) = mi_penalty_with_grad(&z_oracle, &z_target, head)?;
        penalty = p;
        d_z.zip_mut_with(&grads.d_z_target, |a, b| *a += lambda * *b);
        for (h, g) in head_grads.iter_mut().zip(&grads.d_head) {
            *h = lambda * *g;
        }
    }

    let total = ce + lambda * penalty;
    if !total.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite loss at step {} (ce={ce}, penalty={penalty}); batch domains {:?}, first refs {:?}",
            state.step + 1,
            batch.domain_names,
            batch.image_refs.iter().take(4).collect::<Vec<_>>()
        )));
    }

    // per-sample backward through the target extractor, summed in batch
    // order so results do not depend on worker scheduling
    let n_ext = pair.target().num_params();
    let d_z_rows: Vec<Vec<T>> = (0..batch.images.len())
        .map(|r| d_z.row(r).to_vec())
        .collect();
    let target = pair.target();
    let per_sample: Vec<Result<Vec<T>>> = traces
        .par_iter()
        .zip(d_z_rows.par_iter())
        .map(|(trace, drow)| {
            let mut g = vec![T::zero(); n_ext];
            target.backward(trace, drow, &mut g)?;
            Ok(g)
        })
        .collect();
    let mut ext_grads = vec![T::zero(); n_ext];
    for g in per_sample {
        let g = g?;
        for (acc, v) in ext_grads.iter_mut().zip(&g) {
            *acc += *v;
        }
    }

    // assemble flat gradients and parameters: extractor | classifier | head
    let mut grads = ext_grads;
    grads.extend(clf_grads);
    grads.extend(head_grads);
    let mut params = Vec::with_capacity(grads.len());
    params.extend_from_slice(pair.target().params());
    params.extend(classifier.flat_params());
    params.extend(head.flat_params());

    state.optimizer.step(&mut params, &grads)?;

    let ne = pair.target().num_params();
    let nc = classifier.num_params();
    pair.target_mut().params_mut().copy_from_slice(&params[..ne]);
    classifier.set_flat_params(&params[ne..ne + nc])?;
    head.set_flat_params(&params[ne + nc..])?;

    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        ce: ce.to_f64().unwrap_or(f64::NAN),
        penalty: penalty.to_f64().unwrap_or(f64::NAN),
        total: total.to_f64().unwrap_or(f64::NAN),
        val_acc: None,
    })
}

/// Accuracy, mean cross-entropy, and per-class recall of a model over a
/// list of (absolute image path, label) items.
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_ce: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub n: usize,
}

pub fn evaluate_model<T: Scalar>(
    extractor: &dyn FeatureExtractor<T>,
    classifier: &Classifier<T>,
    items: &[(PathBuf, usize)],
    augment_eval: &AugmentConfig,
    num_classes: usize,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::contract("nothing to evaluate"));
    }
    let per_sample: Vec<Result<(usize, f64)>> = items
        .par_iter()
        .map(|(path, label)| {
            let img = load_image(path)?;
            // eval transform ignores the rng; any stream works
            let mut r = rng::stream(0, &[0]);
            let tensor = transform::<T>(&img, augment_eval, &mut r)?;
            let features = extractor.forward(&tensor)?;
            let z = ndarray::Array2::from_shape_vec((1, features.len()), features)
                .expect("row vector");
            let logits = classify(classifier, &z)?;
            let row = logits.row(0);
            // argmax with ties resolved to the lowest class index
            let mut pred = 0usize;
            for (j, v) in row.iter().enumerate() {
                if *v > row[pred] {
                    pred = j;
                }
            }
            let ce = crate::mi_reg::cross_entropy(&logits, &[*label])?;
            Ok((pred, ce.to_f64().unwrap_or(f64::NAN)))
        })
        .collect();

    let mut predictions = Vec::with_capacity(items.len());
    let mut ce_sum = 0.0f64;
    for r in per_sample {
        let (pred, ce) = r?;
        predictions.push(pred);
        ce_sum += ce;
    }
    let labels: Vec<usize> = items.iter().map(|(_, l)| *l).collect();
    let accuracy = crate::harness::accuracy(&predictions, &labels)?;

    let mut correct = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (p, l) in predictions.iter().zip(&labels) {
        if *l >= num_classes {
            return Err(Error::contract(format!("label {l} out of range")));
        }
        totals[*l] += 1;
        if p == l {
            correct[*l] += 1;
        }
    }
    let per_class_accuracy = (0..num_classes)
        .map(|c| (totals[c] > 0).then(|| correct[c] as f64 / totals[c] as f64))
        .collect();

    Ok(EvalReport { accuracy, mean_ce: ce_sum / items.len() as f64, per_class_accuracy, n: items.len() })
}

/// Static context of one training run.
pub struct RunContext<'a> {
    pub data_root: &'a Path,
    pub run_dir: &'a Path,
    pub cfg: &'a TrainConfig,
    pub algorithm: Algorithm,
    pub swad: SwadConfig,
}

/// Everything a finished run hands back to the harness.
pub struct TrainOutcome<T: Scalar> {
    pub best: ModelBundle<T>,
    pub best_step: usize,
    pub best_val_accuracy: f64,
    pub swad_model: Option<ModelBundle<T>>,
    pub swad_window: Option<(usize, usize)>,
    pub metrics: Vec<StepMetrics>,
    pub oracle_checksum_before: String,
    pub oracle_checksum_after: String,
}

fn items_with_tag(
    sources: &[DomainDataset],
    data_root: &Path,
    tag: SplitTag,
) -> Vec<(PathBuf, usize)> {
    let mut items = Vec::new();
    for d in sources {
        for i in d.indices_with_tag(tag) {
            items.push((data_root.join(&d.samples()[i].image_ref), d.label_of(i)));
        }
    }
    items
}

fn write_metrics_row(file: &mut fs::File, m: &StepMetrics, path: &Path) -> Result<()> {
    let val = m.val_acc.map(|v| v.to_string()).unwrap_or_default();
    writeln!(file, "{},{},{},{},{val}", m.step, m.ce, m.penalty, m.total)
        .map_err(|e| Error::io(path, e))
}

/// Runs `cfg.steps` optimization steps over pre-split source domains.
///
/// Consumes the model triple; returns the best-validation checkpoint (ties
/// break to the earlier step), the recorded metrics, and the
/// SWAD-simplified average when the algorithm asks for it.
pub fn train_run<T: Scalar>(
    ctx: &RunContext<'_>,
    sources: &[DomainDataset],
    pair: OraclePair<T>,
    classifier: Classifier<T>,
    head: VariationalHead<T>,
) -> Result<TrainOutcome<T>> {
    let cfg = ctx.cfg;
    cfg.validate(sources.len())?;
    for d in sources {
        if !d.is_split() {
            return Err(Error::contract(format!(
                "source domain '{}' must be split before training",
                d.name()
            )));
        }
        if d.num_classes() != cfg.num_classes {
            return Err(Error::contract(format!(
                "domain '{}' is labeled for {} classes but the run uses {}",
                d.name(),
                d.num_classes(),
                cfg.num_classes
            )));
        }
    }
    if cfg.swad_enabled != ctx.algorithm.swad_enabled() {
        return Err(Error::config(
            "cfg.swad_enabled must match the algorithm's SWAD mode",
        ));
    }

    fs::create_dir_all(ctx.run_dir).map_err(|e| Error::io(ctx.run_dir, e))?;
    let snapshots_dir = ctx.run_dir.join("snapshots");
    let metrics_path = ctx.run_dir.join("metrics.csv");
    let mut metrics_file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics_file, "step,ce,penalty,total,val_acc")
        .map_err(|e| Error::io(&metrics_path, e))?;

    let mut pair = pair;
    let mut classifier = classifier;
    let mut head = head;
    let oracle_checksum_before = pair.oracle_checksum();

    let num_params =
        pair.target().num_params() + classifier.num_params() + head.num_params();
    let mut state = TrainState::<T>::new(cfg, num_params);
    let mut sampler =
        MinibatchSampler::new(sources, cfg.batch_size, rng::derive_seed(cfg.seed, &[BATCH_STREAM]))?;

    let val_items = items_with_tag(sources, ctx.data_root, SplitTag::Val);
    if val_items.is_empty() {
        return Err(Error::data("pooled validation set is empty"));
    }
    let eval_aug = cfg.augment.eval_mode();

    let mut metrics: Vec<StepMetrics> = Vec::with_capacity(cfg.steps);
    let mut snapshots: Vec<WeightSnapshot<T>> = Vec::new();

    for step in 1..=cfg.steps {
        let keys = sampler.next_batch();
        let batch = prepare_batch::<T>(sources, ctx.data_root, &keys, cfg, step)?;
        let mut row = match train_step(
            &mut state,
            &mut pair,
            &mut classifier,
            &mut head,
            &batch,
            cfg,
            ctx.algorithm,
        ) {
            Ok(row) => row,
            Err(e) => {
                if matches!(e, Error::Numeric(_)) {
                    let diag = serde_json::json!({
                        "step": step,
                        "error": e.to_string(),
                        "domains": batch.domain_names,
                        "image_refs": batch.image_refs,
                    });
                    let diag_path = ctx.run_dir.join("diagnostic.json");
                    let _ = fs::write(&diag_path, serde_json::to_string_pretty(&diag).unwrap());
                }
                return Err(e);
            }
        };

        let evaluate_now =
            step % cfg.eval_interval == 0 || (cfg.eval_interval > cfg.steps && step == cfg.steps);
        if evaluate_now {
            let bundle_params = {
                let mut p = Vec::with_capacity(num_params);
                p.extend_from_slice(pair.target().params());
                p.extend(classifier.flat_params());
                p.extend(head.flat_params());
                p
            };
            let report = evaluate_model(
                pair.target(),
                &classifier,
                &val_items,
                &eval_aug,
                cfg.num_classes,
            )?;
            row.val_acc = Some(report.accuracy);
            let snapshot = WeightSnapshot {
                step,
                params: bundle_params,
                val_loss: report.mean_ce,
                val_accuracy: report.accuracy,
            };
            save_snapshot(&snapshots_dir, &snapshot)?;
            snapshots.push(snapshot);
            if report.accuracy > state.best_val_accuracy {
                state.best_val_accuracy = report.accuracy;
                state.best_checkpoint_step = Some(step);
            }
        }

        write_metrics_row(&mut metrics_file, &row, &metrics_path)?;
        metrics.push(row);
    }
    metrics_file.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let best_step = state
        .best_checkpoint_step
        .ok_or_else(|| Error::contract("run finished without any validation evaluation"))?;
    let best_snapshot = snapshots
        .iter()
        .find(|s| s.step == best_step)
        .expect("best step has a snapshot");

    let mut best = ModelBundle::new(pair.target().boxed_clone(), classifier.clone(), head.clone())?;
    best.set_flat_params(&best_snapshot.params)?;
    best.to_checkpoint().save(ctx.run_dir.join("checkpoints").join("best.ckpt"))?;

    let (swad_model, swad_window) = if ctx.algorithm.swad_enabled() {
        let losses: Vec<(usize, f64)> = snapshots.iter().map(|s| (s.step, s.val_loss)).collect();
        let window = select_window(&losses, &ctx.swad)?;
        let averaged = average_weights(&snapshots_in_window(&snapshots, window))?;
        let mut model = best.clone();
        model.set_flat_params(&averaged)?;
        model.to_checkpoint().save(ctx.run_dir.join("checkpoints").join("swad.ckpt"))?;
        (Some(model), Some(window))
    } else {
        (None, None)
    };

    let oracle_checksum_after = pair.oracle_checksum();
    Ok(TrainOutcome {
        best,
        best_step,
        best_val_accuracy: state.best_val_accuracy,
        swad_model,
        swad_window,
        metrics,
        oracle_checksum_before,
        oracle_checksum_after,
    })
}

fn prepare_batch<T: Scalar>(
    sources: &[DomainDataset],
    data_root: &Path,
    keys: &[(usize, usize)],
    cfg: &TrainConfig,
    step: usize,
) -> Result<PreparedBatch<T>> {
    let images: Vec<Result<Array3<T>>> = keys
        .par_iter()
        .enumerate()
        .map(|(slot, &(d, i))| {
            let sample = &sources[d].samples()[i];
            let img = load_image(data_root.join(&sample.image_ref))?;
            let mut r = rng::stream(cfg.seed, &[AUG_STREAM, step as u64, slot as u64]);
            transform::<T>(&img, &cfg.augment, &mut r)
        })
        .collect();
    let mut out_images = Vec::with_capacity(keys.len());
    for img in images {
        out_images.push(img?);
    }
    let labels = keys.iter().map(|&(d, i)| sources[d].label_of(i)).collect();
    let domain_names = keys.iter().map(|&(d, _)| sources[d].name().to_string()).collect();
    let image_refs = keys.iter().map(|&(d, i)| sources[d].samples()[i].image_ref.clone()).collect();
    Ok(PreparedBatch { images: out_images, labels, domain_names, image_refs })
}

/// Settings of the synthetic-oracle pretraining pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OraclePretrainSpec {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Oracle stream seed; a config constant rather than a per-run seed,
    /// since the oracle stands in for an externally pretrained backbone
    /// shared by every fold and seed.
    pub seed: u64,
}

impl Default for OraclePretrainSpec {
    fn default() -> Self {
        OraclePretrainSpec { steps: 300, lr: 1e-3, batch_size: 32, seed: 0 }
    }
}

/// Pretrains a tiny extractor with plain ERM on a pooled synthetic split
/// and returns it as the frozen oracle.
pub fn pretrain_oracle<T: Scalar>(
    arch: TinyConvSpec,
    pool: &DomainDataset,
    data_root: &Path,
    augment: &AugmentConfig,
    spec: &OraclePretrainSpec,
    work_dir: &Path,
) -> Result<Box<dyn FeatureExtractor<T>>> {
    let split = pool.split_train_val(rng::derive_seed(spec.seed, &[rng::stable_name_hash(pool.name())]))?;
    let extractor = TinyConvNet::<T>::init(arch, spec.seed)?;
    let d = extractor.feature_dim();
    let classifier = Classifier::init(d, crate::data::NUM_GRADES, rng::derive_seed(spec.seed, &[1]));
    let head = VariationalHead::identity(d);
    let cfg = TrainConfig {
        lr: spec.lr,
        weight_decay: 0.0,
        steps: spec.steps,
        batch_size: spec.batch_size,
        lambda: 0.0,
        seed: spec.seed,
        task_mode: crate::data::TaskMode::Multiclass,
        eval_interval: spec.steps,
        swad_enabled: false,
        augment: augment.clone(),
        num_classes: crate::data::NUM_GRADES,
    };
    let ctx = RunContext {
        data_root,
        run_dir: work_dir,
        cfg: &cfg,
        algorithm: Algorithm::Erm,
        swad: SwadConfig::default(),
    };
    let pair = crate::encoder::init_target_from_oracle(Box::new(extractor))?;
    let outcome = train_run(&ctx, std::slice::from_ref(&split), pair, classifier, head)?;
    Ok(outcome.best.extractor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::synth::{generate_synthetic_domains, SyntheticDomainSpec};
    use crate::data::TaskMode;
    use crate::encoder::init_target_from_oracle;

    fn synth_sources(dir: &Path, per_class: usize) -> Vec<DomainDataset> {
        let spec = SyntheticDomainSpec {
            num_classes: 3,
            samples_per_class: per_class,
            domain_color_shift: 50.0,
            background_texture_seed: 5,
            image_size: 32,
        };
        generate_synthetic_domains(&spec, 3, dir)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, d)| d.split_train_val(100 + i as u64).unwrap())
            .collect()
    }

    fn tiny_cfg(seed: u64, steps: usize, lambda: f64) -> TrainConfig {
        let mut cfg = TrainConfig::new(TaskMode::Multiclass, seed);
        cfg.lr = 1e-3;
        cfg.steps = steps;
        cfg.batch_size = 6;
        cfg.lambda = lambda;
        cfg.eval_interval = steps;
        cfg.augment.target_size = 32;
        cfg.augment.rng_seed = seed;
        cfg
    }

    fn fresh_models(
        seed: u64,
    ) -> (OraclePair<f32>, Classifier<f32>, VariationalHead<f32>) {
        let arch = TinyConvSpec { input_size: 32, channels: [4, 6, 8] };
        let oracle = TinyConvNet::<f32>::init(arch, seed).unwrap();
        let pair = init_target_from_oracle(Box::new(oracle)).unwrap();
        let d = pair.feature_dim();
        (pair, Classifier::init(d, 5, seed), VariationalHead::identity(d))
    }

    #[test]
    fn minibatch_shares_match_the_equal_share_rule() {
        let dir = tempfile::tempdir().unwrap();
        let sources = synth_sources(dir.path(), 6);
        let mut sampler = MinibatchSampler::new(&sources, 32, 9).unwrap();
        let batch = sampler.next_batch();
        assert_eq!(batch.len(), 32);
        let mut counts = [0usize; 3];
        for (d, _) in &batch {
            counts[*d] += 1;
        }
        let mut sorted = counts.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![10, 11, 11], "3 domains, batch 32 -> shares 11/11/10");

        // remainder rotates, so over 3 batches every domain gets 32 total
        let mut totals = counts;
        for _ in 0..2 {
            for (d, _) in sampler.next_batch() {
                totals[d] += 1;
            }
        }
        assert_eq!(totals, [32, 32, 32]);
    }

    #[test]
    fn four_domain_batches_split_evenly() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticDomainSpec {
            samples_per_class: 6,
            background_texture_seed: 6,
            ..SyntheticDomainSpec::default()
        };
        let sources: Vec<DomainDataset> = generate_synthetic_domains(&spec, 4, dir.path())
            .unwrap()
            .into_iter()
            .map(|d| d.split_train_val(0).unwrap())
            .collect();
        let mut sampler = MinibatchSampler::new(&sources, 32, 1).unwrap();
        let mut counts = [0usize; 4];
        for (d, _) in sampler.next_batch() {
            counts[d] += 1;
        }
        assert_eq!(counts, [8, 8, 8, 8]);
    }

    #[test]
    fn sampler_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let sources = synth_sources(dir.path(), 6);
        let mut a = MinibatchSampler::new(&sources, 7, 3).unwrap();
        let mut b = MinibatchSampler::new(&sources, 7, 3).unwrap();
        for _ in 0..10 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    #[test]
    fn sampler_rejects_small_batches_and_names_empty_domains() {
        let dir = tempfile::tempdir().unwrap();
        let sources = synth_sources(dir.path(), 6);
        assert!(MinibatchSampler::new(&sources, 2, 0).is_err());

        let unsplit = {
            let spec = SyntheticDomainSpec {
                samples_per_class: 6,
                background_texture_seed: 7,
                ..SyntheticDomainSpec::default()
            };
            generate_synthetic_domains(&spec, 2, dir.path().join("u")).unwrap()
        };
        let err = MinibatchSampler::new(&unsplit, 8, 0).unwrap_err();
        assert!(err.to_string().contains("synth_0"), "{err}");
    }

    #[test]
    fn adam_moves_toward_minimum() {
        let mut adam = Adam::<f64>::new(0.1, 0.0, 1);
        let mut p = vec![4.0f64];
        for _ in 0..200 {
            let g = vec![2.0 * p[0]]; // d/dp of p^2
            adam.step(&mut p, &g).unwrap();
        }
        assert!(p[0].abs() < 0.5, "p={}", p[0]);
    }

    #[test]
    fn lambda_zero_run_equals_erm_run() {
        let dir = tempfile::tempdir().unwrap();
        let sources = synth_sources(dir.path(), 4);

        let run = |algorithm: Algorithm, lambda: f64, out: &Path| -> (String, Vec<StepMetrics>) {
            let mut cfg = tiny_cfg(11, 5, lambda);
            cfg.eval_interval = 5;
            let ctx = RunContext {
                data_root: dir.path(),
                run_dir: out,
                cfg: &cfg,
                algorithm,
                swad: SwadConfig::default(),
            };
            let (pair, classifier, head) = fresh_models(11);
            let outcome = train_run(&ctx, &sources, pair, classifier, head).unwrap();
            // checksum of the final trained parameters (not the best ckpt)
            (outcome.best.checksum(), outcome.metrics)
        };

        let (erm_sum, erm_metrics) = run(Algorithm::Erm, 0.0, &dir.path().join("erm"));
        let (l0_sum, l0_metrics) = run(Algorithm::Dgmdr, 0.0, &dir.path().join("l0"));
        assert_eq!(erm_sum, l0_sum, "identical trajectories step for step");
        for (a, b) in erm_metrics.iter().zip(&l0_metrics) {
            assert_eq!(a.ce, b.ce);
            assert_eq!(a.penalty, 0.0);
            assert_eq!(b.penalty, 0.0);
        }
    }

    #[test]
    fn training_run_contract_and_reproducibility() {
        let dir = tempfile::tempdir().unwrap();
        let sources = synth_sources(dir.path(), 4);
        let mut cfg = tiny_cfg(3, 12, 1.0);
        cfg.eval_interval = 4;

        let run = |out: &Path| {
            let ctx = RunContext {
                data_root: dir.path(),
                run_dir: out,
                cfg: &cfg,
                algorithm: Algorithm::Dgmdr,
                swad: SwadConfig::default(),
            };
            let (pair, classifier, head) = fresh_models(3);
            train_run(&ctx, &sources, pair, classifier, head).unwrap()
        };
        let a = run(&dir.path().join("a"));
        let b = run(&dir.path().join("b"));

        assert_eq!(a.metrics.len(), 12, "one metrics row per step");
        let evals = a.metrics.iter().filter(|m| m.val_acc.is_some()).count();
        assert_eq!(evals, 3, "12 steps / eval every 4");
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(x.ce, y.ce);
            assert_eq!(x.penalty, y.penalty);
            assert_eq!(x.total, y.total);
            assert_eq!(x.val_acc, y.val_acc);
        }
        assert_eq!(a.best.checksum(), b.best.checksum());

        // identical seeds produce byte-identical metrics files
        let ma = std::fs::read(dir.path().join("a/metrics.csv")).unwrap();
        let mb = std::fs::read(dir.path().join("b/metrics.csv")).unwrap();
        assert_eq!(ma, mb);

        // penalty starts at exactly zero: target equals oracle and the head
        // is identity-initialized with unit variances
        assert_eq!(a.metrics[0].penalty, 0.0);
        // total = ce + lambda * penalty on every logged step
        for m in &a.metrics {
            assert!((m.total - (m.ce + cfg.lambda * m.penalty)).abs() <= 1e-6);
        }
        // frozen oracle
        assert_eq!(a.oracle_checksum_before, a.oracle_checksum_after);
    }

    #[test]
    fn target_departs_from_oracle_after_training() {
        let dir = tempfile::tempdir().unwrap();
        let sources = synth_sources(dir.path(), 4);
        let cfg = tiny_cfg(21, 3, 1.0);
        let ctx = RunContext {
            data_root: dir.path(),
            run_dir: &dir.path().join("run"),
            cfg: &cfg,
            algorithm: Algorithm::Dgmdr,
            swad: SwadConfig::default(),
        };
        let (pair, classifier, head) = fresh_models(21);
        let oracle_before = checksum_params(pair.oracle().params());
        let target_before = checksum_params(pair.target().params());
        assert_eq!(oracle_before, target_before, "deep copy at step 0");

        let outcome = train_run(&ctx, &sources, pair, classifier, head).unwrap();
        let target_after = checksum_params(outcome.best.extractor.params());
        assert_eq!(outcome.oracle_checksum_after, oracle_before);
        assert_ne!(target_after, target_before, "nonzero gradients move the target");
    }

    #[test]
    fn diverging_run_aborts_with_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        let sources = synth_sources(dir.path(), 4);
        let mut cfg = tiny_cfg(5, 40, 1.0);
        cfg.lr = 1e18; // guaranteed overflow
        let run_dir = dir.path().join("blowup");
        let ctx = RunContext {
            data_root: dir.path(),
            run_dir: &run_dir,
            cfg: &cfg,
            algorithm: Algorithm::Dgmdr,
            swad: SwadConfig::default(),
        };
        let (pair, classifier, head) = fresh_models(5);
        let err = train_run(&ctx, &sources, pair, classifier, head).err().expect("must diverge");
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        assert!(run_dir.join("diagnostic.json").exists());
    }

    #[test]
    fn bundle_checkpoint_round_trip() {
        let (pair, classifier, head) = fresh_models(8);
        let bundle =
            ModelBundle::new(pair.target().boxed_clone(), classifier, head).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.ckpt");
        bundle.to_checkpoint().save(&path).unwrap();
        let loaded =
            ModelBundle::<f32>::from_checkpoint(&ModelCheckpoint::load(&path).unwrap()).unwrap();
        assert_eq!(loaded.checksum(), bundle.checksum());
    }
}
