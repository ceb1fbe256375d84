//! Feature extractors and the classification head.
//!
//! The pipeline uses two extractors of the same architecture: a frozen
//! pretrained oracle and a trainable target initialized as a deep copy of
//! the oracle. Features from the target go through an affine classifier;
//! oracle features only feed the mutual-information penalty and never
//! receive gradients.
//!
//! Any type implementing [`FeatureExtractor`] runs through the full
//! pipeline; [`tiny::TinyConvNet`] is the bundled desk-scale architecture.
//! Larger backbones plug in through the same trait, with their weights
//! supplied externally as checkpoints.

pub mod checkpoint;
pub mod tiny;

use std::any::Any;

use ndarray::{Array2, Array3};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{fl, Scalar};

pub use checkpoint::ModelCheckpoint;
pub use tiny::{TinyConvNet, TinyConvSpec};

/// Opaque forward-pass state an extractor needs to run its backward pass.
pub type ExtractorTrace = Box<dyn Any + Send + Sync>;

/// A feature extractor mapping one image tensor (H, W, 3) to a feature
/// vector of fixed width.
///
/// Parameters are exposed as one flat slice in a stable order; weight
/// averaging, checkpointing, and the optimizer all rely on that order
/// staying fixed for a given architecture id.
pub trait FeatureExtractor<T: Scalar>: Send + Sync {
    /// Identifier encoding the architecture and its shape configuration.
    fn architecture_id(&self) -> String;
    /// Output feature width `d`.
    fn feature_dim(&self) -> usize;
    fn num_params(&self) -> usize;
    fn params(&self) -> &[T];
    fn params_mut(&mut self) -> &mut [T];
    /// Inference-only forward pass.
    fn forward(&self, image: &Array3<T>) -> Result<Vec<T>>;
    /// Forward pass that retains the state needed for [`Self::backward`].
    fn forward_traced(&self, image: &Array3<T>) -> Result<(Vec<T>, ExtractorTrace)>;
    /// Accumulates parameter gradients for one sample into `d_params`
    /// given the gradient of the loss w.r.t. this sample's features.
    fn backward(&self, trace: &ExtractorTrace, d_features: &[T], d_params: &mut [T]) -> Result<()>;
    fn boxed_clone(&self) -> Box<dyn FeatureExtractor<T>>;
}

impl<T: Scalar> Clone for Box<dyn FeatureExtractor<T>> {
    fn clone(&self) -> Self {
        self.boxed_clone()
    }
}

/// The frozen oracle extractor and the trainable target extractor.
///
/// The oracle is excluded from every parameter update by construction: the
/// optimizer only ever sees the target's parameters, and the oracle is only
/// reachable through `&self`.
pub struct OraclePair<T: Scalar> {
    oracle: Box<dyn FeatureExtractor<T>>,
    target: Box<dyn FeatureExtractor<T>>,
}

impl<T: Scalar> Clone for OraclePair<T> {
    fn clone(&self) -> Self {
        OraclePair { oracle: self.oracle.clone(), target: self.target.clone() }
    }
}

impl<T: Scalar> OraclePair<T> {
    pub fn oracle(&self) -> &dyn FeatureExtractor<T> {
        self.oracle.as_ref()
    }

    pub fn target(&self) -> &dyn FeatureExtractor<T> {
        self.target.as_ref()
    }

    pub fn target_mut(&mut self) -> &mut dyn FeatureExtractor<T> {
        self.target.as_mut()
    }

    pub fn feature_dim(&self) -> usize {
        self.target.feature_dim()
    }

    /// SHA-256 over the oracle's parameter bytes; recorded before and after
    /// training to demonstrate the frozen contract.
    pub fn oracle_checksum(&self) -> String {
        checksum_params(self.oracle.params())
    }
}

/// Builds the trainable target as a deep copy of the oracle. At this point
/// `target(x) == oracle(x)` exactly for every input.
pub fn init_target_from_oracle<T: Scalar>(
    oracle: Box<dyn FeatureExtractor<T>>,
) -> Result<OraclePair<T>> {
    if oracle.num_params() == 0 {
        return Err(Error::config("oracle has no parameters loaded"));
    }
    let target = oracle.clone();
    Ok(OraclePair { oracle, target })
}

/// Feature matrices `(Z_target, Z_oracle)` of shape batch x feature_dim for
/// one batch of transformed images. Oracle features carry no trace, so no
/// gradient can flow into the oracle.
pub fn extract_features<T: Scalar>(
    pair: &OraclePair<T>,
    batch: &[Array3<T>],
) -> Result<(Array2<T>, Array2<T>)> {
    let (z_target, _, z_oracle) = extract_features_traced(pair, batch, false)?;
    Ok((z_target, z_oracle))
}

/// As [`extract_features`] but optionally retaining the target's forward
/// traces for backpropagation. Row order matches batch order regardless of
/// worker scheduling.
pub fn extract_features_traced<T: Scalar>(
    pair: &OraclePair<T>,
    batch: &[Array3<T>],
    with_trace: bool,
) -> Result<(Array2<T>, Vec<ExtractorTrace>, Array2<T>)> {
    if batch.is_empty() {
        return Err(Error::contract("empty feature batch"));
    }
    let d = pair.feature_dim();
    let per_sample: Vec<Result<(Vec<T>, Option<ExtractorTrace>, Vec<T>)>> = batch
        .par_iter()
        .map(|img| {
            let (zt, trace) = if with_trace {
                let (z, t) = pair.target.forward_traced(img)?;
                (z, Some(t))
            } else {
                (pair.target.forward(img)?, None)
            };
            let zo = pair.oracle.forward(img)?;
            Ok((zt, trace, zo))
        })
        .collect();

    let b = batch.len();
    let mut z_target = Array2::zeros((b, d));
    let mut z_oracle = Array2::zeros((b, d));
    let mut traces = Vec::with_capacity(if with_trace { b } else { 0 });
    for (r, item) in per_sample.into_iter().enumerate() {
        let (zt, trace, zo) = item?;
        z_target.row_mut(r).iter_mut().zip(zt.iter()).for_each(|(o, v)| *o = *v);
        z_oracle.row_mut(r).iter_mut().zip(zo.iter()).for_each(|(o, v)| *o = *v);
        if let Some(t) = trace {
            traces.push(t);
        }
    }
    Ok((z_target, traces, z_oracle))
}

/// Affine classification head mapping features to class logits. No softmax
/// is applied; the loss handles that.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    weight: Vec<T>, // num_classes x in_dim, row-major
    bias: Vec<T>,
    in_dim: usize,
    num_classes: usize,
}

impl<T: Scalar> Classifier<T> {
    /// Small seeded random weights, zero bias.
    pub fn init(in_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[0x636c_7366 /* "clsf" */]);
        let normal = Normal::new(0.0f64, 0.01).expect("valid std");
        let weight =
            (0..num_classes * in_dim).map(|_| fl::<T>(normal.sample(&mut r))).collect();
        Classifier { weight, bias: vec![T::zero(); num_classes], in_dim, num_classes }
    }

    pub fn zeroed(in_dim: usize, num_classes: usize) -> Self {
        Classifier {
            weight: vec![T::zero(); num_classes * in_dim],
            bias: vec![T::zero(); num_classes],
            in_dim,
            num_classes,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(&self.weight);
        out.extend_from_slice(&self.bias);
        out
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::contract(format!(
                "classifier expects {} params, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let nw = self.weight.len();
        self.weight.copy_from_slice(&flat[..nw]);
        self.bias.copy_from_slice(&flat[nw..]);
        Ok(())
    }

    /// Gradients w.r.t. parameters (flat, same order as `flat_params`) and
    /// the input features, given the loss gradient at the logits.
    pub fn backward(
        &self,
        features: &Array2<T>,
        d_logits: &Array2<T>,
    ) -> Result<(Vec<T>, Array2<T>)> {
        let (b, d) = features.dim();
        if d_logits.dim() != (b, self.num_classes) || d != self.in_dim {
            return Err(Error::contract(format!(
                "classifier backward shapes: features {:?}, d_logits {:?}, expected ({b}, {}) and ({b}, {})",
                features.dim(),
                d_logits.dim(),
                self.in_dim,
                self.num_classes
            )));
        }
        let zs = features.as_slice().expect("standard layout");
        let gs = d_logits.as_slice().expect("standard layout");
        let mut grads = vec![T::zero(); self.num_params()];
        let (dw, db) = grads.split_at_mut(self.weight.len());
        let mut d_features = Array2::zeros((b, d));
        let dfs = d_features.as_slice_mut().expect("standard layout");
        for r in 0..b {
            let zrow = &zs[r * d..(r + 1) * d];
            let grow = &gs[r * self.num_classes..(r + 1) * self.num_classes];
            let dfrow = &mut dfs[r * d..(r + 1) * d];
            for j in 0..self.num_classes {
                let g = grow[j];
                db[j] += g;
                let wrow = &self.weight[j * d..(j + 1) * d];
                let dwrow = &mut dw[j * d..(j + 1) * d];
                for i in 0..d {
                    dwrow[i] += g * zrow[i];
                    dfrow[i] += g * wrow[i];
                }
            }
        }
        Ok((grads, d_features))
    }
}

/// Applies the classifier to a feature batch, producing raw logits.
pub fn classify<T: Scalar>(g: &Classifier<T>, features: &Array2<T>) -> Result<Array2<T>> {
    let (b, d) = features.dim();
    if d != g.in_dim {
        return Err(Error::contract(format!(
            "classifier expects feature width {}, got {d}",
            g.in_dim
        )));
    }
    let zs = features.as_slice().expect("standard layout");
    let mut logits = Array2::zeros((b, g.num_classes));
    let ls = logits.as_slice_mut().expect("standard layout");
    for r in 0..b {
        let zrow = &zs[r * d..(r + 1) * d];
        let lrow = &mut ls[r * g.num_classes..(r + 1) * g.num_classes];
        for j in 0..g.num_classes {
            let wrow = &g.weight[j * d..(j + 1) * d];
            let mut acc = g.bias[j];
            for (w, z) in wrow.iter().zip(zrow.iter()) {
                acc += *w * *z;
            }
            lrow[j] = acc;
        }
    }
    Ok(logits)
}

/// SHA-256 hex digest of a parameter vector's little-endian bytes.
pub fn checksum_params<T: Scalar>(params: &[T]) -> String {
    use sha2::{Digest, Sha256};
    let bytes = crate::scalar::params_to_le_bytes(params);
    let digest = Sha256::digest(&bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
