//! Simplified dense stochastic weight averaging (SWAD-simplified).
//!
//! Snapshots of all trainable parameters are recorded at every validation
//! step. A deterministic window rule picks the averaging interval from the
//! validation-loss curve and the snapshots inside it are averaged
//! elementwise. All reports produced from this module are labeled
//! "SWAD-simplified": it is a documented simplification, not the original
//! interval search.
//!
//! Window rule, for evaluations `(step_k, loss_k)` in step order:
//! - start `t_s`: the first evaluation whose loss is not improved upon by
//!   any of the next `patience` evaluations (`loss_k <= min` of them);
//! - end `t_e`: the last evaluation after `t_s` whose loss is at most
//!   `tolerance_ratio` times the running minimum loss seen so far;
//! - if no start qualifies (loss still strictly improving at the end), the
//!   window falls back to the final `patience` evaluations.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{params_from_le_bytes, params_to_le_bytes, Scalar};

/// Trainable parameters captured at one validation step.
#[derive(Debug, Clone)]
pub struct WeightSnapshot<T> {
    pub step: usize,
    /// Flat parameter vector of (extractor, classifier, head).
    pub params: Vec<T>,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwadConfig {
    /// Number of subsequent evaluations that must fail to improve on an
    /// evaluation before averaging starts there.
    pub patience: usize,
    /// Loss budget relative to the running minimum that keeps the window
    /// open.
    pub tolerance_ratio: f64,
}

impl Default for SwadConfig {
    fn default() -> Self {
        SwadConfig { patience: 3, tolerance_ratio: 1.2 }
    }
}

impl SwadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::config("swad patience must be >= 1"));
        }
        if self.tolerance_ratio < 1.0 {
            return Err(Error::config(format!(
                "swad tolerance ratio must be >= 1, got {}",
                self.tolerance_ratio
            )));
        }
        Ok(())
    }
}

/// Selects the averaging window `(start_step, end_step)` from recorded
/// validation losses. Deterministic; the window always lies within the
/// recorded steps.
pub fn select_window(val_losses: &[(usize, f64)], cfg: &SwadConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    if val_losses.is_empty() {
        return Err(Error::contract("no validation losses recorded"));
    }
    let n = val_losses.len();
    if n < cfg.patience + 1 {
        return Err(Error::contract(format!(
            "need at least patience+1 = {} evaluations, got {n}",
            cfg.patience + 1
        )));
    }

    let mut start_idx = None;
    for k in 0..n - cfg.patience {
        let future_min = val_losses[k + 1..=k + cfg.patience]
            .iter()
            .map(|&(_, l)| l)
            .fold(f64::INFINITY, f64::min);
        if val_losses[k].1 <= future_min {
            start_idx = Some(k);
            break;
        }
    }

    let Some(s) = start_idx else {
        // loss still strictly improving: average the tail
        return Ok((val_losses[n - cfg.patience].0, val_losses[n - 1].0));
    };

    let mut end_idx = s;
    let mut running_min = f64::INFINITY;
    for (j, &(_, loss)) in val_losses.iter().enumerate() {
        running_min = running_min.min(loss);
        if j > s && loss <= cfg.tolerance_ratio * running_min {
            end_idx = j;
        }
    }
    Ok((val_losses[s].0, val_losses[end_idx].0))
}

/// Elementwise arithmetic mean of the snapshot parameter vectors.
///
/// Accumulation runs in f64, so for f32 parameters the mean is exact and
/// invariant under snapshot permutation.
pub fn average_weights<T: Scalar>(snapshots: &[WeightSnapshot<T>]) -> Result<Vec<T>> {
    let Some(first) = snapshots.first() else {
        return Err(Error::contract("cannot average an empty snapshot window"));
    };
    let len = first.params.len();
    for s in snapshots {
        if s.params.len() != len {
            return Err(Error::contract(format!(
                "snapshot at step {} has {} params, expected {len}",
                s.step,
                s.params.len()
            )));
        }
    }
    let k = snapshots.len() as f64;
    let mut acc = vec![0.0f64; len];
    for s in snapshots {
        for (a, p) in acc.iter_mut().zip(&s.params) {
            *a += p.to_f64().expect("finite parameter");
        }
    }
    Ok(acc
        .into_iter()
        .map(|a| T::from_f64(a / k).expect("mean representable"))
        .collect())
}

/// Snapshots inside `[start_step, end_step]`, in step order.
pub fn snapshots_in_window<T: Scalar>(
    snapshots: &[WeightSnapshot<T>],
    window: (usize, usize),
) -> Vec<WeightSnapshot<T>> {
    snapshots
        .iter()
        .filter(|s| s.step >= window.0 && s.step <= window.1)
        .cloned()
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotIndexEntry {
    step: usize,
    val_loss: f64,
    val_accuracy: f64,
    file: String,
    dtype: String,
}

/// Persists one snapshot under `dir` and records it in `index.json`.
pub fn save_snapshot<T: Scalar>(dir: &Path, snapshot: &WeightSnapshot<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file = format!("snap_{:07}.bin", snapshot.step);
    let path = dir.join(&file);
    fs::write(&path, params_to_le_bytes(&snapshot.params)).map_err(|e| Error::io(&path, e))?;

    let index_path = dir.join("index.json");
    let mut entries: Vec<SnapshotIndexEntry> = if index_path.exists() {
        let raw = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        serde_json::from_str(&raw)
            .map_err(|e| Error::data(format!("corrupt snapshot index {}: {e}", index_path.display())))?
    } else {
        Vec::new()
    };
    entries.retain(|e| e.step != snapshot.step);
    entries.push(SnapshotIndexEntry {
        step: snapshot.step,
        val_loss: snapshot.val_loss,
        val_accuracy: snapshot.val_accuracy,
        file,
        dtype: T::DTYPE.to_string(),
    });
    entries.sort_by_key(|e| e.step);
    let raw = serde_json::to_string_pretty(&entries)
        .map_err(|e| Error::data(format!("cannot encode snapshot index: {e}")))?;
    fs::write(&index_path, raw).map_err(|e| Error::io(&index_path, e))?;
    Ok(())
}

/// Reads all snapshots recorded under `dir`, in step order.
pub fn load_snapshots<T: Scalar>(dir: &Path) -> Result<Vec<WeightSnapshot<T>>> {
    let index_path = dir.join("index.json");
    let raw = fs::read_to_string(&index_path)
        .map_err(|e| Error::data(format!("cannot read snapshot index {}: {e}", index_path.display())))?;
    let entries: Vec<SnapshotIndexEntry> = serde_json::from_str(&raw)
        .map_err(|e| Error::data(format!("corrupt snapshot index {}: {e}", index_path.display())))?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if e.dtype != T::DTYPE {
            return Err(Error::data(format!(
                "snapshot {} stored as {}, requested {}",
                e.file,
                e.dtype,
                T::DTYPE
            )));
        }
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|er| Error::io(&path, er))?;
        out.push(WeightSnapshot {
            step: e.step,
            params: params_from_le_bytes(&bytes),
            val_loss: e.val_loss,
            val_accuracy: e.val_accuracy,
        });
    }
    Ok(out)
}

/// Offline re-run on a finished run directory: reads the recorded
/// snapshots, selects the window, and returns the averaged parameters.
pub fn rerun_from_dir<T: Scalar>(
    dir: &Path,
    cfg: &SwadConfig,
) -> Result<((usize, usize), Vec<T>)> {
    let snapshots = load_snapshots::<T>(dir)?;
    let losses: Vec<(usize, f64)> = snapshots.iter().map(|s| (s.step, s.val_loss)).collect();
    let window = select_window(&losses, cfg)?;
    let averaged = average_weights(&snapshots_in_window(&snapshots, window))?;
    Ok((window, averaged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn snap(step: usize, params: &[f32]) -> WeightSnapshot<f32> {
        WeightSnapshot { step, params: params.to_vec(), val_loss: 0.0, val_accuracy: 0.0 }
    }

    #[test]
    fn window_matches_hand_trace() {
        let losses: Vec<(usize, f64)> =
            [5.0, 4.0, 3.0, 3.1, 3.2, 3.3].iter().enumerate().map(|(i, &l)| (i, l)).collect();
        let cfg = SwadConfig { patience: 2, tolerance_ratio: 1.1 };
        assert_eq!(select_window(&losses, &cfg).unwrap(), (2, 5));
    }

    #[test]
    fn constant_losses_span_first_to_last() {
        let losses: Vec<(usize, f64)> = (0..6).map(|i| (i * 10, 2.0)).collect();
        let cfg = SwadConfig { patience: 2, tolerance_ratio: 1.1 };
        assert_eq!(select_window(&losses, &cfg).unwrap(), (0, 50));
    }

    #[test]
    fn still_improving_losses_fall_back_to_tail() {
        // Loss improves at every evaluation, so no start qualifies and the
        // window is the final `patience` evaluations.
        let losses: Vec<(usize, f64)> =
            [6.0, 5.0, 4.0, 3.0, 2.0, 1.0].iter().enumerate().map(|(i, &l)| (i * 100, l)).collect();
        let cfg = SwadConfig { patience: 3, tolerance_ratio: 1.2 };
        assert_eq!(select_window(&losses, &cfg).unwrap(), (300, 500));
    }

    #[test]
    fn window_requires_enough_evaluations() {
        let cfg = SwadConfig::default();
        assert!(select_window(&[], &cfg).is_err());
        let short: Vec<(usize, f64)> = (0..3).map(|i| (i, 1.0)).collect();
        assert!(select_window(&short, &cfg).is_err(), "needs patience+1 evaluations");
    }

    proptest! {
        #[test]
        fn window_lies_within_recorded_steps(
            losses in proptest::collection::vec(0.01f64..10.0, 5..40),
            patience in 1usize..4,
        ) {
            let recorded: Vec<(usize, f64)> =
                losses.iter().enumerate().map(|(i, &l)| (i * 50, l)).collect();
            let cfg = SwadConfig { patience, tolerance_ratio: 1.2 };
            let (s, e) = select_window(&recorded, &cfg).unwrap();
            prop_assert!(s <= e);
            prop_assert!(recorded.iter().any(|&(st, _)| st == s));
            prop_assert!(recorded.iter().any(|&(st, _)| st == e));
        }

        #[test]
        fn averaging_is_permutation_invariant(
            params in proptest::collection::vec(
                proptest::collection::vec(-10.0f32..10.0, 6), 2..8),
        ) {
            let snaps: Vec<WeightSnapshot<f32>> =
                params.iter().enumerate().map(|(i, p)| snap(i, p)).collect();
            let fwd = average_weights(&snaps).unwrap();
            let mut rev = snaps.clone();
            rev.reverse();
            let bwd = average_weights(&rev).unwrap();
            prop_assert_eq!(fwd, bwd);
        }
    }

    #[test]
    fn averaging_examples() {
        let snaps =
            vec![snap(0, &[1.0, 2.0]), snap(1, &[3.0, 4.0]), snap(2, &[5.0, 6.0])];
        assert_eq!(average_weights(&snaps).unwrap(), vec![3.0, 4.0]);

        let w = [0.123f32, -9.5, 7.0];
        let minus: Vec<f32> = w.iter().map(|v| -v).collect();
        assert_eq!(average_weights(&[snap(0, &w), snap(1, &minus)]).unwrap(), vec![0.0, 0.0, 0.0]);

        // identical snapshots average to themselves exactly
        let w = [0.1f32, 0.7, -3.3, 1e-7];
        let snaps: Vec<_> = (0..7).map(|i| snap(i, &w)).collect();
        let avg = average_weights(&snaps).unwrap();
        for (a, b) in avg.iter().zip(w.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn averaging_rejects_mismatched_lengths() {
        let err = average_weights(&[snap(0, &[1.0]), snap(1, &[1.0, 2.0])]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(average_weights::<f32>(&[]).is_err());
    }

    #[test]
    fn snapshots_persist_and_rerun_offline() {
        let dir = tempfile::tempdir().unwrap();
        let losses = [5.0, 4.0, 3.0, 3.1, 3.2, 3.3];
        for (i, &l) in losses.iter().enumerate() {
            let s = WeightSnapshot::<f32> {
                step: i,
                params: vec![i as f32, 2.0 * i as f32],
                val_loss: l,
                val_accuracy: 0.5,
            };
            save_snapshot(dir.path(), &s).unwrap();
        }
        let loaded = load_snapshots::<f32>(dir.path()).unwrap();
        assert_eq!(loaded.len(), 6);
        assert_eq!(loaded[3].params, vec![3.0, 6.0]);

        let cfg = SwadConfig { patience: 2, tolerance_ratio: 1.1 };
        let (window, avg) = rerun_from_dir::<f32>(dir.path(), &cfg).unwrap();
        assert_eq!(window, (2, 5));
        // mean of steps 2..=5: params [i, 2i] -> [3.5, 7.0]
        assert_eq!(avg, vec![3.5, 7.0]);
    }
}
