//! Mutual-information regularization.
//!
//! The penalty is the variational bound
//! `E_batch[ sum_i log sigma2_i + sum_i (z_oracle_i - mu(z_target)_i)^2 / sigma2_i ]`
//! with a Gaussian whose mean is an affine map of the target features and
//! whose diagonal variance is a free per-dimension parameter. Minimizing it
//! together with cross-entropy keeps the trainable extractor's features
//! informative about the frozen oracle's.
//!
//! Reduction: mean over the batch, sum over feature dimensions, so the
//! regularization coefficient has the same scale at every batch size.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{fl, Scalar};

/// Variance floor added to the softplus output.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    // numerically stable: ln(1+e^x) = max(x,0) + ln_1p(e^{-|x|})
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Inverse of softplus: `ln(e^y - 1)` for y > 0.
fn softplus_inv<T: Scalar>(y: T) -> T {
    y + (-((-y).exp())).ln_1p()
}

fn variance_of_raw<T: Scalar>(s: T) -> T {
    softplus(s) + fl::<T>(VARIANCE_FLOOR)
}

/// Raw variance parameter whose decoded variance is exactly 1 in `T`.
///
/// `softplus(s) + floor` rarely lands on 1.0 after rounding, so the seed
/// value is stepped ulp by ulp until the decoded variance bit-equals one.
/// This pins the penalty of a freshly initialized head at exactly zero.
fn raw_param_for_unit_variance<T: Scalar>() -> T {
    let target = T::one();
    let seed = softplus_inv(T::one() - fl::<T>(VARIANCE_FLOOR));
    if variance_of_raw(seed) == target {
        return seed;
    }
    let (mut up, mut down) = (seed, seed);
    for _ in 0..4096 {
        up = up.next_up();
        if variance_of_raw(up) == target {
            return up;
        }
        down = down.next_down();
        if variance_of_raw(down) == target {
            return down;
        }
    }
    seed
}

/// Gaussian variational head: an affine mean map `mu` over the target
/// features and one unconstrained variance parameter per feature dimension,
/// decoded as `sigma2 = softplus(s) + 1e-6` so variances stay positive.
///
/// Flat parameter order: mean weight (d*d, row-major), mean bias (d), raw
/// variance (d).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalHead<T> {
    d: usize,
    mean_weight: Vec<T>,
    mean_bias: Vec<T>,
    raw_var: Vec<T>,
}

impl<T: Scalar> VariationalHead<T> {
    /// Fresh head: the mean map is the identity and every variance decodes
    /// to exactly 1, so the penalty of an untrained model starts at zero.
    pub fn identity(d: usize) -> Self {
        let mut mean_weight = vec![T::zero(); d * d];
        for i in 0..d {
            mean_weight[i * d + i] = T::one();
        }
        let raw = raw_param_for_unit_variance::<T>();
        VariationalHead {
            d,
            mean_weight,
            mean_bias: vec![T::zero(); d],
            raw_var: vec![raw; d],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.d
    }

    pub fn num_params(&self) -> usize {
        self.d * self.d + 2 * self.d
    }

    /// Decoded per-dimension variances (always > 0).
    pub fn variances(&self) -> Vec<T> {
        self.raw_var.iter().map(|&s| variance_of_raw(s)).collect()
    }

    /// Overrides the raw variance parameters (test and calibration hook).
    pub fn set_raw_variances(&mut self, raw: &[T]) -> Result<()> {
        if raw.len() != self.d {
            return Err(Error::contract(format!(
                "raw variance length {} != feature dim {}",
                raw.len(),
                self.d
            )));
        }
        self.raw_var.copy_from_slice(raw);
        Ok(())
    }

    /// Raw parameter that decodes to the requested variance.
    pub fn raw_for_variance(target: f64) -> T {
        softplus_inv(fl::<T>(target - VARIANCE_FLOOR))
    }

    /// Applies the affine mean map row-wise: `mu = z W^T + b`.
    pub fn mean_forward(&self, z: &Array2<T>) -> Result<Array2<T>> {
        let (b, d) = z.dim();
        if d != self.d {
            return Err(Error::contract(format!(
                "mean map expects width {}, got {d}",
                self.d
            )));
        }
        let mut out = Array2::zeros((b, d));
        let zs = z.as_slice().expect("standard layout");
        let os = out.as_slice_mut().expect("standard layout");
        for r in 0..b {
            let zrow = &zs[r * d..(r + 1) * d];
            let orow = &mut os[r * d..(r + 1) * d];
            for i in 0..d {
                let wrow = &self.mean_weight[i * d..(i + 1) * d];
                let mut acc = self.mean_bias[i];
                for (w, zv) in wrow.iter().zip(zrow.iter()) {
                    acc += *w * *zv;
                }
                orow[i] = acc;
            }
        }
        Ok(out)
    }

    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(&self.mean_weight);
        out.extend_from_slice(&self.mean_bias);
        out.extend_from_slice(&self.raw_var);
        out
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::contract(format!(
                "head expects {} params, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let dd = self.d * self.d;
        self.mean_weight.copy_from_slice(&flat[..dd]);
        self.mean_bias.copy_from_slice(&flat[dd..dd + self.d]);
        self.raw_var.copy_from_slice(&flat[dd + self.d..]);
        Ok(())
    }
}

/// Gradients of the penalty with respect to the target features and the
/// head parameters (same flat order as [`VariationalHead::flat_params`]).
#[derive(Debug, Clone)]
pub struct PenaltyGrads<T> {
    pub d_z_target: Array2<T>,
    pub d_head: Vec<T>,
}

fn check_penalty_inputs<T: Scalar>(
    z_oracle: &Array2<T>,
    z_target: &Array2<T>,
    head: &VariationalHead<T>,
) -> Result<(usize, usize)> {
    let (b, d) = z_target.dim();
    if z_oracle.dim() != (b, d) {
        return Err(Error::contract(format!(
            "feature shapes differ: oracle {:?} vs target {:?}",
            z_oracle.dim(),
            z_target.dim()
        )));
    }
    if d != head.feature_dim() {
        return Err(Error::contract(format!(
            "head dimension {} != feature width {d}",
            head.feature_dim()
        )));
    }
    if b == 0 {
        return Err(Error::contract("empty batch"));
    }
    for (name, m) in [("oracle", z_oracle), ("target", z_target)] {
        if let Some(((r, c), v)) = m.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite {name} feature at row {r}, dim {c}: {v}"
            )));
        }
    }
    Ok((b, d))
}

/// Mutual-information penalty of a batch.
///
/// Returns `mean_over_batch[ sum_i log sigma2_i + sum_i r_i^2 / sigma2_i ]`
/// with `r = z_oracle - mu(z_target)`. The oracle features enter as
/// constants; only `z_target` and the head receive gradients.
pub fn mi_penalty<T: Scalar>(
    z_oracle: &Array2<T>,
    z_target: &Array2<T>,
    head: &VariationalHead<T>,
) -> Result<T> {
    let (b, d) = check_penalty_inputs(z_oracle, z_target, head)?;
    let mu = head.mean_forward(z_target)?;
    let var = head.variances();

    let mut log_det = T::zero();
    for i in 0..d {
        log_det += var[i].ln();
    }
    let mut maha_sum = T::zero();
    let zo = z_oracle.as_slice().expect("standard layout");
    let ms = mu.as_slice().expect("standard layout");
    for r in 0..b {
        for i in 0..d {
            let diff = zo[r * d + i] - ms[r * d + i];
            maha_sum += diff * diff / var[i];
        }
    }
    Ok(log_det + maha_sum / fl::<T>(b as f64))
}

/// Penalty plus analytic gradients.
pub fn mi_penalty_with_grad<T: Scalar>(
    z_oracle: &Array2<T>,
    z_target: &Array2<T>,
    head: &VariationalHead<T>,
) -> Result<(T, PenaltyGrads<T>)> {
    let (b, d) = check_penalty_inputs(z_oracle, z_target, head)?;
    let mu = head.mean_forward(z_target)?;
    let var = head.variances();
    let inv_b = fl::<T>(1.0 / b as f64);

    let zo = z_oracle.as_slice().expect("standard layout");
    let zt = z_target.as_slice().expect("standard layout");
    let ms = mu.as_slice().expect("standard layout");

    let mut log_det = T::zero();
    for i in 0..d {
        log_det += var[i].ln();
    }

    // d penalty / d mu[r,i] = -2 r_{ri} / (B * var_i)
    let mut d_mu = vec![T::zero(); b * d];
    let mut maha_sum = T::zero();
    // accumulator for d penalty / d var_i (batch part)
    let mut resid_sq_over_var2 = vec![T::zero(); d];
    for r in 0..b {
        for i in 0..d {
            let diff = zo[r * d + i] - ms[r * d + i];
            maha_sum += diff * diff / var[i];
            d_mu[r * d + i] = fl::<T>(-2.0) * diff / var[i] * inv_b;
            resid_sq_over_var2[i] += diff * diff / (var[i] * var[i]);
        }
    }
    let penalty = log_det + maha_sum * inv_b;

    // chain through the affine mean map
    let mut d_z = Array2::zeros((b, d));
    {
        let dz = d_z.as_slice_mut().expect("standard layout");
        for r in 0..b {
            for i in 0..d {
                let g = d_mu[r * d + i];
                if g == T::zero() {
                    continue;
                }
                let wrow = &head.mean_weight[i * d..(i + 1) * d];
                let dzrow = &mut dz[r * d..(r + 1) * d];
                for (dzj, w) in dzrow.iter_mut().zip(wrow.iter()) {
                    *dzj += g * *w;
                }
            }
        }
    }

    let mut d_head = vec![T::zero(); head.num_params()];
    {
        let (d_w, rest) = d_head.split_at_mut(d * d);
        let (d_b, d_s) = rest.split_at_mut(d);
        for r in 0..b {
            let zrow = &zt[r * d..(r + 1) * d];
            for i in 0..d {
                let g = d_mu[r * d + i];
                d_b[i] += g;
                let dwrow = &mut d_w[i * d..(i + 1) * d];
                for (dw, zv) in dwrow.iter_mut().zip(zrow.iter()) {
                    *dw += g * *zv;
                }
            }
        }
        for i in 0..d {
            let d_var = T::one() / var[i] - resid_sq_over_var2[i] * inv_b;
            d_s[i] = d_var * sigmoid(head.raw_var[i]);
        }
    }

    Ok((penalty, PenaltyGrads { d_z_target: d_z, d_head }))
}

/// Mean cross-entropy of raw logits against integer labels.
pub fn cross_entropy<T: Scalar>(logits: &Array2<T>, labels: &[usize]) -> Result<T> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy_with_grad<T: Scalar>(
    logits: &Array2<T>,
    labels: &[usize],
) -> Result<(T, Array2<T>)> {
    let (b, c) = logits.dim();
    if labels.len() != b {
        return Err(Error::contract(format!(
            "{} labels for a batch of {b} logits rows",
            labels.len()
        )));
    }
    if b == 0 {
        return Err(Error::contract("empty batch"));
    }
    let ls = logits.as_slice().expect("standard layout");
    let inv_b = fl::<T>(1.0 / b as f64);
    let mut grad = Array2::zeros((b, c));
    let gs = grad.as_slice_mut().expect("standard layout");
    let mut loss = T::zero();
    for r in 0..b {
        let y = labels[r];
        if y >= c {
            return Err(Error::contract(format!(
                "label {y} out of range for {c} classes (row {r})"
            )));
        }
        let row = &ls[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = sum.ln() + max;
        loss += lse - row[y];
        let grow = &mut gs[r * c..(r + 1) * c];
        for (j, g) in grow.iter_mut().enumerate() {
            let softmax = (row[j] - lse).exp();
            *g = softmax * inv_b;
        }
        grow[y] -= inv_b;
    }
    Ok((loss * inv_b, grad))
}

/// Combined objective: cross-entropy plus `lambda` times the penalty.
/// With `lambda = 0` this is the plain ERM objective.
pub fn total_loss<T: Scalar>(
    logits: &Array2<T>,
    labels: &[usize],
    penalty: T,
    lambda: T,
) -> Result<T> {
    if lambda < T::zero() {
        return Err(Error::contract(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(cross_entropy(logits, labels)? + lambda * penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn head_with_variance<T: Scalar>(d: usize, var: f64) -> VariationalHead<T> {
        let mut head = VariationalHead::<T>::identity(d);
        head.set_raw_variances(&vec![VariationalHead::<T>::raw_for_variance(var); d]).unwrap();
        head
    }

    #[test]
    fn unit_variance_is_exact_for_both_scalar_types() {
        let h32 = VariationalHead::<f32>::identity(3);
        assert!(h32.variances().iter().all(|&v| v == 1.0));
        let h64 = VariationalHead::<f64>::identity(3);
        assert!(h64.variances().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identity_case_is_exactly_zero() {
        let head = VariationalHead::<f64>::identity(2);
        let z = array![[0.25, -1.5]];
        let p = mi_penalty(&z, &z, &head).unwrap();
        assert_eq!(p, 0.0);
    }

    #[test]
    fn worked_scalar_examples() {
        // zero residual, unit variance
        let head = VariationalHead::<f64>::identity(2);
        let z0 = array![[0.0, 0.0]];
        assert_eq!(mi_penalty(&z0, &z0, &head).unwrap(), 0.0);

        // residual [1,2], unit variance: 0 + (1 + 4)
        let zo = array![[1.0, 2.0]];
        let zt = array![[0.0, 0.0]];
        let p = mi_penalty(&zo, &zt, &head).unwrap();
        assert!((p - 5.0).abs() < 1e-12, "{p}");

        // zero residual, variance e per dimension: log e + log e
        let head_e = head_with_variance::<f64>(2, std::f64::consts::E);
        let p = mi_penalty(&z0, &z0, &head_e).unwrap();
        assert!((p - 2.0).abs() < 1e-9, "{p}");
    }

    #[test]
    fn variance_stays_positive_for_any_raw_parameter() {
        let mut head = VariationalHead::<f64>::identity(1);
        for raw in [-1e9, -50.0, -1.0, 0.0, 3.0, 700.0] {
            head.set_raw_variances(&[raw]).unwrap();
            assert!(head.variances()[0] > 0.0, "raw={raw}");
        }
    }

    #[test]
    fn mahalanobis_scales_quadratically_with_residual() {
        let head = head_with_variance::<f64>(3, 0.37);
        let zt = array![[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let zo = array![[1.0, -2.0, 0.5], [0.3, 0.1, -0.7]];
        let log_det = mi_penalty(&zt, &zt, &head).unwrap();
        let maha1 = mi_penalty(&zo, &zt, &head).unwrap() - log_det;
        let zo3 = zo.mapv(|v| v * 3.0);
        let maha9 = mi_penalty(&zo3, &zt, &head).unwrap() - log_det;
        assert!((maha9 - 9.0 * maha1).abs() < 1e-9 * maha9.abs().max(1.0));
    }

    #[test]
    fn rejects_shape_mismatch_and_reports_nonfinite_index() {
        let head = VariationalHead::<f64>::identity(2);
        let a = array![[0.0, 0.0]];
        let b = array![[0.0, 0.0, 0.0]];
        assert!(matches!(mi_penalty(&b, &a, &head), Err(Error::Contract(_))));

        let bad = array![[0.0, f64::NAN]];
        let err = mi_penalty(&bad, &a, &head).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dim 1"), "should name the offending index: {msg}");
    }

    #[test]
    fn descent_on_mean_params_recovers_oracle_features() {
        // With variances fixed, the penalty over mu is minimized exactly at
        // mu(z_target) = z_oracle; plain gradient descent should find it.
        let d = 3;
        let mut head = VariationalHead::<f64>::identity(d);
        let zo = array![[0.8, -0.4, 1.2], [-0.3, 0.9, 0.1], [0.0, 0.5, -1.0], [1.1, 0.2, 0.4]];
        let zt = array![[0.1, 0.2, -0.3], [0.5, -0.6, 0.7], [-0.9, 0.2, 0.0], [0.3, 0.3, 0.3]];
        let lr = 0.05;
        for _ in 0..5000 {
            let (_, grads) = mi_penalty_with_grad(&zo, &zt, &head).unwrap();
            let mut flat = head.flat_params();
            // freeze the variance parameters; descend on the mean map only
            for i in 0..d * d + d {
                flat[i] -= lr * grads.d_head[i];
            }
            head.set_flat_params(&flat).unwrap();
        }
        let mu = head.mean_forward(&zt).unwrap();
        for (m, o) in mu.iter().zip(zo.iter()) {
            assert!((m - o).abs() < 1e-3, "mu={m} oracle={o}");
        }
        let p = mi_penalty(&zo, &zt, &head).unwrap();
        assert!(p.abs() < 1e-5, "penalty at the minimizer should vanish, got {p}");
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut r = crate::rng::stream(42, &[1]);
        for _ in 0..20 {
            let b = r.random_range(1..=4);
            let d = r.random_range(1..=8);
            let mut head = VariationalHead::<f64>::identity(d);
            let mut flat = head.flat_params();
            for v in flat.iter_mut() {
                *v += r.random_range(-0.5..0.5);
            }
            head.set_flat_params(&flat).unwrap();
            let zo = Array2::from_shape_fn((b, d), |_| r.random_range(-2.0..2.0));
            let zt = Array2::from_shape_fn((b, d), |_| r.random_range(-2.0..2.0));

            let (_, grads) = mi_penalty_with_grad(&zo, &zt, &head).unwrap();
            let h = 1e-5;

            for idx in 0..b * d {
                let mut plus = zt.clone();
                let mut minus = zt.clone();
                plus.as_slice_mut().unwrap()[idx] += h;
                minus.as_slice_mut().unwrap()[idx] -= h;
                let num = (mi_penalty(&zo, &plus, &head).unwrap()
                    - mi_penalty(&zo, &minus, &head).unwrap())
                    / (2.0 * h);
                let ana = grads.d_z_target.as_slice().unwrap()[idx];
                let denom = (num.abs() + ana.abs()).max(1e-6);
                assert!((num - ana).abs() / denom <= 1e-4, "z grad: num={num} ana={ana}");
            }
            for idx in 0..head.num_params() {
                let mut fp = head.flat_params();
                fp[idx] += h;
                let mut hp = head.clone();
                hp.set_flat_params(&fp).unwrap();
                fp[idx] -= 2.0 * h;
                let mut hm = head.clone();
                hm.set_flat_params(&fp).unwrap();
                let num = (mi_penalty(&zo, &zt, &hp).unwrap()
                    - mi_penalty(&zo, &zt, &hm).unwrap())
                    / (2.0 * h);
                let ana = grads.d_head[idx];
                let denom = (num.abs() + ana.abs()).max(1e-6);
                assert!((num - ana).abs() / denom <= 1e-4, "head grad {idx}: num={num} ana={ana}");
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        // uniform logits: ln C for any labels
        for c in [2usize, 5] {
            let logits = Array2::<f64>::zeros((3, c));
            let ce = cross_entropy(&logits, &[0, c - 1, c / 2]).unwrap();
            assert!((ce - (c as f64).ln()).abs() < 1e-12);
        }
        // label out of range
        let logits = Array2::<f64>::zeros((1, 2));
        assert!(matches!(cross_entropy(&logits, &[2]), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_gradient_matches_central_differences() {
        let mut r = crate::rng::stream(43, &[2]);
        let (b, c) = (3, 4);
        let logits: Array2<f64> = Array2::from_shape_fn((b, c), |_| r.random_range(-2.0..2.0));
        let labels = vec![1usize, 3, 0];
        let (_, grad) = cross_entropy_with_grad(&logits, &labels).unwrap();
        let h = 1e-6;
        for idx in 0..b * c {
            let mut p = logits.clone();
            let mut m = logits.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            let num =
                (cross_entropy(&p, &labels).unwrap() - cross_entropy(&m, &labels).unwrap()) / (2.0 * h);
            let ana = grad.as_slice().unwrap()[idx];
            assert!((num - ana).abs() <= 1e-6 * (1.0 + ana.abs()), "num={num} ana={ana}");
        }
    }

    #[test]
    fn total_loss_degenerates_to_cross_entropy_at_lambda_zero() {
        let logits: Array2<f64> = array![[0.3, -0.2, 1.0], [0.0, 0.0, 0.0]];
        let labels = [2usize, 1];
        let ce = cross_entropy(&logits, &labels).unwrap();
        let t = total_loss(&logits, &labels, 123.456, 0.0).unwrap();
        assert_eq!(t, ce);
        let t1 = total_loss(&logits, &labels, 2.0, 1.0).unwrap();
        assert!((t1 - (ce + 2.0)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn mahalanobis_part_is_never_negative(
            vals in proptest::collection::vec(-5.0f64..5.0, 8),
            var in 0.01f64..20.0,
        ) {
            let head = head_with_variance::<f64>(2, var);
            let zo = Array2::from_shape_vec((2, 2), vals[..4].to_vec()).unwrap();
            let zt = Array2::from_shape_vec((2, 2), vals[4..].to_vec()).unwrap();
            let log_det = 2.0 * head.variances()[0].ln();
            let maha = mi_penalty(&zo, &zt, &head).unwrap() - log_det;
            prop_assert!(maha >= -1e-12);
        }
    }

    #[test]
    fn one_dimensional_variance_minimizer_is_residual_squared() {
        // grid-search oracle for the calculus minimizer sigma2 = r^2
        for r in [0.5f64, 1.0, 2.0] {
            let zo = array![[r]];
            let zt = array![[0.0]];
            let mut best = (f64::INFINITY, 0.0);
            let mut head = VariationalHead::<f64>::identity(1);
            for k in 0..4000 {
                let var = 1e-3 * 1.003f64.powi(k);
                head.set_raw_variances(&[VariationalHead::<f64>::raw_for_variance(var)]).unwrap();
                let p = mi_penalty(&zo, &zt, &head).unwrap();
                if p < best.0 {
                    best = (p, var);
                }
            }
            assert!((best.1 - r * r).abs() < 1e-2 * r * r.max(1.0), "argmin {} vs {}", best.1, r * r);
            assert!((best.0 - (1.0 + (r * r).ln())).abs() < 1e-3, "min value {}", best.0);
        }
    }
}
