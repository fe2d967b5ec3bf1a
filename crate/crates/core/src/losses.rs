//! Segmentation losses: soft Dice, binary cross-entropy, and their hybrid
//! sum, evaluated per tumor region and summed into the training objective.
//!
//! These are pure value/gradient functions; the training loop uses the
//! equivalent tape ops in [`crate::autodiff`], which are tested against
//! these implementations.

use crate::error::{Error, Result};
use crate::scalar::Real;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Smoothing term in the soft Dice denominator.
    pub epsilon: f64,
    /// Probabilities are clamped to `[clamp, 1 − clamp]` inside the BCE log.
    pub ce_clamp: f64,
    /// Per-region weights `[whole, core, enhancing]` on the hybrid terms.
    pub region_weights: [f64; 3],
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            ce_clamp: 1e-7,
            region_weights: [1.0, 1.0, 1.0],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 || self.ce_clamp <= 0.0 || self.ce_clamp >= 0.5 {
            return Err(Error::InvalidConfig(format!(
                "loss epsilon {} / clamp {} out of range",
                self.epsilon, self.ce_clamp
            )));
        }
        if self.region_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidConfig(
                "negative region weight".to_string(),
            ));
        }
        Ok(())
    }
}

/// Soft Dice loss `L = −2 Σ p·t / (Σ p + Σ t + ε)` and its gradient
/// `∂L/∂p_i = (−2 t_i − L) / (Σ p + Σ t + ε)`.
pub fn soft_dice<T: Real>(
    pred: &ArrayD<T>,
    target: &ArrayD<T>,
    epsilon: T,
) -> (T, ArrayD<T>) {
    assert_eq!(pred.shape(), target.shape());
    let two = T::from_f64_c(2.0);
    let inter: T = pred.iter().zip(target.iter()).map(|(&p, &t)| p * t).sum();
    let denom = pred.sum() + target.sum() + epsilon;
    let loss = -two * inter / denom;
    let grad = target.mapv(|t| (-two * t - loss) / denom);
    (loss, grad)
}

/// Mean binary cross-entropy with clamped probabilities, plus gradient.
/// The gradient is zero where the clamp is active.
pub fn bce<T: Real>(pred: &ArrayD<T>, target: &ArrayD<T>, clamp: T) -> (T, ArrayD<T>) {
    assert_eq!(pred.shape(), target.shape());
    let one = T::one();
    let n = T::from_usize(pred.len()).unwrap();
    let mut acc = T::zero();
    let mut grad = ArrayD::zeros(pred.raw_dim());
    ndarray::Zip::from(&mut grad)
        .and(pred)
        .and(target)
        .for_each(|g, &p, &t| {
            let q = p.max(clamp).min(one - clamp);
            acc += -(t * q.ln() + (one - t) * (one - q).ln());
            if p > clamp && p < one - clamp {
                *g = (p - t) / (p * (one - p)) / n;
            }
        });
    (acc / n, grad)
}

/// Hybrid loss: soft Dice plus BCE.
pub fn hybrid<T: Real>(
    pred: &ArrayD<T>,
    target: &ArrayD<T>,
    config: &LossConfig,
) -> (T, ArrayD<T>) {
    let (dl, dg) = soft_dice(pred, target, T::from_f64_c(config.epsilon));
    let (bl, bg) = bce(pred, target, T::from_f64_c(config.ce_clamp));
    (dl + bl, dg + bg)
}

/// Training objective: weighted sum of per-region hybrid losses.
/// `preds` and `targets` are `[whole, core, enhancing]`.
pub fn total<T: Real>(
    preds: &[&ArrayD<T>; 3],
    targets: &[&ArrayD<T>; 3],
    config: &LossConfig,
) -> T {
    let mut acc = T::zero();
    for r in 0..3 {
        let (l, _) = hybrid(preds[r], targets[r], config);
        acc += T::from_f64_c(config.region_weights[r]) * l;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use approx::assert_relative_eq;
    use ndarray::Array1;

    fn arr(v: &[f64]) -> ArrayD<f64> {
        Array1::from_vec(v.to_vec()).into_dyn()
    }

    #[test]
    fn dice_matches_hand_computed_value() {
        // p = [0.5, 0.5], t = [1, 0]:
        //   L = −2·0.5 / (1 + 1 + 1e-5) = −0.4999975000125…
        let (l, g) = soft_dice(&arr(&[0.5, 0.5]), &arr(&[1.0, 0.0]), 1e-5);
        assert_relative_eq!(l, -0.4999975000124999, epsilon = 1e-12);
        // ∂L/∂p_0 = (−2 − L)/denom, ∂L/∂p_1 = (0 − L)/denom
        assert_relative_eq!(g[[0]], (-2.0 - l) / 2.00001, epsilon = 1e-12);
        assert_relative_eq!(g[[1]], -l / 2.00001, epsilon = 1e-12);
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let (perfect, _) = soft_dice(&arr(&[1.0, 0.0]), &arr(&[1.0, 0.0]), 1e-5);
        assert_relative_eq!(perfect, -2.0 / 2.00001, epsilon = 1e-12);
        let (disjoint, _) = soft_dice(&arr(&[0.0, 1.0]), &arr(&[1.0, 0.0]), 1e-5);
        assert_eq!(disjoint, 0.0);
    }

    #[test]
    fn bce_matches_hand_computed_value() {
        // p = 0.9, t = 1: −ln 0.9 = 0.10536051565782628.
        let (l, g) = bce(&arr(&[0.9]), &arr(&[1.0]), 1e-7);
        assert_relative_eq!(l, 0.10536051565782628, epsilon = 1e-12);
        // grad = (p − t)/(p(1−p)) = −0.1/0.09
        assert_relative_eq!(g[[0]], -0.1 / 0.09, epsilon = 1e-12);
    }

    #[test]
    fn bce_two_voxel_mean() {
        // p = [0.9, 0.2], t = [1, 0]:
        //   (−ln 0.9 − ln 0.8)/2 = (0.1053605157 + 0.2231435513)/2
        let (l, _) = bce(&arr(&[0.9, 0.2]), &arr(&[1.0, 0.0]), 1e-7);
        assert_relative_eq!(l, 0.164252033486018, epsilon = 1e-12);
    }

    #[test]
    fn bce_clamp_blocks_infinities() {
        let (l, g) = bce(&arr(&[0.0, 1.0]), &arr(&[1.0, 0.0]), 1e-7);
        assert!(l.is_finite());
        // Clamped entries carry zero gradient.
        assert_eq!(g[[0]], 0.0);
        assert_eq!(g[[1]], 0.0);
        // −ln(1e-7) per voxel.
        assert_relative_eq!(l, -(1e-7f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn hybrid_is_sum_of_parts() {
        let p = arr(&[0.9, 0.2, 0.6]);
        let t = arr(&[1.0, 0.0, 1.0]);
        let cfg = LossConfig::default();
        let (h, hg) = hybrid(&p, &t, &cfg);
        let (d, dg) = soft_dice(&p, &t, 1e-5);
        let (b, bg) = bce(&p, &t, 1e-7);
        assert_relative_eq!(h, d + b, epsilon = 1e-14);
        for i in 0..3 {
            assert_relative_eq!(hg[[i]], dg[[i]] + bg[[i]], epsilon = 1e-14);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = arr(&[0.9, 0.2, 0.6, 0.45]);
        let t = arr(&[1.0, 0.0, 1.0, 0.0]);
        let cfg = LossConfig::default();
        let (_, g) = hybrid(&p, &t, &cfg);
        let h = 1e-6;
        for i in 0..4 {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp[[i]] += h;
            pm[[i]] -= h;
            let fd = (hybrid(&pp, &t, &cfg).0 - hybrid(&pm, &t, &cfg).0) / (2.0 * h);
            assert_relative_eq!(g[[i]], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn tape_ops_agree_with_pure_functions() {
        let p = arr(&[0.9, 0.2, 0.6, 0.45]);
        let t = arr(&[1.0, 0.0, 1.0, 0.0]);
        let cfg = LossConfig::default();
        let (h, hg) = hybrid(&p, &t, &cfg);

        let mut tape = Tape::<f64>::new();
        let pi = tape.leaf(p.clone());
        let dice = tape.dice_loss(pi, t.clone(), cfg.epsilon);
        let b = tape.bce_loss(pi, t.clone(), cfg.ce_clamp);
        let root = tape.sum_scalars(vec![dice, b]);
        tape.backward(root);
        assert_relative_eq!(tape.scalar_value(root), h, epsilon = 1e-14);
        let tg = tape.grad(pi).unwrap();
        for i in 0..4 {
            assert_relative_eq!(tg[[i]], hg[[i]], epsilon = 1e-14);
        }
    }

    #[test]
    fn total_weights_regions() {
        let p = arr(&[0.9, 0.2]);
        let t = arr(&[1.0, 0.0]);
        let cfg = LossConfig {
            region_weights: [1.0, 2.0, 0.0],
            ..LossConfig::default()
        };
        let (h, _) = hybrid(&p, &t, &cfg);
        let tot = total(&[&p, &p, &p], &[&t, &t, &t], &cfg);
        assert_relative_eq!(tot, 3.0 * h, epsilon = 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            ce_clamp: 0.7,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
