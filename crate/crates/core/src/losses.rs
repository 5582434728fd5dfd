//! Training losses and the Dice evaluation metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::SegmentationMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weighted binary cross-entropy + soft Dice loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub dice_smooth: f64,
    /// Probabilities are clamped to `[clamp, 1 - clamp]` inside the log.
    pub prob_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { ce_weight: 1.0, dice_weight: 1.0, dice_smooth: 1.0, prob_clamp: 1e-7 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub ce_part: f64,
    pub dice_part: f64,
}

/// `2|P∩G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice_score(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch {
            expected: vec![gt.height(), gt.width()],
            found: vec![pred.height(), pred.width()],
        });
    }
    let denom = pred.count() + gt.count();
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * pred.intersection_count(gt) as f64 / denom as f64)
}

/// `1 - (2 Σ p g + s) / (Σ p + Σ g + s)`.
pub fn dice_loss<T: Scalar>(probs: &[T], gt: &[T], smooth: T) -> T {
    let (inter, sp, sg) = dice_sums(probs, gt);
    T::one() - (T::of(2.0) * inter + smooth) / (sp + sg + smooth)
}

pub fn dice_loss_grad<T: Scalar>(probs: &[T], gt: &[T], smooth: T) -> Vec<T> {
    let (inter, sp, sg) = dice_sums(probs, gt);
    let num = T::of(2.0) * inter + smooth;
    let den = sp + sg + smooth;
    gt.iter().map(|&g| -(T::of(2.0) * g * den - num) / (den * den)).collect()
}

fn dice_sums<T: Scalar>(probs: &[T], gt: &[T]) -> (T, T, T) {
    assert_eq!(probs.len(), gt.len(), "dice: length mismatch");
    let mut inter = T::zero();
    let mut sp = T::zero();
    let mut sg = T::zero();
    for (&p, &g) in probs.iter().zip(gt) {
        inter += p * g;
        sp += p;
        sg += g;
    }
    (inter, sp, sg)
}

/// Pixel-mean binary cross-entropy.
pub fn bce_loss<T: Scalar>(probs: &[T], gt: &[T], clamp: T) -> T {
    assert_eq!(probs.len(), gt.len(), "bce: length mismatch");
    let n = T::of(probs.len() as f64);
    probs
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let p = p.max(clamp).min(T::one() - clamp);
            -(g * p.ln() + (T::one() - g) * (T::one() - p).ln())
        })
        .sum::<T>()
        / n
}

pub fn bce_loss_grad<T: Scalar>(probs: &[T], gt: &[T], clamp: T) -> Vec<T> {
    let n = T::of(probs.len() as f64);
    probs
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            if p < clamp || p > T::one() - clamp {
                T::zero()
            } else {
                -(g / p - (T::one() - g) / (T::one() - p)) / n
            }
        })
        .collect()
}

pub fn combined_loss<T: Scalar>(probs: &[T], gt: &[T], cfg: &LossConfig) -> LossValue {
    let ce = bce_loss(probs, gt, T::of(cfg.prob_clamp)).f64();
    let dice = dice_loss(probs, gt, T::of(cfg.dice_smooth)).f64();
    LossValue { total: cfg.ce_weight * ce + cfg.dice_weight * dice, ce_part: ce, dice_part: dice }
}

/// Batch loss over `(B, 1, H, W)` probabilities: cross-entropy averaged over
/// every pixel, Dice averaged over batch items. Returns the loss and its
/// gradient w.r.t. the probabilities.
pub(crate) fn batch_combined_loss_with_grad<T: Scalar>(
    probs: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> (LossValue, Tensor<T>) {
    assert_eq!(probs.shape(), target.shape(), "loss: prediction/target shape mismatch");
    let b = probs.shape()[0];
    let clamp = T::of(cfg.prob_clamp);
    let smooth = T::of(cfg.dice_smooth);
    let ce = bce_loss(probs.data(), target.data(), clamp);
    let ce_grad = bce_loss_grad(probs.data(), target.data(), clamp);
    let per = probs.numel() / b;
    let bt = T::of(b as f64);
    let mut dice = T::zero();
    let mut grad = Vec::with_capacity(probs.numel());
    for i in 0..b {
        let (p, g) = (&probs.data()[i * per..(i + 1) * per], &target.data()[i * per..(i + 1) * per]);
        dice += dice_loss(p, g, smooth) / bt;
        let dg = dice_loss_grad(p, g, smooth);
        let cg = &ce_grad[i * per..(i + 1) * per];
        grad.extend(
            dg.iter().zip(cg).map(|(&d, &c)| T::of(cfg.dice_weight) * d / bt + T::of(cfg.ce_weight) * c),
        );
    }
    let value = LossValue {
        total: cfg.ce_weight * ce.f64() + cfg.dice_weight * dice.f64(),
        ce_part: ce.f64(),
        dice_part: dice.f64(),
    };
    (value, Tensor::from_vec(probs.shape(), grad).expect("loss grad shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, cells: &[(usize, usize)]) -> SegmentationMask {
        SegmentationMask::from_fn(h, w, |r, c| cells.contains(&(r, c)))
    }

    #[test]
    fn dice_analytic_cases() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        let b = mask(4, 4, &[(3, 3)]);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.0);
        let c = mask(4, 4, &[(0, 0), (0, 1), (2, 2), (2, 3)]);
        assert_eq!(dice_score(&a, &c).unwrap(), 0.5);
    }

    #[test]
    fn dice_empty_conventions() {
        let e = SegmentationMask::empty(3, 3);
        assert_eq!(dice_score(&e, &e).unwrap(), 1.0);
        assert_eq!(dice_score(&e, &mask(3, 3, &[(1, 1)])).unwrap(), 0.0);
    }

    #[test]
    fn dice_shape_mismatch_is_an_error() {
        assert!(matches!(
            dice_score(&SegmentationMask::empty(2, 2), &SegmentationMask::empty(2, 3)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dice_loss_limits() {
        let gt = [1.0f64, 0.0, 1.0, 1.0, 0.0, 0.0];
        assert!(dice_loss(&gt, &gt, 1e-9) < 1e-9);
        let inv: Vec<f64> = gt.iter().map(|g| 1.0 - g).collect();
        assert!((dice_loss(&inv, &gt, 1e-9) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bce_at_one_half_is_ln2() {
        let p = [0.5f64; 9];
        let g = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        assert!((bce_loss(&p, &g, 1e-7) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn weight_projections() {
        let p = [0.2f64, 0.7, 0.9, 0.4];
        let g = [0.0, 1.0, 1.0, 0.0];
        let v = combined_loss(&p, &g, &LossConfig { ce_weight: 1.0, dice_weight: 0.0, ..Default::default() });
        assert_eq!(v.total, v.ce_part);
        let v = combined_loss(&p, &g, &LossConfig { ce_weight: 0.0, dice_weight: 1.0, ..Default::default() });
        assert_eq!(v.total, v.dice_part);
    }

    #[test]
    fn perfect_prediction_beats_background() {
        let gt = [0.0f64, 1.0, 1.0, 0.0, 1.0, 0.0];
        let perfect: Vec<f64> = gt.iter().map(|&g| if g > 0.5 { 0.999 } else { 0.001 }).collect();
        let background = [0.001f64; 6];
        let cfg = LossConfig::default();
        assert!(combined_loss(&perfect, &gt, &cfg).total < combined_loss(&background, &gt, &cfg).total);
    }

    #[test]
    fn dice_loss_gradient_matches_central_differences() {
        let probs: Vec<f64> = (0..16).map(|i| 0.05 + 0.9 * ((i * 7 % 16) as f64 / 15.0)).collect();
        let gt: Vec<f64> = (0..16).map(|i| if (i / 4 + i % 4) % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let analytic = dice_loss_grad(&probs, &gt, 1.0);
        let h = 1e-6;
        for i in 0..16 {
            let mut up = probs.clone();
            up[i] += h;
            let mut dn = probs.clone();
            dn[i] -= h;
            let fd = (dice_loss(&up, &gt, 1.0) - dice_loss(&dn, &gt, 1.0)) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-12);
            assert!(rel < 1e-5, "pixel {i}: fd {fd} vs analytic {}", analytic[i]);
        }
    }

    fn arb_mask_pair() -> impl Strategy<Value = (SegmentationMask, SegmentationMask)> {
        (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
            (prop::collection::vec(any::<bool>(), h * w), prop::collection::vec(any::<bool>(), h * w)).prop_map(
                move |(a, b)| (SegmentationMask::from_vec(h, w, a).unwrap(), SegmentationMask::from_vec(h, w, b).unwrap()),
            )
        })
    }

    proptest! {
        #[test]
        fn dice_is_symmetric_and_bounded((a, b) in arb_mask_pair()) {
            let ab = dice_score(&a, &b).unwrap();
            prop_assert_eq!(ab, dice_score(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn combined_loss_is_nonnegative_and_linear(
            probs in prop::collection::vec(0.001f64..0.999, 12),
            bits in prop::collection::vec(any::<bool>(), 12),
            wc in 0.0f64..3.0,
            wd in 0.0f64..3.0,
        ) {
            let gt: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let v = combined_loss(&probs, &gt, &LossConfig { ce_weight: wc, dice_weight: wd, ..Default::default() });
            prop_assert!(v.total >= 0.0 && v.ce_part >= 0.0);
            prop_assert!((0.0..=1.0).contains(&v.dice_part));
            prop_assert!((v.total - (wc * v.ce_part + wd * v.dice_part)).abs() < 1e-12);
        }
    }
}
