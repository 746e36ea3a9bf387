//! Alpha-balanced binary focal loss on a sigmoid probability.

use serde::{Deserialize, Serialize};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalLoss {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalLoss {
    fn default() -> Self {
        FocalLoss {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

impl FocalLoss {
    pub fn loss(&self, probability: f64, target: bool) -> f64 {
        focal_loss(probability, target, self.gamma, self.alpha)
    }

    /// Derivative with respect to the pre-sigmoid logit.
    pub fn grad_logit(&self, probability: f64, target: bool) -> f64 {
        focal_loss_grad(probability, target, self.gamma, self.alpha)
    }
}

fn alpha_t(target: bool, alpha: f64) -> f64 {
    if target {
        alpha
    } else {
        1.0 - alpha
    }
}

/// `-α_t (1-p_t)^γ ln p_t` with `p_t = p` for a positive target and `1-p` otherwise;
/// `α_t` is `α` for positives and `1-α` for negatives.
pub fn focal_loss(probability: f64, target: bool, gamma: f64, alpha: f64) -> f64 {
    let p = probability.clamp(EPS, 1.0 - EPS);
    let pt = if target { p } else { 1.0 - p };
    -alpha_t(target, alpha) * (1.0 - pt).powf(gamma) * pt.ln()
}

/// `d focal_loss / d logit` where `probability = sigmoid(logit)`.
///
/// With `p_t` as above, `d p_t / d logit = ±p_t (1-p_t)`, which gives
/// `±α_t (1-p_t)^γ (γ p_t ln p_t - (1-p_t))`.
pub fn focal_loss_grad(probability: f64, target: bool, gamma: f64, alpha: f64) -> f64 {
    let p = probability.clamp(EPS, 1.0 - EPS);
    let pt = if target { p } else { 1.0 - p };
    let g = alpha_t(target, alpha) * (1.0 - pt).powf(gamma) * (gamma * pt * pt.ln() - (1.0 - pt));
    if target {
        g
    } else {
        -g
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bce(p: f64, target: bool) -> f64 {
        if target {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        }
    }

    #[test]
    fn gamma_zero_alpha_one_is_bce_on_positives() {
        for p in [0.01, 0.3, 0.5, 0.9] {
            assert!((focal_loss(p, true, 0.0, 1.0) - bce(p, true)).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_zero_alpha_half_is_half_bce() {
        for p in [0.01, 0.3, 0.5, 0.9] {
            for t in [true, false] {
                assert!((focal_loss(p, t, 0.0, 0.5) - 0.5 * bce(p, t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn confident_correct_prediction_costs_nothing() {
        assert!(focal_loss(1.0 - EPS, true, 2.0, 0.25) < 1e-12);
        assert!(focal_loss(1.0, true, 2.0, 0.25) < 1e-12);
        assert!(focal_loss(0.0, false, 2.0, 0.25) < 1e-12);
    }

    #[test]
    fn hand_evaluated_value() {
        // 0.25 * 0.7^2 * -ln(0.3)
        let expected = 0.25 * 0.49 * 1.203_972_804_325_935_9;
        let got = focal_loss(0.3, true, 2.0, 0.25);
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.1475).abs() < 1e-4);
    }

    #[test]
    fn clamps_extremes() {
        assert!(focal_loss(0.0, true, 2.0, 0.25).is_finite());
        assert!(focal_loss(1.0, false, 2.0, 0.25).is_finite());
        assert!(focal_loss_grad(0.0, true, 2.0, 0.25).is_finite());
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let h = 1e-5;
        for &(gamma, alpha) in &[(0.0, 1.0), (2.0, 0.25), (1.5, 0.6)] {
            for &z in &[-3.0, -0.4, 0.0, 0.7, 2.5] {
                for t in [true, false] {
                    let f = |z: f64| focal_loss(sigmoid(z), t, gamma, alpha);
                    let fd = (f(z + h) - f(z - h)) / (2.0 * h);
                    let an = focal_loss_grad(sigmoid(z), t, gamma, alpha);
                    assert!((fd - an).abs() < 1e-7 * (1.0 + fd.abs()), "{gamma} {alpha} {z} {t}");
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn loss_is_non_negative(p in 0.0f64..=1.0, t: bool, gamma in 0.0f64..5.0, alpha in 0.0f64..=1.0) {
            proptest::prop_assert!(focal_loss(p, t, gamma, alpha) >= 0.0);
        }
    }
}
