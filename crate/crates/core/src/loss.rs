//! Closed-form reference calculators for the training objectives.
//!
//! These operate on caller-supplied log-probabilities and exist to verify
//! external trainers and to unit-test the math; no gradients, no batching
//! semantics. Log-sigmoid terms use the stable branch form, so values stay
//! finite for margins far beyond anything a λ-scaled log-ratio produces.
//!
//! Naming note: the pairwise preference loss calls its regularization
//! strength λ; trainers using the conventional β for the same scalar must
//! map λ ↔ β themselves.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("non-finite input: {context}")]
    NonFiniteInput { context: &'static str },
    #[error("log-probability must be <= 0, got {value}")]
    PositiveLogProb { value: f64 },
    #[error("{name} must be positive, got {value}")]
    NonPositiveParameter { name: &'static str, value: f64 },
    #[error("empty input: no items to average")]
    EmptyInput,
}

/// Log-probabilities of one completion under the policy being trained and
/// the frozen reference policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyLogProbs {
    pub logp_policy: f64,
    pub logp_reference: f64,
}

impl PolicyLogProbs {
    pub fn new(logp_policy: f64, logp_reference: f64) -> Result<Self, LossError> {
        for value in [logp_policy, logp_reference] {
            if !value.is_finite() {
                return Err(LossError::NonFiniteInput { context: "log-probability" });
            }
            if value > 0.0 {
                return Err(LossError::PositiveLogProb { value });
            }
        }
        Ok(Self { logp_policy, logp_reference })
    }

    /// Implicit reward: log of the policy/reference probability ratio.
    pub fn reward(self) -> f64 {
        self.logp_policy - self.logp_reference
    }
}

/// Hyperparameters of the binary-feedback (KTO-style) objective.
///
/// `z_ref` is supplied by the caller: estimating the usual KL reference
/// point requires model access, which this crate deliberately does not
/// have.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KtoConfig {
    pub beta: f64,
    pub w_desirable: f64,
    pub w_undesirable: f64,
    pub z_ref: f64,
}

impl KtoConfig {
    pub fn new(beta: f64, w_desirable: f64, w_undesirable: f64, z_ref: f64) -> Result<Self, LossError> {
        if !(beta.is_finite() && w_desirable.is_finite() && w_undesirable.is_finite() && z_ref.is_finite()) {
            return Err(LossError::NonFiniteInput { context: "kto config" });
        }
        if beta <= 0.0 {
            return Err(LossError::NonPositiveParameter { name: "beta", value: beta });
        }
        if w_desirable < 0.0 {
            return Err(LossError::NonPositiveParameter { name: "w_desirable", value: w_desirable });
        }
        if w_undesirable < 0.0 {
            return Err(LossError::NonPositiveParameter { name: "w_undesirable", value: w_undesirable });
        }
        Ok(Self { beta, w_desirable, w_undesirable, z_ref })
    }
}

/// Numerically stable `-log(sigmoid(x)) = log(1 + e^{-x})` (softplus of -x).
fn neg_log_sigmoid(x: f64) -> f64 {
    // softplus(z) = max(z, 0) + ln(1 + e^{-|z|}) with z = -x.
    let z = -x;
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Negative log-likelihood of a target sequence from its per-token
/// log-probabilities.
pub fn sft_loss(target_token_logprobs: &[f64]) -> Result<f64, LossError> {
    let mut total = 0.0;
    for &lp in target_token_logprobs {
        if !lp.is_finite() {
            return Err(LossError::NonFiniteInput { context: "token log-probability" });
        }
        if lp > 0.0 {
            return Err(LossError::PositiveLogProb { value: lp });
        }
        total += lp;
    }
    Ok(-total)
}

/// Pairwise preference loss: `-log σ(λ [margin_policy - margin_reference])`
/// where each margin is the chosen-minus-rejected log-probability gap.
/// Strictly decreasing in the policy margin; equals ln 2 when the policy
/// matches the reference.
pub fn dpo_loss(pos: PolicyLogProbs, neg: PolicyLogProbs, lambda: f64) -> Result<f64, LossError> {
    if !lambda.is_finite() {
        return Err(LossError::NonFiniteInput { context: "lambda" });
    }
    if lambda <= 0.0 {
        return Err(LossError::NonPositiveParameter { name: "lambda", value: lambda });
    }
    let policy_margin = pos.logp_policy - neg.logp_policy;
    let reference_margin = pos.logp_reference - neg.logp_reference;
    Ok(neg_log_sigmoid(lambda * (policy_margin - reference_margin)))
}

/// Asymmetric value of one completion: `β(r - z_ref)` when desirable,
/// `β(z_ref - r)` when undesirable. Flipping the flag negates the value
/// exactly.
pub fn kto_value(lp: PolicyLogProbs, config: &KtoConfig, desirable: bool) -> f64 {
    let gap = lp.reward() - config.z_ref;
    if desirable {
        config.beta * gap
    } else {
        -(config.beta * gap)
    }
}

/// Mean over items of `w_E (1 - σ(v))`, the binary-feedback objective.
pub fn kto_loss(items: &[(PolicyLogProbs, bool)], config: &KtoConfig) -> Result<f64, LossError> {
    if items.is_empty() {
        return Err(LossError::EmptyInput);
    }
    let mut total = 0.0;
    for &(lp, desirable) in items {
        let weight = if desirable { config.w_desirable } else { config.w_undesirable };
        let value = kto_value(lp, config, desirable);
        total += weight * (1.0 - sigmoid(value));
    }
    Ok(total / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn lp(policy: f64, reference: f64) -> PolicyLogProbs {
        PolicyLogProbs::new(policy, reference).unwrap()
    }

    #[test]
    fn sft_loss_examples() {
        assert_eq!(sft_loss(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(sft_loss(&[-0.5, -1.5]).unwrap(), 2.0);
        let half = 0.5f64.ln();
        assert!((sft_loss(&[half]).unwrap() - LN_2).abs() < 1e-12);
        assert!(sft_loss(&[f64::NAN]).is_err());
        assert!(sft_loss(&[0.1]).is_err());
    }

    #[test]
    fn dpo_loss_at_reference_is_ln2() {
        let pos = lp(-1.0, -1.0);
        let neg = lp(-2.0, -2.0);
        let loss = dpo_loss(pos, neg, 0.5).unwrap();
        assert!((loss - LN_2).abs() < 1e-12);
    }

    #[test]
    fn dpo_loss_direct_evaluation() {
        // λ=0.5, policy margin 2, reference margin 0: -log σ(1.0).
        let pos = lp(-1.0, -2.0);
        let neg = lp(-3.0, -2.0);
        let loss = dpo_loss(pos, neg, 0.5).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn dpo_loss_vanishes_as_margin_grows() {
        let mut previous = f64::INFINITY;
        for margin in [1.0, 10.0, 100.0] {
            let pos = lp(-1.0, -1.0);
            let neg = lp(-1.0 - margin, -1.0);
            let loss = dpo_loss(pos, neg, 1.0).unwrap();
            assert!(loss < previous, "loss must fall as the margin grows");
            assert!(loss > 0.0);
            previous = loss;
        }
        assert!(previous < 1e-40);
    }

    #[test]
    fn dpo_loss_stable_for_huge_margins() {
        // Margins of ±700 at λ=1: naive -ln σ would overflow e^700.
        let pos = lp(-1.0, -1.0);
        let far_below = lp(-701.0, -1.0);
        let at_plus_700 = dpo_loss(pos, far_below, 1.0).unwrap();
        let at_minus_700 = dpo_loss(far_below, pos, 1.0).unwrap();
        assert!(at_plus_700.is_finite() && at_plus_700 >= 0.0);
        assert!(at_minus_700.is_finite());
        assert!((at_minus_700 - 700.0).abs() < 1e-9, "softplus(700) ≈ 700");
    }

    #[test]
    fn dpo_gradient_signs_by_finite_differences() {
        // Central differences: loss falls in the chosen log-prob and rises
        // in the rejected one.
        let h = 1e-6;
        let base_pos = -1.3;
        let base_neg = -2.7;
        let reference = lp(-2.0, -2.0);
        let eval = |p: f64, n: f64| {
            dpo_loss(
                PolicyLogProbs { logp_policy: p, logp_reference: reference.logp_reference },
                PolicyLogProbs { logp_policy: n, logp_reference: reference.logp_reference },
                0.5,
            )
            .unwrap()
        };
        let d_pos = (eval(base_pos + h, base_neg) - eval(base_pos - h, base_neg)) / (2.0 * h);
        let d_neg = (eval(base_pos, base_neg + h) - eval(base_pos, base_neg - h)) / (2.0 * h);
        assert!(d_pos < 0.0, "∂loss/∂logp+ should be negative, got {d_pos}");
        assert!(d_neg > 0.0, "∂loss/∂logp- should be positive, got {d_neg}");
        // Antisymmetry of the two partials (same sigmoid factor).
        assert!(((d_pos + d_neg) / d_neg.abs()).abs() < 1e-4);
    }

    #[test]
    fn kto_value_examples() {
        let config = KtoConfig::new(0.5, 1.0, 1.0, 1.0).unwrap();
        // r = z_ref: value 0 either way.
        let at_ref = lp(-1.0, -2.0); // reward = 1 = z_ref
        assert_eq!(kto_value(at_ref, &config, true), 0.0);
        assert_eq!(kto_value(at_ref, &config, false), 0.0);

        // β=0.5, r=2, z_ref=1.
        let above = lp(-1.0, -3.0); // reward = 2
        assert_eq!(kto_value(above, &config, true), 0.5);
        assert_eq!(kto_value(above, &config, false), -0.5);
    }

    #[test]
    fn kto_value_antisymmetry_exact() {
        let config = KtoConfig::new(0.37, 1.0, 1.3, -0.25).unwrap();
        for (p, r) in [(-0.5, -3.0), (-7.25, -0.125), (0.0, 0.0), (-650.0, -1.0)] {
            let probs = lp(p, r);
            let v_pos = kto_value(probs, &config, true);
            let v_neg = kto_value(probs, &config, false);
            assert_eq!(v_pos, -v_neg, "antisymmetry must hold bit-exactly");
        }
    }

    #[test]
    fn kto_loss_at_reference_point_is_half_mean_weight() {
        let config = KtoConfig::new(0.5, 1.0, 1.0, 1.0).unwrap();
        let at_ref = lp(-1.0, -2.0);
        let items = vec![(at_ref, true), (at_ref, false), (at_ref, true)];
        let loss = kto_loss(&items, &config).unwrap();
        assert!((loss - 0.5).abs() < 1e-12, "σ(0) = 0.5 everywhere");
    }

    #[test]
    fn kto_loss_hand_example() {
        // Item 1: v = 0 → contribution 0.5; item 2: σ(v) = 0.8 → 0.2.
        let config = KtoConfig::new(1.0, 1.0, 1.0, 0.0).unwrap();
        let at_ref = lp(-2.0, -2.0);
        let v = (0.8f64 / 0.2).ln(); // σ(ln 4) = 0.8
        let above = lp(-2.0 + v, -2.0);
        let items = vec![(at_ref, true), (above, true)];
        let loss = kto_loss(&items, &config).unwrap();
        assert!((loss - 0.35).abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn kto_loss_saturates_to_zero() {
        let config = KtoConfig::new(1.0, 1.0, 1.0, 0.0).unwrap();
        let way_above = lp(0.0, -500.0);
        let loss = kto_loss(&[(way_above, true)], &config).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn kto_loss_bounded_by_max_weight() {
        let config = KtoConfig::new(2.0, 1.5, 0.75, 0.0).unwrap();
        let items: Vec<(PolicyLogProbs, bool)> = [-5.0, -1.0, 0.0]
            .iter()
            .flat_map(|&p| [(lp(p, -2.0), true), (lp(p, -2.0), false)])
            .collect();
        let loss = kto_loss(&items, &config).unwrap();
        assert!((0.0..=1.5).contains(&loss));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let config = KtoConfig::new(0.5, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(kto_loss(&[], &config).unwrap_err(), LossError::EmptyInput);
        assert_eq!(sft_loss(&[]).unwrap(), 0.0, "empty SFT sum is zero, not an error");
    }

    #[test]
    fn constructors_validate() {
        assert!(PolicyLogProbs::new(0.5, -1.0).is_err());
        assert!(PolicyLogProbs::new(f64::INFINITY, -1.0).is_err());
        assert!(KtoConfig::new(0.0, 1.0, 1.0, 0.0).is_err());
        assert!(KtoConfig::new(0.5, -1.0, 1.0, 0.0).is_err());
    }
}
