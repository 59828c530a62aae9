//! Token-level contrastive perception loss and its combination with GRPO.
//!
//! For a selected token, the distribution under the clean image is the anchor,
//! the one under an information-preserving perturbation is the positive, and
//! the one under an information-removing perturbation is the negative:
//!
//! ```text
//! sim(p, p*) = −KL(p ‖ p*)
//! L_t       = −log( e^{s⁺/τ} / (e^{s⁺/τ} + e^{s⁻/τ}) ) = softplus((s⁻ − s⁺)/τ)
//! L(o_i)    = 1/|o_i| Σ_t M_t L_t
//! J         = J_GRPO − λ · 1/G Σ_i 1{A_i > 0} L(o_i)
//! ```
//!
//! Gradients flow through all three branches.

use crate::env::{Episode, SyntheticImage};
use crate::error::{Error, Result};
use crate::objective::{kl_divergence, kl_with_logit_grads, AdvantageGroup, ObjectiveValue};
use crate::perception::PerceptionMask;
use crate::policy::{accumulate_outer, GridPolicy, PolicyParams, TokenDistribution};

/// Divisor of the per-trajectory average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CplNorm {
    /// Divide by the rollout length.
    Tokens,
    /// Divide by the number of selected tokens.
    Selected,
}

/// Which tokens receive the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CplSelection {
    /// Top-k positive entropy shift.
    TopK,
    /// Every token (ablation arm).
    AllTokens,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CplConfig {
    pub tau: f64,
    pub lambda: f64,
    pub k_ratio: f64,
    pub norm: CplNorm,
    pub selection: CplSelection,
}

impl Default for CplConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 0.02,
            k_ratio: 0.5,
            norm: CplNorm::Tokens,
            selection: CplSelection::TopK,
        }
    }
}

impl CplConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::key("cpl.tau", format!("{} must be > 0", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::key("cpl.lambda", format!("{} must be ≥ 0", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.k_ratio) {
            return Err(Error::key("cpl.k_ratio", format!("{} outside [0, 1]", self.k_ratio)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveTriple {
    pub anchor: TokenDistribution,
    pub positive: TokenDistribution,
    pub negative: TokenDistribution,
    pub token_index: usize,
}

/// `−KL(p ‖ p*)`.
pub fn distribution_similarity(p: &TokenDistribution, p_star: &TokenDistribution) -> f64 {
    -kl_divergence(p.probs(), p_star.probs())
}

/// Two-way InfoNCE with one positive and one negative.
pub fn infonce_loss(sim_pos: f64, sim_neg: f64, tau: f64) -> f64 {
    let a = sim_pos / tau;
    let b = sim_neg / tau;
    if a >= b {
        (b - a).exp().ln_1p()
    } else {
        (b - a) + (a - b).exp().ln_1p()
    }
}

/// `(∂L/∂s⁺, ∂L/∂s⁻)` of [`infonce_loss`].
pub fn infonce_grads(sim_pos: f64, sim_neg: f64, tau: f64) -> (f64, f64) {
    let x = (sim_neg - sim_pos) / tau;
    let sigma = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    (-sigma / tau, sigma / tau)
}

pub fn token_cpl(triple: &ContrastiveTriple, mask_bit: bool, tau: f64) -> f64 {
    if !mask_bit {
        return 0.0;
    }
    let pos = distribution_similarity(&triple.anchor, &triple.positive);
    let neg = distribution_similarity(&triple.anchor, &triple.negative);
    infonce_loss(pos, neg, tau)
}

fn divisor(mask: &PerceptionMask, norm: CplNorm) -> f64 {
    match norm {
        CplNorm::Tokens => mask.len() as f64,
        CplNorm::Selected => mask.count() as f64,
    }
}

pub fn trajectory_cpl(triples: &[ContrastiveTriple], mask: &PerceptionMask, tau: f64, norm: CplNorm) -> Result<f64> {
    if triples.len() != mask.len() {
        return Err(Error::LengthMismatch {
            what: "triples vs mask",
            left: triples.len(),
            right: mask.len(),
        });
    }
    if mask.count() == 0 {
        return Ok(0.0);
    }
    let total: f64 = triples
        .iter()
        .zip(&mask.mask)
        .map(|(tr, &bit)| token_cpl(tr, bit, tau))
        .sum();
    Ok(total / divisor(mask, norm))
}

/// Per-rollout views consumed by the contrastive loss.
#[derive(Debug, Clone)]
pub struct PerturbedViews {
    pub removed: SyntheticImage,
    pub preserved: SyntheticImage,
}

/// Value and gradient of `L(o_i)` at `params`.
#[allow(clippy::too_many_arguments)]
pub fn trajectory_cpl_objective(
    policy: &GridPolicy,
    params: &PolicyParams,
    episode: &Episode,
    tokens: &[usize],
    views: &PerturbedViews,
    mask: &PerceptionMask,
    tau: f64,
    norm: CplNorm,
) -> Result<ObjectiveValue> {
    if tokens.len() != mask.len() {
        return Err(Error::LengthMismatch {
            what: "tokens vs mask",
            left: tokens.len(),
            right: mask.len(),
        });
    }
    if mask.count() == 0 {
        return Ok(ObjectiveValue::zero());
    }
    let v = params.vocab_size();
    let scale = 1.0 / divisor(mask, norm);
    let mut grad = vec![0.0; params.weights().len()];
    let mut value = 0.0;
    let mut dz_anchor = vec![0.0; v];
    let mut dz_pos = vec![0.0; v];
    let mut dz_neg = vec![0.0; v];
    for &t in &mask.selected {
        let prefix = &tokens[..t];
        let f_anchor = policy.sparse_features(&episode.query, &episode.image, prefix);
        let f_pos = policy.sparse_features(&episode.query, &views.preserved, prefix);
        let f_neg = policy.sparse_features(&episode.query, &views.removed, prefix);
        let p = params.distribution(&f_anchor)?;
        let p_pos = params.distribution(&f_pos)?;
        let p_neg = params.distribution(&f_neg)?;
        let (kl_pos, kl_pos_dp, kl_pos_dq) = kl_with_logit_grads(p.probs(), p_pos.probs());
        let (kl_neg, kl_neg_dp, kl_neg_dq) = kl_with_logit_grads(p.probs(), p_neg.probs());
        let (sim_pos, sim_neg) = (-kl_pos, -kl_neg);
        value += infonce_loss(sim_pos, sim_neg, tau);
        let (w_pos, w_neg) = infonce_grads(sim_pos, sim_neg, tau);
        // s = −KL, so ∂s/∂z = −∂KL/∂z.
        for k in 0..v {
            dz_anchor[k] = -w_pos * kl_pos_dp[k] - w_neg * kl_neg_dp[k];
            dz_pos[k] = -w_pos * kl_pos_dq[k];
            dz_neg[k] = -w_neg * kl_neg_dq[k];
        }
        accumulate_outer(&mut grad, v, &f_anchor, &dz_anchor, scale);
        accumulate_outer(&mut grad, v, &f_pos, &dz_pos, scale);
        accumulate_outer(&mut grad, v, &f_neg, &dz_neg, scale);
    }
    if !value.is_finite() {
        return Err(Error::Numerical("non-finite contrastive loss".into()));
    }
    Ok(ObjectiveValue { value: value * scale, grad })
}

/// Batch diagnostics from [`combined_objective`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CplStats {
    /// `1/#groups Σ_g 1/G Σ_i 1{A_i > 0} L(o_i)` before the λ factor.
    pub gated_cpl: f64,
    pub gated_fraction: f64,
}

/// `J = J_GRPO − λ · mean_groups(1/G Σ_i 1{A_i > 0} L(o_i))`.
///
/// `cpl[g][i]` is the loss of rollout `i` in group `g`; its gradient may be
/// empty for rollouts the gate excludes.
pub fn combined_objective(
    grpo: &ObjectiveValue,
    cpl: &[Vec<ObjectiveValue>],
    advantages: &[AdvantageGroup],
    lambda: f64,
) -> Result<(ObjectiveValue, CplStats)> {
    if cpl.len() != advantages.len() {
        return Err(Error::LengthMismatch {
            what: "cpl groups vs advantage groups",
            left: cpl.len(),
            right: advantages.len(),
        });
    }
    let n_groups = advantages.len().max(1) as f64;
    let mut penalty = ObjectiveValue::zero();
    let mut gated = 0usize;
    let mut total = 0usize;
    for (terms, adv) in cpl.iter().zip(advantages) {
        if terms.len() != adv.advantages.len() {
            return Err(Error::LengthMismatch {
                what: "cpl terms vs advantages",
                left: terms.len(),
                right: adv.advantages.len(),
            });
        }
        let g = terms.len() as f64;
        for (term, &a) in terms.iter().zip(&adv.advantages) {
            total += 1;
            if a > 0.0 {
                gated += 1;
                penalty.add_scaled(term, 1.0 / (n_groups * g));
            }
        }
    }
    let stats = CplStats {
        gated_cpl: penalty.value,
        gated_fraction: gated as f64 / total.max(1) as f64,
    };
    let mut out = grpo.clone();
    if lambda != 0.0 {
        out.add_scaled(&penalty, -lambda);
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn d(p: &[f64]) -> TokenDistribution {
        TokenDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let q = d(&[0.5, 0.5]);
        assert_eq!(distribution_similarity(&q, &q), 0.0);
        assert!((distribution_similarity(&d(&[1.0, 0.0]), &q) + LN_2).abs() < 1e-15);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn infonce_examples() {
        for tau in [0.1, 1.0, 10.0] {
            assert!((infonce_loss(-0.3, -0.3, tau) - LN_2).abs() < 1e-12);
        }
        assert!((infonce_loss(0.0, -LN_2, 1.0) - 1.5f64.ln()).abs() < 1e-12);
        let expected = (-6.9315f64).exp().ln_1p();
        assert!((infonce_loss(0.0, -0.69315, 0.1) - expected).abs() < 1e-15);
        assert!((infonce_loss(0.0, -0.69315, 0.1) - 9.766e-4).abs() < 1e-6);
        assert!((infonce_loss(0.0, -5.0, 0.1) - 1.9287e-22).abs() < 1e-25);
    }

    #[test]
    fn token_and_trajectory_examples() {
        let a = d(&[0.7, 0.2, 0.1]);
        let far = d(&[0.001, 0.001, 0.998]);
        let triple = ContrastiveTriple { anchor: a.clone(), positive: a.clone(), negative: far, token_index: 0 };
        assert_eq!(token_cpl(&triple, false, 0.1), 0.0);
        let same = ContrastiveTriple { anchor: a.clone(), positive: a.clone(), negative: a.clone(), token_index: 0 };
        assert!((token_cpl(&same, true, 0.1) - LN_2).abs() < 1e-15);

        let triples = vec![same.clone(), same.clone(), same.clone(), same.clone()];
        let mut mask = PerceptionMask::empty(4);
        assert_eq!(trajectory_cpl(&triples, &mask, 0.1, CplNorm::Tokens).unwrap(), 0.0);
        mask.selected = vec![2];
        mask.mask[2] = true;
        assert!((trajectory_cpl(&triples, &mask, 0.1, CplNorm::Tokens).unwrap() - LN_2 / 4.0).abs() < 1e-15);
        assert!((trajectory_cpl(&triples, &mask, 0.1, CplNorm::Selected).unwrap() - LN_2).abs() < 1e-15);
        let all = PerceptionMask::all(4);
        assert!((trajectory_cpl(&triples, &all, 0.1, CplNorm::Tokens).unwrap() - LN_2).abs() < 1e-15);
        assert!(trajectory_cpl(&triples[..3], &all, 0.1, CplNorm::Tokens).is_err());
    }

    #[test]
    fn combined_examples() {
        let grpo = ObjectiveValue { value: 0.3, grad: vec![1.0, -2.0] };
        let adv = vec![crate::objective::relative_advantages(&[1.0, 0.0]).unwrap()];
        let c1 = ObjectiveValue { value: 0.5, grad: vec![0.25, 0.5] };
        let c2 = ObjectiveValue { value: 0.9, grad: vec![3.0, 3.0] };
        let cpl = vec![vec![c1, c2]];
        let (j, stats) = combined_objective(&grpo, &cpl, &adv, 0.02).unwrap();
        assert!((j.value - (0.3 - 0.02 * 0.5 * 0.5)).abs() < 1e-15);
        assert_eq!(j.grad, vec![1.0 - 0.01 * 0.25, -2.0 - 0.01 * 0.5]);
        assert_eq!(stats.gated_fraction, 0.5);
        let (j0, _) = combined_objective(&grpo, &cpl, &adv, 0.0).unwrap();
        assert_eq!(j0, grpo);
        let flat = vec![crate::objective::relative_advantages(&[1.0, 1.0]).unwrap()];
        let (j, stats) = combined_objective(&grpo, &cpl, &flat, 0.02).unwrap();
        assert_eq!(j, grpo);
        assert_eq!(stats.gated_cpl, 0.0);
    }

    #[test]
    fn tau_must_be_positive() {
        let cfg = CplConfig { tau: -1.0, ..CplConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
