//! Group-relative advantages and the clipped surrogate with a KL penalty to the
//! reference policy.
//!
//! ```text
//! A_i = (R_i − mean R) / std R                           (population std)
//! J_GRPO = 1/G Σ_i 1/|o_i| Σ_t [ min(r_it A_i, clip(r_it, 1−ε, 1+ε) A_i) − β KL(π_θ ‖ π_ref) ]
//! ```
//!
//! Batches of several groups average `J_GRPO` over groups.

use crate::env::Episode;
use crate::error::{Error, Result};
use crate::policy::{accumulate_outer, GridPolicy, PolicyParams, Role, Rollout, Snapshot, TokenDistribution};

/// Floor applied to the second argument of every KL before taking its log.
pub const KL_FLOOR: f64 = 1e-12;

/// Groups whose reward std falls below this get all-zero advantages.
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageGroup {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub group_mean: f64,
    pub group_std: f64,
}

impl AdvantageGroup {
    pub fn is_degenerate(&self) -> bool {
        self.group_std < DEGENERATE_STD
    }
}

pub fn relative_advantages(rewards: &[f64]) -> Result<AdvantageGroup> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::InvalidInput(format!("group size {g} < 2")));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Numerical("non-finite reward".into()));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    let advantages = if std < DEGENERATE_STD {
        vec![0.0; g]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    Ok(AdvantageGroup {
        rewards: rewards.to_vec(),
        advantages,
        group_mean: mean,
        group_std: std,
    })
}

pub fn clip(ratio: f64, epsilon: f64) -> f64 {
    ratio.clamp(1.0 - epsilon, 1.0 + epsilon)
}

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(clip(ratio, epsilon) * advantage)
}

/// `∂/∂r` of [`clipped_surrogate`] on the active branch; ties go to the unclipped branch.
pub fn clipped_surrogate_slope(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    if ratio * advantage <= clip(ratio, epsilon) * advantage {
        advantage
    } else {
        0.0
    }
}

/// `KL(p ‖ q)` over raw probability vectors, `q` floored at [`KL_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv.ln() - qv.max(KL_FLOOR).ln()))
        .sum()
}

pub fn kl_penalty(p_current: &TokenDistribution, p_reference: &TokenDistribution) -> f64 {
    kl_divergence(p_current.probs(), p_reference.probs())
}

/// `KL(p ‖ q)` with its gradients with respect to the logits of `p` and of `q`.
pub fn kl_with_logit_grads(p: &[f64], q: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let kl = kl_divergence(p, q);
    let d_p: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&pv, &qv)| if pv > 0.0 { pv * (pv.ln() - qv.max(KL_FLOOR).ln() - kl) } else { 0.0 })
        .collect();
    // Only unfloored entries of q carry gradient.
    let live: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&pv, &qv)| if qv >= KL_FLOOR { pv } else { 0.0 })
        .collect();
    let live_total: f64 = live.iter().sum();
    let d_q: Vec<f64> = live.iter().zip(q).map(|(&m, &qv)| qv * live_total - m).collect();
    (kl, d_p, d_q)
}

/// A scalar objective with its gradient over the weight matrix. An empty
/// gradient stands for the zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl ObjectiveValue {
    pub fn zero() -> Self {
        Self { value: 0.0, grad: Vec::new() }
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &ObjectiveValue, scale: f64) {
        self.value += scale * other.value;
        if other.grad.is_empty() {
            return;
        }
        if self.grad.is_empty() {
            self.grad = vec![0.0; other.grad.len()];
        }
        for (g, o) in self.grad.iter_mut().zip(&other.grad) {
            *g += scale * o;
        }
    }

    /// Dense gradient of length `n`, zero-filled when empty.
    pub fn dense_grad(&self, n: usize) -> Vec<f64> {
        if self.grad.is_empty() {
            vec![0.0; n]
        } else {
            self.grad.clone()
        }
    }
}

/// G rollouts sampled for one episode, with their advantages.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub episode: Episode,
    pub rollouts: Vec<Rollout>,
    pub advantages: AdvantageGroup,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoSettings {
    pub epsilon: f64,
    pub beta: f64,
}

impl Default for GrpoSettings {
    fn default() -> Self {
        Self { epsilon: 0.2, beta: 0.01 }
    }
}

/// Per-batch diagnostics from [`grpo_objective`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GrpoStats {
    pub mean_kl: f64,
    pub clipped_fraction: f64,
}

pub(crate) fn check_snapshots(groups: &[RolloutGroup], rollout: &Snapshot, reference: &Snapshot) -> Result<()> {
    if rollout.role() != Role::Rollout || reference.role() != Role::Reference {
        return Err(Error::Contract("snapshot roles swapped".into()));
    }
    for group in groups {
        for r in &group.rollouts {
            if r.policy_version != rollout.version() {
                return Err(Error::Contract(format!(
                    "rollout sampled by v{} scored against rollout snapshot v{}",
                    r.policy_version,
                    rollout.version()
                )));
            }
            if r.old_logprobs.len() != r.tokens.len() {
                return Err(Error::LengthMismatch {
                    what: "old_logprobs vs tokens",
                    left: r.old_logprobs.len(),
                    right: r.tokens.len(),
                });
            }
        }
        if group.rollouts.len() != group.advantages.advantages.len() {
            return Err(Error::LengthMismatch {
                what: "rollouts vs advantages",
                left: group.rollouts.len(),
                right: group.advantages.advantages.len(),
            });
        }
    }
    Ok(())
}

/// Value and gradient of the GRPO objective at `current`.
pub fn grpo_objective(
    policy: &GridPolicy,
    groups: &[RolloutGroup],
    current: &PolicyParams,
    rollout: &Snapshot,
    reference: &Snapshot,
    settings: GrpoSettings,
) -> Result<(ObjectiveValue, GrpoStats)> {
    check_snapshots(groups, rollout, reference)?;
    let n = current.weights().len();
    let v = current.vocab_size();
    let mut grad = vec![0.0; n];
    let mut value = 0.0;
    let mut kl_total = 0.0;
    let mut clipped = 0usize;
    let mut tokens_seen = 0usize;
    let n_groups = groups.len().max(1) as f64;
    let mut dz = vec![0.0; v];

    for group in groups {
        let g = group.rollouts.len() as f64;
        for (r, &adv) in group.rollouts.iter().zip(&group.advantages.advantages) {
            if r.tokens.is_empty() {
                continue;
            }
            let weight = 1.0 / (n_groups * g * r.tokens.len() as f64);
            for t in 0..r.tokens.len() {
                let feats = policy.sparse_features(&group.episode.query, &group.episode.image, &r.tokens[..t]);
                let p = current.distribution(&feats)?;
                let p_ref = reference.params().distribution(&feats)?;
                let a = r.tokens[t];
                let ratio = (p.prob(a).ln() - r.old_logprobs[t]).exp();
                if !ratio.is_finite() {
                    return Err(Error::Numerical(format!("importance ratio overflow at token {t}")));
                }
                let surrogate = clipped_surrogate(ratio, adv, settings.epsilon);
                let slope = clipped_surrogate_slope(ratio, adv, settings.epsilon);
                if clip(ratio, settings.epsilon) != ratio {
                    clipped += 1;
                }
                let (kl, kl_dp, _) = kl_with_logit_grads(p.probs(), p_ref.probs());
                value += weight * (surrogate - settings.beta * kl);
                kl_total += kl;
                tokens_seen += 1;

                // ∂r/∂z = r (e_a − p)
                for (k, d) in dz.iter_mut().enumerate() {
                    *d = -slope * ratio * p.prob(k) - settings.beta * kl_dp[k];
                }
                dz[a] += slope * ratio;
                accumulate_outer(&mut grad, v, &feats, &dz, weight);
            }
        }
    }
    let denom = tokens_seen.max(1) as f64;
    Ok((
        ObjectiveValue { value, grad },
        GrpoStats {
            mean_kl: kl_total / denom,
            clipped_fraction: clipped as f64 / denom,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn advantages_examples() {
        let g = relative_advantages(&[1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(g.advantages, vec![0.0; 5]);
        assert!(g.is_degenerate());

        let g = relative_advantages(&[1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((g.group_mean - 0.4).abs() < 1e-15);
        assert!((g.group_std - 0.24f64.sqrt()).abs() < 1e-15);
        // Independent recomputation: (R − 0.4)/√0.24.
        for (a, r) in g.advantages.iter().zip([1.0, 0.0, 0.0, 0.0, 1.0]) {
            assert!((a - (r - 0.4) / 0.24f64.sqrt()).abs() < 1e-12);
        }
        let expected = [1.22474, -0.81650, -0.81650, -0.81650, 1.22474];
        for (a, e) in g.advantages.iter().zip(expected) {
            assert!((a - e).abs() < 1e-5);
        }

        let g = relative_advantages(&[1.0, 0.0]).unwrap();
        assert_eq!(g.advantages, vec![1.0, -1.0]);
        assert!(relative_advantages(&[1.0]).is_err());
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(clipped_surrogate(1.0, 0.7, 0.2), 0.7);
        assert!((clipped_surrogate(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        let p = TokenDistribution::new(vec![1.0, 0.0]).unwrap();
        let q = TokenDistribution::new(vec![0.5, 0.5]).unwrap();
        assert!((kl_penalty(&p, &q) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(kl_penalty(&q, &q), 0.0);
    }

    #[test]
    fn kl_logit_grads_match_finite_differences() {
        let softmax = |z: &[f64]| TokenDistribution::from_logits(z).unwrap().into_probs();
        let zp = [0.3, -1.2, 2.0, 0.1];
        let zq = [1.0, 0.4, -0.5, 0.0];
        let (_, dp, dq) = kl_with_logit_grads(&softmax(&zp), &softmax(&zq));
        let h = 1e-6;
        for k in 0..4 {
            let mut a = zp;
            let mut b = zp;
            a[k] += h;
            b[k] -= h;
            let fd = (kl_divergence(&softmax(&a), &softmax(&zq)) - kl_divergence(&softmax(&b), &softmax(&zq))) / (2.0 * h);
            assert!((fd - dp[k]).abs() < 1e-8);
            let mut a = zq;
            let mut b = zq;
            a[k] += h;
            b[k] -= h;
            let fd = (kl_divergence(&softmax(&zp), &softmax(&a)) - kl_divergence(&softmax(&zp), &softmax(&b))) / (2.0 * h);
            assert!((fd - dq[k]).abs() < 1e-8);
        }
    }

    fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-6.0f64..6.0, n)
            .prop_map(|z| TokenDistribution::from_logits(&z).unwrap().into_probs())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn kl_is_nonnegative(p in dist(6), q in dist(6)) {
            prop_assert!(kl_divergence(&p, &q) >= -1e-15);
        }

        #[test]
        fn min_dominance(r in 0.01f64..5.0, a in -3.0f64..3.0, eps in 0.01f64..0.99) {
            let s = clipped_surrogate(r, a, eps);
            if a > 0.0 {
                prop_assert!(s <= r * a);
            }
            if a < 0.0 {
                prop_assert!(s <= clip(r, eps) * a);
            }
        }

        #[test]
        fn standardized_groups(rewards in prop::collection::vec(0.0f64..1.0, 2..12)) {
            let g = relative_advantages(&rewards).unwrap();
            if !g.is_degenerate() {
                let n = g.advantages.len() as f64;
                let mean = g.advantages.iter().sum::<f64>() / n;
                let std = (g.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((std - 1.0).abs() < 1e-6);
            }
        }
    }
}
