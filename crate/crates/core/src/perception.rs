//! Perception-token detection by entropy shift.
//!
//! Each rollout is re-scored, teacher-forced, under the clean image and under
//! an information-removing perturbation of it. Tokens whose predictive entropy
//! rises the most are the ones that leaned on query-relevant image content.

use crate::env::{Episode, SyntheticImage};
use crate::error::{Error, Result};
use crate::policy::{GridPolicy, PolicyParams, TokenDistribution};

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

pub fn token_entropy(dist: &TokenDistribution) -> f64 {
    entropy(dist.probs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyProfile {
    pub h_clean: Vec<f64>,
    pub h_removed: Vec<f64>,
    pub delta_h: Vec<f64>,
}

impl EntropyProfile {
    pub fn from_entropies(h_clean: Vec<f64>, h_removed: Vec<f64>) -> Result<Self> {
        if h_clean.len() != h_removed.len() {
            return Err(Error::LengthMismatch {
                what: "clean vs removed entropies",
                left: h_clean.len(),
                right: h_removed.len(),
            });
        }
        let delta_h = h_clean.iter().zip(&h_removed).map(|(c, r)| r - c).collect();
        Ok(Self { h_clean, h_removed, delta_h })
    }

    pub fn from_distributions(clean: &[TokenDistribution], removed: &[TokenDistribution]) -> Result<Self> {
        Self::from_entropies(
            clean.iter().map(token_entropy).collect(),
            removed.iter().map(token_entropy).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.delta_h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta_h.is_empty()
    }
}

/// `ΔH_t = H(o_t | q, I⁻, o<t) − H(o_t | q, I, o<t)` for a fixed token sequence.
pub fn entropy_shift(
    policy: &GridPolicy,
    params: &PolicyParams,
    tokens: &[usize],
    episode: &Episode,
    removed_image: &SyntheticImage,
) -> Result<EntropyProfile> {
    if removed_image.width() != episode.image.width() || removed_image.height() != episode.image.height() {
        return Err(Error::LengthMismatch {
            what: "removed image vs episode image cells",
            left: removed_image.len(),
            right: episode.image.len(),
        });
    }
    let clean = policy.score_sequence(params, &episode.query, &episode.image, tokens)?;
    let removed = policy.score_sequence(params, &episode.query, removed_image, tokens)?;
    EntropyProfile::from_distributions(&clean, &removed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionMask {
    /// Selected token indices in ascending order.
    pub selected: Vec<usize>,
    pub mask: Vec<bool>,
    pub k_ratio: f64,
}

impl PerceptionMask {
    fn from_selected(mut selected: Vec<usize>, len: usize, k_ratio: f64) -> Self {
        selected.sort_unstable();
        let mut mask = vec![false; len];
        for &t in &selected {
            mask[t] = true;
        }
        Self { selected, mask, k_ratio }
    }

    /// Every position selected (the uniform-CPL ablation arm).
    pub fn all(len: usize) -> Self {
        Self::from_selected((0..len).collect(), len, 1.0)
    }

    pub fn empty(len: usize) -> Self {
        Self::from_selected(Vec::new(), len, 0.0)
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn count(&self) -> usize {
        self.selected.len()
    }
}

/// Token budget `⌈k·T⌉`.
pub fn topk_budget(k_ratio: f64, len: usize) -> usize {
    let raw = k_ratio * len as f64;
    let snapped = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw };
    (snapped.ceil() as usize).min(len)
}

/// Keeps up to `⌈k·T⌉` tokens with the largest strictly positive ΔH; ties go to the lower index.
pub fn select_topk(profile: &EntropyProfile, k_ratio: f64) -> Result<PerceptionMask> {
    if !(0.0..=1.0).contains(&k_ratio) {
        return Err(Error::InvalidInput(format!("k ratio {k_ratio} outside [0, 1]")));
    }
    let len = profile.len();
    let mut candidates: Vec<usize> = (0..len).filter(|&t| profile.delta_h[t] > 0.0).collect();
    candidates.sort_by(|&a, &b| {
        profile.delta_h[b]
            .partial_cmp(&profile.delta_h[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    candidates.truncate(topk_budget(k_ratio, len));
    Ok(PerceptionMask::from_selected(candidates, len, k_ratio))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn profile(delta: &[f64]) -> EntropyProfile {
        EntropyProfile::from_entropies(vec![0.0; delta.len()], delta.to_vec()).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((entropy(&[0.5, 0.5, 0.0, 0.0]) - LN_2).abs() < 1e-15);
    }

    #[test]
    fn topk_examples() {
        let m = select_topk(&profile(&[0.9, 0.1, -0.2, 0.5]), 0.5).unwrap();
        assert_eq!(m.selected, vec![0, 3]);
        assert_eq!(m.mask, vec![true, false, false, true]);
        let m = select_topk(&profile(&[-0.1, -0.3, 0.2]), 1.0).unwrap();
        assert_eq!(m.selected, vec![2]);
        let m = select_topk(&profile(&[0.4, 0.3]), 0.0).unwrap();
        assert!(m.selected.is_empty());
        assert!(select_topk(&profile(&[0.4]), 1.5).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let m = select_topk(&profile(&[0.5, 0.5, 0.5, 0.5]), 0.5).unwrap();
        assert_eq!(m.selected, vec![0, 1]);
    }

    #[test]
    fn budget_is_ceiling() {
        assert_eq!(topk_budget(0.5, 5), 3);
        assert_eq!(topk_budget(0.1, 3), 1);
        assert_eq!(topk_budget(0.0, 9), 0);
        assert_eq!(topk_budget(1.0, 9), 9);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(EntropyProfile::from_entropies(vec![0.0; 3], vec![0.0; 2]).is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_k(delta in prop::collection::vec(-1.0f64..1.0, 1..20), k1 in 0.0f64..1.0, k2 in 0.0f64..1.0) {
            let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
            let p = profile(&delta);
            let a = select_topk(&p, lo).unwrap();
            let b = select_topk(&p, hi).unwrap();
            prop_assert!(a.selected.iter().all(|t| b.selected.contains(t)));
            prop_assert!(b.selected.iter().all(|&t| p.delta_h[t] > 0.0));
            prop_assert!(b.count() <= topk_budget(hi, delta.len()));
        }
    }
}
