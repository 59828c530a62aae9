//! Brute-force verifiers: exact conditional mutual information over small
//! image ensembles, the entropy-shift/MI identity, and finite-difference
//! checks of the analytic objective gradient.

use rand::Rng;

use crate::env::{EnvConfig, PerturbationKind, PerturbationSpec, Query, SyntheticImage, Token};
use crate::error::{Error, Result};
use crate::objective::{kl_divergence, relative_advantages, KL_FLOOR};
use crate::perception::entropy;
use crate::policy::{GridPolicy, PolicyParams};
use crate::rng::{stream_rng, Stream};
use crate::trainer::{cppo_objective, episodes_for_step, prepare_batch, TrainConfig, TrainState};

pub const MAX_ENSEMBLE: usize = 256;
pub const MI_TOLERANCE: f64 = 1e-8;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// A finite distribution over images.
#[derive(Debug, Clone)]
pub struct ImageEnsemble {
    images: Vec<SyntheticImage>,
    prior: Vec<f64>,
}

impl ImageEnsemble {
    pub fn new(images: Vec<SyntheticImage>, prior: Vec<f64>) -> Result<Self> {
        if images.is_empty() || images.len() > MAX_ENSEMBLE {
            return Err(Error::InvalidInput(format!("ensemble needs 1..={MAX_ENSEMBLE} images, got {}", images.len())));
        }
        if images.len() != prior.len() {
            return Err(Error::LengthMismatch { what: "ensemble images vs prior", left: images.len(), right: prior.len() });
        }
        if prior.iter().any(|&p| !(p >= 0.0 && p.is_finite())) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput("ensemble prior must be a probability vector".into()));
        }
        let (w, h) = (images[0].width(), images[0].height());
        if images.iter().any(|i| i.width() != w || i.height() != h) {
            return Err(Error::InvalidInput("ensemble images differ in shape".into()));
        }
        Ok(Self { images, prior })
    }

    pub fn uniform(images: Vec<SyntheticImage>) -> Result<Self> {
        let n = images.len().max(1);
        Self::new(images, vec![1.0 / n as f64; n])
    }

    pub fn images(&self) -> &[SyntheticImage] {
        &self.images
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }
}

fn next_token_table(policy: &GridPolicy, params: &PolicyParams, query: &Query, prefix: &[usize], images: &[SyntheticImage]) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|img| Ok(policy.next_token_distribution(params, query, img, prefix)?.into_probs()))
        .collect()
}

fn mixture(weights: &[f64], dists: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; dists[0].len()];
    for (w, d) in weights.iter().zip(dists) {
        for (o, p) in out.iter_mut().zip(d) {
            *o += w * p;
        }
    }
    out
}

/// `Σ_I prior(I)·KL(π(·|I) ‖ Σ_J prior(J) π(·|J))`.
fn mi_from_table(prior: &[f64], dists: &[Vec<f64>]) -> f64 {
    let marginal = mixture(prior, dists);
    prior
        .iter()
        .zip(dists)
        .filter(|(&w, _)| w > 0.0)
        .map(|(w, d)| w * kl_divergence(d, &marginal))
        .sum::<f64>()
        .max(0.0)
}

/// `MI(o_t ; I | q, prefix)` by enumeration over the ensemble.
pub fn exact_conditional_mi(
    policy: &GridPolicy,
    params: &PolicyParams,
    query: &Query,
    prefix: &[usize],
    ensemble: &ImageEnsemble,
) -> Result<f64> {
    let dists = next_token_table(policy, params, query, prefix, &ensemble.images)?;
    Ok(mi_from_table(&ensemble.prior, &dists))
}

/// Terms of the entropy-shift identity, all averaged over the ensemble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiIdentity {
    /// `H(o | I⁻) − H(o | I)`.
    pub delta_h: f64,
    pub mi_clean: f64,
    pub mi_removed: f64,
    /// `|ΔH − (MI_clean − MI_removed)|`.
    pub residual: f64,
    /// `E[H(π(·|I⁻))] − E[H(π(·|I))]`: the shift as the detector measures it,
    /// by feeding `I⁻` to the policy. Not part of the identity.
    pub policy_fed_delta_h: f64,
}

/// Checks `H(o|I⁻) − H(o|I) = MI(o;I) − MI(o;I⁻)` under the joint model
/// `I ~ prior, I⁻ = removal(I), o ~ π(·|q, I, prefix)`.
///
/// `H(o|I⁻)` uses the posterior predictive `p(o|I⁻) = Σ_{I↦I⁻} prior(I)π(o|I) / p(I⁻)`.
/// The left side is computed from entropies and the right side from KL
/// divergences to the marginal, so the two are independent routes.
pub fn mi_identity_check(
    policy: &GridPolicy,
    params: &PolicyParams,
    query: &Query,
    prefix: &[usize],
    ensemble: &ImageEnsemble,
    removal: impl Fn(&SyntheticImage) -> Result<SyntheticImage>,
) -> Result<MiIdentity> {
    let dists = next_token_table(policy, params, query, prefix, &ensemble.images)?;
    let removed: Vec<SyntheticImage> = ensemble.images.iter().map(&removal).collect::<Result<_>>()?;

    // Group ensemble members by their removed image.
    let mut groups: Vec<(SyntheticImage, Vec<usize>)> = Vec::new();
    for (i, r) in removed.iter().enumerate() {
        match groups.iter_mut().find(|(img, _)| img == r) {
            Some((_, members)) => members.push(i),
            None => groups.push((r.clone(), vec![i])),
        }
    }
    let mut group_mass = Vec::with_capacity(groups.len());
    let mut group_pred = Vec::with_capacity(groups.len());
    for (_, members) in &groups {
        let mass: f64 = members.iter().map(|&i| ensemble.prior[i]).sum();
        let pred = if members.len() == 1 {
            dists[members[0]].clone()
        } else if mass > 0.0 {
            let w: Vec<f64> = members.iter().map(|&i| ensemble.prior[i] / mass).collect();
            let d: Vec<Vec<f64>> = members.iter().map(|&i| dists[i].clone()).collect();
            mixture(&w, &d)
        } else {
            vec![1.0 / dists[0].len() as f64; dists[0].len()]
        };
        group_mass.push(mass);
        group_pred.push(pred);
    }

    let h_clean: f64 = ensemble.prior.iter().zip(&dists).map(|(w, d)| w * entropy(d)).sum();
    let h_removed: f64 = group_mass.iter().zip(&group_pred).map(|(w, d)| w * entropy(d)).sum();
    let delta_h = h_removed - h_clean;

    let marginal = mixture(&ensemble.prior, &dists);
    let kl_sum = |weights: &[f64], ds: &[Vec<f64>]| -> f64 {
        weights.iter().zip(ds).filter(|(&w, _)| w > 0.0).map(|(w, d)| w * kl_divergence(d, &marginal)).sum()
    };
    let mi_clean = kl_sum(&ensemble.prior, &dists);
    let mi_removed = kl_sum(&group_mass, &group_pred);

    let fed = next_token_table(policy, params, query, prefix, &removed)?;
    let h_fed: f64 = ensemble.prior.iter().zip(&fed).map(|(w, d)| w * entropy(d)).sum();

    Ok(MiIdentity {
        delta_h,
        mi_clean,
        mi_removed,
        residual: (delta_h - (mi_clean - mi_removed)).abs(),
        policy_fed_delta_h: h_fed - h_clean,
    })
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidInput(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("non-finite objective at {what}")))
    }
}

/// Central difference along `direction`: `(f(θ+hd) − f(θ−hd)) / 2h`.
pub fn directional_derivative(f: &mut impl FnMut(&[f64]) -> Result<f64>, theta: &[f64], direction: &[f64], h: f64) -> Result<f64> {
    check_step(h)?;
    if direction.len() != theta.len() {
        return Err(Error::LengthMismatch { what: "probe direction vs parameters", left: direction.len(), right: theta.len() });
    }
    let plus: Vec<f64> = theta.iter().zip(direction).map(|(t, d)| t + h * d).collect();
    let minus: Vec<f64> = theta.iter().zip(direction).map(|(t, d)| t - h * d).collect();
    let fp = finite(f(&plus)?, "θ + h·d")?;
    let fm = finite(f(&minus)?, "θ − h·d")?;
    Ok((fp - fm) / (2.0 * h))
}

/// Per-coordinate central differences.
pub fn finite_difference_gradient(f: &mut impl FnMut(&[f64]) -> Result<f64>, theta: &[f64], h: f64) -> Result<Vec<f64>> {
    check_step(h)?;
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let fp = finite(f(&probe)?, "θ + h·e_i")?;
        probe[i] = theta[i] - h;
        let fm = finite(f(&probe)?, "θ − h·e_i")?;
        probe[i] = theta[i];
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiSuiteReport {
    pub draws: usize,
    pub max_residual: f64,
    /// Largest `|policy-fed ΔH − ensemble ΔH|`; informational only.
    pub max_policy_fed_gap: f64,
    pub passed: bool,
}

fn random_image(rng: &mut impl Rng, w: usize, h: usize, c: u8) -> Result<SyntheticImage> {
    let n = w * h;
    let cells = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let noise = (0..n).map(|_| rng.gen_range(0..c)).collect();
    SyntheticImage::new(w, h, c, cells, noise)
}

fn random_query(rng: &mut impl Rng, w: usize, h: usize, c: u8) -> Query {
    match rng.gen_range(0..3) {
        0 => Query::CellLookup { row: rng.gen_range(0..h), col: rng.gen_range(0..w) },
        1 => Query::RowSum { row: rng.gen_range(0..h) },
        _ => Query::CountEqual { row: rng.gen_range(0..h), target: rng.gen_range(0..c) },
    }
}

fn random_params(rng: &mut impl Rng, policy: &GridPolicy, scale: f64) -> Result<PolicyParams> {
    let base = policy.zero_params();
    let weights = base.weights().iter().map(|_| rng.gen_range(-scale..scale)).collect();
    PolicyParams::from_weights(base.feature_dim(), base.vocab_size(), weights, 0)
}

/// A variant of `base` with a few cells redrawn.
fn neighbour(rng: &mut impl Rng, base: &SyntheticImage) -> Result<SyntheticImage> {
    let c = base.alphabet();
    let mut cells = base.raw_cells().to_vec();
    let mut noise = base.noise().to_vec();
    for _ in 0..rng.gen_range(1..=3) {
        let i = rng.gen_range(0..cells.len());
        cells[i] = rng.gen_range(0..c);
        if rng.gen_bool(0.3) {
            noise[i] = rng.gen_range(0..c);
        }
    }
    SyntheticImage::new(base.width(), base.height(), c, cells, noise)
}

/// Draw `draws` random (policy, query, prefix, ensemble, removal) settings and
/// check the identity on each.
pub fn mi_suite(seed: u64, draws: usize) -> Result<MiSuiteReport> {
    let (w, h, c, max_len) = (3usize, 3usize, 4u8, 8usize);
    let policy = GridPolicy::new(w, h, c, max_len);
    let vocab = *policy.vocab();
    let mut report = MiSuiteReport { draws, max_residual: 0.0, max_policy_fed_gap: 0.0, passed: true };
    for d in 0..draws as u64 {
        let mut rng = stream_rng(seed, Stream::Init, &[d]);
        let params = random_params(&mut rng, &policy, 2.0)?;
        let query = random_query(&mut rng, w, h, c);
        let prefix_len = rng.gen_range(0..5);
        let prefix: Vec<usize> = (0..prefix_len)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    vocab.id(Token::Read)
                } else {
                    vocab.id(Token::Value(rng.gen_range(0..c)))
                }
            })
            .collect();
        let base = random_image(&mut rng, w, h, c)?;
        let n = rng.gen_range(2..=16);
        let mut images = vec![base.clone()];
        while images.len() < n {
            images.push(neighbour(&mut rng, &base)?);
        }
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let ensemble = ImageEnsemble::new(images, raw.iter().map(|p| p / total).collect())?;
        let spec = PerturbationSpec::new(PerturbationKind::PatchMask, rng.gen_range(0.2..0.9))?;
        let removal_seed: u64 = rng.gen();
        let r = mi_identity_check(&policy, &params, &query, &prefix, &ensemble, |img| crate::env::perturb(img, &spec, removal_seed))?;
        report.max_residual = report.max_residual.max(r.residual);
        report.max_policy_fed_gap = report.max_policy_fed_gap.max((r.policy_fed_delta_h - r.delta_h).abs());
    }
    report.passed = report.max_residual < MI_TOLERANCE;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradBatchReport {
    pub rel_err: f64,
    pub clipped_fraction: f64,
    pub gated_rollouts: usize,
    pub selected_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSuiteReport {
    pub batches: Vec<GradBatchReport>,
    pub max_rel_err: f64,
    pub passed: bool,
}

const GRAD_PROBES: usize = 12;
const GRAD_COORDS: usize = 12;
const FD_STEP: f64 = 1e-5;

/// Whether any token ratio sits within `margin` of a clip boundary, where the
/// objective is not differentiable.
fn near_kink(state: &TrainState, batch: &crate::trainer::PreparedBatch, current: &PolicyParams, epsilon: f64, margin: f64) -> Result<bool> {
    for g in &batch.groups {
        for r in &g.rollouts {
            let ds = state.policy.score_sequence(current, &g.episode.query, &g.episode.image, &r.tokens)?;
            for (d, (&t, &old)) in ds.iter().zip(r.tokens.iter().zip(&r.old_logprobs)) {
                let ratio = (d.prob(t).ln() - old).exp();
                if (ratio - (1.0 - epsilon)).abs() < margin || (ratio - (1.0 + epsilon)).abs() < margin {
                    return Ok(true);
                }
                if d.probs().iter().any(|&p| (p - KL_FLOOR).abs() < 1e-13) {
                    return Ok(true);
                }
            }
        }
    }
    Ok(false)
}

/// Compare the analytic combined-objective gradient with central differences
/// on one seeded batch where clipping, advantage gating and a nonempty
/// perception mask are all active.
pub fn grad_batch(seed: u64) -> Result<GradBatchReport> {
    let env = EnvConfig::default();
    let train = TrainConfig { global_batch: 2, dataset_size: 64, group_size: 5, seed, ..TrainConfig::default() };
    let policy = GridPolicy::new(env.width, env.height, env.alphabet, train.max_len);
    let reference = policy.prior_params(&train.prior);
    let mut rng = stream_rng(seed, Stream::Init, &[0x67726164]);

    // θ_old: the prior plus noise, so the image matters and ΔH is nonzero.
    let old_w: Vec<f64> = reference.weights().iter().map(|w| w + rng.gen_range(-0.8..0.8)).collect();
    let old = reference.with_weights(old_w);
    let state = TrainState::from_params(policy, old.clone(), reference, &train)?;
    let episodes = episodes_for_step(&env, &train, 0)?;
    let mut batch = prepare_batch(&state, &episodes, &env, &train, 0)?;

    // Mixed rewards in every group so that gating selects some rollouts.
    for g in batch.groups.iter_mut() {
        if g.advantages.is_degenerate() {
            let rewards: Vec<f64> = (0..g.rollouts.len()).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
            for (r, &v) in g.rollouts.iter_mut().zip(&rewards) {
                r.reward = v;
            }
            g.advantages = relative_advantages(&rewards)?;
        }
    }
    let gated_rollouts = batch.groups.iter().flat_map(|g| &g.advantages.advantages).filter(|&&a| a > 0.0).count();
    let selected_tokens: usize = batch.masks.iter().flatten().map(|m| m.count()).sum();
    if selected_tokens == 0 {
        return Err(Error::Contract(format!("gradient batch {seed} has an empty perception mask")));
    }

    // θ: far enough from θ_old that some ratios clip, away from the kinks.
    let mut current = None;
    for attempt in 0..64 {
        let w: Vec<f64> = old.weights().iter().map(|w| w + rng.gen_range(-0.35..0.35)).collect();
        let cand = PolicyParams::from_weights(old.feature_dim(), old.vocab_size(), w, attempt)?;
        if !near_kink(&state, &batch, &cand, train.epsilon_clip, 1e-3)? {
            current = Some(cand);
            break;
        }
    }
    let current = current.ok_or_else(|| Error::Contract(format!("no kink-free parameters found for batch {seed}")))?;

    let (analytic, terms) = cppo_objective(&state.policy, &batch, &current, &state.rollout, &state.reference, &train)?;
    let grad = analytic.dense_grad(current.weights().len());
    let mut f = |theta: &[f64]| -> Result<f64> {
        let p = current.with_weights(theta.to_vec());
        Ok(cppo_objective(&state.policy, &batch, &p, &state.rollout, &state.reference, &train)?.0.value)
    };

    let theta = current.weights().to_vec();
    let mut analytic_d = Vec::new();
    let mut numeric_d = Vec::new();
    for _ in 0..GRAD_PROBES {
        let dir: Vec<f64> = (0..theta.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        analytic_d.push(grad.iter().zip(&dir).map(|(g, d)| g * d).sum::<f64>());
        numeric_d.push(directional_derivative(&mut f, &theta, &dir, FD_STEP)?);
    }
    // Coordinates with the largest analytic gradient.
    let mut order: Vec<usize> = (0..grad.len()).collect();
    order.sort_by(|&a, &b| grad[b].abs().partial_cmp(&grad[a].abs()).unwrap_or(std::cmp::Ordering::Equal));
    for &i in order.iter().take(GRAD_COORDS) {
        let mut e = vec![0.0; theta.len()];
        e[i] = 1.0;
        analytic_d.push(grad[i]);
        numeric_d.push(directional_derivative(&mut f, &theta, &e, FD_STEP)?);
    }
    let diff: f64 = analytic_d.iter().zip(&numeric_d).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric_d.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-12);

    Ok(GradBatchReport {
        rel_err: diff / scale,
        clipped_fraction: terms.grpo_stats.clipped_fraction,
        gated_rollouts,
        selected_tokens,
    })
}

pub fn grad_suite(seed: u64, batches: usize) -> Result<GradSuiteReport> {
    let reports: Vec<GradBatchReport> = (0..batches as u64).map(|b| grad_batch(seed.wrapping_mul(1000).wrapping_add(b))).collect::<Result<_>>()?;
    let max_rel_err = reports.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    let active = reports.iter().all(|r| r.clipped_fraction > 0.0 && r.gated_rollouts > 0 && r.selected_tokens > 0);
    Ok(GradSuiteReport { passed: max_rel_err < GRAD_TOLERANCE && active, max_rel_err, batches: reports })
}
