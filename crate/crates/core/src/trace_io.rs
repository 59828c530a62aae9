//! Per-token trace files and the offline detection analyzer.
//!
//! A trace is JSON Lines, one record per token:
//!
//! ```text
//! {"rollout_id":"r0","token_index":0,"token_text":"READ","dist_clean":[..],"dist_removed":[..],"dist_preserved":[..],"reference_label":false}
//! ```
//!
//! `dist_*` fields are either full probability vectors or bare entropies.
//! A file uses one form throughout, and all vectors share one vocabulary size.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cpl::{distribution_similarity, infonce_loss};
use crate::env::{generate_episode, oracle_perception_labels, perturb, EnvConfig, Episode, SyntheticImage};
use crate::error::{Error, Result};
use crate::perception::{entropy, select_topk, EntropyProfile, PerceptionMask};
use crate::policy::{GridPolicy, PolicyParams, TokenDistribution};
use crate::rng::{derive_seed, stream_rng, Stream};

/// Random-baseline resamples per analysis.
pub const BASELINE_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenDist {
    Probs(Vec<f64>),
    Entropy(f64),
}

impl TokenDist {
    pub fn entropy(&self) -> f64 {
        match self {
            TokenDist::Probs(p) => entropy(p),
            TokenDist::Entropy(h) => *h,
        }
    }

    fn vocab_size(&self) -> Option<usize> {
        match self {
            TokenDist::Probs(p) => Some(p.len()),
            TokenDist::Entropy(_) => None,
        }
    }

    fn probs(&self) -> Option<&[f64]> {
        match self {
            TokenDist::Probs(p) => Some(p),
            TokenDist::Entropy(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub rollout_id: String,
    pub token_index: usize,
    pub token_text: String,
    pub dist_clean: TokenDist,
    pub dist_removed: TokenDist,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist_preserved: Option<TokenDist>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_label: Option<bool>,
}

impl TraceRecord {
    fn dists(&self) -> impl Iterator<Item = &TokenDist> {
        [Some(&self.dist_clean), Some(&self.dist_removed), self.dist_preserved.as_ref()].into_iter().flatten()
    }
}

/// Validates the whole-file invariants. `line_of(i)` maps a record index to
/// the line it came from, for error messages.
fn validate_records(records: &[TraceRecord], line_of: impl Fn(usize) -> usize) -> Result<()> {
    let mut vocab: Option<usize> = None;
    let mut full: Option<bool> = None;
    let mut next_index: HashMap<&str, usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        let line = line_of(i);
        let bad = |message: String| Error::TraceFormat { line, message };
        for d in r.dists() {
            let is_full = d.vocab_size().is_some();
            match full {
                None => full = Some(is_full),
                Some(f) if f != is_full => return Err(bad("mixes full distributions and entropy scalars".into())),
                _ => {}
            }
            match d {
                TokenDist::Probs(p) => {
                    match vocab {
                        None => vocab = Some(p.len()),
                        Some(v) if v != p.len() => {
                            return Err(bad(format!("vocabulary size {} contradicts earlier size {v}", p.len())));
                        }
                        _ => {}
                    }
                    if p.is_empty() || p.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                        return Err(bad("distribution is not a probability vector".into()));
                    }
                }
                TokenDist::Entropy(h) => {
                    if !(*h >= 0.0 && h.is_finite()) {
                        return Err(bad(format!("entropy {h} is not finite and ≥ 0")));
                    }
                }
            }
        }
        let expected = next_index.entry(r.rollout_id.as_str()).or_insert(0);
        if r.token_index != *expected {
            return Err(bad(format!("rollout `{}` expected token_index {expected}, found {}", r.rollout_id, r.token_index)));
        }
        *expected += 1;
    }
    Ok(())
}

pub fn write_trace(records: &[TraceRecord], path: &Path) -> Result<()> {
    validate_records(records, |i| i + 1)?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord =
            serde_json::from_str(&line).map_err(|e| Error::TraceFormat { line: n + 1, message: e.to_string() })?;
        records.push(record);
        lines.push(n + 1);
    }
    validate_records(&records, |i| lines[i])?;
    Ok(records)
}

/// Precision, recall and F1; `None` where the ratio is 0/0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl Prf {
    pub fn from_counts(true_pos: usize, selected: usize, positives: usize) -> Self {
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        let precision = ratio(true_pos, selected);
        let recall = ratio(true_pos, positives);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        Self { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RolloutAnalysis {
    pub rollout_id: String,
    pub delta_h: Vec<f64>,
    pub selected: Vec<usize>,
    /// Per-token InfoNCE loss at selected tokens; `None` without full distributions.
    pub token_cpl: Option<Vec<f64>>,
    pub rouge1_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineSummary {
    pub resamples: usize,
    pub precision_mean: Option<f64>,
    pub recall_mean: Option<f64>,
    pub f1_mean: Option<f64>,
    pub f1_std: Option<f64>,
    pub rouge1_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionReport {
    pub k_ratio: f64,
    pub tau: f64,
    pub rollouts: usize,
    pub tokens: usize,
    pub selected_tokens: usize,
    pub labelled_tokens: usize,
    pub label_base_rate: Option<f64>,
    pub detection: Prf,
    pub rouge1_mean: Option<f64>,
    pub baseline: BaselineSummary,
    /// `detection.f1 − baseline.f1_mean`.
    pub f1_gap: Option<f64>,
    pub per_rollout: Vec<RolloutAnalysis>,
}

/// Clipped unigram-overlap F1 over whitespace-split texts.
pub fn rouge1_f1(detected: &[&str], reference: &[&str]) -> f64 {
    let count = |texts: &[&str]| {
        let mut m: HashMap<String, usize> = HashMap::new();
        for w in texts.iter().flat_map(|t| t.split_whitespace()) {
            *m.entry(w.to_string()).or_insert(0) += 1;
        }
        m
    };
    let d = count(detected);
    let r = count(reference);
    let nd: usize = d.values().sum();
    let nr: usize = r.values().sum();
    let overlap: usize = d.iter().map(|(w, &c)| c.min(*r.get(w).unwrap_or(&0))).sum();
    if nd == 0 || nr == 0 || overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / nd as f64;
    let rc = overlap as f64 / nr as f64;
    2.0 * p * rc / (p + rc)
}

fn group_rollouts(records: &[TraceRecord]) -> Vec<Vec<&TraceRecord>> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_id: HashMap<&str, Vec<&TraceRecord>> = HashMap::new();
    for r in records {
        let entry = by_id.entry(r.rollout_id.as_str()).or_insert_with(|| {
            order.push(r.rollout_id.as_str());
            Vec::new()
        });
        entry.push(r);
    }
    order.into_iter().map(|id| by_id.remove(id).unwrap_or_default()).collect()
}

fn as_distribution(p: &[f64]) -> Result<TokenDistribution> {
    TokenDistribution::new(p.to_vec())
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

struct LabelCounts {
    true_pos: usize,
    selected: usize,
    positives: usize,
}

fn count_labels(rollouts: &[Vec<&TraceRecord>], selections: &[Vec<usize>]) -> LabelCounts {
    let mut c = LabelCounts { true_pos: 0, selected: 0, positives: 0 };
    for (recs, sel) in rollouts.iter().zip(selections) {
        c.positives += recs.iter().filter(|r| r.reference_label == Some(true)).count();
        for &t in sel {
            match recs[t].reference_label {
                Some(true) => {
                    c.true_pos += 1;
                    c.selected += 1;
                }
                Some(false) => c.selected += 1,
                None => {}
            }
        }
    }
    c
}

fn rollout_rouge(recs: &[&TraceRecord], sel: &[usize]) -> Option<f64> {
    let reference: Vec<&str> = recs.iter().filter(|r| r.reference_label == Some(true)).map(|r| r.token_text.as_str()).collect();
    if reference.is_empty() {
        return None;
    }
    let detected: Vec<&str> = sel.iter().map(|&t| recs[t].token_text.as_str()).collect();
    Some(rouge1_f1(&detected, &reference))
}

/// Entropy-shift detection, per-token CPL, and agreement with reference labels
/// against a size-matched random selection.
pub fn analyze_trace(records: &[TraceRecord], k_ratio: f64, tau: f64, baseline_seed: u64) -> Result<DetectionReport> {
    if !(0.0..=1.0).contains(&k_ratio) {
        return Err(Error::InvalidInput(format!("k ratio {k_ratio} outside [0, 1]")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidInput(format!("temperature {tau} must be positive")));
    }
    validate_records(records, |i| i + 1)?;
    let rollouts = group_rollouts(records);

    let mut per_rollout = Vec::with_capacity(rollouts.len());
    let mut selections = Vec::with_capacity(rollouts.len());
    for recs in &rollouts {
        let profile = EntropyProfile::from_entropies(
            recs.iter().map(|r| r.dist_clean.entropy()).collect(),
            recs.iter().map(|r| r.dist_removed.entropy()).collect(),
        )?;
        let mask = select_topk(&profile, k_ratio)?;
        let token_cpl = recs
            .iter()
            .map(|r| match (r.dist_clean.probs(), r.dist_removed.probs(), r.dist_preserved.as_ref().and_then(TokenDist::probs)) {
                (Some(c), Some(m), Some(p)) => Some((c, m, p)),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(|triples| -> Result<Vec<f64>> {
                mask.selected
                    .iter()
                    .map(|&t| {
                        let (c, m, p) = triples[t];
                        let anchor = as_distribution(c)?;
                        let pos = distribution_similarity(&anchor, &as_distribution(p)?);
                        let neg = distribution_similarity(&anchor, &as_distribution(m)?);
                        Ok(infonce_loss(pos, neg, tau))
                    })
                    .collect()
            })
            .transpose()?;
        per_rollout.push(RolloutAnalysis {
            rollout_id: recs[0].rollout_id.clone(),
            rouge1_f1: rollout_rouge(recs, &mask.selected),
            delta_h: profile.delta_h,
            selected: mask.selected.clone(),
            token_cpl,
        });
        selections.push(mask.selected);
    }

    let counts = count_labels(&rollouts, &selections);
    let detection = Prf::from_counts(counts.true_pos, counts.selected, counts.positives);
    let labelled_tokens = records.iter().filter(|r| r.reference_label.is_some()).count();
    let rouges: Vec<f64> = per_rollout.iter().filter_map(|r| r.rouge1_f1).collect();

    // Size-matched uniform-random selections.
    let mut rng = stream_rng(baseline_seed, Stream::Baseline, &[]);
    let (mut ps, mut rs, mut fs, mut rgs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..BASELINE_RESAMPLES {
        let random: Vec<Vec<usize>> = rollouts
            .iter()
            .zip(&selections)
            .map(|(recs, sel)| {
                let mut idx: Vec<usize> = (0..recs.len()).collect();
                idx.shuffle(&mut rng);
                idx.truncate(sel.len());
                idx.sort_unstable();
                idx
            })
            .collect();
        let c = count_labels(&rollouts, &random);
        let prf = Prf::from_counts(c.true_pos, c.selected, c.positives);
        ps.extend(prf.precision);
        rs.extend(prf.recall);
        fs.extend(prf.f1);
        let rr: Vec<f64> = rollouts.iter().zip(&random).filter_map(|(recs, sel)| rollout_rouge(recs, sel)).collect();
        rgs.extend(mean(&rr));
    }
    let f1_mean = mean(&fs);
    let f1_std = f1_mean.map(|m| (fs.iter().map(|f| (f - m).powi(2)).sum::<f64>() / fs.len() as f64).sqrt());
    let baseline = BaselineSummary {
        resamples: BASELINE_RESAMPLES,
        precision_mean: mean(&ps),
        recall_mean: mean(&rs),
        f1_mean,
        f1_std,
        rouge1_mean: mean(&rgs),
    };

    Ok(DetectionReport {
        k_ratio,
        tau,
        rollouts: rollouts.len(),
        tokens: records.len(),
        selected_tokens: selections.iter().map(Vec::len).sum(),
        labelled_tokens,
        label_base_rate: (labelled_tokens > 0).then(|| counts.positives as f64 / labelled_tokens as f64),
        f1_gap: detection.f1.zip(baseline.f1_mean).map(|(a, b)| a - b),
        detection,
        rouge1_mean: mean(&rouges),
        baseline,
        per_rollout,
    })
}

/// Trace records for one rollout of the toy policy, with oracle labels.
#[allow(clippy::too_many_arguments)]
pub fn export_rollout(
    policy: &GridPolicy,
    params: &PolicyParams,
    episode: &Episode,
    tokens: &[usize],
    removed: &SyntheticImage,
    preserved: Option<&SyntheticImage>,
    rollout_id: &str,
    full: bool,
) -> Result<Vec<TraceRecord>> {
    let clean = policy.score_sequence(params, &episode.query, &episode.image, tokens)?;
    let rem = policy.score_sequence(params, &episode.query, removed, tokens)?;
    let pre = preserved
        .map(|img| policy.score_sequence(params, &episode.query, img, tokens))
        .transpose()?;
    let labels = oracle_perception_labels(tokens, episode);
    let form = |d: &TokenDistribution| {
        if full {
            TokenDist::Probs(d.probs().to_vec())
        } else {
            TokenDist::Entropy(entropy(d.probs()))
        }
    };
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| TraceRecord {
            rollout_id: rollout_id.to_string(),
            token_index: t,
            token_text: policy.vocab().text(tok),
            dist_clean: form(&clean[t]),
            dist_removed: form(&rem[t]),
            dist_preserved: pre.as_ref().map(|p| form(&p[t])),
            reference_label: Some(labels[t]),
        })
        .collect())
}

/// Samples one rollout per held-out episode from `params` and exports the
/// trace under a random information-removing and -preserving view.
pub fn export_policy_trace(
    policy: &GridPolicy,
    params: &PolicyParams,
    env: &EnvConfig,
    episodes: usize,
    seed: u64,
    full: bool,
) -> Result<Vec<TraceRecord>> {
    let mut records = Vec::new();
    for j in 0..episodes as u64 {
        let episode = generate_episode(derive_seed(seed, Stream::Eval, &[j, 10]), env)?;
        let rollout = policy.sample_rollout(params, &episode, policy.max_len(), derive_seed(seed, Stream::Eval, &[j, 11]))?;
        let mut prng = stream_rng(seed, Stream::Eval, &[j, 12]);
        let remove = env.remove[prng.gen_range(0..env.remove.len())];
        let preserve = env.preserve[prng.gen_range(0..env.preserve.len())];
        let removed = perturb(&episode.image, &remove, prng.gen())?;
        let preserved = perturb(&episode.image, &preserve, prng.gen())?;
        records.extend(export_rollout(policy, params, &episode, &rollout.tokens, &removed, Some(&preserved), &format!("r{j}"), full)?);
    }
    Ok(records)
}

/// The in-process mask for a rollout, for comparing against [`analyze_trace`].
pub fn in_process_mask(
    policy: &GridPolicy,
    params: &PolicyParams,
    episode: &Episode,
    tokens: &[usize],
    removed: &SyntheticImage,
    k_ratio: f64,
) -> Result<(EntropyProfile, PerceptionMask)> {
    let profile = crate::perception::entropy_shift(policy, params, tokens, episode, removed)?;
    let mask = select_topk(&profile, k_ratio)?;
    Ok((profile, mask))
}
