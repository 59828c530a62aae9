//! The CPPO training loop.
//!
//! Per step: sample G rollouts per episode from `θ_old`, score them, draw one
//! information-removing and one information-preserving view per rollout,
//! detect perception tokens from the entropy shift, assemble the combined
//! objective, take one ascent step, and sync `θ_old ← θ`.
//!
//! All randomness is derived from `(seed, stream, step, slot)`, so changing λ
//! or the CPL arm never changes which episodes, rollouts, or perturbations are
//! drawn, and a run resumed from a checkpoint replays the same stream.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint;
use crate::cpl::{combined_objective, trajectory_cpl_objective, CplConfig, CplSelection, CplStats, PerturbedViews};
use crate::env::{generate_episode, perturb, EnvConfig, Episode, PerturbationSpec};
use crate::error::{Error, Result};
use crate::objective::{grpo_objective, relative_advantages, GrpoSettings, GrpoStats, ObjectiveValue, RolloutGroup};
use crate::perception::{entropy_shift, select_topk, EntropyProfile, PerceptionMask};
use crate::policy::{assign_role, snapshot, GridPolicy, PolicyParams, PriorConfig, Role, Snapshot};
use crate::rng::{derive_seed, stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// `θ ← θ + lr·∇J`.
    Sgd,
    /// Decoupled weight decay Adam, ascent form.
    AdamW,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub group_size: usize,
    /// Episodes per step.
    pub global_batch: usize,
    /// Episodes per epoch.
    pub dataset_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub epsilon_clip: f64,
    pub beta: f64,
    pub cpl: CplConfig,
    pub max_len: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Checkpoint interval in steps; 0 writes only the initial and final checkpoints.
    pub checkpoint_every: usize,
    pub prior: PriorConfig,
}

impl Default for TrainConfig {
    /// Desk-scale profile: 2000 steps of 32 episodes × 5 rollouts.
    fn default() -> Self {
        Self {
            group_size: 5,
            global_batch: 32,
            dataset_size: 6400,
            learning_rate: 0.3,
            epochs: 10,
            epsilon_clip: 0.2,
            beta: 0.01,
            cpl: CplConfig::default(),
            max_len: 12,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            weight_decay: 0.0,
            checkpoint_every: 500,
            prior: PriorConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Hyperparameters as reported for the full-scale runs.
    pub fn large_profile() -> Self {
        Self {
            group_size: 5,
            global_batch: 512,
            dataset_size: 39_000,
            learning_rate: 1e-6,
            epochs: 2,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.01,
            ..Self::default()
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.dataset_size / self.global_batch
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    pub fn grpo(&self) -> GrpoSettings {
        GrpoSettings { epsilon: self.epsilon_clip, beta: self.beta }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::key("train.group_size", "must be ≥ 2"));
        }
        if self.global_batch == 0 {
            return Err(Error::key("train.global_batch", "must be ≥ 1"));
        }
        if self.dataset_size < self.global_batch {
            return Err(Error::key("train.dataset_size", "must be ≥ train.global_batch"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::key("train.learning_rate", "must be finite and ≥ 0"));
        }
        if !(self.epsilon_clip > 0.0 && self.epsilon_clip < 1.0) {
            return Err(Error::key("objective.epsilon_clip", "must lie in (0, 1)"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::key("objective.beta", "must be finite and ≥ 0"));
        }
        if self.max_len == 0 {
            return Err(Error::key("train.max_len", "must be ≥ 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::key("train.weight_decay", "must be finite and ≥ 0"));
        }
        self.cpl.validate()
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_advantage_abs: f64,
    pub grpo_term: f64,
    /// `λ · 1/G Σ 1{A>0} L_CPL`, the amount subtracted from the objective.
    pub cpl_term: f64,
    pub mean_delta_h_selected: f64,
    pub mean_delta_h_unselected: f64,
    pub fraction_gated_rollouts: f64,
    /// Seconds since the run started. Kept out of the metrics CSV.
    pub wall_time: f64,
}

pub const METRICS_HEADER: &str = "step,mean_reward,mean_advantage_abs,grpo_term,cpl_term,mean_delta_h_selected,mean_delta_h_unselected,fraction_gated_rollouts";

impl TrainMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.mean_reward,
            self.mean_advantage_abs,
            self.grpo_term,
            self.cpl_term,
            self.mean_delta_h_selected,
            self.mean_delta_h_unselected,
            self.fraction_gated_rollouts
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Report(format!("expected 8 metrics columns, found {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::Report(format!("bad number `{}` in metrics row", fields[i])))
        };
        Ok(Self {
            step: fields[0]
                .parse()
                .map_err(|_| Error::Report(format!("bad step `{}`", fields[0])))?,
            mean_reward: num(1)?,
            mean_advantage_abs: num(2)?,
            grpo_term: num(3)?,
            cpl_term: num(4)?,
            mean_delta_h_selected: num(5)?,
            mean_delta_h_unselected: num(6)?,
            fraction_gated_rollouts: num(7)?,
            wall_time: 0.0,
        })
    }
}

#[derive(Debug, Clone)]
pub enum OptimizerState {
    Sgd,
    AdamW { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::AdamW => OptimizerState::AdamW { m: vec![0.0; n], v: vec![0.0; n], t: 0 },
        }
    }
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One ascent step on `J`. Rejects non-finite gradients and updates.
pub fn optimizer_step(
    params: &mut PolicyParams,
    grad: &[f64],
    state: &mut OptimizerState,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<()> {
    if grad.len() != params.weights().len() {
        return Err(Error::LengthMismatch {
            what: "gradient vs weights",
            left: grad.len(),
            right: params.weights().len(),
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient at weight {i}")));
    }
    let next: Vec<f64> = match state {
        OptimizerState::Sgd => params
            .weights()
            .iter()
            .zip(grad)
            .map(|(w, g)| w + learning_rate * g)
            .collect(),
        OptimizerState::AdamW { m, v, t } => {
            *t += 1;
            let bc1 = 1.0 - ADAM_B1.powi(*t as i32);
            let bc2 = 1.0 - ADAM_B2.powi(*t as i32);
            params
                .weights()
                .iter()
                .zip(grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
                .map(|((w, g), (mi, vi))| {
                    *mi = ADAM_B1 * *mi + (1.0 - ADAM_B1) * g;
                    *vi = ADAM_B2 * *vi + (1.0 - ADAM_B2) * g * g;
                    let step = (*mi / bc1) / ((*vi / bc2).sqrt() + ADAM_EPS);
                    w + learning_rate * (step - weight_decay * w)
                })
                .collect()
        }
    };
    params.update(next)
}

pub struct TrainState {
    pub policy: GridPolicy,
    pub params: PolicyParams,
    pub rollout: Snapshot,
    pub reference: Snapshot,
    pub optimizer: OptimizerState,
    /// Completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(env: &EnvConfig, train: &TrainConfig) -> Result<Self> {
        let policy = GridPolicy::new(env.width, env.height, env.alphabet, train.max_len);
        let params = policy.prior_params(&train.prior);
        Self::from_params(policy, params.clone(), params, train)
    }

    /// Resumes from `params` with the reference policy rebuilt from the prior.
    pub fn from_params(policy: GridPolicy, params: PolicyParams, reference: PolicyParams, train: &TrainConfig) -> Result<Self> {
        let n = params.weights().len();
        Ok(Self {
            rollout: assign_role(snapshot(&params), Role::Rollout)?,
            reference: assign_role(snapshot(&reference), Role::Reference)?,
            step: params.version(),
            optimizer: OptimizerState::new(train.optimizer, n),
            policy,
            params,
        })
    }
}

/// `θ_old ← θ`.
pub fn update_rollout_policy(state: &mut TrainState) -> Result<()> {
    state.rollout = assign_role(snapshot(&state.params), Role::Rollout)?;
    Ok(())
}

/// Everything the objective needs for one step, all computed at `θ_old`.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub groups: Vec<RolloutGroup>,
    pub views: Vec<Vec<PerturbedViews>>,
    pub profiles: Vec<Vec<EntropyProfile>>,
    /// Top-k perception masks.
    pub masks: Vec<Vec<PerceptionMask>>,
}

fn pick_spec(menu: &[PerturbationSpec], rng: &mut impl Rng) -> PerturbationSpec {
    menu[rng.gen_range(0..menu.len())]
}

/// Episodes for step `step` of the epoch-shuffled dataset.
pub fn episodes_for_step(env: &EnvConfig, train: &TrainConfig, step: u64) -> Result<Vec<Episode>> {
    let spe = train.steps_per_epoch().max(1) as u64;
    let epoch = step / spe;
    let slot = (step % spe) as usize;
    let mut order: Vec<usize> = (0..train.dataset_size).collect();
    order.shuffle(&mut stream_rng(train.seed, Stream::Shuffle, &[epoch]));
    order[slot * train.global_batch..(slot + 1) * train.global_batch]
        .iter()
        .map(|&j| generate_episode(derive_seed(train.seed, Stream::Episode, &[j as u64]), env))
        .collect()
}

/// Samples rollouts and views, and detects perception tokens, for one step.
pub fn prepare_batch(
    state: &TrainState,
    episodes: &[Episode],
    env: &EnvConfig,
    train: &TrainConfig,
    step: u64,
) -> Result<PreparedBatch> {
    let old = state.rollout.params();
    let mut batch = PreparedBatch { groups: Vec::new(), views: Vec::new(), profiles: Vec::new(), masks: Vec::new() };
    for (e, episode) in episodes.iter().enumerate() {
        let mut rollouts = Vec::with_capacity(train.group_size);
        let mut views = Vec::with_capacity(train.group_size);
        let mut profiles = Vec::with_capacity(train.group_size);
        let mut masks = Vec::with_capacity(train.group_size);
        for i in 0..train.group_size {
            let coords = [step, e as u64, i as u64];
            let mut r = state.policy.sample_rollout(
                old,
                episode,
                train.max_len,
                derive_seed(train.seed, Stream::Rollout, &coords),
            )?;
            r.group_id = e;

            let mut prng = stream_rng(train.seed, Stream::Perturb, &coords);
            let remove = pick_spec(&env.remove, &mut prng);
            let preserve = pick_spec(&env.preserve, &mut prng);
            let (remove_seed, preserve_seed): (u64, u64) = (prng.gen(), prng.gen());
            let removed = perturb(&episode.image, &remove, remove_seed)?;
            let preserved = perturb(&episode.image, &preserve, preserve_seed)?;

            let profile = entropy_shift(&state.policy, old, &r.tokens, episode, &removed)?;
            masks.push(select_topk(&profile, train.cpl.k_ratio)?);
            profiles.push(profile);
            views.push(PerturbedViews { removed, preserved });
            rollouts.push(r);
        }
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
        batch.groups.push(RolloutGroup {
            episode: episode.clone(),
            rollouts,
            advantages: relative_advantages(&rewards)?,
        });
        batch.views.push(views);
        batch.profiles.push(profiles);
        batch.masks.push(masks);
    }
    Ok(batch)
}

/// Objective terms reported alongside the value.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ObjectiveTerms {
    pub grpo: f64,
    pub grpo_stats: GrpoStats,
    pub cpl: CplStats,
}

/// Value and gradient of the combined objective at `current`.
pub fn cppo_objective(
    policy: &GridPolicy,
    batch: &PreparedBatch,
    current: &PolicyParams,
    rollout: &Snapshot,
    reference: &Snapshot,
    train: &TrainConfig,
) -> Result<(ObjectiveValue, ObjectiveTerms)> {
    let (grpo, grpo_stats) = grpo_objective(policy, &batch.groups, current, rollout, reference, train.grpo())?;
    if !grpo.value.is_finite() {
        return Err(Error::Numerical(format!("non-finite GRPO objective{}", dump_first_nonfinite(policy, batch, current))));
    }
    let mut terms = ObjectiveTerms { grpo: grpo.value, grpo_stats, cpl: CplStats::default() };
    let cfg = &train.cpl;
    if cfg.lambda == 0.0 {
        let gated = batch.groups.iter().flat_map(|g| &g.advantages.advantages).filter(|&&a| a > 0.0).count();
        let total: usize = batch.groups.iter().map(|g| g.rollouts.len()).sum();
        terms.cpl.gated_fraction = gated as f64 / total.max(1) as f64;
        return Ok((grpo, terms));
    }
    let mut cpl = Vec::with_capacity(batch.groups.len());
    for (gi, group) in batch.groups.iter().enumerate() {
        let mut row = Vec::with_capacity(group.rollouts.len());
        for (i, (r, &adv)) in group.rollouts.iter().zip(&group.advantages.advantages).enumerate() {
            if adv <= 0.0 {
                row.push(ObjectiveValue::zero());
                continue;
            }
            let all;
            let mask = match cfg.selection {
                CplSelection::TopK => &batch.masks[gi][i],
                CplSelection::AllTokens => {
                    all = PerceptionMask::all(r.tokens.len());
                    &all
                }
            };
            let term = trajectory_cpl_objective(policy, current, &group.episode, &r.tokens, &batch.views[gi][i], mask, cfg.tau, cfg.norm)
                .map_err(|e| annotate(e, policy, group, i))?;
            row.push(term);
        }
        cpl.push(row);
    }
    let advantages: Vec<_> = batch.groups.iter().map(|g| g.advantages.clone()).collect();
    let (combined, stats) = combined_objective(&grpo, &cpl, &advantages, cfg.lambda)?;
    terms.cpl = stats;
    Ok((combined, terms))
}

fn annotate(e: Error, policy: &GridPolicy, group: &RolloutGroup, i: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!(
            "{msg}; rollout {i} of episode {}: `{}`",
            group.episode.episode_seed,
            policy.vocab().render(&group.rollouts[i].tokens)
        )),
        other => other,
    }
}

fn dump_first_nonfinite(policy: &GridPolicy, batch: &PreparedBatch, current: &PolicyParams) -> String {
    for group in &batch.groups {
        for r in &group.rollouts {
            let bad = policy
                .score_sequence(current, &group.episode.query, &group.episode.image, &r.tokens)
                .map(|ds| ds.iter().any(|d| d.probs().iter().any(|p| !p.is_finite())))
                .unwrap_or(true);
            if bad || r.old_logprobs.iter().any(|l| !l.is_finite()) {
                return format!(
                    "; offending rollout of episode {}: `{}`",
                    group.episode.episode_seed,
                    policy.vocab().render(&r.tokens)
                );
            }
        }
    }
    String::new()
}

fn delta_h_means(batch: &PreparedBatch) -> (f64, f64) {
    let (mut sel, mut n_sel, mut rest, mut n_rest) = (0.0, 0usize, 0.0, 0usize);
    for (profiles, masks) in batch.profiles.iter().zip(&batch.masks) {
        for (p, m) in profiles.iter().zip(masks) {
            for (d, &bit) in p.delta_h.iter().zip(&m.mask) {
                if bit {
                    sel += d;
                    n_sel += 1;
                } else {
                    rest += d;
                    n_rest += 1;
                }
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    (mean(sel, n_sel), mean(rest, n_rest))
}

/// One full training step on `episodes`.
pub fn train_step(state: &mut TrainState, episodes: &[Episode], env: &EnvConfig, train: &TrainConfig, started: Instant) -> Result<TrainMetrics> {
    let batch = prepare_batch(state, episodes, env, train, state.step)?;
    let (objective, terms) = cppo_objective(&state.policy, &batch, &state.params, &state.rollout, &state.reference, train)?;
    optimizer_step(&mut state.params, &objective.grad, &mut state.optimizer, train.learning_rate, train.weight_decay)?;
    update_rollout_policy(state)?;
    state.step += 1;

    let rollouts: Vec<_> = batch.groups.iter().flat_map(|g| g.rollouts.iter()).collect();
    let advantages: Vec<f64> = batch.groups.iter().flat_map(|g| g.advantages.advantages.iter().copied()).collect();
    let n = rollouts.len().max(1) as f64;
    let (sel, unsel) = delta_h_means(&batch);
    Ok(TrainMetrics {
        step: state.step,
        mean_reward: rollouts.iter().map(|r| r.reward).sum::<f64>() / n,
        mean_advantage_abs: advantages.iter().map(|a| a.abs()).sum::<f64>() / n,
        grpo_term: terms.grpo,
        cpl_term: train.cpl.lambda * terms.cpl.gated_cpl,
        mean_delta_h_selected: sel,
        mean_delta_h_unselected: unsel,
        fraction_gated_rollouts: terms.cpl.gated_fraction,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// File layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.txt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn timing(&self) -> PathBuf {
        self.dir.join("timing.csv")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoint_dir().join(format!("step_{step:07}.bin"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.bin")
    }

    fn adam_moments(&self, step: u64) -> (PathBuf, PathBuf) {
        let d = self.checkpoint_dir();
        (d.join(format!("step_{step:07}.adam_m.bin")), d.join(format!("step_{step:07}.adam_v.bin")))
    }

    /// Highest-step parameter checkpoint in the run directory.
    pub fn latest_checkpoint(&self) -> Result<Option<(u64, PathBuf)>> {
        let dir = self.checkpoint_dir();
        if !dir.exists() {
            return Ok(None);
        }
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            let step = name
                .strip_prefix("step_")
                .and_then(|s| s.strip_suffix(".bin"))
                .and_then(|s| s.parse::<u64>().ok());
            if let Some(step) = step {
                if best.as_ref().is_none_or(|(b, _)| step > *b) {
                    best = Some((step, path));
                }
            }
        }
        Ok(best)
    }
}

fn save_state(state: &TrainState, paths: &RunPaths) -> Result<()> {
    checkpoint::save(&state.params, &paths.checkpoint(state.step))?;
    if let OptimizerState::AdamW { m, v, t } = &state.optimizer {
        let (pm, pv) = paths.adam_moments(state.step);
        let shape = |w: &Vec<f64>| PolicyParams::from_weights(state.params.feature_dim(), state.params.vocab_size(), w.clone(), *t);
        checkpoint::save(&shape(m)?, &pm)?;
        checkpoint::save(&shape(v)?, &pv)?;
    }
    Ok(())
}

fn load_state(env: &EnvConfig, train: &TrainConfig, paths: &RunPaths, step: u64, path: &Path) -> Result<TrainState> {
    let policy = GridPolicy::new(env.width, env.height, env.alphabet, train.max_len);
    let reference = policy.prior_params(&train.prior);
    let params = checkpoint::load(path)?;
    if params.version() != step {
        return Err(Error::Checkpoint { path: path.to_path_buf(), message: format!("version {} does not match step {step}", params.version()) });
    }
    let mut state = TrainState::from_params(policy, params, reference, train)?;
    if let OptimizerState::AdamW { m, v, t } = &mut state.optimizer {
        let (pm, pv) = paths.adam_moments(step);
        let lm = checkpoint::load(&pm)?;
        let lv = checkpoint::load(&pv)?;
        *t = lm.version();
        *m = lm.weights().to_vec();
        *v = lv.weights().to_vec();
    }
    Ok(state)
}

fn read_metrics_upto(path: &Path, step: u64) -> Result<Vec<TrainMetrics>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut rows = Vec::new();
    for line in reader.lines().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = TrainMetrics::parse_csv_row(&line)?;
        if row.step <= step {
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Output of [`run_training`].
pub struct TrainOutcome {
    pub metrics: Vec<TrainMetrics>,
    pub state: TrainState,
}

/// Runs `epochs × dataset_size/global_batch` steps. With `paths`, writes the
/// metrics and timing CSVs every step and checkpoints at the configured
/// interval; with `resume`, continues from the newest checkpoint in `paths`.
pub fn run_training(env: &EnvConfig, train: &TrainConfig, paths: Option<&RunPaths>, resume: bool) -> Result<TrainOutcome> {
    env.validate()?;
    train.validate()?;
    let started = Instant::now();
    let total = train.total_steps() as u64;

    let mut state = match (paths, resume) {
        (Some(p), true) => match p.latest_checkpoint()? {
            Some((step, path)) => load_state(env, train, p, step, &path)?,
            None => TrainState::new(env, train)?,
        },
        _ => TrainState::new(env, train)?,
    };
    let mut metrics = match paths {
        Some(p) if resume => read_metrics_upto(&p.metrics(), state.step)?,
        _ => Vec::new(),
    };

    let mut writers = match paths {
        Some(p) => {
            fs::create_dir_all(&p.dir)?;
            let mut m = fs::File::create(p.metrics())?;
            writeln!(m, "{METRICS_HEADER}")?;
            for row in &metrics {
                writeln!(m, "{}", row.csv_row())?;
            }
            let mut t = fs::File::create(p.timing())?;
            writeln!(t, "step,wall_time")?;
            if state.step == 0 {
                save_state(&state, p)?;
            }
            Some((m, t))
        }
        None => None,
    };

    while state.step < total {
        let episodes = episodes_for_step(env, train, state.step)?;
        let row = train_step(&mut state, &episodes, env, train, started)?;
        if let (Some(p), Some((m, t))) = (paths, writers.as_mut()) {
            writeln!(m, "{}", row.csv_row())?;
            m.flush()?;
            writeln!(t, "{},{}", row.step, row.wall_time)?;
            if train.checkpoint_every > 0 && state.step % train.checkpoint_every as u64 == 0 {
                save_state(&state, p)?;
            }
        }
        metrics.push(row);
    }
    if let Some(p) = paths {
        save_state(&state, p)?;
        checkpoint::save(&state.params, &p.final_checkpoint())?;
    }
    Ok(TrainOutcome { metrics, state })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalCondition {
    Clean,
    InfoRemoving,
    InfoPreserving,
}

/// Mean reward of rollouts sampled on (optionally perturbed) held-out episodes.
/// The same episodes and rollout seeds are used under every condition.
pub fn evaluate(
    policy: &GridPolicy,
    params: &PolicyParams,
    env: &EnvConfig,
    max_len: usize,
    episodes: usize,
    seed: u64,
    condition: EvalCondition,
) -> Result<f64> {
    let mut total = 0.0;
    for j in 0..episodes as u64 {
        let mut episode = generate_episode(derive_seed(seed, Stream::Eval, &[j]), env)?;
        let mut prng = stream_rng(seed, Stream::Eval, &[j, 1]);
        let remove = pick_spec(&env.remove, &mut prng);
        let preserve = pick_spec(&env.preserve, &mut prng);
        let pseed: u64 = prng.gen();
        episode.image = match condition {
            EvalCondition::Clean => episode.image,
            EvalCondition::InfoRemoving => perturb(&episode.image, &remove, pseed)?,
            EvalCondition::InfoPreserving => perturb(&episode.image, &preserve, pseed)?,
        };
        let r = policy.sample_rollout(params, &episode, max_len, derive_seed(seed, Stream::Eval, &[j, 2]))?;
        total += r.reward;
    }
    Ok(total / episodes.max(1) as f64)
}
