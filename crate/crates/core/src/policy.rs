//! Linear-softmax next-token policy over hand-built context features.
//!
//! `π(· | q, I, o<t) = softmax(Wᵀ φ(q, I, o<t))` with `W` of shape
//! `feature_dim × vocab_size`. Feature vectors are mostly one-hot blocks, so
//! they are kept sparse; a dense view is available through [`GridPolicy::features`].
//!
//! For any scalar `L` of the logits `z = Wᵀφ`, `∂L/∂W = φ ⊗ ∂L/∂z`. Every
//! gradient in the crate is assembled from that identity.

use rand::Rng;

use crate::env::{read_values, Episode, Query, SyntheticImage, Token, Vocab};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// `(index, value)` pairs of a feature vector.
pub type SparseFeatures = Vec<(usize, f64)>;

/// Offsets of the feature blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    pub width: usize,
    pub height: usize,
    pub alphabet: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub max_answer: usize,
    bias: usize,
    kind: usize,
    row: usize,
    col: usize,
    target: usize,
    last_token: usize,
    position: usize,
    focus: usize,
    focus_noise: usize,
    noise_hist: usize,
    reads_done: usize,
    result: usize,
    grid: usize,
    dim: usize,
}

impl FeatureLayout {
    pub fn new(width: usize, height: usize, vocab: &Vocab, max_len: usize) -> Self {
        let c = vocab.alphabet() as usize;
        let mut next = 0;
        let mut block = |len: usize| {
            let at = next;
            next += len;
            at
        };
        let bias = block(1);
        let kind = block(3);
        let row = block(height);
        let col = block(width);
        let target = block(c);
        // Vocabulary plus a start-of-sequence slot.
        let last_token = block(vocab.size() + 1);
        let position = block(max_len);
        // Values, MASK, none.
        let focus = block(c + 2);
        // Noise values, none.
        let focus_noise = block(c + 1);
        let noise_hist = block(c);
        let reads_done = block(1);
        let result = block(vocab.max_answer() + 1);
        // Values plus MASK per cell.
        let grid = block(width * height * (c + 1));
        Self {
            width,
            height,
            alphabet: c,
            max_len,
            vocab_size: vocab.size(),
            max_answer: vocab.max_answer(),
            bias,
            kind,
            row,
            col,
            target,
            last_token,
            position,
            focus,
            focus_noise,
            noise_hist,
            reads_done,
            result,
            grid,
            dim: next,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bias_index(&self) -> usize {
        self.bias
    }

    pub fn last_token_index(&self, token: Option<usize>) -> usize {
        self.last_token + token.map_or(self.vocab_size, |t| t)
    }

    /// Feature index of the focused cell showing `value`.
    pub fn focus_value_index(&self, value: u8) -> usize {
        self.focus + value as usize
    }

    pub fn focus_mask_index(&self) -> usize {
        self.focus + self.alphabet
    }

    pub fn focus_noise_index(&self, value: u8) -> usize {
        self.focus_noise + value as usize
    }

    pub fn reads_done_index(&self) -> usize {
        self.reads_done
    }

    pub fn result_index(&self, value: usize) -> usize {
        self.result + value
    }

    /// Range of the whole-grid cell block (visible values and MASK indicators).
    pub fn grid_range(&self) -> std::ops::Range<usize> {
        self.grid..self.grid + self.width * self.height * (self.alphabet + 1)
    }

    /// Range of every block that reads cell content: the focused-cell block and the grid block.
    pub fn cell_feature_ranges(&self) -> [std::ops::Range<usize>; 2] {
        [self.focus..self.focus + self.alphabet + 2, self.grid_range()]
    }

    pub fn noise_ranges(&self) -> [std::ops::Range<usize>; 2] {
        [
            self.focus_noise..self.focus_noise + self.alphabet + 1,
            self.noise_hist..self.noise_hist + self.alphabet,
        ]
    }
}

/// Probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    /// Validates nonnegativity and normalization (within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput("distribution entries must be finite and ≥ 0".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("distribution sums to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self { probs: vec![1.0 / n as f64; n] }
    }

    /// Stable softmax of finite logits.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Numerical("non-finite logits".into()));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= total;
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, token: usize) -> f64 {
        self.probs[token]
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// `θ_old`, generates rollouts.
    Rollout,
    /// `π_ref`, fixed for a whole run.
    Reference,
}

/// Weight matrix, row-major `feature_dim × vocab_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    weights: Vec<f64>,
    feature_dim: usize,
    vocab_size: usize,
    version: u64,
    frozen: bool,
}

impl PolicyParams {
    pub fn zeros(feature_dim: usize, vocab_size: usize) -> Self {
        Self {
            weights: vec![0.0; feature_dim * vocab_size],
            feature_dim,
            vocab_size,
            version: 0,
            frozen: false,
        }
    }

    pub fn from_weights(feature_dim: usize, vocab_size: usize, weights: Vec<f64>, version: u64) -> Result<Self> {
        if vocab_size < 4 || feature_dim == 0 {
            return Err(Error::InvalidInput(format!(
                "bad parameter shape {feature_dim}×{vocab_size}"
            )));
        }
        if weights.len() != feature_dim * vocab_size {
            return Err(Error::LengthMismatch {
                what: "weights vs feature_dim×vocab_size",
                left: weights.len(),
                right: feature_dim * vocab_size,
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numerical("non-finite weight".into()));
        }
        Ok(Self { weights, feature_dim, vocab_size, version, frozen: false })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn get(&self, feature: usize, token: usize) -> f64 {
        self.weights[feature * self.vocab_size + token]
    }

    /// Direct weight edit for building hand-crafted policies. Not versioned.
    pub fn set(&mut self, feature: usize, token: usize, value: f64) -> Result<()> {
        self.ensure_mutable()?;
        self.weights[feature * self.vocab_size + token] = value;
        Ok(())
    }

    /// Replaces the weights wholesale and bumps the version. Rejects non-finite values.
    pub fn update(&mut self, weights: Vec<f64>) -> Result<()> {
        self.ensure_mutable()?;
        if weights.len() != self.weights.len() {
            return Err(Error::LengthMismatch {
                what: "update vs weights",
                left: weights.len(),
                right: self.weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numerical("update produced non-finite weights".into()));
        }
        self.weights = weights;
        self.version += 1;
        Ok(())
    }

    /// Copy with every weight replaced, keeping shape and version. Used by finite-difference probes.
    pub fn with_weights(&self, weights: Vec<f64>) -> Self {
        debug_assert_eq!(weights.len(), self.weights.len());
        Self { weights, frozen: false, ..self.clone() }
    }

    fn ensure_mutable(&self) -> Result<()> {
        if self.frozen {
            Err(Error::Contract(format!("snapshot v{} is frozen", self.version)))
        } else {
            Ok(())
        }
    }

    /// `z = Wᵀφ` for sparse `φ`.
    pub fn logits(&self, features: &[(usize, f64)]) -> Vec<f64> {
        let v = self.vocab_size;
        let mut z = vec![0.0; v];
        for &(i, x) in features {
            let row = &self.weights[i * v..(i + 1) * v];
            for (zk, w) in z.iter_mut().zip(row) {
                *zk += x * w;
            }
        }
        z
    }

    pub fn distribution(&self, features: &[(usize, f64)]) -> Result<TokenDistribution> {
        TokenDistribution::from_logits(&self.logits(features))
    }
}

/// Frozen copy of `params`. Frozen params reject every mutation.
pub fn snapshot(params: &PolicyParams) -> PolicyParams {
    PolicyParams { frozen: true, ..params.clone() }
}

/// A frozen snapshot tagged with the role it plays in the objective.
#[derive(Debug, Clone)]
pub struct Snapshot {
    params: PolicyParams,
    role: Role,
}

impl Snapshot {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn version(&self) -> u64 {
        self.params.version
    }
}

pub fn assign_role(frozen: PolicyParams, role: Role) -> Result<Snapshot> {
    if !frozen.frozen {
        return Err(Error::Contract("only frozen snapshots can take a role".into()));
    }
    Ok(Snapshot { params: frozen, role })
}

/// Adds `scale · φ ⊗ dz` into a dense gradient.
pub fn accumulate_outer(grad: &mut [f64], vocab_size: usize, features: &[(usize, f64)], dz: &[f64], scale: f64) {
    for &(i, x) in features {
        let s = scale * x;
        let row = &mut grad[i * vocab_size..(i + 1) * vocab_size];
        for (g, d) in row.iter_mut().zip(dz) {
            *g += s * d;
        }
    }
}

/// One sampled trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<usize>,
    /// `log π_old(o_t | ·)` recorded at sampling time.
    pub old_logprobs: Vec<f64>,
    pub reward: f64,
    pub group_id: usize,
    pub episode_seed: u64,
    /// Version of the rollout policy that produced the tokens.
    pub policy_version: u64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Weights of the warm-start policy that knows the transcript format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    /// Logit margin that enforces the `READ v … ANS a` structure.
    pub format: f64,
    /// Logit bonus mapping the transcript's running result to the matching answer token.
    pub arithmetic: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { format: 8.0, arithmetic: 3.0 }
    }
}

/// Policy architecture for one grid geometry.
#[derive(Debug, Clone)]
pub struct GridPolicy {
    layout: FeatureLayout,
    vocab: Vocab,
}

impl GridPolicy {
    pub fn new(width: usize, height: usize, alphabet: u8, max_len: usize) -> Self {
        let vocab = Vocab::for_grid(width, alphabet);
        Self { layout: FeatureLayout::new(width, height, &vocab, max_len), vocab }
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.layout
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.layout.max_len
    }

    pub fn zero_params(&self) -> PolicyParams {
        PolicyParams::zeros(self.layout.dim(), self.vocab.size())
    }

    /// Warm-start parameters: the transcript grammar and a partial answer mapping,
    /// with no knowledge of how to read cells.
    pub fn prior_params(&self, prior: &PriorConfig) -> PolicyParams {
        let l = &self.layout;
        let v = &self.vocab;
        let s = prior.format;
        let mut p = self.zero_params();
        let mut set = |f: usize, t: Token, w: f64| {
            p.weights[f * v.size() + v.id(t)] = w;
        };
        set(l.last_token_index(None), Token::Read, s);
        for val in 0..v.alphabet() {
            set(l.last_token_index(Some(v.id(Token::Read))), Token::Value(val), s);
            set(l.last_token_index(Some(v.id(Token::Value(val)))), Token::Read, s);
        }
        set(l.reads_done_index(), Token::Ans, 2.0 * s);
        set(l.reads_done_index(), Token::Read, -s);
        let after_ans = l.last_token_index(Some(v.id(Token::Ans)));
        set(after_ans, Token::Ans, -3.0 * s);
        for n in 0..=v.max_answer() {
            set(after_ans, Token::Answer(n), s);
            set(l.result_index(n), Token::Answer(n), prior.arithmetic);
        }
        p
    }

    /// Sparse context features for `(q, I, prefix)`.
    pub fn sparse_features(&self, query: &Query, image: &SyntheticImage, prefix: &[usize]) -> SparseFeatures {
        let l = &self.layout;
        let v = &self.vocab;
        let c = l.alphabet;
        let mut f: SparseFeatures = Vec::with_capacity(48);
        f.push((l.bias, 1.0));
        f.push((l.kind + query.kind().index(), 1.0));
        f.push((l.row + query.row(), 1.0));
        match *query {
            Query::CellLookup { col, .. } => f.push((l.col + col, 1.0)),
            Query::CountEqual { target, .. } => f.push((l.target + target as usize, 1.0)),
            Query::RowSum { .. } => {}
        }
        f.push((l.last_token_index(prefix.last().copied()), 1.0));
        f.push((l.position + prefix.len().min(l.max_len - 1), 1.0));

        let reads = prefix.iter().filter(|&&t| v.token(t) == Some(Token::Read)).count();
        let relevant = query.relevant_cells(image.width());
        let focus_cell = match prefix.last().and_then(|&t| v.token(t)) {
            Some(Token::Read) if reads <= relevant.len() => Some(relevant[reads - 1]),
            _ => None,
        };
        match focus_cell {
            Some((r, col)) => {
                match image.cell(r, col) {
                    Some(val) => f.push((l.focus + val as usize, 1.0)),
                    None => f.push((l.focus + c, 1.0)),
                }
                f.push((l.focus_noise + image.noise_at(r, col) as usize, 1.0));
            }
            None => {
                f.push((l.focus + c + 1, 1.0));
                f.push((l.focus_noise + c, 1.0));
            }
        }

        let mut hist = vec![0usize; c];
        for &n in image.noise() {
            hist[n as usize] += 1;
        }
        let total = image.noise().len() as f64;
        for (k, &count) in hist.iter().enumerate() {
            if count > 0 {
                f.push((l.noise_hist + k, count as f64 / total));
            }
        }

        let values = read_values(v, prefix);
        if values.len() >= relevant.len() {
            f.push((l.reads_done, 1.0));
        }
        if let Some(r) = query.combine(&values) {
            f.push((l.result + r.min(l.max_answer), 1.0));
        }

        for (i, &raw) in image.raw_cells().iter().enumerate() {
            let slot = if image.mask_flags()[i] { c } else { raw as usize };
            f.push((l.grid + i * (c + 1) + slot, 1.0));
        }
        f
    }

    /// Dense feature vector of length `feature_dim`.
    pub fn features(&self, query: &Query, image: &SyntheticImage, prefix: &[usize]) -> Vec<f64> {
        let mut dense = vec![0.0; self.layout.dim()];
        for (i, x) in self.sparse_features(query, image, prefix) {
            dense[i] += x;
        }
        dense
    }

    fn check_params(&self, params: &PolicyParams) -> Result<()> {
        if params.feature_dim != self.layout.dim() || params.vocab_size != self.vocab.size() {
            return Err(Error::InvalidInput(format!(
                "parameters are {}×{}, policy expects {}×{}",
                params.feature_dim,
                params.vocab_size,
                self.layout.dim(),
                self.vocab.size()
            )));
        }
        Ok(())
    }

    pub fn next_token_distribution(
        &self,
        params: &PolicyParams,
        query: &Query,
        image: &SyntheticImage,
        prefix: &[usize],
    ) -> Result<TokenDistribution> {
        self.check_params(params)?;
        if prefix.len() >= self.layout.max_len {
            return Err(Error::InvalidInput("prefix reaches max_len".into()));
        }
        params.distribution(&self.sparse_features(query, image, prefix))
    }

    /// Teacher-forced distributions at every position of `tokens`.
    pub fn score_sequence(
        &self,
        params: &PolicyParams,
        query: &Query,
        image: &SyntheticImage,
        tokens: &[usize],
    ) -> Result<Vec<TokenDistribution>> {
        (0..tokens.len())
            .map(|t| self.next_token_distribution(params, query, image, &tokens[..t]))
            .collect()
    }

    /// Samples at temperature 1 until an answer/end token or `max_len`.
    pub fn sample_rollout(
        &self,
        params: &PolicyParams,
        episode: &Episode,
        max_len: usize,
        rng_seed: u64,
    ) -> Result<Rollout> {
        if max_len == 0 {
            return Err(Error::InvalidInput("max_len must be ≥ 1".into()));
        }
        self.check_params(params)?;
        let max_len = max_len.min(self.layout.max_len);
        let mut rng = rng_from_seed(rng_seed);
        let mut tokens = Vec::with_capacity(max_len);
        let mut logprobs = Vec::with_capacity(max_len);
        while tokens.len() < max_len {
            let feats = self.sparse_features(&episode.query, &episode.image, &tokens);
            let dist = params.distribution(&feats)?;
            let u: f64 = rng.gen();
            let token = sample_index(dist.probs(), u);
            logprobs.push(dist.prob(token).ln());
            tokens.push(token);
            if self.vocab.is_terminal(token) {
                break;
            }
        }
        let reward = crate::env::reward(&tokens, episode);
        Ok(Rollout {
            tokens,
            old_logprobs: logprobs,
            reward,
            group_id: 0,
            episode_seed: episode.episode_seed,
            policy_version: params.version,
        })
    }

    /// `∂ log π(token | ·) / ∂W = φ ⊗ (e_token − p)`.
    pub fn logprob_gradient(
        &self,
        params: &PolicyParams,
        token: usize,
        query: &Query,
        image: &SyntheticImage,
        prefix: &[usize],
    ) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let feats = self.sparse_features(query, image, prefix);
        let dist = params.distribution(&feats)?;
        let mut dz: Vec<f64> = dist.probs().iter().map(|p| -p).collect();
        dz[token] += 1.0;
        let mut grad = vec![0.0; params.weights.len()];
        accumulate_outer(&mut grad, params.vocab_size, &feats, &dz, 1.0);
        Ok(grad)
    }
}

/// Inverse-CDF draw; `u` in `[0, 1)`.
fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` a hair below 1: take the last token with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_episode, perturb, EnvConfig, PerturbationKind, PerturbationSpec};

    fn setup() -> (GridPolicy, Episode) {
        let config = EnvConfig::default();
        let policy = GridPolicy::new(config.width, config.height, config.alphabet, 12);
        (policy, generate_episode(11, &config).unwrap())
    }

    #[test]
    fn zero_weights_give_uniform() {
        let (policy, ep) = setup();
        let params = policy.zero_params();
        let d = policy.next_token_distribution(&params, &ep.query, &ep.image, &[]).unwrap();
        let v = policy.vocab().size() as f64;
        for &p in d.probs() {
            assert!((p - 1.0 / v).abs() < 1e-15);
        }
    }

    #[test]
    fn column_shift_multiplies_odds() {
        let (policy, ep) = setup();
        let mut params = policy.prior_params(&PriorConfig::default());
        let feats = policy.sparse_features(&ep.query, &ep.image, &[]);
        let before = params.distribution(&feats).unwrap();
        // +1 on the bias row of token 0 adds exactly 1 to that logit.
        let b = policy.layout().bias_index();
        let w = params.get(b, 0);
        params.set(b, 0, w + 1.0).unwrap();
        let after = params.distribution(&feats).unwrap();
        let odds = |d: &TokenDistribution| d.prob(0) / d.prob(1);
        assert!((odds(&after) / odds(&before) - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn saturated_end_gives_length_one() {
        let (policy, ep) = setup();
        let mut params = policy.zero_params();
        let end = policy.vocab().id(Token::End);
        params.set(policy.layout().bias_index(), end, 1000.0).unwrap();
        let r = policy.sample_rollout(&params, &ep, 12, 5).unwrap();
        assert_eq!(r.tokens, vec![end]);
        assert!(r.old_logprobs[0] <= 0.0);
    }

    #[test]
    fn rollouts_are_seeded() {
        let (policy, ep) = setup();
        let params = policy.prior_params(&PriorConfig::default());
        let a = policy.sample_rollout(&params, &ep, 12, 99).unwrap();
        let b = policy.sample_rollout(&params, &ep, 12, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.len(), a.old_logprobs.len());
        assert!(a.old_logprobs.iter().all(|&l| l <= 0.0));
    }

    #[test]
    fn full_mask_zeroes_cell_values() {
        let (policy, ep) = setup();
        let masked = perturb(&ep.image, &PerturbationSpec::new(PerturbationKind::PatchMask, 1.0).unwrap(), 0).unwrap();
        let read = policy.vocab().id(Token::Read);
        let f = policy.features(&ep.query, &masked, &[read]);
        let l = policy.layout();
        let c = l.alphabet;
        for cell in 0..l.width * l.height {
            let base = l.grid_range().start + cell * (c + 1);
            assert!(f[base..base + c].iter().all(|&x| x == 0.0));
            assert_eq!(f[base + c], 1.0);
        }
        assert_eq!(f[l.focus_mask_index()], 1.0);
    }

    #[test]
    fn noise_jitter_keeps_cell_blocks() {
        let (policy, ep) = setup();
        let spec = PerturbationSpec::new(PerturbationKind::NoiseJitter, 1.0).unwrap();
        let jittered = perturb(&ep.image, &spec, 3).unwrap();
        let read = policy.vocab().id(Token::Read);
        let a = policy.features(&ep.query, &ep.image, &[read]);
        let b = policy.features(&ep.query, &jittered, &[read]);
        for range in policy.layout().cell_feature_ranges() {
            assert_eq!(a[range.clone()], b[range]);
        }
    }

    #[test]
    fn gradient_closed_form_uniform() {
        let config = EnvConfig::default();
        let ep = generate_episode(1, &config).unwrap();
        let policy = GridPolicy::new(config.width, config.height, config.alphabet, 12);
        let params = policy.zero_params();
        let token = 2;
        let g = policy.logprob_gradient(&params, token, &ep.query, &ep.image, &[]).unwrap();
        let f = policy.features(&ep.query, &ep.image, &[]);
        let v = params.vocab_size();
        let p = 1.0 / v as f64;
        for (i, &x) in f.iter().enumerate() {
            assert!((g[i * v + token] - x * (1.0 - p)).abs() < 1e-15);
            let row: f64 = g[i * v..(i + 1) * v].iter().sum();
            assert!(row.abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_snapshot_rejects_updates() {
        let (policy, _) = setup();
        let params = policy.zero_params();
        let mut frozen = snapshot(&params);
        assert!(matches!(frozen.update(params.weights().to_vec()), Err(Error::Contract(_))));
        assert!(frozen.set(0, 0, 1.0).is_err());
        let snap = assign_role(frozen, Role::Reference).unwrap();
        assert_eq!(snap.role(), Role::Reference);
        assert!(assign_role(params, Role::Rollout).is_err());
    }

    #[test]
    fn prior_follows_grammar() {
        let (policy, _) = setup();
        let params = policy.prior_params(&PriorConfig::default());
        let config = EnvConfig::default();
        let v = *policy.vocab();
        let mut formatted = 0;
        for seed in 0..200 {
            let ep = generate_episode(seed, &config).unwrap();
            let r = policy.sample_rollout(&params, &ep, 12, seed).unwrap();
            let n = ep.query.relevant_count(5);
            if r.tokens.len() == 2 * n + 2
                && r.tokens[2 * n] == v.id(Token::Ans)
                && matches!(v.token(*r.tokens.last().unwrap()), Some(Token::Answer(_)))
            {
                formatted += 1;
            }
        }
        assert!(formatted > 180, "only {formatted}/200 rollouts follow the grammar");
    }
}
