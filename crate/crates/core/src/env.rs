//! Synthetic grid task: episodes, perturbations, rewards, and oracle token roles.
//!
//! An image is a `height × width` grid of cell values in `[0, C)` plus a noise
//! channel of the same shape that no query ever depends on. Queries ask for a
//! single cell, a row sum, or a count of a target value within a row, so the
//! answer can only be produced by reading specific cells.
//!
//! The rollout grammar the policy is expected to discover is
//!
//! ```text
//! READ v₁ READ v₂ … READ vₙ ANS a
//! ```
//!
//! where each `vⱼ` copies the j-th query-relevant cell. Those copies are the
//! perception tokens; every other token is structural or arithmetic.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Cell value stored for masked cells.
pub const MASK: u8 = u8::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SyntheticImage {
    width: usize,
    height: usize,
    alphabet: u8,
    cells: Vec<u8>,
    noise: Vec<u8>,
    mask_flags: Vec<bool>,
}

impl SyntheticImage {
    /// Builds an unmasked image. `cells` and `noise` are row-major.
    pub fn new(
        width: usize,
        height: usize,
        alphabet: u8,
        cells: Vec<u8>,
        noise: Vec<u8>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("image dimensions must be positive".into()));
        }
        if alphabet < 2 {
            return Err(Error::InvalidInput("cell alphabet must have at least 2 values".into()));
        }
        let n = width * height;
        if cells.len() != n || noise.len() != n {
            return Err(Error::LengthMismatch {
                what: "image cells vs width×height",
                left: cells.len().max(noise.len()),
                right: n,
            });
        }
        if cells.iter().chain(noise.iter()).any(|&v| v >= alphabet) {
            return Err(Error::InvalidInput(format!(
                "cell values must lie in [0, {alphabet})"
            )));
        }
        Ok(Self {
            width,
            height,
            alphabet,
            cells,
            noise,
            mask_flags: vec![false; n],
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn alphabet(&self) -> u8 {
        self.alphabet
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    /// Raw cell slot, `MASK` for masked cells.
    pub fn raw_cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn noise(&self) -> &[u8] {
        &self.noise
    }

    pub fn mask_flags(&self) -> &[bool] {
        &self.mask_flags
    }

    /// Visible value of a cell, `None` when masked.
    pub fn cell(&self, row: usize, col: usize) -> Option<u8> {
        let i = self.index(row, col);
        (!self.mask_flags[i]).then_some(self.cells[i])
    }

    pub fn noise_at(&self, row: usize, col: usize) -> u8 {
        self.noise[self.index(row, col)]
    }

    pub fn masked_count(&self) -> usize {
        self.mask_flags.iter().filter(|&&m| m).count()
    }

    fn mask_index(&mut self, i: usize) {
        self.mask_flags[i] = true;
        self.cells[i] = MASK;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QueryKind {
    CellLookup,
    RowSum,
    CountEqual,
}

impl QueryKind {
    pub const ALL: [QueryKind; 3] = [QueryKind::CellLookup, QueryKind::RowSum, QueryKind::CountEqual];

    pub fn index(self) -> usize {
        match self {
            QueryKind::CellLookup => 0,
            QueryKind::RowSum => 1,
            QueryKind::CountEqual => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Query {
    CellLookup { row: usize, col: usize },
    RowSum { row: usize },
    CountEqual { row: usize, target: u8 },
}

impl Query {
    pub fn kind(&self) -> QueryKind {
        match self {
            Query::CellLookup { .. } => QueryKind::CellLookup,
            Query::RowSum { .. } => QueryKind::RowSum,
            Query::CountEqual { .. } => QueryKind::CountEqual,
        }
    }

    pub fn row(&self) -> usize {
        match *self {
            Query::CellLookup { row, .. } | Query::RowSum { row } | Query::CountEqual { row, .. } => row,
        }
    }

    pub fn validate(&self, image: &SyntheticImage) -> Result<()> {
        let ok = match *self {
            Query::CellLookup { row, col } => row < image.height && col < image.width,
            Query::RowSum { row } => row < image.height,
            Query::CountEqual { row, target } => row < image.height && target < image.alphabet,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("query {self:?} outside image bounds")))
        }
    }

    /// Cells the answer depends on, in reading order.
    pub fn relevant_cells(&self, width: usize) -> Vec<(usize, usize)> {
        match *self {
            Query::CellLookup { row, col } => vec![(row, col)],
            Query::RowSum { row } | Query::CountEqual { row, .. } => {
                (0..width).map(|c| (row, c)).collect()
            }
        }
    }

    pub fn relevant_count(&self, width: usize) -> usize {
        match self {
            Query::CellLookup { .. } => 1,
            _ => width,
        }
    }

    /// Answer implied by a sequence of read values (the arithmetic part of the task).
    pub fn combine(&self, values: &[u8]) -> Option<usize> {
        match *self {
            Query::CellLookup { .. } => values.last().map(|&v| v as usize),
            Query::RowSum { .. } => {
                (!values.is_empty()).then(|| values.iter().map(|&v| v as usize).sum())
            }
            Query::CountEqual { target, .. } => {
                (!values.is_empty()).then(|| values.iter().filter(|&&v| v == target).count())
            }
        }
    }

    /// True answer on `image`; `None` if a relevant cell is masked.
    pub fn answer(&self, image: &SyntheticImage) -> Option<usize> {
        let values: Option<Vec<u8>> = self
            .relevant_cells(image.width)
            .into_iter()
            .map(|(r, c)| image.cell(r, c))
            .collect();
        self.combine(&values?)
    }
}

/// Token roles in the rollout vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    /// Copy of a cell value.
    Value(u8),
    Read,
    Sum,
    Ans,
    End,
    /// Numeric answer.
    Answer(usize),
}

/// Token id layout: cell values, then `READ SUM ANS END`, then answers `0..=max_answer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    alphabet: u8,
    max_answer: usize,
}

impl Vocab {
    pub fn new(alphabet: u8, max_answer: usize) -> Self {
        Self { alphabet, max_answer }
    }

    /// Vocabulary large enough for every query on a `width`-wide grid.
    pub fn for_grid(width: usize, alphabet: u8) -> Self {
        let max_answer = (width * (alphabet as usize - 1)).max(width);
        Self::new(alphabet, max_answer)
    }

    pub fn size(&self) -> usize {
        self.alphabet as usize + 4 + self.max_answer + 1
    }

    pub fn alphabet(&self) -> u8 {
        self.alphabet
    }

    pub fn max_answer(&self) -> usize {
        self.max_answer
    }

    pub fn id(&self, token: Token) -> usize {
        let c = self.alphabet as usize;
        match token {
            Token::Value(v) => {
                debug_assert!(v < self.alphabet);
                v as usize
            }
            Token::Read => c,
            Token::Sum => c + 1,
            Token::Ans => c + 2,
            Token::End => c + 3,
            Token::Answer(n) => {
                debug_assert!(n <= self.max_answer);
                c + 4 + n
            }
        }
    }

    pub fn token(&self, id: usize) -> Option<Token> {
        let c = self.alphabet as usize;
        match id {
            _ if id < c => Some(Token::Value(id as u8)),
            _ if id == c => Some(Token::Read),
            _ if id == c + 1 => Some(Token::Sum),
            _ if id == c + 2 => Some(Token::Ans),
            _ if id == c + 3 => Some(Token::End),
            _ if id < self.size() => Some(Token::Answer(id - c - 4)),
            _ => None,
        }
    }

    pub fn text(&self, id: usize) -> String {
        match self.token(id) {
            Some(Token::Value(v)) => format!("v{v}"),
            Some(Token::Read) => "READ".into(),
            Some(Token::Sum) => "SUM".into(),
            Some(Token::Ans) => "ANS".into(),
            Some(Token::End) => "END".into(),
            Some(Token::Answer(n)) => n.to_string(),
            None => format!("<{id}>"),
        }
    }

    /// Rollout terminates after an answer or end token.
    pub fn is_terminal(&self, id: usize) -> bool {
        matches!(self.token(id), Some(Token::Answer(_)) | Some(Token::End))
    }

    /// Parses a whitespace-separated transcript. A bare number directly after
    /// `READ` is a cell value; elsewhere it is an answer. `vN` is always a value.
    pub fn parse(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut prev: Option<Token> = None;
        for word in text.split_whitespace() {
            let token = match word {
                "READ" => Token::Read,
                "SUM" => Token::Sum,
                "ANS" => Token::Ans,
                "END" => Token::End,
                _ => {
                    let (is_value, digits) = match word.strip_prefix('v') {
                        Some(rest) => (true, rest),
                        None => (prev == Some(Token::Read), word),
                    };
                    let n: usize = digits
                        .parse()
                        .map_err(|_| Error::InvalidInput(format!("unknown token `{word}`")))?;
                    if is_value {
                        if n >= self.alphabet as usize {
                            return Err(Error::InvalidInput(format!("cell value {n} out of range")));
                        }
                        Token::Value(n as u8)
                    } else {
                        if n > self.max_answer {
                            return Err(Error::InvalidInput(format!("answer {n} out of range")));
                        }
                        Token::Answer(n)
                    }
                }
            };
            out.push(self.id(token));
            prev = Some(token);
        }
        Ok(out)
    }

    pub fn render(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.text(t)).collect::<Vec<_>>().join(" ")
    }
}

/// Values copied by `READ v` pairs in a transcript, in order.
pub fn read_values(vocab: &Vocab, tokens: &[usize]) -> Vec<u8> {
    let mut values = Vec::new();
    let mut after_read = false;
    for &t in tokens {
        match vocab.token(t) {
            Some(Token::Value(v)) if after_read => values.push(v),
            _ => {}
        }
        after_read = vocab.token(t) == Some(Token::Read);
    }
    values
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub image: SyntheticImage,
    pub query: Query,
    /// Token id of the correct answer.
    pub gold_answer: usize,
    pub episode_seed: u64,
    pub vocab: Vocab,
}

impl Episode {
    pub fn new(image: SyntheticImage, query: Query, episode_seed: u64) -> Result<Self> {
        query.validate(&image)?;
        let vocab = Vocab::for_grid(image.width, image.alphabet);
        let answer = query
            .answer(&image)
            .ok_or_else(|| Error::InvalidInput("episode image has masked query cells".into()))?;
        Ok(Self {
            gold_answer: vocab.id(Token::Answer(answer)),
            image,
            query,
            episode_seed,
            vocab,
        })
    }

    pub fn answer_value(&self) -> usize {
        match self.vocab.token(self.gold_answer) {
            Some(Token::Answer(n)) => n,
            _ => unreachable!("gold answer is always an answer token"),
        }
    }
}

/// Mixture weights over query kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryMix {
    pub cell_lookup: f64,
    pub row_sum: f64,
    pub count_equal: f64,
}

impl QueryMix {
    pub fn weights(&self) -> [f64; 3] {
        [self.cell_lookup, self.row_sum, self.count_equal]
    }
}

impl Default for QueryMix {
    fn default() -> Self {
        Self {
            cell_lookup: 1.0 / 3.0,
            row_sum: 1.0 / 3.0,
            count_equal: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PerturbationFamily {
    InfoRemoving,
    InfoPreserving,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PerturbationKind {
    /// Mask `round(s·n)` distinct cells.
    PatchMask,
    /// Keep a random rectangle covering at least `s·n` cells, mask the rest.
    ZoomCrop,
    /// Resample each noise cell with probability `s`.
    NoiseJitter,
    /// Point-reflect the noise channel.
    TransposeAnalog,
    /// Add a constant offset modulo C to every noise cell.
    ValueOffset,
    /// Swap `round(s·n/2)` random pairs of noise cells.
    SwapNoise,
}

impl PerturbationKind {
    pub fn family(self) -> PerturbationFamily {
        match self {
            PerturbationKind::PatchMask | PerturbationKind::ZoomCrop => {
                PerturbationFamily::InfoRemoving
            }
            _ => PerturbationFamily::InfoPreserving,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::PatchMask => "patch_mask",
            PerturbationKind::ZoomCrop => "zoom_crop",
            PerturbationKind::NoiseJitter => "noise_jitter",
            PerturbationKind::TransposeAnalog => "transpose",
            PerturbationKind::ValueOffset => "value_offset",
            PerturbationKind::SwapNoise => "swap_noise",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "patch_mask" => PerturbationKind::PatchMask,
            "zoom_crop" => PerturbationKind::ZoomCrop,
            "noise_jitter" => PerturbationKind::NoiseJitter,
            "transpose" => PerturbationKind::TransposeAnalog,
            "value_offset" => PerturbationKind::ValueOffset,
            "swap_noise" => PerturbationKind::SwapNoise,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub strength: f64,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, strength: f64) -> Result<Self> {
        let spec = Self { kind, strength };
        spec.validate()?;
        Ok(spec)
    }

    pub fn family(&self) -> PerturbationFamily {
        self.kind.family()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::InvalidInput(format!(
                "perturbation strength {} outside [0, 1]",
                self.strength
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub width: usize,
    pub height: usize,
    pub alphabet: u8,
    pub mix: QueryMix,
    /// Information-removing menu; one entry is drawn per rollout.
    pub remove: Vec<PerturbationSpec>,
    /// Information-preserving menu; one entry is drawn per rollout.
    pub preserve: Vec<PerturbationSpec>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            width: 5,
            height: 5,
            alphabet: 4,
            mix: QueryMix::default(),
            remove: vec![
                PerturbationSpec { kind: PerturbationKind::PatchMask, strength: 0.8 },
                PerturbationSpec { kind: PerturbationKind::ZoomCrop, strength: 0.3 },
            ],
            preserve: vec![
                PerturbationSpec { kind: PerturbationKind::NoiseJitter, strength: 0.5 },
                PerturbationSpec { kind: PerturbationKind::TransposeAnalog, strength: 1.0 },
                PerturbationSpec { kind: PerturbationKind::ValueOffset, strength: 0.5 },
                PerturbationSpec { kind: PerturbationKind::SwapNoise, strength: 0.5 },
            ],
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::key("grid.width", "grid dimensions must be at least 2×2"));
        }
        if self.alphabet < 4 {
            return Err(Error::key("grid.alphabet", "cell alphabet must be at least 4"));
        }
        let w = self.mix.weights();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::key("query.mix", "mixture weights must be finite and nonnegative"));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::key("query.mix", format!("mixture weights sum to {total}, not 1")));
        }
        for (menu, family, key) in [
            (&self.remove, PerturbationFamily::InfoRemoving, "perturb.remove"),
            (&self.preserve, PerturbationFamily::InfoPreserving, "perturb.preserve"),
        ] {
            if menu.is_empty() {
                return Err(Error::key(key, "perturbation menu is empty"));
            }
            for spec in menu {
                spec.validate().map_err(|e| Error::key(key, e.to_string()))?;
                if spec.family() != family {
                    return Err(Error::key(key, format!("`{}` is in the wrong family", spec.kind.name())));
                }
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::for_grid(self.width, self.alphabet)
    }
}

/// Deterministic episode for `seed`.
pub fn generate_episode(seed: u64, config: &EnvConfig) -> Result<Episode> {
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let n = config.width * config.height;
    let c = config.alphabet;
    let cells: Vec<u8> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let noise: Vec<u8> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let image = SyntheticImage::new(config.width, config.height, c, cells, noise)?;

    let u: f64 = rng.gen();
    let w = config.mix.weights();
    let kind = if u < w[0] {
        QueryKind::CellLookup
    } else if u < w[0] + w[1] || w[2] == 0.0 {
        QueryKind::RowSum
    } else {
        QueryKind::CountEqual
    };
    let row = rng.gen_range(0..config.height);
    let query = match kind {
        QueryKind::CellLookup => Query::CellLookup { row, col: rng.gen_range(0..config.width) },
        QueryKind::RowSum => Query::RowSum { row },
        QueryKind::CountEqual => Query::CountEqual { row, target: rng.gen_range(0..c) },
    };
    Episode::new(image, query, seed)
}

fn ceil_count(strength: f64, total: usize) -> usize {
    let raw = strength * total as f64;
    // 0.3·25 evaluates to 7.4999999999999996; snap near-integers before rounding up.
    let snapped = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw };
    (snapped.ceil() as usize).min(total)
}

/// Rectangle shapes `(rows, cols)` of minimal area ≥ `s·n`.
pub fn zoom_crop_shapes(width: usize, height: usize, strength: f64) -> Vec<(usize, usize)> {
    let target = ceil_count(strength, width * height).max(1);
    let mut best = usize::MAX;
    let mut shapes = Vec::new();
    for h in 1..=height {
        for w in 1..=width {
            let area = h * w;
            if area < target {
                continue;
            }
            if area < best {
                best = area;
                shapes.clear();
            }
            if area == best {
                shapes.push((h, w));
            }
        }
    }
    shapes
}

/// Applies one perturbation. Deterministic in `(image, spec, seed)`.
pub fn perturb(image: &SyntheticImage, spec: &PerturbationSpec, seed: u64) -> Result<SyntheticImage> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut out = image.clone();
    let n = image.len();
    let s = spec.strength;
    match spec.kind {
        PerturbationKind::PatchMask => {
            let count = ((s * n as f64).round() as usize).min(n);
            let mut order: Vec<usize> = (0..n).collect();
            let (chosen, _) = order.partial_shuffle(&mut rng, count);
            for &i in chosen.iter() {
                out.mask_index(i);
            }
        }
        PerturbationKind::ZoomCrop => {
            if s == 0.0 {
                for i in 0..n {
                    out.mask_index(i);
                }
            } else {
                let shapes = zoom_crop_shapes(image.width, image.height, s);
                let &(h, w) = shapes.choose(&mut rng).expect("a full-grid rectangle always qualifies");
                let top = rng.gen_range(0..=image.height - h);
                let left = rng.gen_range(0..=image.width - w);
                for r in 0..image.height {
                    for c in 0..image.width {
                        let inside = (top..top + h).contains(&r) && (left..left + w).contains(&c);
                        if !inside {
                            out.mask_index(image.index(r, c));
                        }
                    }
                }
            }
        }
        PerturbationKind::NoiseJitter => {
            for v in out.noise.iter_mut() {
                if rng.gen::<f64>() < s {
                    *v = rng.gen_range(0..image.alphabet);
                }
            }
        }
        PerturbationKind::TransposeAnalog => {
            if s > 0.0 {
                out.noise.reverse();
            }
        }
        PerturbationKind::ValueOffset => {
            let c = image.alphabet as usize;
            let offset = ((s * (c - 1) as f64).round() as usize).max(usize::from(s > 0.0));
            for v in out.noise.iter_mut() {
                *v = ((*v as usize + offset) % c) as u8;
            }
        }
        PerturbationKind::SwapNoise => {
            let pairs = (s * n as f64 / 2.0).round() as usize;
            for _ in 0..pairs {
                let a = rng.gen_range(0..n);
                let b = rng.gen_range(0..n);
                out.noise.swap(a, b);
            }
        }
    }
    Ok(out)
}

/// 1 if the rollout ends with the gold answer token, else 0.
pub fn reward(tokens: &[usize], episode: &Episode) -> f64 {
    match tokens.last() {
        Some(&last) if last == episode.gold_answer => 1.0,
        _ => 0.0,
    }
}

/// Ground-truth perception roles: true exactly at `READ v` value slots that
/// refer to a query-relevant cell.
pub fn oracle_perception_labels(tokens: &[usize], episode: &Episode) -> Vec<bool> {
    let vocab = &episode.vocab;
    let relevant = episode.query.relevant_count(episode.image.width);
    let mut reads = 0usize;
    let mut prev: Option<Token> = None;
    tokens
        .iter()
        .map(|&t| {
            let token = vocab.token(t);
            let label = matches!(token, Some(Token::Value(_)))
                && prev == Some(Token::Read)
                && reads <= relevant;
            if token == Some(Token::Read) {
                reads += 1;
            }
            prev = token;
            label
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(width: usize, height: usize, cells: &[u8]) -> SyntheticImage {
        SyntheticImage::new(width, height, 4, cells.to_vec(), vec![0; cells.len()]).unwrap()
    }

    #[test]
    fn episode_is_deterministic() {
        let config = EnvConfig {
            width: 2,
            height: 2,
            mix: QueryMix { cell_lookup: 1.0, row_sum: 0.0, count_equal: 0.0 },
            ..EnvConfig::default()
        };
        let a = generate_episode(7, &config).unwrap();
        let b = generate_episode(7, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.query.kind(), QueryKind::CellLookup);
    }

    #[test]
    fn row_sum_gold_answer() {
        let config = EnvConfig {
            mix: QueryMix { cell_lookup: 0.0, row_sum: 1.0, count_equal: 0.0 },
            ..EnvConfig::default()
        };
        for seed in 0..50 {
            let ep = generate_episode(seed, &config).unwrap();
            let r = ep.query.row();
            let sum: usize = (0..5).map(|c| ep.image.cell(r, c).unwrap() as usize).sum();
            assert_eq!(ep.gold_answer, ep.vocab.id(Token::Answer(sum)));
        }
    }

    #[test]
    fn config_errors() {
        let mut config = EnvConfig { width: 1, ..EnvConfig::default() };
        assert!(generate_episode(0, &config).is_err());
        config.width = 5;
        config.alphabet = 3;
        assert!(generate_episode(0, &config).is_err());
        config.alphabet = 4;
        config.mix = QueryMix { cell_lookup: 0.0, row_sum: 0.0, count_equal: 0.0 };
        assert!(generate_episode(0, &config).is_err());
    }

    #[test]
    fn patch_mask_counts() {
        let ep = generate_episode(3, &EnvConfig::default()).unwrap();
        let spec = PerturbationSpec::new(PerturbationKind::PatchMask, 0.0).unwrap();
        assert_eq!(perturb(&ep.image, &spec, 1).unwrap(), ep.image);
        let spec = PerturbationSpec::new(PerturbationKind::PatchMask, 0.8).unwrap();
        let out = perturb(&ep.image, &spec, 1).unwrap();
        assert_eq!(out.masked_count(), 20);
        for (i, &m) in out.mask_flags().iter().enumerate() {
            assert_eq!(m, out.raw_cells()[i] == MASK);
        }
    }

    #[test]
    fn zoom_crop_keeps_eight_cells() {
        assert_eq!(zoom_crop_shapes(5, 5, 0.3), vec![(2, 4), (4, 2)]);
        let ep = generate_episode(3, &EnvConfig::default()).unwrap();
        let spec = PerturbationSpec::new(PerturbationKind::ZoomCrop, 0.3).unwrap();
        for seed in 0..20 {
            let out = perturb(&ep.image, &spec, seed).unwrap();
            assert_eq!(out.len() - out.masked_count(), 8);
        }
    }

    #[test]
    fn strength_out_of_range() {
        assert!(PerturbationSpec::new(PerturbationKind::PatchMask, 1.5).is_err());
        let bad = PerturbationSpec { kind: PerturbationKind::NoiseJitter, strength: -0.1 };
        let ep = generate_episode(0, &EnvConfig::default()).unwrap();
        assert!(perturb(&ep.image, &bad, 0).is_err());
    }

    #[test]
    fn reward_cases() {
        let image = grid(2, 2, &[3, 0, 1, 2]);
        let ep = Episode::new(image, Query::CellLookup { row: 0, col: 0 }, 0).unwrap();
        let v = ep.vocab;
        assert_eq!(reward(&v.parse("READ 3 ANS 3").unwrap(), &ep), 1.0);
        assert_eq!(reward(&v.parse("READ 3 ANS 2").unwrap(), &ep), 0.0);
        assert_eq!(reward(&v.parse("READ 3 READ 3 READ").unwrap(), &ep), 0.0);
        assert_eq!(reward(&[], &ep), 0.0);
    }

    #[test]
    fn labels_row_sum_transcript() {
        let image = grid(2, 2, &[3, 4 % 4, 1, 2]);
        let ep = Episode::new(image, Query::RowSum { row: 0 }, 0).unwrap();
        let v = ep.vocab;
        let toks = v.parse("READ 3 READ 0 SUM 3 ANS 3").unwrap();
        let labels = oracle_perception_labels(&toks, &ep);
        assert_eq!(labels, vec![false, true, false, true, false, false, false, false]);
        assert_eq!(labels, oracle_perception_labels(&toks, &ep));
        let none = v.parse("SUM 3 ANS 3").unwrap();
        assert!(oracle_perception_labels(&none, &ep).iter().all(|&l| !l));
    }

    #[test]
    fn extra_reads_beyond_relevant_cells_are_not_perception() {
        let image = grid(2, 2, &[1, 2, 3, 0]);
        let ep = Episode::new(image, Query::CellLookup { row: 1, col: 0 }, 0).unwrap();
        let toks = ep.vocab.parse("READ 3 READ 3 ANS 3").unwrap();
        assert_eq!(oracle_perception_labels(&toks, &ep), vec![false, true, false, false, false, false]);
    }

    #[test]
    fn vocab_roundtrip() {
        let v = Vocab::for_grid(5, 4);
        assert_eq!(v.size(), 4 + 4 + 16);
        for id in 0..v.size() {
            assert_eq!(v.id(v.token(id).unwrap()), id);
        }
        assert!(v.token(v.size()).is_none());
        let toks = v.parse("READ 3 READ 1 ANS 4").unwrap();
        assert_eq!(v.render(&toks), "READ v3 READ v1 ANS 4");
        assert_eq!(v.parse(&v.render(&toks)).unwrap(), toks);
    }
}
