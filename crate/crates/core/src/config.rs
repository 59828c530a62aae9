//! Flat `section.key = value` run configuration and run manifests.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors. The
//! optional `profile = desk|large` key picks the base profile and is applied
//! before every other key, wherever it appears.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::cpl::{CplNorm, CplSelection};
use crate::env::{EnvConfig, PerturbationKind, PerturbationSpec};
use crate::error::{Error, Result};
use crate::trainer::{OptimizerKind, TrainConfig};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 1000, seed: 0x5eed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::key(key, format!("`{value}` is not a valid {}", std::any::type_name::<T>())))
}

fn parse_menu(key: &str, value: &str) -> Result<Vec<PerturbationSpec>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (name, strength) = item
                .split_once(':')
                .ok_or_else(|| Error::key(key, format!("`{item}` is not `kind:strength`")))?;
            let kind = PerturbationKind::from_name(name.trim())
                .ok_or_else(|| Error::key(key, format!("unknown perturbation `{}`", name.trim())))?;
            let strength: f64 = parse_num(key, strength.trim())?;
            PerturbationSpec::new(kind, strength).map_err(|e| Error::key(key, e.to_string()))
        })
        .collect()
}

fn format_menu(menu: &[PerturbationSpec]) -> String {
    menu.iter()
        .map(|s| format!("{}:{}", s.kind.name(), s.strength))
        .collect::<Vec<_>>()
        .join(", ")
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let train = match profile {
            Profile::Desk => TrainConfig::default(),
            Profile::Large => TrainConfig::large_profile(),
        };
        Self { profile, env: EnvConfig::default(), train, eval: EvalConfig::default() }
    }

    /// Sets one key. Range checks happen in [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "profile" => {
                let p = match v {
                    "desk" => Profile::Desk,
                    "large" => Profile::Large,
                    _ => return Err(Error::key(key, format!("`{v}` is not desk|large"))),
                };
                if p != self.profile {
                    return Err(Error::key(key, "profile must be set before other keys"));
                }
            }
            "grid.width" => self.env.width = parse_num(key, v)?,
            "grid.height" => self.env.height = parse_num(key, v)?,
            "grid.alphabet" => self.env.alphabet = parse_num(key, v)?,
            "query.mix.cell_lookup" => self.env.mix.cell_lookup = parse_num(key, v)?,
            "query.mix.row_sum" => self.env.mix.row_sum = parse_num(key, v)?,
            "query.mix.count_equal" => self.env.mix.count_equal = parse_num(key, v)?,
            "perturb.remove" => self.env.remove = parse_menu(key, v)?,
            "perturb.preserve" => self.env.preserve = parse_menu(key, v)?,
            "train.group_size" => t.group_size = parse_num(key, v)?,
            "train.global_batch" => t.global_batch = parse_num(key, v)?,
            "train.dataset_size" => t.dataset_size = parse_num(key, v)?,
            "train.learning_rate" => t.learning_rate = parse_num(key, v)?,
            "train.epochs" => t.epochs = parse_num(key, v)?,
            "train.max_len" => t.max_len = parse_num(key, v)?,
            "train.seed" => t.seed = parse_num(key, v)?,
            "train.optimizer" => {
                t.optimizer = match v {
                    "sgd" => OptimizerKind::Sgd,
                    "adamw" => OptimizerKind::AdamW,
                    _ => return Err(Error::key(key, format!("`{v}` is not sgd|adamw"))),
                }
            }
            "train.weight_decay" => t.weight_decay = parse_num(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse_num(key, v)?,
            "objective.epsilon_clip" => t.epsilon_clip = parse_num(key, v)?,
            "objective.beta" => t.beta = parse_num(key, v)?,
            "cpl.tau" => t.cpl.tau = parse_num(key, v)?,
            "cpl.lambda" => t.cpl.lambda = parse_num(key, v)?,
            "cpl.k_ratio" => t.cpl.k_ratio = parse_num(key, v)?,
            "cpl.norm" => {
                t.cpl.norm = match v {
                    "tokens" => CplNorm::Tokens,
                    "selected" => CplNorm::Selected,
                    _ => return Err(Error::key(key, format!("`{v}` is not tokens|selected"))),
                }
            }
            "cpl.selection" => {
                t.cpl.selection = match v {
                    "topk" => CplSelection::TopK,
                    "all" => CplSelection::AllTokens,
                    _ => return Err(Error::key(key, format!("`{v}` is not topk|all"))),
                }
            }
            "prior.format" => t.prior.format = parse_num(key, v)?,
            "prior.arithmetic" => t.prior.arithmetic = parse_num(key, v)?,
            "eval.episodes" => self.eval.episodes = parse_num(key, v)?,
            "eval.seed" => self.eval.seed = parse_num(key, v)?,
            _ => return Err(Error::key(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        if !(self.train.prior.format.is_finite() && self.train.prior.arithmetic.is_finite()) {
            return Err(Error::key("prior.format", "prior weights must be finite"));
        }
        if self.eval.episodes == 0 {
            return Err(Error::key("eval.episodes", "must be ≥ 1"));
        }
        Ok(())
    }

    /// Parses config text, then applies `overrides` in order.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        pairs.extend(overrides.iter().cloned());
        let profile = match pairs.iter().rev().find(|(k, _)| k == "profile").map(|(_, v)| v.as_str()) {
            None | Some("desk") => Profile::Desk,
            Some("large") => Profile::Large,
            Some(other) => return Err(Error::key("profile", format!("`{other}` is not desk|large"))),
        };
        let mut cfg = Self::for_profile(profile);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let lines = [
            ("profile", match self.profile {
                Profile::Desk => "desk".to_string(),
                Profile::Large => "large".to_string(),
            }),
            ("grid.width", self.env.width.to_string()),
            ("grid.height", self.env.height.to_string()),
            ("grid.alphabet", self.env.alphabet.to_string()),
            ("query.mix.cell_lookup", self.env.mix.cell_lookup.to_string()),
            ("query.mix.row_sum", self.env.mix.row_sum.to_string()),
            ("query.mix.count_equal", self.env.mix.count_equal.to_string()),
            ("perturb.remove", format_menu(&self.env.remove)),
            ("perturb.preserve", format_menu(&self.env.preserve)),
            ("train.group_size", t.group_size.to_string()),
            ("train.global_batch", t.global_batch.to_string()),
            ("train.dataset_size", t.dataset_size.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.max_len", t.max_len.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.optimizer", match t.optimizer {
                OptimizerKind::Sgd => "sgd".to_string(),
                OptimizerKind::AdamW => "adamw".to_string(),
            }),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("objective.epsilon_clip", t.epsilon_clip.to_string()),
            ("objective.beta", t.beta.to_string()),
            ("cpl.tau", t.cpl.tau.to_string()),
            ("cpl.lambda", t.cpl.lambda.to_string()),
            ("cpl.k_ratio", t.cpl.k_ratio.to_string()),
            ("cpl.norm", match t.cpl.norm {
                CplNorm::Tokens => "tokens".to_string(),
                CplNorm::Selected => "selected".to_string(),
            }),
            ("cpl.selection", match t.cpl.selection {
                CplSelection::TopK => "topk".to_string(),
                CplSelection::AllTokens => "all".to_string(),
            }),
            ("prior.format", t.prior.format.to_string()),
            ("prior.arithmetic", t.prior.arithmetic.to_string()),
            ("eval.episodes", self.eval.episodes.to_string()),
            ("eval.seed", self.eval.seed.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// `sha256("blob <len>\0" ‖ content)`, as git hashes objects.
pub fn content_hash(content: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config: RunConfig,
    pub output_dir: PathBuf,
    pub artifact_version: String,
}

const MANIFEST_HEADER: &str = "# cppo run manifest";

impl RunManifest {
    pub fn new(config: RunConfig, output_dir: impl Into<PathBuf>) -> Self {
        Self { config, output_dir: output_dir.into(), artifact_version: ARTIFACT_VERSION.to_string() }
    }

    pub fn hash(&self) -> String {
        content_hash(&self.config.to_text())
    }

    pub fn to_text(&self) -> String {
        let body = self.config.to_text();
        format!(
            "{MANIFEST_HEADER}\n# artifact.version = {}\n# output.dir = {}\n# config.hash = {}\n{body}",
            self.artifact_version,
            self.output_dir.display(),
            content_hash(&body)
        )
    }

    /// Parses a manifest and checks its recorded hash.
    pub fn parse(text: &str) -> Result<Self> {
        let meta = |key: &str| {
            text.lines()
                .filter_map(|l| l.strip_prefix("# "))
                .filter_map(|l| l.split_once(" = "))
                .find(|(k, _)| *k == key)
                .map(|(_, v)| v.to_string())
                .ok_or_else(|| Error::Config(format!("manifest lacks `{key}`")))
        };
        let config = RunConfig::parse(text, &[])?;
        let manifest = Self { config, output_dir: PathBuf::from(meta("output.dir")?), artifact_version: meta("artifact.version")? };
        let recorded = meta("config.hash")?;
        if recorded != manifest.hash() {
            return Err(Error::Config(format!("manifest hash {recorded} does not match its contents")));
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
