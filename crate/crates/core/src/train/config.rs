//! Training configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::DEFAULT_ALPHA;

/// Token-level or chunk-level sparsity term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sparsifier {
    Cs,
    L1,
    Ent,
    None,
}

/// Objective settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub al: bool,
    #[serde(default = "default_lambda_al")]
    pub lambda_al: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub sparsifier: Sparsifier,
    /// Initial sparsifier coefficient.
    #[serde(default = "default_lambda0")]
    pub lambda0: f64,
    /// Adaptive coefficient; when false `λ` stays at `lambda0`.
    #[serde(default = "default_true")]
    pub adaptive: bool,
    pub n_st: usize,
    pub n_adj: usize,
    #[serde(default = "default_gamma_min")]
    pub gamma_min: f64,
    /// Chunk length of the chunk sparsification loss.
    #[serde(default = "default_chunk")]
    pub chunk_len: usize,
    #[serde(default)]
    pub balance: bool,
    #[serde(default = "default_lambda_balance")]
    pub lambda_balance: f64,
}

fn default_lambda_al() -> f64 {
    2e-3
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_lambda0() -> f64 {
    5e-2
}
fn default_true() -> bool {
    true
}
fn default_gamma_min() -> f64 {
    1.025
}
fn default_chunk() -> usize {
    8
}
fn default_lambda_balance() -> f64 {
    1e-2
}

/// Optimizer and learning-rate schedule (warmup, constant, linear decay).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup: usize,
    pub stable: usize,
    pub decay: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub clip: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_wd() -> f64 {
    0.1
}
fn default_clip() -> f64 {
    1.0
}

/// Where training text comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// A file read as raw bytes.
    Path(PathBuf),
    /// The built-in synthetic corpus.
    Toy { bytes: usize, seed: u64 },
}

/// Tokenizer selector; only byte-level exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    Byte,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: CorpusSource,
    #[serde(default = "default_tokenizer")]
    pub tokenizer: Tokenizer,
    /// Fraction of the stream held out for evaluation.
    #[serde(default = "default_heldout")]
    pub heldout_fraction: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub steps: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Zero saves only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_tokenizer() -> Tokenizer {
    Tokenizer::Byte
}
fn default_heldout() -> f64 {
    0.1
}
fn default_log_every() -> usize {
    10
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.objective;
        let d = &self.data;
        let p = &self.optim;
        let positive = [
            ("objective.n_adj", o.n_adj),
            ("objective.chunk_len", o.chunk_len),
            ("data.batch_size", d.batch_size),
            ("data.seq_len", d.seq_len),
            ("data.steps", d.steps),
            ("data.log_every", d.log_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if d.seq_len > self.model.context {
            return Err(Error::Config(format!("seq_len {} exceeds context {}", d.seq_len, self.model.context)));
        }
        if d.seq_len % o.chunk_len != 0 {
            return Err(Error::Config(format!("seq_len {} is not a multiple of chunk_len {}", d.seq_len, o.chunk_len)));
        }
        if self.model.vocab_size < 256 {
            return Err(Error::Config("byte tokenization needs vocab_size >= 256".into()));
        }
        let nonneg = [("lambda_al", o.lambda_al), ("lambda0", o.lambda0), ("lambda_balance", o.lambda_balance)];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("objective.{name} = {v} must be finite and non-negative")));
        }
        if !(o.alpha > 0.0) || !(o.gamma_min >= 1.0) {
            return Err(Error::Config("alpha must be positive and gamma_min at least 1".into()));
        }
        if !(p.lr > 0.0) || !(0.0..1.0).contains(&p.beta1) || !(0.0..1.0).contains(&p.beta2) {
            return Err(Error::Config("lr must be positive and betas in [0, 1)".into()));
        }
        if !(p.weight_decay >= 0.0) || !(p.clip > 0.0) {
            return Err(Error::Config("weight_decay must be non-negative and clip positive".into()));
        }
        if !(0.0..1.0).contains(&d.heldout_fraction) {
            return Err(Error::Config("heldout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Applies an ablation arm to a copy of this config.
    pub fn with_arm(&self, arm: &AblationArm) -> Self {
        let mut c = self.clone();
        c.objective.al = arm.kind.al;
        c.objective.sparsifier = arm.kind.sparsifier;
        c.objective.balance = arm.kind.balance;
        if let Some(l) = arm.lambda0 {
            c.objective.lambda0 = l;
        }
        c
    }
}

/// Objective combination of one ablation arm, written like `al+cs` or
/// `l1+lb`; `null` is the plain language-modeling objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ObjectiveKind {
    pub al: bool,
    pub sparsifier: Sparsifier,
    pub balance: bool,
}

impl ObjectiveKind {
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.al {
            parts.push("al");
        }
        match self.sparsifier {
            Sparsifier::Cs => parts.push("cs"),
            Sparsifier::L1 => parts.push("l1"),
            Sparsifier::Ent => parts.push("ent"),
            Sparsifier::None => {}
        }
        if self.balance {
            parts.push("lb");
        }
        if parts.is_empty() {
            "null".into()
        } else {
            parts.join("+")
        }
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut kind = ObjectiveKind { al: false, sparsifier: Sparsifier::None, balance: false };
        let bad = || Error::Config(format!("unknown objective kind {s:?}"));
        if s.trim().eq_ignore_ascii_case("null") {
            return Ok(kind);
        }
        for part in s.split('+').map(|p| p.trim().to_ascii_lowercase()) {
            match part.as_str() {
                "al" if !kind.al => kind.al = true,
                "lb" if !kind.balance => kind.balance = true,
                "cs" | "l1" | "ent" if kind.sparsifier == Sparsifier::None => {
                    kind.sparsifier = match part.as_str() {
                        "cs" => Sparsifier::Cs,
                        "l1" => Sparsifier::L1,
                        _ => Sparsifier::Ent,
                    }
                }
                _ => return Err(bad()),
            }
        }
        Ok(kind)
    }
}

/// One arm of an ablation matrix: `kind[@lambda0]`, e.g. `al+cs@0.05`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationArm {
    pub kind: ObjectiveKind,
    pub lambda0: Option<f64>,
}

impl FromStr for AblationArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, lambda0) = match s.split_once('@') {
            Some((k, l)) => {
                let v: f64 = l.trim().parse().map_err(|_| Error::Config(format!("bad coefficient in {s:?}")))?;
                (k, Some(v))
            }
            None => (s, None),
        };
        Ok(AblationArm { kind: kind.parse()?, lambda0 })
    }
}

/// Parses a comma-separated ablation matrix.
pub fn parse_matrix(s: &str) -> Result<Vec<AblationArm>> {
    let arms: Vec<AblationArm> =
        s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    if arms.is_empty() {
        return Err(Error::Config("empty ablation matrix".into()));
    }
    Ok(arms)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const EXAMPLE: &str = r#"
seed = 3

[model]
vocab_size = 256
context = 16
n_layers = 1
n_heads = 2

[model.ffn]
d_h = 16
d_e = 4
n_experts = 8
n_shared = 0
router = "relu_rmsnorm"
expert = "nongated_swish"

[objective]
al = true
sparsifier = "cs"
n_st = 10
n_adj = 5

[optim]
lr = 0.01
warmup = 2
stable = 4
decay = 4

[data]
corpus = { toy = { bytes = 4000, seed = 1 } }
batch_size = 2
seq_len = 16
steps = 10
"#;

    #[test]
    fn parses_example_with_defaults() {
        let c = TrainConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(c.objective.lambda_al, 2e-3);
        assert_eq!(c.objective.lambda0, 5e-2);
        assert_eq!(c.objective.gamma_min, 1.025);
        assert_eq!(c.objective.chunk_len, 8);
        assert_eq!(c.optim.beta2, 0.95);
        assert_eq!(c.optim.weight_decay, 0.1);
        assert_eq!(TrainConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = EXAMPLE.replace("seed = 3", "seed = 3\nlearning_rate = 1.0");
        assert!(matches!(TrainConfig::from_toml(&text), Err(Error::Config(_))));
        let text = EXAMPLE.replace("al = true", "al = true\nbeta = 2");
        assert!(TrainConfig::from_toml(&text).is_err());
    }

    #[test]
    fn invalid_values_are_errors() {
        assert!(TrainConfig::from_toml(&EXAMPLE.replace("steps = 10", "steps = 0")).is_err());
        assert!(TrainConfig::from_toml(&EXAMPLE.replace("seq_len = 16", "seq_len = 12")).is_err());
        assert!(TrainConfig::from_toml(&EXAMPLE.replace("\"cs\"", "\"l2\"")).is_err());
        assert!(TrainConfig::from_toml(&EXAMPLE.replace("vocab_size = 256", "vocab_size = 100")).is_err());
    }

    #[test]
    fn objective_kinds_parse_and_print() {
        for s in ["null", "al", "cs", "al+cs", "al+l1", "al+ent", "l1", "ent", "cs+lb"] {
            assert_eq!(s.parse::<ObjectiveKind>().unwrap().name(), s);
        }
        assert!("cs+l1".parse::<ObjectiveKind>().is_err());
        assert!("al+al".parse::<ObjectiveKind>().is_err());
        let arms = parse_matrix("null, al+cs@0.1").unwrap();
        assert_eq!(arms[1].lambda0, Some(0.1));
        assert!(parse_matrix("").is_err());
        assert!(parse_matrix("cs@x").is_err());
    }
}
