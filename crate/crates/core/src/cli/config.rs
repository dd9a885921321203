//! Run configuration: a TOML file whose keys may be written as sections or
//! dotted `section.key = value` lines. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalSettings;
use crate::index::RetrievalMode;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Exact,
    TwoPhase,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Exact => "exact",
            Mode::TwoPhase => "two-phase",
        }
    }
}

impl From<Mode> for RetrievalMode {
    fn from(mode: Mode) -> Self {
        match mode {
            Mode::Exact => RetrievalMode::Exact,
            Mode::TwoPhase => RetrievalMode::TwoPhase,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Feature stack widths after the input; the last one is the feature
    /// dimension fed to both heads. Empty means raw inputs go to the heads.
    pub hidden: Vec<usize>,
    pub code_length: usize,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: vec![32],
            code_length: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub mode: Mode,
    pub radius: usize,
    /// Results per query; 0 returns the whole database.
    pub k: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        RetrievalSection {
            mode: Mode::Exact,
            radius: 2,
            k: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub multi_label_prob: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub num_queries: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            n: 2000,
            d: 16,
            c: 4,
            multi_label_prob: 0.0,
            noise_sigma: 1.0,
            seed: 0,
            num_queries: 200,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub database: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub codes: Option<PathBuf>,
    pub rankings: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub retrieval: RetrievalSection,
    pub eval: EvalSettings,
    pub synth: SynthSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.model.code_length == 0 || self.model.code_length > u16::MAX as usize {
            return fail(format!("model.code_length out of range: {}", self.model.code_length));
        }
        if self.model.hidden.contains(&0) {
            return fail("model.hidden entries must be positive".into());
        }
        self.train.validate()?;
        if self.retrieval.radius > self.model.code_length {
            return fail(format!(
                "retrieval.radius {} exceeds model.code_length {}",
                self.retrieval.radius, self.model.code_length
            ));
        }
        if self.eval.radius > self.model.code_length {
            return fail(format!(
                "eval.radius {} exceeds model.code_length {}",
                self.eval.radius, self.model.code_length
            ));
        }
        if self.eval.truncation == Some(0) {
            return fail("eval.truncation must be positive when set".into());
        }
        let s = &self.synth;
        if s.c < 2 || s.d < 2 || s.n < s.c {
            return fail(format!("synth sizes invalid: n={}, d={}, c={}", s.n, s.d, s.c));
        }
        if !(0.0..=1.0).contains(&s.multi_label_prob) {
            return fail(format!("synth.multi_label_prob must lie in [0, 1], got {}", s.multi_label_prob));
        }
        if !(s.noise_sigma >= 0.0 && s.noise_sigma.is_finite()) {
            return fail(format!("synth.noise_sigma must be >= 0, got {}", s.noise_sigma));
        }
        Ok(())
    }
}
