//! Experiment configuration files and command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use outtask::encoder::EncoderConfig;
use outtask::eval::SigTest;
use outtask::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const OUT_ENV: &str = "OUTTASK_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Baseline,
    Itft,
    Mtl,
    Eval,
    SynthData,
    TokenizerTrain,
    Report,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Itft => "itft",
            Mode::Mtl => "mtl",
            Mode::Eval => "eval",
            Mode::SynthData => "synth-data",
            Mode::TokenizerTrain => "tokenizer-train",
            Mode::Report => "report",
        }
    }

    pub fn trains(self) -> bool {
        matches!(self, Mode::Baseline | Mode::Itft | Mode::Mtl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxType {
    Classification,
    Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: AuxType,
    pub train: PathBuf,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    /// Label count for classification TSVs; inferred when absent.
    #[serde(default)]
    pub num_classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    /// Dataset label used in comparison tables.
    pub name: String,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub high_oov_slots: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSpec {
    /// Existing tokenizer file; trained on the DST training texts when absent.
    pub path: Option<PathBuf>,
    pub vocab_size: usize,
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        TokenizerSpec {
            path: None,
            vocab_size: 1000,
        }
    }
}

/// Everything one invocation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub mode: Mode,
    pub out: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub data: DataSpec,
    pub aux: Vec<AuxSpec>,
    pub tokenizer: TokenizerSpec,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub significance: SigTest,
    /// Checkpoint to evaluate in `eval` mode.
    pub checkpoint: Option<PathBuf>,
    /// Inputs of `report` mode.
    pub baseline_run: Option<PathBuf>,
    pub runs: Vec<PathBuf>,
    /// Auxiliary training sets at least this large count as "large" in loss
    /// reduction curves.
    pub large_aux: usize,
    /// Synthetic corpus settings for `synth-data` mode.
    pub synth: SynthSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub dialogs: outtask::data::synth::DialogSynthSpec,
    pub span_qa: outtask::data::synth::SpanSynthSpec,
    pub classification: outtask::data::synth::ClassificationSynthSpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            mode: Mode::Baseline,
            out: None,
            seeds: DEFAULT_SEEDS.to_vec(),
            data: DataSpec {
                name: "synth".into(),
                ..Default::default()
            },
            aux: Vec::new(),
            tokenizer: TokenizerSpec::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            significance: SigTest::Permutation,
            checkpoint: None,
            baseline_run: None,
            runs: Vec::new(),
            large_aux: 10_000,
            synth: SynthSpec::default(),
        }
    }
}

/// Problems that make an experiment config unusable. Raised before any work starts.
#[derive(Debug, thiserror::Error)]
#[error("invalid experiment: {0}")]
pub struct UsageError(pub String);

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).context("parsing experiment config")
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Apply `key=value` overrides; dotted keys address nested tables and
    /// values use TOML syntax, falling back to a plain string.
    pub fn with_overrides(&self, overrides: &[String]) -> anyhow::Result<Self> {
        let mut doc: toml::Table = toml::Table::try_from(self)?;
        for o in overrides {
            let Some((key, raw)) = o.split_once('=') else {
                bail!(UsageError(format!("override `{o}` is not key=value")));
            };
            let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let parts: Vec<&str> = key.trim().split('.').collect();
            let mut table = &mut doc;
            for p in &parts[..parts.len() - 1] {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()))
                    .as_table_mut()
                    .ok_or_else(|| UsageError(format!("`{p}` in `{key}` is not a table")))?;
            }
            table.insert(parts[parts.len() - 1].to_string(), value);
        }
        let text = toml::to_string(&doc)?;
        Self::from_toml(&text).map_err(|e| UsageError(format!("after overrides: {e:#}")).into())
    }

    /// Output directory: the configured `out`, else `$OUTTASK_OUT/<mode>`, else
    /// `runs/<mode>`.
    pub fn out_dir(&self) -> PathBuf {
        if let Some(o) = &self.out {
            return o.clone();
        }
        let root = std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| "runs".into());
        root.join(self.mode.as_str())
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let mut problems = Vec::new();
        match self.mode {
            Mode::Itft | Mode::Mtl if self.aux.len() != 1 => problems.push(format!(
                "{} trains with exactly one auxiliary task at a time, {} given",
                self.mode.as_str(),
                self.aux.len()
            )),
            _ => {}
        }
        if self.mode.trains() {
            if self.seeds.is_empty() {
                problems.push("seed list is empty".into());
            }
            let mut sorted = self.seeds.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.seeds.len() {
                problems.push("seeds must be distinct".into());
            }
            for (what, p) in [("data.train", &self.data.train), ("data.dev", &self.data.dev)] {
                if p.is_none() {
                    problems.push(format!("{what} is required"));
                }
            }
            if let Err(e) = self.train.validate() {
                problems.push(e.to_string());
            }
            let e_mtl = if self.mode == Mode::Mtl { self.train.e_mtl } else { 0 };
            if self.mode == Mode::Mtl && e_mtl == 0 {
                problems.push("mtl needs train.e_mtl >= 1".into());
            }
        }
        match self.mode {
            Mode::Eval => {
                if self.checkpoint.is_none() {
                    problems.push("eval needs a checkpoint".into());
                }
                if self.data.test.is_none() && self.data.dev.is_none() {
                    problems.push("eval needs data.test or data.dev".into());
                }
            }
            Mode::Report => {
                if self.baseline_run.is_none() {
                    problems.push("report needs a baseline run directory".into());
                }
            }
            Mode::TokenizerTrain if self.data.train.is_none() && self.aux.is_empty() => {
                problems.push("tokenizer-train needs data.train or an auxiliary task".into());
            }
            _ => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(UsageError(problems.join("; ")))
        }
    }
}
