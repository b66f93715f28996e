//! Run configuration: a TOML file, then `MEDREK_*` environment variables,
//! then command-line flags.

use std::path::{Path, PathBuf};

use medrek_core::dataset::{split_records, EditRecord, Split};
use medrek_core::diagnostics::DEFAULT_THRESHOLD;
use medrek_core::editor::EditorConfig;
use medrek_core::evaluation::{EvalConfig, FluencyConfig, RetrievalMode};
use medrek_core::lm::LmConfig;
use medrek_core::synthetic::SyntheticConfig;
use medrek_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::exit::{io, validation, CliResult};

/// Which records a stage reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitSel {
    Train,
    Valid,
    Test,
    #[default]
    All,
}

impl SplitSel {
    pub fn select(self, records: &[EditRecord]) -> Vec<EditRecord> {
        match self {
            SplitSel::Train => split_records(records, Split::Train),
            SplitSel::Valid => split_records(records, Split::Valid),
            SplitSel::Test => split_records(records, Split::Test),
            SplitSel::All => records.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub method: String,
    pub mode: RetrievalMode,
    pub split: SplitSel,
    pub skip_fluency: bool,
    pub fluency: FluencyConfig,
    /// Explicit batch sizes; the standard list filtered to the split size
    /// when absent.
    pub batch_sizes: Option<Vec<usize>>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self {
            method: d.method,
            mode: d.mode,
            split: SplitSel::All,
            skip_fluency: d.skip_fluency,
            fluency: d.fluency,
            batch_sizes: None,
        }
    }
}

impl EvalSection {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            method: self.method.clone(),
            mode: self.mode,
            fluency: self.fluency.clone(),
            skip_fluency: self.skip_fluency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    pub threshold: f64,
    pub batch_sizes: Option<Vec<usize>>,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            batch_sizes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Seeds data generation, LM and editor initialisation and shuffling.
    pub seed: u64,
    pub out: PathBuf,
    pub data: SyntheticConfig,
    pub lm: LmConfig,
    pub editor: EditorConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub diagnose: DiagnoseSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: SyntheticConfig::default(),
            lm: LmConfig::default(),
            editor: EditorConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            diagnose: DiagnoseSection::default(),
        }
    }
}

impl Config {
    /// Reads a TOML file, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io(format!("{}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|x| x == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| validation(format!("{}: {e}", path.display())))
    }

    /// Copies the run seed into every seeded component.
    pub fn propagate_seed(&mut self) {
        self.data.seed = self.seed;
        self.lm.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> CliResult<()> {
        let t = &self.train;
        if t.batch_size == 0 || t.epochs == 0 {
            return Err(validation("train.batch_size and train.epochs must be positive"));
        }
        if !t.lr.is_finite() || t.lr < 0.0 || t.temperature.is_nan() || t.temperature <= 0.0 {
            return Err(validation("train.lr must be non-negative and train.temperature positive"));
        }
        if t.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(validation("train.clip_norm must be positive"));
        }
        if self.lm.d_lm != self.editor.prompt.d_lm {
            return Err(validation(format!(
                "editor.prompt.d_lm ({}) must equal lm.d_lm ({})",
                self.editor.prompt.d_lm, self.lm.d_lm
            )));
        }
        if self.lm.batch_size == 0 || self.lm.max_epochs == 0 {
            return Err(validation("lm.batch_size and lm.max_epochs must be positive"));
        }
        if !(self.lm.loss_threshold.is_finite() && self.lm.loss_threshold > 0.0) {
            return Err(validation("lm.loss_threshold must be positive and finite"));
        }
        if let Some(b) = &self.eval.batch_sizes {
            if b.is_empty() || b.contains(&0) {
                return Err(validation("eval.batch_sizes must be non-empty and positive"));
            }
        }
        if !(-1.0..=1.0).contains(&self.diagnose.threshold) {
            return Err(validation("diagnose.threshold must lie in [-1, 1]"));
        }
        Ok(())
    }
}
