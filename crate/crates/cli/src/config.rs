use std::path::Path;

use marginmt::analysis::{DecodeConfig, SweepGrid};
use marginmt::corpus::{CorpusSpec, Task};
use marginmt::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub task: Task,
    pub n_pairs: usize,
    pub len_range: (usize, usize),
    pub vocab_size: usize,
    pub hallucination_rate: f64,
    pub n_valid: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: Task::LexiconTranslate,
            n_pairs: 5000,
            len_range: (4, 16),
            vocab_size: 64,
            hallucination_rate: 0.1,
            n_valid: 200,
            n_test: 200,
        }
    }
}

impl DataConfig {
    pub fn spec(&self, seed: u64) -> CorpusSpec {
        CorpusSpec {
            task: self.task,
            n_pairs: self.n_pairs,
            len_range: self.len_range,
            vocab_size: self.vocab_size,
            hallucination_rate: self.hallucination_rate,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Pairs sampled for margin statistics.
    pub sample_size: usize,
    pub decode: DecodeConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { sample_size: 1000, decode: DecodeConfig::default() }
    }
}

/// Everything a run needs, loaded from one JSON file. Missing sections and
/// fields take their defaults; unknown fields are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    pub sweep: SweepGrid,
}

impl LabConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.is_file() {
            return Err(CliError::Usage(format!("{}: config file not found", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))
    }
}
