//! Run configuration: one TOML file drives every pipeline stage.
//!
//! Unknown keys are rejected everywhere so a typo'd hyperparameter fails
//! loudly instead of silently training with a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{default_rules, EdgeKeyRule};
use crate::ingest::{validate_schema, ColumnSpec};
use crate::model::ModelConfig;
use crate::preprocess::PreprocessConfig;
use crate::synth::{schema_for, SynthConfig};
use crate::train::TrainConfig;

/// Graph-construction section: shared-key edge rules plus component pruning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub rules: Vec<EdgeKeyRule>,
    /// Connected components smaller than this lose their edges; 1 keeps
    /// everything (isolated nodes are never dropped, only disconnected).
    pub min_component_size: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            rules: default_rules(),
            min_component_size: 1,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rules.is_empty() {
            return Err(Error::ConfigError(
                "graph.rules must contain at least one edge rule".into(),
            ));
        }
        for rule in &self.rules {
            rule.validate()?;
        }
        if self.min_component_size == 0 {
            return Err(Error::ConfigError(
                "graph.min_component_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Artifact locations. Relative paths resolve against `out_dir`, so
/// `--out` moves the whole artifact tree; absolute paths are taken as-is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    pub transactions: PathBuf,
    /// Empty string = no identity table.
    pub identity: PathBuf,
    pub table: PathBuf,
    pub features: PathBuf,
    pub graph: PathBuf,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub metrics: PathBuf,
    pub scores: PathBuf,
    pub sweep: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("out"),
            transactions: PathBuf::from("transactions.csv"),
            identity: PathBuf::from("identity.csv"),
            table: PathBuf::from("table.csv"),
            features: PathBuf::from("features.bin"),
            graph: PathBuf::from("graph.bin"),
            checkpoint: PathBuf::from("model.ckpt"),
            history: PathBuf::from("history.log"),
            metrics: PathBuf::from("metrics.txt"),
            scores: PathBuf::from("scores.csv"),
            sweep: PathBuf::from("sweep.tsv"),
        }
    }
}

impl PathsConfig {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    pub fn transactions_path(&self) -> PathBuf {
        self.resolve(&self.transactions)
    }
    pub fn identity_path(&self) -> Option<PathBuf> {
        if self.identity.as_os_str().is_empty() {
            None
        } else {
            Some(self.resolve(&self.identity))
        }
    }
    pub fn table_path(&self) -> PathBuf {
        self.resolve(&self.table)
    }
    pub fn features_path(&self) -> PathBuf {
        self.resolve(&self.features)
    }
    pub fn graph_path(&self) -> PathBuf {
        self.resolve(&self.graph)
    }
    pub fn checkpoint_path(&self) -> PathBuf {
        self.resolve(&self.checkpoint)
    }
    pub fn history_path(&self) -> PathBuf {
        self.resolve(&self.history)
    }
    pub fn metrics_path(&self) -> PathBuf {
        self.resolve(&self.metrics)
    }
    pub fn scores_path(&self) -> PathBuf {
        self.resolve(&self.scores)
    }
    pub fn sweep_path(&self) -> PathBuf {
        self.resolve(&self.sweep)
    }
}

/// Everything a run needs, in one strictly-parsed file. Module sections
/// mirror the per-module config structs exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed. A top-level `seed` key (or `--seed`) propagates to the
    /// synth and train seeds unless those sections pin their own.
    pub seed: u64,
    /// Input schema for `ingest`. Empty = derive from the [synth] section,
    /// which is correct whenever the data came from `riskgraph synth`.
    pub schema: Vec<ColumnSpec>,
    pub paths: PathsConfig,
    pub preprocess: PreprocessConfig,
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            schema: Vec::new(),
            paths: PathsConfig::default(),
            preprocess: PreprocessConfig::default(),
            graph: GraphConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// The schema used by ingest: explicit if given, else the generator's.
    pub fn effective_schema(&self) -> Vec<ColumnSpec> {
        if self.schema.is_empty() {
            schema_for(&self.synth)
        } else {
            self.schema.clone()
        }
    }

    /// Force one seed everywhere (the `--seed` flag).
    pub fn apply_global_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if !self.schema.is_empty() {
            validate_schema(&self.schema)?;
        }
        self.preprocess.validate()?;
        self.graph.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("RunConfig serializes to TOML")
    }
}

/// Parse and validate a config document. Unknown keys anywhere are a
/// ConfigError that names the offending key.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg: RunConfig =
        toml::from_str(text).map_err(|e| Error::ConfigError(e.to_string()))?;
    // A top-level seed overrides module seeds, except where a section set
    // its own explicitly — detectable only from the raw document, since
    // serde has already filled defaults by now.
    let doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::ConfigError(e.to_string()))?;
    if doc.contains_key("seed") {
        let pins_seed = |section: &str| {
            doc.get(section)
                .and_then(|v| v.as_table())
                .is_some_and(|t| t.contains_key("seed"))
        };
        if !pins_seed("synth") {
            cfg.synth.seed = cfg.seed;
        }
        if !pins_seed("train") {
            cfg.train.seed = cfg.seed;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::ConfigError(msg) => {
            Error::ConfigError(format!("{}: {msg}", path.display()))
        }
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::ColumnKind;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let parsed = parse_config(&cfg.to_toml()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn empty_document_is_all_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.train.seed, 42);
    }

    #[test]
    fn unknown_key_is_named_in_the_error() {
        let err = parse_config("[train]\nlearning_rate_typo = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::ConfigError(_)), "{msg}");
        assert!(msg.contains("learning_rate_typo"), "{msg}");

        let err = parse_config("not_a_section = 1\n").unwrap_err();
        assert!(err.to_string().contains("not_a_section"));
    }

    #[test]
    fn global_seed_propagates_unless_pinned() {
        let cfg = parse_config("seed = 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.synth.seed, 7);
        assert_eq!(cfg.train.seed, 7);

        let cfg = parse_config("seed = 7\n[train]\nseed = 9\n").unwrap();
        assert_eq!(cfg.synth.seed, 7);
        assert_eq!(cfg.train.seed, 9);

        // No top-level seed: module defaults stay untouched.
        let cfg = parse_config("[synth]\nfraud_rate = 0.05\n").unwrap();
        assert_eq!(cfg.synth.seed, 42);
    }

    #[test]
    fn apply_global_seed_forces_all_seeds() {
        let mut cfg = RunConfig::default();
        cfg.apply_global_seed(123);
        assert_eq!(cfg.seed, 123);
        assert_eq!(cfg.synth.seed, 123);
        assert_eq!(cfg.train.seed, 123);
    }

    #[test]
    fn explicit_schema_wins_over_derived() {
        let text = "\
[[schema]]
name = \"TransactionID\"
kind = \"identifier\"

[[schema]]
name = \"isFraud\"
kind = \"label\"

[[schema]]
name = \"TransactionAmt\"
kind = \"numeric\"
";
        let cfg = parse_config(text).unwrap();
        let schema = cfg.effective_schema();
        assert_eq!(schema.len(), 3);
        assert_eq!(schema[2].name, "TransactionAmt");
        assert_eq!(schema[2].kind, ColumnKind::Numeric);

        // Default config derives the generator schema instead.
        let derived = RunConfig::default().effective_schema();
        assert!(derived.iter().any(|c| c.name == "DeviceInfo"));
    }

    #[test]
    fn section_validation_failures_surface() {
        // hidden_dim not divisible by n_heads.
        let err = parse_config("[model]\nhidden_dim = 10\nn_heads = 4\n").unwrap_err();
        assert!(matches!(err, Error::ConfigError(_)), "{err}");

        let err = parse_config("[graph]\nrules = []\n").unwrap_err();
        assert!(err.to_string().contains("at least one edge rule"), "{err}");
    }

    #[test]
    fn paths_resolve_against_out_dir() {
        let mut cfg = RunConfig::default();
        cfg.paths.out_dir = PathBuf::from("/tmp/run1");
        assert_eq!(
            cfg.paths.checkpoint_path(),
            PathBuf::from("/tmp/run1/model.ckpt")
        );
        cfg.paths.checkpoint = PathBuf::from("/abs/model.ckpt");
        assert_eq!(
            cfg.paths.checkpoint_path(),
            PathBuf::from("/abs/model.ckpt")
        );
        assert!(cfg.paths.identity_path().is_some());
        cfg.paths.identity = PathBuf::new();
        assert_eq!(cfg.paths.identity_path(), None);
    }

    #[test]
    fn custom_rules_parse() {
        let text = "\
[[graph.rules]]
name = \"same_device\"
key_columns = [\"DeviceInfo\"]
clique_max = 5
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.graph.rules.len(), 1);
        assert_eq!(cfg.graph.rules[0].name, "same_device");
        assert_eq!(cfg.graph.rules[0].clique_max, 5);
        assert_eq!(cfg.graph.rules[0].max_group_size, 100);
    }
}
