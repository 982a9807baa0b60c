//! Experiment configuration: one TOML file with `global`, `corpus`, `model`,
//! `train`, `eval` and `consistency` sections.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consistency::{ConsistencyRelation, RelationKind};
use crate::corpus::{CorpusSpec, Templates};
use crate::error::ConfigError;
use crate::eval::ProbeFraming;
use crate::model::ModelConfig;
use crate::rules::{rule_by_name, NumberRange, Problem, Rule, RuleId, StudentProfile};
use crate::seeds::{derive_seed, short_hash};
use crate::training::{TrainConfig, TrainingMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalSection {
    /// Replicate `r` runs with seed `seed + r`; every other seed is derived
    /// from that by label.
    pub seed: u64,
    pub replicates: usize,
    /// Threads used for corpus generation; results do not depend on it.
    pub workers: usize,
}

impl Default for GlobalSection {
    fn default() -> Self {
        Self { seed: 0, replicates: 5, workers: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_dialogues: usize,
    pub pretrain_dialogues: usize,
    pub heldout_dialogues: usize,
    pub turns_per_dialogue: usize,
    /// Rule name to weight.
    pub profile: BTreeMap<String, f64>,
    pub profile_id: String,
    pub max_abs: i64,
    pub require_divisible: bool,
    pub require_nonzero_b: bool,
    pub templates: Templates,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let spec = CorpusSpec::default();
        Self {
            n_dialogues: spec.n_dialogues,
            pretrain_dialogues: spec.n_dialogues,
            heldout_dialogues: 200,
            turns_per_dialogue: spec.turns_per_dialogue,
            profile: [("CORRECT", 0.4), ("M1", 0.2), ("M2", 0.2), ("M3", 0.2)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            profile_id: spec.profile_id,
            max_abs: spec.range.max_abs,
            require_divisible: spec.range.require_divisible,
            require_nonzero_b: spec.range.require_nonzero_b,
            templates: spec.templates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub context_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::default();
        Self { context_len: c.context_len, d_model: c.d_model, n_heads: c.n_heads, n_layers: c.n_layers }
    }
}

/// Per-regime replacements for the shared `[train]` values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverride {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
}

impl TrainOverride {
    fn is_set(&self, field: &str) -> bool {
        match field {
            "learning_rate" => self.learning_rate.is_some(),
            "beta1" => self.beta1.is_some(),
            "beta2" => self.beta2.is_some(),
            "eps" => self.eps.is_some(),
            "batch_size" => self.batch_size.is_some(),
            "epochs" => self.epochs.is_some(),
            "clip_norm" => self.clip_norm.is_some(),
            "warmup_steps" => self.warmup_steps.is_some(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub warmup_steps: usize,
    pub pretrain: TrainOverride,
    pub tutor: TrainOverride,
    pub student: TrainOverride,
    pub student_hal: TrainOverride,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: 1e-3,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            batch_size: t.batch_size,
            epochs: 20,
            clip_norm: t.clip_norm,
            warmup_steps: t.warmup_steps,
            pretrain: TrainOverride::default(),
            tutor: TrainOverride::default(),
            student: TrainOverride::default(),
            student_hal: TrainOverride::default(),
        }
    }
}

/// The pretraining run plus the three fine-tuning regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    Pretrain,
    Fine(TrainingMode),
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::Pretrain,
        Regime::Fine(TrainingMode::Tutor),
        Regime::Fine(TrainingMode::Student),
        Regime::Fine(TrainingMode::StudentHal),
    ];

    /// Name of the `[train.<key>]` table.
    pub fn key(self) -> &'static str {
        match self {
            Regime::Pretrain => "pretrain",
            Regime::Fine(TrainingMode::Tutor) => "tutor",
            Regime::Fine(TrainingMode::Student) => "student",
            Regime::Fine(TrainingMode::StudentHal) => "student_hal",
        }
    }
}

impl TrainSection {
    fn override_for(&self, r: Regime) -> &TrainOverride {
        match r {
            Regime::Pretrain => &self.pretrain,
            Regime::Fine(TrainingMode::Tutor) => &self.tutor,
            Regime::Fine(TrainingMode::Student) => &self.student,
            Regime::Fine(TrainingMode::StudentHal) => &self.student_hal,
        }
    }

    pub fn resolve(&self, r: Regime, shuffle_seed: u64) -> TrainConfig {
        let o = self.override_for(r);
        TrainConfig {
            learning_rate: o.learning_rate.unwrap_or(self.learning_rate),
            beta1: o.beta1.unwrap_or(self.beta1),
            beta2: o.beta2.unwrap_or(self.beta2),
            eps: o.eps.unwrap_or(self.eps),
            batch_size: o.batch_size.unwrap_or(self.batch_size),
            epochs: o.epochs.unwrap_or(self.epochs),
            clip_norm: o.clip_norm.unwrap_or(self.clip_norm),
            shuffle_seed,
            warmup_steps: o.warmup_steps.unwrap_or(self.warmup_steps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub probe_framing: ProbeFraming,
    /// Generated answers per misconception measurement.
    pub n_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { probe_framing: ProbeFraming::Correction, n_samples: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationName {
    Pointwise,
    Existential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencySection {
    pub relation: RelationName,
    pub rules: Vec<String>,
    pub correct: Vec<String>,
    pub max_abs: i64,
    pub require_divisible: bool,
    pub require_nonzero_b: bool,
}

impl Default for ConsistencySection {
    fn default() -> Self {
        let r = NumberRange::default();
        Self {
            relation: RelationName::Pointwise,
            rules: ["CORRECT", "M1", "M2", "M3"].map(String::from).to_vec(),
            correct: vec!["CORRECT".into()],
            max_abs: r.max_abs,
            require_divisible: r.require_divisible,
            require_nonzero_b: r.require_nonzero_b,
        }
    }
}

impl ConsistencySection {
    pub fn rule_list(&self) -> Result<Vec<Rule>, ConfigError> {
        self.rules
            .iter()
            .map(|n| rule_by_name(n).map_err(|e| ConfigError::invalid("consistency.rules", e.to_string())))
            .collect()
    }

    pub fn correct_ids(&self) -> Result<std::collections::BTreeSet<RuleId>, ConfigError> {
        self.correct
            .iter()
            .map(|n| {
                rule_by_name(n).map(|r| r.id).map_err(|e| ConfigError::invalid("consistency.correct", e.to_string()))
            })
            .collect()
    }

    pub fn relation(&self) -> ConsistencyRelation {
        let domain: Vec<Problem> = NumberRange {
            max_abs: self.max_abs,
            require_divisible: self.require_divisible,
            require_nonzero_b: self.require_nonzero_b,
        }
        .problems();
        let kind = match self.relation {
            RelationName::Pointwise => RelationKind::Pointwise,
            RelationName::Existential => RelationKind::Existential,
        };
        ConsistencyRelation::new(kind, domain)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub global: GlobalSection,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub consistency: ConsistencySection,
}

impl ExperimentConfig {
    /// Parses TOML, applies `section.key=value` overrides in order, then
    /// validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short hash of the resolved configuration.
    pub fn hash(&self) -> String {
        short_hash(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn replicate_seed(&self, replicate: usize) -> u64 {
        self.global.seed.wrapping_add(replicate as u64)
    }

    pub fn profile(&self) -> Result<StudentProfile, ConfigError> {
        let mut w = BTreeMap::new();
        for (name, weight) in &self.corpus.profile {
            let r = rule_by_name(name)
                .map_err(|e| ConfigError::invalid(format!("corpus.profile.{name}"), e.to_string()))?;
            w.insert(r.id, *weight);
        }
        StudentProfile::new(w).map_err(|e| ConfigError::invalid("corpus.profile", e.to_string()))
    }

    pub fn range(&self) -> NumberRange {
        NumberRange {
            max_abs: self.corpus.max_abs,
            require_divisible: self.corpus.require_divisible,
            require_nonzero_b: self.corpus.require_nonzero_b,
        }
    }

    /// Student-corpus spec for one replicate, drawing from `pool`.
    pub fn corpus_spec(&self, seed: u64, pool: Option<Vec<Problem>>) -> Result<CorpusSpec, ConfigError> {
        Ok(CorpusSpec {
            n_dialogues: self.corpus.n_dialogues,
            turns_per_dialogue: self.corpus.turns_per_dialogue,
            profile: self.profile()?,
            profile_id: self.corpus.profile_id.clone(),
            range: self.range(),
            seed: derive_seed(seed, "corpus"),
            templates: self.corpus.templates.clone(),
            context_len: self.model.context_len,
            problem_pool: pool,
        })
    }

    pub fn model_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            context_len: self.model.context_len,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            n_layers: self.model.n_layers,
            init_seed: derive_seed(seed, "init"),
        }
    }

    pub fn train_config(&self, regime: Regime, seed: u64) -> TrainConfig {
        self.train.resolve(regime, derive_seed(seed, &format!("shuffle/{}", regime.key())))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let g = &self.global;
        if g.replicates == 0 {
            return Err(ConfigError::invalid("global.replicates", "must be at least 1"));
        }
        if g.workers == 0 {
            return Err(ConfigError::invalid("global.workers", "must be at least 1"));
        }
        let c = &self.corpus;
        for (k, v) in [
            ("n_dialogues", c.n_dialogues),
            ("pretrain_dialogues", c.pretrain_dialogues),
            ("heldout_dialogues", c.heldout_dialogues),
        ] {
            if v == 0 {
                return Err(ConfigError::invalid(format!("corpus.{k}"), "must be at least 1"));
            }
        }
        if c.turns_per_dialogue < 2 {
            return Err(ConfigError::invalid("corpus.turns_per_dialogue", "must be at least 2"));
        }
        if c.max_abs < 1 {
            return Err(ConfigError::invalid("corpus.max_abs", "must be at least 1"));
        }
        self.profile()?;
        self.corpus_spec(0, None)?
            .validate()
            .map_err(|e| ConfigError::invalid("corpus", e.to_string()))?;
        let probe = ModelConfig { vocab_size: 1, ..self.model_config(1, 0) };
        if let Err(e) = probe.validate() {
            let key = if self.model.n_heads == 0 || self.model.d_model % self.model.n_heads.max(1) != 0 {
                "model.n_heads"
            } else if self.model.d_model == 0 {
                "model.d_model"
            } else if self.model.n_layers == 0 {
                "model.n_layers"
            } else {
                "model.context_len"
            };
            return Err(ConfigError::invalid(key, e.to_string()));
        }
        let shared_section = TrainConfig {
            learning_rate: self.train.learning_rate,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.eps,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            clip_norm: self.train.clip_norm,
            shuffle_seed: 0,
            warmup_steps: self.train.warmup_steps,
        };
        if let Err((field, reason)) = shared_section.check() {
            return Err(ConfigError::invalid(format!("train.{field}"), reason));
        }
        for r in Regime::ALL {
            if let Err((field, reason)) = self.train.resolve(r, 0).check() {
                let path = if self.train.override_for(r).is_set(field) {
                    format!("train.{}.{field}", r.key())
                } else {
                    format!("train.{field}")
                };
                return Err(ConfigError::invalid(path, reason));
            }
        }
        if self.eval.n_samples < 1000 {
            return Err(ConfigError::invalid("eval.n_samples", "must be at least 1000"));
        }
        let cs = &self.consistency;
        if cs.rules.is_empty() {
            return Err(ConfigError::invalid("consistency.rules", "must name at least one rule"));
        }
        cs.rule_list()?;
        if cs.correct.is_empty() {
            return Err(ConfigError::invalid("consistency.correct", "must name at least one rule"));
        }
        cs.correct_ids()?;
        if cs.relation().probe_domain.is_empty() {
            return Err(ConfigError::invalid("consistency.max_abs", "probe domain is empty"));
        }
        Ok(())
    }
}

/// Sets `path = value` in a TOML table. The value is read as a TOML literal
/// and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::invalid(assignment, "override must look like section.key=value"))?;
    let path = path.trim();
    let raw = raw.trim();
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::invalid(path, "empty key in override path"));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key is present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(ConfigError::invalid(path, format!("{k} is not a section"))),
        };
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.global.replicates, 5);
        assert_eq!(c.corpus.n_dialogues, 648);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ExperimentConfig::default();
        c.train.student.epochs = Some(3);
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[train]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        assert!(ExperimentConfig::from_toml("[bogus]\n").is_err());
    }

    #[test]
    fn negative_learning_rate_names_the_key() {
        let err = ExperimentConfig::from_toml("[train]\nlearning_rate = -0.1\n").unwrap_err();
        assert!(err.to_string().starts_with("train.learning_rate"), "{err}");
        let err = ExperimentConfig::from_toml("[train.student]\nlearning_rate = -0.1\n").unwrap_err();
        assert!(err.to_string().starts_with("train.student.learning_rate"), "{err}");
    }

    #[test]
    fn overrides_apply_in_order_and_change_hash() {
        let base = ExperimentConfig::default();
        let c = ExperimentConfig::from_toml_with_overrides(
            "",
            &["train.epochs=3".into(), "train.student.epochs=4".into(), "eval.probe_framing=bare".into()],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.student.epochs, Some(4));
        assert_eq!(c.eval.probe_framing, ProbeFraming::Bare);
        assert_ne!(c.hash(), base.hash());
        assert_eq!(c.train_config(Regime::Fine(TrainingMode::Student), 0).epochs, 4);
        assert_eq!(c.train_config(Regime::Fine(TrainingMode::Tutor), 0).epochs, 3);
        assert!(ExperimentConfig::from_toml_with_overrides("", &["nonsense".into()]).is_err());
    }

    #[test]
    fn invalid_values_name_their_paths() {
        let cases = [
            ("[model]\nd_model = 30\nn_heads = 4\n", "model.n_heads"),
            ("[global]\nreplicates = 0\n", "global.replicates"),
            ("[corpus.profile]\nCORRECT = 0.5\n", "corpus.profile"),
            ("[corpus.profile]\nM9 = 1.0\n", "corpus.profile.M9"),
            ("[eval]\nn_samples = 10\n", "eval.n_samples"),
            ("[consistency]\nrules = [\"X\"]\n", "consistency.rules"),
        ];
        for (text, path) in cases {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert!(err.to_string().starts_with(path), "{text}: {err}");
        }
    }

    #[test]
    fn seeds_are_derived_per_purpose() {
        let c = ExperimentConfig::default();
        let a = c.train_config(Regime::Fine(TrainingMode::Student), 1).shuffle_seed;
        let b = c.train_config(Regime::Fine(TrainingMode::Tutor), 1).shuffle_seed;
        assert_ne!(a, b);
        assert_eq!(c.replicate_seed(2), 2);
    }
}
