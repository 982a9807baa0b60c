use thiserror::Error;

use crate::vocab::TokenId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VocabError {
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    InvalidId { id: TokenId, size: usize },
    #[error("malformed vocabulary: {0}")]
    Malformed(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuleError {
    #[error("rule {rule} is undefined for a={a}, b={b}")]
    UndefinedForProblem { rule: String, a: i64, b: i64 },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("invalid student profile: {0}")]
    InvalidProfile(String),
    #[error("unknown rule {0:?}")]
    UnknownRule(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConsistencyError {
    #[error("consistency probe domain is empty")]
    EmptyProbeDomain,
    #[error("no maximal consistent set contains every correct rule")]
    NoConsistentTutorSet,
    #[error("{0} maximal consistent sets contain every correct rule")]
    AmbiguousTutorSet(usize),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("split cannot keep problems disjoint at the requested fractions: {0}")]
    InfeasibleSplit(String),
    #[error("line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds context length {context_len}")]
    SequenceTooLong { len: usize, context_len: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    InvalidToken { id: TokenId, size: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("response already carries hallucination markers")]
    AlreadyAugmented,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("checkpoints disagree on {0}")]
    ConfigMismatch(String),
    #[error("probe set overlaps training problems: {0:?}")]
    ProbeContamination(Vec<(i64, i64)>),
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Rule(#[from] RuleError),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ConfigError {
    pub fn invalid(path: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid { path: path.into(), reason: reason.into() }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{regime}: {source}")]
    Train { regime: String, source: TrainError },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("output directory {0} is locked by another run")]
    Locked(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl PipelineError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.display().to_string(), source }
    }
}
