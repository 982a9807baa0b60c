//! Turn-masked objectives, hallucination-marker augmentation and the Adam
//! training loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Role};
use crate::error::TrainError;
use crate::model::checkpoint::{Checkpoint, TrainingMeta};
use crate::model::{init_params, ModelConfig, Parameters};
use crate::seeds;
use crate::vocab::{Special, TokenId, Vocab};
use crate::TOOL_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMode {
    Student,
    Tutor,
    StudentHal,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 3] = [TrainingMode::Student, TrainingMode::Tutor, TrainingMode::StudentHal];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainingMode::Student => "student",
            TrainingMode::Tutor => "tutor",
            TrainingMode::StudentHal => "student-hal",
        }
    }

    pub fn target_role(self) -> Role {
        match self {
            TrainingMode::Tutor => Role::Tutor,
            TrainingMode::Student | TrainingMode::StudentHal => Role::Student,
        }
    }

    pub fn uses_hal(self) -> bool {
        self == TrainingMode::StudentHal
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainingMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrainingMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| TrainError::Invalid(format!("unknown training mode {s:?}")))
    }
}

/// Token ids with a per-position loss weight; weight `t` scores `ids[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub ids: Vec<TokenId>,
    pub mask: Vec<f64>,
}

impl MaskedSequence {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&w| w != 0.0).count()
    }
}

/// `[hal] y [/hal]`.
pub fn augment_with_hal(y: &[TokenId], vocab: &Vocab) -> Result<Vec<TokenId>, TrainError> {
    let (open, close) = (vocab.special(Special::HalOpen), vocab.special(Special::HalClose));
    if y.iter().any(|&t| t == open || t == close) {
        return Err(TrainError::AlreadyAugmented);
    }
    let mut out = Vec::with_capacity(y.len() + 2);
    out.push(open);
    out.extend_from_slice(y);
    out.push(close);
    Ok(out)
}

/// Inverse of [`augment_with_hal`].
pub fn strip_hal(y: &[TokenId], vocab: &Vocab) -> Result<Vec<TokenId>, TrainError> {
    let (open, close) = (vocab.special(Special::HalOpen), vocab.special(Special::HalClose));
    match y {
        [first, inner @ .., last] if *first == open && *last == close => Ok(inner.to_vec()),
        _ => Err(TrainError::Invalid("sequence is not wrapped in hallucination markers".into())),
    }
}

fn flatten(d: &Dialogue, targets: &[Role], hal: bool, vocab: &Vocab) -> Result<MaskedSequence, TrainError> {
    let eot = vocab.special(Special::Eot);
    let mut ids = Vec::new();
    let mut mask = Vec::new();
    for turn in &d.turns {
        let marker = match turn.role {
            Role::Tutor => vocab.special(Special::Tutor),
            Role::Student => vocab.special(Special::Student),
        };
        let body = if hal && turn.role == Role::Student {
            augment_with_hal(&turn.ids, vocab)?
        } else {
            turn.ids.clone()
        };
        let w = if targets.contains(&turn.role) { 1.0 } else { 0.0 };
        ids.push(marker);
        mask.push(0.0);
        for &t in body.iter().chain([&eot]) {
            ids.push(t);
            mask.push(w);
        }
    }
    Ok(MaskedSequence { ids, mask })
}

/// Flattens a dialogue as `role content EOT` per turn; the mask covers the
/// content and EOT of target-role turns (and their hal markers).
pub fn build_training_sequence(d: &Dialogue, mode: TrainingMode, vocab: &Vocab) -> Result<MaskedSequence, TrainError> {
    flatten(d, &[mode.target_role()], mode.uses_hal(), vocab)
}

/// Pretraining sequence: every turn's content and EOT is a target.
pub fn build_pretraining_sequence(d: &Dialogue, vocab: &Vocab) -> Result<MaskedSequence, TrainError> {
    flatten(d, &[Role::Tutor, Role::Student], false, vocab)
}

/// −Σ_{mask_t = 1} log p(ids_t | ids_<t).
pub fn masked_nll(params: &Parameters, ms: &MaskedSequence) -> Result<f64, TrainError> {
    Ok(params.weighted_nll(&ms.ids, &ms.mask)?)
}

/// Sum of per-sequence masked NLL.
pub fn dataset_loss(params: &Parameters, seqs: &[MaskedSequence]) -> Result<f64, TrainError> {
    seqs.iter().map(|s| masked_nll(params, s)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub shuffle_seed: u64,
    /// Linear warmup length in optimizer steps; 0 disables it.
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            epochs: 10,
            clip_norm: 1.0,
            shuffle_seed: 0,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    /// Returns the offending field name and reason.
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        let positive = |name: &'static str, x: f64| {
            if x.is_finite() && x > 0.0 {
                Ok(())
            } else {
                Err((name, format!("must be positive and finite, got {x}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("eps", self.eps)?;
        positive("clip_norm", self.clip_norm)?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err((name, format!("must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(("batch_size", "must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(("epochs", "must be at least 1".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.check().map_err(|(k, r)| TrainError::Invalid(format!("{k}: {r}")))
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, tc: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - tc.beta1.powi(self.t);
        let c2 = 1.0 - tc.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = tc.beta1 * *m + (1.0 - tc.beta1) * g;
            *v = tc.beta2 * *v + (1.0 - tc.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + tc.eps);
        }
    }
}

/// Rescales `grad` to norm at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Token-weighted mean masked NLL over the epoch, measured before each update.
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: Parameters,
    pub curve: Vec<EpochLoss>,
    pub steps: u64,
}

impl TrainRun {
    pub fn final_loss(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |e| e.mean_loss)
    }

    pub fn checkpoint(&self, vocab: &Vocab, regime: &str, seed: u64, config_hash: &str) -> Checkpoint {
        Checkpoint::from_params(
            &self.params,
            vocab,
            TrainingMeta {
                regime: regime.to_string(),
                steps: self.steps,
                final_loss: self.final_loss(),
                seed,
                tool_version: TOOL_VERSION.to_string(),
                config_hash: config_hash.to_string(),
            },
        )
    }

    /// `epoch,mean_loss` CSV.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss\n");
        for e in &self.curve {
            s.push_str(&format!("{},{}\n", e.epoch, e.mean_loss));
        }
        s
    }
}

/// Adam on the token-weighted mean masked NLL of each minibatch.
pub fn fit(mut params: Parameters, seqs: &[MaskedSequence], tc: &TrainConfig) -> Result<TrainRun, TrainError> {
    tc.validate()?;
    if seqs.is_empty() {
        return Err(TrainError::Invalid("empty training set".into()));
    }
    let ctx = params.config().context_len;
    if let Some(s) = seqs.iter().find(|s| s.ids.len() > ctx) {
        return Err(crate::error::ModelError::SequenceTooLong { len: s.ids.len(), context_len: ctx }.into());
    }
    let mut adam = Adam::new(params.count());
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut curve = Vec::with_capacity(tc.epochs);
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        let mut rng = seeds::indexed_rng(tc.shuffle_seed, "shuffle", epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut nll_sum, mut weight_sum) = (0.0, 0.0);
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<(Vec<TokenId>, Vec<f64>)> =
                chunk.iter().map(|&i| (seqs[i].ids.clone(), seqs[i].mask.clone())).collect();
            let mut g = crate::model::gradients(&params, &batch)?;
            if g.total_weight == 0.0 {
                continue;
            }
            if !g.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            nll_sum += g.loss * g.total_weight;
            weight_sum += g.total_weight;
            let norm = clip_global_norm(&mut g.grad, tc.clip_norm);
            if !norm.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            let lr = if tc.warmup_steps > 0 && step < tc.warmup_steps {
                tc.learning_rate * (step + 1) as f64 / tc.warmup_steps as f64
            } else {
                tc.learning_rate
            };
            adam.step(params.data_mut(), &g.grad, lr, tc);
            step += 1;
        }
        if weight_sum == 0.0 {
            return Err(TrainError::Invalid("every training mask is empty".into()));
        }
        curve.push(EpochLoss { epoch, mean_loss: nll_sum / weight_sum });
    }
    if !params.all_finite() {
        return Err(TrainError::NonFiniteLoss { step });
    }
    Ok(TrainRun { params, curve, steps: step as u64 })
}

/// Fine-tunes `init` on the `mode`-masked dialogues.
pub fn train(
    corpus: &[Dialogue],
    mode: TrainingMode,
    init: &Parameters,
    vocab: &Vocab,
    tc: &TrainConfig,
) -> Result<TrainRun, TrainError> {
    check_vocab(init.config(), vocab)?;
    let seqs = corpus
        .iter()
        .map(|d| build_training_sequence(d, mode, vocab))
        .collect::<Result<Vec<_>, _>>()?;
    fit(init.clone(), &seqs, tc)
}

/// Trains a fresh model on a clean corpus, all turns as targets.
pub fn pretrain(corpus: &[Dialogue], config: &ModelConfig, vocab: &Vocab, tc: &TrainConfig) -> Result<TrainRun, TrainError> {
    check_vocab(config, vocab)?;
    let seqs = corpus
        .iter()
        .map(|d| build_pretraining_sequence(d, vocab))
        .collect::<Result<Vec<_>, _>>()?;
    fit(init_params(config)?, &seqs, tc)
}

fn check_vocab(config: &ModelConfig, vocab: &Vocab) -> Result<(), TrainError> {
    if config.vocab_size != vocab.len() {
        return Err(TrainError::Invalid(format!(
            "model vocabulary size {} differs from corpus vocabulary size {}",
            config.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, generate_corpus, CorpusSpec, Turn};
    use crate::rules::Problem;

    fn vocab() -> Vocab {
        build_vocab(&CorpusSpec::default())
    }

    fn pair(v: &Vocab) -> Dialogue {
        Dialogue {
            id: 0,
            turns: vec![
                Turn { role: Role::Tutor, ids: v.encode("solve 2 x = 6").unwrap(), rule: None },
                Turn { role: Role::Student, ids: v.encode("x = 3").unwrap(), rule: Some(crate::rules::CORRECT) },
            ],
            problem: Problem::new(2, 6).unwrap(),
            profile_id: "p".into(),
        }
    }

    fn tiny(v: &Vocab) -> ModelConfig {
        ModelConfig { vocab_size: v.len(), context_len: 64, d_model: 8, n_heads: 2, n_layers: 1, init_seed: 1 }
    }

    #[test]
    fn augmentation_examples() {
        let v = vocab();
        let (o, c) = (v.special(Special::HalOpen), v.special(Special::HalClose));
        assert_eq!(augment_with_hal(&[9, 10], &v).unwrap(), vec![o, 9, 10, c]);
        assert_eq!(augment_with_hal(&[], &v).unwrap(), vec![o, c]);
        assert!(matches!(augment_with_hal(&[9, o], &v), Err(TrainError::AlreadyAugmented)));
        assert_eq!(strip_hal(&augment_with_hal(&[9, 10], &v).unwrap(), &v).unwrap(), vec![9, 10]);
        assert!(strip_hal(&[9, 10], &v).is_err());
    }

    #[test]
    fn student_mask_covers_answer_and_eot() {
        let v = vocab();
        let ms = build_training_sequence(&pair(&v), TrainingMode::Student, &v).unwrap();
        assert_eq!(v.decode(&ms.ids).unwrap(), "<tutor> solve 2 x = 6 <eot> <student> x = 3 <eot>");
        assert_eq!(ms.mask, vec![0., 0., 0., 0., 0., 0., 0., 0., 1., 1., 1., 1.]);
    }

    #[test]
    fn modes_partition_content_positions() {
        let v = vocab();
        let d = pair(&v);
        let s = build_training_sequence(&d, TrainingMode::Student, &v).unwrap();
        let t = build_training_sequence(&d, TrainingMode::Tutor, &v).unwrap();
        let markers = [v.special(Special::Tutor), v.special(Special::Student)];
        for i in 0..s.ids.len() {
            let is_marker = markers.contains(&s.ids[i]);
            assert_eq!(s.mask[i] + t.mask[i], if is_marker { 0.0 } else { 1.0 });
        }
        let h = build_training_sequence(&d, TrainingMode::StudentHal, &v).unwrap();
        assert_eq!(h.masked_count(), s.masked_count() + 2);
        assert_eq!(v.decode(&h.ids).unwrap(), "<tutor> solve 2 x = 6 <eot> <student> [hal] x = 3 [/hal] <eot>");
    }

    #[test]
    fn pretraining_mask_is_union_of_modes() {
        let v = vocab();
        let d = pair(&v);
        let s = build_training_sequence(&d, TrainingMode::Student, &v).unwrap();
        let t = build_training_sequence(&d, TrainingMode::Tutor, &v).unwrap();
        let p = build_pretraining_sequence(&d, &v).unwrap();
        let union: Vec<f64> = s.mask.iter().zip(&t.mask).map(|(a, b)| a + b).collect();
        assert_eq!(p.mask, union);
    }

    #[test]
    fn toggling_a_mask_position_adds_its_nll() {
        let v = vocab();
        let p = init_params(&tiny(&v)).unwrap();
        let ms = build_training_sequence(&pair(&v), TrainingMode::Student, &v).unwrap();
        let base = masked_nll(&p, &ms).unwrap();
        let mut toggled = ms.clone();
        toggled.mask[4] = 1.0;
        let with = masked_nll(&p, &toggled).unwrap();
        let lp = p.sequence_logprob(&ms.ids[..4], &ms.ids[4..5]).unwrap();
        assert!((with - base + lp).abs() < 1e-9);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut small = vec![0.1, 0.1];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.1]);
    }

    #[test]
    fn config_validation_names_field() {
        let tc = TrainConfig { learning_rate: -1.0, ..Default::default() };
        assert_eq!(tc.check().unwrap_err().0, "learning_rate");
        let tc = TrainConfig { beta2: 1.0, ..Default::default() };
        assert_eq!(tc.check().unwrap_err().0, "beta2");
    }

    #[test]
    fn mode_round_trips_through_strings() {
        for m in TrainingMode::ALL {
            assert_eq!(m.as_str().parse::<TrainingMode>().unwrap(), m);
        }
        assert!("teacher".parse::<TrainingMode>().is_err());
    }

    #[test]
    fn training_is_deterministic_and_decreases_loss() {
        let spec = CorpusSpec { n_dialogues: 40, ..Default::default() };
        let v = build_vocab(&spec);
        let corpus = generate_corpus(&spec).unwrap();
        let tc = TrainConfig { epochs: 4, learning_rate: 3e-3, ..Default::default() };
        let a = pretrain(&corpus, &tiny(&v), &v, &tc).unwrap();
        let b = pretrain(&corpus, &tiny(&v), &v, &tc).unwrap();
        assert_eq!(a.params.data(), b.params.data());
        assert!(a.curve.last().unwrap().mean_loss < a.curve[0].mean_loss);
        assert_eq!(a.steps, 4 * 3);
        let ft = train(&corpus, TrainingMode::StudentHal, &a.params, &v, &tc).unwrap();
        let ck = ft.checkpoint(&v, "student-hal", 7, "abc");
        assert_eq!(ck.meta.regime, "student-hal");
        assert_eq!(ck.meta.steps, 12);
    }

    #[test]
    fn divergence_reports_step() {
        let spec = CorpusSpec { n_dialogues: 8, ..Default::default() };
        let v = build_vocab(&spec);
        let corpus = generate_corpus(&spec).unwrap();
        let tc = TrainConfig { epochs: 3, batch_size: 4, learning_rate: 1e308, ..Default::default() };
        let err = pretrain(&corpus, &tiny(&v), &v, &tc).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteLoss { .. }), "{err}");
    }
}
