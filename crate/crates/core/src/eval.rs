//! Direct question answering, student-simulation fidelity, misconception
//! matching and the four-regime report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Role, Templates};
use crate::error::{EvalError, ModelError};
use crate::model::checkpoint::Checkpoint;
use crate::model::{DecodePolicy, Parameters};
use crate::rules::{apply_rule, builtin_rule, builtin_rules, parse_answer, Problem, RuleId, StudentProfile, CORRECT};
use crate::seeds;
use crate::training::{build_training_sequence, TrainingMode};
use crate::vocab::{Special, TokenId, Vocab};

/// How a direct question is posed to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeFraming {
    /// `<tutor> question <eot> <tutor> so x =`: the tutor states the answer.
    Correction,
    /// `<tutor> question <eot> x =`: an answer with no speaker marker.
    Bare,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeItem {
    pub problem: Problem,
    pub prompt: Vec<TokenId>,
    /// Each candidate is an answer spelling followed by EOT.
    pub candidates: Vec<Vec<TokenId>>,
    pub correct_index: usize,
}

impl ProbeItem {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.candidates.is_empty() || self.correct_index >= self.candidates.len() {
            return Err(EvalError::Invalid(format!("probe {} has no valid correct index", self.problem)));
        }
        let distinct: BTreeSet<&Vec<TokenId>> = self.candidates.iter().collect();
        if distinct.len() != self.candidates.len() {
            return Err(EvalError::Invalid(format!("probe {} has duplicate candidates", self.problem)));
        }
        Ok(())
    }
}

fn turn_ids(vocab: &Vocab, role: Role, text: &str) -> Result<Vec<TokenId>, EvalError> {
    let marker = match role {
        Role::Tutor => Special::Tutor,
        Role::Student => Special::Student,
    };
    let mut ids = vec![vocab.special(marker)];
    ids.extend(vocab.encode(text).map_err(|e| EvalError::Invalid(e.to_string()))?);
    Ok(ids)
}

fn encode(vocab: &Vocab, text: &str) -> Result<Vec<TokenId>, EvalError> {
    vocab.encode(text).map_err(|e| EvalError::Invalid(e.to_string()))
}

/// Words of `template` before its `{ans}` slot.
fn prefix_before_answer(template: &str) -> String {
    template.split_whitespace().take_while(|w| *w != "{ans}").collect::<Vec<_>>().join(" ")
}

pub fn probe_prompt(p: &Problem, framing: ProbeFraming, templates: &Templates, vocab: &Vocab) -> Result<Vec<TokenId>, EvalError> {
    let mut ids = turn_ids(vocab, Role::Tutor, &templates.question_text(p))?;
    ids.push(vocab.special(Special::Eot));
    match framing {
        ProbeFraming::Correction => ids.extend(turn_ids(vocab, Role::Tutor, &prefix_before_answer(&templates.correction))?),
        ProbeFraming::Bare => ids.extend(encode(vocab, &prefix_before_answer(&templates.answer))?),
    }
    Ok(ids)
}

/// One probe per problem: the correct answer plus every distinct
/// misconception answer, in seeded random order.
pub fn build_probes(
    problems: &[Problem],
    framing: ProbeFraming,
    templates: &Templates,
    vocab: &Vocab,
    seed: u64,
) -> Result<Vec<ProbeItem>, EvalError> {
    let eot = vocab.special(Special::Eot);
    let mut rng = seeds::rng(seed, "probe-order");
    let mut out = Vec::with_capacity(problems.len());
    for p in problems {
        let correct = apply_rule(&builtin_rule(CORRECT)?, p)?;
        let mut answers = vec![correct];
        for rule in builtin_rules() {
            if let Ok(a) = apply_rule(&rule, p) {
                if !answers.contains(&a) {
                    answers.push(a);
                }
            }
        }
        let mut order: Vec<usize> = (0..answers.len()).collect();
        order.shuffle(&mut rng);
        let mut candidates = Vec::with_capacity(answers.len());
        for &k in &order {
            let mut c = encode(vocab, &templates.spell(&answers[k]))?;
            c.push(eot);
            candidates.push(c);
        }
        let correct_index = order.iter().position(|&k| k == 0).expect("correct answer is a candidate");
        out.push(ProbeItem { problem: *p, prompt: probe_prompt(p, framing, templates, vocab)?, candidates, correct_index });
    }
    Ok(out)
}

/// Splits problems into `(train, probe)`: within each group sharing
/// `(|a|, |b|)`, one seeded sign variant becomes a probe when the group has
/// at least two members.
pub fn partition_problems(problems: &[Problem], seed: u64) -> (Vec<Problem>, Vec<Problem>) {
    let mut groups: BTreeMap<(i64, i64), Vec<Problem>> = BTreeMap::new();
    for p in problems {
        groups.entry((p.a.abs(), p.b.abs())).or_default().push(*p);
    }
    let mut rng = seeds::rng(seed, "probe-partition");
    let (mut train, mut probe) = (Vec::new(), Vec::new());
    for (_, mut g) in groups {
        g.sort();
        if g.len() >= 2 {
            let k = rng.gen_range(0..g.len());
            probe.push(g.remove(k));
        }
        train.extend(g);
    }
    train.sort();
    probe.sort();
    (train, probe)
}

/// Refuses probes whose problems were trained on.
pub fn check_contamination(probes: &[ProbeItem], trained: &BTreeSet<Problem>) -> Result<(), EvalError> {
    let overlap: Vec<(i64, i64)> =
        probes.iter().filter(|p| trained.contains(&p.problem)).map(|p| (p.problem.a, p.problem.b)).collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(EvalError::ProbeContamination(overlap))
    }
}

/// Length-normalized log-probability of every candidate.
pub fn candidate_scores(params: &Parameters, probe: &ProbeItem) -> Result<Vec<f64>, EvalError> {
    probe
        .candidates
        .iter()
        .map(|c| Ok(params.sequence_logprob(&probe.prompt, c)? / c.len() as f64))
        .collect()
}

/// Index of the best-scoring candidate, lowest index on ties.
pub fn predict(params: &Parameters, probe: &ProbeItem) -> Result<usize, EvalError> {
    let s = candidate_scores(params, probe)?;
    let mut best = 0;
    for (i, v) in s.iter().enumerate() {
        if *v > s[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn direct_qa_accuracy(params: &Parameters, probes: &[ProbeItem]) -> Result<f64, EvalError> {
    if probes.is_empty() {
        return Err(EvalError::Invalid("no probes".into()));
    }
    let mut hits = 0usize;
    for p in probes {
        p.validate()?;
        if predict(params, p)? == p.correct_index {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

/// Per-token perplexity of the student turns of `heldout`, hal-augmented for
/// a [`TrainingMode::StudentHal`] model.
pub fn student_fidelity(params: &Parameters, heldout: &[Dialogue], mode: TrainingMode, vocab: &Vocab) -> Result<f64, EvalError> {
    if heldout.is_empty() {
        return Err(EvalError::Invalid("empty held-out set".into()));
    }
    let mode = if mode == TrainingMode::StudentHal { TrainingMode::StudentHal } else { TrainingMode::Student };
    let (mut nll, mut count) = (0.0, 0usize);
    for d in heldout {
        let ms = build_training_sequence(d, mode, vocab)?;
        nll += params.weighted_nll(&ms.ids, &ms.mask)?;
        count += ms.masked_count();
    }
    if count == 0 {
        return Err(EvalError::Invalid("held-out set has no student tokens".into()));
    }
    Ok((nll / count as f64).exp())
}

/// Student-framing prompt: the tutor's question, then the student marker
/// (and `[hal]` when requested).
pub fn student_prompt(p: &Problem, hal_prefix: bool, templates: &Templates, vocab: &Vocab) -> Result<Vec<TokenId>, EvalError> {
    let mut ids = turn_ids(vocab, Role::Tutor, &templates.question_text(p))?;
    ids.push(vocab.special(Special::Eot));
    ids.push(vocab.special(Special::Student));
    if hal_prefix {
        ids.push(vocab.special(Special::HalOpen));
    }
    Ok(ids)
}

/// Reads a generated student turn back as an answer: strips a closing
/// `[/hal]` and EOT, then the answer template's fixed words.
pub fn parse_generated(out: &[TokenId], templates: &Templates, vocab: &Vocab) -> Option<num_rational::Rational64> {
    let eot = vocab.special(Special::Eot);
    let close = vocab.special(Special::HalClose);
    let end = out.iter().position(|&t| t == eot)?;
    let mut body = &out[..end];
    if let [rest @ .., last] = body {
        if *last == close {
            body = rest;
        }
    }
    let words: Vec<&str> = body.iter().map(|&t| vocab.token(t)).collect::<Result<_, _>>().ok()?;
    let prefix = templates.answer_prefix();
    let suffix = templates.answer_suffix();
    if words.len() < prefix.len() + suffix.len() || words[..prefix.len()] != prefix[..] || words[words.len() - suffix.len()..] != suffix[..] {
        return None;
    }
    let ans = &words[prefix.len()..words.len() - suffix.len()];
    let spelled: Vec<&str> = ans.iter().map(|w| if *w == templates.fraction { "/" } else { w }).collect();
    parse_answer(&spelled)
}

/// Empirical rule distribution of generated student answers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MisconceptionMatch {
    /// Mass per rule id; answers produced by several rules are split in
    /// proportion to their profile weights (evenly if all are zero).
    pub rule_mass: BTreeMap<u16, f64>,
    pub other: f64,
    /// Fraction of answers equal to the correct one.
    pub correct_rate: f64,
    pub tv: f64,
    pub n_samples: usize,
}

/// Samples student answers at temperature 1 on problems drawn uniformly
/// from `problems` and compares their rule distribution with `profile`.
#[allow(clippy::too_many_arguments)]
pub fn misconception_match<R: Rng + ?Sized>(
    params: &Parameters,
    problems: &[Problem],
    profile: &StudentProfile,
    templates: &Templates,
    vocab: &Vocab,
    n_samples: usize,
    rng: &mut R,
    hal_prefix: bool,
) -> Result<MisconceptionMatch, EvalError> {
    if n_samples < 1000 {
        return Err(EvalError::Invalid(format!("need at least 1000 samples, got {n_samples}")));
    }
    if problems.is_empty() {
        return Err(EvalError::Invalid("no problems to sample from".into()));
    }
    let rules = builtin_rules();
    let stop = [vocab.special(Special::Eot), vocab.special(Special::Eos)];
    let ctx = params.config().context_len;
    let mut mass: BTreeMap<u16, f64> = rules.iter().map(|r| (r.id.0, 0.0)).collect();
    let (mut other, mut correct) = (0.0, 0usize);
    for _ in 0..n_samples {
        let p = problems[rng.gen_range(0..problems.len())];
        let prompt = student_prompt(&p, hal_prefix, templates, vocab)?;
        let out = params.generate(&prompt, DecodePolicy::Temperature(1.0), rng, ctx - prompt.len(), &stop)?;
        let Some(ans) = parse_generated(&out, templates, vocab) else {
            other += 1.0;
            continue;
        };
        let matching: Vec<RuleId> = rules.iter().filter(|r| r.solve(&p) == Some(ans)).map(|r| r.id).collect();
        if matching.contains(&CORRECT) {
            correct += 1;
        }
        if matching.is_empty() {
            other += 1.0;
            continue;
        }
        let total: f64 = matching.iter().map(|&r| profile.weight(r)).sum();
        for &r in &matching {
            let share = if total > 0.0 { profile.weight(r) / total } else { 1.0 / matching.len() as f64 };
            *mass.get_mut(&r.0).expect("built-in rule") += share;
        }
    }
    let n = n_samples as f64;
    mass.values_mut().for_each(|m| *m /= n);
    let other = other / n;
    let tv = tv_distance(&mass, other, profile);
    Ok(MisconceptionMatch { rule_mass: mass, other, correct_rate: correct as f64 / n, tv, n_samples })
}

/// Total variation between an empirical rule distribution (plus OTHER mass)
/// and a profile; OTHER has zero profile weight.
pub fn tv_distance(mass: &BTreeMap<u16, f64>, other: f64, profile: &StudentProfile) -> f64 {
    let mut ids: BTreeSet<u16> = mass.keys().copied().collect();
    ids.extend(profile.weights().keys().map(|r| r.0));
    let diff: f64 = ids
        .iter()
        .map(|&id| (mass.get(&id).copied().unwrap_or(0.0) - profile.weight(RuleId(id))).abs())
        .sum();
    (0.5 * (diff + other)).clamp(0.0, 1.0)
}

/// Direct-QA accuracy minus the correct-answer rate under hal-prefixed
/// student framing.
#[allow(clippy::too_many_arguments)]
pub fn hal_switch_gap<R: Rng + ?Sized>(
    params: &Parameters,
    probes: &[ProbeItem],
    problems: &[Problem],
    profile: &StudentProfile,
    templates: &Templates,
    vocab: &Vocab,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64, EvalError> {
    let acc = direct_qa_accuracy(params, probes)?;
    let m = misconception_match(params, problems, profile, templates, vocab, n_samples, rng, true)?;
    Ok(acc - m.correct_rate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub regime: String,
    pub direct_qa_accuracy: f64,
    pub delta_accuracy: f64,
    pub student_perplexity: f64,
    pub delta_perplexity: f64,
    /// Measured with the `[hal]` prefix for the student-hal row only.
    pub misconception_tv: f64,
    /// Correct-answer rate of generated student answers, same framing as `misconception_tv`.
    pub student_correct_rate: f64,
    pub hal_switch_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

pub const REGIMES: [&str; 4] = ["baseline", "tutor", "student", "student-hal"];

pub const REFERENCE_NOTE: &str =
    "reference (full-scale, ARC): vicuna-7b 53.24, student-7b 40.61, student-hal-7b 45.48; documentation only";

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub n_samples: usize,
    pub seed: u64,
}

/// Inputs shared by every row of a report.
pub struct EvalInputs<'a> {
    pub probes: &'a [ProbeItem],
    pub heldout: &'a [Dialogue],
    /// Problems used for generation-based metrics.
    pub sample_problems: &'a [Problem],
    pub profile: &'a StudentProfile,
    pub templates: &'a Templates,
    pub vocab: &'a Vocab,
}

pub fn evaluate_regime(params: &Parameters, regime: &str, inputs: &EvalInputs<'_>, settings: &EvalSettings) -> Result<EvalRow, EvalError> {
    let hal = regime == "student-hal";
    let mode = if hal { TrainingMode::StudentHal } else { TrainingMode::Student };
    let acc = direct_qa_accuracy(params, inputs.probes)?;
    let ppl = student_fidelity(params, inputs.heldout, mode, inputs.vocab)?;
    let mut rng = seeds::rng(settings.seed, &format!("misconception/{regime}"));
    let m = misconception_match(
        params,
        inputs.sample_problems,
        inputs.profile,
        inputs.templates,
        inputs.vocab,
        settings.n_samples,
        &mut rng,
        hal,
    )?;
    let hal_correct = if hal {
        m.correct_rate
    } else {
        let mut rng = seeds::rng(settings.seed, &format!("hal-switch/{regime}"));
        misconception_match(
            params,
            inputs.sample_problems,
            inputs.profile,
            inputs.templates,
            inputs.vocab,
            settings.n_samples,
            &mut rng,
            true,
        )?
        .correct_rate
    };
    Ok(EvalRow {
        regime: regime.to_string(),
        direct_qa_accuracy: acc,
        delta_accuracy: 0.0,
        student_perplexity: ppl,
        delta_perplexity: 0.0,
        misconception_tv: m.tv,
        student_correct_rate: m.correct_rate,
        hal_switch_gap: acc - hal_correct,
    })
}

/// Rows in the fixed order baseline, tutor, student, student-hal.
pub fn paradox_report(
    checkpoints: [&Checkpoint; 4],
    inputs: &EvalInputs<'_>,
    settings: &EvalSettings,
) -> Result<EvalReport, EvalError> {
    let base = checkpoints[0];
    for (name, ck) in REGIMES.iter().zip(checkpoints) {
        if ck.config != base.config {
            return Err(EvalError::ConfigMismatch(format!("model config ({name})")));
        }
        if ck.vocab != base.vocab {
            return Err(EvalError::ConfigMismatch(format!("vocabulary ({name})")));
        }
    }
    if &base.vocab != inputs.vocab {
        return Err(EvalError::ConfigMismatch("vocabulary of evaluation inputs".into()));
    }
    let mut rows = Vec::with_capacity(4);
    for (name, ck) in REGIMES.iter().zip(checkpoints) {
        rows.push(evaluate_regime(&ck.parameters()?, name, inputs, settings)?);
    }
    Ok(with_deltas(rows))
}

pub fn with_deltas(mut rows: Vec<EvalRow>) -> EvalReport {
    if let Some(base) = rows.first().cloned() {
        for r in &mut rows {
            r.delta_accuracy = r.direct_qa_accuracy - base.direct_qa_accuracy;
            r.delta_perplexity = r.student_perplexity - base.student_perplexity;
        }
    }
    EvalReport { rows }
}

const COLUMNS: [&str; 8] = [
    "regime",
    "direct_qa_accuracy",
    "delta_accuracy",
    "student_perplexity",
    "delta_perplexity",
    "misconception_tv",
    "student_correct_rate",
    "hal_switch_gap",
];

impl EvalRow {
    fn cells(&self) -> [String; 8] {
        [
            self.regime.clone(),
            format!("{:.6}", self.direct_qa_accuracy),
            format!("{:+.6}", self.delta_accuracy),
            format!("{:.6}", self.student_perplexity),
            format!("{:+.6}", self.delta_perplexity),
            format!("{:.6}", self.misconception_tv),
            format!("{:.6}", self.student_correct_rate),
            format!("{:+.6}", self.hal_switch_gap),
        ]
    }
}

/// Provenance lines written at the top of every text artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn header(&self) -> String {
        format!("# tool_version={}\n# config_hash={}\n# seed={}\n", self.tool_version, self.config_hash, self.seed)
    }
}

impl EvalReport {
    pub fn to_csv(&self, stamp: &Stamp) -> String {
        let mut s = stamp.header();
        s.push_str(&COLUMNS.join(","));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.cells().join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_table(&self, stamp: &Stamp) -> String {
        let cells: Vec<[String; 8]> = self.rows.iter().map(|r| r.cells()).collect();
        let widths: Vec<usize> = (0..8)
            .map(|i| cells.iter().map(|c| c[i].len()).chain([COLUMNS[i].len()]).max().unwrap_or(0))
            .collect();
        let line = |row: &[&str]| -> String {
            let mut l = String::new();
            for (i, c) in row.iter().enumerate() {
                if i == 0 {
                    let _ = write!(l, "{c:<w$}", w = widths[i]);
                } else {
                    let _ = write!(l, "  {c:>w$}", w = widths[i]);
                }
            }
            l.push('\n');
            l
        };
        let mut s = stamp.header();
        s.push_str(&line(&COLUMNS));
        for c in &cells {
            s.push_str(&line(&c.iter().map(String::as_str).collect::<Vec<_>>()));
        }
        let _ = writeln!(s, "\n* {REFERENCE_NOTE}");
        s
    }
}

/// Mean of each metric over replicate reports with identical row layouts.
pub fn mean_report(reports: &[EvalReport]) -> Result<EvalReport, EvalError> {
    let first = reports.first().ok_or_else(|| EvalError::Invalid("no reports to average".into()))?;
    let n = reports.len() as f64;
    let mut rows = Vec::with_capacity(first.rows.len());
    for (i, r0) in first.rows.iter().enumerate() {
        let mut acc = EvalRow { regime: r0.regime.clone(), ..zero_row() };
        for rep in reports {
            let r = rep.rows.get(i).filter(|r| r.regime == r0.regime).ok_or_else(|| {
                EvalError::Invalid("replicate reports have different row layouts".into())
            })?;
            acc.direct_qa_accuracy += r.direct_qa_accuracy / n;
            acc.student_perplexity += r.student_perplexity / n;
            acc.misconception_tv += r.misconception_tv / n;
            acc.student_correct_rate += r.student_correct_rate / n;
            acc.hal_switch_gap += r.hal_switch_gap / n;
        }
        rows.push(acc);
    }
    Ok(with_deltas(rows))
}

fn zero_row() -> EvalRow {
    EvalRow {
        regime: String::new(),
        direct_qa_accuracy: 0.0,
        delta_accuracy: 0.0,
        student_perplexity: 0.0,
        delta_perplexity: 0.0,
        misconception_tv: 0.0,
        student_correct_rate: 0.0,
        hal_switch_gap: 0.0,
    }
}

#[derive(Serialize, Deserialize)]
struct ProbeHeader {
    format: String,
    version: u32,
    tool_version: String,
    config_hash: String,
    seed: u64,
    framing: ProbeFraming,
    vocab: Vocab,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeRecord {
    id: u64,
    problem: Problem,
    /// Prompt text; its last word is the open answer position.
    prompt: String,
    candidates: Vec<String>,
    correct_index: usize,
}

pub const PROBE_FORMAT: &str = "sdplab-probes";

/// JSONL: a header line, then one record per probe.
pub fn write_probes<W: Write>(
    mut w: W,
    probes: &[ProbeItem],
    framing: ProbeFraming,
    vocab: &Vocab,
    stamp: &Stamp,
) -> Result<(), EvalError> {
    let io = |e: std::io::Error| EvalError::Model(ModelError::Io(e));
    let header = ProbeHeader {
        format: PROBE_FORMAT.into(),
        version: 1,
        tool_version: stamp.tool_version.clone(),
        config_hash: stamp.config_hash.clone(),
        seed: stamp.seed,
        framing,
        vocab: vocab.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).map_err(|e| EvalError::Invalid(e.to_string()))?).map_err(io)?;
    for (i, p) in probes.iter().enumerate() {
        let dec = |ids: &[TokenId]| vocab.decode(ids).map_err(|e| EvalError::Invalid(e.to_string()));
        let rec = ProbeRecord {
            id: i as u64,
            problem: p.problem,
            prompt: dec(&p.prompt)?,
            candidates: p.candidates.iter().map(|c| dec(c)).collect::<Result<_, _>>()?,
            correct_index: p.correct_index,
        };
        writeln!(w, "{}", serde_json::to_string(&rec).map_err(|e| EvalError::Invalid(e.to_string()))?).map_err(io)?;
    }
    Ok(())
}

pub fn read_probes<R: BufRead>(r: R) -> Result<(Vocab, Vec<ProbeItem>), EvalError> {
    let mut lines = r.lines();
    let bad = |line: usize, m: String| EvalError::Invalid(format!("probe file line {line}: {m}"));
    let head = lines
        .next()
        .ok_or_else(|| bad(1, "missing header".into()))?
        .map_err(|e| EvalError::Model(ModelError::Io(e)))?;
    let header: ProbeHeader = serde_json::from_str(&head).map_err(|e| bad(1, e.to_string()))?;
    if header.format != PROBE_FORMAT {
        return Err(bad(1, format!("unexpected format {:?}", header.format)));
    }
    let vocab = header.vocab;
    let mut probes = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| EvalError::Model(ModelError::Io(e)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProbeRecord = serde_json::from_str(&line).map_err(|e| bad(i + 2, e.to_string()))?;
        let enc = |s: &str| vocab.encode(s).map_err(|e| bad(i + 2, e.to_string()));
        let item = ProbeItem {
            problem: rec.problem,
            prompt: enc(&rec.prompt)?,
            candidates: rec.candidates.iter().map(|c| enc(c)).collect::<Result<_, _>>()?,
            correct_index: rec.correct_index,
        };
        item.validate()?;
        probes.push(item);
    }
    Ok((vocab, probes))
}
