//! Synthetic tutor/student dialogues and their line-delimited serialization.
//!
//! Every dialogue is about one problem `a x = b`. The tutor poses it, the
//! student answers with a rule drawn from the profile, the tutor asks the
//! student to check again for each further attempt, and the final tutor turn
//! states the correct answer.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::CorpusError;
use crate::rules::{
    apply_rule, builtin_rule, render_answer, sample_rule, NumberRange, Problem, RuleId,
    StudentProfile, CORRECT,
};
use crate::seeds::{indexed_rng, rng, short_hash};
use crate::vocab::{TokenId, Vocab};

pub const CORPUS_FORMAT_VERSION: u32 = 1;

/// Maximum redraws of a dialogue's problem before giving up on the window.
const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Tutor,
    Student,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub role: Role,
    /// Content tokens only; no role marker, no end-of-turn.
    pub ids: Vec<TokenId>,
    /// Rule that produced a student answer.
    pub rule: Option<RuleId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: u64,
    pub turns: Vec<Turn>,
    pub problem: Problem,
    pub profile_id: String,
}

impl Dialogue {
    pub fn student_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.role == Role::Student)
    }
}

/// Fixed-form utterances. `{a}`, `{b}` and `{ans}` are replaced by spelled
/// numbers; every other word is a vocabulary token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Templates {
    pub question: String,
    pub answer: String,
    pub retry: String,
    pub correction: String,
    /// Separator used when spelling non-integer answers.
    pub fraction: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            question: "solve {a} x = {b}".into(),
            answer: "x = {ans}".into(),
            retry: "check again".into(),
            correction: "so x = {ans}".into(),
            fraction: "/".into(),
        }
    }
}

impl Templates {
    pub fn literal_words(&self) -> Vec<&str> {
        [&self.question, &self.answer, &self.retry, &self.correction, &self.fraction]
            .into_iter()
            .flat_map(|t| t.split_whitespace())
            .filter(|w| !(w.starts_with('{') && w.ends_with('}')))
            .collect()
    }

    fn fill(template: &str, slots: &[(&str, String)]) -> String {
        template
            .split_whitespace()
            .map(|w| {
                slots
                    .iter()
                    .find(|(name, _)| w.len() > 2 && &w[1..w.len() - 1] == *name && w.starts_with('{'))
                    .map(|(_, v)| v.clone())
                    .unwrap_or_else(|| w.to_string())
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn question_text(&self, p: &Problem) -> String {
        use num_rational::Rational64 as Q;
        Self::fill(
            &self.question,
            &[
                ("a", render_answer(&Q::from_integer(p.a))),
                ("b", render_answer(&Q::from_integer(p.b))),
            ],
        )
    }

    pub fn answer_text(&self, ans: &num_rational::Rational64) -> String {
        Self::fill(&self.answer, &[("ans", self.spell(ans))])
    }

    pub fn correction_text(&self, ans: &num_rational::Rational64) -> String {
        Self::fill(&self.correction, &[("ans", self.spell(ans))])
    }

    pub fn spell(&self, ans: &num_rational::Rational64) -> String {
        let s = render_answer(ans);
        if self.fraction == "/" {
            s
        } else {
            s.split(' ')
                .map(|w| if w == "/" { self.fraction.as_str() } else { w })
                .collect::<Vec<_>>()
                .join(" ")
        }
    }

    /// Tokens preceding the answer slot in the answer template (e.g. `x =`).
    pub fn answer_prefix(&self) -> Vec<&str> {
        self.answer.split_whitespace().take_while(|w| *w != "{ans}").collect()
    }

    /// Tokens following the answer slot in the answer template.
    pub fn answer_suffix(&self) -> Vec<&str> {
        self.answer.split_whitespace().skip_while(|w| *w != "{ans}").skip(1).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_dialogues: usize,
    /// Tutor question, then alternating student answers and tutor turns;
    /// the last tutor turn (if any) is the correction.
    pub turns_per_dialogue: usize,
    pub profile: StudentProfile,
    pub profile_id: String,
    pub range: NumberRange,
    pub seed: u64,
    pub templates: Templates,
    /// Dialogues whose flattened, hal-augmented form would exceed this many
    /// tokens are redrawn.
    pub context_len: usize,
    /// Restricts problems to this subset of the range.
    #[serde(default)]
    pub problem_pool: Option<Vec<Problem>>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_dialogues: 648,
            turns_per_dialogue: 7,
            profile: StudentProfile::from_pairs(&[
                (CORRECT, 0.4),
                (crate::rules::M1, 0.2),
                (crate::rules::M2, 0.2),
                (crate::rules::M3, 0.2),
            ])
            .expect("default profile is valid"),
            profile_id: "default".into(),
            range: NumberRange::default(),
            seed: 0,
            templates: Templates::default(),
            context_len: 64,
            problem_pool: None,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.n_dialogues == 0 {
            return Err(CorpusError::InvalidSpec("n_dialogues must be at least 1".into()));
        }
        if self.turns_per_dialogue < 2 {
            return Err(CorpusError::InvalidSpec(
                "turns_per_dialogue must allow one tutor/student pair".into(),
            ));
        }
        if self.pool().is_empty() {
            return Err(CorpusError::InvalidSpec("number range contains no problems".into()));
        }
        if let Some(pool) = &self.problem_pool {
            if let Some(p) = pool.iter().find(|p| !self.range.contains(p)) {
                return Err(CorpusError::InvalidSpec(format!("pool problem {p} outside range")));
            }
        }
        let words = self.templates.literal_words();
        if !self.templates.question.contains("{a}")
            || !self.templates.question.contains("{b}")
            || !self.templates.answer.contains("{ans}")
            || !self.templates.correction.contains("{ans}")
        {
            return Err(CorpusError::InvalidSpec("templates are missing placeholders".into()));
        }
        if words.iter().any(|w| w.contains('{') || w.contains('}')) {
            return Err(CorpusError::InvalidSpec("malformed template placeholder".into()));
        }
        Ok(())
    }

    /// Candidate problems in canonical order.
    pub fn pool(&self) -> Vec<Problem> {
        match &self.problem_pool {
            Some(p) => {
                let set: BTreeSet<Problem> = p.iter().copied().collect();
                set.into_iter().collect()
            }
            None => self.range.problems(),
        }
    }

    pub fn hash(&self) -> String {
        short_hash(serde_json::to_string(self).expect("spec serializes").as_bytes())
    }
}

pub fn build_vocab(spec: &CorpusSpec) -> Vocab {
    Vocab::build(spec.templates.literal_words())
}

/// Flattened length of a dialogue: role marker and end-of-turn per turn, plus
/// two hallucination markers per student turn.
pub fn flattened_len(d: &Dialogue) -> usize {
    d.turns
        .iter()
        .map(|t| t.ids.len() + 2 + if t.role == Role::Student { 2 } else { 0 })
        .sum()
}

fn generate_one(
    spec: &CorpusSpec,
    vocab: &Vocab,
    pool: &[Problem],
    profile: &StudentProfile,
    label: &str,
    index: usize,
) -> Result<Dialogue, CorpusError> {
    let mut r = indexed_rng(spec.seed, label, index as u64);
    for _ in 0..MAX_REDRAWS {
        let problem = pool[r.gen_range(0..pool.len())];
        let correct = apply_rule(&builtin_rule(CORRECT)?, &problem)?;
        let mut turns = Vec::with_capacity(spec.turns_per_dialogue);
        turns.push(Turn {
            role: Role::Tutor,
            ids: vocab.encode(&spec.templates.question_text(&problem))?,
            rule: None,
        });
        for k in 1..spec.turns_per_dialogue {
            if k % 2 == 1 {
                let rule = sample_rule(profile, &mut r);
                let ans = apply_rule(&builtin_rule(rule)?, &problem)?;
                turns.push(Turn {
                    role: Role::Student,
                    ids: vocab.encode(&spec.templates.answer_text(&ans))?,
                    rule: Some(rule),
                });
            } else {
                let text = if k == spec.turns_per_dialogue - 1 {
                    spec.templates.correction_text(&correct)
                } else {
                    spec.templates.retry.clone()
                };
                turns.push(Turn { role: Role::Tutor, ids: vocab.encode(&text)?, rule: None });
            }
        }
        let d = Dialogue { id: index as u64, turns, problem, profile_id: spec.profile_id.clone() };
        if flattened_len(&d) <= spec.context_len {
            return Ok(d);
        }
    }
    Err(CorpusError::InvalidSpec(format!(
        "dialogue {index} does not fit a context of {} tokens",
        spec.context_len
    )))
}

fn generate_with(
    spec: &CorpusSpec,
    profile: &StudentProfile,
    label: &str,
    workers: usize,
) -> Result<Vec<Dialogue>, CorpusError> {
    spec.validate()?;
    let vocab = build_vocab(spec);
    let pool = spec.pool();
    let workers = workers.clamp(1, spec.n_dialogues);
    if workers == 1 {
        return (0..spec.n_dialogues)
            .map(|i| generate_one(spec, &vocab, &pool, profile, label, i))
            .collect();
    }
    let chunk = spec.n_dialogues.div_ceil(workers);
    let parts: Vec<Result<Vec<Dialogue>, CorpusError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (vocab, pool) = (&vocab, &pool);
                s.spawn(move || {
                    let lo = w * chunk;
                    let hi = ((w + 1) * chunk).min(spec.n_dialogues);
                    (lo..hi)
                        .map(|i| generate_one(spec, vocab, pool, profile, label, i))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generator thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(spec.n_dialogues);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Dialogue>, CorpusError> {
    generate_corpus_with_workers(spec, 1)
}

/// Output is identical for every worker count.
pub fn generate_corpus_with_workers(
    spec: &CorpusSpec,
    workers: usize,
) -> Result<Vec<Dialogue>, CorpusError> {
    generate_with(spec, &spec.profile, "corpus", workers)
}

/// Same dialogue shapes, but every student answer follows the correct rule.
pub fn generate_pretraining_corpus(spec: &CorpusSpec) -> Result<Vec<Dialogue>, CorpusError> {
    let mut clean = spec.clone();
    clean.profile_id = "clean".into();
    generate_with(&clean, &StudentProfile::only(CORRECT), "pretrain", 1)
}

/// Problem-disjoint partition into `(train, heldout)`.
///
/// Dialogues are grouped by problem; groups are shuffled with `seed` and a
/// subset whose size is closest to the held-out target is chosen.
pub fn split(
    corpus: &[Dialogue],
    fractions: (f64, f64),
    seed: u64,
) -> Result<(Vec<Dialogue>, Vec<Dialogue>), CorpusError> {
    let (ft, fh) = fractions;
    if !(ft >= 0.0 && fh >= 0.0) || (ft + fh - 1.0).abs() > 1e-9 {
        return Err(CorpusError::InfeasibleSplit(format!(
            "fractions ({ft}, {fh}) must be nonnegative and sum to 1"
        )));
    }
    let n = corpus.len();
    let target = (n as f64 * fh).round() as usize;

    let mut groups: BTreeMap<Problem, Vec<usize>> = BTreeMap::new();
    for (i, d) in corpus.iter().enumerate() {
        groups.entry(d.problem).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.shuffle(&mut rng(seed, "split"));

    // Subset-sum over group sizes; `from[s]` records the group that first
    // reached sum `s`, which makes the reconstruction order-dependent but
    // deterministic.
    let mut from: Vec<Option<(usize, usize)>> = vec![None; n + 1];
    let mut reachable = vec![false; n + 1];
    reachable[0] = true;
    for (g, members) in groups.iter().enumerate() {
        let w = members.len();
        for s in (w..=n).rev() {
            if !reachable[s] && reachable[s - w] {
                reachable[s] = true;
                from[s] = Some((g, s - w));
            }
        }
    }
    let best = (0..=n)
        .filter(|&s| reachable[s])
        .min_by_key(|&s| (s.abs_diff(target), s))
        .expect("empty subset is reachable");
    let feasible = best.abs_diff(target) <= 1 && (fh == 0.0 || best > 0) && (ft == 0.0 || best < n);
    if !feasible {
        return Err(CorpusError::InfeasibleSplit(format!(
            "closest problem-disjoint held-out size is {best}, wanted {target}"
        )));
    }
    let mut held = vec![false; n];
    let mut s = best;
    while s > 0 {
        let (g, prev) = from[s].expect("reachable sum has a parent");
        for &i in &groups[g] {
            held[i] = true;
        }
        s = prev;
    }
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for (d, h) in corpus.iter().zip(held) {
        if h {
            heldout.push(d.clone());
        } else {
            train.push(d.clone());
        }
    }
    Ok((train, heldout))
}

pub fn problem_set(corpus: &[Dialogue]) -> BTreeSet<Problem> {
    corpus.iter().map(|d| d.problem).collect()
}

/// First line of every corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub spec_hash: String,
    pub seed: u64,
    pub profile_id: String,
    pub vocab: Vocab,
}

impl CorpusHeader {
    pub fn new(spec: &CorpusSpec, vocab: &Vocab, config_hash: &str) -> Self {
        Self {
            format: "sdplab-corpus".into(),
            version: CORPUS_FORMAT_VERSION,
            tool_version: crate::TOOL_VERSION.into(),
            config_hash: config_hash.into(),
            spec_hash: spec.hash(),
            seed: spec.seed,
            profile_id: spec.profile_id.clone(),
            vocab: vocab.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct TurnRecord {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<u16>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DialogueRecord {
    id: u64,
    problem: Problem,
    turns: Vec<TurnRecord>,
}

pub(crate) fn turn_to_record(t: &Turn, vocab: &Vocab) -> Result<TurnRecord, CorpusError> {
    Ok(TurnRecord { role: t.role, text: vocab.decode(&t.ids)?, rule: t.rule.map(|r| r.0) })
}

pub(crate) fn turn_from_record(r: TurnRecord, vocab: &Vocab) -> Result<Turn, String> {
    let ids = vocab.encode(&r.text).map_err(|e| e.to_string())?;
    if ids.iter().any(|&id| vocab.is_special(id)) {
        return Err("turn text contains a special token".into());
    }
    Ok(Turn { role: r.role, ids, rule: r.rule.map(RuleId) })
}

pub fn write_corpus<W: Write>(
    mut w: W,
    header: &CorpusHeader,
    corpus: &[Dialogue],
) -> Result<(), CorpusError> {
    writeln!(w, "{}", serde_json::to_string(header).expect("header serializes"))?;
    for d in corpus {
        let rec = DialogueRecord {
            id: d.id,
            problem: d.problem,
            turns: d.turns.iter().map(|t| turn_to_record(t, &header.vocab)).collect::<Result<_, _>>()?,
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
    }
    Ok(())
}

pub fn corpus_to_string(header: &CorpusHeader, corpus: &[Dialogue]) -> Result<String, CorpusError> {
    let mut buf = Vec::new();
    write_corpus(&mut buf, header, corpus)?;
    Ok(String::from_utf8(buf).expect("serialized corpus is UTF-8"))
}

/// Parses a corpus file. An empty input yields no header and no dialogues.
pub fn read_corpus<R: BufRead>(r: R) -> Result<(Option<CorpusHeader>, Vec<Dialogue>), CorpusError> {
    let mut header: Option<CorpusHeader> = None;
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |reason: String| CorpusError::ParseError { line: line_no, reason };
        match &header {
            None => {
                let h: CorpusHeader =
                    serde_json::from_str(&line).map_err(|e| perr(format!("header: {e}")))?;
                if h.version != CORPUS_FORMAT_VERSION {
                    return Err(perr(format!("unsupported corpus version {}", h.version)));
                }
                header = Some(h);
            }
            Some(h) => {
                let rec: DialogueRecord =
                    serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
                let turns = rec
                    .turns
                    .into_iter()
                    .map(|t| turn_from_record(t, &h.vocab))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(perr)?;
                out.push(Dialogue {
                    id: rec.id,
                    turns,
                    problem: Problem::new(rec.problem.a, rec.problem.b)
                        .map_err(|e| perr(e.to_string()))?,
                    profile_id: h.profile_id.clone(),
                });
            }
        }
    }
    Ok((header, out))
}

pub fn corpus_from_str(s: &str) -> Result<(Option<CorpusHeader>, Vec<Dialogue>), CorpusError> {
    read_corpus(s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::{builtin_rules, parse_answer, M1, M2, M3};

    fn spec(n: usize, seed: u64) -> CorpusSpec {
        CorpusSpec { n_dialogues: n, seed, ..CorpusSpec::default() }
    }

    fn answer_tokens<'a>(vocab: &'a Vocab, spec: &CorpusSpec, t: &Turn) -> Vec<&'a str> {
        let prefix = spec.templates.answer_prefix().len();
        let words: Vec<&str> = t.ids.iter().map(|&i| vocab.token(i).unwrap()).collect();
        let skip = if t.role == Role::Tutor { 1 + prefix } else { prefix };
        words[skip..].to_vec()
    }

    #[test]
    fn default_vocab_has_hal_markers_and_fraction_slash() {
        let v = build_vocab(&CorpusSpec::default());
        assert_eq!(v.token(v.special(crate::vocab::Special::HalOpen)).unwrap(), "[hal]");
        assert!(v.id("/").is_ok());
        assert_eq!(v.len(), 7 + 11 + 7);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&spec(1, 7)).unwrap();
        let b = generate_corpus(&spec(1, 7)).unwrap();
        assert_eq!(a, b);
        let v = build_vocab(&spec(1, 7));
        let h = CorpusHeader::new(&spec(1, 7), &v, "x");
        assert_eq!(corpus_to_string(&h, &a).unwrap(), corpus_to_string(&h, &b).unwrap());
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let s = spec(97, 3);
        let one = generate_corpus_with_workers(&s, 1).unwrap();
        for w in [2, 3, 8] {
            assert_eq!(generate_corpus_with_workers(&s, w).unwrap(), one);
        }
    }

    #[test]
    fn structure_and_answer_soundness() {
        let s = spec(200, 5);
        let v = build_vocab(&s);
        let corpus = generate_corpus(&s).unwrap();
        assert_eq!(corpus.len(), 200);
        let rules = builtin_rules();
        for d in &corpus {
            assert_eq!(d.turns.len(), s.turns_per_dialogue);
            for (k, t) in d.turns.iter().enumerate() {
                assert_eq!(t.role, if k % 2 == 0 { Role::Tutor } else { Role::Student });
                assert!(t.ids.iter().all(|&id| !v.is_special(id)));
                if t.role == Role::Student {
                    let rule = &rules[t.rule.unwrap().0 as usize];
                    let got = parse_answer(&answer_tokens(&v, &s, t)).unwrap();
                    assert_eq!(got, rule.solve(&d.problem).unwrap());
                }
            }
            let last = d.turns.last().unwrap();
            let got = parse_answer(&answer_tokens(&v, &s, last)).unwrap();
            assert_eq!(got, rules[0].solve(&d.problem).unwrap());
            assert!(flattened_len(d) <= s.context_len);
        }
    }

    #[test]
    fn degenerate_profile_answers_match_correction() {
        let s = CorpusSpec { profile: StudentProfile::only(CORRECT), ..spec(50, 9) };
        let v = build_vocab(&s);
        for d in generate_corpus(&s).unwrap() {
            let corr = answer_tokens(&v, &s, d.turns.last().unwrap());
            for t in d.student_turns() {
                assert_eq!(answer_tokens(&v, &s, t), corr);
            }
        }
    }

    #[test]
    fn rule_frequencies_follow_profile() {
        let s = CorpusSpec { turns_per_dialogue: 2, ..spec(10_000, 21) };
        let corpus = generate_corpus(&s).unwrap();
        let mut counts: BTreeMap<RuleId, usize> = BTreeMap::new();
        let mut total = 0;
        for d in &corpus {
            for t in d.student_turns() {
                *counts.entry(t.rule.unwrap()).or_default() += 1;
                total += 1;
            }
        }
        for (rule, w) in [(CORRECT, 0.4), (M1, 0.2), (M2, 0.2), (M3, 0.2)] {
            let f = counts[&rule] as f64 / total as f64;
            assert!((f - w).abs() <= 0.02, "{rule}: {f}");
        }
    }

    #[test]
    fn pretraining_corpus_is_clean_and_in_range() {
        let s = CorpusSpec { range: NumberRange { max_abs: 6, ..NumberRange::default() }, ..spec(300, 4) };
        let clean = generate_pretraining_corpus(&s).unwrap();
        assert_eq!(clean, generate_pretraining_corpus(&s).unwrap());
        for d in &clean {
            assert!(d.student_turns().all(|t| t.rule == Some(CORRECT)));
            assert!(d.problem.a.abs() <= 6 && d.problem.b.abs() <= 6 && d.problem.a != 0);
            assert_eq!(d.problem.b % d.problem.a, 0);
        }
    }

    #[test]
    fn problem_pool_restricts_sampling() {
        let pool = vec![Problem { a: 2, b: 4 }, Problem { a: -3, b: 9 }];
        let s = CorpusSpec { problem_pool: Some(pool.clone()), ..spec(100, 1) };
        let got = problem_set(&generate_corpus(&s).unwrap());
        assert!(got.iter().all(|p| pool.contains(p)));
        let bad = CorpusSpec { problem_pool: Some(vec![Problem { a: 2, b: 3 }]), ..spec(1, 1) };
        assert!(matches!(generate_corpus(&bad), Err(CorpusError::InvalidSpec(_))));
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(generate_corpus(&spec(0, 1)), Err(CorpusError::InvalidSpec(_))));
        let empty = CorpusSpec { range: NumberRange { max_abs: 0, ..NumberRange::default() }, ..spec(1, 1) };
        assert!(matches!(generate_corpus(&empty), Err(CorpusError::InvalidSpec(_))));
        let tight = CorpusSpec { context_len: 8, ..spec(1, 1) };
        assert!(matches!(generate_corpus(&tight), Err(CorpusError::InvalidSpec(_))));
    }

    #[test]
    fn split_trivial_fraction() {
        let c = generate_corpus(&spec(30, 2)).unwrap();
        let (tr, he) = split(&c, (1.0, 0.0), 1).unwrap();
        assert_eq!(tr.len(), 30);
        assert!(he.is_empty());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let c = generate_corpus(&spec(648, 2)).unwrap();
        let (tr, he) = split(&c, (0.9, 0.1), 17).unwrap();
        assert!(he.len().abs_diff(65) <= 1, "{}", he.len());
        assert!(tr.len().abs_diff(583) <= 1);
        assert_eq!(tr.len() + he.len(), 648);
        assert!(problem_set(&tr).is_disjoint(&problem_set(&he)));
        assert_eq!(split(&c, (0.9, 0.1), 17).unwrap(), (tr, he));
    }

    #[test]
    fn split_infeasible_when_one_problem() {
        let pool = vec![Problem { a: 1, b: 1 }];
        let c = generate_corpus(&CorpusSpec { problem_pool: Some(pool), ..spec(20, 2) }).unwrap();
        assert!(matches!(split(&c, (0.5, 0.5), 1), Err(CorpusError::InfeasibleSplit(_))));
    }

    #[test]
    fn serialization_round_trip() {
        let s = spec(40, 8);
        let v = build_vocab(&s);
        let c = generate_corpus(&s).unwrap();
        let h = CorpusHeader::new(&s, &v, "cafe");
        let text = corpus_to_string(&h, &c).unwrap();
        let (h2, c2) = corpus_from_str(&text).unwrap();
        assert_eq!(h2.unwrap(), h);
        assert_eq!(c2, c);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let (h, c) = corpus_from_str("").unwrap();
        assert!(h.is_none());
        assert!(c.is_empty());
    }

    #[test]
    fn unknown_role_is_a_parse_error() {
        let s = spec(2, 8);
        let v = build_vocab(&s);
        let c = generate_corpus(&s).unwrap();
        let text = corpus_to_string(&CorpusHeader::new(&s, &v, "cafe"), &c).unwrap();
        let bad = text.replacen("\"role\":\"tutor\"", "\"role\":\"teacher\"", 1);
        match corpus_from_str(&bad) {
            Err(CorpusError::ParseError { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
