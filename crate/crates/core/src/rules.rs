//! The synthetic knowledge world: linear equations `a x = b`, the rule that
//! solves them correctly, misconception rules, and student profiles.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use num_rational::Rational64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::RuleError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Problem {
    pub a: i64,
    pub b: i64,
}

impl Problem {
    pub fn new(a: i64, b: i64) -> Result<Self, RuleError> {
        if a == 0 {
            return Err(RuleError::InvalidProblem(format!("coefficient must be nonzero (b={b})")));
        }
        Ok(Self { a, b })
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x = {}", self.a, self.b)
    }
}

/// The finite set of problems a corpus may draw from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumberRange {
    pub max_abs: i64,
    /// Keep only problems where `a` divides `b`.
    pub require_divisible: bool,
    pub require_nonzero_b: bool,
}

impl Default for NumberRange {
    fn default() -> Self {
        Self { max_abs: 9, require_divisible: true, require_nonzero_b: true }
    }
}

impl NumberRange {
    pub fn contains(&self, p: &Problem) -> bool {
        p.a != 0
            && p.a.abs() <= self.max_abs
            && p.b.abs() <= self.max_abs
            && (!self.require_nonzero_b || p.b != 0)
            && (!self.require_divisible || p.b % p.a == 0)
    }

    /// All problems in the range, ordered by `(a, b)`.
    pub fn problems(&self) -> Vec<Problem> {
        let m = self.max_abs.max(0);
        let mut out = Vec::new();
        for a in -m..=m {
            for b in -m..=m {
                let p = Problem { a, b };
                if self.contains(&p) {
                    out.push(p);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RuleId(pub u16);

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type SolverFn = dyn Fn(&Problem) -> Option<Rational64> + Send + Sync;

#[derive(Clone)]
pub enum Solver {
    /// x = b / a
    Correct,
    /// x = a / b
    InverseRatio,
    /// x = b - a
    Difference,
    /// x = b + a
    Sum,
    Custom(Arc<SolverFn>),
}

impl fmt::Debug for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Solver::Correct => f.write_str("Correct"),
            Solver::InverseRatio => f.write_str("InverseRatio"),
            Solver::Difference => f.write_str("Difference"),
            Solver::Sum => f.write_str("Sum"),
            Solver::Custom(_) => f.write_str("Custom"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub id: RuleId,
    pub name: String,
    pub solver: Solver,
}

pub const CORRECT: RuleId = RuleId(0);
pub const M1: RuleId = RuleId(1);
pub const M2: RuleId = RuleId(2);
pub const M3: RuleId = RuleId(3);

impl Rule {
    pub fn custom(
        id: u16,
        name: impl Into<String>,
        f: impl Fn(&Problem) -> Option<Rational64> + Send + Sync + 'static,
    ) -> Self {
        Self { id: RuleId(id), name: name.into(), solver: Solver::Custom(Arc::new(f)) }
    }

    /// Exact answer of this rule, `None` where its formula is undefined.
    pub fn solve(&self, p: &Problem) -> Option<Rational64> {
        match &self.solver {
            Solver::Correct => (p.a != 0).then(|| Rational64::new(p.b, p.a)),
            Solver::InverseRatio => (p.b != 0).then(|| Rational64::new(p.a, p.b)),
            Solver::Difference => Some(Rational64::from_integer(p.b - p.a)),
            Solver::Sum => Some(Rational64::from_integer(p.b + p.a)),
            Solver::Custom(f) => f(p),
        }
    }
}

/// The correct rule followed by the three misconceptions, ids 0..=3.
pub fn builtin_rules() -> Vec<Rule> {
    vec![
        Rule { id: CORRECT, name: "CORRECT".into(), solver: Solver::Correct },
        Rule { id: M1, name: "M1".into(), solver: Solver::InverseRatio },
        Rule { id: M2, name: "M2".into(), solver: Solver::Difference },
        Rule { id: M3, name: "M3".into(), solver: Solver::Sum },
    ]
}

pub fn builtin_rule(id: RuleId) -> Result<Rule, RuleError> {
    builtin_rules()
        .into_iter()
        .find(|r| r.id == id)
        .ok_or_else(|| RuleError::UnknownRule(id.to_string()))
}

pub fn rule_by_name(name: &str) -> Result<Rule, RuleError> {
    builtin_rules()
        .into_iter()
        .find(|r| r.name == name)
        .ok_or_else(|| RuleError::UnknownRule(name.to_string()))
}

pub fn apply_rule(rule: &Rule, p: &Problem) -> Result<Rational64, RuleError> {
    rule.solve(p).ok_or_else(|| RuleError::UndefinedForProblem {
        rule: rule.name.clone(),
        a: p.a,
        b: p.b,
    })
}

/// Spells an exact answer as whitespace-separated tokens: an optional minus
/// sign, one token per digit, and `/ q` for non-integers in lowest terms.
pub fn render_answer(x: &Rational64) -> String {
    fn digits(n: i64, out: &mut Vec<String>) {
        out.extend(n.to_string().chars().map(|c| c.to_string()));
    }
    let mut out = Vec::new();
    if *x.numer() < 0 {
        out.push("-".to_string());
    }
    digits(x.numer().abs(), &mut out);
    if *x.denom() != 1 {
        out.push("/".to_string());
        digits(*x.denom(), &mut out);
    }
    out.join(" ")
}

/// Inverse of [`render_answer`]. Returns `None` for anything that is not a
/// canonically spelled number.
pub fn parse_answer<S: AsRef<str>>(tokens: &[S]) -> Option<Rational64> {
    fn number<S: AsRef<str>>(toks: &[S]) -> Option<i64> {
        if toks.is_empty() || toks.len() > 18 {
            return None;
        }
        let mut n: i64 = 0;
        for t in toks {
            let t = t.as_ref();
            if t.len() != 1 {
                return None;
            }
            let d = t.chars().next()?.to_digit(10)?;
            n = n * 10 + d as i64;
        }
        if toks.len() > 1 && toks[0].as_ref() == "0" {
            return None;
        }
        Some(n)
    }
    let (neg, rest) = match tokens.first() {
        Some(t) if t.as_ref() == "-" => (true, &tokens[1..]),
        _ => (false, tokens),
    };
    let slash = rest.iter().position(|t| t.as_ref() == "/");
    let value = match slash {
        None => Rational64::from_integer(number(rest)?),
        Some(i) => {
            let p = number(&rest[..i])?;
            let q = number(&rest[i + 1..])?;
            if q <= 1 || p == 0 {
                return None;
            }
            let r = Rational64::new(p, q);
            if *r.numer() != p {
                return None;
            }
            r
        }
    };
    if neg && *value.numer() == 0 {
        return None;
    }
    Some(if neg { -value } else { value })
}

/// Mixture over rules describing how a simulated student answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<RuleId, f64>", into = "BTreeMap<RuleId, f64>")]
pub struct StudentProfile {
    weights: BTreeMap<RuleId, f64>,
}

impl StudentProfile {
    pub fn new(weights: BTreeMap<RuleId, f64>) -> Result<Self, RuleError> {
        if weights.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(RuleError::InvalidProfile("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(RuleError::InvalidProfile(format!("weights sum to {total}, expected 1")));
        }
        if !weights.values().any(|w| *w > 0.0) {
            return Err(RuleError::InvalidProfile("empty support".into()));
        }
        Ok(Self { weights })
    }

    pub fn from_pairs(pairs: &[(RuleId, f64)]) -> Result<Self, RuleError> {
        Self::new(pairs.iter().copied().collect())
    }

    pub fn only(rule: RuleId) -> Self {
        Self::from_pairs(&[(rule, 1.0)]).expect("degenerate profile is valid")
    }

    pub fn weights(&self) -> &BTreeMap<RuleId, f64> {
        &self.weights
    }

    pub fn weight(&self, id: RuleId) -> f64 {
        self.weights.get(&id).copied().unwrap_or(0.0)
    }

    pub fn support(&self) -> impl Iterator<Item = RuleId> + '_ {
        self.weights.iter().filter(|(_, w)| **w > 0.0).map(|(id, _)| *id)
    }
}

impl TryFrom<BTreeMap<RuleId, f64>> for StudentProfile {
    type Error = RuleError;
    fn try_from(w: BTreeMap<RuleId, f64>) -> Result<Self, Self::Error> {
        Self::new(w)
    }
}

impl From<StudentProfile> for BTreeMap<RuleId, f64> {
    fn from(p: StudentProfile) -> Self {
        p.weights
    }
}

pub fn sample_rule<R: Rng + ?Sized>(profile: &StudentProfile, rng: &mut R) -> RuleId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for (id, w) in &profile.weights {
        if *w <= 0.0 {
            continue;
        }
        acc += w;
        last = Some(*id);
        if u < acc {
            return *id;
        }
    }
    // u landed in the rounding gap above the cumulative total.
    last.expect("profile support is nonempty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p(a: i64, b: i64) -> Problem {
        Problem::new(a, b).unwrap()
    }

    fn r(n: i64) -> Rational64 {
        Rational64::from_integer(n)
    }

    #[test]
    fn apply_rule_examples() {
        let rules = builtin_rules();
        assert_eq!(apply_rule(&rules[0], &p(2, 6)).unwrap(), r(3));
        assert_eq!(apply_rule(&rules[2], &p(2, 6)).unwrap(), r(4));
        assert!(matches!(
            apply_rule(&rules[1], &p(3, 0)),
            Err(RuleError::UndefinedForProblem { .. })
        ));
    }

    #[test]
    fn zero_coefficient_rejected() {
        assert!(Problem::new(0, 3).is_err());
    }

    #[test]
    fn builtin_rules_disagree_on_witness() {
        let answers: Vec<_> = builtin_rules().iter().map(|x| x.solve(&p(1, 3)).unwrap()).collect();
        assert_eq!(answers, vec![r(3), Rational64::new(1, 3), r(2), r(4)]);
    }

    #[test]
    fn correct_is_integer_when_divisible() {
        for prob in NumberRange::default().problems() {
            assert!(builtin_rules()[0].solve(&prob).unwrap().is_integer());
        }
    }

    #[test]
    fn default_range_has_all_rules_defined() {
        let probs = NumberRange::default().problems();
        assert_eq!(probs.len(), 92);
        for prob in &probs {
            for rule in builtin_rules() {
                assert!(rule.solve(prob).is_some());
            }
        }
    }

    #[test]
    fn render_and_parse() {
        assert_eq!(render_answer(&r(12)), "1 2");
        assert_eq!(render_answer(&r(-3)), "- 3");
        assert_eq!(render_answer(&r(0)), "0");
        assert_eq!(render_answer(&Rational64::new(2, -6)), "- 1 / 3");
        for x in [r(12), r(-3), r(0), Rational64::new(-1, 3), Rational64::new(7, 9)] {
            let s = render_answer(&x);
            let toks: Vec<&str> = s.split(' ').collect();
            assert_eq!(parse_answer(&toks), Some(x));
        }
        assert_eq!(parse_answer(&["x"]), None);
        assert_eq!(parse_answer::<&str>(&[]), None);
        assert_eq!(parse_answer(&["2", "/", "4"]), None);
        assert_eq!(parse_answer(&["0", "3"]), None);
        assert_eq!(parse_answer(&["-", "0"]), None);
        assert_eq!(parse_answer(&["3", "/", "1"]), None);
    }

    #[test]
    fn profile_validation() {
        assert!(StudentProfile::from_pairs(&[(CORRECT, 0.5)]).is_err());
        assert!(StudentProfile::from_pairs(&[(CORRECT, 1.5), (M1, -0.5)]).is_err());
        assert!(StudentProfile::from_pairs(&[(CORRECT, 0.4), (M2, 0.6)]).is_ok());
    }

    #[test]
    fn degenerate_profile_always_samples_its_rule() {
        let prof = StudentProfile::only(CORRECT);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..1000).all(|_| sample_rule(&prof, &mut rng) == CORRECT));
    }

    #[test]
    fn sampling_frequencies_match_weights() {
        let prof = StudentProfile::from_pairs(&[(CORRECT, 0.4), (M2, 0.6)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let hits = (0..n).filter(|_| sample_rule(&prof, &mut rng) == CORRECT).count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.4).abs() < 0.01, "{freq}");
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let prof = StudentProfile::from_pairs(&[(CORRECT, 0.4), (M1, 0.2), (M2, 0.4)]).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..200).map(|_| sample_rule(&prof, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }
}
