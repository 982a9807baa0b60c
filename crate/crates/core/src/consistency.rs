//! Consistency between rules, the consistency graph, and enumeration of
//! maximal mutually consistent rule sets ("student models").
//!
//! A set of rules can be held by one internally consistent model only when
//! every pair in it is consistent, so the candidate models are exactly the
//! maximal cliques of the consistency graph. The number of cliques is a lower
//! bound on the number of separate models a split student/tutor design needs.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use crate::error::ConsistencyError;
use crate::rules::{Problem, Rule, RuleId};

pub type RulePredicate = dyn Fn(&Rule, &Rule) -> bool + Send + Sync;

#[derive(Clone)]
pub enum RelationKind {
    /// Rules agree on every probe problem where both are defined.
    Pointwise,
    /// Rules agree on at least one probe problem where both are defined.
    Existential,
    /// User predicate. Evaluated with the lower rule id first so the relation
    /// stays symmetric.
    Custom(Arc<RulePredicate>),
}

impl fmt::Debug for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RelationKind::Pointwise => f.write_str("Pointwise"),
            RelationKind::Existential => f.write_str("Existential"),
            RelationKind::Custom(_) => f.write_str("Custom"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConsistencyRelation {
    pub kind: RelationKind,
    pub probe_domain: Vec<Problem>,
}

impl ConsistencyRelation {
    pub fn new(kind: RelationKind, probe_domain: Vec<Problem>) -> Self {
        Self { kind, probe_domain }
    }
}

pub fn check_consistency(
    r1: &Rule,
    r2: &Rule,
    rel: &ConsistencyRelation,
) -> Result<bool, ConsistencyError> {
    if rel.probe_domain.is_empty() {
        return Err(ConsistencyError::EmptyProbeDomain);
    }
    if r1.id == r2.id {
        return Ok(true);
    }
    let mut jointly_defined = rel
        .probe_domain
        .iter()
        .filter_map(|p| Some((r1.solve(p)?, r2.solve(p)?)));
    Ok(match &rel.kind {
        RelationKind::Pointwise => jointly_defined.all(|(x, y)| x == y),
        RelationKind::Existential => jointly_defined.any(|(x, y)| x == y),
        RelationKind::Custom(pred) => {
            let (lo, hi) = if r1.id <= r2.id { (r1, r2) } else { (r2, r1) };
            pred(lo, hi)
        }
    })
}

/// Undirected graph over rules. Every node is implicitly self-consistent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsistencyGraph {
    nodes: Vec<RuleId>,
    names: Vec<String>,
    adj: Vec<Vec<bool>>,
}

impl ConsistencyGraph {
    /// Graph with no edges between distinct nodes.
    pub fn isolated(nodes: Vec<RuleId>, names: Vec<String>) -> Result<Self, ConsistencyError> {
        if nodes.len() != names.len() {
            return Err(ConsistencyError::InvalidGraph("one name per node required".into()));
        }
        let distinct: BTreeSet<_> = nodes.iter().collect();
        if distinct.len() != nodes.len() {
            return Err(ConsistencyError::InvalidGraph("duplicate rule id".into()));
        }
        let n = nodes.len();
        Ok(Self { nodes, names, adj: vec![vec![false; n]; n] })
    }

    /// Graph on nodes `0..n` (rule ids equal indices) with the given edges.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, ConsistencyError> {
        let nodes = (0..n).map(|i| RuleId(i as u16)).collect();
        let names = (0..n).map(|i| format!("R{i}")).collect();
        let mut g = Self::isolated(nodes, names)?;
        for &(i, j) in edges {
            g.add_edge(i, j)?;
        }
        Ok(g)
    }

    pub fn add_edge(&mut self, i: usize, j: usize) -> Result<(), ConsistencyError> {
        let n = self.len();
        if i >= n || j >= n {
            return Err(ConsistencyError::InvalidGraph(format!("edge ({i}, {j}) out of range")));
        }
        if i != j {
            self.adj[i][j] = true;
            self.adj[j][i] = true;
        }
        Ok(())
    }

    pub fn remove_edge(&mut self, i: usize, j: usize) {
        if i != j {
            self.adj[i][j] = false;
            self.adj[j][i] = false;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[RuleId] {
        &self.nodes
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn index_of(&self, id: RuleId) -> Option<usize> {
        self.nodes.iter().position(|&n| n == id)
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i == j || self.adj[i][j]
    }

    /// Unordered pairs of distinct consistent nodes, `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.adj[i][j])
            .collect()
    }
}

pub fn build_graph(
    rules: &[Rule],
    rel: &ConsistencyRelation,
) -> Result<ConsistencyGraph, ConsistencyError> {
    if rel.probe_domain.is_empty() {
        return Err(ConsistencyError::EmptyProbeDomain);
    }
    let mut g = ConsistencyGraph::isolated(
        rules.iter().map(|r| r.id).collect(),
        rules.iter().map(|r| r.name.clone()).collect(),
    )?;
    for i in 0..rules.len() {
        for j in i + 1..rules.len() {
            if check_consistency(&rules[i], &rules[j], rel)? {
                g.add_edge(i, j)?;
            }
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ModelSet {
    pub rules: BTreeSet<RuleId>,
    pub is_tutor: bool,
}

/// Fixed-width bitset over node indices.
#[derive(Clone, PartialEq, Eq)]
struct Bits(Vec<u64>);

impl Bits {
    fn empty(n: usize) -> Self {
        Bits(vec![0; n.div_ceil(64)])
    }
    fn full(n: usize) -> Self {
        let mut b = Self::empty(n);
        for i in 0..n {
            b.insert(i);
        }
        b
    }
    fn insert(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }
    fn remove(&mut self, i: usize) {
        self.0[i / 64] &= !(1 << (i % 64));
    }
    fn is_empty(&self) -> bool {
        self.0.iter().all(|w| *w == 0)
    }
    fn and(&self, other: &Bits) -> Bits {
        Bits(self.0.iter().zip(&other.0).map(|(a, b)| a & b).collect())
    }
    fn and_not(&self, other: &Bits) -> Bits {
        Bits(self.0.iter().zip(&other.0).map(|(a, b)| a & !b).collect())
    }
    fn count_and(&self, other: &Bits) -> u32 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a & b).count_ones()).sum()
    }
    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().flat_map(|(w, &word)| {
            (0..64).filter(move |b| word & (1 << b) != 0).map(move |b| w * 64 + b)
        })
    }
}

/// All maximal cliques of `g` (Bron–Kerbosch with Tomita pivoting), each as a
/// [`ModelSet`] with `is_tutor == false`, sorted by their rule ids.
pub fn enumerate_model_sets(g: &ConsistencyGraph) -> Vec<ModelSet> {
    let n = g.len();
    let neighbors: Vec<Bits> = (0..n)
        .map(|i| {
            let mut b = Bits::empty(n);
            for j in 0..n {
                if i != j && g.adj[i][j] {
                    b.insert(j);
                }
            }
            b
        })
        .collect();

    fn expand(
        nbrs: &[Bits],
        clique: &mut Vec<usize>,
        mut cand: Bits,
        mut excl: Bits,
        out: &mut Vec<Vec<usize>>,
    ) {
        if cand.is_empty() {
            if excl.is_empty() {
                out.push(clique.clone());
            }
            return;
        }
        let pivot = cand
            .iter()
            .chain(excl.iter())
            .max_by_key(|&u| (cand.count_and(&nbrs[u]), std::cmp::Reverse(u)))
            .expect("candidate set is nonempty");
        for v in cand.and_not(&nbrs[pivot]).iter().collect::<Vec<_>>() {
            clique.push(v);
            expand(nbrs, clique, cand.and(&nbrs[v]), excl.and(&nbrs[v]), out);
            clique.pop();
            cand.remove(v);
            excl.insert(v);
        }
    }

    let mut raw = Vec::new();
    if n > 0 {
        expand(&neighbors, &mut Vec::new(), Bits::full(n), Bits::empty(n), &mut raw);
    }
    let mut sets: Vec<ModelSet> = raw
        .into_iter()
        .map(|c| ModelSet { rules: c.into_iter().map(|i| g.nodes[i]).collect(), is_tutor: false })
        .collect();
    sets.sort_by(|a, b| a.rules.iter().cmp(b.rules.iter()));
    sets
}

pub fn required_model_count(sets: &[ModelSet]) -> usize {
    sets.len()
}

pub fn identify_tutor_set(
    sets: &[ModelSet],
    correct: &BTreeSet<RuleId>,
) -> Result<ModelSet, ConsistencyError> {
    let containing: Vec<&ModelSet> = sets.iter().filter(|s| correct.is_subset(&s.rules)).collect();
    match containing.as_slice() {
        [] => Err(ConsistencyError::NoConsistentTutorSet),
        [one] => Ok(ModelSet { rules: one.rules.clone(), is_tutor: true }),
        many => Err(ConsistencyError::AmbiguousTutorSet(many.len())),
    }
}

/// Enumerates model sets and flags the tutor set when it is unique.
pub fn model_sets_with_tutor(
    g: &ConsistencyGraph,
    correct: &BTreeSet<RuleId>,
) -> (Vec<ModelSet>, Result<ModelSet, ConsistencyError>) {
    let mut sets = enumerate_model_sets(g);
    let tutor = identify_tutor_set(&sets, correct);
    if let Ok(t) = &tutor {
        for s in &mut sets {
            s.is_tutor = s.rules == t.rules;
        }
    }
    (sets, tutor)
}

/// One line per set with sorted rule names, then `n_models = <n>`.
pub fn format_model_sets(g: &ConsistencyGraph, sets: &[ModelSet]) -> String {
    let mut out = String::new();
    for (k, s) in sets.iter().enumerate() {
        let mut names: Vec<&str> = s
            .rules
            .iter()
            .filter_map(|id| g.index_of(*id).map(|i| g.name(i)))
            .collect();
        names.sort_unstable();
        out.push_str(&format!("set {k}: {{{}}}", names.join(", ")));
        if s.is_tutor {
            out.push_str(" [tutor]");
        }
        out.push('\n');
    }
    out.push_str(&format!("n_models = {}\n", required_model_count(sets)));
    out
}
