//! Constrained one-to-one matching between consecutive frames.
//!
//! A matching problem holds scored candidate links between source instances
//! (frame t) and target instances (frame t+1). Selecting a subset of
//! candidates is feasible when every instance appears in at most one selected
//! link; `build_system_matrix` exposes that constraint as a 0/1 matrix so
//! feasibility can be checked mechanically.
//!
//! Three solvers are provided: an iterative conflict-resolution solver
//! (`match_algorithm1`, the production path), a descending-score greedy sweep
//! (`match_greedy_sorted`, equal to the former whenever scores are distinct),
//! and an exhaustive optimum (`match_bruteforce`) that serves as a small-size
//! oracle in tests.

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("candidate references unknown {side} id {id}")]
    UnknownInstance { side: &'static str, id: u32 },
    #[error("duplicate candidate pair ({source_id}, {target_id})")]
    DuplicatePair { source_id: u32, target_id: u32 },
    #[error("candidate ({source_id}, {target_id}) has invalid score {score}; scores must be finite and >= 0")]
    BadScore { source_id: u32, target_id: u32, score: f64 },
    #[error("problem has {n} candidates; exhaustive search is capped at {cap}")]
    TooLarge { n: usize, cap: usize },
}

/// One scored candidate link from a source to a target instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateLink {
    pub source_id: u32,
    pub target_id: u32,
    pub score: f64,
}

/// A one-to-one matching problem over one frame pair.
///
/// Candidates are kept in canonical (source_id, target_id) order; selection
/// vectors index into that order.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentProblem {
    sources: Vec<u32>,
    targets: Vec<u32>,
    candidates: Vec<CandidateLink>,
}

impl AssignmentProblem {
    /// Builds a problem, validating scores, pair uniqueness and id membership.
    /// `sources` and `targets` may list instances with no candidates; those
    /// simply end up unmatched.
    pub fn new(
        sources: Vec<u32>,
        targets: Vec<u32>,
        mut candidates: Vec<CandidateLink>,
    ) -> Result<Self, MatchError> {
        let source_set: BTreeSet<u32> = sources.iter().copied().collect();
        let target_set: BTreeSet<u32> = targets.iter().copied().collect();
        for c in &candidates {
            if !source_set.contains(&c.source_id) {
                return Err(MatchError::UnknownInstance { side: "source", id: c.source_id });
            }
            if !target_set.contains(&c.target_id) {
                return Err(MatchError::UnknownInstance { side: "target", id: c.target_id });
            }
            if !c.score.is_finite() || c.score < 0.0 {
                return Err(MatchError::BadScore {
                    source_id: c.source_id,
                    target_id: c.target_id,
                    score: c.score,
                });
            }
        }
        candidates.sort_by_key(|c| (c.source_id, c.target_id));
        for w in candidates.windows(2) {
            if w[0].source_id == w[1].source_id && w[0].target_id == w[1].target_id {
                return Err(MatchError::DuplicatePair {
                    source_id: w[0].source_id,
                    target_id: w[0].target_id,
                });
            }
        }
        let sources: Vec<u32> = source_set.into_iter().collect();
        let targets: Vec<u32> = target_set.into_iter().collect();
        Ok(Self { sources, targets, candidates })
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn sources(&self) -> &[u32] {
        &self.sources
    }

    pub fn targets(&self) -> &[u32] {
        &self.targets
    }

    /// Candidates in canonical (source_id, target_id) order.
    pub fn candidates(&self) -> &[CandidateLink] {
        &self.candidates
    }
}

/// Result of solving an [`AssignmentProblem`].
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Selection vector over the problem's canonical candidate order.
    pub selection: Vec<bool>,
    /// Selected (source_id, target_id) pairs, ascending by source id.
    pub matched_pairs: Vec<(u32, u32)>,
    pub unmatched_sources: Vec<u32>,
    pub unmatched_targets: Vec<u32>,
}

impl MatchResult {
    fn from_selection(problem: &AssignmentProblem, selection: Vec<bool>) -> Self {
        let mut matched_pairs = Vec::new();
        let mut used_sources = BTreeSet::new();
        let mut used_targets = BTreeSet::new();
        for (k, c) in problem.candidates.iter().enumerate() {
            if selection[k] {
                matched_pairs.push((c.source_id, c.target_id));
                used_sources.insert(c.source_id);
                used_targets.insert(c.target_id);
            }
        }
        matched_pairs.sort_unstable();
        let unmatched_sources =
            problem.sources.iter().copied().filter(|s| !used_sources.contains(s)).collect();
        let unmatched_targets =
            problem.targets.iter().copied().filter(|t| !used_targets.contains(t)).collect();
        Self { selection, matched_pairs, unmatched_sources, unmatched_targets }
    }

    pub fn total_score(&self, problem: &AssignmentProblem) -> f64 {
        self.selection
            .iter()
            .zip(problem.candidates.iter())
            .filter(|(&sel, _)| sel)
            .map(|(_, c)| c.score)
            .sum()
    }
}

/// The system matrix of the one-to-one constraint: one row per source then per
/// target, one column per candidate. Each column carries exactly two ones (its
/// source row and its target row); a selection `x` is feasible iff `Y x <= b`
/// with `b` all ones.
pub fn build_system_matrix(problem: &AssignmentProblem) -> (Vec<Vec<u8>>, Vec<u8>) {
    let m = problem.sources.len();
    let n = problem.targets.len();
    let cols = problem.candidates.len();
    let mut y = vec![vec![0u8; cols]; m + n];
    for (k, c) in problem.candidates.iter().enumerate() {
        let si = problem.sources.binary_search(&c.source_id).expect("validated");
        let ti = problem.targets.binary_search(&c.target_id).expect("validated");
        y[si][k] = 1;
        y[m + ti][k] = 1;
    }
    (y, vec![1u8; m + n])
}

/// Checks `Y x <= b` for a selection, using exact integer arithmetic.
pub fn is_feasible(problem: &AssignmentProblem, result: &MatchResult) -> bool {
    let (y, b) = build_system_matrix(problem);
    y.iter().zip(b.iter()).all(|(row, &cap)| {
        let used: u32 = row
            .iter()
            .zip(result.selection.iter())
            .map(|(&a, &sel)| (a != 0 && sel) as u32)
            .sum();
        used <= cap as u32
    })
}

/// Counters reported by [`match_algorithm1_with_stats`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConflictStats {
    /// Conflicts resolved; each one permanently removes one candidate, so this
    /// never exceeds the candidate count.
    pub conflicts: usize,
    /// Full passes over the source list.
    pub sweeps: usize,
}

/// Iterative conflict-resolution matching.
///
/// Every unassigned source claims its best remaining candidate. When two
/// sources claim the same target the higher score wins and the loser's
/// candidate is removed, never to be selected again; the loser then falls back
/// to its next-best remaining candidate on a later sweep. Score ties are
/// broken toward the smaller target id (within one source's list) and the
/// smaller source id (between conflicting sources). Candidates with score
/// exactly 0 are never selectable.
pub fn match_algorithm1(problem: &AssignmentProblem) -> MatchResult {
    match_algorithm1_with_stats(problem).0
}

pub fn match_algorithm1_with_stats(problem: &AssignmentProblem) -> (MatchResult, ConflictStats) {
    let cands = &problem.candidates;
    let n_src = problem.sources.len();
    // Candidate indices per source, in canonical order.
    let mut per_source: Vec<Vec<usize>> = vec![Vec::new(); n_src];
    for (k, c) in cands.iter().enumerate() {
        let si = problem.sources.binary_search(&c.source_id).expect("validated");
        per_source[si].push(k);
    }

    let mut alive: Vec<bool> = cands.iter().map(|c| c.score > 0.0).collect();
    let mut source_pick: Vec<Option<usize>> = vec![None; n_src];
    let mut target_pick: Vec<Option<usize>> = vec![None; problem.targets.len()];
    let mut stats = ConflictStats::default();

    loop {
        let mut conflicted = false;
        stats.sweeps += 1;
        for si in 0..n_src {
            if source_pick[si].is_some() {
                continue;
            }
            // Best remaining candidate: max score, ties toward smaller target
            // id (canonical order already ascends by target within a source).
            let mut best: Option<usize> = None;
            for &k in &per_source[si] {
                if !alive[k] {
                    continue;
                }
                best = match best {
                    None => Some(k),
                    Some(b) if cands[k].score > cands[b].score => Some(k),
                    Some(b) => Some(b),
                };
            }
            let Some(k) = best else { continue };
            let ti = problem.targets.binary_search(&cands[k].target_id).expect("validated");
            match target_pick[ti] {
                None => {
                    target_pick[ti] = Some(k);
                    source_pick[si] = Some(k);
                }
                Some(held) => {
                    conflicted = true;
                    stats.conflicts += 1;
                    let challenger_wins = cands[k].score > cands[held].score
                        || (cands[k].score == cands[held].score
                            && cands[k].source_id < cands[held].source_id);
                    if challenger_wins {
                        let loser_si = problem
                            .sources
                            .binary_search(&cands[held].source_id)
                            .expect("validated");
                        alive[held] = false;
                        source_pick[loser_si] = None;
                        target_pick[ti] = Some(k);
                        source_pick[si] = Some(k);
                    } else {
                        alive[k] = false;
                    }
                }
            }
        }
        if !conflicted {
            break;
        }
    }

    let mut selection = vec![false; cands.len()];
    for pick in source_pick.into_iter().flatten() {
        selection[pick] = true;
    }
    (MatchResult::from_selection(problem, selection), stats)
}

/// Greedy sweep over candidates in descending score order, ties toward the
/// smaller target id then the smaller source id. Equals [`match_algorithm1`]
/// whenever all scores are distinct, which makes it a cheap cross-check.
/// Zero-score candidates are skipped.
pub fn match_greedy_sorted(problem: &AssignmentProblem) -> MatchResult {
    let cands = &problem.candidates;
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        cands[b]
            .score
            .total_cmp(&cands[a].score)
            .then(cands[a].target_id.cmp(&cands[b].target_id))
            .then(cands[a].source_id.cmp(&cands[b].source_id))
    });
    let mut used_sources = BTreeSet::new();
    let mut used_targets = BTreeSet::new();
    let mut selection = vec![false; cands.len()];
    for k in order {
        let c = &cands[k];
        if c.score <= 0.0 {
            continue;
        }
        if used_sources.contains(&c.source_id) || used_targets.contains(&c.target_id) {
            continue;
        }
        used_sources.insert(c.source_id);
        used_targets.insert(c.target_id);
        selection[k] = true;
    }
    MatchResult::from_selection(problem, selection)
}

/// Cap on candidate count for [`match_bruteforce`]; beyond this the search
/// space is too large to enumerate.
pub const BRUTEFORCE_CAP: usize = 24;

/// Exhaustive search for the feasible selection with maximum total score.
/// Ties are broken toward the lexicographically smallest selection vector.
/// Zero-score candidates are never selected (they cannot raise the total and
/// the all-false prefix is lexicographically preferred).
pub fn match_bruteforce(problem: &AssignmentProblem) -> Result<MatchResult, MatchError> {
    let n = problem.candidates.len();
    if n > BRUTEFORCE_CAP {
        return Err(MatchError::TooLarge { n, cap: BRUTEFORCE_CAP });
    }
    let cands = &problem.candidates;
    let mut best_total = -1.0f64;
    let mut best: Vec<bool> = vec![false; n];
    let mut current = vec![false; n];
    let mut used_sources = BTreeSet::new();
    let mut used_targets = BTreeSet::new();

    // Depth-first over candidate indices, exploring "skip" before "take" so
    // that among equal totals the first completed selection is the
    // lexicographically smallest.
    fn recurse(
        k: usize,
        total: f64,
        cands: &[CandidateLink],
        current: &mut Vec<bool>,
        used_sources: &mut BTreeSet<u32>,
        used_targets: &mut BTreeSet<u32>,
        best_total: &mut f64,
        best: &mut Vec<bool>,
    ) {
        if k == cands.len() {
            if total > *best_total {
                *best_total = total;
                best.clone_from(current);
            }
            return;
        }
        recurse(k + 1, total, cands, current, used_sources, used_targets, best_total, best);
        let c = cands[k];
        if c.score > 0.0
            && !used_sources.contains(&c.source_id)
            && !used_targets.contains(&c.target_id)
        {
            used_sources.insert(c.source_id);
            used_targets.insert(c.target_id);
            current[k] = true;
            recurse(
                k + 1,
                total + c.score,
                cands,
                current,
                used_sources,
                used_targets,
                best_total,
                best,
            );
            current[k] = false;
            used_sources.remove(&c.source_id);
            used_targets.remove(&c.target_id);
        }
    }

    recurse(
        0,
        0.0,
        cands,
        &mut current,
        &mut used_sources,
        &mut used_targets,
        &mut best_total,
        &mut best,
    );
    Ok(MatchResult::from_selection(problem, best))
}
