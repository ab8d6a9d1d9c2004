//! Multi-step integration.
//!
//! A step sequence is an ordered list of inter-frame steps that sums to the
//! distance between two frames. Composing the elementary match fields along
//! each hop gives one candidate long-term match per sequence; the candidates
//! of many sequences are then combined by plurality vote.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matching::MatchField;
use crate::rng::SplitMix64;

/// Ordered list of steps, each taken from the plan's step set.
pub type StepSequence = Vec<usize>;

/// Elementary fields keyed by `(source frame, target frame)`.
pub type FieldMap = BTreeMap<(usize, usize), MatchField>;

fn normalized_steps(steps: &[usize]) -> Vec<usize> {
    let mut s: Vec<usize> = steps.iter().copied().filter(|&a| a > 0).collect();
    s.sort_unstable();
    s.dedup();
    s
}

/// All ordered compositions of `distance` into parts from `steps`, in
/// depth-first order with the smaller step explored first.
pub fn enumerate_sequences(distance: usize, steps: &[usize]) -> Vec<StepSequence> {
    enumerate_bounded(distance, steps, usize::MAX)
}

/// Like [`enumerate_sequences`] but never descends past `max_len` steps.
pub fn enumerate_bounded(distance: usize, steps: &[usize], max_len: usize) -> Vec<StepSequence> {
    fn dfs(rest: usize, steps: &[usize], budget: usize, prefix: &mut Vec<usize>, out: &mut Vec<StepSequence>) {
        if rest == 0 {
            out.push(prefix.clone());
            return;
        }
        if budget == 0 {
            return;
        }
        for &a in steps {
            if a > rest {
                break;
            }
            prefix.push(a);
            dfs(rest - a, steps, budget - 1, prefix, out);
            prefix.pop();
        }
    }
    let steps = normalized_steps(steps);
    let mut out = Vec::new();
    if distance > 0 {
        dfs(distance, &steps, max_len, &mut Vec::new(), &mut out);
    }
    out
}

/// Number of ordered compositions of `distance` into parts from `steps`
/// (0 for distance 0, like the enumeration). Saturates at `u128::MAX`.
pub fn count_sequences(distance: usize, steps: &[usize]) -> u128 {
    if distance == 0 {
        return 0;
    }
    let steps = normalized_steps(steps);
    let mut f = vec![0u128; distance + 1];
    f[0] = 1;
    for d in 1..=distance {
        f[d] = steps
            .iter()
            .filter(|&&a| a <= d)
            .fold(0u128, |acc, &a| acc.saturating_add(f[d - a]));
    }
    f[distance]
}

/// Table `c[k][d]` = number of compositions of `d` with at most `k` parts.
fn bounded_table(distance: usize, steps: &[usize], max_len: usize) -> Vec<Vec<u128>> {
    let mut c = vec![vec![0u128; distance + 1]; max_len + 1];
    for row in c.iter_mut() {
        row[0] = 1;
    }
    for k in 1..=max_len {
        for d in 1..=distance {
            c[k][d] = steps
                .iter()
                .filter(|&&a| a <= d)
                .fold(0u128, |acc, &a| acc.saturating_add(c[k - 1][d - a]));
        }
    }
    c
}

/// Number of compositions of `distance` with at most `max_len` parts (0 for distance 0).
pub fn count_bounded(distance: usize, steps: &[usize], max_len: usize) -> u128 {
    if distance == 0 {
        return 0;
    }
    let steps = normalized_steps(steps);
    bounded_table(distance, &steps, max_len)[max_len][distance]
}

/// The sequence at position `rank` of the depth-first order of bounded compositions.
fn unrank(mut rank: u128, distance: usize, steps: &[usize], max_len: usize, table: &[Vec<u128>]) -> StepSequence {
    let mut seq = Vec::new();
    let (mut rest, mut budget) = (distance, max_len);
    while rest > 0 {
        let mut chosen = None;
        for &a in steps {
            if a > rest {
                break;
            }
            let below = table[budget - 1][rest - a];
            if rank < below {
                chosen = Some(a);
                break;
            }
            rank -= below;
        }
        let a = chosen.expect("rank within the bounded count");
        seq.push(a);
        rest -= a;
        budget -= 1;
    }
    seq
}

/// Step set, length bound and sampling budget for multi-step integration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPlan {
    pub steps: Vec<usize>,
    /// Longest allowed sequence (`K_max`).
    pub max_len: usize,
    /// Most sequences kept per frame pair (`L`).
    pub budget: usize,
    pub seed: u64,
}

impl StepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() || self.steps.contains(&0) {
            return Err(Error::InvalidArgument("step set must be non-empty with all steps >= 1".into()));
        }
        if self.max_len == 0 || self.budget == 0 {
            return Err(Error::InvalidArgument("max_len and budget must be >= 1".into()));
        }
        Ok(())
    }

    /// Same plan with another sampling seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        StepPlan {
            seed,
            ..self.clone()
        }
    }
}

/// Sequences of at most `plan.max_len` steps reaching `distance`. If more than
/// `plan.budget` exist, exactly `plan.budget` distinct ones are drawn uniformly
/// without replacement. Output follows depth-first order.
pub fn prune_and_sample(distance: usize, plan: &StepPlan) -> Result<Vec<StepSequence>> {
    plan.validate()?;
    if distance == 0 {
        return Ok(Vec::new());
    }
    let steps = normalized_steps(&plan.steps);
    let table = bounded_table(distance, &steps, plan.max_len);
    let total = table[plan.max_len][distance];
    if total == u128::MAX {
        return Err(Error::InvalidArgument(format!(
            "too many step sequences for distance {distance}"
        )));
    }
    let budget = plan.budget as u128;
    if total <= budget {
        return Ok(enumerate_bounded(distance, &steps, plan.max_len));
    }
    // Floyd's algorithm over ranks.
    let mut rng = SplitMix64::new(plan.seed);
    let mut chosen = BTreeSet::new();
    for j in (total - budget)..total {
        let t = rng.below_u128(j + 1);
        if !chosen.insert(t) {
            chosen.insert(j);
        }
    }
    Ok(chosen
        .into_iter()
        .map(|r| unrank(r, distance, &steps, plan.max_len, &table))
        .collect())
}

/// Direction of travel through the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeDirection {
    Forward,
    Backward,
}

impl TimeDirection {
    /// Direction that leads from `from` to `to`.
    pub fn between(from: usize, to: usize) -> Self {
        if to >= from {
            TimeDirection::Forward
        } else {
            TimeDirection::Backward
        }
    }

    fn hop(self, frame: usize, step: usize) -> Option<usize> {
        match self {
            TimeDirection::Forward => frame.checked_add(step),
            TimeDirection::Backward => frame.checked_sub(step),
        }
    }
}

/// Composes the elementary fields along `sequence` starting at frame `start`.
pub fn compose_path(fields: &FieldMap, sequence: &[usize], start: usize, direction: TimeDirection) -> Result<MatchField> {
    if sequence.is_empty() {
        return Err(Error::InvalidArgument("empty step sequence".into()));
    }
    let mut frame = start;
    let mut map: Option<Vec<u32>> = None;
    let mut target_count = 0;
    for &step in sequence {
        let next = direction
            .hop(frame, step)
            .ok_or_else(|| Error::InvalidArgument(format!("step {step} from frame {frame} leaves the sequence")))?;
        let field = fields.get(&(frame, next)).ok_or(Error::MissingField { from: frame, to: next })?;
        map = Some(match map {
            None => field.map().to_vec(),
            Some(m) => {
                if field.source_count() != target_count {
                    return Err(Error::DimensionMismatch(format!(
                        "field {frame}->{next} has {} sources, previous hop produced {target_count} targets",
                        field.source_count()
                    )));
                }
                m.iter().map(|&i| field.map()[i as usize]).collect()
            }
        });
        target_count = field.target_count();
        frame = next;
    }
    MatchField::new(start, frame, target_count, map.expect("non-empty sequence"))
}

/// Voting rule for combining candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsiStrategy {
    /// Direct candidates only.
    Direct,
    /// Direct and reverse candidates.
    Reverse,
    /// Only targets that appear among both direct and reverse candidates.
    Mutual,
}

impl MsiStrategy {
    pub fn name(self) -> &'static str {
        match self {
            MsiStrategy::Direct => "MSId",
            MsiStrategy::Reverse => "MSIr",
            MsiStrategy::Mutual => "MSIm",
        }
    }
}

impl FromStr for MsiStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "MSId" => Ok(MsiStrategy::Direct),
            "MSIr" => Ok(MsiStrategy::Reverse),
            "MSIm" => Ok(MsiStrategy::Mutual),
            _ => Err(Error::InvalidArgument(format!("unknown MSI strategy {s:?} (MSId, MSIr, MSIm)"))),
        }
    }
}

/// Candidate targets per source superpixel, split by provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub target_count: usize,
    pub direct: Vec<Vec<u32>>,
    pub reverse: Vec<Vec<u32>>,
}

impl CandidateSet {
    pub fn new(source_count: usize, target_count: usize) -> Self {
        CandidateSet {
            target_count,
            direct: vec![Vec::new(); source_count],
            reverse: vec![Vec::new(); source_count],
        }
    }

    pub fn source_count(&self) -> usize {
        self.direct.len()
    }
}

/// Direct candidates from composing `direct` sequences `source -> target`;
/// reverse candidates from the preimages of `reverse` sequences `target -> source`.
pub fn gather_candidates(
    fields: &FieldMap,
    direct: &[StepSequence],
    reverse: &[StepSequence],
    source: usize,
    target: usize,
) -> Result<CandidateSet> {
    let mut set: Option<CandidateSet> = None;
    let forward = TimeDirection::between(source, target);
    for seq in direct {
        let h = compose_path(fields, seq, source, forward)?;
        let set = set.get_or_insert_with(|| CandidateSet::new(h.source_count(), h.target_count()));
        if h.source_count() != set.source_count() || h.target_count() != set.target_count {
            return Err(Error::DimensionMismatch("direct paths disagree on superpixel counts".into()));
        }
        for (i, &t) in h.map().iter().enumerate() {
            set.direct[i].push(t);
        }
    }
    let mut set = set.ok_or_else(|| Error::InvalidArgument(format!("no direct sequence from {source} to {target}")))?;
    let backward = TimeDirection::between(target, source);
    for seq in reverse {
        let h = compose_path(fields, seq, target, backward)?;
        if h.source_count() != set.target_count || h.target_count() != set.source_count() {
            return Err(Error::DimensionMismatch("reverse paths disagree on superpixel counts".into()));
        }
        for (j, &f) in h.map().iter().enumerate() {
            set.reverse[f as usize].push(j as u32);
        }
    }
    Ok(set)
}

/// Most frequent entry; ties go to the lowest index.
fn plurality<'a>(entries: impl Iterator<Item = &'a u32>) -> Option<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &e in entries {
        *counts.entry(e).or_default() += 1;
    }
    let mut best: Option<(u32, usize)> = None;
    for (e, c) in counts {
        if best.is_none_or(|b| c > b.1) {
            best = Some((e, c));
        }
    }
    best.map(|b| b.0)
}

/// Vote for one superpixel. The flag is true when the mutual restriction was
/// empty and the direct-plus-reverse vote was used instead.
pub fn vote_superpixel(direct: &[u32], reverse: &[u32], strategy: MsiStrategy) -> Option<(u32, bool)> {
    if direct.is_empty() {
        return None;
    }
    match strategy {
        MsiStrategy::Direct => plurality(direct.iter()).map(|t| (t, false)),
        MsiStrategy::Reverse => plurality(direct.iter().chain(reverse)).map(|t| (t, false)),
        MsiStrategy::Mutual => {
            let d: BTreeSet<u32> = direct.iter().copied().collect();
            let r: BTreeSet<u32> = reverse.iter().copied().collect();
            let both: BTreeSet<u32> = d.intersection(&r).copied().collect();
            if both.is_empty() {
                plurality(direct.iter().chain(reverse)).map(|t| (t, true))
            } else {
                plurality(direct.iter().chain(reverse).filter(|t| both.contains(t))).map(|t| (t, false))
            }
        }
    }
}

/// Long-term match by voting over each superpixel's candidates.
pub fn select_long_term(candidates: &CandidateSet, strategy: MsiStrategy) -> Result<Vec<u32>> {
    candidates
        .direct
        .iter()
        .zip(&candidates.reverse)
        .enumerate()
        .map(|(i, (d, r))| {
            vote_superpixel(d, r, strategy)
                .map(|v| v.0)
                .ok_or_else(|| Error::InvalidArgument(format!("superpixel {i} has no direct candidates")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(steps: &[usize], max_len: usize, budget: usize) -> StepPlan {
        StepPlan {
            steps: steps.to_vec(),
            max_len,
            budget,
            seed: 11,
        }
    }

    #[test]
    fn enumeration_examples() {
        assert_eq!(enumerate_sequences(3, &[1, 2, 3]), vec![vec![1, 1, 1], vec![1, 2], vec![2, 1], vec![3]]);
        assert_eq!(enumerate_sequences(1, &[1, 4]), vec![vec![1]]);
        assert!(enumerate_sequences(4, &[3]).is_empty());
        // Unordered input is explored in ascending order.
        assert_eq!(enumerate_sequences(3, &[3, 2, 1]), enumerate_sequences(3, &[1, 2, 3]));
    }

    #[test]
    fn counts() {
        assert_eq!(count_sequences(30, &[1, 2, 5, 10]), 5_877_241);
        assert_eq!(count_sequences(3, &[1, 2, 3]), 4);
        assert_eq!(count_sequences(0, &[1]), 0);
        assert_eq!(count_bounded(3, &[1, 2, 3], 2), 3);
    }

    #[test]
    fn pruning_examples() {
        assert_eq!(prune_and_sample(3, &plan(&[1, 2, 3], 2, 200)).unwrap(), vec![vec![1, 2], vec![2, 1], vec![3]]);
        assert_eq!(prune_and_sample(3, &plan(&[1, 2, 3], 1, 200)).unwrap(), vec![vec![3]]);
        assert!(prune_and_sample(4, &plan(&[1, 2, 3], 1, 200)).unwrap().is_empty());
    }

    #[test]
    fn sampling_is_distinct_and_deterministic() {
        let p = plan(&[1, 2, 5, 10], 7, 50);
        let a = prune_and_sample(30, &p).unwrap();
        assert_eq!(a, prune_and_sample(30, &p).unwrap());
        assert_eq!(a.len(), 50);
        let unique: BTreeSet<_> = a.iter().collect();
        assert_eq!(unique.len(), 50);
        for s in &a {
            assert!(s.len() <= 7 && s.iter().sum::<usize>() == 30);
        }
        assert_ne!(a, prune_and_sample(30, &p.with_seed(12)).unwrap());
    }

    #[test]
    fn unrank_matches_enumeration_order() {
        let steps = [1, 2, 5];
        let all = enumerate_bounded(12, &steps, 6);
        let table = bounded_table(12, &steps, 6);
        assert_eq!(all.len() as u128, table[6][12]);
        for (r, s) in all.iter().enumerate() {
            assert_eq!(&unrank(r as u128, 12, &steps, 6, &table), s);
        }
    }

    fn field(s: usize, t: usize, tc: usize, map: Vec<u32>) -> MatchField {
        MatchField::new(s, t, tc, map).unwrap()
    }

    #[test]
    fn composition_example() {
        let mut fields = FieldMap::new();
        fields.insert((0, 1), field(0, 1, 2, vec![1, 0]));
        fields.insert((1, 3), field(1, 3, 3, vec![2, 2]));
        fields.insert((0, 3), field(0, 3, 3, vec![0, 1]));
        let h = compose_path(&fields, &[1, 2], 0, TimeDirection::Forward).unwrap();
        assert_eq!((h.source_frame(), h.target_frame(), h.map()), (0, 3, &[2u32, 2][..]));
        assert_eq!(compose_path(&fields, &[3], 0, TimeDirection::Forward).unwrap(), fields[&(0, 3)]);
        assert!(matches!(
            compose_path(&fields, &[2, 1], 0, TimeDirection::Forward),
            Err(Error::MissingField { from: 0, to: 2 })
        ));
        fields.insert((3, 1), field(3, 1, 2, vec![0, 1, 1]));
        let h = compose_path(&fields, &[2], 3, TimeDirection::Backward).unwrap();
        assert_eq!((h.source_frame(), h.target_frame()), (3, 1));
    }

    #[test]
    fn candidates_and_votes() {
        let mut fields = FieldMap::new();
        fields.insert((0, 1), field(0, 1, 2, vec![0, 1]));
        fields.insert((1, 0), field(1, 0, 2, vec![0, 0]));
        let c = gather_candidates(&fields, &[vec![1]], &[vec![1]], 0, 1).unwrap();
        assert_eq!(c.direct, vec![vec![0], vec![1]]);
        assert_eq!(c.reverse, vec![vec![0, 1], vec![]]);

        let (a, b) = (0u32, 1u32);
        assert_eq!(vote_superpixel(&[a, a, b], &[], MsiStrategy::Direct), Some((a, false)));
        assert_eq!(vote_superpixel(&[a, b], &[b, b], MsiStrategy::Reverse), Some((b, false)));
        assert_eq!(vote_superpixel(&[a, a, b], &[b], MsiStrategy::Mutual), Some((b, false)));
        assert_eq!(vote_superpixel(&[a, a, b], &[2], MsiStrategy::Mutual), Some((a, true)));
        assert_eq!(vote_superpixel(&[b, a], &[], MsiStrategy::Direct), Some((a, false)));
        assert_eq!(vote_superpixel(&[], &[a], MsiStrategy::Reverse), None);
    }

    #[test]
    fn strategy_names() {
        for s in [MsiStrategy::Direct, MsiStrategy::Reverse, MsiStrategy::Mutual] {
            assert_eq!(s.name().parse::<MsiStrategy>().unwrap(), s);
        }
        assert!("msi".parse::<MsiStrategy>().is_err());
    }
}
