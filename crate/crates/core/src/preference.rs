//! Simulated annotation pipeline: a hidden utility stands in for human
//! judgement, annotators rate items 1-6 on three criteria, rankings are
//! checked for conflicting pairs, conflicts are re-labelled, and the
//! resolved ranking is turned into pairwise comparisons.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Rng;
use crate::scene::{CameraRig, MultiViewImage};

/// Number of rating criteria (alignment, quality, consistency).
pub const CRITERIA: usize = 3;
const SCORE_MIN: f64 = 1.0;
const SCORE_MAX: f64 = 6.0;
/// Above this many items the cycle search only looks at cycles of length <= 4.
const EXHAUSTIVE_CYCLE_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriterionWeights {
    pub alignment: f64,
    pub quality: f64,
    pub consistency: f64,
}

impl Default for CriterionWeights {
    fn default() -> Self {
        Self {
            alignment: 0.5,
            quality: 0.25,
            consistency: 0.25,
        }
    }
}

impl CriterionWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alignment, self.quality, self.consistency];
        if w.iter().any(|&x| !(x > 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "criterion weights must be positive and sum to 1, got {w:?}"
            )));
        }
        Ok(())
    }
}

/// Raw penalty for each criterion; all are nonnegative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriterionTerms {
    /// `‖x - target‖² / (K·D)`
    pub alignment: f64,
    /// Mean squared difference of adjacent pixels within each view.
    pub roughness: f64,
    /// Mean squared deviation of de-rotated views from their mean.
    pub spread: f64,
}

impl CriterionTerms {
    fn as_array(&self) -> [f64; CRITERIA] {
        [self.alignment, self.roughness, self.spread]
    }
}

/// The hidden preference signal: per-prompt target stacks plus criterion
/// weights. `rig` is used to de-rotate views for the consistency term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthUtility {
    pub targets: BTreeMap<u32, MultiViewImage>,
    pub weights: CriterionWeights,
    pub rig: CameraRig,
}

impl GroundTruthUtility {
    pub fn new(targets: BTreeMap<u32, MultiViewImage>, weights: CriterionWeights, rig: CameraRig) -> Result<Self> {
        weights.validate()?;
        for (p, t) in &targets {
            if t.num_views() != rig.views() || t.view_dim() != rig.dim() {
                return Err(Error::shape(
                    format!("target for prompt {p}"),
                    &[rig.views(), rig.dim()],
                    t.views.shape(),
                ));
            }
        }
        Ok(Self { targets, weights, rig })
    }

    pub fn target(&self, prompt: u32) -> Result<&MultiViewImage> {
        self.targets.get(&prompt).ok_or(Error::UnknownPrompt(prompt))
    }

    pub fn terms(&self, prompt: u32, x: &MultiViewImage) -> Result<CriterionTerms> {
        let target = self.target(prompt)?;
        x.views.ensure_same_shape(&target.views, "utility input")?;
        let (k, d) = (x.num_views(), x.view_dim());
        let n = (k * d) as f64;
        let alignment = x.views.sub(&target.views)?.norm_sq() / n;

        let roughness = if d > 1 {
            let total: f64 = (0..k)
                .map(|j| x.view(j).windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>())
                .sum();
            total / (k * (d - 1)) as f64
        } else {
            0.0
        };

        let derotated: Vec<Vec<f64>> = (0..k)
            .map(|j| self.rig.transform(j).matvec_t(x.view(j)))
            .collect::<Result<_>>()?;
        let mut mean = vec![0.0; d];
        for v in &derotated {
            for (m, &x) in mean.iter_mut().zip(v) {
                *m += x / k as f64;
            }
        }
        let spread = derotated
            .iter()
            .map(|v| v.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n;

        Ok(CriterionTerms {
            alignment,
            roughness,
            spread,
        })
    }

    pub fn utility(&self, prompt: u32, x: &MultiViewImage) -> Result<f64> {
        let t = self.terms(prompt, x)?;
        let w = self.weights;
        Ok(-w.alignment * t.alignment - w.quality * t.roughness - w.consistency * t.spread)
    }
}

pub fn utility(gt: &GroundTruthUtility, prompt: u32, x: &MultiViewImage) -> Result<f64> {
    gt.utility(prompt, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatorSpec {
    pub count: usize,
    /// Standard deviation of the Gaussian noise added before rounding.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub prompt_id: u32,
    pub item_id: u32,
    pub annotator_id: u32,
    pub scores: [u8; CRITERIA],
    /// Criterion-weighted mean of `scores`.
    pub average: f64,
}

/// Rates every item on each criterion. Scores come from a per-set affine
/// map of the criterion's utility onto `[1, 6]` (3.5 for a degenerate set),
/// plus annotator noise, rounded and clamped.
pub fn simulate_ratings(
    gt: &GroundTruthUtility,
    prompt: u32,
    items: &[MultiViewImage],
    annotators: &AnnotatorSpec,
    rng: &mut Rng,
) -> Result<Vec<RatingRecord>> {
    if items.is_empty() {
        return Err(Error::Empty("items to rate"));
    }
    if annotators.count == 0 {
        return Err(Error::InvalidArgument("need at least one annotator".into()));
    }
    if !(annotators.noise >= 0.0) {
        return Err(Error::InvalidArgument("annotator noise must be >= 0".into()));
    }
    let per_item: Vec<[f64; CRITERIA]> = items
        .iter()
        .map(|x| gt.terms(prompt, x).map(|t| t.as_array().map(|p| -p)))
        .collect::<Result<_>>()?;
    let levels: Vec<[f64; CRITERIA]> = {
        let mut out = vec![[0.0; CRITERIA]; items.len()];
        for c in 0..CRITERIA {
            let lo = per_item.iter().map(|u| u[c]).fold(f64::INFINITY, f64::min);
            let hi = per_item.iter().map(|u| u[c]).fold(f64::NEG_INFINITY, f64::max);
            for (o, u) in out.iter_mut().zip(&per_item) {
                o[c] = if hi > lo {
                    SCORE_MIN + (SCORE_MAX - SCORE_MIN) * (u[c] - lo) / (hi - lo)
                } else {
                    0.5 * (SCORE_MIN + SCORE_MAX)
                };
            }
        }
        out
    };
    let weights = [gt.weights.alignment, gt.weights.quality, gt.weights.consistency];
    let mut records = Vec::with_capacity(annotators.count * items.len());
    for a in 0..annotators.count {
        for (i, lv) in levels.iter().enumerate() {
            let mut scores = [0u8; CRITERIA];
            for c in 0..CRITERIA {
                let noisy = if annotators.noise > 0.0 {
                    lv[c] + annotators.noise * rng.normal()
                } else {
                    lv[c]
                };
                scores[c] = noisy.round().clamp(SCORE_MIN, SCORE_MAX) as u8;
            }
            let average = scores.iter().zip(weights).map(|(&s, w)| w * f64::from(s)).sum::<f64>();
            records.push(RatingRecord {
                prompt_id: prompt,
                item_id: i as u32,
                annotator_id: a as u32,
                scores,
                average,
            });
        }
    }
    Ok(records)
}

/// Items best to worst, partitioned into tie groups (singletons included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingSet {
    pub prompt_id: u32,
    pub order: Vec<u32>,
    pub tie_groups: Vec<Vec<u32>>,
}

impl RankingSet {
    fn group_index(&self) -> BTreeMap<u32, usize> {
        self.tie_groups
            .iter()
            .enumerate()
            .flat_map(|(g, items)| items.iter().map(move |&i| (i, g)))
            .collect()
    }
}

fn mean_scores(records: &[RatingRecord]) -> Result<(u32, BTreeMap<u32, f64>)> {
    let prompt = records.first().ok_or(Error::Empty("rating records"))?.prompt_id;
    let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for r in records {
        if r.prompt_id != prompt {
            return Err(Error::InvalidArgument(format!(
                "records mix prompts {prompt} and {}",
                r.prompt_id
            )));
        }
        let e = sums.entry(r.item_id).or_insert((0.0, 0));
        e.0 += r.average;
        e.1 += 1;
    }
    Ok((prompt, sums.into_iter().map(|(i, (s, n))| (i, s / n as f64)).collect()))
}

/// Orders items by their mean average score, grouping exact ties.
pub fn rank_items(records: &[RatingRecord]) -> Result<RankingSet> {
    let (prompt_id, means) = mean_scores(records)?;
    let mut items: Vec<(u32, f64)> = means.into_iter().collect();
    items.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    let mut tie_groups: Vec<Vec<u32>> = Vec::new();
    let mut last: Option<f64> = None;
    for &(id, m) in &items {
        match (last, tie_groups.last_mut()) {
            (Some(prev), Some(group)) if prev == m => group.push(id),
            _ => tie_groups.push(vec![id]),
        }
        last = Some(m);
    }
    Ok(RankingSet {
        prompt_id,
        order: items.iter().map(|&(i, _)| i).collect(),
        tie_groups,
    })
}

/// "`winner` beats `loser`" according to one annotator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Verdict {
    pub annotator_id: u32,
    pub winner: u32,
    pub loser: u32,
}

/// Pairwise verdicts implied by each annotator's own averages; equal
/// averages give no verdict.
pub fn annotator_verdicts(records: &[RatingRecord]) -> Vec<Verdict> {
    let mut by_annotator: BTreeMap<u32, Vec<(u32, f64)>> = BTreeMap::new();
    for r in records {
        by_annotator.entry(r.annotator_id).or_default().push((r.item_id, r.average));
    }
    let mut out = Vec::new();
    for (a, mut items) in by_annotator {
        items.sort_by_key(|&(i, _)| i);
        for (x, &(i, si)) in items.iter().enumerate() {
            for &(j, sj) in &items[x + 1..] {
                match si.partial_cmp(&sj) {
                    Some(Ordering::Greater) => out.push(Verdict { annotator_id: a, winner: i, loser: j }),
                    Some(Ordering::Less) => out.push(Verdict { annotator_id: a, winner: j, loser: i }),
                    _ => {}
                }
            }
        }
    }
    out
}

/// Unordered item pair, stored with `0 < 1`.
pub type ItemPair = (u32, u32);

fn key(a: u32, b: u32) -> ItemPair {
    (a.min(b), a.max(b))
}

/// Majority-direction graph over items: `edges[u]` holds every `v` that beats
/// fewer annotators than `u` does on the pair.
#[derive(Debug, Default)]
struct MajorityGraph {
    votes: BTreeMap<ItemPair, (usize, usize)>,
    edges: BTreeMap<u32, BTreeSet<u32>>,
    nodes: BTreeSet<u32>,
}

impl MajorityGraph {
    fn build(verdicts: &[Verdict]) -> Self {
        let mut g = MajorityGraph::default();
        for v in verdicts {
            let k = key(v.winner, v.loser);
            let e = g.votes.entry(k).or_insert((0, 0));
            if v.winner == k.0 {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
            g.nodes.insert(v.winner);
            g.nodes.insert(v.loser);
        }
        for (&(a, b), &(wa, wb)) in &g.votes {
            match wa.cmp(&wb) {
                Ordering::Greater => {
                    g.edges.entry(a).or_default().insert(b);
                }
                Ordering::Less => {
                    g.edges.entry(b).or_default().insert(a);
                }
                Ordering::Equal => {}
            }
        }
        g
    }

    /// Whether `to` is reachable from `from` in at most `max_hops` edges.
    fn reaches(&self, from: u32, to: u32, max_hops: usize) -> bool {
        let mut seen = BTreeSet::from([from]);
        let mut frontier = vec![from];
        for _ in 0..max_hops {
            let mut next = Vec::new();
            for u in frontier {
                for &w in self.edges.get(&u).into_iter().flatten() {
                    if w == to {
                        return true;
                    }
                    if seen.insert(w) {
                        next.push(w);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        false
    }

    fn has_edge(&self, a: u32, b: u32) -> bool {
        self.edges.get(&a).is_some_and(|s| s.contains(&b)) || self.edges.get(&b).is_some_and(|s| s.contains(&a))
    }
}

/// Flags every pair on which annotators disagree, plus every majority edge
/// lying on a directed cycle. Sets above 12 items only search cycles of
/// length <= 4.
pub fn detect_conflicts(verdicts: &[Verdict]) -> Vec<ItemPair> {
    let g = MajorityGraph::build(verdicts);
    let max_hops = if g.nodes.len() > EXHAUSTIVE_CYCLE_LIMIT {
        3
    } else {
        g.nodes.len()
    };
    let mut flagged = BTreeSet::new();
    for (&pair, &(wa, wb)) in &g.votes {
        if wa > 0 && wb > 0 {
            flagged.insert(pair);
        }
    }
    for (&u, outs) in &g.edges {
        for &v in outs {
            if g.reaches(v, u, max_hops) {
                flagged.insert(key(u, v));
            }
        }
    }
    flagged.into_iter().collect()
}

/// Re-labels flagged pairs with the noiseless utility (ties broken toward
/// the lower item id) until the detector reports nothing.
pub fn resolve_conflicts(
    verdicts: &[Verdict],
    gt: &GroundTruthUtility,
    prompt: u32,
    items: &[MultiViewImage],
) -> Result<Vec<Verdict>> {
    let utilities: Vec<f64> = items.iter().map(|x| gt.utility(prompt, x)).collect::<Result<_>>()?;
    let oracle = |a: u32, b: u32| -> Result<(u32, u32)> {
        let ua = *utilities.get(a as usize).ok_or(Error::IndexOutOfRange {
            what: "item",
            index: a as usize,
            len: utilities.len(),
        })?;
        let ub = *utilities.get(b as usize).ok_or(Error::IndexOutOfRange {
            what: "item",
            index: b as usize,
            len: utilities.len(),
        })?;
        Ok(if ua > ub || (ua == ub && a < b) { (a, b) } else { (b, a) })
    };
    let mut current = verdicts.to_vec();
    loop {
        let flagged: BTreeSet<ItemPair> = detect_conflicts(&current).into_iter().collect();
        if flagged.is_empty() {
            return Ok(current);
        }
        let mut next = Vec::with_capacity(current.len());
        for v in current {
            if flagged.contains(&key(v.winner, v.loser)) {
                let (winner, loser) = oracle(v.winner, v.loser)?;
                next.push(Verdict {
                    annotator_id: v.annotator_id,
                    winner,
                    loser,
                });
            } else {
                next.push(v);
            }
        }
        current = next;
    }
}

/// Ranking consistent with an acyclic verdict set: a topological order of the
/// majority graph that prefers higher mean score among ready items. Adjacent
/// items with equal means and no majority edge between them share a group.
pub fn ranking_from_verdicts(records: &[RatingRecord], verdicts: &[Verdict]) -> Result<RankingSet> {
    let (prompt_id, means) = mean_scores(records)?;
    let g = MajorityGraph::build(verdicts);
    let mut indegree: BTreeMap<u32, usize> = means.keys().map(|&i| (i, 0)).collect();
    for outs in g.edges.values() {
        for v in outs {
            *indegree
                .get_mut(v)
                .ok_or_else(|| Error::InvalidArgument(format!("verdict names unrated item {v}")))? += 1;
        }
    }
    let mut order = Vec::with_capacity(means.len());
    let mut ready: Vec<u32> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&i, _)| i).collect();
    while !ready.is_empty() {
        ready.sort_by(|a, b| means[b].partial_cmp(&means[a]).unwrap_or(Ordering::Equal).then(a.cmp(b)));
        let u = ready.remove(0);
        order.push(u);
        for &v in g.edges.get(&u).into_iter().flatten() {
            let d = indegree.get_mut(&v).expect("counted above");
            *d -= 1;
            if *d == 0 {
                ready.push(v);
            }
        }
    }
    if order.len() != means.len() {
        return Err(Error::InvalidArgument("verdict graph has a cycle".into()));
    }
    let mut tie_groups: Vec<Vec<u32>> = Vec::new();
    for &id in &order {
        let joins = tie_groups.last().is_some_and(|grp| {
            grp.iter().all(|&o| means[&o] == means[&id] && !g.has_edge(o, id))
        });
        if joins {
            tie_groups.last_mut().expect("non-empty").push(id);
        } else {
            tie_groups.push(vec![id]);
        }
    }
    Ok(RankingSet {
        prompt_id,
        order,
        tie_groups,
    })
}

/// One row of the preference dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonPair {
    pub prompt_id: u32,
    pub winner: u32,
    pub loser: u32,
    pub cams_w: Vec<usize>,
    pub cams_l: Vec<usize>,
    pub flagged: bool,
}

/// One pair per unordered item pair in different tie groups.
pub fn extract_pairs(ranking: &RankingSet, rig: &CameraRig, flagged: &[ItemPair]) -> Vec<ComparisonPair> {
    let groups = ranking.group_index();
    let flagged: BTreeSet<ItemPair> = flagged.iter().copied().collect();
    let cams = rig.camera_ids().to_vec();
    let mut out = Vec::new();
    for (i, &w) in ranking.order.iter().enumerate() {
        for &l in &ranking.order[i + 1..] {
            if groups.get(&w) == groups.get(&l) {
                continue;
            }
            out.push(ComparisonPair {
                prompt_id: ranking.prompt_id,
                winner: w,
                loser: l,
                cams_w: cams.clone(),
                cams_l: cams.clone(),
                flagged: flagged.contains(&key(w, l)),
            });
        }
    }
    out
}

pub fn write_pairs_jsonl<W: Write>(pairs: &[ComparisonPair], mut out: W) -> Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n").map_err(serde_json::Error::io)?;
    }
    Ok(())
}

pub fn read_pairs_jsonl<R: BufRead>(input: R) -> Result<Vec<ComparisonPair>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line.map_err(serde_json::Error::io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Candidate items generated for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSet {
    pub prompt_id: u32,
    pub items: Vec<MultiViewImage>,
}

pub const MIN_SET_SIZE: usize = 4;
pub const MAX_SET_SIZE: usize = 10;

/// Drops items below `min_quality` utility, then drops sets whose utility
/// spread is below `min_spread` or whose size falls outside 4..=10.
pub fn filter_items(sets: &[ItemSet], gt: &GroundTruthUtility, min_quality: f64, min_spread: f64) -> Result<Vec<ItemSet>> {
    let mut kept = Vec::new();
    for set in sets {
        let mut items = Vec::new();
        let mut utils = Vec::new();
        for x in &set.items {
            let u = gt.utility(set.prompt_id, x)?;
            if u >= min_quality {
                items.push(x.clone());
                utils.push(u);
            }
        }
        if !(MIN_SET_SIZE..=MAX_SET_SIZE).contains(&items.len()) {
            continue;
        }
        let hi = utils.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = utils.iter().copied().fold(f64::INFINITY, f64::min);
        if hi - lo < min_spread {
            continue;
        }
        kept.push(ItemSet {
            prompt_id: set.prompt_id,
            items,
        });
    }
    Ok(kept)
}

/// Everything the annotation pipeline produces for one prompt set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSet {
    pub prompt_id: u32,
    pub records: Vec<RatingRecord>,
    pub flagged: Vec<ItemPair>,
    pub verdicts: Vec<Verdict>,
    pub ranking: RankingSet,
    pub pairs: Vec<ComparisonPair>,
}

/// Rate, detect conflicts, resolve them, rank and extract pairs.
pub fn annotate_set(
    gt: &GroundTruthUtility,
    set: &ItemSet,
    annotators: &AnnotatorSpec,
    rig: &CameraRig,
    rng: &mut Rng,
) -> Result<AnnotatedSet> {
    let records = simulate_ratings(gt, set.prompt_id, &set.items, annotators, rng)?;
    let raw = annotator_verdicts(&records);
    let flagged = detect_conflicts(&raw);
    let verdicts = resolve_conflicts(&raw, gt, set.prompt_id, &set.items)?;
    let ranking = ranking_from_verdicts(&records, &verdicts)?;
    let pairs = extract_pairs(&ranking, rig, &flagged);
    Ok(AnnotatedSet {
        prompt_id: set.prompt_id,
        records,
        flagged,
        verdicts,
        ranking,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn rig() -> CameraRig {
        CameraRig::orbit(3, 2).unwrap()
    }

    fn gt_with_target(target: MultiViewImage) -> GroundTruthUtility {
        GroundTruthUtility::new(BTreeMap::from([(0, target)]), CriterionWeights::default(), rig()).unwrap()
    }

    fn constant_target() -> MultiViewImage {
        MultiViewImage::from_flat(2, 3, vec![0.0; 6]).unwrap()
    }

    #[test]
    fn utility_maximal_at_constant_target() {
        let gt = gt_with_target(constant_target());
        assert_eq!(gt.utility(0, &constant_target()).unwrap(), 0.0);
    }

    #[test]
    fn doubling_distance_quadruples_alignment() {
        let gt = gt_with_target(constant_target());
        // Views differ only along the axis the orbit leaves fixed, so spread vanishes.
        let x1 = MultiViewImage::from_flat(2, 3, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let x2 = MultiViewImage::from_flat(2, 3, vec![0.0, 0.0, 2.0, 0.0, 0.0, 2.0]).unwrap();
        let t1 = gt.terms(0, &x1).unwrap();
        let t2 = gt.terms(0, &x2).unwrap();
        assert!((t2.alignment - 4.0 * t1.alignment).abs() < 1e-15);
        assert_eq!(t1.spread, 0.0);
        assert!(gt.utility(0, &x2).unwrap() < gt.utility(0, &x1).unwrap());
    }

    #[test]
    fn unknown_prompt_errors() {
        let gt = gt_with_target(constant_target());
        assert!(matches!(gt.utility(9, &constant_target()), Err(Error::UnknownPrompt(9))));
    }

    #[test]
    fn noiseless_ratings_are_monotone() {
        let gt = gt_with_target(constant_target());
        let good = constant_target();
        let bad = MultiViewImage::from_flat(2, 3, vec![0.0, 1.0, 0.0, 0.5, 0.0, 2.0]).unwrap();
        let spec = AnnotatorSpec { count: 3, noise: 0.0 };
        let recs = simulate_ratings(&gt, 0, &[bad, good], &spec, &mut Rng::new(0)).unwrap();
        let ranking = rank_items(&recs).unwrap();
        assert_eq!(ranking.order, vec![1, 0]);
    }

    #[test]
    fn single_item_rates_midpoint() {
        let gt = gt_with_target(constant_target());
        let spec = AnnotatorSpec { count: 2, noise: 0.0 };
        let recs = simulate_ratings(&gt, 0, &[constant_target()], &spec, &mut Rng::new(0)).unwrap();
        // 3.5 rounds half away from zero.
        assert!(recs.iter().all(|r| r.scores == [4, 4, 4] && r.average == 4.0));
        assert!(simulate_ratings(&gt, 0, &[], &spec, &mut Rng::new(0)).is_err());
    }

    fn record(item: u32, annotator: u32, avg: f64) -> RatingRecord {
        RatingRecord {
            prompt_id: 0,
            item_id: item,
            annotator_id: annotator,
            scores: [1, 1, 1],
            average: avg,
        }
    }

    #[test]
    fn ranking_groups_ties() {
        let strict = rank_items(&[record(0, 0, 2.0), record(1, 0, 5.0), record(2, 0, 3.0)]).unwrap();
        assert_eq!(strict.order, vec![1, 2, 0]);
        assert_eq!(strict.tie_groups.len(), 3);
        let tied = rank_items(&[record(0, 0, 3.0), record(1, 0, 3.0), record(2, 0, 3.0)]).unwrap();
        assert_eq!(tied.tie_groups, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn mixed_prompts_rejected() {
        let mut r = record(1, 0, 1.0);
        r.prompt_id = 4;
        assert!(rank_items(&[record(0, 0, 1.0), r]).is_err());
    }

    fn v(a: u32, w: u32, l: u32) -> Verdict {
        Verdict { annotator_id: a, winner: w, loser: l }
    }

    #[test]
    fn agreement_without_cycle_has_no_flags() {
        let verdicts = vec![v(0, 0, 1), v(1, 0, 1), v(0, 1, 2), v(1, 1, 2), v(0, 0, 2)];
        assert!(detect_conflicts(&verdicts).is_empty());
    }

    #[test]
    fn canonical_cycle_flags_all_three() {
        let verdicts = vec![v(0, 0, 1), v(0, 1, 2), v(0, 2, 0)];
        assert_eq!(detect_conflicts(&verdicts), vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn disagreement_flags_pair() {
        let verdicts = vec![v(0, 0, 1), v(1, 1, 0), v(2, 0, 1)];
        assert_eq!(detect_conflicts(&verdicts), vec![(0, 1)]);
    }

    #[test]
    fn resolution_breaks_cycle_and_is_idempotent() {
        let target = constant_target();
        let gt = gt_with_target(target.clone());
        let items: Vec<MultiViewImage> = (0..3)
            .map(|i| MultiViewImage::new(Tensor::full(&[2, 3], i as f64)).unwrap())
            .collect();
        let verdicts = vec![v(0, 0, 1), v(0, 1, 2), v(0, 2, 0)];
        let fixed = resolve_conflicts(&verdicts, &gt, 0, &items).unwrap();
        assert!(detect_conflicts(&fixed).is_empty());
        assert!(fixed.contains(&v(0, 0, 1)) && fixed.contains(&v(0, 1, 2)) && fixed.contains(&v(0, 0, 2)));
        assert_eq!(resolve_conflicts(&fixed, &gt, 0, &items).unwrap(), fixed);
        let clean = vec![v(0, 0, 1)];
        assert_eq!(resolve_conflicts(&clean, &gt, 0, &items).unwrap(), clean);
    }

    fn ranking(groups: Vec<Vec<u32>>) -> RankingSet {
        RankingSet {
            prompt_id: 0,
            order: groups.iter().flatten().copied().collect(),
            tie_groups: groups,
        }
    }

    #[test]
    fn pair_counts() {
        let r = rig();
        let nine = ranking((0..9).map(|i| vec![i]).collect());
        assert_eq!(extract_pairs(&nine, &r, &[]).len(), 36);
        assert!(extract_pairs(&ranking(vec![vec![0, 1]]), &r, &[]).is_empty());
        let four = ranking(vec![vec![0], vec![1, 2], vec![3]]);
        let pairs = extract_pairs(&four, &r, &[(1, 3)]);
        assert_eq!(pairs.len(), 5);
        assert!(pairs.iter().any(|p| p.winner == 1 && p.loser == 3 && p.flagged));
        assert_eq!(pairs[0].cams_w, vec![0, 1]);
    }

    #[test]
    fn pairs_jsonl_round_trip() {
        let pairs = extract_pairs(&ranking(vec![vec![2], vec![0], vec![1]]), &rig(), &[]);
        let mut buf = Vec::new();
        write_pairs_jsonl(&pairs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("{\"prompt_id\":0,\"winner\":2,\"loser\":0,\"cams_w\":[0,1],\"cams_l\":[0,1],\"flagged\":false}"));
        assert_eq!(read_pairs_jsonl(buf.as_slice()).unwrap(), pairs);
    }

    #[test]
    fn filter_drops_identical_sets_and_keeps_spread() {
        let gt = gt_with_target(constant_target());
        let same = ItemSet { prompt_id: 0, items: vec![constant_target(); 5] };
        assert!(filter_items(&[same], &gt, -10.0, 1e-6).unwrap().is_empty());
        let spread = ItemSet {
            prompt_id: 0,
            items: (0..5)
                .map(|i| MultiViewImage::new(Tensor::full(&[2, 3], 0.1 * i as f64)).unwrap())
                .collect(),
        };
        let kept = filter_items(std::slice::from_ref(&spread), &gt, -10.0, 1e-6).unwrap();
        assert_eq!(kept, vec![spread]);
    }
}
