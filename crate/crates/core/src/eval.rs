//! Ranking metrics and method comparison: Spearman correlation with tied
//! ranks, sequential Elo, win rates, and a harness that runs distillation
//! modes over prompts and seeds and judges them two ways.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::distill::{optimize, DistillConfig, DistillOutcome, Mode};
use crate::error::{Error, Result};
use crate::numcore::Rng;
use crate::reward::RewardNet;
use crate::scene::{render_all, Asset};
use crate::suite::Suite;

/// Ranks keyed by label; tied entries share the average of their positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankVector {
    labels: Vec<String>,
    ranks: Vec<f64>,
}

impl RankVector {
    /// Accepts any rank vector whose values are the average ranks of some
    /// weak ordering of `1..=n`.
    pub fn new(labels: Vec<String>, ranks: Vec<f64>) -> Result<Self> {
        if labels.len() != ranks.len() {
            return Err(Error::LabelMismatch(format!(
                "{} labels for {} ranks",
                labels.len(),
                ranks.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(Error::LabelMismatch(format!("duplicate label {dup:?}")));
        }
        if ranks.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("rank vector".into()));
        }
        let rebuilt = average_ranks(&ranks);
        if rebuilt.iter().zip(&ranks).any(|(a, b)| (a - b).abs() > 1e-9) {
            return Err(Error::InvalidArgument(format!("{ranks:?} is not a valid ranking")));
        }
        Ok(Self { labels, ranks })
    }

    /// Ranks scores so that the largest score gets rank 1.
    pub fn from_scores(labels: Vec<String>, scores: &[f64]) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("scores".into()));
        }
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        Self::new(labels, average_ranks(&neg))
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn ranks(&self) -> &[f64] {
        &self.ranks
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    fn has_ties(&self) -> bool {
        self.ranks.iter().any(|r| r.fract() != 0.0)
            || {
                let mut s = self.ranks.clone();
                s.sort_by(f64::total_cmp);
                s.windows(2).any(|w| w[0] == w[1])
            }
    }
}

/// 1-based average ranks, smallest value first.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman's ρ between two rankings of the same labels. Rankings that
/// agree exactly score 1 even when fully tied; a constant ranking against a
/// non-constant one scores 0.
pub fn spearman(a: &RankVector, b: &RankVector) -> Result<f64> {
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument("spearman needs at least two items".into()));
    }
    if b.len() != n {
        return Err(Error::LabelMismatch(format!("{n} vs {} labels", b.len())));
    }
    let pos: BTreeMap<&str, usize> = b.labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let rb = a
        .labels
        .iter()
        .map(|l| {
            pos.get(l.as_str())
                .map(|&i| b.ranks[i])
                .ok_or_else(|| Error::LabelMismatch(format!("label {l:?} missing from second ranking")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let ra = &a.ranks;
    if ra.iter().zip(&rb).all(|(x, y)| x == y) {
        return Ok(1.0);
    }
    if !a.has_ties() && !b.has_ties() {
        let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
        let nf = n as f64;
        return Ok(1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0)));
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(ra) || constant(&rb) {
        return Ok(0.0);
    }
    Ok(pearson(ra, &rb))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    A,
    B,
    Draw,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub player_a: String,
    pub player_b: String,
    pub outcome: Outcome,
}

impl MatchRecord {
    pub fn new(player_a: impl Into<String>, player_b: impl Into<String>, outcome: Outcome) -> Result<Self> {
        let (player_a, player_b) = (player_a.into(), player_b.into());
        if player_a == player_b {
            return Err(Error::InvalidArgument(format!("{player_a:?} cannot play itself")));
        }
        Ok(Self {
            player_a,
            player_b,
            outcome,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EloTable {
    pub ratings: BTreeMap<String, f64>,
    pub k: f64,
    pub initial: f64,
}

impl EloTable {
    pub fn rating(&self, player: &str) -> Option<f64> {
        self.ratings.get(player).copied()
    }
}

pub const DEFAULT_K: f64 = 32.0;
pub const DEFAULT_INITIAL: f64 = 1000.0;

/// Sequential logistic Elo over `matches` in order. `players` are seeded at
/// `initial` even if they never play.
pub fn elo_run(players: &[&str], matches: &[MatchRecord], k: f64, initial: f64) -> Result<EloTable> {
    if !(k.is_finite() && initial.is_finite()) {
        return Err(Error::NonFinite("elo parameters".into()));
    }
    let mut ratings: BTreeMap<String, f64> = players.iter().map(|p| (p.to_string(), initial)).collect();
    for m in matches {
        if m.player_a == m.player_b {
            return Err(Error::InvalidArgument(format!("{:?} cannot play itself", m.player_a)));
        }
        let ra = *ratings.entry(m.player_a.clone()).or_insert(initial);
        let rb = *ratings.entry(m.player_b.clone()).or_insert(initial);
        let expected_a = 1.0 / (1.0 + 10f64.powf((rb - ra) / 400.0));
        let score_a = match m.outcome {
            Outcome::A => 1.0,
            Outcome::B => 0.0,
            Outcome::Draw => 0.5,
        };
        let delta = k * (score_a - expected_a);
        *ratings.get_mut(&m.player_a).expect("inserted above") += delta;
        *ratings.get_mut(&m.player_b).expect("inserted above") -= delta;
    }
    Ok(EloTable { ratings, k, initial })
}

/// Wins over decisive games for `player`.
pub fn win_rate(matches: &[MatchRecord], player: &str) -> Result<f64> {
    let (mut wins, mut losses, mut played) = (0usize, 0usize, 0usize);
    for m in matches {
        let side = if m.player_a == player {
            Outcome::A
        } else if m.player_b == player {
            Outcome::B
        } else {
            continue;
        };
        played += 1;
        match m.outcome {
            Outcome::Draw => {}
            o if o == side => wins += 1,
            _ => losses += 1,
        }
    }
    if played == 0 {
        return Err(Error::InvalidArgument(format!("{player:?} played no matches")));
    }
    if wins + losses == 0 {
        return Err(Error::InvalidArgument(format!("{player:?} has only draws")));
    }
    Ok(wins as f64 / (wins + losses) as f64)
}

/// One contender in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub mode: Mode,
    pub config: DistillConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub prompt_id: u32,
    pub seed: u64,
    pub utility: Option<f64>,
    pub reward: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub methods: Vec<String>,
    pub prompts: Vec<u32>,
    pub seeds: Vec<u64>,
    pub completed: BTreeMap<String, usize>,
    pub mean_utility: BTreeMap<String, f64>,
    pub mean_reward: BTreeMap<String, f64>,
    /// `win_matrix[i][j]`: share of paired runs where method i beat method
    /// j on utility, draws counting half.
    pub win_matrix: Vec<Vec<f64>>,
    pub elo: EloTable,
    /// Agreement between the utility and reward rankings of the methods.
    pub judge_spearman: Option<f64>,
    pub runs: Vec<RunResult>,
    pub failures: Vec<String>,
}

impl MetricReport {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("method,runs,mean_utility,mean_reward,elo\n");
        for m in &self.methods {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                m,
                self.completed.get(m).copied().unwrap_or(0),
                fmt_opt(self.mean_utility.get(m).copied()),
                fmt_opt(self.mean_reward.get(m).copied()),
                fmt_opt(self.elo.rating(m)),
            );
        }
        out
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from("method,prompt_id,seed,utility,reward,error\n");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.method,
                r.prompt_id,
                r.seed,
                fmt_opt(r.utility),
                fmt_opt(r.reward),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], " ")
            );
        }
        out
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// Initial asset for a comparison run; shared by every method so that runs
/// are paired.
pub fn initial_asset(dim: usize, scale: f64, seed: u64, prompt: u32) -> Result<Asset> {
    let mut rng = Rng::shard(seed, "init", u64::from(prompt));
    Asset::new((0..dim).map(|_| scale * rng.normal()).collect())
}

/// Distillation seed for one `(prompt, seed)` cell.
pub fn run_seed(seed: u64, prompt: u32) -> u64 {
    seed ^ u64::from(prompt).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// One distillation run from the shared initial asset, judged by utility
/// and, when a net is given, by reward.
pub fn run_method(
    suite: &Suite,
    sched: &NoiseSchedule,
    net: Option<&RewardNet>,
    prompt: u32,
    seed: u64,
    method: &MethodSpec,
    init_scale: f64,
) -> Result<(DistillOutcome, RunResult)> {
    let prior = suite.prior(prompt)?;
    let init = initial_asset(suite.rig.dim(), init_scale, seed, prompt)?;
    let cfg = DistillConfig {
        seed: run_seed(seed, prompt),
        ..method.config.clone()
    };
    let run = optimize(&init, &suite.rig, prior, sched, net, &cfg, method.mode)?;
    let (utility, reward) = judge(suite, net, prompt, &run.asset)?;
    let result = RunResult {
        method: method.name.clone(),
        prompt_id: prompt,
        seed,
        utility: Some(utility),
        reward,
        error: None,
    };
    Ok((run, result))
}

/// Utility and optional reward of a final asset.
pub fn judge(suite: &Suite, net: Option<&RewardNet>, prompt: u32, asset: &Asset) -> Result<(f64, Option<f64>)> {
    let image = render_all(asset, &suite.rig)?;
    let utility = suite.utility.utility(prompt, &image)?;
    let reward = net
        .map(|n| n.score(prompt, &image, suite.rig.camera_ids()))
        .transpose()?;
    Ok((utility, reward))
}

/// Runs every method on every `(prompt, seed)`, judges final assets by
/// utility and, when a net is given, by reward. Failed runs are recorded
/// and excluded from the aggregates.
#[allow(clippy::too_many_arguments)]
pub fn compare_methods(
    suite: &Suite,
    sched: &NoiseSchedule,
    net: Option<&RewardNet>,
    prompts: &[u32],
    seeds: &[u64],
    methods: &[MethodSpec],
    init_scale: f64,
) -> Result<MetricReport> {
    if methods.len() < 2 {
        return Err(Error::InvalidArgument("compare_methods needs at least two methods".into()));
    }
    if prompts.is_empty() || seeds.is_empty() {
        return Err(Error::Empty("prompts and seeds"));
    }
    for p in prompts {
        suite.prior(*p)?;
    }
    let mut names = std::collections::BTreeSet::new();
    if let Some(dup) = methods.iter().find(|m| !names.insert(m.name.as_str())) {
        return Err(Error::InvalidArgument(format!("duplicate method name {:?}", dup.name)));
    }

    let jobs: Vec<(u32, u64, usize)> = prompts
        .iter()
        .flat_map(|&p| seeds.iter().flat_map(move |&s| (0..methods.len()).map(move |m| (p, s, m))))
        .collect();
    let runs: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(prompt, seed, mi)| {
            let method = &methods[mi];
            match run_method(suite, sched, net, prompt, seed, method, init_scale) {
                Ok((_, result)) => result,
                Err(e) => RunResult {
                    method: method.name.clone(),
                    prompt_id: prompt,
                    seed,
                    utility: None,
                    reward: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let names: Vec<String> = methods.iter().map(|m| m.name.clone()).collect();
    Ok(summarize_runs(&names, prompts, seeds, runs, net.is_some()))
}

/// Aggregates run results laid out as `(prompt, seed, method)` in nested
/// order, methods in the order of `names`.
pub fn summarize_runs(names: &[String], prompts: &[u32], seeds: &[u64], runs: Vec<RunResult>, judged: bool) -> MetricReport {
    let names = names.to_vec();
    let m = names.len();
    let failures = runs
        .iter()
        .filter_map(|r| {
            r.error
                .as_ref()
                .map(|e| format!("{} prompt {} seed {}: {e}", r.method, r.prompt_id, r.seed))
        })
        .collect();

    let mut completed = BTreeMap::new();
    let mut mean_utility = BTreeMap::new();
    let mut mean_reward = BTreeMap::new();
    for name in &names {
        let mine: Vec<&RunResult> = runs.iter().filter(|r| &r.method == name && r.error.is_none()).collect();
        completed.insert(name.clone(), mine.len());
        if !mine.is_empty() {
            let n = mine.len() as f64;
            mean_utility.insert(name.clone(), mine.iter().filter_map(|r| r.utility).sum::<f64>() / n);
            if judged {
                mean_reward.insert(name.clone(), mine.iter().filter_map(|r| r.reward).sum::<f64>() / n);
            }
        }
    }

    let mut wins = vec![vec![0.0; m]; m];
    let mut games = vec![vec![0usize; m]; m];
    let mut matches = Vec::new();
    for block in runs.chunks(m) {
        for i in 0..m {
            for j in i + 1..m {
                let (Some(ui), Some(uj)) = (block[i].utility, block[j].utility) else {
                    continue;
                };
                let outcome = match ui.partial_cmp(&uj) {
                    Some(std::cmp::Ordering::Greater) => Outcome::A,
                    Some(std::cmp::Ordering::Less) => Outcome::B,
                    _ => Outcome::Draw,
                };
                let (si, sj) = match outcome {
                    Outcome::A => (1.0, 0.0),
                    Outcome::B => (0.0, 1.0),
                    Outcome::Draw => (0.5, 0.5),
                };
                wins[i][j] += si;
                wins[j][i] += sj;
                games[i][j] += 1;
                games[j][i] += 1;
                matches.push(MatchRecord {
                    player_a: names[i].clone(),
                    player_b: names[j].clone(),
                    outcome,
                });
            }
        }
    }
    let win_matrix = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| if games[i][j] > 0 { wins[i][j] / games[i][j] as f64 } else { 0.5 })
                .collect()
        })
        .collect();
    let players: Vec<&str> = names.iter().map(String::as_str).collect();
    let elo = elo_run(&players, &matches, DEFAULT_K, DEFAULT_INITIAL).expect("finite defaults");

    let judge_spearman = if judged && mean_utility.len() == m && mean_reward.len() == m && m >= 2 {
        let u: Vec<f64> = names.iter().map(|n| mean_utility[n]).collect();
        let r: Vec<f64> = names.iter().map(|n| mean_reward[n]).collect();
        RankVector::from_scores(names.clone(), &u)
            .and_then(|a| RankVector::from_scores(names.clone(), &r).and_then(|b| spearman(&a, &b)))
            .ok()
    } else {
        None
    };

    MetricReport {
        methods: names,
        prompts: prompts.to_vec(),
        seeds: seeds.to_vec(),
        completed,
        mean_utility,
        mean_reward,
        win_matrix,
        elo,
        judge_spearman,
        runs,
        failures,
    }
}

const SVG_W: f64 = 480.0;
const SVG_H: f64 = 300.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        SVG_W / 2.0,
        escape(title)
    )
}

/// Polyline chart, one line per series, shared y-range.
pub fn line_chart_svg(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let mut out = svg_open(title);
    let finite = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };
    let longest = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    let (pw, ph) = (SVG_W - 2.0 * MARGIN, SVG_H - 2.0 * MARGIN);
    let _ = writeln!(
        out,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#888\"/>"
    );
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{hi:.3}</text>", MARGIN - 4.0, MARGIN + 4.0);
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{lo:.3}</text>", MARGIN - 4.0, MARGIN + ph);
    for (si, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| {
                let x = MARGIN + pw * i as f64 / (longest - 1) as f64;
                let y = MARGIN + ph * (1.0 - (v - lo) / (hi - lo));
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            points.join(" ")
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>",
            MARGIN + 6.0,
            MARGIN + 14.0 * (si + 1) as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Vertical bars measured from the smallest value (or zero, if lower).
pub fn bar_chart_svg(title: &str, bars: &[(String, f64)]) -> String {
    let mut out = svg_open(title);
    let (pw, ph) = (SVG_W - 2.0 * MARGIN, SVG_H - 2.0 * MARGIN);
    let hi = bars.iter().map(|b| b.1).filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let lo = bars
        .iter()
        .map(|b| b.1)
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::min);
    let hi = if hi > lo { hi } else { lo + 1.0 };
    let slot = pw / bars.len().max(1) as f64;
    for (i, (name, v)) in bars.iter().enumerate() {
        let v = if v.is_finite() { *v } else { lo };
        let h = ph * (v - lo) / (hi - lo);
        let x = MARGIN + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            out,
            "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{}\"/>",
            MARGIN + ph - h,
            slot * 0.7,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{} ({v:.1})</text>",
            x + slot * 0.35,
            MARGIN + ph + 14.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}
