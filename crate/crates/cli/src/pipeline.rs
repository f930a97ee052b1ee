//! In-memory pipeline stages. The command layer persists what these return;
//! tests call them directly.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dreamlab::distill::{DistillOutcome, Mode};
use dreamlab::eval::{run_method, summarize_runs, MethodSpec, MetricReport, RunResult};
use dreamlab::numcore::Rng;
use dreamlab::preference::{annotate_set, filter_items, ComparisonPair, RankingSet, RatingRecord};
use dreamlab::reward::{
    pairwise_accuracy, train_reward, PreferenceExample, RewardCheckpoint, RewardNet, TrainingMetadata,
};
use dreamlab::scene::MultiViewImage;
use dreamlab::suite::Suite;

use crate::config::ExperimentConfig;
use crate::error::Result;

/// One rendered candidate with an id unique across the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: u32,
    pub set_id: u32,
    pub prompt_id: u32,
    pub image: MultiViewImage,
}

/// Annotated dataset. Item ids in ratings, rankings and pairs refer to
/// [`ItemRecord::item_id`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub items: Vec<ItemRecord>,
    pub ratings: Vec<RatingRecord>,
    pub rankings: Vec<RankingSet>,
    pub pairs: Vec<ComparisonPair>,
}

impl Dataset {
    pub fn flagged_pairs(&self) -> usize {
        self.pairs.iter().filter(|p| p.flagged).count()
    }

    /// Pairs with their images attached.
    pub fn examples(&self) -> Result<Vec<PreferenceExample>> {
        let images: BTreeMap<u32, &MultiViewImage> = self.items.iter().map(|r| (r.item_id, &r.image)).collect();
        let get = |id: u32| {
            images.get(&id).map(|x| (*x).clone()).ok_or(dreamlab::Error::IndexOutOfRange {
                what: "item",
                index: id as usize,
                len: images.len(),
            })
        };
        let examples = self
            .pairs
            .iter()
            .map(|p| {
                Ok(PreferenceExample {
                    prompt_id: p.prompt_id,
                    winner: get(p.winner)?,
                    loser: get(p.loser)?,
                    cams_w: p.cams_w.clone(),
                    cams_l: p.cams_l.clone(),
                })
            })
            .collect::<dreamlab::Result<_>>()?;
        Ok(examples)
    }
}

pub fn build_suite(cfg: &ExperimentConfig) -> Result<Suite> {
    Ok(Suite::build(&cfg.suite, &mut Rng::named(cfg.seed, "suite"))?)
}

/// Samples candidate sets, filters them, and runs the annotation pipeline
/// on each surviving set.
pub fn generate_data(cfg: &ExperimentConfig, suite: &Suite) -> Result<Dataset> {
    let mut rng = Rng::named(cfg.seed, "data");
    let sampled = suite.sample_sets(&mut rng)?;
    let sets = filter_items(
        &sampled,
        &suite.utility,
        cfg.data.min_quality.unwrap_or(f64::NEG_INFINITY),
        cfg.data.min_spread,
    )?;
    if sets.is_empty() {
        return Err(dreamlab::Error::Empty("item sets after filtering").into());
    }

    let mut data = Dataset {
        items: Vec::new(),
        ratings: Vec::new(),
        rankings: Vec::new(),
        pairs: Vec::new(),
    };
    for (set_id, set) in sets.iter().enumerate() {
        let base = data.items.len() as u32;
        let annotated = annotate_set(&suite.utility, set, &cfg.annotators, &suite.rig, &mut rng)?;
        data.items.extend(set.items.iter().enumerate().map(|(i, image)| ItemRecord {
            item_id: base + i as u32,
            set_id: set_id as u32,
            prompt_id: set.prompt_id,
            image: image.clone(),
        }));
        data.ratings.extend(annotated.records.into_iter().map(|mut r| {
            r.item_id += base;
            r
        }));
        let mut ranking = annotated.ranking;
        ranking.order.iter_mut().for_each(|i| *i += base);
        ranking.tie_groups.iter_mut().flatten().for_each(|i| *i += base);
        data.rankings.push(ranking);
        data.pairs.extend(annotated.pairs.into_iter().map(|mut p| {
            p.winner += base;
            p.loser += base;
            p
        }));
    }
    Ok(data)
}

/// Shuffles the examples and splits off the configured train and held-out
/// counts. A dataset smaller than both together is split proportionally.
pub fn split_examples(
    cfg: &ExperimentConfig,
    mut examples: Vec<PreferenceExample>,
) -> Result<(Vec<PreferenceExample>, Vec<PreferenceExample>)> {
    if examples.is_empty() {
        return Err(dreamlab::Error::Empty("preference pairs").into());
    }
    Rng::named(cfg.seed, "split").shuffle(&mut examples);
    let (want_train, want_held) = (cfg.data.train_pairs, cfg.data.heldout_pairs);
    let n = examples.len();
    let (train, held) = if n >= want_train + want_held {
        (want_train, want_held)
    } else {
        let held = n * want_held / (want_train + want_held);
        (n - held, held)
    };
    let heldout = examples[train..train + held].to_vec();
    examples.truncate(train);
    Ok((examples, heldout))
}

pub struct RewardStage {
    pub checkpoint: RewardCheckpoint,
    pub loss_curve: Vec<f64>,
}

pub fn train_reward_stage(cfg: &ExperimentConfig, suite: &Suite, dataset: &Dataset) -> Result<RewardStage> {
    let (train, heldout) = split_examples(cfg, dataset.examples()?)?;
    let mut net = RewardNet::new(
        cfg.suite.num_prompts,
        cfg.suite.views,
        cfg.suite.dim,
        &cfg.reward_arch,
        &mut Rng::named(cfg.seed, "reward"),
    )?;
    let train_cfg = cfg.reward.train_config(cfg.seed);
    let report = train_reward(&mut net, &train, &train_cfg)?;
    let (heldout_accuracy, heldout_utility_accuracy) = if heldout.is_empty() {
        (None, None)
    } else {
        (
            Some(pairwise_accuracy(&net, &heldout)?),
            Some(suite.utility_accuracy(&net, &heldout)?),
        )
    };
    let metadata = TrainingMetadata {
        train_pairs: train.len(),
        heldout_pairs: heldout.len(),
        steps: report.steps,
        final_loss: report.loss_curve.last().copied(),
        heldout_accuracy,
        heldout_utility_accuracy,
    };
    Ok(RewardStage {
        checkpoint: RewardCheckpoint {
            config: train_cfg,
            arch: cfg.reward_arch.clone(),
            freeze_mask: net.freeze_mask(),
            net,
            metadata,
        },
        loss_curve: report.loss_curve,
    })
}

pub fn method(cfg: &ExperimentConfig, mode: Mode) -> MethodSpec {
    MethodSpec {
        name: mode.to_string(),
        mode,
        config: cfg.distill.for_mode(mode).clone(),
    }
}

/// Seed of run `index`, drawn from the experiment's distillation stream.
pub fn run_seed(cfg: &ExperimentConfig, index: usize) -> u64 {
    Rng::shard(cfg.seed, "distill", index as u64).next_u64()
}

/// Directory name of one run, relative to the mode's run directory.
pub fn run_dir_name(prompt: u32, index: usize) -> String {
    format!("p{prompt}_s{index}")
}

pub struct RunArtifact {
    pub prompt: u32,
    pub index: usize,
    pub outcome: DistillOutcome,
    pub result: RunResult,
}

/// Distills every configured `(prompt, seed)` cell in `mode`. Cells run in
/// parallel; results come back in prompt-major order.
pub fn optimize_stage(
    cfg: &ExperimentConfig,
    suite: &Suite,
    net: Option<&RewardNet>,
    mode: Mode,
) -> Result<Vec<RunArtifact>> {
    let sched = cfg.schedule()?;
    let spec = method(cfg, mode);
    let cells: Vec<(u32, usize)> = cfg
        .prompts()
        .into_iter()
        .flat_map(|p| (0..cfg.eval.seeds).map(move |i| (p, i)))
        .collect();
    cells
        .par_iter()
        .map(|&(prompt, index)| {
            let seed = run_seed(cfg, index);
            let (outcome, result) = run_method(suite, &sched, net, prompt, seed, &spec, cfg.eval.init_scale)?;
            Ok(RunArtifact {
                prompt,
                index,
                outcome,
                result,
            })
        })
        .collect()
}

/// Aggregates finished runs of both modes, each listed in the order
/// [`optimize_stage`] produces them.
pub fn summarize(cfg: &ExperimentConfig, sds: &[RunResult], dreamfl: &[RunResult], judged: bool) -> MetricReport {
    let names = vec![Mode::Sds.to_string(), Mode::DreamFl.to_string()];
    let runs: Vec<RunResult> = sds
        .iter()
        .zip(dreamfl)
        .flat_map(|(a, b)| [a.clone(), b.clone()])
        .collect();
    let seeds: Vec<u64> = (0..cfg.eval.seeds).map(|i| run_seed(cfg, i)).collect();
    summarize_runs(&names, &cfg.prompts(), &seeds, runs, judged)
}
