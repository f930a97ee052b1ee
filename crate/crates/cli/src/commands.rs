//! The subcommands: run a pipeline stage, persist its outputs, record them
//! in the manifest.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use dreamlab::distill::Mode;
use dreamlab::eval::{bar_chart_svg, judge, line_chart_svg, RunResult};
use dreamlab::reward::{RewardCheckpoint, RewardNet};
use dreamlab::scene::Asset;
use dreamlab::suite::Suite;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::manifest::{ArtifactWriter, RunManifest, StageRecord, StageStatus};
use crate::pipeline::{self, Dataset, ItemRecord};

pub const DATA_DIR: &str = "data";
pub const CHECKPOINT: &str = "reward/checkpoint.json";

pub fn run_dir(mode: Mode, prompt: u32, index: usize) -> String {
    format!("runs/{mode}/{}", pipeline::run_dir_name(prompt, index))
}

/// Runs `body` as the stage `name` and records its outcome and outputs in
/// the manifest, whether or not it succeeded.
fn stage<F>(cfg: &ExperimentConfig, name: &str, body: F) -> Result<()>
where
    F: FnOnce(&mut ArtifactWriter) -> Result<()>,
{
    let out = cfg.out.as_path();
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    let mut manifest = RunManifest::load_or_new(out, &cfg.hash(), cfg.seed);
    let start = Instant::now();
    let mut writer = ArtifactWriter::new(out, name);
    let result = body(&mut writer);
    let record = StageRecord {
        name: name.to_string(),
        status: if result.is_ok() { StageStatus::Ok } else { StageStatus::Failed },
        error: result.as_ref().err().map(ToString::to_string),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    manifest.record(record, writer.into_artifacts());
    manifest.write(out)?;
    result
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(CliError::MissingInput(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(CliError::io(path))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(CliError::json(path)))
        .collect()
}

pub fn load_dataset(out: &Path) -> Result<Dataset> {
    let dir = out.join(DATA_DIR);
    let items_path = dir.join("items.json");
    let items: Vec<ItemRecord> = serde_json::from_str(&read_text(&items_path)?).map_err(CliError::json(&items_path))?;
    Ok(Dataset {
        items,
        ratings: read_jsonl(&dir.join("ratings.jsonl"))?,
        rankings: read_jsonl(&dir.join("rankings.jsonl"))?,
        pairs: read_jsonl(&dir.join("pairs.jsonl"))?,
    })
}

pub fn load_checkpoint(out: &Path) -> Result<RewardCheckpoint> {
    let path = out.join(CHECKPOINT);
    let text = read_text(&path)?;
    RewardCheckpoint::from_json(&text).map_err(|e| match e {
        dreamlab::Error::Json(source) => CliError::Json { path, source },
        other => other.into(),
    })
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    stage(cfg, "gen-data", |w| {
        let suite = pipeline::build_suite(cfg)?;
        let data = pipeline::generate_data(cfg, &suite)?;
        w.write_json("data/suite.json", &suite)?;
        w.write_json("data/items.json", &data.items)?;
        w.write_jsonl("data/ratings.jsonl", &data.ratings)?;
        w.write_jsonl("data/rankings.jsonl", &data.rankings)?;
        w.write_jsonl("data/pairs.jsonl", &data.pairs)?;
        println!(
            "gen-data: {} sets, {} items, {} ratings, {} pairs ({} flagged)",
            data.rankings.len(),
            data.items.len(),
            data.ratings.len(),
            data.pairs.len(),
            data.flagged_pairs()
        );
        Ok(())
    })
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |a| format!("{a:.3}"))
}

pub fn train_reward(cfg: &ExperimentConfig) -> Result<()> {
    stage(cfg, "train-reward", |w| {
        let data = load_dataset(&cfg.out)?;
        let suite = pipeline::build_suite(cfg)?;
        let trained = pipeline::train_reward_stage(cfg, &suite, &data)?;
        w.write("reward/checkpoint.json", trained.checkpoint.to_json()? + "\n")?;
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in trained.loss_curve.iter().enumerate() {
            let _ = writeln!(csv, "{},{l:e}", i + 1);
        }
        w.write("reward/loss_curve.csv", csv)?;
        w.write(
            "reward/loss_curve.svg",
            line_chart_svg("reward training loss", &[("loss".into(), trained.loss_curve.clone())]),
        )?;
        let meta = &trained.checkpoint.metadata;
        println!(
            "train-reward: {} train / {} held-out pairs, final loss {}, held-out accuracy {} (labels) {} (utility)",
            meta.train_pairs,
            meta.heldout_pairs,
            fmt_acc(meta.final_loss),
            fmt_acc(meta.heldout_accuracy),
            fmt_acc(meta.heldout_utility_accuracy)
        );
        Ok(())
    })
}

pub fn optimize(cfg: &ExperimentConfig, mode: Mode) -> Result<()> {
    let checkpoint_path = cfg.out.join(CHECKPOINT);
    if mode == Mode::DreamFl && !checkpoint_path.exists() {
        return Err(CliError::Usage(format!(
            "dreamfl mode needs a reward checkpoint at {}; run train-reward first",
            checkpoint_path.display()
        )));
    }
    stage(cfg, &format!("optimize-{mode}"), |w| {
        let suite = pipeline::build_suite(cfg)?;
        let checkpoint = match mode {
            Mode::DreamFl => Some(load_checkpoint(&cfg.out)?),
            Mode::Sds => None,
        };
        let runs = pipeline::optimize_stage(cfg, &suite, checkpoint.as_ref().map(|c| &c.net), mode)?;
        for run in &runs {
            let dir = run_dir(mode, run.prompt, run.index);
            w.write_json(&format!("{dir}/asset.json"), &run.outcome.asset)?;
            w.write(&format!("{dir}/trace.csv"), run.outcome.trace.to_csv())?;
        }
        let mean = runs.iter().filter_map(|r| r.result.utility).sum::<f64>() / runs.len() as f64;
        println!("optimize {mode}: {} runs, mean utility {mean:.4}", runs.len());
        Ok(())
    })
}

fn judge_runs(cfg: &ExperimentConfig, suite: &Suite, net: Option<&RewardNet>, mode: Mode) -> Result<Vec<RunResult>> {
    let mut results = Vec::new();
    for prompt in cfg.prompts() {
        for index in 0..cfg.eval.seeds {
            let path = cfg.out.join(run_dir(mode, prompt, index)).join("asset.json");
            let asset: Asset = serde_json::from_str(&read_text(&path)?).map_err(CliError::json(&path))?;
            let (utility, reward) = judge(suite, net, prompt, &asset)?;
            results.push(RunResult {
                method: mode.to_string(),
                prompt_id: prompt,
                seed: pipeline::run_seed(cfg, index),
                utility: Some(utility),
                reward,
                error: None,
            });
        }
    }
    Ok(results)
}

/// Run directories the config expects that hold no final asset.
pub fn missing_runs(cfg: &ExperimentConfig) -> Vec<String> {
    let mut missing = Vec::new();
    for mode in [Mode::Sds, Mode::DreamFl] {
        for prompt in cfg.prompts() {
            for index in 0..cfg.eval.seeds {
                let dir = run_dir(mode, prompt, index);
                if !cfg.out.join(&dir).join("asset.json").exists() {
                    missing.push(dir);
                }
            }
        }
    }
    missing
}

pub fn eval(cfg: &ExperimentConfig) -> Result<()> {
    stage(cfg, "eval", |w| {
        let missing = missing_runs(cfg);
        if !missing.is_empty() {
            return Err(CliError::IncompleteRuns(missing));
        }
        let suite = pipeline::build_suite(cfg)?;
        let checkpoint = match load_checkpoint(&cfg.out) {
            Ok(c) => Some(c),
            Err(CliError::MissingInput(_)) => None,
            Err(e) => return Err(e),
        };
        let net = checkpoint.as_ref().map(|c| &c.net);
        let sds = judge_runs(cfg, &suite, net, Mode::Sds)?;
        let dreamfl = judge_runs(cfg, &suite, net, Mode::DreamFl)?;
        let report = pipeline::summarize(cfg, &sds, &dreamfl, net.is_some());

        w.write_json("eval/report.json", &report)?;
        w.write("eval/summary.csv", report.summary_csv())?;
        w.write("eval/runs.csv", report.runs_csv())?;
        let bars = |values: &std::collections::BTreeMap<String, f64>| -> Vec<(String, f64)> {
            report
                .methods
                .iter()
                .map(|m| (m.clone(), values.get(m).copied().unwrap_or(f64::NAN)))
                .collect()
        };
        w.write("eval/utility.svg", bar_chart_svg("mean utility", &bars(&report.mean_utility)))?;
        w.write("eval/elo.svg", bar_chart_svg("Elo", &bars(&report.elo.ratings)))?;
        if net.is_some() {
            w.write("eval/reward.svg", bar_chart_svg("mean reward", &bars(&report.mean_reward)))?;
        }

        print!("{}", report.summary_csv());
        if let Some(rho) = report.judge_spearman {
            println!("judge spearman: {rho:.3}");
        }
        println!("dreamfl beats sds in {:.1}% of paired runs", 100.0 * report.win_matrix[1][0]);
        Ok(())
    })
}

pub fn all(cfg: &ExperimentConfig) -> Result<()> {
    gen_data(cfg)?;
    train_reward(cfg)?;
    optimize(cfg, Mode::Sds)?;
    optimize(cfg, Mode::DreamFl)?;
    eval(cfg)
}

