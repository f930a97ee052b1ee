//! Synthetic benchmark: two-mode prompt priors, hidden preference targets
//! and candidate items for annotation.
//!
//! Every prompt has two prior modes A and B in asset space. The hidden
//! utility target sits near mode B, shifted by a random offset, so the
//! prior's most likely outputs are never exactly what annotators prefer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffusion::{MixtureComponent, PromptPrior};
use crate::error::{Error, Result};
use crate::numcore::Rng;
use crate::preference::{ComparisonPair, CriterionWeights, GroundTruthUtility, ItemSet};
use crate::reward::{pairwise_accuracy, PreferenceExample, RewardNet};
use crate::scene::{render_all, Asset, CameraRig, MultiViewImage, PostMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub num_prompts: usize,
    /// Asset dimension, equal to the per-view pixel count.
    pub dim: usize,
    pub views: usize,
    pub post_map: PostMap,
    /// Isotropic variance of each prior component in view space.
    pub prior_var: f64,
    /// Prior weight of mode B; mode A gets the rest.
    pub weight_b: f64,
    /// Spread of the mode midpoints around the origin.
    pub center_scale: f64,
    /// Distance between the two modes.
    pub mode_separation: f64,
    /// Distance from mode B to the hidden target.
    pub target_shift: f64,
    pub sets_per_prompt: usize,
    pub items_per_set: usize,
    /// Largest standard deviation of candidate assets around their mode;
    /// each item draws its own scale uniformly below it.
    pub item_spread: f64,
    /// Largest per-pixel standard deviation of independent view noise.
    pub view_noise: f64,
    pub weights: CriterionWeights,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            num_prompts: 4,
            dim: 4,
            views: 4,
            post_map: PostMap::Linear,
            prior_var: 0.02,
            weight_b: 0.5,
            center_scale: 0.5,
            mode_separation: 2.0,
            target_shift: 0.5,
            sets_per_prompt: 20,
            items_per_set: 9,
            item_spread: 1.0,
            view_noise: 0.1,
            weights: CriterionWeights::default(),
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_prompts == 0 || self.dim == 0 || self.views == 0 {
            return Err(Error::InvalidArgument("suite needs prompts, dim and views".into()));
        }
        if !(self.prior_var > 0.0) {
            return Err(Error::InvalidArgument("prior_var must be positive".into()));
        }
        if !(0.0 < self.weight_b && self.weight_b < 1.0) {
            return Err(Error::InvalidArgument("weight_b must lie in (0, 1)".into()));
        }
        let scales = [
            self.center_scale,
            self.mode_separation,
            self.target_shift,
            self.item_spread,
            self.view_noise,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidArgument("suite scales must be finite and >= 0".into()));
        }
        self.weights.validate()
    }
}

/// Asset-space geometry of one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub prompt_id: u32,
    pub mode_a: Vec<f64>,
    pub mode_b: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub config: SuiteConfig,
    pub rig: CameraRig,
    pub prompts: Vec<PromptSpec>,
    pub priors: Vec<PromptPrior>,
    pub utility: GroundTruthUtility,
}

fn unit_vector(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn offset(base: &[f64], dir: &[f64], by: f64) -> Vec<f64> {
    base.iter().zip(dir).map(|(b, d)| b + by * d).collect()
}

fn render_vec(rig: &CameraRig, theta: &[f64]) -> Result<MultiViewImage> {
    render_all(&Asset::new(theta.to_vec())?, rig)
}

impl Suite {
    pub fn build(config: &SuiteConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let rig = CameraRig::orbit(config.dim, config.views)?.with_post_map(config.post_map);
        let mut prompts = Vec::with_capacity(config.num_prompts);
        let mut priors = Vec::with_capacity(config.num_prompts);
        let mut targets = BTreeMap::new();
        for p in 0..config.num_prompts {
            let id = p as u32;
            let center: Vec<f64> = (0..config.dim).map(|_| config.center_scale * rng.normal()).collect();
            let axis = unit_vector(rng, config.dim);
            let mode_a = offset(&center, &axis, -0.5 * config.mode_separation);
            let mode_b = offset(&center, &axis, 0.5 * config.mode_separation);
            let shift = unit_vector(rng, config.dim);
            let target = offset(&mode_b, &shift, config.target_shift);

            let n = config.dim * config.views;
            let component = |theta: &[f64], weight: f64| -> Result<MixtureComponent> {
                Ok(MixtureComponent {
                    weight,
                    mean: render_vec(&rig, theta)?.flat().to_vec(),
                    var: vec![config.prior_var; n],
                })
            };
            priors.push(PromptPrior::new(
                id,
                vec![
                    component(&mode_a, 1.0 - config.weight_b)?,
                    component(&mode_b, config.weight_b)?,
                ],
            )?);
            targets.insert(id, render_vec(&rig, &target)?);
            prompts.push(PromptSpec {
                prompt_id: id,
                mode_a,
                mode_b,
                target,
            });
        }
        let utility = GroundTruthUtility::new(targets, config.weights, rig.clone())?;
        Ok(Self {
            config: config.clone(),
            rig,
            prompts,
            priors,
            utility,
        })
    }

    pub fn prompt(&self, id: u32) -> Result<&PromptSpec> {
        self.prompts.get(id as usize).ok_or(Error::UnknownPrompt(id))
    }

    pub fn prior(&self, id: u32) -> Result<&PromptPrior> {
        self.priors.get(id as usize).ok_or(Error::UnknownPrompt(id))
    }

    /// One candidate: an asset jittered around a random mode with a random
    /// scale, rendered, with independent per-view noise of random strength.
    pub fn sample_item(&self, id: u32, rng: &mut Rng) -> Result<MultiViewImage> {
        let spec = self.prompt(id)?;
        let mode = if rng.uniform() < 0.5 { &spec.mode_a } else { &spec.mode_b };
        let scale = self.config.item_spread * rng.uniform();
        let theta: Vec<f64> = mode
            .iter()
            .map(|m| m + scale * rng.normal())
            .collect();
        let mut image = render_vec(&self.rig, &theta)?;
        let strength = self.config.view_noise * rng.uniform();
        if strength > 0.0 {
            for v in image.views.data_mut() {
                *v += strength * rng.normal();
            }
        }
        Ok(image)
    }

    pub fn sample_set(&self, id: u32, size: usize, rng: &mut Rng) -> Result<ItemSet> {
        let items = (0..size).map(|_| self.sample_item(id, rng)).collect::<Result<_>>()?;
        Ok(ItemSet { prompt_id: id, items })
    }

    /// `sets_per_prompt` sets of `items_per_set` items for every prompt.
    pub fn sample_sets(&self, rng: &mut Rng) -> Result<Vec<ItemSet>> {
        let mut out = Vec::with_capacity(self.prompts.len() * self.config.sets_per_prompt);
        for spec in &self.prompts {
            for _ in 0..self.config.sets_per_prompt {
                out.push(self.sample_set(spec.prompt_id, self.config.items_per_set, rng)?);
            }
        }
        Ok(out)
    }

    /// Pairwise accuracy of `net` when each pair is oriented by the hidden
    /// utility rather than by its label.
    pub fn utility_accuracy(&self, net: &RewardNet, pairs: &[PreferenceExample]) -> Result<f64> {
        let oriented = pairs
            .iter()
            .map(|p| {
                let uw = self.utility.utility(p.prompt_id, &p.winner)?;
                let ul = self.utility.utility(p.prompt_id, &p.loser)?;
                let mut p = p.clone();
                if ul > uw {
                    std::mem::swap(&mut p.winner, &mut p.loser);
                    std::mem::swap(&mut p.cams_w, &mut p.cams_l);
                }
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        pairwise_accuracy(net, &oriented)
    }

    /// Ground-truth utility of an asset rendered through the suite rig.
    pub fn asset_utility(&self, id: u32, asset: &Asset) -> Result<f64> {
        self.utility.utility(id, &render_all(asset, &self.rig)?)
    }
}

/// Attaches item images to comparison pairs. `sets[i]` is the item set
/// that the ids of `pairs[i]` refer to.
pub fn materialize_pairs(pairs: &[ComparisonPair], sets: &[&ItemSet]) -> Result<Vec<PreferenceExample>> {
    if pairs.len() != sets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} pairs but {} item sets",
            pairs.len(),
            sets.len()
        )));
    }
    pairs
        .iter()
        .zip(sets)
        .map(|(p, set)| {
            let get = |id: u32| {
                set.items.get(id as usize).cloned().ok_or(Error::IndexOutOfRange {
                    what: "item",
                    index: id as usize,
                    len: set.items.len(),
                })
            };
            Ok(PreferenceExample {
                prompt_id: p.prompt_id,
                winner: get(p.winner)?,
                loser: get(p.loser)?,
                cams_w: p.cams_w.clone(),
                cams_l: p.cams_l.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_are_separated_and_target_is_shifted() {
        let cfg = SuiteConfig::default();
        let suite = Suite::build(&cfg, &mut Rng::new(3)).unwrap();
        for spec in &suite.prompts {
            let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!((d(&spec.mode_a, &spec.mode_b) - cfg.mode_separation).abs() < 1e-12);
            assert!((d(&spec.mode_b, &spec.target) - cfg.target_shift).abs() < 1e-12);
        }
    }

    #[test]
    fn mode_b_is_preferred_over_mode_a() {
        let suite = Suite::build(&SuiteConfig::default(), &mut Rng::new(5)).unwrap();
        for spec in &suite.prompts {
            let u = |t: &[f64]| suite.asset_utility(spec.prompt_id, &Asset::new(t.to_vec()).unwrap()).unwrap();
            assert!(u(&spec.mode_b) > u(&spec.mode_a));
            assert!(u(&spec.target) > u(&spec.mode_a));
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = SuiteConfig {
            weight_b: 1.0,
            ..SuiteConfig::default()
        };
        assert!(Suite::build(&cfg, &mut Rng::new(0)).is_err());
    }
}
