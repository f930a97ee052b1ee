//! Preference scorer `r(y, x, c)` and its pairwise ranking-loss trainer.
//!
//! Each view is encoded together with the prompt embedding and its camera
//! embedding; encodings are mean-pooled over views and a fusion head maps
//! the pooled feature to a scalar. Gradients with respect to parameters and
//! to every view pixel are computed analytically.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Activation, ForwardTrace, MlpGrads, MlpNetwork, OptimState, Rng, Tensor};
use crate::scene::MultiViewImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardArch {
    pub embed_dim: usize,
    pub camera_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub head_hidden: Vec<usize>,
    pub init_gain: f64,
}

impl Default for RewardArch {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            camera_dim: 4,
            encoder_hidden: vec![32, 32],
            feature_dim: 16,
            head_hidden: vec![16],
            init_gain: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardNet {
    prompt_emb: Tensor,
    camera_emb: Tensor,
    encoder: MlpNetwork,
    head: MlpNetwork,
    view_dim: usize,
    freeze_fraction: f64,
    /// Also freezes the fusion head and both embedding tables.
    head_frozen: bool,
}

/// Forward pass record reused by the gradient routines.
#[derive(Debug, Clone)]
pub struct ScoreTrace {
    prompt: usize,
    cams: Vec<usize>,
    encoder: Vec<ForwardTrace>,
    head: ForwardTrace,
}

impl ScoreTrace {
    pub fn score(&self) -> f64 {
        self.head.output()[0]
    }
}

/// Gradients of the score with respect to every parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardGrads {
    pub prompt_emb: Tensor,
    pub camera_emb: Tensor,
    pub encoder: MlpGrads,
    pub head: MlpGrads,
}

impl RewardGrads {
    fn zeros_like(net: &RewardNet) -> Self {
        Self {
            prompt_emb: Tensor::zeros(net.prompt_emb.shape()),
            camera_emb: Tensor::zeros(net.camera_emb.shape()),
            encoder: MlpGrads::zeros_like(&net.encoder),
            head: MlpGrads::zeros_like(&net.head),
        }
    }

    fn accumulate(&mut self, other: &Self, scale: f64) -> Result<()> {
        self.prompt_emb.axpy(scale, &other.prompt_emb)?;
        self.camera_emb.axpy(scale, &other.camera_emb)?;
        self.encoder.accumulate(&other.encoder, scale)?;
        self.head.accumulate(&other.head, scale)
    }

    fn fill_zero(&mut self) {
        self.prompt_emb.data_mut().iter_mut().for_each(|v| *v = 0.0);
        self.camera_emb.data_mut().iter_mut().for_each(|v| *v = 0.0);
        self.encoder.fill_zero();
        self.head.fill_zero();
    }

    fn blocks(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.prompt_emb, &self.camera_emb];
        out.extend(self.encoder.blocks());
        out.extend(self.head.blocks());
        out
    }
}

impl RewardNet {
    /// Random prompt embeddings, one-hot camera embeddings (zero-padded when
    /// `camera_dim > views`), Gaussian encoder and a head whose last layer
    /// starts at zero.
    pub fn new(num_prompts: usize, views: usize, view_dim: usize, arch: &RewardArch, rng: &mut Rng) -> Result<Self> {
        if num_prompts == 0 || views == 0 || view_dim == 0 {
            return Err(Error::InvalidArgument("reward net needs prompts, views and pixels".into()));
        }
        let prompt_emb = rng.normal_tensor(&[num_prompts, arch.embed_dim]);
        let mut camera_emb = Tensor::zeros(&[views, arch.camera_dim]);
        for k in 0..views.min(arch.camera_dim) {
            camera_emb.row_mut(k)[k] = 1.0;
        }
        let mut enc_dims = vec![arch.embed_dim + view_dim + arch.camera_dim];
        enc_dims.extend(&arch.encoder_hidden);
        enc_dims.push(arch.feature_dim);
        let encoder = MlpNetwork::random(&enc_dims, Activation::Tanh, arch.init_gain, rng)?;
        let mut head_dims = vec![arch.feature_dim];
        head_dims.extend(&arch.head_hidden);
        head_dims.push(1);
        let mut head = MlpNetwork::random(&head_dims, Activation::Tanh, arch.init_gain, rng)?;
        head.zero_last_layer();
        Ok(Self {
            prompt_emb,
            camera_emb,
            encoder,
            head,
            view_dim,
            freeze_fraction: 0.0,
            head_frozen: false,
        })
    }

    pub fn num_prompts(&self) -> usize {
        self.prompt_emb.rows()
    }

    pub fn num_cameras(&self) -> usize {
        self.camera_emb.rows()
    }

    pub fn view_dim(&self) -> usize {
        self.view_dim
    }

    pub fn encoder(&self) -> &MlpNetwork {
        &self.encoder
    }

    pub fn head(&self) -> &MlpNetwork {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut MlpNetwork {
        &mut self.head
    }

    pub fn encoder_mut(&mut self) -> &mut MlpNetwork {
        &mut self.encoder
    }

    pub fn prompt_embeddings(&self) -> &Tensor {
        &self.prompt_emb
    }

    pub fn prompt_embeddings_mut(&mut self) -> &mut Tensor {
        &mut self.prompt_emb
    }

    pub fn freeze_fraction(&self) -> f64 {
        self.freeze_fraction
    }

    /// Freezes the first `⌊fraction · L⌋` encoder layers; `head_frozen`
    /// additionally freezes the head and the embedding tables.
    pub fn set_freezing(&mut self, fraction: f64, head_frozen: bool) -> Result<()> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!("freeze fraction {fraction} outside [0, 1]")));
        }
        let count = (fraction * self.encoder.num_layers() as f64).floor() as usize;
        self.encoder.freeze_prefix(count);
        self.head.freeze_prefix(if head_frozen { self.head.num_layers() } else { 0 });
        self.freeze_fraction = fraction;
        self.head_frozen = head_frozen;
        Ok(())
    }

    /// Freeze flags: prompt table, camera table, encoder layers, head layers.
    pub fn freeze_mask(&self) -> Vec<bool> {
        let mut m = vec![self.head_frozen, self.head_frozen];
        m.extend(self.encoder.frozen());
        m.extend(self.head.frozen());
        m
    }

    fn param_blocks(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.prompt_emb, &self.camera_emb];
        out.extend(self.encoder.param_blocks());
        out.extend(self.head.param_blocks());
        out
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.prompt_emb, &mut self.camera_emb];
        out.extend(self.encoder.param_blocks_mut());
        out.extend(self.head.param_blocks_mut());
        out
    }

    fn trainable_mask(&self) -> Vec<bool> {
        let mut m = vec![!self.head_frozen, !self.head_frozen];
        m.extend(self.encoder.trainable_mask());
        m.extend(self.head.trainable_mask());
        m
    }

    fn check_inputs(&self, prompt: u32, x: &MultiViewImage, cams: &[usize]) -> Result<usize> {
        let y = prompt as usize;
        if y >= self.num_prompts() {
            return Err(Error::UnknownPrompt(prompt));
        }
        if x.view_dim() != self.view_dim || cams.len() != x.num_views() {
            return Err(Error::shape(
                "reward input",
                &[cams.len(), self.view_dim],
                x.views.shape(),
            ));
        }
        if let Some(&c) = cams.iter().find(|&&c| c >= self.num_cameras()) {
            return Err(Error::IndexOutOfRange {
                what: "camera",
                index: c,
                len: self.num_cameras(),
            });
        }
        Ok(y)
    }

    pub fn trace(&self, prompt: u32, x: &MultiViewImage, cams: &[usize]) -> Result<ScoreTrace> {
        let y = self.check_inputs(prompt, x, cams)?;
        let k = x.num_views();
        let feat = self.encoder.output_dim();
        let mut pooled = vec![0.0; feat];
        let mut encoder = Vec::with_capacity(k);
        let mut input = Vec::with_capacity(self.encoder.input_dim());
        for (j, &cam) in cams.iter().enumerate() {
            input.clear();
            input.extend_from_slice(self.prompt_emb.row(y));
            input.extend_from_slice(x.view(j));
            input.extend_from_slice(self.camera_emb.row(cam));
            let tr = self.encoder.trace(&input)?;
            for (p, &f) in pooled.iter_mut().zip(tr.output()) {
                *p += f / k as f64;
            }
            encoder.push(tr);
        }
        let head = self.head.trace(&pooled)?;
        Ok(ScoreTrace {
            prompt: y,
            cams: cams.to_vec(),
            encoder,
            head,
        })
    }

    /// Backpropagates `upstream · score` into parameters and view pixels.
    pub fn backward(&self, trace: &ScoreTrace, upstream: f64) -> Result<(RewardGrads, Tensor)> {
        let mut grads = RewardGrads::zeros_like(self);
        let image = self.backward_into(trace, upstream, &mut grads)?;
        Ok((grads, image))
    }

    /// Adds the parameter gradients of `upstream · score` into `grads` and
    /// returns the view-pixel gradient.
    pub fn backward_into(&self, trace: &ScoreTrace, upstream: f64, grads: &mut RewardGrads) -> Result<Tensor> {
        let d_pooled = self.head.backward_into(&trace.head, &[upstream], &mut grads.head)?;
        let k = trace.encoder.len();
        let (e, d) = (self.prompt_emb.cols(), self.view_dim);
        let per_view: Vec<f64> = d_pooled.iter().map(|g| g / k as f64).collect();
        let mut image = Tensor::zeros(&[k, d]);
        for (j, tr) in trace.encoder.iter().enumerate() {
            let dx = self.encoder.backward_into(tr, &per_view, &mut grads.encoder)?;
            for (a, &b) in grads.prompt_emb.row_mut(trace.prompt).iter_mut().zip(&dx[..e]) {
                *a += b;
            }
            image.row_mut(j).copy_from_slice(&dx[e..e + d]);
            for (a, &b) in grads.camera_emb.row_mut(trace.cams[j]).iter_mut().zip(&dx[e + d..]) {
                *a += b;
            }
        }
        Ok(image)
    }

    pub fn score(&self, prompt: u32, x: &MultiViewImage, cams: &[usize]) -> Result<f64> {
        Ok(self.trace(prompt, x, cams)?.score())
    }
}

pub fn reward_score(net: &RewardNet, prompt: u32, x: &MultiViewImage, cams: &[usize]) -> Result<f64> {
    net.score(prompt, x, cams)
}

/// `∂r/∂x` for every view pixel, shaped `K × D`.
pub fn reward_image_grad(net: &RewardNet, prompt: u32, x: &MultiViewImage, cams: &[usize]) -> Result<Tensor> {
    let trace = net.trace(prompt, x, cams)?;
    Ok(net.backward(&trace, 1.0)?.1)
}

/// Score and image gradient from a single forward pass.
pub fn reward_value_and_grad(net: &RewardNet, prompt: u32, x: &MultiViewImage, cams: &[usize]) -> Result<(f64, Tensor)> {
    let trace = net.trace(prompt, x, cams)?;
    let grad = net.backward(&trace, 1.0)?.1;
    Ok((trace.score(), grad))
}

/// One training comparison with its images materialised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub prompt_id: u32,
    pub winner: MultiViewImage,
    pub loser: MultiViewImage,
    pub cams_w: Vec<usize>,
    pub cams_l: Vec<usize>,
}

/// `softplus(z) = ln(1 + eᶻ)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean of `-ln σ(gap)` over score gaps `r_winner - r_loser`.
pub fn ranking_loss_from_gaps(gaps: &[f64]) -> Result<f64> {
    if gaps.is_empty() {
        return Err(Error::Empty("comparison batch"));
    }
    Ok(gaps.iter().map(|&g| softplus(-g)).sum::<f64>() / gaps.len() as f64)
}

pub fn bt_loss(net: &RewardNet, batch: &[PreferenceExample]) -> Result<f64> {
    let gaps: Vec<f64> = batch
        .iter()
        .map(|p| Ok(net.score(p.prompt_id, &p.winner, &p.cams_w)? - net.score(p.prompt_id, &p.loser, &p.cams_l)?))
        .collect::<Result<_>>()?;
    ranking_loss_from_gaps(&gaps)
}

/// Loss of the minibatch `dataset[batch]`; its parameter gradients land in
/// `total`. `scratch` holds one item's gradients at a time.
fn bt_loss_and_grads(
    net: &RewardNet,
    dataset: &[PreferenceExample],
    batch: &[usize],
    total: &mut RewardGrads,
    scratch: &mut RewardGrads,
) -> Result<f64> {
    total.fill_zero();
    let mut loss = 0.0;
    let n = batch.len() as f64;
    for p in batch.iter().map(|&i| &dataset[i]) {
        let tw = net.trace(p.prompt_id, &p.winner, &p.cams_w)?;
        let tl = net.trace(p.prompt_id, &p.loser, &p.cams_l)?;
        let gap = tw.score() - tl.score();
        loss += softplus(-gap) / n;
        // d/dgap softplus(-gap) = -σ(-gap)
        let coeff = sigmoid(-gap) / n;
        for (trace, upstream) in [(&tw, -coeff), (&tl, coeff)] {
            scratch.fill_zero();
            net.backward_into(trace, upstream, scratch)?;
            total.accumulate(scratch, 1.0)?;
        }
    }
    Ok(loss)
}

/// Fraction of pairs the net orders correctly; exact score ties count half.
pub fn pairwise_accuracy(net: &RewardNet, pairs: &[PreferenceExample]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    let mut correct = 0.0;
    for p in pairs {
        let gap = net.score(p.prompt_id, &p.winner, &p.cams_w)? - net.score(p.prompt_id, &p.loser, &p.cams_l)?;
        correct += match gap.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Equal) => 0.5,
            _ => 0.0,
        };
    }
    Ok(correct / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardTrainConfig {
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::freeze_fraction")]
    pub freeze_fraction: f64,
    #[serde(default)]
    pub freeze_head: bool,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn learning_rate() -> f64 {
        1e-5
    }
    pub fn batch_size() -> usize {
        8
    }
    pub fn epochs() -> usize {
        40
    }
    pub fn freeze_fraction() -> f64 {
        0.8
    }
    pub fn weight_decay() -> f64 {
        0.0
    }
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: defaults::learning_rate(),
            batch_size: defaults::batch_size(),
            epochs: defaults::epochs(),
            freeze_fraction: defaults::freeze_fraction(),
            freeze_head: false,
            weight_decay: defaults::weight_decay(),
            seed: 0,
        }
    }
}

impl RewardTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidArgument("reward training needs lr > 0 and batch >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.freeze_fraction) {
            return Err(Error::InvalidArgument("freeze_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss for each epoch.
    pub loss_curve: Vec<f64>,
    pub steps: u64,
}

/// Minibatch AdamW on the pairwise ranking loss. Pairs are reshuffled
/// without replacement every epoch from the `seed`-derived stream.
pub fn train_reward(net: &mut RewardNet, dataset: &[PreferenceExample], cfg: &RewardTrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    net.set_freezing(cfg.freeze_fraction, cfg.freeze_head)?;
    let mut rng = Rng::named(cfg.seed, "reward-shuffle");
    let mut opt = OptimState::new(&net.param_blocks(), cfg.learning_rate, cfg.weight_decay);
    let mask = net.trainable_mask();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut grads = RewardGrads::zeros_like(net);
    let mut scratch = RewardGrads::zeros_like(net);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            epoch_loss += bt_loss_and_grads(net, dataset, chunk, &mut grads, &mut scratch)?;
            batches += 1;
            let blocks = grads.blocks();
            opt.step(&mut net.param_blocks_mut(), &blocks, &mask)?;
        }
        loss_curve.push(epoch_loss / batches as f64);
    }
    Ok(TrainReport {
        loss_curve,
        steps: opt.steps_taken(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub steps: u64,
    pub final_loss: Option<f64>,
    /// Agreement with the held-out pair labels.
    pub heldout_accuracy: Option<f64>,
    /// Agreement with the hidden utility on the same pairs.
    pub heldout_utility_accuracy: Option<f64>,
}

/// Serialized trained scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardCheckpoint {
    pub config: RewardTrainConfig,
    pub arch: RewardArch,
    pub net: RewardNet,
    pub freeze_mask: Vec<bool>,
    pub metadata: TrainingMetadata,
}

impl RewardCheckpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.freeze_mask != ck.net.freeze_mask() {
            return Err(Error::InvalidArgument("checkpoint freeze mask disagrees with network".into()));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net(seed: u64) -> RewardNet {
        let arch = RewardArch {
            embed_dim: 3,
            camera_dim: 2,
            encoder_hidden: vec![6],
            feature_dim: 4,
            head_hidden: vec![5],
            init_gain: 1.0,
        };
        RewardNet::new(2, 2, 3, &arch, &mut Rng::new(seed)).unwrap()
    }

    fn image(rng: &mut Rng) -> MultiViewImage {
        MultiViewImage::new(rng.normal_tensor(&[2, 3])).unwrap()
    }

    #[test]
    fn zero_head_scores_zero() {
        let net = small_net(0);
        let mut rng = Rng::new(1);
        let x = image(&mut rng);
        assert_eq!(net.score(1, &x, &[0, 1]).unwrap(), 0.0);
        assert!(reward_image_grad(&net, 1, &x, &[0, 1]).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_prompt_rejected() {
        let net = small_net(0);
        let x = image(&mut Rng::new(1));
        assert!(matches!(net.score(5, &x, &[0, 1]), Err(Error::UnknownPrompt(5))));
    }

    #[test]
    fn loss_at_equal_scores_is_ln2() {
        let l = ranking_loss_from_gaps(&[0.0, 0.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_asymptotes_without_overflow() {
        assert!(ranking_loss_from_gaps(&[1e4]).unwrap() < 1e-300);
        assert_eq!(ranking_loss_from_gaps(&[-1e4]).unwrap(), 1e4);
        assert!(ranking_loss_from_gaps(&[]).is_err());
    }

    #[test]
    fn freezing_counts_floor_of_fraction() {
        let mut net = small_net(0);
        net.set_freezing(0.8, false).unwrap();
        // Encoder has 2 layers: ⌊1.6⌋ = 1 frozen.
        assert_eq!(net.encoder().frozen(), &[true, false]);
        net.set_freezing(1.0, true).unwrap();
        assert!(net.freeze_mask().iter().all(|&f| f));
        assert!(net.set_freezing(1.5, false).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = small_net(4);
        net.set_freezing(0.5, false).unwrap();
        let ck = RewardCheckpoint {
            config: RewardTrainConfig::default(),
            arch: RewardArch::default(),
            freeze_mask: net.freeze_mask(),
            net,
            metadata: TrainingMetadata {
                train_pairs: 0,
                heldout_pairs: 0,
                steps: 0,
                final_loss: None,
                heldout_accuracy: None,
                heldout_utility_accuracy: None,
            },
        };
        let text = ck.to_json().unwrap();
        assert_eq!(RewardCheckpoint::from_json(&text).unwrap(), ck);
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut net = small_net(0);
        assert!(train_reward(&mut net, &[], &RewardTrainConfig::default()).is_err());
    }
}
