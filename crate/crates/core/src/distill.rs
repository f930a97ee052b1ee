//! Score distillation: plain SDS and the reward-corrected variant.
//!
//! Both modes draw the camera pose, timestep and noise from one seeded
//! stream in the same order, so a reward-corrected run whose correction is
//! switched off reproduces the SDS run exactly.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::diffusion::{analytic_epsilon, forward_noise, predict_x0, NoiseSchedule, PromptPrior};
use crate::error::{Error, Result};
use crate::numcore::{Rng, Tensor};
use crate::reward::{reward_value_and_grad, RewardNet};
use crate::scene::{render_all, render_vjp_at, Asset, CameraRig, MultiViewImage};

/// Added to the reward magnitude before dividing.
pub const LAMBDA_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Omega {
    Constant,
    SigmaSquared,
}

impl Omega {
    pub fn weight(self, sched: &NoiseSchedule, t: usize) -> f64 {
        match self {
            Omega::Constant => 1.0,
            Omega::SigmaSquared => sched.sigma(t).powi(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the main phase.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sds,
    #[serde(rename = "dreamfl")]
    DreamFl,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Sds => "sds",
            Mode::DreamFl => "dreamfl",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sds" => Ok(Mode::Sds),
            "dreamfl" => Ok(Mode::DreamFl),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

/// μ ramps linearly from 0 to `plateau` over the first `ramp_fraction` of
/// the main steps and stays there; the finetune phase uses `finetune`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MuSchedule {
    pub plateau: f64,
    pub ramp_fraction: f64,
    pub finetune: f64,
}

impl Default for MuSchedule {
    fn default() -> Self {
        Self {
            plateau: 0.25,
            ramp_fraction: 0.6,
            finetune: 2.0,
        }
    }
}

impl MuSchedule {
    pub fn at(&self, step: usize, total: usize) -> f64 {
        let span = self.ramp_fraction * total as f64;
        if span <= 0.0 {
            return self.plateau;
        }
        self.plateau * (step as f64 / span).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub steps: usize,
    pub omega: Omega,
    pub mu: MuSchedule,
    pub ema_decay: f64,
    /// Reward correction applies when `t < t_threshold`; `None` means 60% of T.
    pub t_threshold: Option<usize>,
    pub finetune_steps: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    /// Step size of the finetune phase; `None` reuses `learning_rate`.
    pub finetune_learning_rate: Option<f64>,
    /// Replaces the scheduled λ_r at every step when set.
    pub lambda_override: Option<f64>,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            omega: Omega::Constant,
            mu: MuSchedule::default(),
            ema_decay: 0.99,
            t_threshold: None,
            finetune_steps: 200,
            learning_rate: 1e-2,
            lr_schedule: LrSchedule::Constant,
            finetune_learning_rate: None,
            lambda_override: None,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("distillation needs at least one step".into()));
        }
        if let Some(th) = self.t_threshold {
            if th > sched.steps() {
                return Err(Error::InvalidArgument(format!(
                    "t_threshold {th} exceeds T = {}",
                    sched.steps()
                )));
            }
        }
        let rates = [self.learning_rate, self.finetune_learning_rate.unwrap_or(self.learning_rate)];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidArgument("ema_decay must lie in [0, 1)".into()));
        }
        if let Some(l) = self.lambda_override {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidArgument("lambda_override must be finite and >= 0".into()));
            }
        }
        let mu = &self.mu;
        if [mu.plateau, mu.ramp_fraction, mu.finetune].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("mu schedule values must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn threshold(&self, sched: &NoiseSchedule) -> usize {
        self.t_threshold
            .unwrap_or_else(|| (0.6 * sched.steps() as f64).round() as usize)
    }

    fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = step as f64 / self.steps as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Running magnitudes behind λ_r.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaState {
    pub ema_loss: f64,
    pub ema_reward: f64,
    pub decay: f64,
    pub mu: f64,
    pub lambda: f64,
}

impl LambdaState {
    pub fn new(decay: f64) -> Self {
        Self {
            ema_loss: 0.0,
            ema_reward: 0.0,
            decay,
            mu: 0.0,
            lambda: 0.0,
        }
    }
}

/// EMA update followed by `λ_r = μ · EMA|L| / (EMA|r| + 1e-8)`.
pub fn update_lambda(state: LambdaState, l_sds: f64, r_value: f64, mu: f64) -> LambdaState {
    let d = state.decay;
    let ema_loss = d * state.ema_loss + (1.0 - d) * l_sds.abs();
    let ema_reward = d * state.ema_reward + (1.0 - d) * r_value.abs();
    LambdaState {
        ema_loss,
        ema_reward,
        decay: d,
        mu,
        lambda: mu * ema_loss / (ema_reward + LAMBDA_EPS),
    }
}

/// `L_SDS − λ_r · r`.
pub fn reward_loss_value(l_sds: f64, r_value: f64, lambda_r: f64) -> f64 {
    l_sds - lambda_r * r_value
}

/// Quantities shared by every gradient at one `(θ, c, t, ε)`.
#[derive(Debug, Clone)]
struct Noised {
    x_t: Tensor,
    eps_phi: Tensor,
    omega: f64,
}

fn noised(
    asset: &Asset,
    rig: &CameraRig,
    prior: &PromptPrior,
    sched: &NoiseSchedule,
    t: usize,
    eps: &Tensor,
    omega: Omega,
) -> Result<Noised> {
    let x0 = render_all(asset, rig)?;
    eps.ensure_same_shape(&x0.views, "sds noise")?;
    let x_t = forward_noise(&x0.views, t, eps, sched)?.x_t;
    let eps_phi = analytic_epsilon(prior, &x_t, t, sched)?;
    Ok(Noised {
        x_t,
        eps_phi,
        omega: omega.weight(sched, t),
    })
}

/// `ω(t) · J_gᵀ (ε_φ(x_t, t, y) − ε)`.
pub fn sds_grad(
    asset: &Asset,
    rig: &CameraRig,
    prior: &PromptPrior,
    sched: &NoiseSchedule,
    t: usize,
    eps: &Tensor,
    omega: Omega,
) -> Result<Tensor> {
    let n = noised(asset, rig, prior, sched, t, eps, omega)?;
    let residual = n.eps_phi.sub(eps)?;
    Ok(render_vjp_at(asset, rig, &residual)?.scale(n.omega))
}

/// Closed-form `KL(N(α_t g, σ_t² I) ‖ p_t)` for a one-component prior.
pub fn kl_objective_gaussian(
    asset: &Asset,
    rig: &CameraRig,
    prior: &PromptPrior,
    sched: &NoiseSchedule,
    t: usize,
) -> Result<f64> {
    let [component] = prior.components.as_slice() else {
        return Err(Error::InvalidArgument(format!(
            "closed-form KL needs a single-component prior, got {}",
            prior.components.len()
        )));
    };
    let g = render_all(asset, rig)?;
    if g.flat().len() != component.mean.len() {
        return Err(Error::shape("kl prior", &[g.flat().len()], &[component.mean.len()]));
    }
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    let q_var = s * s;
    let kl = g
        .flat()
        .iter()
        .zip(&component.mean)
        .zip(&component.var)
        .map(|((&gi, &m), &v)| {
            let p_var = a * a * v + q_var;
            let diff = a * (gi - m);
            0.5 * (q_var / p_var + diff * diff / p_var - 1.0 + (p_var / q_var).ln())
        })
        .sum();
    Ok(kl)
}

/// `λ_r · ∂r/∂x̂` at the one-step denoised estimate of `x_t`.
#[allow(clippy::too_many_arguments)]
pub fn delta_epsilon(
    net: &RewardNet,
    prompt: u32,
    x_t: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    prior: &PromptPrior,
    rig: &CameraRig,
    lambda_r: f64,
) -> Result<Tensor> {
    if !(lambda_r >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda_r must be >= 0, got {lambda_r}")));
    }
    let eps_phi = analytic_epsilon(prior, x_t, t, sched)?;
    let x_hat = MultiViewImage::new(predict_x0(x_t, t, &eps_phi, sched)?)?;
    let (_, grad) = reward_value_and_grad(net, prompt, &x_hat, rig.camera_ids())?;
    Ok(grad.scale(lambda_r))
}

/// SDS gradient with the reward-corrected noise prediction `ε_φ − δε` when
/// `t < t_threshold`; plain SDS otherwise.
#[allow(clippy::too_many_arguments)]
pub fn dreamfl_grad(
    asset: &Asset,
    rig: &CameraRig,
    prior: &PromptPrior,
    net: &RewardNet,
    sched: &NoiseSchedule,
    t: usize,
    eps: &Tensor,
    lambda_r: f64,
    t_threshold: usize,
    omega: Omega,
) -> Result<Tensor> {
    if t >= t_threshold {
        return sds_grad(asset, rig, prior, sched, t, eps, omega);
    }
    let n = noised(asset, rig, prior, sched, t, eps, omega)?;
    let delta = delta_epsilon(net, prior.prompt_id, &n.x_t, t, sched, prior, rig, lambda_r)?;
    let residual = n.eps_phi.sub(&delta)?.sub(eps)?;
    Ok(render_vjp_at(asset, rig, &residual)?.scale(n.omega))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Sds,
    Reward,
    Finetune,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Sds => "sds",
            Branch::Reward => "reward",
            Branch::Finetune => "finetune",
        }
    }
}

/// One optimisation step. `lambda_r` is the weight actually applied, zero
/// whenever the reward correction was off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub t: usize,
    pub branch: Branch,
    pub l_sds: f64,
    pub r: f64,
    pub lambda_r: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillTrace {
    pub records: Vec<TraceRecord>,
}

impl DistillTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,t,branch,L_sds,r,lambda_r,grad_norm\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{:e},{:e},{:e},{:e}",
                r.step,
                r.t,
                r.branch.as_str(),
                r.l_sds,
                r.r,
                r.lambda_r,
                r.grad_norm
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillOutcome {
    pub asset: Asset,
    pub trace: DistillTrace,
}

/// Per-step gradients, exposed so tests can compare modes on identical
/// random draws.
#[derive(Debug, Clone)]
pub struct StepDetail {
    pub record: TraceRecord,
    pub offset: usize,
    pub eps: Tensor,
    pub grad: Tensor,
    /// `ω · J_gᵀ(∂r/∂x̂)` at this step, zero without a reward net.
    pub reward_vjp: Tensor,
}

struct Runner<'a> {
    rig: &'a CameraRig,
    sched: &'a NoiseSchedule,
    net: Option<&'a RewardNet>,
    cfg: &'a DistillConfig,
    mode: Mode,
    threshold: usize,
    posed: Vec<(CameraRig, PromptPrior)>,
    prompt: u32,
    lambda: LambdaState,
    rng: Rng,
}

impl<'a> Runner<'a> {
    fn reward_enabled(&self) -> bool {
        self.mode == Mode::DreamFl && self.threshold > 1 && self.cfg.lambda_override != Some(0.0)
    }

    fn step(&mut self, asset: &Asset, step: usize, finetune: bool) -> Result<StepDetail> {
        let offset = self.rng.below(self.rig.views());
        let t = if finetune {
            self.rng.inclusive(1, self.threshold - 1)
        } else {
            self.rng.inclusive(1, self.sched.steps())
        };
        let eps: Tensor = self.rng.normal_tensor(&[self.rig.views(), self.rig.dim()]);
        let (rig, prior) = &self.posed[offset];

        let n = noised(asset, rig, prior, self.sched, t, &eps, self.cfg.omega)?;
        let residual = n.eps_phi.sub(&eps)?;
        let l_sds = 0.5 * n.omega * residual.norm_sq();

        let (r, reward_grad) = match self.net {
            Some(net) => {
                let x_hat = MultiViewImage::new(predict_x0(&n.x_t, t, &n.eps_phi, self.sched)?)?;
                reward_value_and_grad(net, self.prompt, &x_hat, rig.camera_ids())?
            }
            None => (0.0, Tensor::zeros(residual.shape())),
        };
        let mu = if finetune {
            self.cfg.mu.finetune
        } else {
            self.cfg.mu.at(step, self.cfg.steps)
        };
        self.lambda = update_lambda(self.lambda, l_sds, r, mu);
        let lambda = self.cfg.lambda_override.unwrap_or(self.lambda.lambda);

        let reward_vjp = render_vjp_at(asset, rig, &reward_grad)?.scale(n.omega);
        let gate_open = self.mode == Mode::DreamFl && t < self.threshold;
        let (branch, applied, grad) = if finetune {
            (Branch::Finetune, lambda, reward_vjp.scale(-lambda))
        } else if gate_open && lambda > 0.0 {
            let corrected = n.eps_phi.sub(&reward_grad.scale(lambda))?.sub(&eps)?;
            (Branch::Reward, lambda, render_vjp_at(asset, rig, &corrected)?.scale(n.omega))
        } else {
            (Branch::Sds, 0.0, render_vjp_at(asset, rig, &residual)?.scale(n.omega))
        };
        let loss = reward_loss_value(l_sds, r, applied);
        Ok(StepDetail {
            record: TraceRecord {
                step,
                t,
                branch,
                l_sds,
                r,
                lambda_r: applied,
                loss,
                grad_norm: grad.norm(),
            },
            offset,
            eps,
            grad,
            reward_vjp,
        })
    }
}

fn trace_tail(trace: &DistillTrace, rows: usize) -> String {
    let start = trace.records.len().saturating_sub(rows);
    DistillTrace {
        records: trace.records[start..].to_vec(),
    }
    .to_csv()
}

/// Runs the main loop and, for the reward-corrected mode with the reward
/// switched on, the reward-only finetune phase. `observer` sees every step
/// together with the parameters after its update.
#[allow(clippy::too_many_arguments)]
pub fn optimize_with<F: FnMut(&StepDetail, &Tensor)>(
    asset: &Asset,
    rig: &CameraRig,
    prior: &PromptPrior,
    sched: &NoiseSchedule,
    net: Option<&RewardNet>,
    cfg: &DistillConfig,
    mode: Mode,
    mut observer: F,
) -> Result<DistillOutcome> {
    cfg.validate(sched)?;
    if asset.dim() != rig.dim() {
        return Err(Error::shape("initial asset", &[rig.dim()], &[asset.dim()]));
    }
    if prior.dim() != rig.dim() * rig.views() {
        return Err(Error::shape("prior", &[rig.dim() * rig.views()], &[prior.dim()]));
    }
    if mode == Mode::DreamFl && net.is_none() {
        return Err(Error::InvalidArgument("dreamfl mode needs a reward net".into()));
    }
    let posed = (0..rig.views())
        .map(|o| Ok((rig.posed(o), prior.rotate_views(rig.views(), o)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut runner = Runner {
        rig,
        sched,
        net,
        cfg,
        mode,
        threshold: cfg.threshold(sched),
        posed,
        prompt: prior.prompt_id,
        lambda: LambdaState::new(cfg.ema_decay),
        rng: Rng::named(cfg.seed, "distill"),
    };
    let finetune_steps = if runner.reward_enabled() { cfg.finetune_steps } else { 0 };
    let mut theta = asset.theta.clone();
    let mut trace = DistillTrace::default();
    for step in 0..cfg.steps + finetune_steps {
        let finetune = step >= cfg.steps;
        let current = Asset { theta: theta.clone() };
        let detail = runner.step(&current, step, finetune)?;
        trace.records.push(detail.record);
        if !detail.grad.is_finite() || !detail.record.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "distillation step {step}; last trace rows:\n{}",
                trace_tail(&trace, 10)
            )));
        }
        let lr = if finetune {
            cfg.finetune_learning_rate.unwrap_or(cfg.learning_rate)
        } else {
            cfg.lr_at(step)
        };
        theta.axpy(-lr, &detail.grad)?;
        observer(&detail, &theta);
    }
    Ok(DistillOutcome {
        asset: Asset { theta },
        trace,
    })
}

pub fn optimize(
    asset: &Asset,
    rig: &CameraRig,
    prior: &PromptPrior,
    sched: &NoiseSchedule,
    net: Option<&RewardNet>,
    cfg: &DistillConfig,
    mode: Mode,
) -> Result<DistillOutcome> {
    optimize_with(asset, rig, prior, sched, net, cfg, mode, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleKind::LinearAlphaBar, 1000).unwrap()
    }

    #[test]
    fn reward_loss_arithmetic() {
        assert_eq!(reward_loss_value(3.0, 1.0, 0.0), 3.0);
        assert_eq!(reward_loss_value(3.0, 0.0, 0.7), 3.0);
        assert!((reward_loss_value(2.0, 0.5, 0.6) - 1.7).abs() < 1e-15);
    }

    #[test]
    fn lambda_starts_at_zero_and_plateaus() {
        let mu = MuSchedule::default();
        assert_eq!(mu.at(0, 1000), 0.0);
        assert_eq!(mu.at(600, 1000), 0.25);
        assert_eq!(mu.at(999, 1000), 0.25);
        let s = update_lambda(LambdaState::new(0.99), 4.0, 2.0, mu.at(0, 1000));
        assert_eq!(s.lambda, 0.0);
    }

    #[test]
    fn lambda_ema_fixed_point() {
        let mut s = LambdaState::new(0.99);
        for _ in 0..1000 {
            s = update_lambda(s, 4.0, 2.0, 0.25);
        }
        assert!((s.lambda - 0.5).abs() < 1e-3);
    }

    #[test]
    fn omega_weights() {
        let sc = sched();
        assert_eq!(Omega::Constant.weight(&sc, 10), 1.0);
        assert!((Omega::SigmaSquared.weight(&sc, 10) - sc.sigma(10).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_mixture() {
        let rig = CameraRig::identity(2, 1).unwrap();
        let prior = PromptPrior::new(
            0,
            vec![
                crate::diffusion::MixtureComponent {
                    weight: 0.5,
                    mean: vec![0.0, 0.0],
                    var: vec![1.0, 1.0],
                },
                crate::diffusion::MixtureComponent {
                    weight: 0.5,
                    mean: vec![1.0, 0.0],
                    var: vec![1.0, 1.0],
                },
            ],
        )
        .unwrap();
        let asset = Asset::new(vec![0.0, 0.0]).unwrap();
        assert!(kl_objective_gaussian(&asset, &rig, &prior, &sched(), 5).is_err());
    }

    #[test]
    fn kl_with_variance_mismatch_only() {
        let rig = CameraRig::identity(3, 1).unwrap();
        let sc = sched();
        let t = 400;
        let (a, s) = (sc.alpha(t), sc.sigma(t));
        // α²v = σ² makes the noised prior variance 2σ² against σ² for q.
        let prior = PromptPrior::gaussian(0, vec![0.3, -0.2, 1.0], s * s / (a * a)).unwrap();
        let asset = Asset::new(vec![0.3, -0.2, 1.0]).unwrap();
        let kl = kl_objective_gaussian(&asset, &rig, &prior, &sc, t).unwrap();
        let expect = 3.0 * 0.5 * (0.5 - 1.0 + 2f64.ln());
        assert!((kl - expect).abs() < 1e-12);
    }

    #[test]
    fn sds_grad_vanishes_with_zero_weight_and_at_delta_prior() {
        let rig = CameraRig::identity(2, 1).unwrap();
        let sc = sched();
        let eps = Tensor::new(vec![1, 2], vec![0.3, -1.0]).unwrap();
        let prior = PromptPrior::gaussian(0, vec![0.5, -0.5], 1.0).unwrap();
        let asset = Asset::new(vec![0.1, 0.2]).unwrap();
        let g0 = sds_grad(&asset, &rig, &prior, &sc, 0, &eps, Omega::SigmaSquared).unwrap();
        assert!(g0.data().iter().all(|&v| v == 0.0));

        let sharp = PromptPrior::gaussian(0, vec![0.5, -0.5], 1e-14).unwrap();
        let at_mean = Asset::new(vec![0.5, -0.5]).unwrap();
        let g = sds_grad(&at_mean, &rig, &sharp, &sc, 500, &eps, Omega::Constant).unwrap();
        assert!(g.max_abs() < 1e-10);
    }

    #[test]
    fn mode_round_trips_through_strings_and_json() {
        for m in [Mode::Sds, Mode::DreamFl] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
            let js = serde_json::to_string(&m).unwrap();
            assert_eq!(js, format!("\"{m}\""));
        }
        assert!("dreamfusion".parse::<Mode>().is_err());
    }
}
