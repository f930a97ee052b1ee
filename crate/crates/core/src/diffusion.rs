//! Variance-preserving discrete diffusion over Gaussian-mixture priors.
//!
//! Each prompt selects a diagonal Gaussian mixture over flattened view
//! stacks. Under `x_t = α_t x_0 + σ_t ε` a component `N(μ, v)` becomes
//! `N(α_t μ, α_t² v + σ_t²)`, so the noised density, its score and the
//! ε-prediction `-σ_t ∇ log p_t` are all available in closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

/// Smallest ᾱ reached at `t = T`; keeps `α_T > 0` so `predict_x0` stays defined.
pub const ALPHA_BAR_MIN: f64 = 1e-3;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// ᾱ_t falls linearly from 1 to `ALPHA_BAR_MIN`.
    LinearAlphaBar,
    /// Cosine-shaped ᾱ_t rescaled onto `[ALPHA_BAR_MIN, 1]`.
    Cosine,
}

/// `alpha[t]`, `sigma[t]` for `t = 0..=T`, with `α_t = √ᾱ_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule<T = f64> {
    kind: ScheduleKind,
    alpha: Vec<T>,
    sigma: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs at least 2 timesteps, got {steps}"
            )));
        }
        let shape = |t: usize| -> f64 {
            let s = t as f64 / steps as f64;
            match kind {
                ScheduleKind::LinearAlphaBar => 1.0 - s,
                ScheduleKind::Cosine => {
                    let f = |u: f64| {
                        ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2)
                            .cos()
                            .powi(2)
                    };
                    (f(s) - f(1.0)) / (f(0.0) - f(1.0))
                }
            }
        };
        let mut alpha = Vec::with_capacity(steps + 1);
        let mut sigma = Vec::with_capacity(steps + 1);
        for t in 0..=steps {
            let abar = ALPHA_BAR_MIN + (1.0 - ALPHA_BAR_MIN) * shape(t);
            alpha.push(T::lit(abar.sqrt()));
            sigma.push(T::lit((1.0 - abar).sqrt()));
        }
        Ok(Self { kind, alpha, sigma })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of noising steps `T`; valid timesteps are `0..=T`.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> T {
        self.sigma[t]
    }

    pub fn alphas(&self) -> &[T] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[T] {
        &self.sigma
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::IndexOutOfRange {
                what: "timestep",
                index: t,
                len: self.steps() + 1,
            });
        }
        Ok(())
    }
}

/// Convenience wrapper mirroring the operation name.
pub fn make_schedule<T: Scalar>(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule<T>> {
    NoiseSchedule::new(kind, steps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent<T = f64> {
    pub weight: T,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Diagonal Gaussian mixture conditioned on a discrete prompt id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPrior<T = f64> {
    pub prompt_id: u32,
    pub components: Vec<MixtureComponent<T>>,
}

impl<T: Scalar> PromptPrior<T> {
    pub fn new(prompt_id: u32, components: Vec<MixtureComponent<T>>) -> Result<Self> {
        let prior = Self { prompt_id, components };
        prior.validate()?;
        Ok(prior)
    }

    /// Single isotropic component.
    pub fn gaussian(prompt_id: u32, mean: Vec<T>, var: T) -> Result<Self> {
        let d = mean.len();
        Self::new(
            prompt_id,
            vec![MixtureComponent {
                weight: T::one(),
                mean,
                var: vec![var; d],
            }],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.components.first().ok_or(Error::Empty("prior components"))?;
        let d = first.mean.len();
        let mut total = T::zero();
        for (i, c) in self.components.iter().enumerate() {
            if c.mean.len() != d || c.var.len() != d {
                return Err(Error::shape(format!("prior component {i}"), &[d, d], &[c.mean.len(), c.var.len()]));
            }
            if !(c.weight > T::zero()) || !c.weight.is_finite() {
                return Err(Error::InvalidArgument(format!("component {i} weight must be positive")));
            }
            if c.var.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("component {i} variances must be positive")));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::NonFinite(format!("component {i} mean")));
            }
            total = total + c.weight;
        }
        if (total - T::one()).abs() > T::lit(1e-9) {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    /// Prior as seen from a rig rotated by `offset` cameras: view block `k`
    /// of the result is block `(k + offset) mod views` of `self`.
    pub fn rotate_views(&self, views: usize, offset: usize) -> Result<Self> {
        let d = self.dim();
        if views == 0 || !d.is_multiple_of(views) {
            return Err(Error::InvalidArgument(format!("dimension {d} not divisible into {views} views")));
        }
        let block = d / views;
        let permute = |src: &[T]| -> Vec<T> {
            (0..views)
                .flat_map(|k| {
                    let s = (k + offset) % views;
                    src[s * block..(s + 1) * block].iter().copied()
                })
                .collect()
        };
        Ok(Self {
            prompt_id: self.prompt_id,
            components: self
                .components
                .iter()
                .map(|c| MixtureComponent {
                    weight: c.weight,
                    mean: permute(&c.mean),
                    var: permute(&c.var),
                })
                .collect(),
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::shape("prior input", &[self.dim()], &[x.len()]));
        }
        Ok(())
    }

    /// Per-component log-weights plus log-likelihoods of `x_t`, along with the
    /// noised variances `α² v + σ²`.
    fn component_terms(&self, x_t: &[T], alpha: T, sigma: T) -> Vec<(T, Vec<T>)> {
        let ln_2pi = T::lit((2.0 * std::f64::consts::PI).ln());
        let half = T::lit(0.5);
        self.components
            .iter()
            .map(|c| {
                let s2: Vec<T> = c.var.iter().map(|&v| alpha * alpha * v + sigma * sigma).collect();
                let mut ll = c.weight.ln();
                for ((&x, &m), &s) in x_t.iter().zip(&c.mean).zip(&s2) {
                    let r = x - alpha * m;
                    ll = ll - half * (ln_2pi + s.ln() + r * r / s);
                }
                (ll, s2)
            })
            .collect()
    }
}

fn log_sum_exp<T: Scalar>(values: impl Iterator<Item = T> + Clone) -> T {
    let max = values.clone().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<T>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample<T = f64> {
    pub x_t: Tensor<T>,
    pub t: usize,
    pub eps: Tensor<T>,
}

/// `x_t = α_t x_0 + σ_t ε`.
pub fn forward_noise<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule<T>,
) -> Result<NoisedSample<T>> {
    sched.check_t(t)?;
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    let x_t = x0.zip_map(eps, "forward_noise", |x, e| a * x + s * e)?;
    Ok(NoisedSample {
        x_t,
        t,
        eps: eps.clone(),
    })
}

/// `log p_t(x_t | y)` for the noised mixture.
pub fn log_density_t<T: Scalar>(
    prior: &PromptPrior<T>,
    x_t: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule<T>,
) -> Result<T> {
    sched.check_t(t)?;
    prior.check_input(x_t)?;
    let terms = prior.component_terms(x_t.data(), sched.alpha(t), sched.sigma(t));
    Ok(log_sum_exp(terms.iter().map(|(ll, _)| *ll)))
}

/// Closed-form ε-prediction `-σ_t ∇ log p_t(x_t | y)`; responsibilities are
/// normalised in log space.
pub fn analytic_epsilon<T: Scalar>(
    prior: &PromptPrior<T>,
    x_t: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule<T>,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    prior.check_input(x_t)?;
    let (alpha, sigma) = (sched.alpha(t), sched.sigma(t));
    let terms = prior.component_terms(x_t.data(), alpha, sigma);
    let lse = log_sum_exp(terms.iter().map(|(ll, _)| *ll));
    let mut eps = vec![T::zero(); prior.dim()];
    for ((ll, s2), c) in terms.iter().zip(&prior.components) {
        let resp = (*ll - lse).exp();
        if resp.is_zero() {
            continue;
        }
        for (((e, &x), &m), &s) in eps.iter_mut().zip(x_t.data()).zip(&c.mean).zip(s2) {
            // -σ · score contribution: σ (x - α μ) / s²
            *e = *e + resp * sigma * (x - alpha * m) / s;
        }
    }
    let out = Tensor::new(x_t.shape().to_vec(), eps)?;
    if !out.is_finite() {
        return Err(Error::NonFinite("analytic_epsilon".into()));
    }
    Ok(out)
}

/// One-step estimate `x̂ = (x_t - σ_t ε̂) / α_t`.
pub fn predict_x0<T: Scalar>(
    x_t: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    sched: &NoiseSchedule<T>,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    x_t.zip_map(eps_hat, "predict_x0", |x, e| (x - s * e) / a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff, max_relative_error, Rng};

    fn sched(kind: ScheduleKind, n: usize) -> NoiseSchedule<f64> {
        NoiseSchedule::new(kind, n).unwrap()
    }

    #[test]
    fn variance_preserving_identity() {
        for kind in [ScheduleKind::LinearAlphaBar, ScheduleKind::Cosine] {
            for n in [2, 7, 50, 1000] {
                let s = sched(kind, n);
                let worst = (0..=n)
                    .map(|t| (s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs())
                    .fold(0.0, f64::max);
                assert!(worst < 1e-12, "{kind:?} {n}: {worst}");
                assert!((s.alpha(0) - 1.0).abs() < 1e-6);
                assert!(s.alphas().windows(2).all(|w| w[1] < w[0]), "{kind:?} {n} not decreasing");
            }
        }
    }

    #[test]
    fn linear_alpha_bar_endpoint() {
        // ᾱ_T = 1e-3 so α_T = √1e-3 ≈ 0.0316.
        let s = sched(ScheduleKind::LinearAlphaBar, 1000);
        assert!((s.alpha(1000) - 1e-3f64.sqrt()).abs() < 1e-15);
        assert!(s.alpha(1000) < 0.2);
        assert!((s.alpha(500).powi(2) - (1e-3 + 0.999 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn too_few_steps_rejected() {
        assert!(NoiseSchedule::<f64>::new(ScheduleKind::Cosine, 1).is_err());
    }

    #[test]
    fn forward_noise_cases() {
        let s = sched(ScheduleKind::LinearAlphaBar, 100);
        let mut rng = Rng::new(5);
        let x0: Tensor<f64> = rng.normal_tensor(&[6]);
        let eps: Tensor<f64> = rng.normal_tensor(&[6]);
        let at0 = forward_noise(&x0, 0, &eps, &s).unwrap();
        assert!(max_relative_error(at0.x_t.data(), x0.data(), 0.0) < 1e-12);
        let zero = forward_noise(&x0, 40, &Tensor::zeros(&[6]), &s).unwrap();
        assert_eq!(zero.x_t, x0.scale(s.alpha(40)));
        let n = forward_noise(&x0, 73, &eps, &s).unwrap();
        let back = n.x_t.zip_map(&n.eps, "", |x, e| (x - s.sigma(73) * e) / s.alpha(73)).unwrap();
        assert!(back.sub(&x0).unwrap().max_abs() < 1e-12);
        assert!(forward_noise(&x0, 3, &Tensor::zeros(&[5]), &s).is_err());
    }

    #[test]
    fn unit_gaussian_epsilon_is_sigma_x() {
        let s = sched(ScheduleKind::Cosine, 50);
        let prior = PromptPrior::gaussian(0, vec![0.0; 4], 1.0).unwrap();
        let x = Tensor::vector(vec![0.3, -1.0, 2.0, 0.0]);
        for t in [1, 10, 49] {
            let e = analytic_epsilon(&prior, &x, t, &s).unwrap();
            let want = x.scale(s.sigma(t));
            assert!(e.sub(&want).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn epsilon_matches_finite_difference_score() {
        let s = sched(ScheduleKind::LinearAlphaBar, 200);
        let mut rng = Rng::new(9);
        for _ in 0..20 {
            let prior = random_prior(&mut rng, 5, 3);
            let t = rng.inclusive(1, 200);
            let x: Tensor<f64> = rng.normal_tensor(&[5]);
            let e = analytic_epsilon(&prior, &x, t, &s).unwrap();
            let g = finite_diff(|v| log_density_t(&prior, v, t, &s).unwrap(), &x, 1e-5).unwrap();
            let want = g.scale(-s.sigma(t));
            assert!(max_relative_error(e.data(), want.data(), 1e-7) < 1e-5);
        }
    }

    #[test]
    fn separated_components_pick_nearest() {
        let s = sched(ScheduleKind::LinearAlphaBar, 100);
        let t = 10;
        let a = MixtureComponent { weight: 0.5, mean: vec![10.0, 10.0], var: vec![0.5, 0.5] };
        let b = MixtureComponent { weight: 0.5, mean: vec![-10.0, -10.0], var: vec![0.5, 0.5] };
        let mix = PromptPrior::new(1, vec![a.clone(), b]).unwrap();
        let single = PromptPrior::new(1, vec![MixtureComponent { weight: 1.0, ..a }]).unwrap();
        let x = Tensor::vector(vec![10.0 * s.alpha(t) + 0.1, 10.0 * s.alpha(t)]);
        let e1 = analytic_epsilon(&mix, &x, t, &s).unwrap();
        let e2 = analytic_epsilon(&single, &x, t, &s).unwrap();
        assert!(e1.sub(&e2).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn far_point_does_not_underflow() {
        let s = sched(ScheduleKind::LinearAlphaBar, 100);
        let a = MixtureComponent { weight: 0.5, mean: vec![1.0], var: vec![1e-4] };
        let b = MixtureComponent { weight: 0.5, mean: vec![-1.0], var: vec![1e-4] };
        let mix = PromptPrior::new(1, vec![a, b]).unwrap();
        let e = analytic_epsilon(&mix, &Tensor::vector(vec![1e4]), 1, &s).unwrap();
        assert!(e.is_finite());
        assert!(log_density_t(&mix, &Tensor::vector(vec![1e4]), 1, &s).unwrap().is_finite());
    }

    #[test]
    fn predict_x0_inverts_true_noise() {
        let s = sched(ScheduleKind::Cosine, 100);
        let mut rng = Rng::new(1);
        let x0: Tensor<f64> = rng.normal_tensor(&[8]);
        let eps: Tensor<f64> = rng.normal_tensor(&[8]);
        let n = forward_noise(&x0, 60, &eps, &s).unwrap();
        let back = predict_x0(&n.x_t, 60, &eps, &s).unwrap();
        assert!(back.sub(&x0).unwrap().max_abs() < 1e-12);
        let plain = predict_x0(&n.x_t, 60, &Tensor::zeros(&[8]), &s).unwrap();
        assert_eq!(plain, n.x_t.scale(1.0 / s.alpha(60)).map(|v| v));
    }

    #[test]
    fn predict_x0_is_gaussian_posterior_mean() {
        // For x_0 ~ N(μ, v): E[x_0 | x_t] = μ + α v (x_t - α μ) / (α² v + σ²).
        let s = sched(ScheduleKind::LinearAlphaBar, 100);
        let (mu, v) = (vec![0.7, -1.2, 2.0], 0.4);
        let prior = PromptPrior::gaussian(0, mu.clone(), v).unwrap();
        let x_t = Tensor::vector(vec![0.1, 0.5, -0.3]);
        for t in [5, 50, 95] {
            let (a, sg) = (s.alpha(t), s.sigma(t));
            let e = analytic_epsilon(&prior, &x_t, t, &s).unwrap();
            let xh = predict_x0(&x_t, t, &e, &s).unwrap();
            for i in 0..3 {
                let post = mu[i] + a * v * (x_t.data()[i] - a * mu[i]) / (a * a * v + sg * sg);
                assert!((xh.data()[i] - post).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn log_density_special_cases() {
        let s = sched(ScheduleKind::LinearAlphaBar, 30);
        let d = 3;
        let prior = PromptPrior::gaussian(0, vec![0.0; d], 1.0).unwrap();
        let want = -(d as f64) / 2.0 * (2.0 * std::f64::consts::PI).ln();
        for t in [0, 7, 30] {
            let lp = log_density_t(&prior, &Tensor::zeros(&[d]), t, &s).unwrap();
            assert!((lp - want).abs() < 1e-12);
        }
        let c = MixtureComponent { weight: 0.25, mean: vec![0.5, 0.1, -0.2], var: vec![0.3, 0.9, 1.1] };
        let mix = PromptPrior::new(0, vec![c.clone(); 4]).unwrap();
        let single = PromptPrior::new(0, vec![MixtureComponent { weight: 1.0, ..c }]).unwrap();
        let x = Tensor::vector(vec![0.2, 0.2, 0.2]);
        let a = log_density_t(&mix, &x, 12, &s).unwrap();
        let b = log_density_t(&single, &x, 12, &s).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn rotate_views_permutes_blocks() {
        let p = PromptPrior::gaussian(0, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 1.0).unwrap();
        let r = p.rotate_views(3, 1).unwrap();
        assert_eq!(r.components[0].mean, vec![2.0, 3.0, 4.0, 5.0, 0.0, 1.0]);
        assert_eq!(p.rotate_views(3, 3).unwrap(), p);
    }

    #[test]
    fn prior_validation() {
        let bad_w = MixtureComponent { weight: 0.4, mean: vec![0.0], var: vec![1.0] };
        assert!(PromptPrior::new(0, vec![bad_w]).is_err());
        let bad_v = MixtureComponent { weight: 1.0, mean: vec![0.0], var: vec![0.0] };
        assert!(PromptPrior::new(0, vec![bad_v]).is_err());
        assert!(PromptPrior::<f64>::new(0, vec![]).is_err());
    }

    #[test]
    fn prior_json_layout() {
        let p = PromptPrior::gaussian(3, vec![1.0, 2.0], 0.5).unwrap();
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert_eq!(v["prompt_id"], 3);
        assert_eq!(v["components"][0]["var"][1], 0.5);
        let back: PromptPrior<f64> = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn works_in_f32() {
        let s = NoiseSchedule::<f32>::new(ScheduleKind::LinearAlphaBar, 20).unwrap();
        let prior = PromptPrior::<f32>::gaussian(0, vec![0.0; 2], 1.0).unwrap();
        let x = Tensor::vector(vec![1.0f32, -1.0]);
        let e = analytic_epsilon(&prior, &x, 10, &s).unwrap();
        assert!((e.data()[0] - s.sigma(10)).abs() < 1e-6);
    }

    pub(crate) fn random_prior(rng: &mut Rng, d: usize, k: usize) -> PromptPrior<f64> {
        let raw: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.2, 1.0)).collect();
        let total: f64 = raw.iter().sum();
        let comps = raw
            .iter()
            .map(|w| MixtureComponent {
                weight: w / total,
                mean: rng.normal_vec(d),
                var: (0..d).map(|_| rng.uniform_range(0.1, 2.0)).collect(),
            })
            .collect();
        PromptPrior::new(0, comps).unwrap()
    }
}
