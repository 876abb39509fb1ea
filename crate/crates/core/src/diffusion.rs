//! Variance-preserving noise schedule, forward noising, x0 inversion and a
//! deterministic DDIM sampler that stays on the autodiff graph.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const COSINE_OFFSET: f64 = 0.008;
/// Terminal cumulative signal; the cosine formula is affinely lifted so that
/// `alpha_bar_T` equals this value instead of zero.
pub const ALPHA_BAR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    t_max: usize,
    s: f64,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Cosine schedule over `0..=t_max`.
    pub fn cosine(t_max: usize) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::Invalid(format!("schedule needs T >= 2, got {t_max}")));
        }
        let s = COSINE_OFFSET;
        let f = |t: usize| {
            let u = (t as f64 / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            u.cos().powi(2)
        };
        let f0 = f(0);
        let alpha_bar = (0..=t_max)
            .map(|t| {
                if t == 0 {
                    1.0
                } else if t == t_max {
                    ALPHA_BAR_FLOOR
                } else {
                    ALPHA_BAR_FLOOR + (1.0 - ALPHA_BAR_FLOOR) * (f(t) / f0).clamp(0.0, 1.0)
                }
            })
            .collect();
        Ok(DiffusionSchedule { t_max, s, alpha_bar })
    }

    /// Rebuild from stored values (checkpoint loading); invariants re-checked.
    pub fn from_parts(t_max: usize, s: f64, alpha_bar: Vec<f64>) -> Result<Self> {
        let sched = DiffusionSchedule { t_max, s, alpha_bar };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<()> {
        let ab = &self.alpha_bar;
        if ab.len() != self.t_max + 1 || ab[0] != 1.0 || ab[self.t_max] > 1e-4 {
            return Err(Error::Format("schedule boundary values invalid".into()));
        }
        if ab.windows(2).any(|w| !(w[1] < w[0]) || w[1] <= 0.0) {
            return Err(Error::Format("alpha_bar must be strictly decreasing and positive".into()));
        }
        Ok(())
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn offset(&self) -> f64 {
        self.s
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(Error::Invalid(format!("timestep {t} exceeds T = {}", self.t_max)));
        }
        Ok(())
    }

    /// `S + 1` uniformly spaced timesteps from `T` down to 0.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.t_max {
            return Err(Error::Invalid(format!("DDIM steps must be in 1..={}, got {steps}", self.t_max)));
        }
        Ok((0..=steps).map(|i| ((self.t_max * (steps - i)) as f64 / steps as f64).round() as usize).collect())
    }
}

pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::shape("forward_noise", format!("{:?} vs {:?}", x0.shape(), eps.shape())));
    }
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + s * e).collect();
    Ok(Tensor::from_raw(x0.shape().to_vec(), data))
}

pub fn posterior_x0(xt: &Tensor, t: usize, eps_hat: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if xt.shape() != eps_hat.shape() {
        return Err(Error::shape("posterior_x0", format!("{:?} vs {:?}", xt.shape(), eps_hat.shape())));
    }
    if t == 0 {
        return Ok(xt.clone());
    }
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    let data = xt.data().iter().zip(eps_hat.data()).map(|(x, e)| (x - s * e) / a).collect();
    Ok(Tensor::from_raw(xt.shape().to_vec(), data))
}

/// Row-wise noising on the graph: row `i` of `x0` goes to timestep `ts[i]`.
pub fn noise_rows(g: &mut Graph, x0: Var, ts: &[usize], eps: Var, sched: &DiffusionSchedule) -> Result<Var> {
    for &t in ts {
        sched.check_t(t)?;
    }
    let a = g.input(Tensor::vector(ts.iter().map(|&t| sched.alpha(t)).collect()));
    let s = g.input(Tensor::vector(ts.iter().map(|&t| sched.sigma(t)).collect()));
    let ax = g.mul_rows(x0, a)?;
    let se = g.mul_rows(eps, s)?;
    g.add(ax, se)
}

/// Row-wise `(x_t - sigma_t eps) / alpha_t` on the graph.
pub fn posterior_rows(g: &mut Graph, xt: Var, ts: &[usize], eps_hat: Var, sched: &DiffusionSchedule) -> Result<Var> {
    for &t in ts {
        sched.check_t(t)?;
    }
    let inv_a = g.input(Tensor::vector(ts.iter().map(|&t| 1.0 / sched.alpha(t)).collect()));
    let s_over_a = g.input(Tensor::vector(ts.iter().map(|&t| sched.sigma(t) / sched.alpha(t)).collect()));
    let x = g.mul_rows(xt, inv_a)?;
    let e = g.mul_rows(eps_hat, s_over_a)?;
    g.sub(x, e)
}

/// Conditional noise predictor; the condition is captured by the implementor.
pub trait Denoiser {
    /// `x_t` is `[batch, dim]`; every row sits at timestep `t`.
    fn predict_eps(&self, g: &mut Graph, x_t: Var, t: usize) -> Result<Var>;
}

impl<F> Denoiser for F
where
    F: Fn(&mut Graph, Var, usize) -> Result<Var>,
{
    fn predict_eps(&self, g: &mut Graph, x_t: Var, t: usize) -> Result<Var> {
        self(g, x_t, t)
    }
}

/// Deterministic DDIM from seeded noise `x_T ~ N(0, I)` through `steps`
/// uniformly spaced timesteps. The result stays differentiable through the
/// denoiser.
pub fn ddim_sample<D: Denoiser + ?Sized>(
    g: &mut Graph,
    denoiser: &D,
    shape: &[usize],
    steps: usize,
    rng: &RngStream,
    sched: &DiffusionSchedule,
) -> Result<Var> {
    let x_t = g.input(rng.normal(shape));
    ddim_from(g, denoiser, x_t, steps, sched)
}

/// DDIM starting from a caller-supplied `x_T`.
pub fn ddim_from<D: Denoiser + ?Sized>(
    g: &mut Graph,
    denoiser: &D,
    x_start: Var,
    steps: usize,
    sched: &DiffusionSchedule,
) -> Result<Var> {
    let ts = sched.ddim_timesteps(steps)?;
    let mut x = x_start;
    for w in ts.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let eps = denoiser.predict_eps(g, x, t)?;
        let se = g.scale(eps, sched.sigma(t))?;
        let diff = g.sub(x, se)?;
        let x0 = g.scale(diff, 1.0 / sched.alpha(t))?;
        x = if t_next == 0 {
            x0
        } else {
            let a = g.scale(x0, sched.alpha(t_next))?;
            let b = g.scale(eps, sched.sigma(t_next))?;
            g.add(a, b)?
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> DiffusionSchedule {
        DiffusionSchedule::cosine(64).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = sched();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(64) <= 1e-4);
        s.validate().unwrap();
        for t in 0..=64 {
            let v = s.alpha(t).powi(2) + s.sigma(t).powi(2);
            assert!((v - 1.0).abs() < 1e-15);
        }
        assert!(DiffusionSchedule::cosine(1).is_err());
    }

    #[test]
    fn schedule_follows_cosine_formula() {
        let s = sched();
        let f = |t: f64| ((t / 64.0 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let raw = f(20.0) / f(0.0);
        assert!((s.alpha_bar(20) - raw).abs() < 2e-5);
    }

    #[test]
    fn noise_endpoints() {
        let s = sched();
        let x0 = RngStream::new(1).normal(&[4, 8]);
        let e = RngStream::new(2).normal(&[4, 8]);
        assert_eq!(forward_noise(&x0, 0, &e, &s).unwrap(), x0);
        let xt = forward_noise(&x0, 64, &e, &s).unwrap();
        assert!(xt.max_abs_diff(&e) < 1e-2 * x0.data().iter().fold(1.0f64, |m, v| m.max(v.abs())));
        assert!(forward_noise(&x0, 65, &e, &s).is_err());
    }

    #[test]
    fn noised_variance_matches() {
        let s = sched();
        let t = 20;
        let n = 10_000;
        let x0 = RngStream::new(5).normal(&[n]).map(|v| 0.5 * v);
        let e = RngStream::new(6).normal(&[n]);
        let xt = forward_noise(&x0, t, &e, &s).unwrap();
        let mean = xt.sum() / n as f64;
        let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let expect = s.alpha_bar(t) * 0.25 + (1.0 - s.alpha_bar(t));
        assert!((var / expect - 1.0).abs() < 0.03, "{var} vs {expect}");
    }

    #[test]
    fn posterior_inverts_forward() {
        let s = sched();
        let x0 = RngStream::new(1).normal(&[3, 5]);
        let e = RngStream::new(2).normal(&[3, 5]);
        for t in [1, 10, 40, 64] {
            let xt = forward_noise(&x0, t, &e, &s).unwrap();
            let back = posterior_x0(&xt, t, &e, &s).unwrap();
            assert!(back.max_abs_diff(&x0) < 1e-10, "t={t}");
            let zero = Tensor::zeros(&[3, 5]);
            let direct = posterior_x0(&xt, t, &zero, &s).unwrap();
            assert!(direct.max_abs_diff(&xt.map(|v| v / s.alpha(t))) < 1e-15);
        }
        assert!(posterior_x0(&x0, 10, &Tensor::zeros(&[2]), &s).is_err());
    }

    #[test]
    fn ddim_with_oracle_denoiser_recovers_x0() {
        let s = sched();
        let x0 = RngStream::new(9).normal(&[2, 6]);
        for steps in [1, 4, 8] {
            let mut g = Graph::new();
            let target = x0.clone();
            let oracle = |g: &mut Graph, x: Var, t: usize| {
                let xt = g.value(x).clone();
                let e: Vec<f64> = xt
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(v, x)| (v - s.alpha(t) * x) / s.sigma(t))
                    .collect();
                Ok(g.input(Tensor::new(xt.shape().to_vec(), e)?))
            };
            let out = ddim_sample(&mut g, &oracle, &[2, 6], steps, &RngStream::new(3), &s).unwrap();
            assert!(g.value(out).max_abs_diff(&x0) < 1e-10, "steps={steps}");
        }
    }

    #[test]
    fn ddim_single_step_is_one_posterior_jump() {
        let s = sched();
        let den = |g: &mut Graph, x: Var, _t: usize| g.scale(x, 0.5);
        let mut g = Graph::new();
        let out = ddim_sample(&mut g, &den, &[1, 4], 1, &RngStream::new(4), &s).unwrap();
        let xt = RngStream::new(4).normal(&[1, 4]);
        let expect = posterior_x0(&xt, 64, &xt.map(|v| 0.5 * v), &s).unwrap();
        assert!(g.value(out).max_abs_diff(&expect) < 1e-10);
    }

    #[test]
    fn ddim_is_deterministic() {
        let s = sched();
        let den = |g: &mut Graph, x: Var, _t: usize| g.silu(x);
        let run = || {
            let mut g = Graph::new();
            let out = ddim_sample(&mut g, &den, &[2, 3], 4, &RngStream::new(8), &s).unwrap();
            g.value(out).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn timesteps_are_uniform() {
        assert_eq!(sched().ddim_timesteps(4).unwrap(), vec![64, 48, 32, 16, 0]);
        assert_eq!(sched().ddim_timesteps(1).unwrap(), vec![64, 0]);
        assert!(sched().ddim_timesteps(0).is_err());
    }
}
