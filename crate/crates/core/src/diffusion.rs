//! Diffusion schedules, the forward noising process, reverse samplers
//! (stochastic DDPM, deterministic DDIM), one-step recovery, the standard
//! noise-prediction training loss, and step-skipping schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-step noise levels and their cumulative products, `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule<T> {
    beta: Vec<T>,
    alpha_bar: Vec<T>,
}

impl<T: Scalar> Schedule<T> {
    /// Build from explicit betas; validates `0 < beta < 1` and monotonicity.
    pub fn from_beta(beta: Vec<T>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::config("schedule needs at least one step"));
        }
        let mut prev = T::ZERO;
        for &b in &beta {
            if b <= T::ZERO || b >= T::ONE {
                return Err(Error::config(format!("beta {} outside (0, 1)", b)));
            }
            if b < prev {
                return Err(Error::config("beta must be non-decreasing"));
            }
            prev = b;
        }
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(T::ONE);
        let mut acc = T::ONE;
        for &b in &beta {
            acc = acc * (T::ONE - b);
            alpha_bar.push(acc);
        }
        Ok(Schedule { beta, alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> T {
        self.beta[t - 1]
    }

    /// `alpha_bar_t` for `0 <= t <= T`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bar[t]
    }

    pub fn betas(&self) -> &[T] {
        &self.beta
    }

    pub fn to_json(&self) -> String {
        let ser = ScheduleJson {
            t: self.t_max(),
            beta: self.beta.iter().map(|b| b.to_f64()).collect(),
        };
        serde_json::to_string(&ser).expect("schedule serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let de: ScheduleJson =
            serde_json::from_str(s).map_err(|e| Error::format(format!("bad schedule: {e}")))?;
        if de.beta.len() != de.t {
            return Err(Error::format("schedule length disagrees with T"));
        }
        Schedule::from_beta(de.beta.into_iter().map(T::from_f64).collect())
    }
}

#[derive(Serialize, Deserialize)]
struct ScheduleJson {
    t: usize,
    beta: Vec<f64>,
}

/// Linear beta schedule between `beta_start` and `beta_end`.
pub fn make_linear_schedule<T: Scalar>(
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<Schedule<T>> {
    if t_max < 1 {
        return Err(Error::config("T must be >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let beta = if t_max == 1 {
        vec![T::from_f64(beta_start)]
    } else {
        (0..t_max)
            .map(|i| {
                T::from_f64(
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64,
                )
            })
            .collect()
    };
    Schedule::from_beta(beta)
}

/// Reverse sampler family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerKind {
    /// Stochastic: injects Gaussian noise at every reverse step but the last.
    Ddpm,
    /// Deterministic (eta = 0): the reverse pass consumes no noise.
    Ddim,
}

/// How a purification run walks the reverse chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurifyConfig {
    pub sampler: SamplerKind,
    pub t_star: usize,
    /// Descending timesteps, starting at `t_star` and ending at 0.
    pub step_list: Vec<usize>,
}

impl PurifyConfig {
    /// Config with `nfe` reverse evaluations, evenly spaced.
    pub fn new(sampler: SamplerKind, t_star: usize, nfe: usize) -> Result<Self> {
        let step_list = if t_star == 0 {
            vec![0]
        } else {
            nfe_subsequence(t_star, nfe)?
        };
        Ok(PurifyConfig {
            sampler,
            t_star,
            step_list,
        })
    }

    /// Default diffusion depth: `round(0.1 * T)`.
    pub fn default_t_star(t_max: usize) -> usize {
        (0.1 * t_max as f64).round() as usize
    }

    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.step_list.is_empty() || self.step_list[0] != self.t_star {
            return Err(Error::config("step_list must start at t_star"));
        }
        if *self.step_list.last().unwrap() != 0 {
            return Err(Error::config("step_list must end at 0"));
        }
        if !self.step_list.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::config("step_list must be strictly decreasing"));
        }
        if self.t_star > t_max {
            return Err(Error::config(format!(
                "t_star {} exceeds schedule length {}",
                self.t_star, t_max
            )));
        }
        Ok(())
    }

    /// Number of reverse evaluations (denoiser calls).
    pub fn nfe(&self) -> usize {
        self.step_list.len().saturating_sub(1)
    }

    /// Number of stochastic reverse draws a tape must provide: DDPM adds
    /// noise on every step except the final one to t = 0; DDIM adds none.
    pub fn reverse_noise_count(&self) -> usize {
        match self.sampler {
            SamplerKind::Ddpm => self.nfe().saturating_sub(1),
            SamplerKind::Ddim => 0,
        }
    }
}

/// Evenly spaced descending timestep list from `t_star` to 0 with `nfe`
/// reverse evaluations.
pub fn nfe_subsequence(t_star: usize, nfe: usize) -> Result<Vec<usize>> {
    if nfe < 1 {
        return Err(Error::config("nfe must be >= 1"));
    }
    if nfe > t_star {
        return Err(Error::config(format!(
            "nfe {} exceeds diffusion depth {}",
            nfe, t_star
        )));
    }
    let mut list = Vec::with_capacity(nfe + 1);
    for i in 0..=nfe {
        let t = (t_star as f64 * (nfe - i) as f64 / nfe as f64).round() as usize;
        list.push(t);
    }
    debug_assert!(list.windows(2).all(|w| w[0] > w[1]));
    Ok(list)
}

// ---- value kernels -------------------------------------------------------
//
// The graph builders below wrap these; tests can also hit them directly with
// exact constants.

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps`
pub fn forward_diffuse_kernel<T: Scalar>(
    x0: &Tensor<T>,
    eps: &Tensor<T>,
    alpha_bar_t: T,
) -> Result<Tensor<T>> {
    let a = alpha_bar_t.sqrt();
    let b = (T::ONE - alpha_bar_t).sqrt();
    x0.zip(eps, |x, e| a * x + b * e)
}

/// `(xt - sqrt(1 - ab) * eps_pred) / sqrt(ab)`
pub fn recover_onestep_kernel<T: Scalar>(
    xt: &Tensor<T>,
    eps_pred: &Tensor<T>,
    alpha_bar_t: T,
) -> Result<Tensor<T>> {
    if alpha_bar_t.to_f64() < 1e-12 {
        return Err(Error::numeric(
            "alpha_bar below 1e-12; one-step recovery is ill-conditioned",
        ));
    }
    let a = alpha_bar_t.sqrt();
    let b = (T::ONE - alpha_bar_t).sqrt();
    xt.zip(eps_pred, |x, e| (x - b * e) / a)
}

// ---- graph builders ------------------------------------------------------

/// Forward diffusion on the graph: `x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) eps`.
pub fn forward_diffuse_var<T: Scalar>(
    g: &mut Graph<T>,
    x0: Var,
    eps: Var,
    alpha_bar_t: T,
) -> Result<Var> {
    if g.value(x0).shape() != g.value(eps).shape() {
        return Err(Error::shape(format!(
            "noise shape {:?} does not match image shape {:?}",
            g.value(eps).shape(),
            g.value(x0).shape()
        )));
    }
    let xs = g.mul_scalar(x0, alpha_bar_t.sqrt().to_f64())?;
    let es = g.mul_scalar(eps, (T::ONE - alpha_bar_t).sqrt().to_f64())?;
    g.add(xs, es)
}

/// Forward diffusion with a per-row `sqrt(ab)` / `sqrt(1-ab)` column, for
/// batches where each sample sits at its own timestep.
pub fn forward_diffuse_batch_var<T: Scalar>(
    g: &mut Graph<T>,
    x0: Var,
    eps: Var,
    alpha_bar_rows: &Tensor<T>,
) -> Result<Var> {
    let sa = g.constant(alpha_bar_rows.map(|v| v.sqrt()));
    let sb = g.constant(alpha_bar_rows.map(|v| (T::ONE - v).sqrt()));
    let xs = g.mul(x0, sa)?;
    let es = g.mul(eps, sb)?;
    g.add(xs, es)
}

/// One-step recovery on the graph (Eq. 4 form).
pub fn recover_onestep_var<T: Scalar>(
    g: &mut Graph<T>,
    xt: Var,
    eps_pred: Var,
    alpha_bar_t: T,
) -> Result<Var> {
    if alpha_bar_t.to_f64() < 1e-12 {
        return Err(Error::numeric(
            "alpha_bar below 1e-12; one-step recovery is ill-conditioned",
        ));
    }
    let es = g.mul_scalar(eps_pred, (T::ONE - alpha_bar_t).sqrt().to_f64())?;
    let num = g.sub(xt, es)?;
    g.mul_scalar(num, (T::ONE / alpha_bar_t.sqrt()).to_f64())
}

/// Per-row one-step recovery for batched timesteps.
pub fn recover_onestep_batch_var<T: Scalar>(
    g: &mut Graph<T>,
    xt: Var,
    eps_pred: Var,
    alpha_bar_rows: &Tensor<T>,
) -> Result<Var> {
    for &v in alpha_bar_rows.data() {
        if v.to_f64() < 1e-12 {
            return Err(Error::numeric("alpha_bar below 1e-12 in batch"));
        }
    }
    let sb = g.constant(alpha_bar_rows.map(|v| (T::ONE - v).sqrt()));
    let inv_sa = g.constant(alpha_bar_rows.map(|v| T::ONE / v.sqrt()));
    let es = g.mul(eps_pred, sb)?;
    let num = g.sub(xt, es)?;
    g.mul(num, inv_sa)
}

/// Generalized DDPM reverse update from `t` to `t_prev < t`:
/// `x_prev = (x_t - beta' / sqrt(1 - ab_t) * eps_pred) / sqrt(1 - beta')
///          + sqrt(beta') * eps`
/// with `beta' = 1 - ab_t / ab_prev`. For `t_prev = t - 1` this is exactly
/// the single-step update since `1 - ab_t / ab_{t-1} = beta_t`. The additive
/// noise term is omitted on the final step to `t_prev = 0`.
pub fn ddpm_reverse_step_to_var<T: Scalar>(
    g: &mut Graph<T>,
    xt: Var,
    t: usize,
    t_prev: usize,
    eps_pred: Var,
    eps: Option<Var>,
    s: &Schedule<T>,
) -> Result<Var> {
    if t_prev >= t || t > s.t_max() {
        return Err(Error::config(format!(
            "invalid DDPM step {} -> {} (T = {})",
            t,
            t_prev,
            s.t_max()
        )));
    }
    let ab_t = s.alpha_bar(t);
    let ab_prev = s.alpha_bar(t_prev);
    let beta_eff = T::ONE - ab_t / ab_prev;
    let coef = (beta_eff / (T::ONE - ab_t).sqrt()).to_f64();
    let es = g.mul_scalar(eps_pred, coef)?;
    let num = g.sub(xt, es)?;
    let mean = g.mul_scalar(num, 1.0 / (T::ONE - beta_eff).sqrt().to_f64())?;
    if t_prev == 0 {
        return Ok(mean);
    }
    let eps = eps.ok_or_else(|| {
        Error::determinism(format!("DDPM step {} -> {} needs a noise draw", t, t_prev))
    })?;
    if g.value(eps).shape() != g.value(mean).shape() {
        return Err(Error::shape("reverse noise shape mismatch"));
    }
    let noise = g.mul_scalar(eps, beta_eff.sqrt().to_f64())?;
    g.add(mean, noise)
}

/// Single-step DDPM update (Eq. 5): `t -> t - 1`, noise omitted at `t = 1`.
pub fn ddpm_reverse_step_var<T: Scalar>(
    g: &mut Graph<T>,
    xt: Var,
    t: usize,
    eps_pred: Var,
    eps: Option<Var>,
    s: &Schedule<T>,
) -> Result<Var> {
    if t < 1 || t > s.t_max() {
        return Err(Error::config(format!("t {} outside schedule", t)));
    }
    ddpm_reverse_step_to_var(g, xt, t, t - 1, eps_pred, eps, s)
}

/// Deterministic DDIM update (eta = 0):
/// `x_prev = sqrt(ab_prev) * x0_hat + sqrt(1 - ab_prev) * eps_pred`.
pub fn ddim_reverse_step_var<T: Scalar>(
    g: &mut Graph<T>,
    xt: Var,
    t: usize,
    t_prev: usize,
    eps_pred: Var,
    s: &Schedule<T>,
) -> Result<Var> {
    if t_prev >= t || t > s.t_max() {
        return Err(Error::config(format!(
            "invalid DDIM step {} -> {} (T = {})",
            t,
            t_prev,
            s.t_max()
        )));
    }
    let x0_hat = recover_onestep_var(g, xt, eps_pred, s.alpha_bar(t))?;
    let ab_prev = s.alpha_bar(t_prev);
    let xs = g.mul_scalar(x0_hat, ab_prev.sqrt().to_f64())?;
    let es = g.mul_scalar(eps_pred, (T::ONE - ab_prev).sqrt().to_f64())?;
    g.add(xs, es)
}

/// Standard noise-prediction loss on the graph: per-sample squared error,
/// averaged over the batch. `x0`/`eps` are `[b, d]` (or `[d]` treated as a
/// single row), `predict` maps the noisy input to the predicted noise.
pub fn diffusion_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    x0: Var,
    eps: Var,
    alpha_bar_rows: &Tensor<T>,
    predict: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let batch = if g.value(x0).ndim() == 2 {
        g.value(x0).shape()[0]
    } else {
        1
    };
    let xt = forward_diffuse_batch_var(g, x0, eps, alpha_bar_rows)?;
    let pred = predict(g, xt)?;
    let d = g.sub(eps, pred)?;
    let ss = g.sum_squares(d)?;
    g.mul_scalar(ss, 1.0 / batch as f64)
}

/// Convenience wrapper: single timestep, plain tensors in, scalar loss out.
pub fn diffusion_loss<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    s: &Schedule<T>,
    predict: impl FnOnce(&mut Graph<T>, Var, usize) -> Result<Var>,
) -> Result<T> {
    if t < 1 || t > s.t_max() {
        return Err(Error::config(format!("t {} outside schedule", t)));
    }
    let mut g = Graph::new();
    let x0v = g.constant(x0.clone());
    let ev = g.constant(eps.clone());
    let rows = if x0.ndim() == 2 { x0.shape()[0] } else { 1 };
    let ab = Tensor::full(&[rows, 1], s.alpha_bar(t));
    let loss = diffusion_loss_var(&mut g, x0v, ev, &ab, |g, xt| predict(g, xt, t))?;
    g.value(loss).item()
}

/// Host-side lambda for Eq. 9-style weighting helpers.
pub fn snr_gamma<T: Scalar>(s: &Schedule<T>, t: usize) -> T {
    let ab = s.alpha_bar(t);
    ab.sqrt() / (T::ONE - ab).sqrt()
}
