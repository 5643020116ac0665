//! Adversarial denoising diffusion training: rank-based Gaussian mapping,
//! the clipped lambda schedule, adversarial-noise mixing, classifier-guided
//! perturbation optimization (with the mapping treated as identity during
//! backpropagation), the parameter update, and the ablation mapping modes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{recover_onestep_batch_var, snr_gamma, Schedule};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nets::{ClassifierNet, DenoiserNet};
use crate::optim::Adam;
use crate::rngtape::RngKey;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// l-inf budget of the sign-mapped ablation mode.
pub const LINF_MAP_BUDGET: f64 = 8.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    /// Gaussian order statistics arranged by the perturbation's ranks.
    Rbgm,
    /// Raw perturbation scaled to the l2 norm of the Gaussian draw.
    L2Normalized,
    /// Sign perturbation with a fixed l-inf budget (trained with
    /// `lambda_unit = 1`, `lambda_max = 10`).
    LinfProjected,
    /// Normalized perturbation values scattered into the Gaussian draw's
    /// rank order.
    GaussianReordered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CgpoObjective {
    /// Maximize classifier cross-entropy on the one-step reconstruction.
    ClassifierCe,
    /// Maximize reconstruction error instead (the "MSE-guided" variant).
    ReconstructionMse,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AddtConfig {
    pub lambda_unit: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub cgpo_steps: usize,
    pub perturbation_mode: PerturbationMode,
    pub objective: CgpoObjective,
}

impl Default for AddtConfig {
    fn default() -> Self {
        AddtConfig {
            lambda_unit: 0.03,
            lambda_min: 0.0,
            lambda_max: 0.3,
            cgpo_steps: 5,
            perturbation_mode: PerturbationMode::Rbgm,
            objective: CgpoObjective::ClassifierCe,
        }
    }
}

impl AddtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lambda_min && self.lambda_min <= self.lambda_max) {
            return Err(Error::config(
                "need 0 <= lambda_min <= lambda_max",
            ));
        }
        if self.gaussian_mix() && self.lambda_max > 1.0 {
            return Err(Error::config(
                "lambda_max above 1 is only meaningful for the l-inf mode",
            ));
        }
        Ok(())
    }

    /// Whether the mode mixes with the variance-preserving Eq.-8 form.
    fn gaussian_mix(&self) -> bool {
        self.perturbation_mode != PerturbationMode::LinfProjected
    }
}

/// Accumulated raw gradient signal and its mode-mapped form.
#[derive(Clone, Debug)]
pub struct Perturbation<T> {
    pub delta: Tensor<T>,
    pub mapped: Tensor<T>,
}

/// Stable argsort by value, ties broken by flat index.
fn argsort<T: Scalar>(values: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    idx
}

/// Rank-based Gaussian mapping: `out[i] = sorted(eps_s)[rank(delta[i])]`,
/// ranks ascending with stable index tie-break. The output is a permutation
/// of `eps_s`.
pub fn rbgm<T: Scalar>(delta: &Tensor<T>, eps_s: &Tensor<T>) -> Result<Tensor<T>> {
    if delta.shape() != eps_s.shape() {
        return Err(Error::shape(format!(
            "rbgm shapes differ: {:?} vs {:?}",
            delta.shape(),
            eps_s.shape()
        )));
    }
    let order = argsort(delta.data());
    let mut sorted_eps = eps_s.data().to_vec();
    sorted_eps.sort_by(|a, b| a.total_cmp(b));
    let mut out = vec![T::ZERO; delta.numel()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = sorted_eps[rank];
    }
    Tensor::new(delta.shape().to_vec(), out)
}

/// Apply the configured perturbation mapping.
pub fn map_perturbation<T: Scalar>(
    delta: &Tensor<T>,
    eps_s: &Tensor<T>,
    mode: PerturbationMode,
) -> Result<Tensor<T>> {
    if delta.shape() != eps_s.shape() {
        return Err(Error::shape("map_perturbation shapes differ"));
    }
    match mode {
        PerturbationMode::Rbgm => rbgm(delta, eps_s),
        PerturbationMode::L2Normalized => {
            let nd = delta.l2_norm();
            if nd.to_f64() == 0.0 {
                return Err(Error::numeric(
                    "cannot l2-normalize a zero perturbation",
                ));
            }
            let ne = eps_s.l2_norm();
            Ok(delta.scale(ne / nd))
        }
        PerturbationMode::LinfProjected => {
            Ok(delta.map(|v| {
                let s = if v > T::ZERO {
                    T::ONE
                } else if v < T::ZERO {
                    -T::ONE
                } else {
                    T::ZERO
                };
                s * T::from_f64(LINF_MAP_BUDGET)
            }))
        }
        PerturbationMode::GaussianReordered => {
            // normalize delta to mean 0, variance 1, then scatter its sorted
            // values into the rank order of eps_s
            let n = delta.numel() as f64;
            let mean = delta.data().iter().map(|v| v.to_f64()).sum::<f64>() / n;
            let var = delta
                .data()
                .iter()
                .map(|v| (v.to_f64() - mean).powi(2))
                .sum::<f64>()
                / n;
            if var == 0.0 {
                return Err(Error::numeric(
                    "gaussian-reorder of a constant perturbation",
                ));
            }
            let std = var.sqrt();
            let mut norm: Vec<T> = delta
                .data()
                .iter()
                .map(|v| T::from_f64((v.to_f64() - mean) / std))
                .collect();
            norm.sort_by(|a, b| a.total_cmp(b));
            let order = argsort(eps_s.data());
            let mut out = vec![T::ZERO; delta.numel()];
            for (rank, &i) in order.iter().enumerate() {
                out[i] = norm[rank];
            }
            Tensor::new(delta.shape().to_vec(), out)
        }
    }
}

/// Clipped adversarial share: `clip(gamma * lambda_unit, min, max)`.
pub fn lambda_from_gamma<T: Scalar>(gamma: T, cfg: &AddtConfig) -> T {
    (gamma * T::from_f64(cfg.lambda_unit))
        .max(T::from_f64(cfg.lambda_min))
        .min(T::from_f64(cfg.lambda_max))
}

/// Lambda at timestep `t` of a schedule, `gamma_t = sqrt(ab)/sqrt(1-ab)`.
pub fn lambda_t<T: Scalar>(s: &Schedule<T>, t: usize, cfg: &AddtConfig) -> T {
    lambda_from_gamma(snr_gamma(s, t), cfg)
}

/// Variance-preserving adversarial mix:
/// `sqrt(ab) x0 + sqrt(1-lam^2) sqrt(1-ab) eps + lam sqrt(1-ab) eps_delta`.
pub fn mix_perturbed_input<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    eps_delta: &Tensor<T>,
    lam: T,
    s: &Schedule<T>,
) -> Result<Tensor<T>> {
    let l = lam.to_f64();
    if !(0.0..=1.0).contains(&l) {
        return Err(Error::config(format!("lambda {} outside [0, 1]", l)));
    }
    if x0.shape() != eps.shape() || x0.shape() != eps_delta.shape() {
        return Err(Error::shape("mix_perturbed_input shapes differ"));
    }
    let ab = s.alpha_bar(t);
    let sa = ab.sqrt();
    let sb = (T::ONE - ab).sqrt();
    let ce = (T::ONE - lam * lam).sqrt() * sb;
    let cd = lam * sb;
    let mut out = vec![T::ZERO; x0.numel()];
    for i in 0..out.len() {
        out[i] = sa * x0.data()[i] + ce * eps.data()[i] + cd * eps_delta.data()[i];
    }
    Tensor::new(x0.shape().to_vec(), out)
}

/// Graph version of the mix for one sample at one timestep. The l-inf
/// ablation adds the mapped perturbation on top of full-strength Gaussian
/// noise instead of mixing variance-preservingly (its lambda may exceed 1).
fn mix_var<T: Scalar>(
    g: &mut Graph<T>,
    x0: Var,
    eps: Var,
    mapped: Var,
    lam: T,
    ab: T,
    gaussian_mix: bool,
) -> Result<Var> {
    let sa = ab.sqrt().to_f64();
    let sb = (T::ONE - ab).sqrt();
    let ce = if gaussian_mix {
        ((T::ONE - lam * lam).sqrt() * sb).to_f64()
    } else {
        sb.to_f64()
    };
    let cd = (lam * sb).to_f64();
    let a = g.mul_scalar(x0, sa)?;
    let b = g.mul_scalar(eps, ce)?;
    let c = g.mul_scalar(mapped, cd)?;
    let ab_sum = g.add(a, b)?;
    g.add(ab_sum, c)
}

/// One CGPO refinement: builds the perturbed input from explicit draws,
/// reconstructs through the one-step process, and returns the objective and
/// its gradient with respect to the mapped perturbation (the mapping itself
/// is bypassed in the backward pass).
#[allow(clippy::too_many_arguments)]
pub fn cgpo_iteration<T: Scalar>(
    x0: &Tensor<T>,
    y: usize,
    t: usize,
    denoiser: &DenoiserNet<T>,
    classifier: &ClassifierNet<T>,
    cfg: &AddtConfig,
    s: &Schedule<T>,
    mapped: &Tensor<T>,
    eps: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    let lam = lambda_t(s, t, cfg);
    let ab = s.alpha_bar(t);
    let mut g = Graph::new();
    let x0_v = g.constant(x0.clone());
    let eps_v = g.constant(eps.clone());
    let mapped_v = g.leaf(mapped.clone(), true);
    let xt = mix_var(&mut g, x0_v, eps_v, mapped_v, lam, ab, cfg.gaussian_mix())?;
    let pred = denoiser.forward_batch(&mut g, xt, &[t])?;
    let ab_rows = Tensor::full(&[1, 1], ab);
    let xt2 = g.reshape(xt, &[1, x0.numel()])?;
    let pred2 = g.reshape(pred, &[1, x0.numel()])?;
    let x0_hat = recover_onestep_batch_var(&mut g, xt2, pred2, &ab_rows)?;
    let objective = match cfg.objective {
        CgpoObjective::ClassifierCe => {
            let logits = classifier.logits(&mut g, x0_hat)?;
            g.softmax_cross_entropy(logits, &[y])?
        }
        CgpoObjective::ReconstructionMse => {
            let x0_2 = g.reshape(x0_v, &[1, x0.numel()])?;
            g.mse(x0_hat, x0_2)?
        }
    };
    let value = g.value(objective).item()?;
    g.backward(objective)?;
    let grad = g
        .grad(mapped_v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(mapped.shape()));
    Ok((value, grad.reshape(mapped.shape())?))
}

/// Classifier-guided perturbation optimization for one sample: accumulate
/// raw objective gradients on `delta` over `cgpo_steps` fresh-noise
/// iterations, then map once more for the training draw.
#[allow(clippy::too_many_arguments)]
pub fn cgpo<T: Scalar>(
    x0: &Tensor<T>,
    y: usize,
    t: usize,
    denoiser: &DenoiserNet<T>,
    classifier: &ClassifierNet<T>,
    cfg: &AddtConfig,
    s: &Schedule<T>,
    tape_seed: u64,
) -> Result<Perturbation<T>> {
    cfg.validate()?;
    let key = RngKey::new(tape_seed);
    // small random init breaks rank ties without biasing direction
    let mut delta = key.child(0).normal_tensor::<T>(x0.shape()).scale(T::from_f64(1e-2));
    for iter in 0..cfg.cgpo_steps {
        let eps = key.child(1).child(iter as u64).normal_tensor(x0.shape());
        let eps_s: Tensor<T> = key.child(2).child(iter as u64).normal_tensor(x0.shape());
        let mapped = map_perturbation(&delta, &eps_s, cfg.perturbation_mode)?;
        let (_, grad) = cgpo_iteration(x0, y, t, denoiser, classifier, cfg, s, &mapped, &eps)?;
        delta = delta.add_t(&grad)?;
    }
    let final_eps_s: Tensor<T> = key.child(3).normal_tensor(x0.shape());
    let mapped = map_perturbation(&delta, &final_eps_s, cfg.perturbation_mode)?;
    Ok(Perturbation { delta, mapped })
}

/// Inputs of one ADDT loss evaluation over a batch.
pub struct AddtBatch<T> {
    /// `[b, d]`
    pub x0: Tensor<T>,
    pub ts: Vec<usize>,
    /// `[b, d]` fresh Gaussian draw.
    pub eps: Tensor<T>,
    /// `[b, d]` mapped perturbations (constant in the training step).
    pub mapped: Tensor<T>,
    pub lams: Vec<T>,
}

/// The ADDT objective with the SNR factor inside the squared norm:
/// `|| gamma_t (x0 - P(theta, x'_t, t)) ||^2`, averaged over the batch.
/// At `lambda = 0` this reduces exactly to the epsilon-prediction loss.
pub fn addt_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    denoiser: &DenoiserNet<T>,
    params: &[Var],
    batch: &AddtBatch<T>,
    s: &Schedule<T>,
    gaussian_mix: bool,
) -> Result<Var> {
    let b = batch.x0.shape()[0];
    if batch.ts.len() != b || batch.lams.len() != b {
        return Err(Error::shape("per-sample lists do not match batch"));
    }
    let ab_rows = Tensor::from_fn(&[b, 1], |i| s.alpha_bar(batch.ts[i]));
    let sa = g.constant(ab_rows.map(|v| v.sqrt()));
    let ce = g.constant(Tensor::from_fn(&[b, 1], |i| {
        let ab = s.alpha_bar(batch.ts[i]);
        let lam = batch.lams[i];
        if gaussian_mix {
            (T::ONE - lam * lam).sqrt() * (T::ONE - ab).sqrt()
        } else {
            (T::ONE - ab).sqrt()
        }
    }));
    let cd = g.constant(Tensor::from_fn(&[b, 1], |i| {
        batch.lams[i] * (T::ONE - s.alpha_bar(batch.ts[i])).sqrt()
    }));
    let x0_v = g.constant(batch.x0.clone());
    let eps_v = g.constant(batch.eps.clone());
    let mapped_v = g.constant(batch.mapped.clone());

    let a = g.mul(x0_v, sa)?;
    let e = g.mul(eps_v, ce)?;
    let d = g.mul(mapped_v, cd)?;
    let ae = g.add(a, e)?;
    let xt = g.add(ae, d)?;

    let pred = denoiser.forward_with(g, params, xt, &batch.ts)?;
    let x0_hat = recover_onestep_batch_var(g, xt, pred, &ab_rows)?;
    let resid = g.sub(x0_v, x0_hat)?;
    let gamma = g.constant(Tensor::from_fn(&[b, 1], |i| snr_gamma(s, batch.ts[i])));
    let scaled = g.mul(resid, gamma)?;
    let ss = g.sum_squares(scaled)?;
    g.mul_scalar(ss, 1.0 / b as f64)
}

/// One ADDT parameter update: per-sample CGPO with frozen nets, then a
/// gradient step of the ADDT loss on a fresh draw. Returns the loss value.
#[allow(clippy::too_many_arguments)]
pub fn addt_train_step<T: Scalar>(
    denoiser: &mut DenoiserNet<T>,
    x0: &Tensor<T>,
    ys: &[usize],
    ts: &[usize],
    classifier: &ClassifierNet<T>,
    cfg: &AddtConfig,
    s: &Schedule<T>,
    opt: &mut Adam<T>,
    step_seed: u64,
) -> Result<f64> {
    let b = x0.shape()[0];
    if ys.len() != b || ts.len() != b {
        return Err(Error::shape("labels/timesteps do not match batch"));
    }
    let key = RngKey::new(step_seed);
    let frozen = &*denoiser;
    let perturbations: Vec<Perturbation<T>> = (0..b)
        .into_par_iter()
        .map(|i| {
            cgpo(
                &x0.row(i)?,
                ys[i],
                ts[i],
                frozen,
                classifier,
                cfg,
                s,
                key.child(10).child(i as u64).seed_value(),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let eps = Tensor::from_fn(&[b, x0.shape()[1]], |flat| {
        let (i, j) = (flat / x0.shape()[1], flat % x0.shape()[1]);
        T::from_f64(key.child(11).child(i as u64).normal_at(j as u64))
    });
    let mapped_rows: Vec<Tensor<T>> = perturbations.iter().map(|p| p.mapped.clone()).collect();
    let batch = AddtBatch {
        x0: x0.clone(),
        ts: ts.to_vec(),
        eps,
        mapped: Tensor::stack_rows(&mapped_rows)?,
        lams: ts.iter().map(|&t| lambda_t(s, t, cfg)).collect(),
    };

    let mut g = Graph::new();
    let params = denoiser.insert_params(&mut g, true);
    let loss = addt_loss_var(&mut g, denoiser, &params, &batch, s, cfg.gaussian_mix())?;
    let loss_value = g.value(loss).item()?.to_f64();
    g.backward(loss)?;
    let grads: Vec<Tensor<T>> = params
        .iter()
        .zip(denoiser.params())
        .map(|(&v, p)| match g.grad(v) {
            Some(gr) => gr.clone(),
            None => Tensor::zeros(p.shape()),
        })
        .collect();
    opt.step(denoiser.params_mut(), &grads)?;
    if !loss_value.is_finite() {
        return Err(Error::training("ADDT loss diverged"));
    }
    Ok(loss_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_linear_schedule;

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn rbgm_hand_example() {
        let delta = t1(&[0.5, -1.2, 0.1]);
        let eps = t1(&[0.3, -0.7, 1.5]);
        let out = rbgm(&delta, &eps).unwrap();
        assert_eq!(out.data(), &[1.5, -0.7, 0.3]);
    }

    #[test]
    fn rbgm_ascending_delta_gives_sorted_eps() {
        let delta = t1(&[-3.0, -1.0, 0.0, 2.0]);
        let eps = t1(&[0.4, -0.2, 1.1, -0.9]);
        let out = rbgm(&delta, &eps).unwrap();
        assert_eq!(out.data(), &[-0.9, -0.2, 0.4, 1.1]);
    }

    #[test]
    fn rbgm_ties_break_by_index() {
        let delta = t1(&[0.7, 0.7, 0.7]);
        let eps = t1(&[0.5, -0.5, 0.0]);
        let out = rbgm(&delta, &eps).unwrap();
        assert_eq!(out.data(), &[-0.5, 0.0, 0.5]);
    }

    #[test]
    fn rbgm_output_is_permutation() {
        let key = RngKey::new(5);
        let delta: Tensor<f64> = key.child(0).normal_tensor(&[64]);
        let eps: Tensor<f64> = key.child(1).normal_tensor(&[64]);
        let out = rbgm(&delta, &eps).unwrap();
        let mut a: Vec<u64> = out.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u64> = eps.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn rbgm_invariant_to_monotone_transforms() {
        let key = RngKey::new(9);
        let delta: Tensor<f64> = key.child(0).normal_tensor(&[32]);
        let eps: Tensor<f64> = key.child(1).normal_tensor(&[32]);
        let base = rbgm(&delta, &eps).unwrap();
        let scaled = rbgm(&delta.map(|v| 3.5 * v + 2.0), &eps).unwrap();
        let cubed = rbgm(&delta.map(|v| v * v * v), &eps).unwrap();
        assert_eq!(base, scaled);
        assert_eq!(base, cubed);
    }

    #[test]
    fn lambda_clipping() {
        let cfg = AddtConfig::default();
        assert!((lambda_from_gamma(20.0, &cfg) - 0.3).abs() < 1e-15);
        assert_eq!(lambda_from_gamma(0.0, &cfg), 0.0);
        assert!((lambda_from_gamma(1.0, &cfg) - 0.03).abs() < 1e-15);
        // gamma = 20 at alpha_bar = 400/401
        let s: Schedule<f64> = Schedule::from_beta(vec![1.0 / 401.0]).unwrap();
        let g = snr_gamma(&s, 1);
        assert!((g - 20.0).abs() < 1e-10);
        assert!((lambda_t(&s, 1, &cfg) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn lambda_monotone_over_schedule() {
        let s: Schedule<f64> = make_linear_schedule(100, 1e-3, 0.2).unwrap();
        let cfg = AddtConfig::default();
        let mut prev = f64::INFINITY;
        for t in 1..=100 {
            let l = lambda_t(&s, t, &cfg);
            assert!(l <= prev + 1e-15);
            prev = l;
        }
        assert_eq!(lambda_t(&s, 1, &cfg), 0.3); // clipped at lambda_max
        assert!(lambda_t(&s, 100, &cfg) < 1e-2); // near zero deep in the chain
    }

    #[test]
    fn mix_reduces_to_forward_diffuse_at_zero() {
        let s: Schedule<f64> = make_linear_schedule(10, 0.01, 0.1).unwrap();
        let x0 = t1(&[0.2, 0.8]);
        let eps = t1(&[1.0, -1.0]);
        let ed = t1(&[5.0, 5.0]);
        let mixed = mix_perturbed_input(&x0, 4, &eps, &ed, 0.0, &s).unwrap();
        let fd = crate::diffusion::forward_diffuse_kernel(&x0, &eps, s.alpha_bar(4)).unwrap();
        assert_eq!(mixed, fd);
    }

    #[test]
    fn mix_at_one_uses_only_mapped_noise() {
        let s: Schedule<f64> = make_linear_schedule(10, 0.01, 0.1).unwrap();
        let x0 = t1(&[0.0, 0.0]);
        let eps = t1(&[9.0, 9.0]);
        let ed = t1(&[1.0, -1.0]);
        let mixed = mix_perturbed_input(&x0, 4, &eps, &ed, 1.0, &s).unwrap();
        let sb = (1.0 - s.alpha_bar(4)).sqrt();
        assert!((mixed.data()[0] - sb).abs() < 1e-12);
        assert!((mixed.data()[1] + sb).abs() < 1e-12);
    }

    #[test]
    fn mix_rejects_lambda_outside_unit() {
        let s: Schedule<f64> = make_linear_schedule(10, 0.01, 0.1).unwrap();
        let x = t1(&[0.0]);
        assert!(matches!(
            mix_perturbed_input(&x, 1, &x, &x, 1.5, &s),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn l2_normalized_matches_target_norm() {
        let key = RngKey::new(4);
        let delta: Tensor<f64> = key.child(0).normal_tensor(&[40]).scale(0.01);
        let eps: Tensor<f64> = key.child(1).normal_tensor(&[40]);
        let out = map_perturbation(&delta, &eps, PerturbationMode::L2Normalized).unwrap();
        let rel = (out.l2_norm() - eps.l2_norm()).abs() / eps.l2_norm();
        assert!(rel < 1e-9);
        let zero = Tensor::zeros(&[40]);
        assert!(matches!(
            map_perturbation(&zero, &eps, PerturbationMode::L2Normalized),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn gaussian_reordered_follows_eps_ranks() {
        let key = RngKey::new(6);
        let delta: Tensor<f64> = key.child(0).normal_tensor(&[25]);
        let eps: Tensor<f64> = key.child(1).normal_tensor(&[25]);
        let out = map_perturbation(&delta, &eps, PerturbationMode::GaussianReordered).unwrap();
        assert_eq!(argsort(out.data()), argsort(eps.data()));
        // normalized to zero mean, unit variance
        let mean: f64 = out.data().iter().sum::<f64>() / 25.0;
        let var: f64 = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 25.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linf_map_is_scaled_sign() {
        let delta = t1(&[0.4, -3.0, 0.0]);
        let eps = t1(&[1.0, 1.0, 1.0]);
        let out = map_perturbation(&delta, &eps, PerturbationMode::LinfProjected).unwrap();
        let b = LINF_MAP_BUDGET;
        assert_eq!(out.data(), &[b, -b, 0.0]);
    }

    #[test]
    fn cgpo_zero_steps_returns_init() {
        let s: Schedule<f64> = make_linear_schedule(10, 0.01, 0.1).unwrap();
        let denoiser = DenoiserNet::new(8, 12, 4, 10, 1);
        let classifier = ClassifierNet::new(8, 8, 2, 2);
        let mut cfg = AddtConfig::default();
        cfg.cgpo_steps = 0;
        let x0 = Tensor::full(&[8], 0.5f64);
        let p = cgpo(&x0, 0, 3, &denoiser, &classifier, &cfg, &s, 9).unwrap();
        let init = RngKey::new(9).child(0).normal_tensor::<f64>(&[8]).scale(1e-2);
        assert_eq!(p.delta, init);
    }

    /// Frozen linear classifier and zero denoiser: the CGPO gradient has the
    /// closed form (c_d / sqrt(ab)) * (softmax - onehot) W^T.
    #[test]
    fn cgpo_gradient_matches_linear_oracle() {
        let s: Schedule<f64> = make_linear_schedule(10, 0.01, 0.1).unwrap();
        let t = 4;
        let d = 6;
        let c = 3;
        let denoiser = DenoiserNet::zeros(d, 8, 4, 10);
        // identity hidden layers, explicit final weight
        let mut classifier = ClassifierNet::zeros(d, d, c);
        for l in classifier.layers.iter_mut() {
            l.activation = crate::nets::Activation::Identity;
        }
        for i in 0..d {
            classifier.layers[0].weight.data_mut()[i * d + i] = 1.0;
            classifier.layers[1].weight.data_mut()[i * d + i] = 1.0;
        }
        let key = RngKey::new(31);
        let w: Tensor<f64> = key.child(0).normal_tensor(&[d, c]);
        classifier.layers[2].weight = w.clone();

        let cfg = AddtConfig::default();
        let x0: Tensor<f64> = key.child(1).normal_tensor(&[d]).map(|v| 0.5 + 0.1 * v);
        let eps: Tensor<f64> = key.child(2).normal_tensor(&[d]);
        let mapped: Tensor<f64> = key.child(3).normal_tensor(&[d]);
        let y = 1usize;

        let (_, grad) =
            cgpo_iteration(&x0, y, t, &denoiser, &classifier, &cfg, &s, &mapped, &eps).unwrap();

        // oracle
        let ab = s.alpha_bar(t);
        let lam = lambda_t(&s, t, &cfg);
        let sb = (1.0 - ab).sqrt();
        let cd = lam * sb;
        let xt = mix_perturbed_input(&x0, t, &eps, &mapped, lam, &s).unwrap();
        let x0_hat = xt.scale(1.0 / ab.sqrt()); // zero denoiser
        let logits = crate::tensor::matmul(
            &x0_hat.reshape(&[1, d]).unwrap(),
            &w,
        )
        .unwrap();
        let m = logits.data().iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.data().iter().map(|v| (v - m).exp()).sum();
        let mut dl = vec![0.0; c];
        for j in 0..c {
            dl[j] = (logits.data()[j] - m).exp() / z;
        }
        dl[y] -= 1.0;
        let mut want = vec![0.0; d];
        for i in 0..d {
            for j in 0..c {
                want[i] += w.data()[i * c + j] * dl[j];
            }
            want[i] *= cd / ab.sqrt();
        }
        for (a, b) in grad.data().iter().zip(&want) {
            let rel = (a - b).abs() / b.abs().max(1e-9);
            assert!(rel < 1e-6, "{a} vs {b}");
        }
    }

    /// The accumulated CGPO direction beats a random direction with the same
    /// rank profile, on average.
    #[test]
    fn cgpo_beats_random_rank_profile() {
        let s: Schedule<f64> = make_linear_schedule(20, 1e-3, 0.15).unwrap();
        let t = 2;
        let d = 12;
        let denoiser = DenoiserNet::new(d, 16, 4, 20, 3);
        let classifier = ClassifierNet::new(d, 10, 3, 4);
        let cfg = AddtConfig::default();
        let mut cgpo_sum = 0.0;
        let mut rand_sum = 0.0;
        for seed in 0..50u64 {
            let key = RngKey::new(1000 + seed);
            let x0: Tensor<f64> = key.child(0).normal_tensor(&[d]).map(|v| 0.5 + 0.15 * v);
            let y = (seed % 3) as usize;
            let p = cgpo(&x0, y, t, &denoiser, &classifier, &cfg, &s, 2000 + seed).unwrap();
            let eps: Tensor<f64> = key.child(1).normal_tensor(&[d]);
            let eps_s: Tensor<f64> = key.child(2).normal_tensor(&[d]);
            let mapped_cgpo = map_perturbation(&p.delta, &eps_s, cfg.perturbation_mode).unwrap();
            let random_delta: Tensor<f64> = key.child(3).normal_tensor(&[d]);
            let mapped_rand = map_perturbation(&random_delta, &eps_s, cfg.perturbation_mode).unwrap();
            let (lc, _) = cgpo_iteration(
                &x0, y, t, &denoiser, &classifier, &cfg, &s, &mapped_cgpo, &eps,
            )
            .unwrap();
            let (lr, _) = cgpo_iteration(
                &x0, y, t, &denoiser, &classifier, &cfg, &s, &mapped_rand, &eps,
            )
            .unwrap();
            cgpo_sum += lc;
            rand_sum += lr;
        }
        assert!(
            cgpo_sum > rand_sum,
            "cgpo mean {} vs random mean {}",
            cgpo_sum / 50.0,
            rand_sum / 50.0
        );
    }

    /// lambda = 0 turns the ADDT loss into the plain noise-prediction loss.
    #[test]
    fn lambda_zero_reduction() {
        let s: Schedule<f64> = make_linear_schedule(10, 0.01, 0.1).unwrap();
        let denoiser = DenoiserNet::new(6, 10, 4, 10, 8);
        let key = RngKey::new(70);
        let b = 3;
        let x0: Tensor<f64> = key.child(0).normal_tensor(&[b, 6]).map(|v| 0.5 + 0.1 * v);
        let eps: Tensor<f64> = key.child(1).normal_tensor(&[b, 6]);
        let ts = vec![2usize, 5, 9];

        let batch = AddtBatch {
            x0: x0.clone(),
            ts: ts.clone(),
            eps: eps.clone(),
            mapped: Tensor::zeros(&[b, 6]),
            lams: vec![0.0; b],
        };
        let mut g = Graph::new();
        let params = denoiser.insert_params(&mut g, false);
        let addt = addt_loss_var(&mut g, &denoiser, &params, &batch, &s, true).unwrap();
        let addt_val = g.value(addt).item().unwrap();

        let mut g2 = Graph::new();
        let x0v = g2.constant(x0.clone());
        let ev = g2.constant(eps);
        let ab_rows = Tensor::from_fn(&[b, 1], |i| s.alpha_bar(ts[i]));
        let dnc = denoiser.clone();
        let tsc = ts.clone();
        let diff = crate::diffusion::diffusion_loss_var(&mut g2, x0v, ev, &ab_rows, |g, xt| {
            dnc.forward_batch(g, xt, &tsc)
        })
        .unwrap();
        let diff_val = g2.value(diff).item().unwrap();

        let rel = (addt_val - diff_val).abs() / diff_val.abs();
        assert!(rel < 1e-12, "addt {} vs diffusion {}", addt_val, diff_val);
    }

    #[test]
    fn train_step_runs_and_returns_finite_loss() {
        let s: Schedule<f64> = make_linear_schedule(10, 0.01, 0.1).unwrap();
        let mut denoiser = DenoiserNet::new(6, 10, 4, 10, 8);
        let classifier = ClassifierNet::new(6, 8, 2, 9);
        let cfg = AddtConfig {
            cgpo_steps: 2,
            ..AddtConfig::default()
        };
        let mut opt = Adam::for_params(1e-3, &denoiser.params());
        let key = RngKey::new(80);
        let x0: Tensor<f64> = key.child(0).normal_tensor(&[4, 6]).map(|v: f64| (0.5 + 0.2 * v).clamp(0.0, 1.0));
        let loss = addt_train_step(
            &mut denoiser,
            &x0,
            &[0, 1, 0, 1],
            &[1, 3, 5, 9],
            &classifier,
            &cfg,
            &s,
            &mut opt,
            55,
        )
        .unwrap();
        assert!(loss.is_finite() && loss > 0.0);
    }
}
