//! The purification pipeline: diffuse to `t_star`, walk the reverse chain
//! with tape-controlled noise, clamp to pixel range, classify. Also the
//! repeated-evaluation (worst-of-k) accuracy estimator.

use std::rc::Rc;

use rayon::prelude::*;

use crate::diffusion::{
    ddim_reverse_step_var, ddpm_reverse_step_to_var, forward_diffuse_var, PurifyConfig,
    SamplerKind, Schedule,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, SegmentFn, Var};
use crate::nets::{ClassifierNet, Denoiser};
use crate::rngtape::{record_tape, NoiseTape, RngKey};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Build the purification subgraph. Returns the purified output and the
/// number of reverse draws consumed (the structural accounting used to show
/// deterministic samplers never touch reverse noise).
///
/// With `checkpoint` set, each reverse step is recorded as a recomputed
/// segment, so the tape stores one boundary value per step instead of every
/// intermediate of the step.
pub fn purify_var<T, D>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &PurifyConfig,
    tape: &NoiseTape<T>,
    s: &Schedule<T>,
    denoiser: &D,
    checkpoint: bool,
) -> Result<(Var, usize)>
where
    T: Scalar,
    D: Denoiser<T> + Clone + 'static,
{
    cfg.validate(s.t_max())?;
    if tape.reverse_noises.len() != cfg.reverse_noise_count() {
        return Err(Error::determinism(format!(
            "tape provides {} reverse draws, sampler consumes {}",
            tape.reverse_noises.len(),
            cfg.reverse_noise_count()
        )));
    }
    if cfg.t_star == 0 {
        return Ok((x, 0));
    }
    if tape.forward_noise.shape() != g.value(x).shape() {
        return Err(Error::shape(format!(
            "forward noise shape {:?} does not match image {:?}",
            tape.forward_noise.shape(),
            g.value(x).shape()
        )));
    }

    let eps_f = g.constant(tape.forward_noise.clone());
    let mut cur = forward_diffuse_var(g, x, eps_f, s.alpha_bar(cfg.t_star))?;

    let sched = Rc::new(s.clone());
    let net = Rc::new(denoiser.clone());
    let mut consumed = 0usize;
    for w in cfg.step_list.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let noise: Option<Tensor<T>> = match cfg.sampler {
            SamplerKind::Ddpm if t_prev > 0 => {
                let n = tape.reverse_noises[consumed].clone();
                consumed += 1;
                Some(n)
            }
            _ => None,
        };
        let sampler = cfg.sampler;
        let (sched_c, net_c) = (sched.clone(), net.clone());
        let step: Rc<SegmentFn<T>> = Rc::new(move |g, ins| {
            let xt = ins[0];
            let eps_pred = net_c.predict(g, xt, t)?;
            match sampler {
                SamplerKind::Ddpm => {
                    let eps_v = noise.as_ref().map(|n| g.constant(n.clone()));
                    ddpm_reverse_step_to_var(g, xt, t, t_prev, eps_pred, eps_v, &sched_c)
                }
                SamplerKind::Ddim => ddim_reverse_step_var(g, xt, t, t_prev, eps_pred, &sched_c),
            }
        });
        cur = if checkpoint {
            g.checkpoint_segment(&[cur], step)?
        } else {
            step(g, &[cur])?
        };
    }
    let out = g.clamp(cur, T::ZERO, T::ONE)?;
    Ok((out, consumed))
}

/// Value-level purification.
pub fn purify<T, D>(
    x: &Tensor<T>,
    cfg: &PurifyConfig,
    tape: &NoiseTape<T>,
    s: &Schedule<T>,
    denoiser: &D,
) -> Result<Tensor<T>>
where
    T: Scalar,
    D: Denoiser<T> + Clone + 'static,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (out, _) = purify_var(&mut g, xv, cfg, tape, s, denoiser, false)?;
    Ok(g.value(out).clone())
}

/// Purify then classify. Returns the predicted label and, when the ground
/// truth is supplied, the cross-entropy against it (zero otherwise).
pub fn classify_purified<T, D>(
    x: &Tensor<T>,
    y: Option<usize>,
    cfg: &PurifyConfig,
    tape: &NoiseTape<T>,
    s: &Schedule<T>,
    denoiser: &D,
    classifier: &ClassifierNet<T>,
) -> Result<(usize, T)>
where
    T: Scalar,
    D: Denoiser<T> + Clone + 'static,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (out, _) = purify_var(&mut g, xv, cfg, tape, s, denoiser, false)?;
    let logits = classifier.logits(&mut g, out)?;
    let label = g.value(logits).argmax();
    let loss = match y {
        Some(y) => {
            let ce = g.softmax_cross_entropy(logits, &[y])?;
            g.value(ce).item()?
        }
        None => T::ZERO,
    };
    Ok((label, loss))
}

/// Attack-facing view of the purify-then-classify map for one sample.
pub trait LossPipeline<T: Scalar>: Sync {
    /// Reverse draws a tape must carry for this pipeline.
    fn reverse_noise_count(&self) -> usize;
    fn image_shape(&self) -> Vec<usize>;
    /// Cross-entropy of the true label under a given tape.
    fn loss(&self, x: &Tensor<T>, y: usize, tape: &NoiseTape<T>) -> Result<T>;
    /// Loss plus its gradient with respect to the input.
    fn loss_and_grad(&self, x: &Tensor<T>, y: usize, tape: &NoiseTape<T>)
        -> Result<(T, Tensor<T>)>;
    fn predict_label(&self, x: &Tensor<T>, tape: &NoiseTape<T>) -> Result<usize>;
}

/// The real pipeline: purify with a denoiser, classify, cross-entropy.
pub struct PurifyPipeline<'a, T: Scalar, D> {
    pub cfg: &'a PurifyConfig,
    pub schedule: &'a Schedule<T>,
    pub denoiser: &'a D,
    pub classifier: &'a ClassifierNet<T>,
    /// Checkpoint each reverse step during gradient computation.
    pub checkpoint: bool,
}

impl<'a, T, D> PurifyPipeline<'a, T, D>
where
    T: Scalar,
    D: Denoiser<T> + Clone + Send + Sync + 'static,
{
    pub fn new(
        cfg: &'a PurifyConfig,
        schedule: &'a Schedule<T>,
        denoiser: &'a D,
        classifier: &'a ClassifierNet<T>,
    ) -> Self {
        PurifyPipeline {
            cfg,
            schedule,
            denoiser,
            classifier,
            checkpoint: true,
        }
    }
}

impl<'a, T, D> LossPipeline<T> for PurifyPipeline<'a, T, D>
where
    T: Scalar,
    D: Denoiser<T> + Clone + Send + Sync + 'static,
{
    fn reverse_noise_count(&self) -> usize {
        self.cfg.reverse_noise_count()
    }

    fn image_shape(&self) -> Vec<usize> {
        vec![self.classifier.input_dim]
    }

    fn loss(&self, x: &Tensor<T>, y: usize, tape: &NoiseTape<T>) -> Result<T> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (out, _) = purify_var(&mut g, xv, self.cfg, tape, self.schedule, self.denoiser, false)?;
        let logits = self.classifier.logits(&mut g, out)?;
        let ce = g.softmax_cross_entropy(logits, &[y])?;
        g.value(ce).item()
    }

    fn loss_and_grad(
        &self,
        x: &Tensor<T>,
        y: usize,
        tape: &NoiseTape<T>,
    ) -> Result<(T, Tensor<T>)> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let (out, _) = purify_var(
            &mut g,
            xv,
            self.cfg,
            tape,
            self.schedule,
            self.denoiser,
            self.checkpoint,
        )?;
        let logits = self.classifier.logits(&mut g, out)?;
        let ce = g.softmax_cross_entropy(logits, &[y])?;
        let loss = g.value(ce).item()?;
        g.backward(ce)?;
        let grad = match g.grad(xv) {
            Some(gr) => gr.clone(),
            // fully clamped input: zero gradient
            None => Tensor::zeros(x.shape()),
        };
        Ok((loss, grad))
    }

    fn predict_label(&self, x: &Tensor<T>, tape: &NoiseTape<T>) -> Result<usize> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (out, _) = purify_var(&mut g, xv, self.cfg, tape, self.schedule, self.denoiser, false)?;
        let logits = self.classifier.logits(&mut g, out)?;
        Ok(g.value(logits).argmax())
    }
}

/// Where repeated evaluations draw their noise.
pub enum EvalTapes<'a, T> {
    /// Fresh tape per (sample, repeat), keyed so that the first `k` repeats
    /// of a sample are shared across different `k` (worst-of-k is then
    /// exactly monotone).
    Fresh { seed: u64 },
    /// One fixed tape per sample, reused for every repeat (the deterministic
    /// DW-both pipeline).
    Fixed(&'a [NoiseTape<T>]),
}

/// Worst-of-k robust accuracy: a sample counts as robust only when every one
/// of `k` stochastic evaluations classifies it correctly.
pub fn repeated_eval_accuracy<T, P>(
    x_set: &Tensor<T>,
    labels: &[usize],
    pipeline: &P,
    k: usize,
    tapes: EvalTapes<'_, T>,
) -> Result<f64>
where
    T: Scalar,
    P: LossPipeline<T>,
{
    if k == 0 {
        return Err(Error::config("repeated evaluation needs k >= 1"));
    }
    if x_set.ndim() != 2 || x_set.shape()[0] != labels.len() {
        return Err(Error::shape("x_set must be [n, d] with matching labels"));
    }
    let n = labels.len();
    let shape = vec![x_set.shape()[1]];
    let rev = pipeline.reverse_noise_count();
    let robust: Vec<bool> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<bool> {
            let x = x_set.row(i)?;
            for j in 0..k {
                let tape = match &tapes {
                    EvalTapes::Fresh { seed } => {
                        let key = RngKey::new(*seed).child(i as u64).child(j as u64);
                        record_tape(key.seed_value(), &shape, rev)
                    }
                    EvalTapes::Fixed(ts) => ts[i].clone(),
                };
                if pipeline.predict_label(&x, &tape)? != labels[i] {
                    return Ok(false);
                }
            }
            Ok(true)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(robust.iter().filter(|&&r| r).count() as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_linear_schedule;
    use crate::nets::DenoiserNet;

    fn setup() -> (Schedule<f64>, DenoiserNet<f64>, ClassifierNet<f64>, Tensor<f64>) {
        let s = make_linear_schedule(20, 1e-3, 0.2).unwrap();
        let denoiser = DenoiserNet::new(16, 24, 4, 20, 11);
        let classifier = ClassifierNet::new(16, 12, 4, 12);
        let x = Tensor::from_fn(&[16], |i| 0.5 + 0.03 * (i as f64 % 5.0));
        (s, denoiser, classifier, x)
    }

    #[test]
    fn t_star_zero_is_identity() {
        let (s, denoiser, _c, x) = setup();
        let cfg = PurifyConfig::new(SamplerKind::Ddpm, 0, 1).unwrap();
        let tape = record_tape(1, &[16], 0);
        let out = purify(&x, &cfg, &tape, &s, &denoiser).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn same_tape_is_bitwise_deterministic() {
        let (s, denoiser, _c, x) = setup();
        let cfg = PurifyConfig::new(SamplerKind::Ddpm, 8, 8).unwrap();
        let tape = record_tape(5, &[16], cfg.reverse_noise_count());
        let a = purify(&x, &cfg, &tape, &s, &denoiser).unwrap();
        let b = purify(&x, &cfg, &tape, &s, &denoiser).unwrap();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn ddim_two_point_list_equals_forward_recover() {
        let (s, denoiser, _c, x) = setup();
        let cfg = PurifyConfig {
            sampler: SamplerKind::Ddim,
            t_star: 8,
            step_list: vec![8, 0],
        };
        let tape = record_tape(9, &[16], 0);
        let got = purify(&x, &cfg, &tape, &s, &denoiser).unwrap();

        // independent composition: forward_diffuse then one-step recovery
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let ev = g.constant(tape.forward_noise.clone());
        let xt = forward_diffuse_var(&mut g, xv, ev, s.alpha_bar(8)).unwrap();
        let pred = denoiser.predict(&mut g, xt, 8).unwrap();
        let rec =
            crate::diffusion::recover_onestep_var(&mut g, xt, pred, s.alpha_bar(8)).unwrap();
        let clamped = g.clamp(rec, 0.0, 1.0).unwrap();
        let want = g.value(clamped).clone();

        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn ddim_consumes_no_reverse_draws() {
        let (s, denoiser, _c, x) = setup();
        let cfg = PurifyConfig::new(SamplerKind::Ddim, 8, 4).unwrap();
        let tape = record_tape(3, &[16], 0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (_, consumed) = purify_var(&mut g, xv, &cfg, &tape, &s, &denoiser, false).unwrap();
        assert_eq!(consumed, 0);
    }

    #[test]
    fn ddpm_draw_accounting() {
        let (s, denoiser, _c, x) = setup();
        let cfg = PurifyConfig::new(SamplerKind::Ddpm, 8, 8).unwrap();
        let tape = record_tape(3, &[16], cfg.reverse_noise_count());
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (_, consumed) = purify_var(&mut g, xv, &cfg, &tape, &s, &denoiser, false).unwrap();
        assert_eq!(consumed, 7);
    }

    #[test]
    fn tape_step_mismatch_rejected() {
        let (s, denoiser, _c, x) = setup();
        let cfg = PurifyConfig::new(SamplerKind::Ddpm, 8, 8).unwrap();
        let tape = record_tape(3, &[16], 2); // needs 7
        assert!(matches!(
            purify(&x, &cfg, &tape, &s, &denoiser),
            Err(Error::Determinism(_))
        ));
    }

    #[test]
    fn output_stays_in_pixel_range() {
        let (s, denoiser, _c, x) = setup();
        let cfg = PurifyConfig::new(SamplerKind::Ddpm, 12, 12).unwrap();
        let tape = record_tape(17, &[16], cfg.reverse_noise_count());
        let out = purify(&x, &cfg, &tape, &s, &denoiser).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn classify_stable_under_fixed_tape() {
        let (s, denoiser, classifier, x) = setup();
        let cfg = PurifyConfig::new(SamplerKind::Ddpm, 8, 8).unwrap();
        let tape = record_tape(21, &[16], cfg.reverse_noise_count());
        let (l1, v1) = classify_purified(&x, Some(1), &cfg, &tape, &s, &denoiser, &classifier).unwrap();
        let (l2, v2) = classify_purified(&x, Some(1), &cfg, &tape, &s, &denoiser, &classifier).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(v1.to_bits(), v2.to_bits());
    }

    #[test]
    fn classifier_only_path_at_t_star_zero() {
        let (s, denoiser, classifier, x) = setup();
        let cfg = PurifyConfig::new(SamplerKind::Ddim, 0, 1).unwrap();
        let tape = record_tape(2, &[16], 0);
        let (label, _) =
            classify_purified(&x, None, &cfg, &tape, &s, &denoiser, &classifier).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let logits = classifier.logits(&mut g, xv).unwrap();
        assert_eq!(label, g.value(logits).argmax());
    }

    #[test]
    fn worst_of_k_monotone_and_fixed_invariant() {
        let (s, denoiser, classifier, _x) = setup();
        let cfg = PurifyConfig::new(SamplerKind::Ddpm, 8, 8).unwrap();
        let pipe = PurifyPipeline::new(&cfg, &s, &denoiser, &classifier);
        // batch of slightly varied inputs
        let xs = Tensor::from_fn(&[6, 16], |i| 0.4 + 0.02 * ((i % 7) as f64));
        let mut g = Graph::new();
        let xv = g.constant(xs.clone());
        let logits = classifier.logits(&mut g, xv).unwrap();
        let labels: Vec<usize> = (0..6)
            .map(|i| g.value(logits).row(i).unwrap().argmax())
            .collect();

        let mut prev = f64::INFINITY;
        for k in [1usize, 5, 20] {
            let acc =
                repeated_eval_accuracy(&xs, &labels, &pipe, k, EvalTapes::Fresh { seed: 3 })
                    .unwrap();
            assert!(acc <= prev + 1e-12, "k={k}: {acc} > {prev}");
            prev = acc;
        }

        let fixed: Vec<NoiseTape<f64>> = (0..6)
            .map(|i| record_tape(100 + i as u64, &[16], cfg.reverse_noise_count()))
            .collect();
        let a1 = repeated_eval_accuracy(&xs, &labels, &pipe, 1, EvalTapes::Fixed(&fixed)).unwrap();
        let a20 =
            repeated_eval_accuracy(&xs, &labels, &pipe, 20, EvalTapes::Fixed(&fixed)).unwrap();
        assert_eq!(a1, a20);
    }
}
