//! Gradient-based attack harness over the full pipeline: FGSM/PGD with
//! l-inf and l2 projection, EoT gradient estimation, deterministic
//! white-box attacks at every knowledge level, DW_semi-k, gradient
//! similarity, and loss-landscape grids.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::purify::LossPipeline;
use crate::rngtape::{knowledge_view, record_tape, KnowledgeSetting, NoiseTape, RngKey};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackNorm {
    Linf,
    L2,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackConfig {
    pub norm: AttackNorm,
    /// Perturbation budget.
    pub radius: f64,
    pub step_size: f64,
    pub steps: usize,
    pub eot_samples: usize,
    pub knowledge: KnowledgeSetting,
    /// Start PGD from a random point inside the ball instead of the input.
    #[serde(default)]
    pub random_start: bool,
    /// Seed for attacker-side draws (fresh tapes, random starts).
    pub seed: u64,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius <= 0.0 {
            return Err(Error::config("attack radius must be positive"));
        }
        if self.step_size <= 0.0 {
            return Err(Error::config("attack step size must be positive"));
        }
        if self.steps < 1 {
            return Err(Error::config("attack needs at least one step"));
        }
        if self.eot_samples < 1 {
            return Err(Error::config("eot_samples must be >= 1"));
        }
        self.knowledge.validate()
    }
}

/// Attack record for one sample.
#[derive(Clone, Debug)]
pub struct SampleAttack<T> {
    pub adversarial: Tensor<T>,
    /// Perturbation snapshots, starting point included (`steps + 1` entries).
    pub trajectory: Vec<Tensor<T>>,
    /// Attack-side loss estimate at each snapshot.
    pub losses: Vec<T>,
    pub success: bool,
    /// EoT-averaged gradient at the starting point (the attack direction
    /// used by similarity analysis).
    pub grad_record: Tensor<T>,
}

/// Batch attack record, assembled in sample order.
#[derive(Clone, Debug)]
pub struct AttackReport<T> {
    pub adversarial: Tensor<T>,
    pub trajectories: Vec<Vec<Tensor<T>>>,
    pub losses: Vec<Vec<T>>,
    pub success: Vec<bool>,
    pub grad_records: Vec<Tensor<T>>,
}

impl<T: Scalar> AttackReport<T> {
    pub fn from_samples(samples: Vec<SampleAttack<T>>) -> Result<Self> {
        let adv: Vec<Tensor<T>> = samples.iter().map(|s| s.adversarial.clone()).collect();
        Ok(AttackReport {
            adversarial: Tensor::stack_rows(&adv)?,
            trajectories: samples.iter().map(|s| s.trajectory.clone()).collect(),
            losses: samples
                .iter()
                .map(|s| s.losses.clone())
                .collect(),
            success: samples.iter().map(|s| s.success).collect(),
            grad_records: samples.into_iter().map(|s| s.grad_record).collect(),
        })
    }

    pub fn robust_accuracy(&self) -> f64 {
        let n = self.success.len();
        self.success.iter().filter(|&&s| !s).count() as f64 / n as f64
    }

    /// JSON metadata next to a DBPC tensor container (`<stem>.json`,
    /// `<stem>.dbpc`).
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let n = self.success.len();
        let steps1 = self.trajectories.first().map(|t| t.len()).unwrap_or(0);
        let d = self.adversarial.shape()[1];
        let meta = serde_json::json!({
            "samples": n,
            "snapshots": steps1,
            "success": self.success,
            "losses": self.losses.iter().map(|row| row.iter().map(|v| v.to_f64()).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "tensors": ["adversarial", "trajectories", "grad_records"],
        });
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&meta).unwrap())?;

        let mut traj_flat = Vec::with_capacity(n * steps1 * d);
        for t in &self.trajectories {
            for snap in t {
                traj_flat.extend_from_slice(snap.data());
            }
        }
        let traj = Tensor::new(vec![n, steps1, d], traj_flat)?;
        let grads = Tensor::stack_rows(&self.grad_records)?;
        io::save_container(
            &dir.join(format!("{stem}.dbpc")),
            &serde_json::json!({"tensors": ["adversarial", "trajectories", "grad_records"]})
                .to_string(),
            &[&self.adversarial, &traj, &grads],
        )
    }
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::ZERO {
        T::ONE
    } else if v < T::ZERO {
        -T::ONE
    } else {
        T::ZERO
    }
}

/// Project `delta` into the configured norm ball.
fn project_norm<T: Scalar>(delta: &mut Tensor<T>, norm: AttackNorm, radius: f64) {
    let r = T::from_f64(radius);
    match norm {
        AttackNorm::Linf => {
            for v in delta.data_mut() {
                *v = (*v).max(-r).min(r);
            }
        }
        AttackNorm::L2 => {
            let n = delta.l2_norm();
            if n.to_f64() > radius {
                let scale = r / n;
                for v in delta.data_mut() {
                    *v = *v * scale;
                }
            }
        }
    }
}

/// Clamp `x0 + delta` into the pixel box, rewriting `delta`.
fn clip_box<T: Scalar>(x0: &Tensor<T>, delta: &mut Tensor<T>) {
    for (d, &x) in delta.data_mut().iter_mut().zip(x0.data()) {
        let moved = (x + *d).max(T::ZERO).min(T::ONE);
        *d = moved - x;
    }
}

/// Mean loss and mean gradient of the pipeline over a fixed tape list.
pub fn eot_loss_grad<T, P>(
    pipe: &P,
    x: &Tensor<T>,
    y: usize,
    tapes: &[NoiseTape<T>],
) -> Result<(T, Tensor<T>)>
where
    T: Scalar,
    P: LossPipeline<T>,
{
    if tapes.is_empty() {
        return Err(Error::config("EoT needs at least one tape"));
    }
    let mut loss_sum = T::ZERO;
    let mut grad_sum = Tensor::zeros(x.shape());
    for tape in tapes {
        let (l, g) = pipe.loss_and_grad(x, y, tape)?;
        loss_sum += l;
        grad_sum = grad_sum.add_t(&g)?;
    }
    let inv = T::from_f64(1.0 / tapes.len() as f64);
    Ok((loss_sum * inv, grad_sum.scale(inv)))
}

/// EoT gradient estimate with `n` fresh stochastic realizations.
pub fn eot_gradient<T, P>(
    pipe: &P,
    x: &Tensor<T>,
    y: usize,
    n: usize,
    seed: u64,
) -> Result<Tensor<T>>
where
    T: Scalar,
    P: LossPipeline<T>,
{
    let tapes = fresh_tapes(pipe, n, RngKey::new(seed))?;
    Ok(eot_loss_grad(pipe, x, y, &tapes)?.1)
}

fn fresh_tapes<T, P>(pipe: &P, n: usize, key: RngKey) -> Result<Vec<NoiseTape<T>>>
where
    T: Scalar,
    P: LossPipeline<T>,
{
    if n == 0 {
        return Err(Error::config("EoT sample count must be >= 1"));
    }
    let shape = pipe.image_shape();
    let rev = pipe.reverse_noise_count();
    Ok((0..n)
        .map(|j| record_tape(key.child(j as u64).seed_value(), &shape, rev))
        .collect())
}

/// Iterated projected-gradient core over an arbitrary per-step tape source.
fn pgd_core<T, P>(
    pipe: &P,
    x0: &Tensor<T>,
    y: usize,
    cfg: &AttackConfig,
    tapes_for_step: impl Fn(usize) -> Result<Vec<NoiseTape<T>>>,
    eval_tape: &NoiseTape<T>,
) -> Result<SampleAttack<T>>
where
    T: Scalar,
    P: LossPipeline<T>,
{
    cfg.validate()?;
    let mut delta = Tensor::zeros(x0.shape());
    if cfg.random_start {
        let key = RngKey::new(cfg.seed).child(0xD1CE);
        delta = Tensor::from_fn(x0.shape(), |i| {
            T::from_f64((key.uniform_at(i as u64) * 2.0 - 1.0) * cfg.radius)
        });
        project_norm(&mut delta, cfg.norm, cfg.radius);
        clip_box(x0, &mut delta);
    }

    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut grad_record: Option<Tensor<T>> = None;

    let mut x = x0.add_t(&delta)?;
    trajectory.push(delta.clone());
    for step in 0..cfg.steps {
        let tapes = tapes_for_step(step)?;
        let (loss, grad) = eot_loss_grad(pipe, &x, y, &tapes)?;
        losses.push(loss);
        if grad_record.is_none() {
            grad_record = Some(grad.clone());
        }
        let step_len = T::from_f64(cfg.step_size);
        let dir = match cfg.norm {
            AttackNorm::Linf => grad.map(sign),
            AttackNorm::L2 => {
                let n = grad.l2_norm();
                if n.to_f64() == 0.0 {
                    grad.clone()
                } else {
                    grad.scale(T::ONE / n)
                }
            }
        };
        delta = delta.zip(&dir, |d, s| d + step_len * s)?;
        project_norm(&mut delta, cfg.norm, cfg.radius);
        clip_box(x0, &mut delta);
        x = x0.add_t(&delta)?;
        trajectory.push(delta.clone());
    }
    // loss estimate at the final iterate
    let tapes = tapes_for_step(cfg.steps)?;
    let mut final_loss = T::ZERO;
    for t in &tapes {
        final_loss += pipe.loss(&x, y, t)?;
    }
    losses.push(final_loss * T::from_f64(1.0 / tapes.len() as f64));

    let success = pipe.predict_label(&x, eval_tape)? != y;
    Ok(SampleAttack {
        adversarial: x,
        trajectory,
        losses,
        success,
        grad_record: grad_record.expect("steps >= 1"),
    })
}

/// White-box PGD: fresh stochastic realizations per EoT sample, success
/// judged under the victim's true tape.
pub fn pgd<T, P>(
    pipe: &P,
    x0: &Tensor<T>,
    y: usize,
    cfg: &AttackConfig,
    victim_tape: &NoiseTape<T>,
) -> Result<SampleAttack<T>>
where
    T: Scalar,
    P: LossPipeline<T>,
{
    if cfg.knowledge != KnowledgeSetting::WhiteBox {
        return Err(Error::config(
            "pgd runs the white-box setting; use dw_attack for DW settings",
        ));
    }
    let key = RngKey::new(cfg.seed);
    pgd_core(
        pipe,
        x0,
        y,
        cfg,
        |step| fresh_tapes(pipe, cfg.eot_samples, key.child(step as u64)),
        victim_tape,
    )
}

/// Deterministic white-box attack: known tape entries pinned to the victim's
/// values, unknown entries resampled fresh per EoT sample and per step.
/// Success is always judged under the true victim tape.
pub fn dw_attack<T, P>(
    pipe: &P,
    x0: &Tensor<T>,
    y: usize,
    victim_tape: &NoiseTape<T>,
    setting: KnowledgeSetting,
    cfg: &AttackConfig,
) -> Result<SampleAttack<T>>
where
    T: Scalar,
    P: LossPipeline<T>,
{
    match setting {
        KnowledgeSetting::DWFwd | KnowledgeSetting::DWRev | KnowledgeSetting::DWBoth => {}
        KnowledgeSetting::WhiteBox => {
            return Err(Error::config("white-box attacks go through pgd"))
        }
        KnowledgeSetting::DWSemi(_) => {
            return Err(Error::config("DW_semi attacks go through dw_semi_attack"))
        }
    }
    let view = knowledge_view(victim_tape, setting)?;
    let key = RngKey::new(cfg.seed);
    pgd_core(
        pipe,
        x0,
        y,
        cfg,
        |step| {
            Ok((0..cfg.eot_samples)
                .map(|j| view.materialize(key.child(step as u64).child(j as u64)))
                .collect())
        },
        victim_tape,
    )
}

/// DW_semi-k attack: the gradient is the exact mean over all `k` candidate
/// tapes at every step; the victim evaluates with `tapes[victim_idx]`.
pub fn dw_semi_attack<T, P>(
    pipe: &P,
    x0: &Tensor<T>,
    y: usize,
    tapes: &[NoiseTape<T>],
    cfg: &AttackConfig,
    victim_idx: usize,
) -> Result<SampleAttack<T>>
where
    T: Scalar,
    P: LossPipeline<T>,
{
    if tapes.is_empty() {
        return Err(Error::config("DW_semi needs a non-empty tape set"));
    }
    if victim_idx >= tapes.len() {
        return Err(Error::config("victim index outside semi tape set"));
    }
    pgd_core(
        pipe,
        x0,
        y,
        cfg,
        |_| Ok(tapes.to_vec()),
        &tapes[victim_idx],
    )
}

/// Batch white-box PGD, parallel over samples, assembled by index.
pub fn pgd_batch<T, P>(
    pipe: &P,
    xs: &Tensor<T>,
    ys: &[usize],
    cfg: &AttackConfig,
    victim_tapes: &[NoiseTape<T>],
) -> Result<AttackReport<T>>
where
    T: Scalar,
    P: LossPipeline<T>,
{
    batch_attack(xs, ys, |i, x| {
        let mut c = cfg.clone();
        c.seed = RngKey::new(cfg.seed).child(i as u64).seed_value();
        pgd(pipe, &x, ys[i], &c, &victim_tapes[i])
    })
}

pub fn dw_attack_batch<T, P>(
    pipe: &P,
    xs: &Tensor<T>,
    ys: &[usize],
    setting: KnowledgeSetting,
    cfg: &AttackConfig,
    victim_tapes: &[NoiseTape<T>],
) -> Result<AttackReport<T>>
where
    T: Scalar,
    P: LossPipeline<T>,
{
    batch_attack(xs, ys, |i, x| {
        let mut c = cfg.clone();
        c.seed = RngKey::new(cfg.seed).child(i as u64).seed_value();
        dw_attack(pipe, &x, ys[i], &victim_tapes[i], setting, &c)
    })
}

pub fn dw_semi_attack_batch<T, P>(
    pipe: &P,
    xs: &Tensor<T>,
    ys: &[usize],
    tape_sets: &[Vec<NoiseTape<T>>],
    victim_indices: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackReport<T>>
where
    T: Scalar,
    P: LossPipeline<T>,
{
    batch_attack(xs, ys, |i, x| {
        let mut c = cfg.clone();
        c.seed = RngKey::new(cfg.seed).child(i as u64).seed_value();
        dw_semi_attack(pipe, &x, ys[i], &tape_sets[i], &c, victim_indices[i])
    })
}

fn batch_attack<T: Scalar>(
    xs: &Tensor<T>,
    ys: &[usize],
    run: impl Fn(usize, Tensor<T>) -> Result<SampleAttack<T>> + Sync,
) -> Result<AttackReport<T>> {
    if xs.ndim() != 2 || xs.shape()[0] != ys.len() {
        return Err(Error::shape("batch attack needs [n, d] inputs and n labels"));
    }
    let samples: Vec<SampleAttack<T>> = (0..ys.len())
        .into_par_iter()
        .map(|i| run(i, xs.row(i)?))
        .collect::<Result<Vec<_>>>()?;
    AttackReport::from_samples(samples)
}

/// Cosine similarity between two attack directions.
pub fn gradient_similarity<T: Scalar>(g1: &Tensor<T>, g2: &Tensor<T>) -> Result<f64> {
    if g1.shape() != g2.shape() {
        return Err(Error::shape("similarity needs equal shapes"));
    }
    let n1 = g1.l2_norm().to_f64();
    let n2 = g2.l2_norm().to_f64();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::numeric("cosine similarity of a zero vector"));
    }
    Ok(g1.dot(g2)?.to_f64() / (n1 * n2))
}

/// Loss surface over the plane spanned by an attack direction and the
/// orthogonalized component of a second one, evaluated under a fixed tape.
pub struct LandscapeGrid<T> {
    /// Coordinates along `dir1` / `dir2_orth` (both in direction units).
    pub a_coords: Vec<f64>,
    pub b_coords: Vec<f64>,
    /// Row-major `[resolution, resolution]` losses, `a` indexing rows.
    pub losses: Vec<T>,
    pub dir1: Tensor<T>,
    pub dir2_orth: Tensor<T>,
}

impl<T: Scalar> LandscapeGrid<T> {
    /// Plane coordinates of a perturbation (projection; exact for points in
    /// the plane, e.g. both attacks' endpoints).
    pub fn project(&self, delta: &Tensor<T>) -> Result<(f64, f64)> {
        let d1 = self.dir1.dot(&self.dir1)?.to_f64();
        let d2 = self.dir2_orth.dot(&self.dir2_orth)?.to_f64();
        Ok((
            delta.dot(&self.dir1)?.to_f64() / d1,
            delta.dot(&self.dir2_orth)?.to_f64() / d2,
        ))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "a,b,loss")?;
        let res = self.b_coords.len();
        for (i, &a) in self.a_coords.iter().enumerate() {
            for (j, &b) in self.b_coords.iter().enumerate() {
                writeln!(w, "{},{},{}", a, b, self.losses[i * res + j].to_f64())?;
            }
        }
        Ok(())
    }
}

/// Evaluate the pipeline loss over `[-extent, extent]^2` in the plane of
/// `dir1` and `dir2` (Gram-Schmidt-orthogonalized against `dir1`).
#[allow(clippy::too_many_arguments)]
pub fn landscape_grid<T, P>(
    pipe: &P,
    x: &Tensor<T>,
    y: usize,
    dir1: &Tensor<T>,
    dir2: &Tensor<T>,
    extent: f64,
    resolution: usize,
    tape: &NoiseTape<T>,
) -> Result<LandscapeGrid<T>>
where
    T: Scalar,
    P: LossPipeline<T>,
{
    if resolution < 2 {
        return Err(Error::config("landscape resolution must be >= 2"));
    }
    let n1 = dir1.l2_norm().to_f64();
    let n2 = dir2.l2_norm().to_f64();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::numeric("landscape direction has zero norm"));
    }
    let coef = dir2.dot(dir1)? / dir1.dot(dir1)?;
    let dir2_orth = dir2.zip(dir1, |b, a| b - coef * a)?;
    if dir2_orth.l2_norm().to_f64() < 1e-9 * n2 {
        return Err(Error::numeric(
            "landscape directions are parallel after orthogonalization",
        ));
    }

    let coords: Vec<f64> = (0..resolution)
        .map(|i| -extent + 2.0 * extent * i as f64 / (resolution - 1) as f64)
        .collect();
    let cells: Vec<(usize, usize)> = (0..resolution)
        .flat_map(|i| (0..resolution).map(move |j| (i, j)))
        .collect();
    let losses: Vec<T> = cells
        .into_par_iter()
        .map(|(i, j)| {
            let (a, b) = (coords[i], coords[j]);
            let point = Tensor::from_fn(x.shape(), |k| {
                x.data()[k]
                    + T::from_f64(a) * dir1.data()[k]
                    + T::from_f64(b) * dir2_orth.data()[k]
            });
            pipe.loss(&point, y, tape)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LandscapeGrid {
        a_coords: coords.clone(),
        b_coords: coords,
        losses,
        dir1: dir1.clone(),
        dir2_orth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Mock pipeline whose gradient is a fixed vector, optionally alternating
    /// in sign per call.
    struct MockPipe {
        grad: Vec<f64>,
        alternate: bool,
        calls: AtomicUsize,
        loss: f64,
    }

    impl MockPipe {
        fn constant(grad: Vec<f64>) -> Self {
            MockPipe {
                grad,
                alternate: false,
                calls: AtomicUsize::new(0),
                loss: 1.0,
            }
        }
        fn alternating(grad: Vec<f64>) -> Self {
            MockPipe {
                grad,
                alternate: true,
                calls: AtomicUsize::new(0),
                loss: 1.0,
            }
        }
    }

    impl LossPipeline<f64> for MockPipe {
        fn reverse_noise_count(&self) -> usize {
            0
        }
        fn image_shape(&self) -> Vec<usize> {
            vec![self.grad.len()]
        }
        fn loss(&self, _x: &Tensor<f64>, _y: usize, _t: &NoiseTape<f64>) -> Result<f64> {
            Ok(self.loss)
        }
        fn loss_and_grad(
            &self,
            _x: &Tensor<f64>,
            _y: usize,
            _t: &NoiseTape<f64>,
        ) -> Result<(f64, Tensor<f64>)> {
            let k = self.calls.fetch_add(1, Ordering::SeqCst);
            let s = if self.alternate && k % 2 == 1 { -1.0 } else { 1.0 };
            Ok((
                self.loss,
                Tensor::new(vec![self.grad.len()], self.grad.iter().map(|g| g * s).collect())?,
            ))
        }
        fn predict_label(&self, _x: &Tensor<f64>, _t: &NoiseTape<f64>) -> Result<usize> {
            Ok(0)
        }
    }

    fn cfg(norm: AttackNorm, steps: usize) -> AttackConfig {
        AttackConfig {
            norm,
            radius: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps,
            eot_samples: 1,
            knowledge: KnowledgeSetting::WhiteBox,
            random_start: false,
            seed: 7,
        }
    }

    #[test]
    fn eot_single_sample_is_single_gradient() {
        let pipe = MockPipe::constant(vec![0.5, -0.25]);
        let x = Tensor::zeros(&[2]);
        let g = eot_gradient(&pipe, &x, 0, 1, 3).unwrap();
        assert_eq!(g.data(), &[0.5, -0.25]);
    }

    #[test]
    fn eot_alternating_gradients_average_to_zero() {
        let pipe = MockPipe::alternating(vec![1.0, -2.0]);
        let x = Tensor::zeros(&[2]);
        let g = eot_gradient(&pipe, &x, 0, 4, 3).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gradient_leaves_input_unchanged() {
        let pipe = MockPipe::constant(vec![0.0, 0.0, 0.0]);
        let x = Tensor::new(vec![3], vec![0.2, 0.5, 0.8]).unwrap();
        let tape = record_tape(1, &[3], 0);
        let r = pgd(&pipe, &x, 0, &cfg(AttackNorm::Linf, 5), &tape).unwrap();
        assert_eq!(r.adversarial, x);
        assert_eq!(r.trajectory.len(), 6);
    }

    #[test]
    fn one_linf_step_moves_by_step_size_clipped() {
        let pipe = MockPipe::constant(vec![3.0, 3.0, 3.0]);
        let x = Tensor::new(vec![3], vec![0.2, 0.5, 0.999]).unwrap();
        let c = cfg(AttackNorm::Linf, 1);
        let tape = record_tape(1, &[3], 0);
        let r = pgd(&pipe, &x, 0, &c, &tape).unwrap();
        let step = c.step_size.min(c.radius);
        assert!((r.adversarial.data()[0] - (0.2 + step)).abs() < 1e-12);
        assert!((r.adversarial.data()[1] - (0.5 + step)).abs() < 1e-12);
        // clipped to the pixel box
        assert!((r.adversarial.data()[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_projection_lands_exactly_on_sphere() {
        let pipe = MockPipe::constant(vec![1.0; 4]);
        let x = Tensor::new(vec![4], vec![0.5; 4]).unwrap();
        let mut c = cfg(AttackNorm::L2, 10);
        c.radius = 0.05;
        c.step_size = 0.04;
        let tape = record_tape(1, &[4], 0);
        let r = pgd(&pipe, &x, 0, &c, &tape).unwrap();
        let d = r.adversarial.sub_t(&x).unwrap().l2_norm();
        assert!((d - 0.05).abs() < 1e-6, "|delta| = {d}");
    }

    #[test]
    fn budget_feasibility_all_norms() {
        for norm in [AttackNorm::Linf, AttackNorm::L2] {
            let pipe = MockPipe::alternating(vec![0.9, -1.4, 0.3, 2.0, -0.1]);
            let x = Tensor::new(vec![5], vec![0.05, 0.2, 0.5, 0.9, 0.99]).unwrap();
            let mut c = cfg(norm, 20);
            c.random_start = true;
            let tape = record_tape(1, &[5], 0);
            let r = pgd(&pipe, &x, 0, &c, &tape).unwrap();
            let delta = r.adversarial.sub_t(&x).unwrap();
            let within = match norm {
                AttackNorm::Linf => delta.linf_norm() <= c.radius + 1e-6,
                AttackNorm::L2 => delta.l2_norm() <= c.radius + 1e-6,
            };
            assert!(within);
            assert!(r
                .adversarial
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn pgd_rejects_dw_settings() {
        let pipe = MockPipe::constant(vec![1.0]);
        let x = Tensor::zeros(&[1]);
        let mut c = cfg(AttackNorm::Linf, 1);
        c.knowledge = KnowledgeSetting::DWBoth;
        let tape = record_tape(1, &[1], 0);
        assert!(matches!(pgd(&pipe, &x, 0, &c, &tape), Err(Error::Config(_))));
        assert!(matches!(
            dw_attack(&pipe, &x, 0, &tape, KnowledgeSetting::WhiteBox, &c),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn similarity_basics() {
        let g = Tensor::new(vec![3], vec![1.0, 2.0, -1.0]).unwrap();
        assert!((gradient_similarity(&g, &g).unwrap() - 1.0).abs() < 1e-12);
        let e1 = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        assert!(gradient_similarity(&e1, &e2).unwrap().abs() < 1e-12);
        let z = Tensor::zeros(&[2]);
        assert!(matches!(
            gradient_similarity(&e1, &z),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn landscape_center_and_orthogonality() {
        let pipe = MockPipe::constant(vec![0.0; 4]);
        let x = Tensor::new(vec![4], vec![0.5; 4]).unwrap();
        let d1 = Tensor::new(vec![4], vec![1.0, 0.5, -0.25, 0.0]).unwrap();
        let d2 = Tensor::new(vec![4], vec![0.5, 1.0, 0.5, 1.0]).unwrap();
        let tape = record_tape(1, &[4], 0);
        let grid = landscape_grid(&pipe, &x, 0, &d1, &d2, 1.0, 5, &tape).unwrap();
        // center cell equals base loss
        let mid = grid.losses[2 * 5 + 2];
        assert_eq!(mid, 1.0);
        assert!(grid.dir2_orth.dot(&d1).unwrap().abs() < 1e-9);
        // endpoint of dir1 projects to (1, 0)
        let (a, b) = grid.project(&d1).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && b.abs() < 1e-12);
        // parallel directions are rejected
        assert!(matches!(
            landscape_grid(&pipe, &x, 0, &d1, &d1, 1.0, 5, &tape),
            Err(Error::Numeric(_))
        ));
    }
}
