//! Training, evaluation, and analysis runners, plus the file-level entry
//! points the CLI calls. Every run is a pure function of its config: all
//! randomness flows through counter keys, batch reductions happen in sample
//! order, and worker pools only parallelize per-sample work.

use std::path::Path;

use rayon::prelude::*;

use crate::addt::{addt_train_step, AddtConfig};
use crate::attacks::{
    dw_attack_batch, dw_semi_attack_batch, eot_gradient, gradient_similarity, landscape_grid,
    pgd_batch, AttackConfig, AttackNorm, AttackReport,
};
use crate::diffusion::{make_linear_schedule, PurifyConfig, Schedule};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::lab::config::{ExperimentConfig, Precision};
use crate::lab::dataset::{synth_dataset_with_amp, ToyDataset};
use crate::lab::stats::{loglog_slope, spearman_rho};
use crate::nets::{
    load_classifier, load_denoiser, save_classifier, save_denoiser, ClassifierNet, DenoiserNet,
};
use crate::optim::Adam;
use crate::purify::{classify_purified, LossPipeline, PurifyPipeline};
use crate::rngtape::{record_tape, sample_semi_set, semi_victim_index, KnowledgeSetting, NoiseTape, RngKey};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DENOISER_FILE: &str = "denoiser.dbpc";
pub const DENOISER_ADDT_FILE: &str = "denoiser_addt.dbpc";
pub const CLASSIFIER_FILE: &str = "classifier.dbpc";

#[derive(Clone, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: Option<f64>,
    pub eval_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AddtRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub cgpo_objective: f64,
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub setting: String,
    pub norm: AttackNorm,
    pub radius: f64,
    pub steps: usize,
    pub eot: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,norm,radius,steps,eot,accuracy,mean_loss,seed\n");
        for r in &self.rows {
            let norm = match r.norm {
                AttackNorm::Linf => "linf",
                AttackNorm::L2 => "l2",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.setting, norm, r.radius, r.steps, r.eot, r.accuracy, r.mean_loss, r.seed
            ));
        }
        out
    }

    pub fn accuracy(&self, setting: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.setting == setting).map(|r| r.accuracy)
    }

    pub fn mean_loss(&self, setting: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.setting == setting).map(|r| r.mean_loss)
    }
}

fn shuffle_indices(n: usize, key: RngKey) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = key.child(i as u64).index_below(i + 1);
        idx.swap(i, j);
    }
    idx
}

/// Training timestep draw: with probability `t_bias` from `1..=t_star`,
/// otherwise from the full `1..=T`.
fn draw_timestep(cfg: &ExperimentConfig, key: RngKey) -> usize {
    let full = key.child(0).index_below(cfg.schedule.t_max) + 1;
    if cfg.train.t_bias <= 0.0 {
        return full;
    }
    if key.child(1).uniform_at(0) < cfg.train.t_bias {
        key.child(2).index_below(cfg.t_star().max(1)) + 1
    } else {
        full
    }
}

fn diverged(e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::training(format!("training diverged: {m}")),
        other => other,
    }
}

pub fn schedule_from<T: Scalar>(cfg: &ExperimentConfig) -> Result<Schedule<T>> {
    make_linear_schedule(
        cfg.schedule.t_max,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )
}

pub fn purify_config_from(cfg: &ExperimentConfig) -> Result<PurifyConfig> {
    PurifyConfig::new(cfg.purify.sampler, cfg.t_star(), cfg.purify.nfe)
}

fn dataset_from<T: Scalar>(cfg: &ExperimentConfig) -> Result<(ToyDataset<T>, ToyDataset<T>)> {
    let ds = synth_dataset_with_amp::<T>(
        cfg.dataset.seed,
        cfg.dataset.n_train + cfg.dataset.n_eval,
        cfg.dataset.image_size,
        cfg.dataset.num_classes,
        cfg.dataset.noise_std,
        cfg.dataset.signal_amp,
        cfg.dataset.texture_amp,
        cfg.dataset.orient_jitter,
    )?;
    ds.split(cfg.dataset.n_train)
}

fn batch_rows<T: Scalar>(xs: &Tensor<T>, order: &[usize]) -> Result<Tensor<T>> {
    let rows: Vec<Tensor<T>> = order.iter().map(|&i| xs.row(i)).collect::<Result<_>>()?;
    Tensor::stack_rows(&rows)
}

pub fn classifier_accuracy<T: Scalar>(
    net: &ClassifierNet<T>,
    xs: &Tensor<T>,
    ys: &[usize],
) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(xs.clone());
    let logits = net.logits(&mut g, xv)?;
    let lv = g.value(logits);
    let correct = ys
        .iter()
        .enumerate()
        .filter(|(i, &y)| lv.row(*i).map(|r| r.argmax() == y).unwrap_or(false))
        .count();
    Ok(correct as f64 / ys.len() as f64)
}

/// Train the toy classifier on the synthetic train split.
pub fn train_classifier_t<T: Scalar>(
    cfg: &ExperimentConfig,
) -> Result<(ClassifierNet<T>, Vec<EpochRow>)> {
    let (train, eval) = dataset_from::<T>(cfg)?;
    let key = RngKey::new(cfg.train.seed).child(1);
    let mut net = ClassifierNet::<T>::new(
        cfg.image_dim(),
        cfg.train.classifier_hidden,
        cfg.dataset.num_classes,
        key.child(0).seed_value(),
    );
    let mut opt = Adam::for_params(cfg.train.lr_classifier, &net.params());
    let mut rows = Vec::new();
    for epoch in 0..cfg.train.classifier_epochs {
        let order = shuffle_indices(train.len(), key.child(1).child(epoch as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.train.batch_size) {
            let xb = batch_rows(&train.images, chunk)?;
            let yb: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::new();
            let params = net.insert_params(&mut g, true);
            let xv = g.constant(xb);
            let logits = net.forward_with(&mut g, &params, xv)?;
            let ce = g.softmax_cross_entropy(logits, &yb).map_err(diverged)?;
            loss_sum += g.value(ce).item()?.to_f64();
            batches += 1.0;
            g.backward(ce).map_err(diverged)?;
            let grads: Vec<Tensor<T>> = params
                .iter()
                .zip(net.params())
                .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            opt.step(net.params_mut(), &grads)?;
        }
        rows.push(EpochRow {
            epoch,
            loss: loss_sum / batches.max(1.0),
            train_acc: Some(classifier_accuracy(&net, &train.images, &train.labels)?),
            eval_acc: Some(classifier_accuracy(&net, &eval.images, &eval.labels)?),
        });
    }
    Ok((net, rows))
}

/// Train the denoiser with the standard noise-prediction objective.
pub fn train_diffusion_t<T: Scalar>(
    cfg: &ExperimentConfig,
) -> Result<(DenoiserNet<T>, Vec<EpochRow>)> {
    let (train, _) = dataset_from::<T>(cfg)?;
    let s = schedule_from::<T>(cfg)?;
    let key = RngKey::new(cfg.train.seed).child(2);
    let mut net = match cfg.train.denoiser_prediction {
        crate::nets::PredictionKind::X0 => DenoiserNet::<T>::new_x0(
            cfg.image_dim(),
            cfg.train.denoiser_hidden,
            cfg.train.time_embed_dim,
            &s,
            key.child(0).seed_value(),
        ),
        crate::nets::PredictionKind::Epsilon => DenoiserNet::<T>::new(
            cfg.image_dim(),
            cfg.train.denoiser_hidden,
            cfg.train.time_embed_dim,
            cfg.schedule.t_max,
            key.child(0).seed_value(),
        ),
    };
    let mut opt = Adam::for_params(cfg.train.lr_denoiser, &net.params());
    let mut rows = Vec::new();
    let d = cfg.image_dim();
    for epoch in 0..cfg.train.diffusion_epochs {
        let ekey = key.child(1).child(epoch as u64);
        let order = shuffle_indices(train.len(), ekey.child(0));
        let mut loss_sum = 0.0;
        let mut batches = 0.0;
        for (bi, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
            let bkey = ekey.child(1).child(bi as u64);
            let xb = batch_rows(&train.images, chunk)?;
            let b = chunk.len();
            let ts: Vec<usize> = (0..b)
                .map(|i| draw_timestep(cfg, bkey.child(0).child(i as u64)))
                .collect();
            let eps = Tensor::from_fn(&[b, d], |flat| {
                T::from_f64(bkey.child(1).child((flat / d) as u64).normal_at((flat % d) as u64))
            });
            let ab_rows = Tensor::from_fn(&[b, 1], |i| s.alpha_bar(ts[i]));
            let mut g = Graph::new();
            let params = net.insert_params(&mut g, true);
            let xv = g.constant(xb);
            let ev = g.constant(eps);
            let netc = net.clone();
            let tsc = ts.clone();
            let loss = crate::diffusion::diffusion_loss_var(&mut g, xv, ev, &ab_rows, |g, xt| {
                netc.forward_with(g, &params, xt, &tsc)
            })
            .map_err(diverged)?;
            loss_sum += g.value(loss).item()?.to_f64();
            batches += 1.0;
            g.backward(loss).map_err(diverged)?;
            let grads: Vec<Tensor<T>> = params
                .iter()
                .zip(net.params())
                .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            opt.step(net.params_mut(), &grads)?;
        }
        rows.push(EpochRow {
            epoch,
            loss: loss_sum / batches.max(1.0),
            train_acc: None,
            eval_acc: None,
        });
    }
    if let (Some(threshold), Some(last)) = (cfg.train.diffusion_loss_threshold, rows.last()) {
        if last.loss > threshold {
            return Err(Error::training(format!(
                "final diffusion loss {} above threshold {}",
                last.loss, threshold
            )));
        }
    }
    Ok((net, rows))
}

/// ADDT fine-tuning of a pretrained denoiser under classifier guidance.
pub fn addt_finetune_t<T: Scalar>(
    cfg: &ExperimentConfig,
    denoiser: &DenoiserNet<T>,
    classifier: &ClassifierNet<T>,
) -> Result<(DenoiserNet<T>, Vec<AddtRow>)> {
    let (train, _) = dataset_from::<T>(cfg)?;
    let s = schedule_from::<T>(cfg)?;
    let acfg: AddtConfig = cfg.addt_config();
    acfg.validate()?;
    let key = RngKey::new(cfg.addt.seed);
    let mut net = denoiser.clone();
    let mut opt = Adam::for_params(cfg.addt.lr, &net.params());
    let mut rows = Vec::new();
    for epoch in 0..cfg.addt.epochs {
        let ekey = key.child(epoch as u64);
        let order = shuffle_indices(train.len(), ekey.child(0));
        let mut loss_sum = 0.0;
        let mut batches = 0.0;
        for (bi, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
            let bkey = ekey.child(1).child(bi as u64);
            let xb = batch_rows(&train.images, chunk)?;
            let yb: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let ts: Vec<usize> = (0..chunk.len())
                .map(|i| draw_timestep(cfg, bkey.child(0).child(i as u64)))
                .collect();
            let loss = addt_train_step(
                &mut net,
                &xb,
                &yb,
                &ts,
                classifier,
                &acfg,
                &s,
                &mut opt,
                bkey.child(1).seed_value(),
            )
            .map_err(diverged)?;
            loss_sum += loss;
            batches += 1.0;
        }
        // CGPO health metric: mean objective of fresh perturbations on a
        // fixed probe batch (frozen net).
        let probe = batch_rows(&train.images, &(0..8.min(train.len())).collect::<Vec<_>>())?;
        let mut cgpo_obj = 0.0;
        for i in 0..probe.shape()[0] {
            let x = probe.row(i)?;
            let y = train.labels[i];
            let t = (cfg.t_star()).max(1);
            let p = crate::addt::cgpo(
                &x,
                y,
                t,
                &net,
                classifier,
                &acfg,
                &s,
                ekey.child(2).child(i as u64).seed_value(),
            )?;
            let eps = ekey.child(3).child(i as u64).normal_tensor(x.shape());
            let (obj, _) = crate::addt::cgpo_iteration(
                &x, y, t, &net, classifier, &acfg, &s, &p.mapped, &eps,
            )?;
            cgpo_obj += obj.to_f64();
        }
        rows.push(AddtRow {
            epoch,
            train_loss: loss_sum / batches.max(1.0),
            cgpo_objective: cgpo_obj / 8.0,
        });
    }
    Ok((net, rows))
}

fn attack_config(cfg: &ExperimentConfig, eot: usize, knowledge: KnowledgeSetting, seed: u64) -> AttackConfig {
    AttackConfig {
        norm: cfg.attack.norm,
        radius: cfg.attack.radius,
        step_size: cfg.attack.step_size,
        steps: cfg.attack.steps,
        eot_samples: eot,
        knowledge,
        random_start: cfg.attack.random_start,
        seed,
    }
}

fn victim_tapes<T: Scalar>(cfg: &ExperimentConfig, n: usize, rev: usize) -> Vec<NoiseTape<T>> {
    let d = cfg.image_dim();
    (0..n)
        .map(|i| {
            record_tape(
                RngKey::new(cfg.eval.seed).child(i as u64).seed_value(),
                &[d],
                rev,
            )
        })
        .collect()
}

/// Accuracy and mean victim-side loss at the attack outputs.
fn report_metrics<T: Scalar, P: LossPipeline<T>>(
    pipe: &P,
    report: &AttackReport<T>,
    ys: &[usize],
    tapes: &[NoiseTape<T>],
) -> Result<(f64, f64)> {
    let n = ys.len();
    let losses: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            Ok(pipe.loss(&report.adversarial.row(i)?, ys[i], &tapes[i])?.to_f64())
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_loss = losses.iter().sum::<f64>() / n as f64;
    Ok((report.robust_accuracy(), mean_loss))
}

/// Full evaluation table over all attack settings.
pub fn eval_t<T: Scalar>(
    cfg: &ExperimentConfig,
    denoiser: &DenoiserNet<T>,
    classifier: &ClassifierNet<T>,
) -> Result<EvalTable> {
    let (_, eval) = dataset_from::<T>(cfg)?;
    let s = schedule_from::<T>(cfg)?;
    let pcfg = purify_config_from(cfg)?;
    pcfg.validate(s.t_max())?;
    let pipe = PurifyPipeline::new(&pcfg, &s, denoiser, classifier);
    let xs = &eval.images;
    let ys = &eval.labels;
    let n = ys.len();
    let rev = pcfg.reverse_noise_count();
    let tapes = victim_tapes::<T>(cfg, n, rev);
    let akey = RngKey::new(cfg.attack.seed);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.eval.workers)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;

    pool.install(|| -> Result<EvalTable> {
        let mut table = EvalTable::default();
        let row = |setting: &str, steps, eot, accuracy, mean_loss, seed| EvalRow {
            setting: setting.into(),
            norm: cfg.attack.norm,
            radius: cfg.attack.radius,
            steps,
            eot,
            accuracy,
            mean_loss,
            seed,
        };

        // clean: single stochastic run under the victim tape
        let clean: Vec<(bool, f64)> = (0..n)
            .into_par_iter()
            .map(|i| -> Result<(bool, f64)> {
                let x = xs.row(i)?;
                let (label, loss) = classify_purified(
                    &x,
                    Some(ys[i]),
                    &pcfg,
                    &tapes[i],
                    &s,
                    denoiser,
                    classifier,
                )?;
                Ok((label == ys[i], loss.to_f64()))
            })
            .collect::<Result<Vec<_>>>()?;
        let acc = clean.iter().filter(|(c, _)| *c).count() as f64 / n as f64;
        let mloss = clean.iter().map(|(_, l)| l).sum::<f64>() / n as f64;
        table.rows.push(row("clean", 0, 0, acc, mloss, cfg.eval.seed));

        for (name, eot) in [("pgd_noeot", 1usize), ("pgd_eot", cfg.attack.eot_samples)] {
            let ac = attack_config(
                cfg,
                eot,
                KnowledgeSetting::WhiteBox,
                akey.child(eot as u64).seed_value(),
            );
            let report = pgd_batch(&pipe, xs, ys, &ac, &tapes)?;
            let (acc, mloss) = report_metrics(&pipe, &report, ys, &tapes)?;
            table
                .rows
                .push(row(name, ac.steps, eot, acc, mloss, ac.seed));
        }

        for (name, setting) in [
            ("dw_fwd", KnowledgeSetting::DWFwd),
            ("dw_rev", KnowledgeSetting::DWRev),
            ("dw_both", KnowledgeSetting::DWBoth),
        ] {
            let eot = cfg.attack.dw_eot_samples;
            let ac = attack_config(cfg, eot, setting, akey.child(1000 + eot as u64).seed_value());
            let report = dw_attack_batch(&pipe, xs, ys, setting, &ac, &tapes)?;
            let (acc, mloss) = report_metrics(&pipe, &report, ys, &tapes)?;
            table
                .rows
                .push(row(name, ac.steps, eot, acc, mloss, ac.seed));
        }

        // DW_semi-k: the victim draws one of k public tapes per sample
        let k = cfg.attack.semi_k;
        let d = cfg.image_dim();
        let tape_sets: Vec<Vec<NoiseTape<T>>> = (0..n)
            .map(|i| {
                sample_semi_set(
                    k,
                    RngKey::new(cfg.eval.seed).child(7_000).child(i as u64).seed_value(),
                    &[d],
                    rev,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let victim_idx: Vec<usize> = (0..n)
            .map(|i| semi_victim_index(cfg.eval.seed, i, k))
            .collect();
        let semi_tapes: Vec<NoiseTape<T>> = (0..n)
            .map(|i| tape_sets[i][victim_idx[i]].clone())
            .collect();
        let ac = attack_config(
            cfg,
            k,
            KnowledgeSetting::DWSemi(k),
            akey.child(2000).seed_value(),
        );
        let report = dw_semi_attack_batch(&pipe, xs, ys, &tape_sets, &victim_idx, &ac)?;
        let (acc, mloss) = report_metrics(&pipe, &report, ys, &semi_tapes)?;
        table.rows.push(row(
            &format!("dw_semi_{k}"),
            ac.steps,
            k,
            acc,
            mloss,
            ac.seed,
        ));
        Ok(table)
    })
}

/// Mean loss increases of White-box-EoT, DW_semi-k, and DW-both attacks over
/// the first `analysis_samples` of the eval split, each measured under its
/// own victim semantics against the clean-input baseline.
pub fn loss_increase_comparison_t<T: Scalar>(
    cfg: &ExperimentConfig,
    denoiser: &DenoiserNet<T>,
    classifier: &ClassifierNet<T>,
    seed_offset: u64,
) -> Result<(f64, f64, f64)> {
    let (_, eval) = dataset_from::<T>(cfg)?;
    let s = schedule_from::<T>(cfg)?;
    let pcfg = purify_config_from(cfg)?;
    let pipe = PurifyPipeline::new(&pcfg, &s, denoiser, classifier);
    let m = cfg.eval.analysis_samples.min(eval.len());
    let xs = batch_rows(&eval.images, &(0..m).collect::<Vec<_>>())?;
    let ys = &eval.labels[..m];
    let rev = pcfg.reverse_noise_count();
    let d = cfg.image_dim();
    let ekey = RngKey::new(cfg.eval.seed).child(31).child(seed_offset);
    let akey = RngKey::new(cfg.attack.seed).child(31).child(seed_offset);
    let tapes: Vec<NoiseTape<T>> = (0..m)
        .map(|i| record_tape(ekey.child(i as u64).seed_value(), &[d], rev))
        .collect();

    let increase = |report: &AttackReport<T>, victim: &[NoiseTape<T>]| -> Result<f64> {
        let deltas: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|i| -> Result<f64> {
                let base = pipe.loss(&xs.row(i)?, ys[i], &victim[i])?.to_f64();
                let adv = pipe
                    .loss(&report.adversarial.row(i)?, ys[i], &victim[i])?
                    .to_f64();
                Ok(adv - base)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(deltas.iter().sum::<f64>() / m as f64)
    };

    let ac_white = attack_config(
        cfg,
        cfg.attack.eot_samples,
        KnowledgeSetting::WhiteBox,
        akey.child(1).seed_value(),
    );
    let white = pgd_batch(&pipe, &xs, ys, &ac_white, &tapes)?;
    let white_inc = increase(&white, &tapes)?;

    let k = cfg.attack.semi_k;
    let tape_sets: Vec<Vec<NoiseTape<T>>> = (0..m)
        .map(|i| {
            sample_semi_set(
                k,
                ekey.child(5_000).child(i as u64).seed_value(),
                &[d],
                rev,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let victim_idx: Vec<usize> = (0..m)
        .map(|i| {
            RngKey::new(cfg.eval.seed)
                .child(32)
                .child(seed_offset)
                .child(i as u64)
                .index_below(k)
        })
        .collect();
    let semi_victims: Vec<NoiseTape<T>> =
        (0..m).map(|i| tape_sets[i][victim_idx[i]].clone()).collect();
    let ac_semi = attack_config(cfg, k, KnowledgeSetting::DWSemi(k), akey.child(2).seed_value());
    let semi = dw_semi_attack_batch(&pipe, &xs, ys, &tape_sets, &victim_idx, &ac_semi)?;
    let semi_inc = increase(&semi, &semi_victims)?;

    let ac_dw = attack_config(cfg, 1, KnowledgeSetting::DWBoth, akey.child(3).seed_value());
    let dw = dw_attack_batch(&pipe, &xs, ys, KnowledgeSetting::DWBoth, &ac_dw, &tapes)?;
    let dw_inc = increase(&dw, &tapes)?;

    Ok((white_inc, semi_inc, dw_inc))
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub n: usize,
    pub robust_acc: f64,
    pub cosine_sim: f64,
}

#[derive(Clone, Debug)]
pub struct AnalysisArtifacts {
    pub sweep: Vec<SweepRow>,
    pub accuracy_rho: f64,
    pub similarity_rho: f64,
    pub variance: Vec<(usize, f64)>,
    pub variance_slope: f64,
    pub landscape_csv: String,
    pub trajectories_json: String,
    /// Mean loss at the landscape origin (the clean point).
    pub landscape_base_loss: f64,
    /// Mean loss at the DW endpoint cell, for the steepness comparison.
    pub landscape_dw_loss: f64,
    pub landscape_eot_loss: f64,
}

/// EoT sweep, gradient-variance report, and loss-landscape export.
pub fn analyze_t<T: Scalar>(
    cfg: &ExperimentConfig,
    denoiser: &DenoiserNet<T>,
    classifier: &ClassifierNet<T>,
) -> Result<AnalysisArtifacts> {
    let (_, eval) = dataset_from::<T>(cfg)?;
    let s = schedule_from::<T>(cfg)?;
    let pcfg = purify_config_from(cfg)?;
    let pipe = PurifyPipeline::new(&pcfg, &s, denoiser, classifier);
    let rev = pcfg.reverse_noise_count();
    let d = cfg.image_dim();
    let m = cfg.eval.analysis_samples.min(eval.len());
    let xs = batch_rows(&eval.images, &(0..m).collect::<Vec<_>>())?;
    let ys = &eval.labels[..m];
    let tapes = victim_tapes::<T>(cfg, m, rev);
    let akey = RngKey::new(cfg.attack.seed).child(77);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.eval.workers)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;

    pool.install(|| -> Result<AnalysisArtifacts> {
        let ns = [1usize, 2, 5, 10, 20];
        let seeds = 3u64;
        let mut acc_sum = vec![0.0; ns.len()];
        let mut sim_sum = vec![0.0; ns.len()];
        for sidx in 0..seeds {
            let skey = akey.child(sidx);
            // DW-both gradients at the clean points
            let dw_grads: Vec<Tensor<T>> = (0..m)
                .into_par_iter()
                .map(|i| Ok(pipe.loss_and_grad(&xs.row(i)?, ys[i], &tapes[i])?.1))
                .collect::<Result<Vec<_>>>()?;
            for (ni, &n) in ns.iter().enumerate() {
                let sims: Vec<f64> = (0..m)
                    .into_par_iter()
                    .map(|i| -> Result<f64> {
                        let g = eot_gradient(
                            &pipe,
                            &xs.row(i)?,
                            ys[i],
                            n,
                            skey.child(n as u64).child(i as u64).seed_value(),
                        )?;
                        gradient_similarity(&g, &dw_grads[i])
                    })
                    .collect::<Result<Vec<_>>>()?;
                sim_sum[ni] += sims.iter().sum::<f64>() / m as f64;

                let ac = attack_config(
                    cfg,
                    n,
                    KnowledgeSetting::WhiteBox,
                    skey.child(500 + n as u64).seed_value(),
                );
                let report = pgd_batch(&pipe, &xs, ys, &ac, &tapes)?;
                acc_sum[ni] += report.robust_accuracy();
            }
        }
        let sweep: Vec<SweepRow> = ns
            .iter()
            .enumerate()
            .map(|(i, &n)| SweepRow {
                n,
                robust_acc: acc_sum[i] / seeds as f64,
                cosine_sim: sim_sum[i] / seeds as f64,
            })
            .collect();
        let ns_f: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
        let accuracy_rho = spearman_rho(&ns_f, &sweep.iter().map(|r| r.robust_acc).collect::<Vec<_>>());
        let similarity_rho =
            spearman_rho(&ns_f, &sweep.iter().map(|r| r.cosine_sim).collect::<Vec<_>>());

        // gradient-variance report on the first sample
        let x0 = xs.row(0)?;
        let var_ns = [1usize, 4, 16];
        let repeats = 24;
        let mut variance = Vec::new();
        for &n in &var_ns {
            let grads: Vec<Tensor<T>> = (0..repeats)
                .into_par_iter()
                .map(|r| {
                    eot_gradient(
                        &pipe,
                        &x0,
                        ys[0],
                        n,
                        akey.child(9_000 + n as u64).child(r as u64).seed_value(),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let mut mean = Tensor::<T>::zeros(&[d]);
            for g in &grads {
                mean = mean.add_t(g)?;
            }
            let mean = mean.scale(T::from_f64(1.0 / repeats as f64));
            let mut var = 0.0;
            for g in &grads {
                let diff = g.sub_t(&mean)?;
                var += diff.dot(&diff)?.to_f64();
            }
            variance.push((n, var / (repeats as f64 * d as f64)));
        }
        let variance_slope = loglog_slope(
            &var_ns.iter().map(|&n| n as f64).collect::<Vec<_>>(),
            &variance.iter().map(|&(_, v)| v).collect::<Vec<_>>(),
        );

        // loss landscape averaged over the first landscape_samples images
        let lm = cfg.eval.landscape_samples.min(m);
        let res = cfg.eval.landscape_resolution;
        let mut mean_losses = vec![0.0f64; res * res];
        let mut traj_entries = Vec::new();
        let mut base_loss = 0.0;
        let mut dw_end_loss = 0.0;
        let mut eot_end_loss = 0.0;
        for i in 0..lm {
            let x = xs.row(i)?;
            let ac_dw = attack_config(cfg, 1, KnowledgeSetting::DWBoth, akey.child(400 + i as u64).seed_value());
            let dw = crate::attacks::dw_attack(&pipe, &x, ys[i], &tapes[i], KnowledgeSetting::DWBoth, &ac_dw)?;
            let ac_w = attack_config(
                cfg,
                cfg.attack.eot_samples,
                KnowledgeSetting::WhiteBox,
                akey.child(600 + i as u64).seed_value(),
            );
            let white = crate::attacks::pgd(&pipe, &x, ys[i], &ac_w, &tapes[i])?;
            let p_dw = dw.adversarial.sub_t(&x)?;
            let p_eot = white.adversarial.sub_t(&x)?;
            let grid = landscape_grid(
                &pipe,
                &x,
                ys[i],
                &p_dw,
                &p_eot,
                cfg.eval.landscape_extent,
                res,
                &tapes[i],
            )?;
            for (acc, &l) in mean_losses.iter_mut().zip(&grid.losses) {
                *acc += l.to_f64() / lm as f64;
            }
            let project_traj = |traj: &[Tensor<T>]| -> Result<Vec<[f64; 2]>> {
                traj.iter()
                    .map(|delta| grid.project(delta).map(|(a, b)| [a, b]))
                    .collect()
            };
            let dw_pts = project_traj(&dw.trajectory)?;
            let eot_pts = project_traj(&white.trajectory)?;
            base_loss += pipe.loss(&x, ys[i], &tapes[i])?.to_f64() / lm as f64;
            dw_end_loss += pipe.loss(&dw.adversarial, ys[i], &tapes[i])?.to_f64() / lm as f64;
            eot_end_loss += pipe.loss(&white.adversarial, ys[i], &tapes[i])?.to_f64() / lm as f64;
            traj_entries.push(serde_json::json!({
                "sample": i,
                "dw": dw_pts,
                "white_eot": eot_pts,
                "dw_endpoint": dw_pts.last(),
                "white_eot_endpoint": eot_pts.last(),
            }));
        }
        let coords: Vec<f64> = (0..res)
            .map(|i| {
                -cfg.eval.landscape_extent
                    + 2.0 * cfg.eval.landscape_extent * i as f64 / (res - 1) as f64
            })
            .collect();
        let mut landscape_csv = String::from("a,b,loss\n");
        for (i, &a) in coords.iter().enumerate() {
            for (j, &b) in coords.iter().enumerate() {
                landscape_csv.push_str(&format!("{},{},{}\n", a, b, mean_losses[i * res + j]));
            }
        }
        let trajectories_json = serde_json::to_string_pretty(&serde_json::json!({
            "extent": cfg.eval.landscape_extent,
            "resolution": res,
            "samples": traj_entries,
        }))
        .expect("trajectory json");

        Ok(AnalysisArtifacts {
            sweep,
            accuracy_rho,
            similarity_rho,
            variance,
            variance_slope,
            landscape_csv,
            trajectories_json,
            landscape_base_loss: base_loss,
            landscape_dw_loss: dw_end_loss,
            landscape_eot_loss: eot_end_loss,
        })
    })
}

// ---- file-level entry points ----------------------------------------------

fn echo_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join("config_echo.json"))
}

fn epoch_csv(rows: &[EpochRow], with_acc: bool) -> String {
    let mut s = String::from(if with_acc {
        "epoch,loss,train_acc,eval_acc\n"
    } else {
        "epoch,loss\n"
    });
    for r in rows {
        if with_acc {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch,
                r.loss,
                r.train_acc.unwrap_or(f64::NAN),
                r.eval_acc.unwrap_or(f64::NAN)
            ));
        } else {
            s.push_str(&format!("{},{}\n", r.epoch, r.loss));
        }
    }
    s
}

pub fn run_synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    echo_config(cfg, out)?;
    match cfg.precision {
        Precision::F32 => run_synth_t::<f32>(cfg, out),
        Precision::F64 => run_synth_t::<f64>(cfg, out),
    }
}

fn run_synth_t<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = synth_dataset_with_amp::<T>(
        cfg.dataset.seed,
        cfg.dataset.n_train + cfg.dataset.n_eval,
        cfg.dataset.image_size,
        cfg.dataset.num_classes,
        cfg.dataset.noise_std,
        cfg.dataset.signal_amp,
        cfg.dataset.texture_amp,
        cfg.dataset.orient_jitter,
    )?;
    let header = serde_json::json!({
        "labels": ds.labels,
        "num_classes": ds.num_classes,
        "image_size": ds.image_size,
        "generator_seed": ds.generator_seed,
    })
    .to_string();
    crate::io::save_container(&out.join("dataset.dbpc"), &header, &[&ds.images])
}

pub fn run_train_classifier(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    echo_config(cfg, out)?;
    match cfg.precision {
        Precision::F32 => {
            let (net, rows) = train_classifier_t::<f32>(cfg)?;
            save_classifier(&net, &out.join(CLASSIFIER_FILE))?;
            std::fs::write(out.join("classifier_train.csv"), epoch_csv(&rows, true))?;
            Ok(())
        }
        Precision::F64 => {
            let (net, rows) = train_classifier_t::<f64>(cfg)?;
            save_classifier(&net, &out.join(CLASSIFIER_FILE))?;
            std::fs::write(out.join("classifier_train.csv"), epoch_csv(&rows, true))?;
            Ok(())
        }
    }
}

pub fn run_train_diffusion(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    echo_config(cfg, out)?;
    match cfg.precision {
        Precision::F32 => {
            let (net, rows) = train_diffusion_t::<f32>(cfg)?;
            save_denoiser(&net, &out.join(DENOISER_FILE))?;
            std::fs::write(out.join("diffusion_train.csv"), epoch_csv(&rows, false))?;
            Ok(())
        }
        Precision::F64 => {
            let (net, rows) = train_diffusion_t::<f64>(cfg)?;
            save_denoiser(&net, &out.join(DENOISER_FILE))?;
            std::fs::write(out.join("diffusion_train.csv"), epoch_csv(&rows, false))?;
            Ok(())
        }
    }
}

fn require_weights(out: &Path, name: &str) -> Result<std::path::PathBuf> {
    let p = out.join(name);
    if !p.exists() {
        return Err(Error::config(format!(
            "missing weights {}; run the training subcommand first",
            p.display()
        )));
    }
    Ok(p)
}

fn addt_csv(rows: &[AddtRow]) -> String {
    let mut s = String::from("epoch,train_loss,cgpo_objective\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.cgpo_objective));
    }
    s
}

pub fn run_addt(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    echo_config(cfg, out)?;
    let dpath = require_weights(out, DENOISER_FILE)?;
    let cpath = require_weights(out, CLASSIFIER_FILE)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.eval.workers)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    match cfg.precision {
        Precision::F32 => {
            let denoiser = load_denoiser::<f32>(&dpath, false)?;
            let classifier = load_classifier::<f32>(&cpath, false)?;
            let (net, rows) =
                pool.install(|| addt_finetune_t(cfg, &denoiser, &classifier))?;
            save_denoiser(&net, &out.join(DENOISER_ADDT_FILE))?;
            std::fs::write(out.join("addt_train.csv"), addt_csv(&rows))?;
            Ok(())
        }
        Precision::F64 => {
            let denoiser = load_denoiser::<f64>(&dpath, false)?;
            let classifier = load_classifier::<f64>(&cpath, false)?;
            let (net, rows) =
                pool.install(|| addt_finetune_t(cfg, &denoiser, &classifier))?;
            save_denoiser(&net, &out.join(DENOISER_ADDT_FILE))?;
            std::fs::write(out.join("addt_train.csv"), addt_csv(&rows))?;
            Ok(())
        }
    }
}

/// Weight file the eval/analyze runners read (`denoiser_addt.dbpc` when the
/// ADDT run has produced one and `prefer_addt` is set).
fn eval_denoiser_path(out: &Path, prefer_addt: bool) -> Result<std::path::PathBuf> {
    if prefer_addt {
        let p = out.join(DENOISER_ADDT_FILE);
        if p.exists() {
            return Ok(p);
        }
    }
    require_weights(out, DENOISER_FILE)
}

pub fn run_eval(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    echo_config(cfg, out)?;
    let dpath = eval_denoiser_path(out, false)?;
    let cpath = require_weights(out, CLASSIFIER_FILE)?;
    let csv = match cfg.precision {
        Precision::F32 => {
            let denoiser = load_denoiser::<f32>(&dpath, false)?;
            let classifier = load_classifier::<f32>(&cpath, false)?;
            eval_t(cfg, &denoiser, &classifier)?.to_csv()
        }
        Precision::F64 => {
            let denoiser = load_denoiser::<f64>(&dpath, false)?;
            let classifier = load_classifier::<f64>(&cpath, false)?;
            eval_t(cfg, &denoiser, &classifier)?.to_csv()
        }
    };
    std::fs::write(out.join("metrics.csv"), csv)?;
    Ok(())
}

pub fn run_analyze(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    echo_config(cfg, out)?;
    let dpath = eval_denoiser_path(out, false)?;
    let cpath = require_weights(out, CLASSIFIER_FILE)?;
    let arts = match cfg.precision {
        Precision::F32 => {
            let denoiser = load_denoiser::<f32>(&dpath, false)?;
            let classifier = load_classifier::<f32>(&cpath, false)?;
            analyze_t(cfg, &denoiser, &classifier)?
        }
        Precision::F64 => {
            let denoiser = load_denoiser::<f64>(&dpath, false)?;
            let classifier = load_classifier::<f64>(&cpath, false)?;
            analyze_t(cfg, &denoiser, &classifier)?
        }
    };
    let mut sweep_csv = String::from("n,robust_acc,cosine_sim\n");
    for r in &arts.sweep {
        sweep_csv.push_str(&format!("{},{},{}\n", r.n, r.robust_acc, r.cosine_sim));
    }
    std::fs::write(out.join("eot_sweep.csv"), sweep_csv)?;
    let mut var_csv = String::from("n,variance\n");
    for (n, v) in &arts.variance {
        var_csv.push_str(&format!("{},{}\n", n, v));
    }
    std::fs::write(out.join("grad_variance.csv"), var_csv)?;
    std::fs::write(out.join("landscape.csv"), &arts.landscape_csv)?;
    std::fs::write(out.join("trajectories.json"), &arts.trajectories_json)?;
    let summary = serde_json::json!({
        "accuracy_spearman": arts.accuracy_rho,
        "similarity_spearman": arts.similarity_rho,
        "variance_slope": arts.variance_slope,
        "landscape_base_loss": arts.landscape_base_loss,
        "landscape_dw_loss": arts.landscape_dw_loss,
        "landscape_white_eot_loss": arts.landscape_eot_loss,
    });
    std::fs::write(
        out.join("analysis_summary.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    Ok(())
}
