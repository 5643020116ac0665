//! Scratch bring-up / calibration harness for the toy benchmark.
//! Usage: bringup <stage> [key=value ...]
//! keys: clf, diff, addt_epochs, amp, noise, radius, n_eval, steps, eot, t_star, nfe

use dbplab_core::lab::config::ExperimentConfig;
use dbplab_core::lab::runners::*;

fn main() {
    let mut cfg = ExperimentConfig::toy_default();
    let args: Vec<String> = std::env::args().collect();
    let stage = args.get(1).cloned().unwrap_or_else(|| "all".into());
    for a in &args[2..] {
        let (k, v) = a.split_once('=').expect("key=value");
        match k {
            "clf" => cfg.train.classifier_epochs = v.parse().unwrap(),
            "diff" => cfg.train.diffusion_epochs = v.parse().unwrap(),
            "addt_epochs" => cfg.addt.epochs = v.parse().unwrap(),
            "amp" => cfg.dataset.signal_amp = v.parse().unwrap(),
            "hf" => cfg.dataset.texture_amp = v.parse().unwrap(),
            "jitter" => cfg.dataset.orient_jitter = v.parse().unwrap(),
            "noise" => cfg.dataset.noise_std = v.parse().unwrap(),
            "radius" => cfg.attack.radius = v.parse::<f64>().unwrap() / 255.0,
            "step" => cfg.attack.step_size = v.parse::<f64>().unwrap() / 255.0,
            "n_eval" => cfg.dataset.n_eval = v.parse().unwrap(),
            "steps" => cfg.attack.steps = v.parse().unwrap(),
            "eot" => cfg.attack.eot_samples = v.parse().unwrap(),
            "t_star" => cfg.purify.t_star = Some(v.parse().unwrap()),
            "nfe" => cfg.purify.nfe = v.parse().unwrap(),
            "lr_addt" => cfg.addt.lr = v.parse().unwrap(),
            "tbias" => cfg.train.t_bias = v.parse().unwrap(),
            "hidden" => cfg.train.denoiser_hidden = v.parse().unwrap(),
            "lambda_unit" => cfg.addt.lambda_unit = v.parse().unwrap(),
            _ => panic!("unknown key {k}"),
        }
    }
    println!(
        "cfg: amp={} noise={} radius={:.4} clf={} diff={} t*={} nfe={}",
        cfg.dataset.signal_amp,
        cfg.dataset.noise_std,
        cfg.attack.radius,
        cfg.train.classifier_epochs,
        cfg.train.diffusion_epochs,
        cfg.t_star(),
        cfg.purify.nfe
    );

    let t0 = std::time::Instant::now();
    let (classifier, crows) = train_classifier_t::<f32>(&cfg).unwrap();
    let last = crows.last().unwrap();
    println!(
        "classifier: loss {:.4}, train {:.3}, eval {:.3} [{:?}]",
        last.loss,
        last.train_acc.unwrap(),
        last.eval_acc.unwrap(),
        t0.elapsed()
    );

    let t1 = std::time::Instant::now();
    let (denoiser, drows) = train_diffusion_t::<f32>(&cfg).unwrap();
    println!(
        "diffusion loss: first {:.4} last {:.4} [{:?}]",
        drows.first().unwrap().loss,
        drows.last().unwrap().loss,
        t1.elapsed()
    );
    if stage == "train" {
        return;
    }

    if stage == "diag" {
        use dbplab_core::diffusion::{diffusion_loss, PurifyConfig, SamplerKind};
        use dbplab_core::nets::Denoiser;
        use dbplab_core::lab::synth_dataset_with_amp;
        use dbplab_core::purify::classify_purified;
        use dbplab_core::rngtape::{record_tape, RngKey};
        let ds = synth_dataset_with_amp::<f32>(
            cfg.dataset.seed,
            cfg.dataset.n_train + cfg.dataset.n_eval,
            cfg.dataset.image_size,
            cfg.dataset.num_classes,
            cfg.dataset.noise_std,
            cfg.dataset.signal_amp,
            cfg.dataset.texture_amp,
            cfg.dataset.orient_jitter,
        )
        .unwrap();
        let (_, eval) = ds.split(cfg.dataset.n_train).unwrap();
        let s = dbplab_core::diffusion::make_linear_schedule::<f32>(
            cfg.schedule.t_max,
            cfg.schedule.beta_start,
            cfg.schedule.beta_end,
        )
        .unwrap();
        let n = cfg.dataset.n_eval.min(eval.len());
        // per-t denoiser loss on eval data
        for &t in &[1usize, 3, 5, 10, 20, 50, 100] {
            let mut loss = 0.0;
            for i in 0..16 {
                let x = eval.images.row(i).unwrap();
                let eps = RngKey::new(4242).child(t as u64).child(i as u64).normal_tensor(x.shape());
                let dn = denoiser.clone();
                loss += diffusion_loss(&x, t, &eps, &s, |g, xt, tt| dn.predict(g, xt, tt))
                    .unwrap() as f64;
            }
            println!("eps-loss t={:3}: {:.2} (per-elem {:.3})", t, loss / 16.0, loss / 16.0 / 256.0);
        }
        // purified-clean accuracy under different samplers/depths
        for (name, sampler, t_star, nfe) in [
            ("ddim [10,0]", SamplerKind::Ddim, 10usize, 1usize),
            ("ddim nfe5", SamplerKind::Ddim, 10, 5),
            ("ddpm nfe10", SamplerKind::Ddpm, 10, 10),
            ("ddpm t*=5", SamplerKind::Ddpm, 5, 5),
            ("ddim t*=5", SamplerKind::Ddim, 5, 1),
        ] {
            let pcfg = PurifyConfig::new(sampler, t_star, nfe).unwrap();
            let mut correct = 0;
            for i in 0..n {
                let x = eval.images.row(i).unwrap();
                let tape = record_tape(
                    RngKey::new(cfg.eval.seed).child(i as u64).seed_value(),
                    &[x.numel()],
                    pcfg.reverse_noise_count(),
                );
                let (label, _) =
                    classify_purified(&x, None, &pcfg, &tape, &s, &denoiser, &classifier).unwrap();
                if label == eval.labels[i] {
                    correct += 1;
                }
            }
            println!("purified clean {}: {:.4}", name, correct as f64 / n as f64);
        }
        return;
    }

    if stage == "rbgmcheck" {
        use dbplab_core::addt::{cgpo, map_perturbation};
        use dbplab_core::graph::Graph;
        use dbplab_core::lab::synth_dataset_with_amp;
        use dbplab_core::rngtape::RngKey;
        use dbplab_core::tensor::Tensor;
        let ds = synth_dataset_with_amp::<f32>(
            cfg.dataset.seed,
            cfg.dataset.n_train + cfg.dataset.n_eval,
            cfg.dataset.image_size,
            cfg.dataset.num_classes,
            cfg.dataset.noise_std,
            cfg.dataset.signal_amp,
            cfg.dataset.texture_amp,
            cfg.dataset.orient_jitter,
        )
        .unwrap();
        let (_, eval) = ds.split(cfg.dataset.n_train).unwrap();
        let s = dbplab_core::diffusion::make_linear_schedule::<f32>(
            cfg.schedule.t_max,
            cfg.schedule.beta_start,
            cfg.schedule.beta_end,
        )
        .unwrap();
        let acfg = cfg.addt_config();
        let key = RngKey::new(999);
        let scale = 0.03f32;
        let n = cfg.dataset.n_eval.min(eval.len());
        let mut acc = |perturb: &dyn Fn(usize, &Tensor<f32>) -> Tensor<f32>| -> f64 {
            let mut correct = 0;
            for i in 0..n {
                let x = eval.images.row(i).unwrap();
                let xp = perturb(i, &x).map(|v: f32| v.clamp(0.0, 1.0));
                let mut g = Graph::new();
                let xv = g.constant(xp);
                let logits = classifier.logits(&mut g, xv).unwrap();
                if g.value(logits).argmax() == eval.labels[i] {
                    correct += 1;
                }
            }
            correct as f64 / n as f64
        };
        let clean_acc = acc(&|_, x| x.clone());
        let gauss_acc = acc(&|i, x| {
            let noise: Tensor<f32> = key.child(1).child(i as u64).normal_tensor(x.shape());
            x.zip(&noise, |a, b| a + scale * b).unwrap()
        });
        let t_probe = cfg.t_star().max(1);
        let rbgm_acc = acc(&|i, x| {
            let p = cgpo(
                x,
                eval.labels[i],
                t_probe,
                &denoiser,
                &classifier,
                &acfg,
                &s,
                key.child(2).child(i as u64).seed_value(),
            )
            .unwrap();
            let eps_s: Tensor<f32> = key.child(3).child(i as u64).normal_tensor(x.shape());
            let mapped = map_perturbation(&p.delta, &eps_s, acfg.perturbation_mode).unwrap();
            x.zip(&mapped, |a, b| a + scale * b).unwrap()
        });
        println!(
            "clean {:.4} | +0.03 gauss {:.4} | +0.03 rbgm(cgpo) {:.4}",
            clean_acc, gauss_acc, rbgm_acc
        );
        return;
    }

    if stage == "cmp" {
        let table = eval_t(&cfg, &denoiser, &classifier).unwrap();
        println!("-- vanilla --\n{}", table.to_csv());
        let (addt_net, arows) = addt_finetune_t(&cfg, &denoiser, &classifier).unwrap();
        println!(
            "addt: loss {:.4} -> {:.4}, cgpo {:.4} -> {:.4}",
            arows.first().unwrap().train_loss,
            arows.last().unwrap().train_loss,
            arows.first().unwrap().cgpo_objective,
            arows.last().unwrap().cgpo_objective,
        );
        let table2 = eval_t(&cfg, &addt_net, &classifier).unwrap();
        println!("-- addt --\n{}", table2.to_csv());
        return;
    }

    if stage == "eval" || stage == "all" {
        let t2 = std::time::Instant::now();
        let table = eval_t(&cfg, &denoiser, &classifier).unwrap();
        print!("{}", table.to_csv());
        println!("eval took {:?}", t2.elapsed());
    }

    if stage == "addt" || stage == "all" {
        let t3 = std::time::Instant::now();
        let (addt_net, arows) = addt_finetune_t(&cfg, &denoiser, &classifier).unwrap();
        println!(
            "addt: loss {:.4} -> {:.4}, cgpo {:.4} -> {:.4} [{:?}]",
            arows.first().unwrap().train_loss,
            arows.last().unwrap().train_loss,
            arows.first().unwrap().cgpo_objective,
            arows.last().unwrap().cgpo_objective,
            t3.elapsed()
        );
        let t4 = std::time::Instant::now();
        let table2 = eval_t(&cfg, &addt_net, &classifier).unwrap();
        print!("{}", table2.to_csv());
        println!("addt eval took {:?}", t4.elapsed());
    }

    if stage == "analyze" || stage == "all" {
        let t5 = std::time::Instant::now();
        let arts = analyze_t(&cfg, &denoiser, &classifier).unwrap();
        for r in &arts.sweep {
            println!("n={:2} acc={:.4} sim={:.4}", r.n, r.robust_acc, r.cosine_sim);
        }
        println!(
            "acc rho {:.3}, sim rho {:.3}, var slope {:.3}",
            arts.accuracy_rho, arts.similarity_rho, arts.variance_slope
        );
        println!(
            "landscape base {:.4} dw {:.4} eot {:.4}",
            arts.landscape_base_loss, arts.landscape_dw_loss, arts.landscape_eot_loss
        );
        println!("analysis took {:?}", t5.elapsed());
    }

    if stage == "semi" || stage == "all" {
        let t6 = std::time::Instant::now();
        let (w, s, d) = loss_increase_comparison_t(&cfg, &denoiser, &classifier, 0).unwrap();
        println!(
            "loss increases: white_eot {:.4} semi {:.4} dw_both {:.4} [{:?}]",
            w,
            s,
            d,
            t6.elapsed()
        );
    }
}
