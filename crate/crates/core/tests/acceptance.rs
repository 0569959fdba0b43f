//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use coop_ebm::autodiff::{finite_difference_check, Tape, Var};
use coop_ebm::datasets::{BatchIterator, Dataset, DatasetSpec};
use coop_ebm::io::{checkpoint, RunConfig, RunDir};
use coop_ebm::learning::{
    continue_training, ebm_loss_and_grad, generator_loss_and_grad, inference_loss_and_grad,
    interleaved_sweep, train_loop, TrainMode,
};
use coop_ebm::metrics::{
    analytic_gaussian_posterior, chain_diagnostics, cross_modal_coherence, fid_surrogate,
    grid_moments_2d, latent_probe_accuracy, mmd_rbf, unconditional_coherence, GaussianMoments,
    ToyClassifier,
};
use coop_ebm::models::{moe_log_prob, Coupling, InferenceCoupling, LatentVars};
use coop_ebm::samplers::{
    langevin_chain, langevin_posterior_chain, sample_from_noise,
    sample_unconditional, LangevinConfig,
};
use coop_ebm::{LatentState, ModelConfig, ModelTriple, MultimodalBatch, Parameters, RngStream, Tensor};

type Verdict = (bool, String);

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn swap_in<'t>(tape: &'t Tape, k: usize, v: Var<'t>) -> impl FnMut(&Tensor) -> Var<'t> {
    let mut idx = 0;
    move |t: &Tensor| {
        idx += 1;
        if idx - 1 == k {
            v
        } else {
            tape.constant(t.clone())
        }
    }
}

fn consts<'t>(tape: &'t Tape, ts: &[Tensor]) -> Vec<Var<'t>> {
    ts.iter().map(|t| tape.constant(t.clone())).collect()
}

/// `log p(X | z, w)` summed over the batch, with optional substitutes for
/// parameter `leaf` or latent part `part`.
fn gen_ll<'t>(
    m: &ModelTriple,
    tape: &'t Tape,
    xs: &[Tensor],
    lat: &LatentState,
    leaf: Option<(usize, Var<'t>)>,
    part: Option<(usize, Var<'t>)>,
) -> coop_ebm::Result<Var<'t>> {
    let g = match leaf {
        Some((k, v)) => m.generator.bind_with(&m.config, &mut swap_in(tape, k, v)),
        None => m.generator.bind(&m.config, tape, false),
    };
    let mut parts = consts(tape, &lat.parts().into_iter().cloned().collect::<Vec<_>>());
    if let Some((i, v)) = part {
        parts[i] = v;
    }
    let lv = LatentVars { z: parts[0], w: parts[1..].to_vec() };
    Ok(g.log_likelihood(&consts(tape, xs), &lv, None)?.sum())
}

/// Mixture log-density of a fixed latent, summed, with optional substitutes
/// for parameter `leaf` or modality `input`.
fn inf_lp<'t>(
    m: &ModelTriple,
    tape: &'t Tape,
    xs: &[Tensor],
    lat: &LatentState,
    leaf: Option<(usize, Var<'t>)>,
    input: Option<(usize, Var<'t>)>,
) -> coop_ebm::Result<Var<'t>> {
    let q = match leaf {
        Some((k, v)) => m.inference.bind_with(&mut swap_in(tape, k, v)),
        None => m.inference.bind(tape, false),
    };
    let mut vs = consts(tape, xs);
    if let Some((j, v)) = input {
        vs[j] = v;
    }
    let z = tape.constant(lat.z.clone());
    let mut total = moe_log_prob(&q.encode(&vs)?, &z)?.sum();
    for (e, w) in q.encode_w(&vs)?.iter().zip(&lat.w) {
        total = total.add(&e.log_prob(&tape.constant(w.clone()))?.sum())?;
    }
    Ok(total)
}

/// Every parameter tensor and every input of the three networks, at ten
/// random initializations and inputs.
fn autodiff_gradients() -> Verdict {
    let start = Instant::now();
    // Worst error per network: energy, generator, inference.
    let mut worst = [0.0f64; 3];
    let mut checks = 0usize;
    let mut track = |net: usize, e: f64| {
        worst[net] = worst[net].max(e);
        checks += 1;
    };
    for point in 0..10u64 {
        let cfg = ModelConfig {
            modality_dims: vec![3, 2, 4],
            latent_dim: 2,
            modality_latent_dim: 1,
            energy_hidden: vec![6],
            energy_feature_dim: 3,
            aggregator_hidden: vec![5],
            generator_hidden: vec![6],
            inference_hidden: vec![5],
            ..ModelConfig::default()
        };
        let mut m = ModelTriple::init(&cfg, &RngStream::new(point, "fd/init")).unwrap();
        let mut rng = RngStream::new(point, "fd/data");
        // Fresh log-variance heads are zero; move them off that point.
        for e in m.inference.encoders.iter_mut().chain(m.inference.w_encoders.iter_mut()) {
            e.log_var_head.weight = rng.uniform_tensor(e.log_var_head.weight.shape(), -0.3, 0.3);
        }
        let b = 3;
        let xs: Vec<Tensor> = cfg.modality_dims.iter().map(|&d| rng.uniform_tensor(&[b, d], -1.0, 1.0)).collect();
        let lat = LatentState::sample_prior(&cfg, b, &mut rng);
        // Central differences balance truncation against rounding near this step.
        let h = 1e-4;

        // Energy: F summed over the batch.
        for (k, p) in m.energy.tensors().into_iter().enumerate() {
            track(
                0,
                finite_difference_check(
                    |v| Ok(m.energy.bind_with(&mut swap_in(v.tape(), k, v)).energy(&consts(v.tape(), &xs))?.sum()),
                    p,
                    h,
                )
                .unwrap(),
            );
        }
        for j in 0..xs.len() {
            track(
                0,
                finite_difference_check(
                    |v| {
                        let mut vs = consts(v.tape(), &xs);
                        vs[j] = v;
                        Ok(m.energy.bind(v.tape(), false).energy(&vs)?.sum())
                    },
                    &xs[j],
                    h,
                )
                .unwrap(),
            );
        }

        for (k, p) in m.generator.tensors().into_iter().enumerate() {
            track(1, finite_difference_check(|v| gen_ll(&m, v.tape(), &xs, &lat, Some((k, v)), None), p, h).unwrap());
        }
        for (i, p) in lat.parts().into_iter().enumerate() {
            track(1, finite_difference_check(|v| gen_ll(&m, v.tape(), &xs, &lat, None, Some((i, v))), p, h).unwrap());
        }

        for (k, p) in m.inference.tensors().into_iter().enumerate() {
            track(2, finite_difference_check(|v| inf_lp(&m, v.tape(), &xs, &lat, Some((k, v)), None), p, h).unwrap());
        }
        for j in 0..xs.len() {
            track(2, finite_difference_check(|v| inf_lp(&m, v.tape(), &xs, &lat, None, Some((j, v))), &xs[j], h).unwrap());
        }
    }
    let t = secs(start.elapsed());
    let max = worst.iter().cloned().fold(0.0, f64::max);
    (
        max < 1e-5 && t < 10.0,
        format!(
            "max rel err energy {:.2e} / generator {:.2e} / inference {:.2e} over {checks} tensors (< 1e-5), {t:.1}s (< 10s)",
            worst[0], worst[1], worst[2]
        ),
    )
}

/// Standard-Gaussian target in 8 dimensions.
fn langevin_stationarity() -> Verdict {
    let start = Instant::now();
    let cfg = LangevinConfig {
        record_trajectory: true,
        record_every: 20,
        ..LangevinConfig::from_classical(0.05, 2000)
    };
    let init = vec![Tensor::full(&[512, 8], 2.0)];
    let (_, rec) = langevin_chain(init, &cfg, &mut RngStream::new(0, "stationarity"), |_, xs| {
        Ok(xs[0].square().sum_axis(1)?.scale(-0.5))
    })
    .unwrap();
    let r = chain_diagnostics(&[rec], &GaussianMoments::standard(8), 500).unwrap();
    let t = secs(start.elapsed());
    (
        r.mean_error < 0.1 && r.cov_rel_error < 0.15 && t < 60.0,
        format!(
            "mean err {:.4} (< 0.1), cov rel err {:.4} (< 0.15), {t:.1}s (< 60s)",
            r.mean_error, r.cov_rel_error
        ),
    )
}

/// Linear-Gaussian model with the true loadings; posterior chains against the
/// conjugate closed form, and the closed form against grid integration.
fn posterior_oracle() -> Verdict {
    let start = Instant::now();
    let ds = DatasetSpec::linear_gaussian(2, vec![3, 3], 1.0, 3).build().unwrap();
    let truth = ds.truth.clone().unwrap();
    let cfg = ModelConfig {
        modality_dims: vec![3, 3],
        latent_dim: 2,
        generator_hidden: Vec::new(),
        decoder_sigma: truth.noise_std,
        ..ModelConfig::default()
    };
    let mut m = ModelTriple::init(&cfg, &RngStream::new(0, "init")).unwrap();
    for (d, a) in m.generator.decoders.iter_mut().zip(&truth.loadings) {
        d.layers[0].weight = a.transpose().unwrap();
        d.layers[0].bias = Tensor::zeros(d.layers[0].bias.shape());
    }
    let obs = ds.test.batch(&[0]);
    let observed: Vec<&[f64]> = obs.modalities.iter().map(Tensor::data).collect();
    let loadings: Vec<&Tensor> = truth.loadings.iter().collect();
    let post = analytic_gaussian_posterior(&loadings, truth.noise_std, &observed, &GaussianMoments::standard(2)).unwrap();

    // Closed form against brute-force integration of the unnormalized density.
    let a = DMatrix::from_row_slice(6, 2, &[truth.loadings[0].data(), truth.loadings[1].data()].concat());
    let x = DVector::from_row_slice(&[observed[0], observed[1]].concat());
    let s2 = truth.noise_std * truth.noise_std;
    let log_joint = |u: f64, v: f64| {
        let z = DVector::from_row_slice(&[u, v]);
        -(&x - &a * &z).norm_squared() / (2.0 * s2) - 0.5 * z.norm_squared()
    };
    let sd = post.cov.diagonal().max().sqrt();
    let grid = grid_moments_2d(log_joint, [post.mean[0], post.mean[1]], 10.0 * sd, 401).unwrap();
    let grid_err = (&grid.mean - &post.mean).amax().max((&grid.cov - &post.cov).amax());

    // 1000 chains on the model's own posterior.
    let n = 1000;
    let chain_cfg = LangevinConfig {
        record_trajectory: true,
        record_every: 25,
        ..LangevinConfig::from_classical(0.01, 500)
    };
    let z0 = LatentState::sample_prior(&cfg, n, &mut RngStream::new(1, "z0"));
    let (_, rec) = langevin_posterior_chain(&z0, &obs.repeat_rows(n), &m, &chain_cfg, &mut RngStream::new(2, "post")).unwrap();
    let r = chain_diagnostics(&[rec], &post, 250).unwrap();
    let t = secs(start.elapsed());
    (
        r.mean_error < 0.05 && r.cov_rel_error < 0.10 && grid_err < 1e-3 && t < 60.0,
        format!(
            "mean err {:.4} (< 0.05), cov rel err {:.4} (< 0.10), grid err {grid_err:.2e} (< 1e-3), {t:.1}s (< 60s)",
            r.mean_error, r.cov_rel_error
        ),
    )
}

fn gmm_config(seed: u64, steps: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.dataset = DatasetSpec::gmm2d(seed);
    cfg.train.total_steps = steps;
    cfg
}

fn joint_rows(x: &MultimodalBatch) -> Tensor {
    let n = x.batch_size();
    let width: usize = x.modalities.iter().map(Tensor::row_len).sum();
    let mut d = Vec::with_capacity(n * width);
    for i in 0..n {
        for m in &x.modalities {
            d.extend_from_slice(m.row(i));
        }
    }
    Tensor::new(vec![n, width], d).unwrap()
}

/// Kernel bandwidth for sample quality on the 2D mixture; well below the
/// spacing of its components.
const MMD_BANDWIDTH: f64 = 0.2;

fn cooperative_vs_mle() -> Verdict {
    let start = Instant::now();
    let mut mmd = Vec::new();
    for mode in [TrainMode::Cooperative, TrainMode::MleEbm] {
        let mut cfg = gmm_config(0, 5000);
        cfg.train.mode = mode;
        let ds = cfg.dataset.build().unwrap();
        let out = train_loop(&cfg, &ds, None).unwrap();
        let mut rng = RngStream::new(1, "eval");
        let x = match mode {
            TrainMode::MleEbm => sample_from_noise(&out.state.models, 1000, &cfg.sampler_x, &mut rng),
            _ => sample_unconditional(&out.state.models, 1000, &cfg.sampler_x, &mut rng),
        }
        .unwrap();
        mmd.push(mmd_rbf(&joint_rows(&x), &joint_rows(&ds.test.all()), Some(MMD_BANDWIDTH)).unwrap());
    }
    let t = secs(start.elapsed());
    (
        mmd[0] < 0.5 * mmd[1] && t < 900.0,
        format!("MMD^2 cooperative {:.4e} vs mle-ebm {:.4e} (ratio < 0.5), {t:.0}s (< 900s)", mmd[0], mmd[1]),
    )
}

fn tail_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn shared_vs_independent_generator() -> Verdict {
    let start = Instant::now();
    let steps = 2000;
    let mut ok = true;
    let mut detail = Vec::new();
    for seed in [0, 1] {
        let mut sd = Vec::new();
        for coupling in [Coupling::Shared, Coupling::Independent] {
            let mut cfg = gmm_config(seed, steps);
            cfg.model.coupling = coupling;
            let ds = cfg.dataset.build().unwrap();
            let out = train_loop(&cfg, &ds, None).unwrap();
            let tail: Vec<f64> = out.reports.iter().filter(|r| r.step > steps * 4 / 5).map(|r| r.ebm_loss).collect();
            sd.push(tail_std(&tail));
        }
        ok &= sd[0] < sd[1];
        detail.push(format!("seed {seed}: sd {:.3e} vs {:.3e}", sd[0], sd[1]));
    }
    let t = secs(start.elapsed());
    (ok && t < 1800.0, format!("{}, {t:.0}s (< 1800s)", detail.join("; ")))
}

fn joint_vs_independent_inference() -> Verdict {
    let mut ok = true;
    let mut detail = Vec::new();
    for seed in [0, 1] {
        let mut recon = Vec::new();
        for coupling in [InferenceCoupling::Joint, InferenceCoupling::Independent] {
            let mut cfg = RunConfig::default();
            cfg.seed = seed;
            cfg.dataset = DatasetSpec {
                train_size: 2000,
                test_size: 200,
                ..DatasetSpec::glyph(3, 10, seed)
            };
            cfg.model.inference_coupling = coupling;
            cfg.train.batch_size = 32;
            cfg.train.total_steps = 600;
            let ds = cfg.dataset.build().unwrap();
            let epoch = BatchIterator::new(ds.train.len(), 32, seed).unwrap().batches_per_epoch();
            let out = train_loop(&cfg, &ds, None).unwrap();
            let last: Vec<f64> = out.reports.iter().rev().take(epoch).map(|r| r.generator_recon_loss).collect();
            recon.push(last.iter().sum::<f64>() / last.len() as f64);
        }
        ok &= recon[0] < recon[1];
        detail.push(format!("seed {seed}: recon {:.3} vs {:.3}", recon[0], recon[1]));
    }
    (ok, detail.join("; "))
}

/// The long glyph run shared by the coherence, refinement and probe criteria.
struct GlyphRun {
    dataset: Dataset,
    cfg: RunConfig,
    models: ModelTriple,
    classifier: ToyClassifier,
    train_secs: f64,
}

fn glyph_run() -> &'static GlyphRun {
    static RUN: OnceLock<GlyphRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let mut cfg = RunConfig::default();
        cfg.dataset = DatasetSpec::glyph(3, 10, 0);
        cfg.train.batch_size = 32;
        cfg.train.total_steps = 10_000;
        cfg.output.metrics_every = 100;
        let dataset = cfg.dataset.build().unwrap();
        let classifier = ToyClassifier::train(&dataset.train, &dataset.test, 10, 0).unwrap();
        let models = train_loop(&cfg, &dataset, None).unwrap().state.models;
        GlyphRun {
            dataset,
            cfg,
            models,
            classifier,
            train_secs: secs(start.elapsed()),
        }
    })
}

fn eval_batch(run: &GlyphRun) -> (MultimodalBatch, Vec<usize>) {
    let idx: Vec<usize> = (0..1000).collect();
    (run.dataset.test.batch(&idx), run.dataset.test.labels_at(&idx).unwrap())
}

/// Mean conditional coherence over every observed subset of size `k`.
fn coherence_given(run: &GlyphRun, k: usize, seed: u64) -> f64 {
    let (x, y) = eval_batch(run);
    let mut rng = RngStream::new(seed, "coherence");
    cross_modal_coherence(&run.models, &x, &y, k, &run.cfg.sampler_z, &run.classifier, &mut rng).unwrap()
}

fn glyph_coherence() -> Verdict {
    let start = Instant::now();
    let run = glyph_run();
    let acc = run.classifier.min_accuracy();
    let cond = coherence_given(run, 1, 1);
    let x = sample_unconditional(&run.models, 1000, &run.cfg.sampler_x, &mut RngStream::new(2, "uncond")).unwrap();
    let uncond = unconditional_coherence(&x, &run.classifier).unwrap();
    let t = run.train_secs + secs(start.elapsed());
    (
        acc >= 0.95 && cond >= 0.80 && uncond >= 0.50 && t < 1800.0,
        format!(
            "classifier acc {acc:.3} (>= 0.95), conditional {cond:.3} (>= 0.80), unconditional {uncond:.3} (>= 0.50), {t:.0}s (< 1800s)"
        ),
    )
}

fn refinement_monotonicity() -> Verdict {
    let run = glyph_run();
    let c: Vec<f64> = (1..=3).map(|k| coherence_given(run, k, 3)).collect();
    (
        c[1] >= c[0] - 0.01 && c[2] >= c[1] - 0.01,
        format!("coherence with 1/2/3 observed: {:.3} / {:.3} / {:.3} (steps >= -0.01)", c[0], c[1], c[2]),
    )
}

fn latent_probe() -> Verdict {
    let run = glyph_run();
    let acc = latent_probe_accuracy(&run.models.inference, &run.dataset.train, &run.dataset.test, 10, 0).unwrap();
    (acc >= 0.90, format!("held-out probe accuracy {acc:.3} (>= 0.90)"))
}

fn k_ablation() -> Verdict {
    let run = glyph_run();
    let arms: Vec<(String, RunConfig)> = [10, 30, 60]
        .iter()
        .map(|&k| {
            let mut cfg = run.cfg.clone();
            cfg.train.total_steps = 1000;
            cfg.sampler_x.steps = k;
            (format!("k_x={k}"), cfg)
        })
        .collect();
    let out = interleaved_sweep(&arms, &run.dataset).unwrap();
    let real = run.dataset.test.all();
    let fid: Vec<f64> = out
        .iter()
        .zip(&arms)
        .map(|(arm, (_, cfg))| {
            let x = sample_unconditional(&arm.output.state.models, 1000, &cfg.sampler_x, &mut RngStream::new(4, "fid")).unwrap();
            fid_surrogate(&real, &x, &run.classifier).unwrap()
        })
        .collect();
    let wall: Vec<f64> = out.iter().map(|a| a.median_step_secs).collect();
    (
        fid[0] > fid[1] && wall[0] < wall[1] && wall[1] < wall[2],
        format!(
            "FID surrogate {:.2} / {:.2} / {:.2}, step secs {:.4} / {:.4} / {:.4} for k_x 10/30/60",
            fid[0], fid[1], fid[2], wall[0], wall[1], wall[2]
        ),
    )
}

fn fixed_point_and_hygiene() -> Verdict {
    let cfg = RunConfig {
        dataset: DatasetSpec::glyph(3, 10, 0),
        ..RunConfig::default()
    };
    let model_cfg = cfg.resolved_model().unwrap();
    let m = ModelTriple::init(&model_cfg, &RngStream::new(5, "init")).unwrap();
    let ds = DatasetSpec { train_size: 200, test_size: 10, ..cfg.dataset.clone() }.build().unwrap();
    let x = ds.train.batch(&(0..32).collect::<Vec<_>>());
    let xr = ds.train.batch(&(32..64).collect::<Vec<_>>());
    let mut rng = RngStream::new(6, "latents");
    let zr: Vec<LatentState> = (0..3).map(|_| LatentState::sample_prior(&model_cfg, 32, &mut rng)).collect();
    let zp = LatentState::sample_prior(&model_cfg, 32, &mut rng);
    let cfg_x = &cfg.sampler_x;

    // Identical batches.
    let same = ebm_loss_and_grad(&m.energy, &x, &x.clone(), cfg_x).unwrap();
    let zero_grad = same.loss_grad.grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0));

    // Each loss depends on its own parameters only.
    let losses = |t: &ModelTriple| {
        [
            ebm_loss_and_grad(&t.energy, &x, &xr, cfg_x).unwrap().loss_grad,
            generator_loss_and_grad(&model_cfg, &t.generator, &x, &zr, &zp, &xr).unwrap().loss_grad,
            inference_loss_and_grad(&model_cfg, &t.inference, &zr, &x, &zp, &xr).unwrap(),
        ]
        .map(|lg| (lg.loss.to_bits(), lg.grads))
    };
    let base = losses(&m);
    let mut leaks = 0;
    for which in 0..3 {
        let mut p = m.clone();
        let ts = match which {
            0 => p.energy.tensors_mut(),
            1 => p.generator.tensors_mut(),
            _ => p.inference.tensors_mut(),
        };
        ts.into_iter().for_each(|t| *t = t.map(|v| v * 1.5 + 0.1));
        let now = losses(&p);
        leaks += (0..3).filter(|&o| o != which && now[o] != base[o]).count();
    }

    // Loss gradient against the scaled energy difference.
    let out = ebm_loss_and_grad(&m.energy, &x, &xr, cfg_x).unwrap();
    let tape = Tape::new();
    let e = m.energy.bind(&tape, true);
    let diff = e
        .energy(&x.bind(&tape, false))
        .unwrap()
        .mean()
        .sub(&e.energy(&xr.bind(&tape, false)).unwrap().mean())
        .unwrap();
    let g = tape.backward(diff).unwrap();
    let k = (cfg_x.step_size / cfg_x.noise_scale).powi(2);
    let surrogate_err = e
        .vars()
        .iter()
        .zip(&out.loss_grad.grads)
        .map(|(v, got)| {
            let want = g.wrt(v).scale(-k);
            want.sub(got).unwrap().max_abs() / want.max_abs().max(f64::MIN_POSITIVE)
        })
        .fold(0.0, f64::max);
    (
        zero_grad && leaks == 0 && surrogate_err <= 1e-10,
        format!(
            "identical-batch gradient exactly zero: {zero_grad}, cross-model leaks {leaks}, surrogate rel err {surrogate_err:.1e} (<= 1e-10)"
        ),
    )
}

fn determinism_and_resume() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let full = {
        let mut c = gmm_config(7, 60);
        c.output.metrics_every = 5;
        c
    };
    let ds = full.dataset.build().unwrap();
    let run = |name: &str, cfg: &RunConfig| {
        let dir = RunDir::acquire(&tmp.path().join(name)).unwrap();
        train_loop(cfg, &ds, Some(&dir)).unwrap();
        dir
    };
    let a = run("a", &full);
    let b = run("b", &full);
    let csv = |d: &RunDir| std::fs::read(d.path().join("metrics.csv")).unwrap();
    let same_csv = csv(&a) == csv(&b);

    let mut half = full.clone();
    half.train.total_steps = 30;
    let c = run("c", &half);
    let (state, _) = checkpoint::load(&c.checkpoint_path(30), Some(&full.resolved_model().unwrap())).unwrap();
    continue_training(&full, &ds, state, Some(&c)).unwrap();
    let ck = |d: &RunDir| std::fs::read(d.checkpoint_path(60)).unwrap();
    let same_resume = ck(&a) == ck(&c) && csv(&a) == csv(&c);
    (
        same_csv && same_resume,
        format!("identical metrics CSV: {same_csv}, resume at 30 equals uninterrupted 60: {same_resume}"),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Verdict); 12] = [
        ("autodiff gradients", autodiff_gradients),
        ("langevin stationarity", langevin_stationarity),
        ("posterior oracle", posterior_oracle),
        ("cooperative vs mle-ebm", cooperative_vs_mle),
        ("shared vs independent generator", shared_vs_independent_generator),
        ("joint vs independent inference", joint_vs_independent_inference),
        ("glyph coherence", glyph_coherence),
        ("refinement monotonicity", refinement_monotonicity),
        ("latent probe", latent_probe),
        ("k_x ablation", k_ablation),
        ("fixed point and hygiene", fixed_point_and_hygiene),
        ("determinism and resume", determinism_and_resume),
    ];
    // ACCEPTANCE_ONLY=3,7 runs a subset while iterating locally.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let (pass, detail) = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        // Written to the raw handle so the line shows without --nocapture.
        let line = format!("criterion {:>2} {:<32} {}  {detail}\n", i + 1, name, if pass { "PASS" } else { "FAIL" });
        let _ = std::io::stderr().lock().write_all(line.as_bytes());
        if !pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
