use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::*;
use crate::autodiff::{finite_difference_check, Tape, Var};
use crate::datasets::DatasetSpec;
use crate::io::RunConfig;
use crate::metrics::{analytic_gaussian_posterior, GaussianMoments};
use crate::models::{LatentState, ModelConfig, ModelTriple, MultimodalBatch, Parameters};
use crate::rng::RngStream;
use crate::samplers::LangevinConfig;
use crate::tensor::Tensor;

fn config(dims: &[usize]) -> ModelConfig {
    ModelConfig {
        modality_dims: dims.to_vec(),
        latent_dim: 2,
        energy_hidden: vec![6],
        energy_feature_dim: 4,
        aggregator_hidden: vec![5],
        generator_hidden: vec![6],
        inference_hidden: vec![5],
        ..ModelConfig::default()
    }
}

fn batch(dims: &[usize], b: usize, seed: u64) -> MultimodalBatch {
    let mut rng = RngStream::new(seed, "batch");
    MultimodalBatch::new(dims.iter().map(|&d| rng.normal_tensor(&[b, d]).scale(0.7)).collect()).unwrap()
}

fn models(cfg: &ModelConfig, seed: u64) -> ModelTriple {
    ModelTriple::init(cfg, &RngStream::new(seed, "init")).unwrap()
}

fn latents(cfg: &ModelConfig, b: usize, seed: u64) -> LatentState {
    LatentState::sample_prior(cfg, b, &mut RngStream::new(seed, "latent"))
}

/// Leaf factory that substitutes `v` for parameter `k`.
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

#[test]
fn identical_batches_give_exactly_zero_energy_gradient() {
    let dims = [3, 2];
    let m = models(&config(&dims), 1);
    let x = batch(&dims, 8, 2);
    let out = ebm_loss_and_grad(&m.energy, &x, &x.clone(), &LangevinConfig::data_space()).unwrap();
    assert_eq!(out.loss_grad.loss, 0.0);
    for g in &out.loss_grad.grads {
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn energy_gradient_matches_fd() {
    let dims = [3, 2];
    let m = models(&config(&dims), 3);
    let (xd, xr) = (batch(&dims, 5, 4), batch(&dims, 5, 5));
    let cfg = LangevinConfig::from_classical(0.01, 1);
    let out = ebm_loss_and_grad(&m.energy, &xd, &xr, &cfg).unwrap();
    for (k, p) in m.energy.tensors().into_iter().enumerate() {
        let err = finite_difference_check(
            |v| {
                let tape = v.tape();
                let e = m.energy.bind_with(&mut swap_in(tape, k, v));
                let fd = e.energy(&xd.bind(tape, false))?.mean();
                let fr = e.energy(&xr.bind(tape, false))?.mean();
                fr.sub(&fd)
            },
            p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "param {k}: {err}");
        // The reported gradient is the same quantity.
        let tape = Tape::new();
        let v = tape.var(p.clone());
        let e = m.energy.bind_with(&mut swap_in(&tape, k, v));
        let l = e.energy(&xr.bind(&tape, false)).unwrap().mean().sub(&e.energy(&xd.bind(&tape, false)).unwrap().mean()).unwrap();
        let g = tape.backward(l).unwrap().wrt(&v);
        assert!(g.sub(&out.loss_grad.grads[k]).unwrap().max_abs() < 1e-12);
    }
}

#[test]
fn energy_loss_is_scaled_surrogate() {
    let dims = [3, 2];
    let m = models(&config(&dims), 6);
    let (xd, xr) = (batch(&dims, 7, 7), batch(&dims, 7, 8));
    let cfg = LangevinConfig::data_space();
    assert!((ebm_loss_scale(&cfg) - 1e-4).abs() < 1e-18);
    let out = ebm_loss_and_grad(&m.energy, &xd, &xr, &cfg).unwrap();
    let diff = out.mean_f_revised - out.mean_f_data;
    assert!((out.loss_grad.loss - diff / 1e-4).abs() <= 1e-10 * out.loss_grad.loss.abs().max(1.0));

    // Gradient of mean F(data) - mean F(revised), scaled by (s/n)^2.
    let tape = Tape::new();
    let e = m.energy.bind(&tape, true);
    let s = e
        .energy(&xd.bind(&tape, false))
        .unwrap()
        .mean()
        .sub(&e.energy(&xr.bind(&tape, false)).unwrap().mean())
        .unwrap();
    let g = tape.backward(s).unwrap();
    let k = (cfg.step_size / cfg.noise_scale).powi(2);
    for (v, got) in e.vars().iter().zip(&out.loss_grad.grads) {
        let want = g.wrt(v).scale(-k);
        let err = want.sub(got).unwrap().max_abs() / want.max_abs().max(1e-300);
        assert!(err < 1e-10, "{err}");
    }
}

#[test]
fn sync_term_vanishes_at_generator_output() {
    let dims = [3, 2];
    let cfg = config(&dims);
    let m = models(&cfg, 9);
    let z = latents(&cfg, 6, 1);
    let x_init = MultimodalBatch::new(m.generator.decode(&cfg, &z).unwrap()).unwrap();
    let zr = vec![latents(&cfg, 6, 2), latents(&cfg, 6, 3)];
    let out = generator_loss_and_grad(&cfg, &m.generator, &batch(&dims, 6, 4), &zr, &z, &x_init).unwrap();
    assert_eq!(out.sync, 0.0);
    assert!(out.recon > 0.0);
}

#[test]
fn linear_generator_gradient_matches_fd() {
    let dims = [3, 2];
    let mut cfg = config(&dims);
    cfg.generator_hidden = Vec::new();
    let m = models(&cfg, 10);
    let x = batch(&dims, 5, 11);
    let xr = batch(&dims, 5, 12);
    let zr = vec![latents(&cfg, 5, 4), latents(&cfg, 5, 5)];
    let zp = latents(&cfg, 5, 6);
    let out = generator_loss_and_grad(&cfg, &m.generator, &x, &zr, &zp, &xr).unwrap();
    assert!((out.loss_grad.loss - out.recon - out.sync).abs() < 1e-12);
    for (k, p) in m.generator.tensors().into_iter().enumerate() {
        let loss = |gen: &crate::models::GeneratorParams| {
            generator_loss_and_grad(&cfg, gen, &x, &zr, &zp, &xr).unwrap().loss_grad.loss
        };
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..p.len() {
            let mut plus = m.generator.clone();
            plus.tensors_mut()[k].data_mut()[i] += h;
            let mut minus = m.generator.clone();
            minus.tensors_mut()[k].data_mut()[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let ad = out.loss_grad.grads[k].data()[i];
            worst = worst.max((ad - fd).abs() / (fd.abs() + 1e-8));
        }
        assert!(worst < 1e-5, "param {k}: {worst}");
    }
}

#[test]
fn single_modality_recon_is_scaled_squared_error() {
    let dims = [4];
    let cfg = config(&dims);
    let m = models(&cfg, 13);
    let x = batch(&dims, 6, 14);
    let z = latents(&cfg, 6, 7);
    let mu = m.generator.decode(&cfg, &z).unwrap().remove(0);
    let sse: f64 = x.modalities[0].sub(&mu).unwrap().data().iter().map(|v| v * v).sum();
    let want = sse / 6.0 / (2.0 * cfg.decoder_sigma * cfg.decoder_sigma);
    let out = generator_loss_and_grad(&cfg, &m.generator, &x, &[z.clone()], &z, &x).unwrap();
    assert!((out.recon - want).abs() < 1e-12);
}

#[test]
fn inference_loss_at_expert_mean_is_gaussian_normalizer() {
    let dims = [3];
    let cfg = config(&dims);
    let m = models(&cfg, 15);
    let x = batch(&dims, 4, 16);
    let (experts, _) = m.inference.encode(&x).unwrap();
    assert!(experts[0].log_var.data().iter().all(|&v| v == 0.0));
    let z = LatentState::new(experts[0].mean.clone());
    let loss = inference_loss_and_grad(&cfg, &m.inference, &[z.clone()], &x, &z, &x).unwrap().loss;
    let d = cfg.latent_dim as f64;
    // Two terms, each D/2 log(2 pi).
    assert!((loss - d * (2.0 * PI).ln()).abs() < 1e-12, "{loss}");
}

#[test]
fn inference_gradient_matches_fd() {
    let dims = [3, 2];
    for coupling in [crate::models::InferenceCoupling::Joint, crate::models::InferenceCoupling::Independent] {
        let mut cfg = config(&dims);
        cfg.inference_coupling = coupling;
        let mut m = models(&cfg, 17);
        let mut r = RngStream::new(3, "lv");
        for e in &mut m.inference.encoders {
            e.log_var_head.weight = r.uniform_tensor(e.log_var_head.weight.shape(), -0.3, 0.3);
        }
        let x = batch(&dims, 4, 18);
        let xr = batch(&dims, 4, 19);
        let zr = vec![latents(&cfg, 4, 8), latents(&cfg, 4, 9)];
        let zp = latents(&cfg, 4, 10);
        let out = inference_loss_and_grad(&cfg, &m.inference, &zr, &x, &zp, &xr).unwrap();
        let loss = |p: &crate::models::InferenceParams| inference_loss_and_grad(&cfg, p, &zr, &x, &zp, &xr).unwrap().loss;
        for (k, p) in m.inference.tensors().into_iter().enumerate() {
            let h = 1e-5;
            let mut worst = 0.0f64;
            for i in 0..p.len() {
                let mut plus = m.inference.clone();
                plus.tensors_mut()[k].data_mut()[i] += h;
                let mut minus = m.inference.clone();
                minus.tensors_mut()[k].data_mut()[i] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let ad = out.grads[k].data()[i];
                worst = worst.max((ad - fd).abs() / (fd.abs() + 1e-8));
            }
            assert!(worst < 1e-5, "{coupling:?} param {k}: {worst}");
        }
    }
}

#[test]
fn inference_loss_invariant_to_expert_order() {
    let dims = [3, 3, 3];
    let cfg = config(&dims);
    let m = models(&cfg, 20);
    let x = batch(&dims, 5, 21);
    let xr = batch(&dims, 5, 22);
    let zr: Vec<LatentState> = (0..3).map(|i| latents(&cfg, 5, 30 + i)).collect();
    let zp = latents(&cfg, 5, 40);
    let base = inference_loss_and_grad(&cfg, &m.inference, &zr, &x, &zp, &xr).unwrap().loss;
    let perm = [2, 0, 1];
    let mut inf = m.inference.clone();
    inf.encoders = perm.iter().map(|&i| m.inference.encoders[i].clone()).collect();
    let px = MultimodalBatch::new(perm.iter().map(|&i| x.modalities[i].clone()).collect()).unwrap();
    let pxr = MultimodalBatch::new(perm.iter().map(|&i| xr.modalities[i].clone()).collect()).unwrap();
    let pzr: Vec<LatentState> = perm.iter().map(|&i| zr[i].clone()).collect();
    let permuted = inference_loss_and_grad(&cfg, &inf, &pzr, &px, &zp, &pxr).unwrap().loss;
    assert!((base - permuted).abs() < 1e-12 * base.abs().max(1.0));
}

#[test]
fn no_gradient_leaks_between_models() {
    let dims = [3, 2];
    let cfg = config(&dims);
    let m = models(&cfg, 23);
    let x = batch(&dims, 5, 24);
    let xr = batch(&dims, 5, 25);
    let zr = vec![latents(&cfg, 5, 11), latents(&cfg, 5, 12)];
    let zp = latents(&cfg, 5, 13);
    let cfg_x = LangevinConfig::data_space();
    let all = |t: &ModelTriple| {
        let e = ebm_loss_and_grad(&t.energy, &x, &xr, &cfg_x).unwrap().loss_grad;
        let g = generator_loss_and_grad(&cfg, &t.generator, &x, &zr, &zp, &xr).unwrap().loss_grad;
        let i = inference_loss_and_grad(&cfg, &t.inference, &zr, &x, &zp, &xr).unwrap();
        [e, g, i].map(|lg| (lg.loss.to_bits(), lg.grads))
    };
    let base = all(&m);
    let shift = |ts: Vec<&mut Tensor>| ts.into_iter().for_each(|t| *t = t.map(|v| v + 0.37));
    for which in 0..3 {
        let mut p = m.clone();
        match which {
            0 => shift(p.energy.tensors_mut()),
            1 => shift(p.generator.tensors_mut()),
            _ => shift(p.inference.tensors_mut()),
        }
        let now = all(&p);
        for other in (0..3).filter(|&o| o != which) {
            assert_eq!(now[other], base[other], "model {which} leaked into loss {other}");
        }
        assert_ne!(now[which].0, base[which].0);
    }
}

/// `E_{p(z|X)}[d log p(X|z) / d omega] = d log p(X) / d omega` for a linear
/// Gaussian generator, checked coordinate-wise by Monte Carlo over exact
/// posterior draws.
#[test]
fn posterior_score_identity() {
    let dims = [3, 2];
    let mut cfg = config(&dims);
    cfg.generator_hidden = Vec::new();
    cfg.decoder_sigma = 0.8;
    let m = models(&cfg, 26);
    let mut gen = m.generator.clone();
    let mut r = RngStream::new(4, "bias");
    for d in &mut gen.decoders {
        d.layers[0].bias = r.normal_tensor(d.layers[0].bias.shape()).scale(0.3);
    }
    let sigma = cfg.decoder_sigma;
    let x = batch(&dims, 1, 27);
    // x_i = A_i z + b_i + sigma eps with A_i = W_i^T.
    let loadings: Vec<Tensor> = gen.decoders.iter().map(|d| d.layers[0].weight.transpose().unwrap()).collect();
    let centred: Vec<Vec<f64>> = gen
        .decoders
        .iter()
        .zip(&x.modalities)
        .map(|(d, xi)| xi.sub(&d.layers[0].bias).unwrap().into_data())
        .collect();
    let post = analytic_gaussian_posterior(
        &loadings.iter().collect::<Vec<_>>(),
        sigma,
        &centred.iter().map(Vec::as_slice).collect::<Vec<_>>(),
        &GaussianMoments::standard(2),
    )
    .unwrap();

    // d log p(X) / d omega with X ~ N(b, A A^T + sigma^2 I).
    let a = DMatrix::from_row_slice(5, 2, &[loadings[0].data(), loadings[1].data()].concat());
    let c = &a * a.transpose() + DMatrix::identity(5, 5) * sigma * sigma;
    let ci = c.clone().try_inverse().unwrap();
    let r = DVector::from_vec(centred.concat());
    let alpha = &ci * &r;
    let d_b = alpha.clone();
    let d_a = (&alpha * alpha.transpose() - &ci) * &a;

    // Exact posterior draws.
    let n = 20_000;
    let l = post.cov.clone().cholesky().unwrap().l();
    let eps = RngStream::new(5, "post").normal_tensor(&[n, 2]);
    let mut per_sample: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut z_rows = Vec::with_capacity(2 * n);
    for s in 0..n {
        let z = &post.mean + &l * DVector::from_row_slice(eps.row(s));
        z_rows.extend(z.iter());
        let resid = &r - &a * &z;
        let gb = &resid / (sigma * sigma);
        // Score wrt W_i (= A_i^T) and b_i, laid out as the parameter tensors.
        let mut flat = Vec::new();
        let mut off = 0;
        for &di in &dims {
            for p in 0..2 {
                for q in 0..di {
                    flat.push(z[p] * gb[off + q]);
                }
            }
            flat.extend((0..di).map(|q| gb[off + q]));
            off += di;
        }
        per_sample.push(flat);
    }
    let mut want = Vec::new();
    let mut off = 0;
    for &di in &dims {
        for p in 0..2 {
            for q in 0..di {
                want.push(d_a[(off + q, p)]);
            }
        }
        want.extend((0..di).map(|q| d_b[off + q]));
        off += di;
    }
    let dim = want.len();
    for j in 0..dim {
        let vals: Vec<f64> = per_sample.iter().map(|s| s[j] - want[j]).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se + 1e-12, "coordinate {j}: mean {mean}, se {se}");
    }

    // The taped gradient of sum_s log p(X | z_s) equals the per-sample sum.
    let zs = LatentState::new(Tensor::new(vec![n, 2], z_rows).unwrap());
    let xs = MultimodalBatch::new(x.modalities.iter().map(|t| t.repeat_rows(n)).collect()).unwrap();
    let tape = Tape::new();
    let g = gen.bind(&cfg, &tape, true);
    let lat = crate::models::LatentVars::bind(&zs, &tape, false);
    let ll = g.log_likelihood(&xs.bind(&tape, false), &lat, None).unwrap().sum();
    let grads = tape.backward(ll).unwrap();
    let taped: Vec<f64> = g.vars().iter().flat_map(|v| grads.wrt(v).into_data()).collect();
    for j in 0..dim {
        let sum: f64 = per_sample.iter().map(|s| s[j]).sum();
        assert!((taped[j] - sum).abs() < 1e-8 * sum.abs().max(1.0), "coordinate {j}");
    }
}

fn run_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset = DatasetSpec {
        train_size: 64,
        test_size: 16,
        ..DatasetSpec::gmm2d(1)
    };
    cfg.model = ModelConfig {
        energy_hidden: vec![8],
        energy_feature_dim: 4,
        aggregator_hidden: vec![8],
        generator_hidden: vec![8],
        inference_hidden: vec![8],
        latent_dim: 2,
        ..ModelConfig::default()
    };
    cfg.train.batch_size = 8;
    cfg.train.total_steps = 4;
    cfg.output.metrics_every = 2;
    cfg.sampler_x.steps = 3;
    cfg.sampler_z.steps = 3;
    cfg
}

fn strip(r: &LossReport) -> LossReport {
    LossReport { wall_clock_secs: 0.0, ..r.clone() }
}

#[test]
fn train_steps_are_deterministic() {
    let cfg = run_cfg();
    let ds = cfg.dataset.build().unwrap();
    let run = || {
        let mut s = TrainState::init(&cfg).unwrap();
        let mut out = Vec::new();
        for k in 0..3 {
            let idx: Vec<usize> = (k * 8..(k + 1) * 8).collect();
            match train_step(&mut s, &ds.train.batch(&idx), &cfg).unwrap() {
                StepOutcome::Completed(r) => out.push(strip(&r)),
                StepOutcome::Aborted { error, .. } => panic!("{error}"),
            }
        }
        (out, s)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert!(a.iter().all(LossReport::is_finite));
    assert_eq!(a[2].step, 3);
}

#[test]
fn every_model_moves_once_per_step() {
    let cfg = run_cfg();
    let ds = cfg.dataset.build().unwrap();
    let mut s = TrainState::init(&cfg).unwrap();
    let before = s.models.clone();
    train_step(&mut s, &ds.train.batch(&[0, 1, 2, 3, 4, 5, 6, 7]), &cfg).unwrap();
    assert_ne!(s.models.energy, before.energy);
    assert_ne!(s.models.generator, before.generator);
    assert_ne!(s.models.inference, before.inference);
    assert_eq!((s.energy_opt.step, s.generator_opt.step, s.inference_opt.step), (1, 1, 1));
}

#[test]
fn mle_mode_updates_only_the_energy_model() {
    let mut cfg = run_cfg();
    cfg.train.mode = TrainMode::MleEbm;
    let ds = cfg.dataset.build().unwrap();
    let mut s = TrainState::init(&cfg).unwrap();
    let before = s.models.clone();
    let out = train_step(&mut s, &ds.train.batch(&[0, 1, 2, 3, 4, 5, 6, 7]), &cfg).unwrap();
    assert!(matches!(out, StepOutcome::Completed(_)));
    assert_ne!(s.models.energy, before.energy);
    assert_eq!(s.models.generator, before.generator);
    assert_eq!(s.models.inference, before.inference);
    assert_eq!(s.generator_opt.step, 0);
}

#[test]
fn numerical_failure_aborts_without_touching_parameters() {
    let cfg = run_cfg();
    let ds = cfg.dataset.build().unwrap();
    let mut s = TrainState::init(&cfg).unwrap();
    // Tanh saturates, so blow up the output layer only.
    let mut ts = s.models.energy.tensors_mut();
    let n = ts.len();
    *ts[n - 2] = ts[n - 2].scale(1e12);
    drop(ts);
    let before = s.clone();
    let out = train_step(&mut s, &ds.train.batch(&[0, 1, 2, 3, 4, 5, 6, 7]), &cfg).unwrap();
    let StepOutcome::Aborted { step, error } = out else {
        panic!("step should abort");
    };
    assert_eq!(step, 1);
    assert!(error.is_numerical());
    assert_eq!(s.models, before.models);
    assert_eq!(s.energy_opt, before.energy_opt);
    assert_eq!(s.aborted, 1);
    assert_ne!(s.rng.counter(), before.rng.counter());
}
