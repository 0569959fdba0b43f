use nalgebra::{DMatrix, DVector};

use super::diagnostics::chain_diagnostics;
use super::gaussian::{analytic_gaussian_posterior, frechet_distance_gaussians, grid_moments_2d, GaussianMoments};
use super::mmd::mmd_rbf_biased;
use crate::autodiff::{finite_difference_check, Tape, Var};
use crate::datasets::DatasetSpec;
use crate::error::Result;
use crate::models::{moe_log_prob, LatentState, LatentVars, ModelConfig, ModelTriple, Parameters};
use crate::rng::RngStream;
use crate::samplers::{langevin_chain, langevin_posterior_chain, LangevinConfig};
use crate::tensor::Tensor;

/// One analytic check: passes when `value <= threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.value <= self.threshold
    }
}

fn check(name: &'static str, value: f64, threshold: f64) -> OracleCheck {
    OracleCheck { name, value, threshold }
}

fn leaf<'t>(tape: &'t Tape, k: usize, v: Var<'t>) -> impl FnMut(&Tensor) -> Var<'t> {
    let mut idx = 0;
    move |t: &Tensor| {
        idx += 1;
        if idx - 1 == k { v } else { tape.constant(t.clone()) }
    }
}

/// Largest finite-difference error over every parameter of the three
/// networks at one random point.
fn network_gradients(seed: u64) -> Result<[f64; 3]> {
    let cfg = ModelConfig {
        modality_dims: vec![3, 2],
        latent_dim: 2,
        energy_hidden: vec![6],
        energy_feature_dim: 3,
        aggregator_hidden: vec![5],
        generator_hidden: vec![6],
        inference_hidden: vec![5],
        ..ModelConfig::default()
    };
    let mut m = ModelTriple::init(&cfg, &RngStream::new(seed, "oracle/init"))?;
    let mut rng = RngStream::new(seed, "oracle/points");
    for e in &mut m.inference.encoders {
        e.log_var_head.weight = rng.uniform_tensor(e.log_var_head.weight.shape(), -0.3, 0.3);
    }
    let xs: Vec<Tensor> = cfg.modality_dims.iter().map(|&d| rng.uniform_tensor(&[3, d], -1.0, 1.0)).collect();
    let z = LatentState::sample_prior(&cfg, 3, &mut rng).z;
    let h = 1e-4;
    let mut worst = [0.0f64; 3];
    for (k, p) in m.energy.tensors().into_iter().enumerate() {
        let e = finite_difference_check(
            |v| {
                let tape = v.tape();
                let x: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
                Ok(m.energy.bind_with(&mut leaf(tape, k, v)).energy(&x)?.sum())
            },
            p,
            h,
        )?;
        worst[0] = worst[0].max(e);
    }
    for (k, p) in m.generator.tensors().into_iter().enumerate() {
        let e = finite_difference_check(
            |v| {
                let tape = v.tape();
                let x: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
                let lat = LatentVars { z: tape.constant(z.clone()), w: Vec::new() };
                Ok(m.generator.bind_with(&cfg, &mut leaf(tape, k, v)).log_likelihood(&x, &lat, None)?.sum())
            },
            p,
            h,
        )?;
        worst[1] = worst[1].max(e);
    }
    for (k, p) in m.inference.tensors().into_iter().enumerate() {
        let e = finite_difference_check(
            |v| {
                let tape = v.tape();
                let x: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
                let experts = m.inference.bind_with(&mut leaf(tape, k, v)).encode(&x)?;
                Ok(moe_log_prob(&experts, &tape.constant(z.clone()))?.sum())
            },
            p,
            h,
        )?;
        worst[2] = worst[2].max(e);
    }
    Ok(worst)
}

/// Runs the analytic checks: network gradients against finite differences,
/// Langevin stationarity on a standard Gaussian, the conjugate posterior
/// against grid integration and against posterior chains, and closed forms
/// of the distribution distances.
pub fn oracle_suite(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut out = Vec::new();
    let fd = network_gradients(seed)?;
    out.push(check("fd_energy_max_rel_err", fd[0], 1e-5));
    out.push(check("fd_generator_max_rel_err", fd[1], 1e-5));
    out.push(check("fd_inference_max_rel_err", fd[2], 1e-5));

    let cfg = LangevinConfig {
        record_trajectory: true,
        record_every: 20,
        ..LangevinConfig::from_classical(0.05, 2000)
    };
    let (_, rec) = langevin_chain(vec![Tensor::full(&[512, 8], 2.0)], &cfg, &mut RngStream::new(seed, "oracle/gauss"), |_, xs| {
        Ok(xs[0].square().sum_axis(1)?.scale(-0.5))
    })?;
    let r = chain_diagnostics(&[rec], &GaussianMoments::standard(8), 500)?;
    out.push(check("stationary_mean_err", r.mean_error, 0.1));
    out.push(check("stationary_cov_rel_err", r.cov_rel_error, 0.15));

    let ds = DatasetSpec::linear_gaussian(2, vec![3, 3], 1.0, seed).build()?;
    let truth = ds.truth.clone().expect("linear-Gaussian data carries its truth");
    let model_cfg = ModelConfig {
        modality_dims: vec![3, 3],
        latent_dim: 2,
        generator_hidden: Vec::new(),
        decoder_sigma: truth.noise_std,
        ..ModelConfig::default()
    };
    let mut m = ModelTriple::init(&model_cfg, &RngStream::new(seed, "oracle/lg"))?;
    for (d, a) in m.generator.decoders.iter_mut().zip(&truth.loadings) {
        d.layers[0].weight = a.transpose()?;
        d.layers[0].bias = Tensor::zeros(d.layers[0].bias.shape());
    }
    let obs = ds.test.batch(&[0]);
    let observed: Vec<&[f64]> = obs.modalities.iter().map(Tensor::data).collect();
    let loadings: Vec<&Tensor> = truth.loadings.iter().collect();
    let post = analytic_gaussian_posterior(&loadings, truth.noise_std, &observed, &GaussianMoments::standard(2))?;
    let a = DMatrix::from_row_slice(6, 2, &[truth.loadings[0].data(), truth.loadings[1].data()].concat());
    let x = DVector::from_row_slice(&[observed[0], observed[1]].concat());
    let s2 = truth.noise_std * truth.noise_std;
    let sd = post.cov.diagonal().max().sqrt();
    let grid = grid_moments_2d(
        |u, v| {
            let z = DVector::from_row_slice(&[u, v]);
            -(&x - &a * &z).norm_squared() / (2.0 * s2) - 0.5 * z.norm_squared()
        },
        [post.mean[0], post.mean[1]],
        10.0 * sd,
        401,
    )?;
    out.push(check("posterior_vs_grid", (&grid.mean - &post.mean).amax().max((&grid.cov - &post.cov).amax()), 1e-3));

    let n = 1000;
    let chain = LangevinConfig {
        record_trajectory: true,
        record_every: 25,
        ..LangevinConfig::from_classical(0.01, 500)
    };
    let z0 = LatentState::sample_prior(&model_cfg, n, &mut RngStream::new(seed, "oracle/z0"));
    let (_, rec) = langevin_posterior_chain(&z0, &obs.repeat_rows(n), &m, &chain, &mut RngStream::new(seed, "oracle/post"))?;
    let r = chain_diagnostics(&[rec], &post, 250)?;
    out.push(check("posterior_chain_mean_err", r.mean_error, 0.05));
    out.push(check("posterior_chain_cov_rel_err", r.cov_rel_error, 0.10));

    // N(0, 1) vs N(1, 4): 1 + 1 + 4 - 2 * 2.
    let fr = frechet_distance_gaussians(
        &GaussianMoments::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0))?,
        &GaussianMoments::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 4.0))?,
    )?;
    out.push(check("frechet_closed_form_err", (fr - 2.0).abs(), 1e-12));
    let pts = RngStream::new(seed, "oracle/mmd").normal_tensor(&[200, 3]);
    out.push(check("mmd_identical_sets", mmd_rbf_biased(&pts, &pts, Some(1.0))?.abs(), 1e-12));
    Ok(out)
}
