//! Unadjusted Langevin kernels in data space and latent space, and the two
//! MCMC-revised draws used by cooperative training.
//!
//! Every kernel uses the two-parameter update
//!
//! ```text
//! x <- x + 0.5 * step_size^2 * grad log_target(x) + noise_scale * eps
//! ```
//!
//! The classical form `x + s * grad + sqrt(2 s) * eps` is
//! `LangevinConfig::from_classical(s, k)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{
    inference_sample, standard_normal_log_prob, GaussianExpert, InferenceCoupling, LatentState,
    LatentVars, ModelConfig, ModelTriple, MultimodalBatch,
};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Chains abort once any coordinate leaves `[-DIVERGENCE_BOUND, DIVERGENCE_BOUND]`.
pub const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LangevinConfig {
    pub steps: usize,
    pub step_size: f64,
    pub noise_scale: f64,
    pub record_trajectory: bool,
    /// Trajectory stride when `record_trajectory` is set.
    pub record_every: usize,
    /// Outputs carry no gradient path back into the chain. Differentiating
    /// through the chain would need second derivatives, so only `true` is
    /// accepted.
    pub stop_gradient: bool,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        Self::data_space()
    }
}

impl LangevinConfig {
    /// 30 steps, step size 0.1, noise 0.001.
    pub fn data_space() -> Self {
        Self {
            steps: 30,
            step_size: 0.1,
            noise_scale: 0.001,
            record_trajectory: false,
            record_every: 2,
            stop_gradient: true,
        }
    }

    /// 30 steps, step size 0.1, noise 0.1.
    pub fn latent_space() -> Self {
        Self {
            noise_scale: 0.1,
            ..Self::data_space()
        }
    }

    /// Maps `x + s grad + sqrt(2 s) eps` onto the two-parameter form.
    pub fn from_classical(s: f64, steps: usize) -> Self {
        let v = (2.0 * s).sqrt();
        Self {
            steps,
            step_size: v,
            noise_scale: v,
            ..Self::data_space()
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    /// Coefficient on the gradient, `step_size^2 / 2`.
    pub fn drift(&self) -> f64 {
        0.5 * self.step_size * self.step_size
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("{section}.step_size must be > 0")));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!("{section}.noise_scale must be >= 0")));
        }
        if self.record_trajectory && self.record_every == 0 {
            return Err(Error::Config(format!("{section}.record_every must be >= 1")));
        }
        if !self.stop_gradient {
            return Err(Error::Config(format!(
                "{section}.stop_gradient = false is not supported"
            )));
        }
        Ok(())
    }
}

/// Per-step record of one chain run over a batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChainRecord {
    /// `(step, state tensors)` every `record_every` steps, including step 0
    /// and the final step.
    pub states: Vec<(usize, Vec<Tensor>)>,
    /// `profile[k][b]`: target log-density (energy for data chains) of item
    /// `b` after `k` steps. Length is `steps + 1`.
    pub profile: Vec<Vec<f64>>,
}

impl ChainRecord {
    pub fn mean_profile(&self) -> Vec<f64> {
        self.profile
            .iter()
            .map(|p| p.iter().sum::<f64>() / p.len().max(1) as f64)
            .collect()
    }

    /// Fraction of items whose final profile value is at least the initial one.
    pub fn improved_fraction(&self) -> f64 {
        let (Some(first), Some(last)) = (self.profile.first(), self.profile.last()) else {
            return 1.0;
        };
        let n = first.len().max(1);
        first.iter().zip(last).filter(|(a, b)| b >= a).count() as f64 / n as f64
    }

    /// Fraction of step transitions, over items, where the profile did not
    /// decrease. Vacuously 1 for zero-step chains.
    pub fn monotone_fraction(&self) -> f64 {
        if self.profile.len() < 2 {
            return 1.0;
        }
        let mut ok = 0usize;
        let mut total = 0usize;
        for w in self.profile.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                total += 1;
                if b >= a {
                    ok += 1;
                }
            }
        }
        ok as f64 / total.max(1) as f64
    }

    /// Selects profile columns and state rows, e.g. to split stacked chains.
    fn select(&self, idx: &[usize]) -> ChainRecord {
        ChainRecord {
            states: self
                .states
                .iter()
                .map(|(k, s)| (*k, s.iter().map(|t| t.select_rows(idx)).collect()))
                .collect(),
            profile: self
                .profile
                .iter()
                .map(|p| idx.iter().map(|&i| p[i]).collect())
                .collect(),
        }
    }
}

fn check_bounds(state: &[Tensor], step: usize) -> Result<()> {
    for t in state {
        if t.data().iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
            return Err(Error::Diverged { step });
        }
    }
    Ok(())
}

/// Generic Langevin driver. `log_target` maps the bound state to per-item
/// values `[B, 1]`; the chain ascends their sum.
pub fn langevin_chain<F>(
    init: Vec<Tensor>,
    cfg: &LangevinConfig,
    rng: &mut RngStream,
    log_target: F,
) -> Result<(Vec<Tensor>, ChainRecord)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    cfg.validate("langevin")?;
    let mut state = init;
    let mut record = ChainRecord::default();
    let drift = cfg.drift();
    for step in 0..=cfg.steps {
        if cfg.record_trajectory && (step % cfg.record_every == 0 || step == cfg.steps) {
            record.states.push((step, state.clone()));
        }
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = state.iter().map(|t| tape.var(t.clone())).collect();
        let target = log_target(&tape, &vars)?;
        let values = target.value().into_data();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step });
        }
        record.profile.push(values);
        if step == cfg.steps {
            break;
        }
        let grads = tape.backward(target.sum()).map_err(|e| match e {
            Error::NonFiniteAdjoint { .. } => Error::Diverged { step },
            other => other,
        })?;
        for (s, v) in state.iter_mut().zip(&vars) {
            let g = grads.wrt(v);
            s.axpy(drift, &g)?;
            if cfg.noise_scale > 0.0 {
                let eps = rng.normal_tensor(s.shape());
                s.axpy(cfg.noise_scale, &eps)?;
            }
        }
        check_bounds(&state, step + 1)?;
    }
    Ok((state, record))
}

/// Data-space kernel: ascends the energy jointly over all modalities.
pub fn langevin_data_chain(
    x0: &MultimodalBatch,
    models: &ModelTriple,
    cfg: &LangevinConfig,
    rng: &mut RngStream,
) -> Result<(MultimodalBatch, ChainRecord)> {
    x0.check(&models.config)?;
    let energy = &models.energy;
    let (state, record) = langevin_chain(x0.modalities.clone(), cfg, rng, |tape, xs| {
        energy.bind(tape, false).energy(xs)
    })?;
    Ok((MultimodalBatch::new(state)?, record))
}

/// Unnormalized log posterior `log p(X_O | z, W) + log p0(z) + sum log p0(w_i)`
/// per item.
fn log_joint<'t>(
    models: &ModelTriple,
    tape: &'t Tape,
    x: &MultimodalBatch,
    parts: &[Var<'t>],
    mask: Option<&[bool]>,
) -> Result<Var<'t>> {
    let g = models.generator.bind(&models.config, tape, false);
    let latent = LatentVars {
        z: parts[0],
        w: parts[1..].to_vec(),
    };
    let xs = x.bind(tape, false);
    let mut total = g.log_likelihood(&xs, &latent, mask)?;
    for p in parts {
        total = total.add(&standard_normal_log_prob(p)?)?;
    }
    Ok(total)
}

fn posterior_chain(
    z0: &LatentState,
    x: &MultimodalBatch,
    models: &ModelTriple,
    mask: Option<&[bool]>,
    cfg: &LangevinConfig,
    rng: &mut RngStream,
) -> Result<(LatentState, ChainRecord)> {
    x.check(&models.config)?;
    z0.check(&models.config)?;
    if z0.batch_size() != x.batch_size() {
        return Err(Error::invalid(format!(
            "latent batch {} vs data batch {}",
            z0.batch_size(),
            x.batch_size()
        )));
    }
    let init = z0.parts().into_iter().cloned().collect();
    let (state, record) = langevin_chain(init, cfg, rng, |tape, parts| {
        log_joint(models, tape, x, parts, mask)
    })?;
    Ok((LatentState::from_parts(state), record))
}

/// Latent-space kernel targeting the generator posterior `p(z, W | X)`.
pub fn langevin_posterior_chain(
    z0: &LatentState,
    x: &MultimodalBatch,
    models: &ModelTriple,
    cfg: &LangevinConfig,
    rng: &mut RngStream,
) -> Result<(LatentState, ChainRecord)> {
    posterior_chain(z0, x, models, None, cfg, rng)
}

/// Latent-space kernel targeting `p(z | X_O)` for the observed subset `O`.
/// Unobserved entries of `x` are ignored but must have the configured shape.
pub fn langevin_subset_posterior(
    z0: &LatentState,
    x: &MultimodalBatch,
    observed: &[bool],
    models: &ModelTriple,
    cfg: &LangevinConfig,
    rng: &mut RngStream,
) -> Result<(LatentState, ChainRecord)> {
    if observed.len() != models.config.num_modalities() {
        return Err(Error::invalid(format!(
            "observed mask has {} entries for {} modalities",
            observed.len(),
            models.config.num_modalities()
        )));
    }
    if !observed.iter().any(|&o| o) {
        return Err(Error::invalid("subset posterior needs at least one observed modality"));
    }
    posterior_chain(z0, x, models, Some(observed), cfg, rng)
}

/// A draw from the EBM-revised generator density.
#[derive(Clone, Debug)]
pub struct OmegaDraw {
    pub z_prior: LatentState,
    pub x_init: MultimodalBatch,
    pub x_revised: MultimodalBatch,
    pub record: ChainRecord,
}

/// `z ~ p0`, `X_init = mu(z)` (plus `sigma * eps` when `observation_noise`),
/// then `X_revised` from the data-space kernel.
pub fn draw_omega(
    models: &ModelTriple,
    batch: usize,
    cfg_x: &LangevinConfig,
    observation_noise: bool,
    rng: &mut RngStream,
) -> Result<OmegaDraw> {
    let cfg = &models.config;
    let z_prior = LatentState::sample_prior(cfg, batch, rng);
    let mut means = models.generator.decode(cfg, &z_prior)?;
    if observation_noise {
        for m in &mut means {
            let eps = rng.normal_tensor(m.shape());
            m.axpy(cfg.decoder_sigma, &eps)?;
        }
    }
    let x_init = MultimodalBatch::new(means)?;
    let (x_revised, record) = langevin_data_chain(&x_init, models, cfg_x, rng)?;
    Ok(OmegaDraw {
        z_prior,
        x_init,
        x_revised,
        record,
    })
}

/// Per-expert draws from the revised posterior.
#[derive(Clone, Debug)]
pub struct PhiDraw {
    pub experts: Vec<GaussianExpert>,
    pub w_experts: Vec<GaussianExpert>,
    /// One initial latent per expert.
    pub z_init: Vec<LatentState>,
    pub z_revised: Vec<LatentState>,
    pub records: Vec<ChainRecord>,
}

fn sample_w(w_experts: &[GaussianExpert], rng: &mut RngStream) -> Result<Vec<Tensor>> {
    inference_sample(w_experts, rng)
}

/// Encodes `X_data`, draws one latent per expert, and refines each with the
/// posterior kernel. With joint inference every chain conditions on all
/// modalities; with independent inference expert `i` conditions on `x_i`
/// alone.
pub fn draw_phi(
    x_data: &MultimodalBatch,
    models: &ModelTriple,
    cfg_z: &LangevinConfig,
    rng: &mut RngStream,
) -> Result<PhiDraw> {
    let config: &ModelConfig = &models.config;
    x_data.check(config)?;
    let (experts, w_experts) = models.inference.encode(x_data)?;
    let zs = inference_sample(&experts, rng)?;
    let z_init: Vec<LatentState> = zs
        .into_iter()
        .map(|z| Ok(LatentState { z, w: sample_w(&w_experts, rng)? }))
        .collect::<Result<_>>()?;
    let m = experts.len();
    let b = x_data.batch_size();

    let (z_revised, records) = match config.inference_coupling {
        InferenceCoupling::Joint => {
            // Chains are per-item, so all experts run as one stacked batch.
            let stacked = LatentState {
                z: Tensor::concat(&z_init.iter().map(|s| &s.z).collect::<Vec<_>>(), 0)?,
                w: (0..z_init[0].w.len())
                    .map(|j| Tensor::concat(&z_init.iter().map(|s| &s.w[j]).collect::<Vec<_>>(), 0))
                    .collect::<Result<_>>()?,
            };
            let x_rep = x_data.repeat_rows(m);
            let (rev, rec) = langevin_posterior_chain(&stacked, &x_rep, models, cfg_z, rng)?;
            let mut revised = Vec::with_capacity(m);
            let mut records = Vec::with_capacity(m);
            for e in 0..m {
                let idx: Vec<usize> = (e * b..(e + 1) * b).collect();
                revised.push(rev.select_rows(&idx));
                records.push(rec.select(&idx));
            }
            (revised, records)
        }
        InferenceCoupling::Independent => {
            let mut revised = Vec::with_capacity(m);
            let mut records = Vec::with_capacity(m);
            for (e, z0) in z_init.iter().enumerate() {
                let mut mask = vec![false; m];
                mask[e] = true;
                let (rev, rec) = langevin_subset_posterior(z0, x_data, &mask, models, cfg_z, rng)?;
                revised.push(rev);
                records.push(rec);
            }
            (revised, records)
        }
    };
    Ok(PhiDraw {
        experts,
        w_experts,
        z_init,
        z_revised,
        records,
    })
}

/// Unconditional samples: prior draw, decode, `cfg_x` steps of data-space
/// refinement.
pub fn sample_unconditional(
    models: &ModelTriple,
    n: usize,
    cfg_x: &LangevinConfig,
    rng: &mut RngStream,
) -> Result<MultimodalBatch> {
    Ok(draw_omega(models, n, cfg_x, false, rng)?.x_revised)
}

/// Short-run samples started from uniform noise on `[-1, 1]`.
pub fn sample_from_noise(
    models: &ModelTriple,
    n: usize,
    cfg_x: &LangevinConfig,
    rng: &mut RngStream,
) -> Result<MultimodalBatch> {
    let x0 = MultimodalBatch::new(
        models
            .config
            .modality_dims
            .iter()
            .map(|&d| rng.uniform_tensor(&[n, d], -1.0, 1.0))
            .collect(),
    )?;
    Ok(langevin_data_chain(&x0, models, cfg_x, rng)?.0)
}

/// Cross-modal generation from the `observed` modalities of `x`. Each item
/// starts from a draw of one observed expert picked uniformly, is refined by
/// `cfg_z` steps of the subset posterior, and is decoded into every modality.
/// Unobserved columns of `x` are never read. The record profiles the
/// subset log-posterior.
pub fn sample_conditional(
    models: &ModelTriple,
    x: &MultimodalBatch,
    observed: &[bool],
    cfg_z: &LangevinConfig,
    rng: &mut RngStream,
) -> Result<(MultimodalBatch, ChainRecord)> {
    let config = &models.config;
    x.check(config)?;
    let chosen: Vec<usize> = (0..observed.len()).filter(|&i| observed.get(i) == Some(&true)).collect();
    if observed.len() != config.num_modalities() || chosen.is_empty() {
        return Err(Error::invalid("observed mask must cover every modality and select at least one"));
    }
    let b = x.batch_size();
    let experts: Vec<GaussianExpert> = chosen
        .iter()
        .map(|&i| models.inference.encode_one(i, &x.modalities[i]))
        .collect::<Result<_>>()?;
    let draws = inference_sample(&experts, rng)?;
    let width = config.latent_width();
    let mut z = Vec::with_capacity(b * width);
    for r in 0..b {
        let e = rng.below(chosen.len());
        z.extend_from_slice(draws[e].row(r));
    }
    let prior = LatentState::sample_prior(config, b, rng);
    let z0 = LatentState {
        z: Tensor::new(vec![b, width], z)?,
        w: prior.w,
    };
    let (z, record) = langevin_subset_posterior(&z0, x, observed, models, cfg_z, rng)?;
    Ok((MultimodalBatch::new(models.generator.decode(config, &z)?)?, record))
}
