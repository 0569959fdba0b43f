//! The three per-step objectives. Every sample argument is treated as a
//! constant; only the named model's parameters are placed on the tape.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{
    moe_log_prob, BoundExpert, EnergyParams, GeneratorParams, InferenceCoupling, InferenceParams,
    LatentState, LatentVars, ModelConfig, MultimodalBatch,
};
use crate::samplers::LangevinConfig;
use crate::tensor::Tensor;

/// A scalar loss with its gradient, one tensor per parameter in
/// [`crate::models::Parameters::tensors`] order.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

fn finish<'t>(tape: &'t Tape, loss: Var<'t>, params: &[Var<'t>], what: &str) -> Result<LossGrad> {
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::NonFinite { what: what.into() });
    }
    let g = tape.backward(loss)?;
    Ok(LossGrad {
        loss: value,
        grads: params.iter().map(|p| g.wrt(p)).collect(),
    })
}

/// EBM loss plus the mean scores `F` on the data and revised batches.
#[derive(Clone, Debug)]
pub struct EbmLoss {
    pub loss_grad: LossGrad,
    pub mean_f_data: f64,
    pub mean_f_revised: f64,
}

/// Divisor `(noise_scale / step_size)^2` applied to the EBM loss.
pub fn ebm_loss_scale(cfg_x: &LangevinConfig) -> f64 {
    (cfg_x.noise_scale / cfg_x.step_size).powi(2)
}

/// `(mean F(X_revised) - mean F(X_data)) / (n / s)^2`. Minimizing it raises
/// the score of data relative to revised samples.
pub fn ebm_loss_and_grad(
    energy: &EnergyParams,
    x_data: &MultimodalBatch,
    x_revised: &MultimodalBatch,
    cfg_x: &LangevinConfig,
) -> Result<EbmLoss> {
    let scale = ebm_loss_scale(cfg_x);
    if !(scale > 0.0) {
        return Err(Error::invalid("EBM loss scale must be positive"));
    }
    let tape = Tape::new();
    let bound = energy.bind(&tape, true);
    let f_data = bound.energy(&x_data.bind(&tape, false))?.mean();
    let f_rev = bound.energy(&x_revised.bind(&tape, false))?.mean();
    let loss = f_rev.sub(&f_data)?.scale(1.0 / scale);
    let mean_f_data = f_data.item();
    let mean_f_revised = f_rev.item();
    Ok(EbmLoss {
        loss_grad: finish(&tape, loss, &bound.vars(), "ebm_loss")?,
        mean_f_data,
        mean_f_revised,
    })
}

#[derive(Clone, Debug)]
pub struct GeneratorLoss {
    pub loss_grad: LossGrad,
    /// Reconstruction of `X_data` from the revised posterior latents.
    pub recon: f64,
    /// Regression of `mu(z_prior)` onto the EBM-revised sample.
    pub sync: f64,
}

/// `recon + sync`, both batch means of `sum_i ||x_i - mu_i(z)||^2 / (2 sigma^2)`.
/// `recon` averages over the per-expert revised latents.
pub fn generator_loss_and_grad(
    config: &ModelConfig,
    generator: &GeneratorParams,
    x_data: &MultimodalBatch,
    z_phi_revised: &[LatentState],
    z_prior: &LatentState,
    x_omega_revised: &MultimodalBatch,
) -> Result<GeneratorLoss> {
    if z_phi_revised.is_empty() {
        return Err(Error::invalid("generator loss needs at least one revised latent set"));
    }
    let tape = Tape::new();
    let bound = generator.bind(config, &tape, true);
    let xs = x_data.bind(&tape, false);
    let mut recon: Option<Var> = None;
    for z in z_phi_revised {
        let lat = LatentVars::bind(z, &tape, false);
        let r = bound.reconstruction_error(&xs, &lat)?.mean();
        recon = Some(match recon {
            Some(acc) => acc.add(&r)?,
            None => r,
        });
    }
    let recon = recon.expect("non-empty").scale(1.0 / z_phi_revised.len() as f64);
    let lat = LatentVars::bind(z_prior, &tape, false);
    let sync = bound
        .reconstruction_error(&x_omega_revised.bind(&tape, false), &lat)?
        .mean();
    let (recon_v, sync_v) = (recon.item(), sync.item());
    if !recon_v.is_finite() {
        return Err(Error::NonFinite { what: "generator_recon_loss".into() });
    }
    if !sync_v.is_finite() {
        return Err(Error::NonFinite { what: "generator_sync_loss".into() });
    }
    let loss = recon.add(&sync)?;
    Ok(GeneratorLoss {
        loss_grad: finish(&tape, loss, &bound.vars(), "generator_loss")?,
        recon: recon_v,
        sync: sync_v,
    })
}

/// Log-density of `latent` under the inference model given `experts`,
/// `[B, 1]`. `only` restricts the shared part to a single expert.
fn latent_log_q<'t>(
    experts: &[BoundExpert<'t>],
    w_experts: &[BoundExpert<'t>],
    latent: &LatentVars<'t>,
    only: Option<usize>,
) -> Result<Var<'t>> {
    let mut lp = match only {
        Some(e) => experts[e].log_prob(&latent.z)?,
        None => moe_log_prob(experts, &latent.z)?,
    };
    for (we, w) in w_experts.iter().zip(&latent.w) {
        lp = lp.add(&we.log_prob(w)?)?;
    }
    Ok(lp)
}

/// Negative mean log-density of the revised latents under the experts
/// encoded from `X_data`, plus that of `z_prior` under the experts encoded
/// from the EBM-revised sample. Joint inference scores with the full
/// mixture; independent inference scores each expert's own latents.
pub fn inference_loss_and_grad(
    config: &ModelConfig,
    inference: &InferenceParams,
    z_phi_revised: &[LatentState],
    x_data: &MultimodalBatch,
    z_prior: &LatentState,
    x_omega_revised: &MultimodalBatch,
) -> Result<LossGrad> {
    let m = config.num_modalities();
    if z_phi_revised.len() != m {
        return Err(Error::invalid(format!(
            "inference loss expects {m} revised latent sets, got {}",
            z_phi_revised.len()
        )));
    }
    let tape = Tape::new();
    let bound = inference.bind(&tape, true);
    let xs = x_data.bind(&tape, false);
    let experts = bound.encode(&xs)?;
    let w_experts = bound.encode_w(&xs)?;
    let xr = x_omega_revised.bind(&tape, false);
    let experts_r = bound.encode(&xr)?;
    let w_experts_r = bound.encode_w(&xr)?;
    let independent = config.inference_coupling == InferenceCoupling::Independent;

    let mut data_term: Option<Var> = None;
    for (r, z) in z_phi_revised.iter().enumerate() {
        let lat = LatentVars::bind(z, &tape, false);
        let lp = latent_log_q(&experts, &w_experts, &lat, independent.then_some(r))?.mean();
        data_term = Some(match data_term {
            Some(acc) => acc.add(&lp)?,
            None => lp,
        });
    }
    let data_term = data_term.expect("non-empty").scale(1.0 / m as f64);

    let lat = LatentVars::bind(z_prior, &tape, false);
    let synth_term = if independent {
        let mut acc: Option<Var> = None;
        for r in 0..m {
            let lp = latent_log_q(&experts_r, &w_experts_r, &lat, Some(r))?.mean();
            acc = Some(match acc {
                Some(a) => a.add(&lp)?,
                None => lp,
            });
        }
        acc.expect("non-empty").scale(1.0 / m as f64)
    } else {
        latent_log_q(&experts_r, &w_experts_r, &lat, None)?.mean()
    };
    let loss = data_term.add(&synth_term)?.neg();
    finish(&tape, loss, &bound.vars(), "inference_loss")
}
