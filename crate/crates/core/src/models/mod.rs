//! Energy network, shared-latent generator and mixture-of-experts inference.

mod energy;
mod generator;
mod inference;
mod mlp;

pub use energy::{BoundEnergy, EnergyParams};
pub use generator::{BoundGenerator, GeneratorParams};
pub use inference::{
    inference_sample, moe_log_prob, reparameterize, BoundExpert, BoundInference, Encoder,
    GaussianExpert, InferenceParams, LOG_VAR_MAX, LOG_VAR_MIN,
};
pub use mlp::{Activation, BoundLinear, BoundMlp, Linear, Mlp};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    /// One latent drives every decoder.
    Shared,
    /// Each modality reads its own latent block.
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceCoupling {
    Joint,
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Per-modality data widths. Empty means "take them from the dataset".
    pub modality_dims: Vec<usize>,
    pub latent_dim: usize,
    /// Width of each modality-specific latent `w_i`; 0 disables them.
    pub modality_latent_dim: usize,
    pub energy_hidden: Vec<usize>,
    pub energy_feature_dim: usize,
    pub aggregator_hidden: Vec<usize>,
    pub generator_hidden: Vec<usize>,
    pub inference_hidden: Vec<usize>,
    pub activation: Activation,
    pub decoder_sigma: f64,
    pub coupling: Coupling,
    pub inference_coupling: InferenceCoupling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modality_dims: Vec::new(),
            latent_dim: 4,
            modality_latent_dim: 0,
            energy_hidden: vec![32],
            energy_feature_dim: 16,
            aggregator_hidden: vec![32],
            generator_hidden: vec![32],
            inference_hidden: vec![32],
            activation: Activation::Tanh,
            decoder_sigma: std::f64::consts::FRAC_1_SQRT_2,
            coupling: Coupling::Shared,
            inference_coupling: InferenceCoupling::Joint,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modality_dims.is_empty() {
            return Err(Error::Config("model.modality_dims: need at least one modality".into()));
        }
        if self.modality_dims.contains(&0) {
            return Err(Error::Config("model.modality_dims: zero-width modality".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("model.latent_dim must be >= 1".into()));
        }
        if !(self.decoder_sigma > 0.0 && self.decoder_sigma.is_finite()) {
            return Err(Error::Config("model.decoder_sigma must be > 0".into()));
        }
        if self.energy_feature_dim == 0 {
            return Err(Error::Config("model.energy_feature_dim must be >= 1".into()));
        }
        for (name, widths) in [
            ("energy_hidden", &self.energy_hidden),
            ("aggregator_hidden", &self.aggregator_hidden),
            ("generator_hidden", &self.generator_hidden),
            ("inference_hidden", &self.inference_hidden),
        ] {
            if widths.contains(&0) {
                return Err(Error::Config(format!("model.{name}: zero-width layer")));
            }
        }
        Ok(())
    }

    pub fn num_modalities(&self) -> usize {
        self.modality_dims.len()
    }

    /// Width of the latent `z`: `d_z`, or `M * d_z` when every modality owns
    /// a separate block.
    pub fn latent_width(&self) -> usize {
        match self.coupling {
            Coupling::Shared => self.latent_dim,
            Coupling::Independent => self.latent_dim * self.num_modalities(),
        }
    }

    /// Columns of `z` read by decoder `i`.
    pub fn latent_block(&self, i: usize) -> (usize, usize) {
        match self.coupling {
            Coupling::Shared => (0, self.latent_dim),
            Coupling::Independent => (i * self.latent_dim, self.latent_dim),
        }
    }

    /// Gaussian observation log-variance `2 ln sigma`.
    pub fn decoder_log_var(&self) -> f64 {
        2.0 * self.decoder_sigma.ln()
    }
}

/// Ordered per-modality tensors sharing the leading batch dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalBatch {
    pub modalities: Vec<Tensor>,
}

impl MultimodalBatch {
    pub fn new(modalities: Vec<Tensor>) -> Result<Self> {
        let b = modalities
            .first()
            .ok_or_else(|| Error::invalid("batch with zero modalities"))?
            .rows();
        for m in &modalities {
            if m.ndim() != 2 || m.rows() != b {
                return Err(Error::invalid(format!(
                    "modality shape {:?} does not share batch size {b}",
                    m.shape()
                )));
            }
        }
        Ok(Self { modalities })
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn batch_size(&self) -> usize {
        self.modalities[0].rows()
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.modalities.len() != config.num_modalities() {
            return Err(Error::invalid(format!(
                "expected {} modalities, got {}",
                config.num_modalities(),
                self.modalities.len()
            )));
        }
        for (i, (m, &d)) in self.modalities.iter().zip(&config.modality_dims).enumerate() {
            if m.ndim() != 2 || m.shape()[1] != d || m.rows() != self.batch_size() {
                return Err(Error::Shape {
                    op: "modality",
                    lhs: m.shape().to_vec(),
                    rhs: vec![self.batch_size(), config.modality_dims[i]],
                });
            }
        }
        Ok(())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            modalities: self.modalities.iter().map(|m| m.select_rows(idx)).collect(),
        }
    }

    pub fn repeat_rows(&self, times: usize) -> Self {
        Self {
            modalities: self.modalities.iter().map(|m| m.repeat_rows(times)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.modalities.iter().all(Tensor::is_finite)
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.modalities
            .iter()
            .map(|m| {
                if trainable {
                    tape.var(m.clone())
                } else {
                    tape.constant(m.clone())
                }
            })
            .collect()
    }
}

/// Shared latent `z` plus optional modality-specific latents `w_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub z: Tensor,
    pub w: Vec<Tensor>,
}

impl LatentState {
    pub fn new(z: Tensor) -> Self {
        Self { z, w: Vec::new() }
    }

    /// Draws from the standard-normal prior over `z` and every `w_i`.
    pub fn sample_prior(config: &ModelConfig, batch: usize, rng: &mut RngStream) -> Self {
        let z = rng.normal_tensor(&[batch, config.latent_width()]);
        let w = if config.modality_latent_dim > 0 {
            (0..config.num_modalities())
                .map(|_| rng.normal_tensor(&[batch, config.modality_latent_dim]))
                .collect()
        } else {
            Vec::new()
        };
        Self { z, w }
    }

    pub fn batch_size(&self) -> usize {
        self.z.rows()
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.z.ndim() != 2 || self.z.shape()[1] != config.latent_width() {
            return Err(Error::Shape {
                op: "latent",
                lhs: self.z.shape().to_vec(),
                rhs: vec![self.z.rows(), config.latent_width()],
            });
        }
        let want_w = if config.modality_latent_dim > 0 { config.num_modalities() } else { 0 };
        if self.w.len() != want_w {
            return Err(Error::invalid(format!(
                "expected {want_w} modality latents, got {}",
                self.w.len()
            )));
        }
        for w in &self.w {
            if w.shape() != [self.z.rows(), config.modality_latent_dim] {
                return Err(Error::Shape {
                    op: "modality latent",
                    lhs: w.shape().to_vec(),
                    rhs: vec![self.z.rows(), config.modality_latent_dim],
                });
            }
        }
        Ok(())
    }

    /// All latent tensors in order `z, w_1, .., w_M`.
    pub fn parts(&self) -> Vec<&Tensor> {
        std::iter::once(&self.z).chain(&self.w).collect()
    }

    pub fn from_parts(mut parts: Vec<Tensor>) -> Self {
        let z = parts.remove(0);
        Self { z, w: parts }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            z: self.z.select_rows(idx),
            w: self.w.iter().map(|w| w.select_rows(idx)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|t| t.is_finite())
    }
}

/// Bound latent state on a tape.
#[derive(Clone)]
pub struct LatentVars<'t> {
    pub z: Var<'t>,
    pub w: Vec<Var<'t>>,
}

impl<'t> LatentVars<'t> {
    pub fn bind(state: &LatentState, tape: &'t Tape, trainable: bool) -> Self {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.var(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Self {
            z: leaf(&state.z),
            w: state.w.iter().map(leaf).collect(),
        }
    }

    pub fn parts(&self) -> Vec<Var<'t>> {
        std::iter::once(self.z).chain(self.w.iter().copied()).collect()
    }
}

/// Flat, ordered view of a model's parameter tensors.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Energy (alpha), generator (omega) and inference (phi) parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelTriple {
    pub config: ModelConfig,
    pub energy: EnergyParams,
    pub generator: GeneratorParams,
    pub inference: InferenceParams,
}

impl ModelTriple {
    pub fn init(config: &ModelConfig, rng: &RngStream) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            energy: EnergyParams::init(config, &mut rng.substream("init/energy"))?,
            generator: GeneratorParams::init(config, &mut rng.substream("init/generator"))?,
            inference: InferenceParams::init(config, &mut rng.substream("init/inference"))?,
        })
    }
}

/// Sum over feature columns of elementwise Gaussian log-densities: `[B, D] -> [B, 1]`.
pub(crate) fn diag_gaussian_log_prob<'t>(
    x: &Var<'t>,
    mean: &Var<'t>,
    log_var: &Var<'t>,
) -> Result<Var<'t>> {
    Var::gaussian_log_density(x, mean, log_var)?.sum_axis(1)
}

/// Standard-normal log-density summed over columns.
pub(crate) fn standard_normal_log_prob<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let d = x.shape()[1] as f64;
    Ok(x.square().sum_axis(1)?.scale(-0.5).add_scalar(-half_log_2pi * d))
}
