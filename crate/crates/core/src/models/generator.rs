use super::mlp::leaf_binder;
use super::{
    diag_gaussian_log_prob, BoundMlp, LatentState, LatentVars, Mlp, ModelConfig, MultimodalBatch,
    Parameters,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Per-modality decoders `mu_i(z_block_i, w_i)` with a shared observation
/// std `sigma`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub decoders: Vec<Mlp>,
}

impl GeneratorParams {
    pub fn init(config: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        let decoders = config
            .modality_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let (_, len) = config.latent_block(i);
                let mut sizes = vec![len + config.modality_latent_dim];
                sizes.extend(&config.generator_hidden);
                sizes.push(d);
                Mlp::init(&sizes, config.activation, false, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { decoders })
    }

    pub fn bind<'t>(&self, config: &ModelConfig, tape: &'t Tape, trainable: bool) -> BoundGenerator<'t> {
        self.bind_with(config, &mut leaf_binder(tape, trainable))
    }

    /// Binds with caller-made leaves, requested in [`Parameters::tensors`] order.
    pub fn bind_with<'t>(&self, config: &ModelConfig, leaf: &mut dyn FnMut(&Tensor) -> Var<'t>) -> BoundGenerator<'t> {
        BoundGenerator {
            config: config.clone(),
            decoders: self.decoders.iter().map(|d| d.bind_with(leaf)).collect(),
        }
    }

    /// Decoded means per modality, evaluated without gradients.
    pub fn decode(&self, config: &ModelConfig, latent: &LatentState) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let g = self.bind(config, &tape, false);
        let lv = LatentVars::bind(latent, &tape, false);
        Ok(g.decode_all(&lv)?.iter().map(Var::value).collect())
    }

    /// Per-item `log p(X | z, W)`.
    pub fn log_likelihood(
        &self,
        config: &ModelConfig,
        x: &MultimodalBatch,
        latent: &LatentState,
    ) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let g = self.bind(config, &tape, false);
        let lv = LatentVars::bind(latent, &tape, false);
        let xs = x.bind(&tape, false);
        Ok(g.log_likelihood(&xs, &lv, None)?.value().into_data())
    }
}

impl Parameters for GeneratorParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.decoders.iter().for_each(|d| d.collect(&mut out));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.decoders.iter_mut().for_each(|d| d.collect_mut(&mut out));
        out
    }
}

pub struct BoundGenerator<'t> {
    config: ModelConfig,
    decoders: Vec<BoundMlp<'t>>,
}

impl<'t> BoundGenerator<'t> {
    fn check_latent(&self, latent: &LatentVars<'t>) -> Result<()> {
        let z_shape = latent.z.shape();
        if z_shape.len() != 2 || z_shape[1] != self.config.latent_width() {
            return Err(Error::Shape {
                op: "generator_decode",
                lhs: z_shape,
                rhs: vec![0, self.config.latent_width()],
            });
        }
        let want_w = if self.config.modality_latent_dim > 0 { self.decoders.len() } else { 0 };
        if latent.w.len() != want_w {
            return Err(Error::invalid(format!(
                "generator expects {want_w} modality latents, got {}",
                latent.w.len()
            )));
        }
        Ok(())
    }

    /// Mean of modality `i`.
    pub fn decode(&self, i: usize, latent: &LatentVars<'t>) -> Result<Var<'t>> {
        self.check_latent(latent)?;
        let (start, len) = self.config.latent_block(i);
        let z = if start == 0 && len == self.config.latent_width() {
            latent.z
        } else {
            latent.z.narrow(1, start, len)?
        };
        let input = match latent.w.get(i) {
            Some(w) => Var::concat(&[z, *w], 1)?,
            None => z,
        };
        self.decoders[i].forward(input)
    }

    pub fn decode_all(&self, latent: &LatentVars<'t>) -> Result<Vec<Var<'t>>> {
        (0..self.decoders.len()).map(|i| self.decode(i, latent)).collect()
    }

    /// Per-item log-likelihood of modality `i`, `[B, 1]`.
    pub fn modality_log_likelihood(
        &self,
        i: usize,
        x: &Var<'t>,
        latent: &LatentVars<'t>,
    ) -> Result<Var<'t>> {
        let mean = self.decode(i, latent)?;
        let tape = x.tape();
        let log_var = tape.constant(Tensor::full(&[1, 1], self.config.decoder_log_var()));
        diag_gaussian_log_prob(x, &mean, &log_var)
    }

    /// `sum_{i in mask} log p(x_i | z, w_i)` per item, `[B, 1]`. `None` means
    /// every modality.
    pub fn log_likelihood(
        &self,
        xs: &[Var<'t>],
        latent: &LatentVars<'t>,
        mask: Option<&[bool]>,
    ) -> Result<Var<'t>> {
        if xs.len() != self.decoders.len() {
            return Err(Error::invalid(format!(
                "generator expects {} modalities, got {}",
                self.decoders.len(),
                xs.len()
            )));
        }
        let mut total: Option<Var<'t>> = None;
        for (i, x) in xs.iter().enumerate() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let ll = self.modality_log_likelihood(i, x, latent)?;
            total = Some(match total {
                Some(t) => t.add(&ll)?,
                None => ll,
            });
        }
        total.ok_or_else(|| Error::invalid("log-likelihood over an empty modality set"))
    }

    /// Squared-error part of `-log p(X|z)`: `sum_i ||x_i - mu_i||^2 / (2 sigma^2)`
    /// per item, `[B, 1]`.
    pub fn reconstruction_error(&self, xs: &[Var<'t>], latent: &LatentVars<'t>) -> Result<Var<'t>> {
        let inv = 0.5 / (self.config.decoder_sigma * self.config.decoder_sigma);
        let mut total: Option<Var<'t>> = None;
        for (i, x) in xs.iter().enumerate() {
            let r = self.decode(i, latent)?.sub(x)?.square().sum_axis(1)?.scale(inv);
            total = Some(match total {
                Some(t) => t.add(&r)?,
                None => r,
            });
        }
        total.ok_or_else(|| Error::invalid("reconstruction over zero modalities"))
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        self.decoders.iter().for_each(|d| d.collect(&mut out));
        out
    }
}
