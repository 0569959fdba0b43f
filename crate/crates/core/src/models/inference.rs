use super::mlp::leaf_binder;
use super::{diag_gaussian_log_prob, BoundLinear, BoundMlp, Linear, Mlp, ModelConfig, MultimodalBatch, Parameters};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Gaussian expert `q_i(z | x_i)` with a diagonal covariance. The log-variance
/// head starts at zero so fresh experts have unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub trunk: Option<Mlp>,
    pub mean_head: Linear,
    pub log_var_head: Linear,
}

impl Encoder {
    fn init(input: usize, hidden: &[usize], output: usize, config: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        let (trunk, width) = if hidden.is_empty() {
            (None, input)
        } else {
            let mut sizes = vec![input];
            sizes.extend(hidden);
            (Some(Mlp::init(&sizes, config.activation, true, rng)?), *hidden.last().unwrap())
        };
        Ok(Self {
            trunk,
            mean_head: Linear::init(width, output, rng)?,
            log_var_head: Linear::zeros(width, output),
        })
    }

    fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundEncoder<'t> {
        self.bind_with(&mut leaf_binder(tape, trainable))
    }

    fn bind_with<'t>(&self, leaf: &mut dyn FnMut(&Tensor) -> Var<'t>) -> BoundEncoder<'t> {
        BoundEncoder {
            trunk: self.trunk.as_ref().map(|t| t.bind_with(leaf)),
            mean_head: self.mean_head.bind_with(leaf),
            log_var_head: self.log_var_head.bind_with(leaf),
        }
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        if let Some(t) = &self.trunk {
            t.collect(out);
        }
        self.mean_head.collect(out);
        self.log_var_head.collect(out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        if let Some(t) = &mut self.trunk {
            t.collect_mut(out);
        }
        self.mean_head.collect_mut(out);
        self.log_var_head.collect_mut(out);
    }
}

struct BoundEncoder<'t> {
    trunk: Option<BoundMlp<'t>>,
    mean_head: BoundLinear<'t>,
    log_var_head: BoundLinear<'t>,
}

impl<'t> BoundEncoder<'t> {
    fn forward(&self, x: Var<'t>) -> Result<BoundExpert<'t>> {
        let h = match &self.trunk {
            Some(t) => t.forward(x)?,
            None => x,
        };
        Ok(BoundExpert {
            mean: self.mean_head.forward(h)?,
            log_var: self.log_var_head.forward(h)?.clamp(LOG_VAR_MIN, LOG_VAR_MAX),
        })
    }

    fn collect(&self, out: &mut Vec<Var<'t>>) {
        if let Some(t) = &self.trunk {
            t.collect(out);
        }
        self.mean_head.collect(out);
        self.log_var_head.collect(out);
    }
}

/// One encoder per modality over `z`, plus one per modality over `w_i` when
/// modality-specific latents are enabled.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceParams {
    pub encoders: Vec<Encoder>,
    pub w_encoders: Vec<Encoder>,
}

/// Detached expert parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianExpert {
    pub mean: Tensor,
    pub log_var: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundExpert<'t> {
    pub mean: Var<'t>,
    pub log_var: Var<'t>,
}

impl<'t> BoundExpert<'t> {
    pub fn value(&self) -> GaussianExpert {
        GaussianExpert {
            mean: self.mean.value(),
            log_var: self.log_var.value(),
        }
    }

    /// Per-item `log N(z; mean, diag(exp(log_var)))`, `[B, 1]`.
    pub fn log_prob(&self, z: &Var<'t>) -> Result<Var<'t>> {
        diag_gaussian_log_prob(z, &self.mean, &self.log_var)
    }
}

impl InferenceParams {
    pub fn init(config: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        let encoders = config
            .modality_dims
            .iter()
            .map(|&d| Encoder::init(d, &config.inference_hidden, config.latent_width(), config, rng))
            .collect::<Result<Vec<_>>>()?;
        let w_encoders = if config.modality_latent_dim > 0 {
            config
                .modality_dims
                .iter()
                .map(|&d| Encoder::init(d, &config.inference_hidden, config.modality_latent_dim, config, rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self { encoders, w_encoders })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundInference<'t> {
        self.bind_with(&mut leaf_binder(tape, trainable))
    }

    /// Binds with caller-made leaves, requested in [`Parameters::tensors`] order.
    pub fn bind_with<'t>(&self, leaf: &mut dyn FnMut(&Tensor) -> Var<'t>) -> BoundInference<'t> {
        BoundInference {
            encoders: self.encoders.iter().map(|e| e.bind_with(leaf)).collect(),
            w_encoders: self.w_encoders.iter().map(|e| e.bind_with(leaf)).collect(),
        }
    }

    /// Detached `(z experts, w experts)`.
    pub fn encode(&self, x: &MultimodalBatch) -> Result<(Vec<GaussianExpert>, Vec<GaussianExpert>)> {
        let tape = Tape::new();
        let b = self.bind(&tape, false);
        let xs = x.bind(&tape, false);
        let z = b.encode(&xs)?.iter().map(BoundExpert::value).collect();
        let w = b.encode_w(&xs)?.iter().map(BoundExpert::value).collect();
        Ok((z, w))
    }

    /// Expert for modality `i` alone.
    pub fn encode_one(&self, i: usize, x: &Tensor) -> Result<GaussianExpert> {
        let enc = self
            .encoders
            .get(i)
            .ok_or_else(|| Error::invalid(format!("no encoder for modality {i}")))?;
        let tape = Tape::new();
        let b = enc.bind(&tape, false);
        Ok(b.forward(tape.constant(x.clone()))?.value())
    }

    pub fn encode_w_one(&self, i: usize, x: &Tensor) -> Result<GaussianExpert> {
        let enc = self
            .w_encoders
            .get(i)
            .ok_or_else(|| Error::invalid(format!("no w encoder for modality {i}")))?;
        let tape = Tape::new();
        let b = enc.bind(&tape, false);
        Ok(b.forward(tape.constant(x.clone()))?.value())
    }
}

impl Parameters for InferenceParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.encoders.iter().for_each(|e| e.collect(&mut out));
        self.w_encoders.iter().for_each(|e| e.collect(&mut out));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.encoders.iter_mut().for_each(|e| e.collect_mut(&mut out));
        self.w_encoders.iter_mut().for_each(|e| e.collect_mut(&mut out));
        out
    }
}

pub struct BoundInference<'t> {
    encoders: Vec<BoundEncoder<'t>>,
    w_encoders: Vec<BoundEncoder<'t>>,
}

impl<'t> BoundInference<'t> {
    pub fn encode(&self, xs: &[Var<'t>]) -> Result<Vec<BoundExpert<'t>>> {
        if xs.len() != self.encoders.len() {
            return Err(Error::invalid(format!(
                "inference expects {} modalities, got {}",
                self.encoders.len(),
                xs.len()
            )));
        }
        self.encoders.iter().zip(xs).map(|(e, x)| e.forward(*x)).collect()
    }

    pub fn encode_w(&self, xs: &[Var<'t>]) -> Result<Vec<BoundExpert<'t>>> {
        self.w_encoders.iter().zip(xs).map(|(e, x)| e.forward(*x)).collect()
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        self.encoders.iter().for_each(|e| e.collect(&mut out));
        self.w_encoders.iter().for_each(|e| e.collect(&mut out));
        out
    }
}

/// One reparameterized draw `mean + exp(log_var / 2) * eps` per expert.
pub fn inference_sample(experts: &[GaussianExpert], rng: &mut RngStream) -> Result<Vec<Tensor>> {
    experts
        .iter()
        .map(|e| {
            let std = e.log_var.map(|l| (0.5 * l).exp());
            rng.gaussian_sample(e.mean.shape(), &e.mean, &std)
        })
        .collect()
}

/// Taped reparameterization with externally supplied noise.
pub fn reparameterize<'t>(expert: &BoundExpert<'t>, eps: Tensor) -> Result<Var<'t>> {
    let tape = expert.mean.tape();
    let eps = tape.constant(eps);
    expert.log_var.scale(0.5).exp().mul(&eps)?.add(&expert.mean)
}

/// `log((1/M) sum_i N(z; mean_i, V_i))` per item, `[B, 1]`, via a stable
/// log-mean-exp over experts.
pub fn moe_log_prob<'t>(experts: &[BoundExpert<'t>], z: &Var<'t>) -> Result<Var<'t>> {
    if experts.is_empty() {
        return Err(Error::invalid("mixture with zero experts"));
    }
    let per: Vec<Var<'t>> = experts.iter().map(|e| e.log_prob(z)).collect::<Result<_>>()?;
    if per.len() == 1 {
        return Ok(per[0]);
    }
    let m = per.len() as f64;
    Ok(Var::concat(&per, 1)?.logsumexp(1)?.add_scalar(-m.ln()))
}
