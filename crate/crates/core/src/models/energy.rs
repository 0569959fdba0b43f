use super::mlp::leaf_binder;
use super::{BoundMlp, Mlp, ModelConfig, MultimodalBatch, Parameters};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Multimodal energy `F(X) = agg(concat_i f_i(x_i))`. Higher values mean
/// higher unnormalized density.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyParams {
    pub features: Vec<Mlp>,
    pub aggregator: Mlp,
}

impl EnergyParams {
    pub fn init(config: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        let features = config
            .modality_dims
            .iter()
            .map(|&d| {
                let mut sizes = vec![d];
                sizes.extend(&config.energy_hidden);
                sizes.push(config.energy_feature_dim);
                Mlp::init(&sizes, config.activation, true, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut sizes = vec![config.energy_feature_dim * config.num_modalities()];
        sizes.extend(&config.aggregator_hidden);
        sizes.push(1);
        let aggregator = Mlp::init(&sizes, config.activation, false, rng)?;
        Ok(Self {
            features,
            aggregator,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundEnergy<'t> {
        self.bind_with(&mut leaf_binder(tape, trainable))
    }

    /// Binds with caller-made leaves, requested in [`Parameters::tensors`] order.
    pub fn bind_with<'t>(&self, leaf: &mut dyn FnMut(&Tensor) -> Var<'t>) -> BoundEnergy<'t> {
        BoundEnergy {
            features: self.features.iter().map(|f| f.bind_with(leaf)).collect(),
            aggregator: self.aggregator.bind_with(leaf),
        }
    }

    /// Per-item energies `[B]` without recording gradients.
    pub fn energies(&self, x: &MultimodalBatch) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let xs = x.bind(&tape, false);
        Ok(bound.energy(&xs)?.value().into_data())
    }
}

impl Parameters for EnergyParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.features.iter().for_each(|f| f.collect(&mut out));
        self.aggregator.collect(&mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.features.iter_mut().for_each(|f| f.collect_mut(&mut out));
        self.aggregator.collect_mut(&mut out);
        out
    }
}

pub struct BoundEnergy<'t> {
    features: Vec<BoundMlp<'t>>,
    aggregator: BoundMlp<'t>,
}

impl<'t> BoundEnergy<'t> {
    /// Energies `[B, 1]`.
    pub fn energy(&self, xs: &[Var<'t>]) -> Result<Var<'t>> {
        if xs.len() != self.features.len() {
            return Err(Error::invalid(format!(
                "energy expects {} modalities, got {}",
                self.features.len(),
                xs.len()
            )));
        }
        let feats = self
            .features
            .iter()
            .zip(xs)
            .map(|(f, x)| f.forward(*x))
            .collect::<Result<Vec<_>>>()?;
        let h = if feats.len() == 1 { feats[0] } else { Var::concat(&feats, 1)? };
        self.aggregator.forward(h)
    }

    /// Vars in [`Parameters::tensors`] order.
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        self.features.iter().for_each(|f| f.collect(&mut out));
        self.aggregator.collect(&mut out);
        out
    }
}
