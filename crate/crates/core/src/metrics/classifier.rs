use crate::autodiff::Tape;
use crate::datasets::Split;
use crate::error::{Error, Result};
use crate::learning::{adam_step, AdamHyper, AdamState};
use crate::models::{Activation, InferenceParams, Mlp, ModelTriple, MultimodalBatch};
use crate::rng::RngStream;
use crate::samplers::{sample_conditional, LangevinConfig};
use crate::tensor::Tensor;

use super::gaussian::{frechet_distance_gaussians, GaussianMoments};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    /// Hidden widths; empty gives a linear softmax model.
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn mlp(seed: u64) -> Self {
        Self {
            hidden: vec![64],
            steps: 600,
            batch_size: 64,
            lr: 3e-3,
            seed,
        }
    }

    pub fn linear(seed: u64) -> Self {
        Self {
            hidden: Vec::new(),
            steps: 1500,
            batch_size: 128,
            lr: 1e-2,
            seed,
        }
    }
}

/// Softmax classifier over standardized inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxClassifier {
    pub net: Mlp,
    pub classes: usize,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl SoftmaxClassifier {
    pub fn train(x: &Tensor, labels: &[usize], classes: usize, cfg: &ClassifierConfig) -> Result<Self> {
        let (n, d) = (x.rows(), x.row_len());
        if n != labels.len() || n == 0 {
            return Err(Error::invalid(format!("{n} inputs for {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {classes})")));
        }
        let mut shift = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for i in 0..n {
            for (j, v) in x.row(i).iter().enumerate() {
                shift[j] += v / n as f64;
            }
        }
        for i in 0..n {
            for (j, v) in x.row(i).iter().enumerate() {
                scale[j] += (v - shift[j]).powi(2) / n as f64;
            }
        }
        if scale.iter().all(|&s| s < 1e-24) {
            return Err(Error::invalid("classifier inputs are constant"));
        }
        let scale = scale.iter().map(|s| 1.0 / s.sqrt().max(1e-6)).collect();
        let mut rng = RngStream::new(cfg.seed, "classifier");
        let mut sizes = vec![d];
        sizes.extend(&cfg.hidden);
        sizes.push(classes);
        let net = Mlp::init(&sizes, Activation::Relu, false, &mut rng)?;
        let mut clf = Self { net, classes, shift, scale };
        let xs = clf.standardize(x);
        let mut params: Vec<&mut Tensor> = Vec::new();
        clf.net.collect_mut(&mut params);
        let mut opt = AdamState::new(&params.iter().map(|p| &**p).collect::<Vec<_>>());
        drop(params);
        let hp = AdamHyper { rate: cfg.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let bs = cfg.batch_size.min(n);
        for _ in 0..cfg.steps {
            let idx: Vec<usize> = (0..bs).map(|_| rng.below(n)).collect();
            let xb = xs.select_rows(&idx);
            let mut onehot = Tensor::zeros(&[bs, classes]);
            for (r, &i) in idx.iter().enumerate() {
                onehot.data_mut()[r * classes + labels[i]] = 1.0;
            }
            let tape = Tape::new();
            let bound = clf.net.bind(&tape, true);
            let logits = bound.forward(tape.constant(xb))?;
            let lse = logits.logsumexp(1)?;
            let picked = logits.mul(&tape.constant(onehot))?.sum_axis(1)?;
            let loss = lse.sub(&picked)?.mean();
            let g = tape.backward(loss)?;
            let mut vars = Vec::new();
            bound.collect(&mut vars);
            let grads: Vec<Tensor> = vars.iter().map(|v| g.wrt(v)).collect();
            let mut params: Vec<&mut Tensor> = Vec::new();
            clf.net.collect_mut(&mut params);
            adam_step(&mut params, &grads, &mut opt, hp)?;
        }
        Ok(clf)
    }

    fn standardize(&self, x: &Tensor) -> Tensor {
        let d = self.shift.len();
        let mut out = x.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = (*v - self.shift[j]) * self.scale[j];
        }
        out
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.ndim() != 2 || x.row_len() != self.shift.len() {
            return Err(Error::Shape {
                op: "classifier",
                lhs: x.shape().to_vec(),
                rhs: vec![0, self.shift.len()],
            });
        }
        let tape = Tape::new();
        let (out, pen) = self.net.bind(&tape, false).forward_with_penultimate(tape.constant(self.standardize(x)))?;
        Ok((out.value(), pen.value()))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.0)
    }

    /// Input to the output layer (the standardized input for linear models).
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.1)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows())
            .map(|i| {
                let r = logits.row(i);
                (0..r.len()).fold(0, |best, j| if r[j] > r[best] { j } else { best })
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let p = self.predict(x)?;
        Ok(p.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64)
    }
}

/// One classifier per modality, with its held-out accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyClassifier {
    pub nets: Vec<SoftmaxClassifier>,
    pub accuracies: Vec<f64>,
}

impl ToyClassifier {
    pub const REQUIRED_ACCURACY: f64 = 0.95;

    pub fn train(train: &Split, test: &Split, classes: usize, seed: u64) -> Result<Self> {
        let (train_y, test_y) = match (&train.labels, &test.labels) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::invalid("classifier needs labelled splits")),
        };
        let mut nets = Vec::new();
        let mut accuracies = Vec::new();
        for (i, (xtr, xte)) in train.modalities.iter().zip(&test.modalities).enumerate() {
            let cfg = ClassifierConfig::mlp(seed.wrapping_add(i as u64));
            let net = SoftmaxClassifier::train(xtr, train_y, classes, &cfg)?;
            accuracies.push(net.accuracy(xte, test_y)?);
            nets.push(net);
        }
        Ok(Self { nets, accuracies })
    }

    pub fn min_accuracy(&self) -> f64 {
        self.accuracies.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Fails unless every modality's classifier meets [`Self::REQUIRED_ACCURACY`].
    pub fn require(&self) -> Result<()> {
        let accuracy = self.min_accuracy();
        if accuracy < Self::REQUIRED_ACCURACY {
            return Err(Error::ClassifierPrecondition {
                accuracy,
                required: Self::REQUIRED_ACCURACY,
            });
        }
        Ok(())
    }

    fn predictions(&self, x: &MultimodalBatch) -> Result<Vec<Vec<usize>>> {
        if x.num_modalities() != self.nets.len() {
            return Err(Error::invalid(format!(
                "{} classifiers for {} modalities",
                self.nets.len(),
                x.num_modalities()
            )));
        }
        self.nets.iter().zip(&x.modalities).map(|(n, m)| n.predict(m)).collect()
    }
}

/// Fraction of items whose modalities are all assigned the same class.
pub fn unconditional_coherence(x: &MultimodalBatch, clf: &ToyClassifier) -> Result<f64> {
    clf.require()?;
    let preds = clf.predictions(x)?;
    let b = x.batch_size();
    let agree = (0..b).filter(|&i| preds.iter().all(|p| p[i] == preds[0][i])).count();
    Ok(agree as f64 / b.max(1) as f64)
}

/// Fraction of (item, scored modality) pairs classified as the item's target
/// class.
pub fn conditional_coherence(
    x: &MultimodalBatch,
    targets: &[usize],
    scored: &[bool],
    clf: &ToyClassifier,
) -> Result<f64> {
    clf.require()?;
    if targets.len() != x.batch_size() || scored.len() != x.num_modalities() {
        return Err(Error::invalid("targets or scored mask do not match the batch"));
    }
    let preds = clf.predictions(x)?;
    let mut hit = 0usize;
    let mut total = 0usize;
    for (p, _) in preds.iter().zip(scored).filter(|(_, &s)| s) {
        for (a, b) in p.iter().zip(targets) {
            total += 1;
            hit += usize::from(a == b);
        }
    }
    if total == 0 {
        return Err(Error::invalid("no modality selected for scoring"));
    }
    Ok(hit as f64 / total as f64)
}

/// Mean conditional coherence over every subset of exactly `observed`
/// modalities: generate all modalities from the subset and score each against
/// the item's label.
pub fn cross_modal_coherence(
    models: &ModelTriple,
    x: &MultimodalBatch,
    targets: &[usize],
    observed: usize,
    cfg_z: &LangevinConfig,
    clf: &ToyClassifier,
    rng: &mut RngStream,
) -> Result<f64> {
    let m = x.num_modalities();
    if observed == 0 || observed > m || m >= usize::BITS as usize {
        return Err(Error::invalid(format!("cannot observe {observed} of {m} modalities")));
    }
    let masks: Vec<Vec<bool>> = (1usize..1 << m)
        .filter(|b| b.count_ones() as usize == observed)
        .map(|b| (0..m).map(|i| b >> i & 1 == 1).collect())
        .collect();
    let mut total = 0.0;
    for mask in &masks {
        let (generated, _) = sample_conditional(models, x, mask, cfg_z, rng)?;
        total += conditional_coherence(&generated, targets, &vec![true; m], clf)?;
    }
    Ok(total / masks.len() as f64)
}

/// Mean over modalities of the Fréchet distance between Gaussian fits of
/// classifier features for real and generated samples.
pub fn fid_surrogate(real: &MultimodalBatch, generated: &MultimodalBatch, clf: &ToyClassifier) -> Result<f64> {
    let mut total = 0.0;
    for ((net, r), g) in clf.nets.iter().zip(&real.modalities).zip(&generated.modalities) {
        let a = GaussianMoments::from_samples(&net.features(r)?)?;
        let b = GaussianMoments::from_samples(&net.features(g)?)?;
        total += frechet_distance_gaussians(&a, &b)?;
    }
    Ok(total / clf.nets.len() as f64)
}

/// Same as [`fid_surrogate`] on raw values.
pub fn fid_raw(real: &MultimodalBatch, generated: &MultimodalBatch) -> Result<f64> {
    let mut total = 0.0;
    for (r, g) in real.modalities.iter().zip(&generated.modalities) {
        let a = GaussianMoments::from_samples(r)?;
        let b = GaussianMoments::from_samples(g)?;
        total += frechet_distance_gaussians(&a, &b)?;
    }
    Ok(total / real.num_modalities() as f64)
}

/// Held-out accuracy of a linear softmax probe.
pub fn probe_accuracy(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    classes: usize,
    seed: u64,
) -> Result<f64> {
    let probe = SoftmaxClassifier::train(train_x, train_y, classes, &ClassifierConfig::linear(seed))?;
    probe.accuracy(test_x, test_y)
}

/// Linear probe on each expert's mean latent; mean held-out accuracy over
/// modalities.
pub fn latent_probe_accuracy(
    inference: &InferenceParams,
    train: &Split,
    test: &Split,
    classes: usize,
    seed: u64,
) -> Result<f64> {
    let (train_y, test_y) = match (&train.labels, &test.labels) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::invalid("latent probe needs labelled splits")),
    };
    let mut total = 0.0;
    for i in 0..train.modalities.len() {
        let ztr = inference.encode_one(i, &train.modalities[i])?.mean;
        let zte = inference.encode_one(i, &test.modalities[i])?.mean;
        let spread = GaussianMoments::from_samples(&ztr)?.cov.diagonal().max();
        if !(spread > 1e-12) {
            return Err(Error::invalid(format!("expert {i} produces constant latents")));
        }
        total += probe_accuracy(&ztr, train_y, &zte, test_y, classes, seed.wrapping_add(i as u64))?;
    }
    Ok(total / train.modalities.len() as f64)
}
