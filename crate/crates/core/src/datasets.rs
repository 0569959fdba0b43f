//! Deterministic synthetic multimodal datasets.
//!
//! * `linear_gaussian`: `x_i = A_i z + sigma eps`, `z ~ N(0, I)`; exposes the
//!   ground truth so posteriors can be checked in closed form.
//! * `glyph`: 8x8 procedural class glyphs rendered in per-modality styles.
//! * `gmm2d`: two 2-D modalities sharing a mixture component index.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::MultimodalBatch;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const GLYPH_SIDE: usize = 8;
/// Upper bound on glyph classes the generator can keep well separated.
pub const MAX_GLYPH_CLASSES: usize = 32;
/// Minimum pairwise Hamming distance between class glyphs.
const GLYPH_MIN_HAMMING: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    LinearGaussian,
    Glyph,
    Gmm2d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearGaussianParams {
    pub latent_dim: usize,
    /// Width of each modality; its length must equal `num_modalities`.
    pub dims: Vec<usize>,
    pub noise_std: f64,
}

impl Default for LinearGaussianParams {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            dims: vec![3, 3],
            noise_std: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlyphParams {
    pub classes: usize,
    pub noise_std: f64,
}

impl Default for GlyphParams {
    fn default() -> Self {
        Self {
            classes: 10,
            noise_std: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Gmm2dParams {
    pub components: usize,
    pub radius: f64,
    pub component_std: f64,
    /// Angle between the two modalities' circles, radians.
    pub rotation: f64,
}

impl Default for Gmm2dParams {
    fn default() -> Self {
        Self {
            components: 4,
            radius: 0.75,
            component_std: 0.05,
            rotation: PI / 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub num_modalities: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub linear_gaussian: LinearGaussianParams,
    pub glyph: GlyphParams,
    pub gmm2d: Gmm2dParams,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Glyph,
            num_modalities: 3,
            train_size: 10_000,
            test_size: 2_000,
            seed: 0,
            linear_gaussian: LinearGaussianParams::default(),
            glyph: GlyphParams::default(),
            gmm2d: Gmm2dParams::default(),
        }
    }
}

impl DatasetSpec {
    pub fn glyph(num_modalities: usize, classes: usize, seed: u64) -> Self {
        Self {
            kind: DatasetKind::Glyph,
            num_modalities,
            seed,
            glyph: GlyphParams {
                classes,
                ..GlyphParams::default()
            },
            ..Self::default()
        }
    }

    pub fn gmm2d(seed: u64) -> Self {
        Self {
            kind: DatasetKind::Gmm2d,
            num_modalities: 2,
            seed,
            ..Self::default()
        }
    }

    pub fn linear_gaussian(latent_dim: usize, dims: Vec<usize>, noise_std: f64, seed: u64) -> Self {
        Self {
            kind: DatasetKind::LinearGaussian,
            num_modalities: dims.len(),
            seed,
            linear_gaussian: LinearGaussianParams {
                latent_dim,
                dims,
                noise_std,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_modalities == 0 {
            return Err(Error::Config("dataset.num_modalities must be >= 1".into()));
        }
        if self.train_size == 0 {
            return Err(Error::Config("dataset.train_size must be >= 1".into()));
        }
        match self.kind {
            DatasetKind::LinearGaussian => {
                let p = &self.linear_gaussian;
                if p.dims.len() != self.num_modalities {
                    return Err(Error::Config(format!(
                        "dataset.linear_gaussian.dims has {} entries for {} modalities",
                        p.dims.len(),
                        self.num_modalities
                    )));
                }
                if p.latent_dim == 0 || p.dims.contains(&0) || p.noise_std < 0.0 {
                    return Err(Error::Config("dataset.linear_gaussian: invalid sizes or noise".into()));
                }
            }
            DatasetKind::Glyph => {
                let c = self.glyph.classes;
                if c < 2 || c > MAX_GLYPH_CLASSES {
                    return Err(Error::Config(format!(
                        "dataset.glyph.classes = {c}: must lie in [2, {MAX_GLYPH_CLASSES}]"
                    )));
                }
                if self.glyph.noise_std < 0.0 {
                    return Err(Error::Config("dataset.glyph.noise_std must be >= 0".into()));
                }
            }
            DatasetKind::Gmm2d => {
                if self.num_modalities != 2 {
                    return Err(Error::Config("dataset.gmm2d needs num_modalities = 2".into()));
                }
                if self.gmm2d.components == 0 || self.gmm2d.component_std < 0.0 {
                    return Err(Error::Config("dataset.gmm2d: invalid components or std".into()));
                }
            }
        }
        Ok(())
    }

    /// Data width of each modality.
    pub fn modality_dims(&self) -> Vec<usize> {
        match self.kind {
            DatasetKind::LinearGaussian => self.linear_gaussian.dims.clone(),
            DatasetKind::Glyph => vec![GLYPH_SIDE * GLYPH_SIDE; self.num_modalities],
            DatasetKind::Gmm2d => vec![2; 2],
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.kind {
            DatasetKind::LinearGaussian => None,
            DatasetKind::Glyph => Some(self.glyph.classes),
            DatasetKind::Gmm2d => Some(self.gmm2d.components),
        }
    }

    pub fn build(&self) -> Result<Dataset> {
        self.validate()?;
        match self.kind {
            DatasetKind::LinearGaussian => make_linear_gaussian_dataset(self),
            DatasetKind::Glyph => make_glyph_multimodal_dataset(self),
            DatasetKind::Gmm2d => make_gmm2d_dataset(self),
        }
    }
}

/// One split: per-modality matrices `[N, d_i]` plus optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub modalities: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
    /// Ground-truth latents (linear-Gaussian only).
    pub latents: Option<Tensor>,
}

/// A single multimodal item with its shared class label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub x: Vec<Vec<f64>>,
    pub label: usize,
}

impl Split {
    pub fn len(&self) -> usize {
        self.modalities.first().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, idx: &[usize]) -> MultimodalBatch {
        MultimodalBatch {
            modalities: self.modalities.iter().map(|m| m.select_rows(idx)).collect(),
        }
    }

    pub fn labels_at(&self, idx: &[usize]) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect())
    }

    pub fn all(&self) -> MultimodalBatch {
        MultimodalBatch {
            modalities: self.modalities.clone(),
        }
    }

    pub fn sample(&self, i: usize) -> Option<LabeledSample> {
        let label = self.labels.as_ref()?[i];
        Some(LabeledSample {
            x: self.modalities.iter().map(|m| m.row(i).to_vec()).collect(),
            label,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianTruth {
    /// Loading matrices `A_i`, `[d_i, d_z]`.
    pub loadings: Vec<Tensor>,
    pub noise_std: f64,
    pub latent_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Split,
    pub test: Split,
    pub truth: Option<LinearGaussianTruth>,
}

impl Dataset {
    pub fn modality_dims(&self) -> Vec<usize> {
        self.train.modalities.iter().map(|m| m.shape()[1]).collect()
    }
}

pub fn make_linear_gaussian_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let p = &spec.linear_gaussian;
    let mut rng = RngStream::new(spec.seed, "dataset/linear_gaussian/loadings");
    let scale = 1.0 / (p.latent_dim as f64).sqrt();
    let loadings: Vec<Tensor> = p
        .dims
        .iter()
        .map(|&d| rng.normal_tensor(&[d, p.latent_dim]).scale(scale))
        .collect();
    let truth = LinearGaussianTruth {
        loadings,
        noise_std: p.noise_std,
        latent_dim: p.latent_dim,
    };
    let train = sample_linear_gaussian(&truth, spec.train_size, &mut RngStream::new(spec.seed, "dataset/train"))?;
    let test = sample_linear_gaussian(&truth, spec.test_size, &mut RngStream::new(spec.seed, "dataset/test"))?;
    Ok(Dataset {
        spec: spec.clone(),
        train,
        test,
        truth: Some(truth),
    })
}

/// Draws `n` items from a linear-Gaussian model with the given loadings.
pub fn sample_linear_gaussian(truth: &LinearGaussianTruth, n: usize, rng: &mut RngStream) -> Result<Split> {
    let z = rng.normal_tensor(&[n, truth.latent_dim]);
    let modalities = truth
        .loadings
        .iter()
        .map(|a| {
            let mut x = z.matmul(&a.transpose()?)?;
            if truth.noise_std > 0.0 {
                let eps = rng.normal_tensor(x.shape());
                x.axpy(truth.noise_std, &eps)?;
            }
            Ok(x)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Split {
        modalities,
        labels: None,
        latents: Some(z),
    })
}

/// Binary class glyphs, `classes x 64`, pairwise Hamming distance >= 8.
pub fn class_glyphs(classes: usize, seed: u64) -> Result<Vec<Vec<bool>>> {
    if classes > MAX_GLYPH_CLASSES {
        return Err(Error::invalid(format!(
            "{classes} glyph classes requested; at most {MAX_GLYPH_CLASSES} are distinguishable"
        )));
    }
    let mut rng = RngStream::new(seed, "dataset/glyph/shapes");
    let mut glyphs: Vec<Vec<bool>> = Vec::with_capacity(classes);
    while glyphs.len() < classes {
        // Random 6x6 interior, one-pixel margin for translations.
        let mut g = vec![false; GLYPH_SIDE * GLYPH_SIDE];
        for r in 1..GLYPH_SIDE - 1 {
            for c in 1..GLYPH_SIDE - 1 {
                g[r * GLYPH_SIDE + c] = rng.uniform() < 0.45;
            }
        }
        let far = glyphs
            .iter()
            .all(|h| h.iter().zip(&g).filter(|(a, b)| a != b).count() >= GLYPH_MIN_HAMMING);
        if far {
            glyphs.push(g);
        }
    }
    Ok(glyphs)
}

/// Per-modality rendering style.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphStyle {
    pub background: Vec<f64>,
    pub on_value: f64,
    pub off_value: f64,
    pub shift: (isize, isize),
}

pub fn modality_styles(num_modalities: usize, seed: u64) -> Vec<GlyphStyle> {
    const SHIFTS: [(isize, isize); 5] = [(0, 0), (1, 0), (0, 1), (-1, 0), (0, -1)];
    (0..num_modalities)
        .map(|i| {
            let mut rng = RngStream::new(seed, &format!("dataset/glyph/style/{i}"));
            let fx = rng.uniform_range(0.5, 2.0);
            let fy = rng.uniform_range(0.5, 2.0);
            let phase = rng.uniform_range(0.0, 2.0 * PI);
            let background = (0..GLYPH_SIDE * GLYPH_SIDE)
                .map(|p| {
                    let (r, c) = ((p / GLYPH_SIDE) as f64, (p % GLYPH_SIDE) as f64);
                    0.2 * (fx * c + phase).sin() * (fy * r).cos()
                })
                .collect();
            let contrast = 0.55 + 0.1 * (i % 3) as f64;
            let offset = -0.05 * (i % 4) as f64;
            GlyphStyle {
                background,
                on_value: offset + contrast,
                off_value: offset - contrast,
                shift: SHIFTS[i % SHIFTS.len()],
            }
        })
        .collect()
}

/// Noise-free rendering of `glyph` in `style`.
pub fn render_glyph(glyph: &[bool], style: &GlyphStyle) -> Vec<f64> {
    let n = GLYPH_SIDE as isize;
    (0..GLYPH_SIDE * GLYPH_SIDE)
        .map(|p| {
            let (r, c) = ((p / GLYPH_SIDE) as isize, (p % GLYPH_SIDE) as isize);
            let (sr, sc) = (r - style.shift.0, c - style.shift.1);
            let on = sr >= 0 && sr < n && sc >= 0 && sc < n && glyph[(sr * n + sc) as usize];
            let base = if on { style.on_value } else { style.off_value };
            base + style.background[p]
        })
        .collect()
}

pub fn make_glyph_multimodal_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let glyphs = class_glyphs(spec.glyph.classes, spec.seed)?;
    let styles = modality_styles(spec.num_modalities, spec.seed);
    let prototypes: Vec<Vec<Vec<f64>>> = styles
        .iter()
        .map(|s| glyphs.iter().map(|g| render_glyph(g, s)).collect())
        .collect();
    let make = |n: usize, tag: &str| -> Result<Split> {
        let mut rng = RngStream::new(spec.seed, tag);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(spec.glyph.classes)).collect();
        let d = GLYPH_SIDE * GLYPH_SIDE;
        let modalities = prototypes
            .iter()
            .map(|protos| {
                let mut data = Vec::with_capacity(n * d);
                for &l in &labels {
                    for &v in &protos[l] {
                        let noisy = v + spec.glyph.noise_std * rng.normal();
                        data.push(noisy.clamp(-1.0, 1.0));
                    }
                }
                Tensor::new(vec![n, d], data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Split {
            modalities,
            labels: Some(labels),
            latents: None,
        })
    };
    Ok(Dataset {
        spec: spec.clone(),
        train: make(spec.train_size, "dataset/train")?,
        test: make(spec.test_size, "dataset/test")?,
        truth: None,
    })
}

/// Component means `(modality 1, modality 2)` for each mixture index.
pub fn gmm2d_means(p: &Gmm2dParams) -> Vec<([f64; 2], [f64; 2])> {
    (0..p.components)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / p.components as f64;
            let a = [p.radius * t.cos(), p.radius * t.sin()];
            let b = [p.radius * (t + p.rotation).cos(), p.radius * (t + p.rotation).sin()];
            (a, b)
        })
        .collect()
}

pub fn make_gmm2d_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let p = &spec.gmm2d;
    let means = gmm2d_means(p);
    let make = |n: usize, tag: &str| -> Result<Split> {
        let mut rng = RngStream::new(spec.seed, tag);
        let mut a = Vec::with_capacity(2 * n);
        let mut b = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = rng.below(p.components);
            labels.push(k);
            for d in 0..2 {
                a.push(means[k].0[d] + p.component_std * rng.normal());
            }
            for d in 0..2 {
                b.push(means[k].1[d] + p.component_std * rng.normal());
            }
        }
        Ok(Split {
            modalities: vec![Tensor::new(vec![n, 2], a)?, Tensor::new(vec![n, 2], b)?],
            labels: Some(labels),
            latents: None,
        })
    };
    Ok(Dataset {
        spec: spec.clone(),
        train: make(spec.train_size, "dataset/train")?,
        test: make(spec.test_size, "dataset/test")?,
        truth: None,
    })
}

/// Position of a [`BatchIterator`], enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IteratorState {
    pub epoch: u64,
    pub cursor: u64,
}

/// Seeded epoch shuffles; the trailing partial batch of each epoch is dropped.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    perm: Vec<usize>,
}

impl BatchIterator {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        Self::resume(n, batch_size, seed, IteratorState { epoch: 0, cursor: 0 })
    }

    pub fn resume(n: usize, batch_size: usize, seed: u64, state: IteratorState) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("batch iterator over an empty dataset"));
        }
        if batch_size == 0 || batch_size > n {
            return Err(Error::invalid(format!(
                "batch size {batch_size} must lie in [1, {n}]"
            )));
        }
        let mut it = Self {
            n,
            batch_size,
            seed,
            epoch: state.epoch,
            cursor: state.cursor as usize,
            perm: Vec::new(),
        };
        it.perm = it.shuffle(state.epoch);
        Ok(it)
    }

    fn shuffle(&self, epoch: u64) -> Vec<usize> {
        RngStream::new(self.seed, &format!("shuffle/{epoch}")).permutation(self.n)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch_size
    }

    pub fn state(&self) -> IteratorState {
        IteratorState {
            epoch: self.epoch,
            cursor: self.cursor as u64,
        }
    }

    /// Indices of the next batch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.n {
            self.epoch += 1;
            self.cursor = 0;
            self.perm = self.shuffle(self.epoch);
        }
        let idx = self.perm[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        idx
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_indices())
    }
}
