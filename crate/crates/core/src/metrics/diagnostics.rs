use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::models::{LatentState, ModelTriple};
use crate::samplers::ChainRecord;
use crate::tensor::Tensor;

use super::gaussian::GaussianMoments;

#[derive(Clone, Debug, PartialEq)]
pub struct ChainReport {
    /// `||sample mean - target mean||`.
    pub mean_error: f64,
    /// `||sample cov - target cov||_F`.
    pub cov_error: f64,
    /// `cov_error / ||target cov||_F`.
    pub cov_rel_error: f64,
    /// Mean of [`ChainRecord::monotone_fraction`] over records.
    pub monotone_fraction: f64,
    pub profile_len: usize,
    pub samples: usize,
}

/// Pools the first state tensor of every recorded step `>= burn_in` and
/// compares its moments with `target`. Zero-spread pools count as zero
/// covariance.
pub fn chain_diagnostics(records: &[ChainRecord], target: &GaussianMoments, burn_in: usize) -> Result<ChainReport> {
    if records.is_empty() {
        return Err(Error::invalid("chain diagnostics over zero records"));
    }
    let d = target.dim();
    let mut rows: Vec<f64> = Vec::new();
    for r in records {
        if r.states.is_empty() {
            return Err(Error::invalid("chain record stores no states"));
        }
        for (step, s) in &r.states {
            if *step >= burn_in {
                if s[0].row_len() != d {
                    return Err(Error::Shape {
                        op: "chain_diagnostics",
                        lhs: s[0].shape().to_vec(),
                        rhs: vec![d],
                    });
                }
                rows.extend_from_slice(s[0].data());
            }
        }
    }
    let n = rows.len() / d.max(1);
    if n == 0 {
        return Err(Error::invalid("no states after burn-in"));
    }
    let pooled = Tensor::new(vec![n, d], rows)?;
    let moments = if n >= 2 {
        GaussianMoments::from_samples(&pooled)?
    } else {
        GaussianMoments {
            mean: nalgebra::DVector::from_column_slice(pooled.data()),
            cov: DMatrix::zeros(d, d),
        }
    };
    let cov_error = (&moments.cov - &target.cov).norm();
    let target_norm = target.cov.norm();
    Ok(ChainReport {
        mean_error: (&moments.mean - &target.mean).norm(),
        cov_error,
        cov_rel_error: if target_norm > 0.0 { cov_error / target_norm } else { cov_error },
        monotone_fraction: records.iter().map(ChainRecord::monotone_fraction).sum::<f64>() / records.len() as f64,
        profile_len: records[0].profile.len(),
        samples: n,
    })
}

/// Decodes `(1 - a) z_a + a z_b` at `steps` evenly spaced `a` in `[0, 1]`.
/// Returns one `[steps, d_i]` tensor per modality.
pub fn latent_interpolation(models: &ModelTriple, z_a: &LatentState, z_b: &LatentState, steps: usize) -> Result<Vec<Tensor>> {
    if z_a.batch_size() != 1 || z_b.batch_size() != 1 {
        return Err(Error::invalid("interpolation endpoints must be single latents"));
    }
    if z_a.parts().iter().zip(z_b.parts()).any(|(a, b)| a.shape() != b.shape()) || z_a.w.len() != z_b.w.len() {
        return Err(Error::invalid("interpolation endpoints differ in width"));
    }
    if steps == 0 {
        return Err(Error::invalid("interpolation needs at least one step"));
    }
    let lerp = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
        let d = a.row_len();
        let mut data = Vec::with_capacity(steps * d);
        for k in 0..steps {
            let t = if steps == 1 { 0.0 } else { k as f64 / (steps - 1) as f64 };
            data.extend(a.data().iter().zip(b.data()).map(|(x, y)| {
                if t == 0.0 {
                    *x
                } else if t == 1.0 {
                    *y
                } else {
                    (1.0 - t) * x + t * y
                }
            }));
        }
        Tensor::new(vec![steps, d], data)
    };
    let path = LatentState {
        z: lerp(&z_a.z, &z_b.z)?,
        w: z_a.w.iter().zip(&z_b.w).map(|(a, b)| lerp(a, b)).collect::<Result<_>>()?,
    };
    models.generator.decode(&models.config, &path)
}
