use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamHyper, AdamState};
use super::losses::{ebm_loss_and_grad, generator_loss_and_grad, inference_loss_and_grad, LossGrad};
use crate::datasets::{BatchIterator, Dataset, IteratorState};
use crate::error::{Error, Result};
use crate::io::{checkpoint, MetricsWriter, RunDir, TimingWriter};
use crate::io::RunConfig;
use crate::models::{ModelTriple, MultimodalBatch, Parameters};
use crate::rng::RngStream;
use crate::samplers::{draw_omega, draw_phi, langevin_data_chain};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Cooperative,
    /// Energy model alone, chains started from uniform noise on `[-1, 1]`.
    MleEbm,
    /// Each decoder reads its own latent block.
    IndependentGenerator,
    /// Each inference expert is refined and scored against its own modality.
    IndependentInference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub lr_generator: f64,
    pub lr_energy: f64,
    pub lr_inference: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub mode: TrainMode,
    /// Add `sigma * eps` to the generator's output before the data chain.
    pub observation_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            total_steps: 1000,
            lr_generator: 1e-3,
            lr_energy: 4e-4,
            lr_inference: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            mode: TrainMode::Cooperative,
            observation_noise: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        for (name, lr) in [
            ("lr_generator", self.lr_generator),
            ("lr_energy", self.lr_energy),
            ("lr_inference", self.lr_inference),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("train.adam_eps must be positive".into()));
        }
        Ok(())
    }

    fn hyper(&self, rate: f64) -> AdamHyper {
        AdamHyper {
            rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Losses of one completed step. `energy_data` and `energy_revised` are mean
/// scores `F` (higher means more probable).
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub ebm_loss: f64,
    pub generator_recon_loss: f64,
    pub generator_sync_loss: f64,
    pub inference_loss: f64,
    pub energy_data: f64,
    pub energy_revised: f64,
    pub wall_clock_secs: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.ebm_loss,
            self.generator_recon_loss,
            self.generator_sync_loss,
            self.inference_loss,
            self.energy_data,
            self.energy_revised,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of steps taken, including aborted ones.
    pub step: u64,
    pub models: ModelTriple,
    pub energy_opt: AdamState,
    pub generator_opt: AdamState,
    pub inference_opt: AdamState,
    pub rng: RngStream,
    pub batches: IteratorState,
    pub aborted: u64,
}

impl TrainState {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let model_cfg = cfg.resolved_model()?;
        let models = ModelTriple::init(&model_cfg, &RngStream::new(cfg.seed, "init"))?;
        Ok(Self::from_models(models, cfg.seed))
    }

    pub fn from_models(models: ModelTriple, seed: u64) -> Self {
        Self {
            step: 0,
            energy_opt: AdamState::new(&models.energy.tensors()),
            generator_opt: AdamState::new(&models.generator.tensors()),
            inference_opt: AdamState::new(&models.inference.tensors()),
            models,
            rng: RngStream::new(seed, "train"),
            batches: IteratorState { epoch: 0, cursor: 0 },
            aborted: 0,
        }
    }
}

#[derive(Debug)]
pub enum StepOutcome {
    Completed(LossReport),
    /// Numerical failure; parameters and optimizer state were left untouched.
    Aborted { step: u64, error: Error },
}

struct Pending {
    energy: LossGrad,
    generator: Option<(LossGrad, f64, f64)>,
    inference: Option<LossGrad>,
    energy_data: f64,
    energy_revised: f64,
}

fn check_grads(lg: &LossGrad, what: &str) -> Result<()> {
    if lg.grads.iter().all(Tensor::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite { what: format!("{what} gradient") })
    }
}

fn compute(models: &ModelTriple, batch: &MultimodalBatch, cfg: &RunConfig, rng: &mut RngStream) -> Result<Pending> {
    if cfg.train.mode == TrainMode::MleEbm {
        let x_init = MultimodalBatch::new(
            batch
                .modalities
                .iter()
                .map(|m| rng.uniform_tensor(m.shape(), -1.0, 1.0))
                .collect(),
        )?;
        let (x_rev, _) = langevin_data_chain(&x_init, models, &cfg.sampler_x, rng)?;
        let ebm = ebm_loss_and_grad(&models.energy, batch, &x_rev, &cfg.sampler_x)?;
        check_grads(&ebm.loss_grad, "ebm")?;
        return Ok(Pending {
            energy: ebm.loss_grad,
            generator: None,
            inference: None,
            energy_data: ebm.mean_f_data,
            energy_revised: ebm.mean_f_revised,
        });
    }
    let config = &models.config;
    let phi = draw_phi(batch, models, &cfg.sampler_z, rng)?;
    let omega = draw_omega(models, batch.batch_size(), &cfg.sampler_x, cfg.train.observation_noise, rng)?;
    let ebm = ebm_loss_and_grad(&models.energy, batch, &omega.x_revised, &cfg.sampler_x)?;
    let gen = generator_loss_and_grad(
        config,
        &models.generator,
        batch,
        &phi.z_revised,
        &omega.z_prior,
        &omega.x_revised,
    )?;
    let inf = inference_loss_and_grad(
        config,
        &models.inference,
        &phi.z_revised,
        batch,
        &omega.z_prior,
        &omega.x_revised,
    )?;
    check_grads(&ebm.loss_grad, "ebm")?;
    check_grads(&gen.loss_grad, "generator")?;
    check_grads(&inf, "inference")?;
    Ok(Pending {
        energy: ebm.loss_grad,
        generator: Some((gen.loss_grad, gen.recon, gen.sync)),
        inference: Some(inf),
        energy_data: ebm.mean_f_data,
        energy_revised: ebm.mean_f_revised,
    })
}

/// One cooperative update: draw every sample at the current parameters,
/// then update the energy, generator and inference models in that order.
pub fn train_step(state: &mut TrainState, batch: &MultimodalBatch, cfg: &RunConfig) -> Result<StepOutcome> {
    let started = Instant::now();
    state.step += 1;
    let step = state.step;
    let pending = match compute(&state.models, batch, cfg, &mut state.rng) {
        Ok(p) => p,
        Err(e) if e.is_numerical() => {
            state.aborted += 1;
            return Ok(StepOutcome::Aborted { step, error: e });
        }
        Err(e) => return Err(e),
    };
    let tc = &cfg.train;
    adam_step(
        &mut state.models.energy.tensors_mut(),
        &pending.energy.grads,
        &mut state.energy_opt,
        tc.hyper(tc.lr_energy),
    )?;
    let (mut recon, mut sync, mut inf_loss) = (0.0, 0.0, 0.0);
    if let Some((g, r, s)) = &pending.generator {
        adam_step(
            &mut state.models.generator.tensors_mut(),
            &g.grads,
            &mut state.generator_opt,
            tc.hyper(tc.lr_generator),
        )?;
        recon = *r;
        sync = *s;
    }
    if let Some(g) = &pending.inference {
        adam_step(
            &mut state.models.inference.tensors_mut(),
            &g.grads,
            &mut state.inference_opt,
            tc.hyper(tc.lr_inference),
        )?;
        inf_loss = g.loss;
    }
    Ok(StepOutcome::Completed(LossReport {
        step,
        ebm_loss: pending.energy.loss,
        generator_recon_loss: recon,
        generator_sync_loss: sync,
        inference_loss: inf_loss,
        energy_data: pending.energy_data,
        energy_revised: pending.energy_revised,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbortRecord {
    pub step: u64,
    pub class: &'static str,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub state: TrainState,
    /// Every completed step, not only the rows written at the metric cadence.
    pub reports: Vec<LossReport>,
    pub aborts: Vec<AbortRecord>,
}

pub(crate) fn abort_limit(total_steps: u64) -> u64 {
    total_steps / 100
}

/// Trains from a fresh initialization.
pub fn train_loop(cfg: &RunConfig, dataset: &Dataset, out: Option<&RunDir>) -> Result<RunOutput> {
    cfg.validate()?;
    let state = TrainState::init(cfg)?;
    continue_training(cfg, dataset, state, out)
}

/// Runs `state` forward to `cfg.train.total_steps`. Writes metrics, timing,
/// checkpoints and a manifest when `out` is given.
pub fn continue_training(
    cfg: &RunConfig,
    dataset: &Dataset,
    mut state: TrainState,
    out: Option<&RunDir>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let total = cfg.train.total_steps;
    if state.step > total {
        return Err(Error::invalid(format!(
            "state is at step {} beyond train.total_steps = {total}",
            state.step
        )));
    }
    let hash = cfg.hash()?;
    let mut iter = BatchIterator::resume(dataset.train.len(), cfg.train.batch_size, cfg.seed, state.batches)?;
    let mut writers = match out {
        Some(dir) => {
            checkpoint::save(&dir.checkpoint_path(state.step), &state, &hash)?;
            let (m, t) = (dir.path().join("metrics.csv"), dir.path().join("timing.csv"));
            Some(if state.step == 0 {
                (MetricsWriter::create(&m)?, TimingWriter::create(&t)?)
            } else {
                (MetricsWriter::resume(&m, state.step)?, TimingWriter::resume(&t, state.step)?)
            })
        }
        None => None,
    };
    let mut reports = Vec::new();
    let mut aborts = Vec::new();
    while state.step < total {
        let idx = iter.next_indices();
        let batch = dataset.train.batch(&idx);
        let outcome = train_step(&mut state, &batch, cfg)?;
        state.batches = iter.state();
        match outcome {
            StepOutcome::Completed(report) => {
                if let Some((metrics, timing)) = writers.as_mut() {
                    timing.row(report.step, report.wall_clock_secs)?;
                    if report.step % cfg.output.metrics_every == 0 {
                        metrics.train_row(&report)?;
                    }
                }
                reports.push(report);
            }
            StepOutcome::Aborted { step, error } => {
                let record = AbortRecord {
                    step,
                    class: error.class(),
                    message: error.to_string(),
                };
                if let Some((metrics, _)) = writers.as_mut() {
                    metrics.abort_row(&record)?;
                }
                aborts.push(record);
                if state.aborted > abort_limit(total) {
                    return Err(Error::TooManyAborts {
                        aborted: state.aborted,
                        steps: total,
                    });
                }
            }
        }
        if let Some(dir) = out {
            let ck = cfg.output.checkpoint_every;
            if (ck > 0 && state.step % ck == 0) || state.step == total {
                checkpoint::save(&dir.checkpoint_path(state.step), &state, &hash)?;
            }
        }
    }
    if let Some(dir) = out {
        if let Some((metrics, timing)) = writers.as_mut() {
            metrics.flush()?;
            timing.flush()?;
        }
        let mut extra = vec![
            ("final_step".to_string(), state.step.to_string()),
            ("aborted_steps".to_string(), state.aborted.to_string()),
        ];
        if let Some(last) = reports.last() {
            extra.push(("final_ebm_loss".into(), crate::io::fmt_f64(last.ebm_loss)));
            extra.push(("final_generator_recon_loss".into(), crate::io::fmt_f64(last.generator_recon_loss)));
            extra.push(("final_inference_loss".into(), crate::io::fmt_f64(last.inference_loss)));
        }
        dir.write_manifest("train", cfg, &extra)?;
    }
    Ok(RunOutput {
        state,
        reports,
        aborts,
    })
}
