use super::trainer::{abort_limit, train_step, AbortRecord, RunOutput, StepOutcome, TrainState};
use crate::datasets::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::io::RunConfig;

/// One arm of a sweep.
#[derive(Clone, Debug)]
pub struct SweepArm {
    pub label: String,
    pub output: RunOutput,
    /// Median wall-clock seconds over completed steps.
    pub median_step_secs: f64,
}

/// Trains every config on `dataset` in lockstep, one step of each arm per
/// round, so slow drift in machine speed hits all arms alike. Each arm's
/// result equals that of its own `train_loop`.
pub fn interleaved_sweep(arms: &[(String, RunConfig)], dataset: &Dataset) -> Result<Vec<SweepArm>> {
    let mut runs = Vec::with_capacity(arms.len());
    for (_, cfg) in arms {
        cfg.validate()?;
        let iter = BatchIterator::new(dataset.train.len(), cfg.train.batch_size, cfg.seed)?;
        runs.push((TrainState::init(cfg)?, iter, Vec::new(), Vec::new()));
    }
    let longest = arms.iter().map(|(_, c)| c.train.total_steps).max().unwrap_or(0);
    for _ in 0..longest {
        for ((_, cfg), (state, iter, reports, aborts)) in arms.iter().zip(runs.iter_mut()) {
            if state.step >= cfg.train.total_steps {
                continue;
            }
            let batch = dataset.train.batch(&iter.next_indices());
            let outcome = train_step(state, &batch, cfg)?;
            state.batches = iter.state();
            match outcome {
                StepOutcome::Completed(r) => reports.push(r),
                StepOutcome::Aborted { step, error } => {
                    aborts.push(AbortRecord {
                        step,
                        class: error.class(),
                        message: error.to_string(),
                    });
                    if state.aborted > abort_limit(cfg.train.total_steps) {
                        return Err(Error::TooManyAborts {
                            aborted: state.aborted,
                            steps: cfg.train.total_steps,
                        });
                    }
                }
            }
        }
    }
    Ok(arms
        .iter()
        .zip(runs)
        .map(|((label, _), (state, _, reports, aborts))| {
            let mut secs: Vec<f64> = reports.iter().map(|r| r.wall_clock_secs).collect();
            secs.sort_by(f64::total_cmp);
            let median_step_secs = if secs.is_empty() { 0.0 } else { secs[secs.len() / 2] };
            SweepArm {
                label: label.clone(),
                output: RunOutput { state, reports, aborts },
                median_step_secs,
            }
        })
        .collect())
}
